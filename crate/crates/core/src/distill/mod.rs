//! Layer-wise distillation losses: attention maps, hidden states, embeddings and
//! predictions, with learnable width alignment.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardArtifacts, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Student layer `m` distills from teacher layer `n`; both zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pairs: Vec<(usize, usize)>,
}

impl LayerMapping {
    pub fn new(pairs: Vec<(usize, usize)>, teacher_layers: usize) -> Result<Self> {
        for (i, &(m, n)) in pairs.iter().enumerate() {
            if m != i {
                return Err(Error::Contract(format!(
                    "student layer {i} missing or out of order"
                )));
            }
            if n >= teacher_layers {
                return Err(Error::Contract(format!(
                    "teacher layer {n} beyond depth {teacher_layers}"
                )));
            }
            if i > 0 && n <= pairs[i - 1].1 {
                return Err(Error::Contract(
                    "teacher layers must strictly increase".into(),
                ));
            }
        }
        Ok(LayerMapping { pairs })
    }

    /// `n = m * (T / S)` in one-based terms, so the top student layer meets the top teacher layer
    /// when depths divide.
    pub fn uniform(student_layers: usize, teacher_layers: usize) -> Result<Self> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(Error::Contract(format!(
                "cannot map {student_layers} student layers onto {teacher_layers}"
            )));
        }
        let pairs = (0..student_layers)
            .map(|m| (m, (m + 1) * teacher_layers / student_layers - 1))
            .collect();
        Self::new(pairs, teacher_layers)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// How the prediction term compares logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionLoss {
    /// Soft cross-entropy at temperature `t`.
    SoftCrossEntropy,
    /// Squared error, for regression heads.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub gamma: f64,
    pub temperature: f64,
    pub prediction: PredictionLoss,
}

impl KdConfig {
    /// Pre-training: intermediate layers only.
    pub fn pretrain() -> Self {
        KdConfig {
            gamma: 0.0,
            temperature: 1.0,
            prediction: PredictionLoss::SoftCrossEntropy,
        }
    }

    pub fn finetune(prediction: PredictionLoss) -> Self {
        KdConfig {
            gamma: 1.0,
            temperature: 1.0,
            prediction,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Contract(format!(
                "need t > 0 and gamma >= 0, got t = {}, gamma = {}",
                self.temperature, self.gamma
            )));
        }
        Ok(())
    }
}

pub const W_H: &str = "kd.w_h";
pub const W_E: &str = "kd.w_e";

/// Learnable `W_h` and `W_e`, both `[d_student, d_teacher]`.
pub fn alignment_params<R: Rng + ?Sized>(
    d_student: usize,
    d_teacher: usize,
    rng: &mut R,
) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(
        W_H,
        alignment_init(d_student, d_teacher, rng).with_requires_grad(true),
    );
    s.insert(
        W_E,
        alignment_init(d_student, d_teacher, rng).with_requires_grad(true),
    );
    s
}

/// Identity when square; otherwise a random matrix with orthonormal rows (or columns),
/// scaled so unit-variance inputs give unit-variance outputs.
pub fn alignment_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    if rows == cols {
        return Tensor::eye(rows, cols);
    }
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let scale = (cols as f64 / short as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let v = if rows >= cols { q[(r, c)] } else { q[(c, r)] };
        v * scale
    })
}

/// Teacher-side artifacts, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    pub embeddings: Tensor,
    pub attentions: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub logits: Option<Tensor>,
}

impl TeacherBundle {
    pub fn capture(tape: &Tape<'_>, art: &ForwardArtifacts) -> Self {
        TeacherBundle {
            embeddings: tape.to_tensor(art.embeddings),
            attentions: art.attentions.iter().map(|&a| tape.to_tensor(a)).collect(),
            hidden: art.hidden.iter().map(|&h| tape.to_tensor(h)).collect(),
            logits: art.logits.map(|z| tape.to_tensor(z)),
        }
    }

    /// Records the bundle as constants.
    pub fn inject(&self, tape: &mut Tape<'_>) -> ForwardArtifacts {
        let dims = self
            .attentions
            .first()
            .map(|a| a.dims().to_vec())
            .unwrap_or_default();
        ForwardArtifacts {
            embeddings: tape.constant(self.embeddings.clone()),
            attentions: self
                .attentions
                .iter()
                .map(|a| tape.constant(a.clone()))
                .collect(),
            hidden: self
                .hidden
                .iter()
                .map(|h| tape.constant(h.clone()))
                .collect(),
            logits: self.logits.as_ref().map(|z| tape.constant(z.clone())),
            batch: dims.first().copied().unwrap_or(0),
            seq_len: dims.get(2).copied().unwrap_or(0),
        }
    }
}

fn pick(v: &[Var], i: usize, who: &str) -> Result<Var> {
    v.get(i)
        .copied()
        .ok_or_else(|| Error::Contract(format!("{who} has no layer {i}")))
}

/// Mean over heads of the per-head MSE between attention maps, per student layer.
pub fn attn_loss(
    tape: &mut Tape<'_>,
    student: &[Var],
    teacher: &[Var],
    mapping: &LayerMapping,
) -> Result<(Vec<Var>, Var)> {
    let mut per_layer = Vec::with_capacity(mapping.pairs().len());
    for &(m, n) in mapping.pairs() {
        let (s, t) = (pick(student, m, "student")?, pick(teacher, n, "teacher")?);
        let (sd, td) = (tape.dims(s), tape.dims(t));
        if sd.len() != 4 || sd != td {
            return Err(Error::Contract(format!(
                "attention maps differ: student {sd:?}, teacher {td:?} (head counts must match)"
            )));
        }
        // equal-size heads: the mean of per-head MSEs is the MSE over all heads
        per_layer.push(tape.mse(s, t)?);
    }
    let total = sum_vars(tape, &per_layer)?;
    Ok((per_layer, total))
}

fn aligned_mse(tape: &mut Tape<'_>, s: Var, w: Var, t: Var, what: &str) -> Result<Var> {
    let (sd, wd, td) = (
        tape.dims(s).to_vec(),
        tape.dims(w).to_vec(),
        tape.dims(t).to_vec(),
    );
    if sd.len() != 2 || td.len() != 2 || wd != [sd[1], td[1]] || sd[0] != td[0] {
        return Err(Error::Contract(format!(
            "{what}: student {sd:?} x alignment {wd:?} does not match teacher {td:?}"
        )));
    }
    let p = tape.matmul(s, w)?;
    tape.mse(p, t)
}

/// Per-layer `MSE(H_s W_h, H_t)` and `MSE(E_s W_e, E_t)`.
#[allow(clippy::too_many_arguments)]
pub fn hidden_and_embed_loss(
    tape: &mut Tape<'_>,
    student_hidden: &[Var],
    teacher_hidden: &[Var],
    student_embed: Var,
    teacher_embed: Var,
    w_h: Var,
    w_e: Var,
    mapping: &LayerMapping,
) -> Result<(Vec<Var>, Var)> {
    let mut per_layer = Vec::with_capacity(mapping.pairs().len());
    for &(m, n) in mapping.pairs() {
        let (s, t) = (
            pick(student_hidden, m, "student")?,
            pick(teacher_hidden, n, "teacher")?,
        );
        per_layer.push(aligned_mse(tape, s, w_h, t, "hidden")?);
    }
    let embed = aligned_mse(tape, student_embed, w_e, teacher_embed, "embedding")?;
    Ok((per_layer, embed))
}

/// Soft cross-entropy `-sum softmax(z_t / t) log softmax(z_s / t)`, averaged over rows.
pub fn pred_loss(tape: &mut Tape<'_>, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let (sd, td) = (tape.dims(student).to_vec(), tape.dims(teacher).to_vec());
    if sd != td || sd.len() != 2 {
        return Err(Error::Contract(format!(
            "logits differ: student {sd:?}, teacher {td:?}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let zs = tape.scale(student, 1.0 / temperature);
    let zt = tape.scale(teacher, 1.0 / temperature);
    let p = tape.softmax(zt, 1)?;
    let logq = tape.log_softmax(zs);
    let prod = tape.mul(p, logq)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / sd[0] as f64))
}

fn sum_vars(tape: &mut Tape<'_>, vs: &[Var]) -> Result<Var> {
    let mut it = vs.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::Contract("nothing to sum".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Every term of the combined objective, as tape variables.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub attn: Vec<Var>,
    pub hidden: Vec<Var>,
    pub embed: Var,
    pub pred: Option<Var>,
    pub total: Var,
}

impl LossParts {
    pub fn record(&self, tape: &Tape<'_>, step: u64) -> LossRecord {
        let sum = |v: &[Var]| v.iter().map(|&x| tape.item(x)).sum::<f64>();
        LossRecord {
            step,
            l_attn: sum(&self.attn),
            l_hidn: sum(&self.hidden),
            l_embd: tape.item(self.embed),
            l_pred: self.pred.map_or(0.0, |p| tape.item(p)),
            total: tape.item(self.total),
        }
    }
}

/// `sum_m (attn_m + hidn_m) + embd + gamma * pred`; the prediction term is skipped at
/// `gamma = 0`.
pub fn total_loss(
    tape: &mut Tape<'_>,
    student: &ForwardArtifacts,
    teacher: &ForwardArtifacts,
    w_h: Var,
    w_e: Var,
    cfg: &KdConfig,
    mapping: &LayerMapping,
) -> Result<LossParts> {
    cfg.check()?;
    let (attn, attn_sum) = attn_loss(tape, &student.attentions, &teacher.attentions, mapping)?;
    let (hidden, embed) = hidden_and_embed_loss(
        tape,
        &student.hidden,
        &teacher.hidden,
        student.embeddings,
        teacher.embeddings,
        w_h,
        w_e,
        mapping,
    )?;
    let hidden_sum = sum_vars(tape, &hidden)?;
    let mut total = tape.add(attn_sum, hidden_sum)?;
    total = tape.add(total, embed)?;
    let mut pred = None;
    if cfg.gamma != 0.0 {
        let (zs, zt) = match (student.logits, teacher.logits) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::Contract(
                    "prediction term needs logits on both sides".into(),
                ))
            }
        };
        let p = match cfg.prediction {
            PredictionLoss::SoftCrossEntropy => pred_loss(tape, zs, zt, cfg.temperature)?,
            PredictionLoss::Mse => {
                if tape.dims(zs) != tape.dims(zt) {
                    return Err(Error::Contract(
                        "regression outputs differ in extent".into(),
                    ));
                }
                tape.mse(zs, zt)?
            }
        };
        let weighted = tape.scale(p, cfg.gamma);
        total = tape.add(total, weighted)?;
        pred = Some(p);
    }
    Ok(LossParts {
        attn,
        hidden,
        embed,
        pred,
        total,
    })
}

/// One line of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_attn: f64,
    pub l_hidn: f64,
    pub l_embd: f64,
    pub l_pred: f64,
    pub total: f64,
}

/// Writes records as JSON lines.
pub fn write_loss_log<W: Write>(mut out: W, records: &[LossRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
