use super::{contract_name, expand_name, Binder, ModelConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::ffn_space::{evaluate_dag, LayerWeights, LinearWeights, StackWeights};
use crate::tensor::{Tape, Tensor, Var};

/// A rectangular batch of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    /// `false` marks keys that attention must ignore.
    pub key_mask: Option<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq_len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Input("ragged batch".into()));
        }
        Ok(TokenBatch {
            ids: rows.concat(),
            batch: rows.len(),
            seq_len,
            key_mask: None,
        })
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.ids.len() {
            return Err(Error::Input("key mask does not cover the batch".into()));
        }
        self.key_mask = Some(mask);
        Ok(self)
    }

    /// Rows `range` of this batch.
    pub fn rows(&self, start: usize, len: usize) -> TokenBatch {
        let (a, b) = (start * self.seq_len, (start + len) * self.seq_len);
        TokenBatch {
            ids: self.ids[a..b].to_vec(),
            batch: len,
            seq_len: self.seq_len,
            key_mask: self.key_mask.as_ref().map(|m| m[a..b].to_vec()),
        }
    }
}

/// Which output layer to compute on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head<'s> {
    None,
    Task(&'s str),
    Mlm,
}

/// Everything distillation reads from a forward pass.
///
/// Embeddings and hidden states are `[batch * seq, d]`; attention maps are
/// `[batch, heads, seq, seq]`; task logits `[batch, width]`; MLM logits `[batch * seq, vocab]`.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    pub embeddings: Var,
    pub attentions: Vec<Var>,
    pub hidden: Vec<Var>,
    pub logits: Option<Var>,
    pub batch: usize,
    pub seq_len: usize,
}

fn linear<'a>(
    tape: &mut Tape<'a>,
    b: &mut Binder<'a>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<LinearWeights> {
    Ok(LinearWeights {
        weight: b.bind(tape, &format!("{prefix}.weight"), &[fan_in, fan_out])?,
        bias: b.bind(tape, &format!("{prefix}.bias"), &[fan_out])?,
    })
}

fn norm<'a>(
    tape: &mut Tape<'a>,
    b: &mut Binder<'a>,
    prefix: &str,
    x: Var,
    d: usize,
) -> Result<Var> {
    let g = b.bind(tape, &format!("{prefix}.gamma"), &[d])?;
    let beta = b.bind(tape, &format!("{prefix}.beta"), &[d])?;
    tape.layer_norm(x, g, beta, LN_EPS)
}

/// Post-LN encoder forward pass.
///
/// `cfg` is the logical architecture; the binder's store may hold larger tensors, in which
/// case every parameter is read through a leading-block view (the supernet slicing rule).
pub fn forward<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    head: Head<'_>,
) -> Result<ForwardArtifacts> {
    let (bsz, t, d, nh) = (batch.batch, batch.seq_len, cfg.hidden, cfg.num_heads);
    let dh = cfg.head_dim();
    if t > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {t} exceeds {}",
            cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if cfg.genotype.layers.len() != cfg.num_layers {
        return Err(Error::Contract(
            "genotype depth differs from num_layers".into(),
        ));
    }
    let rows = bsz * t;

    // factorized embedding plus learned positions, then layer norm
    let table = binder.bind(tape, "embed.tokens", &[cfg.vocab_size, cfg.embed_dim])?;
    let tok = tape.gather_rows(table, &batch.ids)?;
    let proj = linear(tape, binder, "embed.proj", cfg.embed_dim, d)?;
    let tok = proj.apply(tape, tok)?;
    let pos_table = binder.bind(tape, "embed.pos", &[cfg.max_len, d])?;
    let pos_ids: Vec<usize> = (0..rows).map(|i| i % t).collect();
    let pos = tape.gather_rows(pos_table, &pos_ids)?;
    let x = tape.add(tok, pos)?;
    let embeddings = norm(tape, binder, "embed.ln", x, d)?;

    let mask_bias = batch.key_mask.as_ref().map(|m| {
        Tensor::from_fn(&[bsz, nh, t, t], |i| {
            let (b, key) = (i / (nh * t * t), i % t);
            if m[b * t + key] {
                0.0
            } else {
                -1e9
            }
        })
    });
    let mask_bias = mask_bias.map(|m| tape.constant(m));

    let mut h = embeddings;
    let mut attentions = Vec::with_capacity(cfg.num_layers);
    let mut hidden = Vec::with_capacity(cfg.num_layers);
    for (l, spec) in cfg.genotype.layers.iter().enumerate() {
        let split = |tape: &mut Tape<'a>, binder: &mut Binder<'a>, p: &str| -> Result<Var> {
            let y = linear(tape, binder, &format!("layer{l}.attn.{p}"), d, d)?.apply(tape, h)?;
            let y = tape.reshape(y, &[bsz, t, nh, dh])?;
            tape.transpose(y, 1, 2)
        };
        let q = split(tape, binder, "q")?;
        let k = split(tape, binder, "k")?;
        let v = split(tape, binder, "v")?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask_bias {
            scores = tape.add(scores, m)?;
        }
        let a = tape.softmax(scores, 3)?;
        attentions.push(a);
        let ctx = tape.matmul(a, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[rows, d])?;
        let o = linear(tape, binder, &format!("layer{l}.attn.o"), d, d)?.apply(tape, ctx)?;
        let x = tape.add(h, o)?;
        let x = norm(tape, binder, &format!("layer{l}.attn_ln"), x, d)?;

        let w = spec.width(cfg.d_ref);
        let mut weights = LayerWeights::default();
        for s in 0..spec.stack as usize {
            let mut sw = StackWeights::default();
            for slot in 0..spec.count_linear(true) {
                sw.expand
                    .push(linear(tape, binder, &expand_name(l, s, slot), d, w)?);
            }
            for slot in 0..spec.count_linear(false) {
                sw.contract
                    .push(linear(tape, binder, &contract_name(l, s, slot), w, d)?);
            }
            weights.stacks.push(sw);
        }
        let f = evaluate_dag(tape, spec, x, &weights)?;
        let y = tape.add(x, f)?;
        h = norm(tape, binder, &format!("layer{l}.ffn_ln"), y, d)?;
        hidden.push(h);
    }

    let logits = match head {
        Head::None => None,
        Head::Task(name) => {
            let spec = cfg
                .head(name)
                .ok_or_else(|| Error::Contract(format!("no task head `{name}`")))?;
            let h3 = tape.reshape(h, &[bsz, t, d])?;
            let first = tape.narrow(h3, 1, 0, 1)?;
            let pooled = tape.reshape(first, &[bsz, d])?;
            let lin = linear(tape, binder, &format!("head.{name}"), d, spec.width)?;
            Some(lin.apply(tape, pooled)?)
        }
        Head::Mlm => {
            if !cfg.mlm_head {
                return Err(Error::Contract("model has no token-prediction head".into()));
            }
            let lin = linear(tape, binder, "mlm", d, cfg.vocab_size)?;
            Some(lin.apply(tape, h)?)
        }
    };

    Ok(ForwardArtifacts {
        embeddings,
        attentions,
        hidden,
        logits,
        batch: bsz,
        seq_len: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSpec, Model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        let cfg = ModelConfig::standard(2, 8, 2, 16, 20, 6)
            .with_heads(vec![HeadSpec::new("cls", 3)], true);
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = small();
        let batch = TokenBatch::new(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8]]).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params);
        let art = forward(&mut tape, &mut b, &m.cfg, &batch, Head::Task("cls")).unwrap();
        assert_eq!(art.attentions.len(), 2);
        assert_eq!(art.hidden.len(), 2);
        for a in &art.attentions {
            assert_eq!(tape.dims(*a), &[2, 2, 4, 4]);
            for row in tape.value(*a).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(tape.dims(art.logits.unwrap()), &[2, 3]);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut m = small();
        for n in ["head.cls.weight", "head.cls.bias"] {
            m.params.get_mut(n).unwrap().values_mut().fill(0.0);
        }
        let batch = TokenBatch::new(&[vec![3, 1, 4]]).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params);
        let art = forward(&mut tape, &mut b, &m.cfg, &batch, Head::Task("cls")).unwrap();
        let p = tape.softmax(art.logits.unwrap(), 1).unwrap();
        for v in tape.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_vocab_and_overlong_inputs_rejected() {
        let m = small();
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params);
        let bad = TokenBatch::new(&[vec![1, 20]]).unwrap();
        assert!(matches!(
            forward(&mut tape, &mut b, &m.cfg, &bad, Head::None),
            Err(Error::Input(_))
        ));
        let long = TokenBatch::new(&[vec![1; 7]]).unwrap();
        assert!(matches!(
            forward(&mut tape, &mut b, &m.cfg, &long, Head::None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn masked_keys_get_no_attention() {
        let m = small();
        let batch = TokenBatch::new(&[vec![1, 2, 3]])
            .unwrap()
            .with_key_mask(vec![true, true, false])
            .unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params);
        let art = forward(&mut tape, &mut b, &m.cfg, &batch, Head::None).unwrap();
        for row in tape.value(art.attentions[0]).chunks(3) {
            assert!(row[2] < 1e-100);
        }
    }
}
