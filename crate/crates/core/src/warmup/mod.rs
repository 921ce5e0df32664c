//! Warm-up distillation: supernet pre-training, frozen and activated supernet handles,
//! weight inheritance by slicing, and shared-weight sub-network updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{example_batch, mlm_batches, Corpus, TaskDataset, TaskKind, ToyTask};
use crate::distill::{
    total_loss, KdConfig, LayerMapping, LossRecord, PredictionLoss, TeacherBundle, W_E, W_H,
};
use crate::error::{Error, Result};
use crate::ffn_space::{validate, FfnGenotype, SpaceLimits};
use crate::model::{forward, Binder, Head, Model, ModelConfig, ParamStore, TokenBatch};
use crate::tensor::{AdamConfig, AdamState, Checkpoint, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Activated,
}

/// A supernet plus its distillation alignment matrices, guarded by a mode.
#[derive(Debug, Clone)]
pub struct SupernetHandle {
    model: Model,
    align: ParamStore,
    mode: Mode,
    stage: String,
    steps: u64,
}

impl SupernetHandle {
    pub fn new(model: Model, align: ParamStore, mode: Mode, stage: impl Into<String>) -> Self {
        SupernetHandle {
            model,
            align,
            mode,
            stage: stage.into(),
            steps: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn align(&self) -> &ParamStore {
        &self.align
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn freeze(mut self, stage: impl Into<String>) -> Self {
        self.mode = Mode::Frozen;
        self.stage = stage.into();
        self
    }

    pub fn activate(mut self, stage: impl Into<String>) -> Self {
        self.mode = Mode::Activated;
        self.stage = stage.into();
        self
    }

    fn require_active(&self, what: &str) -> Result<()> {
        match self.mode {
            Mode::Activated => Ok(()),
            Mode::Frozen => Err(Error::Mode(format!("{what} on a frozen supernet"))),
        }
    }

    /// Mutable access to the weights; refused while frozen.
    pub fn params_mut(&mut self) -> Result<(&mut ParamStore, &mut ParamStore)> {
        self.require_active("parameter access")?;
        Ok((&mut self.model.params, &mut self.align))
    }

    /// One optimizer update from gradients already accumulated on the parameters.
    pub fn adam_step(&mut self, opt: &mut AdamState) -> Result<()> {
        self.require_active("optimizer step")?;
        opt.step(
            self.model
                .params
                .with_grads_mut()
                .chain(self.align.with_grads_mut()),
        )?;
        self.model.params.zero_grads();
        self.align.zero_grads();
        self.steps += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let info = serde_json::json!({
            "mode": self.mode,
            "stage": self.stage,
            "steps": self.steps,
        });
        let mut ck = self.model.to_checkpoint(info)?;
        for (name, t) in self.align.iter() {
            ck.tensors.insert(name.to_string(), t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let info = ck.meta.get("info").cloned().unwrap_or_default();
        let mode: Mode = serde_json::from_value(info["mode"].clone())
            .map_err(|e| Error::Checkpoint(format!("supernet mode: {e}")))?;
        let stage = info["stage"].as_str().unwrap_or_default().to_string();
        let steps = info["steps"].as_u64().unwrap_or(0);
        let mut align = ParamStore::new();
        for name in [W_H, W_E] {
            let t = ck
                .tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            align.insert(name, t.with_requires_grad(true));
        }
        let model = Model::from_checkpoint(ck)?;
        Ok(SupernetHandle {
            model,
            align,
            mode,
            stage,
            steps,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> Result<String> {
        self.to_checkpoint()?.sha256()
    }
}

/// A batch with the teacher's outputs on it, computed once.
#[derive(Debug, Clone)]
pub struct CachedBatch {
    pub tokens: TokenBatch,
    pub labels: Option<Vec<f64>>,
    pub teacher: TeacherBundle,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: ToyTask,
    pub train: Vec<CachedBatch>,
    pub holdout: Vec<CachedBatch>,
}

impl TaskData {
    pub fn kd_config(&self) -> KdConfig {
        KdConfig::finetune(match self.task.kind() {
            TaskKind::Classification { .. } => PredictionLoss::SoftCrossEntropy,
            TaskKind::Regression => PredictionLoss::Mse,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextOptions {
    pub batch_size: usize,
    /// Distinct pre-training batches; longer runs cycle through them.
    pub pretrain_batches: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub student_layers: usize,
}

/// Everything distillation needs from the data and the teacher, precomputed.
///
/// Teacher bundles keep only the teacher layers the mapping uses, so the stored mapping is
/// the identity over student layers.
#[derive(Debug, Clone)]
pub struct KdContext {
    pub mapping: LayerMapping,
    pub teacher_mapping: LayerMapping,
    pub pretrain: Vec<CachedBatch>,
    pub tasks: Vec<TaskData>,
}

fn capture(
    teacher: &Model,
    tokens: TokenBatch,
    labels: Option<Vec<f64>>,
    head: Head<'_>,
    mapping: &LayerMapping,
) -> Result<CachedBatch> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&teacher.params);
    let art = forward(&mut tape, &mut b, &teacher.cfg, &tokens, head)?;
    let mut bundle = TeacherBundle::capture(&tape, &art);
    bundle.attentions = mapping
        .pairs()
        .iter()
        .map(|&(_, n)| bundle.attentions[n].clone())
        .collect();
    bundle.hidden = mapping
        .pairs()
        .iter()
        .map(|&(_, n)| bundle.hidden[n].clone())
        .collect();
    Ok(CachedBatch {
        tokens,
        labels,
        teacher: bundle,
    })
}

impl KdContext {
    pub fn build(
        teacher: &Model,
        corpus: &Corpus,
        tasks: &[TaskDataset],
        opts: &ContextOptions,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if corpus.sequences.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let teacher_mapping = LayerMapping::uniform(opts.student_layers, teacher.cfg.num_layers)?;
        let mapping = LayerMapping::new(
            (0..opts.student_layers).map(|m| (m, m)).collect(),
            opts.student_layers,
        )?;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let pretrain = mlm_batches(corpus, opts.mask_prob, opts.batch_size, rng)?
            .take(opts.pretrain_batches)
            .map(|b| capture(teacher, b.tokens, None, Head::None, &teacher_mapping))
            .collect::<Result<Vec<_>>>()?;
        let mut task_data = Vec::with_capacity(tasks.len());
        for ds in tasks {
            if ds.train.is_empty() || ds.holdout.is_empty() {
                return Err(Error::Input(format!(
                    "task `{}` has an empty split",
                    ds.name()
                )));
            }
            let name = ds.name();
            let chunk = |ex: &[crate::data::Example]| -> Result<Vec<CachedBatch>> {
                ex.chunks(opts.batch_size)
                    .map(|c| {
                        let (tokens, labels) = example_batch(c)?;
                        capture(
                            teacher,
                            tokens,
                            Some(labels),
                            Head::Task(name),
                            &teacher_mapping,
                        )
                    })
                    .collect()
            };
            task_data.push(TaskData {
                task: ds.task,
                train: chunk(&ds.train)?,
                holdout: chunk(&ds.holdout)?,
            });
        }
        Ok(KdContext {
            mapping,
            teacher_mapping,
            pretrain,
            tasks: task_data,
        })
    }

    pub fn task(&self, task: ToyTask) -> Result<&TaskData> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .ok_or_else(|| Error::Input(format!("task `{}` not loaded", task.name())))
    }
}

/// Forward, distillation loss and backward; gradients land on the stores.
fn kd_grads(
    params: &ParamStore,
    cfg: &ModelConfig,
    align: &ParamStore,
    batch: &CachedBatch,
    head: Head<'_>,
    kd: &KdConfig,
    mapping: &LayerMapping,
    step: u64,
    backward: bool,
) -> Result<(
    LossRecord,
    BTreeMap<String, Vec<f64>>,
    BTreeMap<String, Vec<f64>>,
    BTreeMap<String, Vec<bool>>,
)> {
    let mut tape = Tape::new();
    let mut b = Binder::new(params);
    let mut ba = Binder::new(align);
    let art = forward(&mut tape, &mut b, cfg, &batch.tokens, head)?;
    let teacher = batch.teacher.inject(&mut tape);
    let wd = |s: &ParamStore, n: &str| s.get(n).map(|t| t.dims().to_vec()).unwrap_or_default();
    let w_h = ba.bind(&mut tape, W_H, &wd(align, W_H))?;
    let w_e = ba.bind(&mut tape, W_E, &wd(align, W_E))?;
    let parts = total_loss(&mut tape, &art, &teacher, w_h, w_e, kd, mapping)?;
    let record = parts.record(&tape, step);
    if !record.total.is_finite() {
        return Err(Error::Diverged {
            step: step as usize,
            loss: record.total,
        });
    }
    if !backward {
        return Ok((record, BTreeMap::new(), BTreeMap::new(), BTreeMap::new()));
    }
    tape.backward(parts.total)?;
    Ok((record, b.grads(&tape), ba.grads(&tape), b.view_masks()))
}

/// One distillation update. With `restrict_to_views`, only the leading blocks the logical
/// architecture reads are updated (shared-weight training); otherwise all touched tensors are.
#[allow(clippy::too_many_arguments)]
pub fn kd_step(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    align: &mut ParamStore,
    opt: &mut AdamState,
    batch: &CachedBatch,
    head: Head<'_>,
    kd: &KdConfig,
    mapping: &LayerMapping,
    restrict_to_views: bool,
) -> Result<LossRecord> {
    let step = opt.step_count() + 1;
    let (record, g, ga, masks) =
        kd_grads(params, cfg, align, batch, head, kd, mapping, step, true)?;
    params.accumulate_grads(&g)?;
    align.accumulate_grads(&ga)?;
    if restrict_to_views {
        let full: BTreeMap<String, Vec<bool>> = align
            .iter()
            .map(|(n, t)| (n.to_string(), vec![true; t.numel()]))
            .collect();
        let entries = params
            .with_grads_mut()
            .map(|(n, t)| {
                (
                    n,
                    t,
                    masks.get(n).map(Vec::as_slice).expect("bound parameter"),
                )
            })
            .chain(
                align
                    .with_grads_mut()
                    .map(|(n, t)| (n, t, full[n].as_slice())),
            );
        opt.step_masked(entries)?;
    } else {
        opt.step(params.with_grads_mut().chain(align.with_grads_mut()))?;
    }
    params.zero_grads();
    align.zero_grads();
    Ok(record)
}

/// Distillation loss without any update.
pub fn kd_eval(
    params: &ParamStore,
    cfg: &ModelConfig,
    align: &ParamStore,
    batch: &CachedBatch,
    head: Head<'_>,
    kd: &KdConfig,
    mapping: &LayerMapping,
) -> Result<LossRecord> {
    Ok(kd_grads(params, cfg, align, batch, head, kd, mapping, 0, false)?.0)
}

/// KD pre-training of the complete supernet (intermediate layers only, gamma = 0).
pub fn pretrain_supernet(
    supernet: Model,
    align: ParamStore,
    ctx: &KdContext,
    steps: usize,
    lr: f64,
    mode: Mode,
) -> Result<(SupernetHandle, Vec<LossRecord>)> {
    let mut handle = SupernetHandle::new(supernet, align, Mode::Activated, "pretrain");
    let mut log = Vec::with_capacity(steps);
    if steps > 0 && ctx.pretrain.is_empty() {
        return Err(Error::Input("no pre-training batches".into()));
    }
    let mut opt = AdamState::new(AdamConfig::scheduled(lr, steps as u64));
    let cfg = handle.model.cfg.clone();
    for i in 0..steps {
        let batch = &ctx.pretrain[i % ctx.pretrain.len()];
        let (params, align) = handle.params_mut()?;
        log.push(kd_step(
            params,
            &cfg,
            align,
            &mut opt,
            batch,
            Head::None,
            &KdConfig::pretrain(),
            &ctx.mapping,
            false,
        )?);
        handle.steps += 1;
    }
    handle.mode = mode;
    Ok((handle, log))
}

fn candidate_config(handle: &SupernetHandle, genotype: &FfnGenotype) -> Result<ModelConfig> {
    let base = &handle.model.cfg;
    let report = validate(genotype, base.num_layers, &SpaceLimits::default());
    if !report.is_ok() {
        return Err(Error::Input(format!(
            "genotype not valid for this supernet: {}",
            report.violations.join("; ")
        )));
    }
    let cfg = base.clone().with_genotype(genotype.canonical());
    for (l, (c, s)) in cfg
        .genotype
        .layers
        .iter()
        .zip(&base.genotype.layers)
        .enumerate()
    {
        let (wc, ws) = (c.width(cfg.d_ref), s.width(base.d_ref));
        if c.stack > s.stack
            || wc > ws
            || c.count_linear(true) > s.count_linear(true)
            || c.count_linear(false) > s.count_linear(false)
        {
            return Err(Error::Capacity(format!(
                "layer {l} needs stack {}, width {wc}, {}+{} linears; supernet has {}, {ws}, {}+{}",
                c.stack,
                c.count_linear(true),
                c.count_linear(false),
                s.stack,
                s.count_linear(true),
                s.count_linear(false)
            )));
        }
    }
    Ok(cfg)
}

/// Materializes a candidate: stacks `1..=stack` from the bottom, leading channels of every
/// linear, embeddings, attention and heads copied whole.
pub fn inherit_weights(handle: &SupernetHandle, genotype: &FfnGenotype) -> Result<Model> {
    let cfg = candidate_config(handle, genotype)?;
    let mut params = ParamStore::new();
    for (name, dims, _) in cfg.param_specs() {
        let src = handle
            .model
            .params
            .get(&name)
            .ok_or_else(|| Error::Capacity(format!("supernet has no `{name}`")))?;
        params.insert(name, src.leading_slice(&dims)?.with_requires_grad(true));
    }
    Model::from_parts(cfg, params)
}

/// Alignment matrices to start a candidate's distillation from.
pub fn inherit_alignment(handle: &SupernetHandle) -> ParamStore {
    handle.align.clone()
}

/// Trains the candidate's slice of an activated supernet in place.
#[allow(clippy::too_many_arguments)]
pub fn shared_subnet_step(
    handle: &mut SupernetHandle,
    genotype: &FfnGenotype,
    batch: &CachedBatch,
    head: Head<'_>,
    kd: &KdConfig,
    mapping: &LayerMapping,
    opt: &mut AdamState,
) -> Result<LossRecord> {
    handle.require_active("shared sub-network step")?;
    let cfg = candidate_config(handle, genotype)?;
    let (params, align) = (&mut handle.model.params, &mut handle.align);
    let record = kd_step(params, &cfg, align, opt, batch, head, kd, mapping, true)?;
    handle.steps += 1;
    Ok(record)
}

/// Distillation loss of a candidate read through the supernet, with no update.
pub fn sliced_eval(
    handle: &SupernetHandle,
    genotype: &FfnGenotype,
    batch: &CachedBatch,
    head: Head<'_>,
    kd: &KdConfig,
    mapping: &LayerMapping,
) -> Result<LossRecord> {
    let cfg = candidate_config(handle, genotype)?;
    kd_eval(
        &handle.model.params,
        &cfg,
        &handle.align,
        batch,
        head,
        kd,
        mapping,
    )
}

/// Step budgets and learning rates of a pre-train then fine-tune run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    pub pretrain_steps: usize,
    /// Fine-tuning steps per task.
    pub finetune_steps: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
}

/// Warm-up distillation of a standalone student: KD pre-training, then KD fine-tuning that
/// cycles through `tasks` one batch each.
pub fn train_student(
    model: &mut Model,
    align: &mut ParamStore,
    ctx: &KdContext,
    tasks: &[ToyTask],
    proto: &TrainProtocol,
) -> Result<Vec<LossRecord>> {
    let mut log = Vec::new();
    let cfg = model.cfg.clone();
    if proto.pretrain_steps > 0 {
        if ctx.pretrain.is_empty() {
            return Err(Error::Input("no pre-training batches".into()));
        }
        let mut opt = AdamState::new(AdamConfig::scheduled(
            proto.lr_pretrain,
            proto.pretrain_steps as u64,
        ));
        for i in 0..proto.pretrain_steps {
            let batch = &ctx.pretrain[i % ctx.pretrain.len()];
            log.push(kd_step(
                &mut model.params,
                &cfg,
                align,
                &mut opt,
                batch,
                Head::None,
                &KdConfig::pretrain(),
                &ctx.mapping,
                false,
            )?);
        }
    }
    let data: Vec<&TaskData> = tasks.iter().map(|&t| ctx.task(t)).collect::<Result<_>>()?;
    let total = (proto.finetune_steps * data.len()) as u64;
    if total > 0 {
        let mut opt = AdamState::new(AdamConfig::scheduled(proto.lr_finetune, total));
        for i in 0..proto.finetune_steps {
            for td in &data {
                let batch = &td.train[i % td.train.len()];
                let head = Head::Task(td.task.name());
                log.push(kd_step(
                    &mut model.params,
                    &cfg,
                    align,
                    &mut opt,
                    batch,
                    head,
                    &td.kd_config(),
                    &ctx.mapping,
                    false,
                )?);
            }
        }
    }
    Ok(log)
}

/// Mean fine-tuning distillation loss over a task's holdout batches, weighted by rows.
pub fn holdout_kd_loss(
    model: &Model,
    align: &ParamStore,
    ctx: &KdContext,
    task: ToyTask,
) -> Result<f64> {
    let td = ctx.task(task)?;
    let (mut sum, mut rows) = (0.0, 0usize);
    for batch in &td.holdout {
        let r = kd_eval(
            &model.params,
            &model.cfg,
            align,
            batch,
            Head::Task(task.name()),
            &td.kd_config(),
            &ctx.mapping,
        )?;
        sum += r.total * batch.tokens.batch as f64;
        rows += batch.tokens.batch;
    }
    Ok(sum / rows as f64)
}

/// Task quality against the true labels on the holdout split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Cross-entropy for classification, squared error for regression.
    pub loss: f64,
    /// Accuracy; regression predictions are rounded to the nearest quarter.
    pub accuracy: f64,
}

pub fn task_metrics(model: &Model, ctx: &KdContext, task: ToyTask) -> Result<TaskMetrics> {
    let td = ctx.task(task)?;
    let (mut loss, mut correct, mut rows) = (0.0, 0usize, 0usize);
    for batch in &td.holdout {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Input("unlabeled holdout".into()))?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params);
        let art = forward(
            &mut tape,
            &mut b,
            &model.cfg,
            &batch.tokens,
            Head::Task(task.name()),
        )?;
        let z = art.logits.expect("task head requested");
        let width = tape.dims(z)[1];
        for (row, &y) in tape.value(z).chunks(width).zip(labels) {
            match task.kind() {
                TaskKind::Classification { .. } => {
                    let m = row.iter().cloned().fold(f64::MIN, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    loss += lse - row[y as usize];
                    let arg = (0..width).fold(0, |a, i| if row[i] > row[a] { i } else { a });
                    correct += (arg == y as usize) as usize;
                }
                TaskKind::Regression => {
                    loss += (row[0] - y).powi(2);
                    correct += ((row[0] * 4.0).round() == (y * 4.0).round()) as usize;
                }
            }
        }
        rows += labels.len();
    }
    Ok(TaskMetrics {
        loss: loss / rows as f64,
        accuracy: correct as f64 / rows as f64,
    })
}
