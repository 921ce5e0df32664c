//! Teacher training: masked-token prediction on the corpus plus every toy task, one shared
//! trunk with a head per task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{example_batch, mlm_batches, Corpus, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::model::{forward, Binder, Head, HeadSpec, Model, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

/// Per-step losses of teacher training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub step: u64,
    pub mlm: f64,
    pub tasks: Vec<f64>,
}

/// Mean negative log-likelihood of `targets` (one per row, `None` rows skipped).
pub(crate) fn nll(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[Option<usize>],
) -> Result<Option<Var>> {
    let dims = tape.dims(logits).to_vec();
    let (rows, width) = (dims[0], dims[1]);
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Ok(None);
    }
    let mut w = vec![0.0; rows * width];
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            w[r * width + t] = -1.0 / n as f64;
        }
    }
    let logq = tape.log_softmax(logits);
    let w = tape.constant(Tensor::new(dims, w)?);
    let prod = tape.mul(logq, w)?;
    Ok(Some(tape.sum(prod)))
}

/// Supervised loss of a task head against labels.
pub(crate) fn label_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    labels: &[f64],
    kind: TaskKind,
) -> Result<Var> {
    match kind {
        TaskKind::Classification { .. } => {
            let t: Vec<Option<usize>> = labels.iter().map(|&y| Some(y as usize)).collect();
            Ok(nll(tape, logits, &t)?.expect("non-empty batch"))
        }
        TaskKind::Regression => {
            let y = tape.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
            tape.mse(logits, y)
        }
    }
}

/// Trains `cfg` (task heads are added for `tasks`, plus the token head) from scratch.
pub fn train_teacher(
    cfg: ModelConfig,
    corpus: &Corpus,
    tasks: &[TaskDataset],
    opts: &TeacherOptions,
) -> Result<(Model, Vec<TeacherRecord>)> {
    let heads = tasks
        .iter()
        .map(|t| HeadSpec::new(t.name(), t.task.head_width()))
        .collect();
    let cfg = cfg.with_heads(heads, true);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = Model::new(cfg, &mut rng)?;
    let mut batches = mlm_batches(
        corpus,
        opts.mask_prob,
        opts.batch_size,
        ChaCha8Rng::seed_from_u64(opts.seed ^ 1),
    )?;
    let task_batches: Vec<Vec<_>> = tasks
        .iter()
        .map(|t| {
            t.train
                .chunks(opts.batch_size)
                .map(example_batch)
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if task_batches.iter().any(Vec::is_empty) {
        return Err(Error::Input("task without training examples".into()));
    }
    let mut opt = AdamState::new(AdamConfig::scheduled(opts.lr, opts.steps as u64));
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mlm = batches.next().expect("endless stream");
        let (record, grads) = {
            let mut tape = Tape::new();
            let mut b = Binder::new(&model.params);
            let art = forward(&mut tape, &mut b, &model.cfg, &mlm.tokens, Head::Mlm)?;
            let mut total = nll(&mut tape, art.logits.expect("mlm head"), &mlm.targets)?;
            let mlm_loss = total.map_or(0.0, |v| tape.item(v));
            let mut task_losses = Vec::with_capacity(tasks.len());
            for (ds, tb) in tasks.iter().zip(&task_batches) {
                let (tokens, labels) = &tb[step % tb.len()];
                let art = forward(&mut tape, &mut b, &model.cfg, tokens, Head::Task(ds.name()))?;
                let l = label_loss(&mut tape, art.logits.expect("task head"), labels, ds.kind())?;
                task_losses.push(tape.item(l));
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one task");
            let v = tape.item(total);
            if !v.is_finite() {
                return Err(Error::Diverged { step, loss: v });
            }
            tape.backward(total)?;
            (
                TeacherRecord {
                    step: step as u64 + 1,
                    mlm: mlm_loss,
                    tasks: task_losses,
                },
                b.grads(&tape),
            )
        };
        model.params.accumulate_grads(&grads)?;
        opt.step(model.params.with_grads_mut())?;
        model.params.zero_grads();
        log.push(record);
    }
    Ok((model, log))
}
