//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fail.
//! Pass substrings as arguments to run a subset, e.g. `cargo test --test acceptance -- cost`.

use std::cell::OnceCell;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ffn_nas::data::ToyTask;
use ffn_nas::distill::{
    alignment_params, pred_loss, total_loss, KdConfig, LayerMapping, PredictionLoss, TeacherBundle,
    W_E, W_H,
};
use ffn_nas::ffn_space::{
    sample_uniform, DagNode, ExpansionRatio, FfnGenotype, LayerFfnSpec, PrimitiveOp, SearchSpaceDef,
};
use ffn_nas::model::{
    count_mult_adds, count_params, forward, nonlinearity_surface, Binder, GridSpec, Head, HeadSpec,
    Model, ModelConfig, ParamStore, TokenBatch,
};
use ffn_nas::pipeline::{Run, RunConfig};
use ffn_nas::search::{
    kendall_tau, rank_correlation_study, run_stage, SamplerKind, SearchConfig, Stage, StageInput,
};
use ffn_nas::tensor::{Tape, Tensor, Var};
use ffn_nas::warmup::{
    holdout_kd_loss, inherit_alignment, inherit_weights, train_student, KdContext, SupernetHandle,
    TrainProtocol,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(
        start.elapsed() < limit,
        format!("took {:.1?}, limit {limit:?}", start.elapsed()),
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Teacher, warm-up supernet and distillation context at the default desk config.
struct Desk {
    _dir: tempfile::TempDir,
    run: Run,
    handle: SupernetHandle,
    ctx: KdContext,
}

fn build_desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(RunConfig::default(), dir.path()).unwrap();
    let t = Instant::now();
    let teacher = run.train_teacher().unwrap();
    let handle = run.pretrain_supernet().unwrap();
    let ctx = run.context(&teacher).unwrap();
    eprintln!("desk fixture ready in {:.1?}", t.elapsed());
    Desk {
        _dir: dir,
        run,
        handle,
        ctx,
    }
}

fn cost() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::standard(1, 768, 12, 3072, 30522, 128);
    let p = count_params(&cfg);
    let m = count_mult_adds(&cfg, 128);
    let (mha, ffn, ma) = (
        p.per_layer[0].params_mha,
        p.per_layer[0].params_ffn,
        m.per_layer[0].mult_adds_mha,
    );
    ensure(mha == 2_362_368, format!("MHA params {mha}"))?;
    ensure(ffn == 4_722_432, format!("FFN params {ffn}"))?;
    ensure(
        p.ffn_mha_weight_ratio() == 2.0,
        format!("ratio {}", p.ffn_mha_weight_ratio()),
    )?;
    ensure(ma == 314_572_800, format!("MHA Mult-Adds {ma}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("MHA {mha}, FFN {ffn}, ratio 2.0, Mult-Adds {ma}"))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst central-difference error of sum(w * f(x)) over every input element.
fn primitive_fd(op: PrimitiveOp, inputs: &[Tensor]) -> f64 {
    let weighted = |tape: &mut Tape, vars: &[Var]| {
        let out = tape.apply_primitive(op, vars).unwrap();
        let n = tape.value(out).len();
        let w = tape.constant(Tensor::from_fn(tape.dims(out), |i| {
            1.0 + 0.1 * i as f64 / n as f64
        }));
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    };
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let s = weighted(&mut tape, &vars);
        tape.item(s)
    };
    let owned: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = owned.iter().map(|t| tape.param(t)).collect();
    let s = weighted(&mut tape, &vars);
    tape.backward(s).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).unwrap().to_vec();
        for i in 0..input.numel() {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            plus[k].values_mut()[i] += h;
            minus[k].values_mut()[i] -= h;
            worst = worst.max(rel_err(
                analytic[i],
                (eval(&plus) - eval(&minus)) / (2.0 * h),
            ));
        }
    }
    worst
}

fn kd_model(layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig::standard(layers, 8, 2, 12, 20, 6)
        .with_heads(vec![HeadSpec::new("t", 3)], false);
    Model::new(cfg, &mut rng(seed)).unwrap()
}

fn kd_tokens() -> TokenBatch {
    TokenBatch::new(&[vec![1, 9, 12, 4, 17], vec![1, 3, 3, 15, 10]]).unwrap()
}

fn capture(teacher: &Model) -> TeacherBundle {
    let mut tape = Tape::new();
    let mut b = Binder::new(&teacher.params);
    let art = forward(
        &mut tape,
        &mut b,
        &teacher.cfg,
        &kd_tokens(),
        Head::Task("t"),
    )
    .unwrap();
    TeacherBundle::capture(&tape, &art)
}

/// [attn, hidden, embed, pred, total] for a student against a captured teacher.
fn kd_parts(
    student: &Model,
    align: &ParamStore,
    bundle: &TeacherBundle,
    kd: &KdConfig,
    map: &LayerMapping,
) -> [f64; 5] {
    let mut tape = Tape::new();
    let mut b = Binder::new(&student.params);
    let mut ba = Binder::new(align);
    let art = forward(
        &mut tape,
        &mut b,
        &student.cfg,
        &kd_tokens(),
        Head::Task("t"),
    )
    .unwrap();
    let t = bundle.inject(&mut tape);
    let wh = ba
        .bind(&mut tape, W_H, align.get(W_H).unwrap().dims())
        .unwrap();
    let we = ba
        .bind(&mut tape, W_E, align.get(W_E).unwrap().dims())
        .unwrap();
    let r = total_loss(&mut tape, &art, &t, wh, we, kd, map)
        .unwrap()
        .record(&tape, 0);
    [r.l_attn, r.l_hidn, r.l_embd, r.l_pred, r.total]
}

/// Worst central-difference error of the total distillation loss, over sampled
/// coordinates of every student and alignment tensor.
fn total_loss_fd() -> (f64, usize) {
    let (mut student, teacher) = (kd_model(2, 5), kd_model(2, 6));
    let bundle = capture(&teacher);
    let map = LayerMapping::uniform(2, 2).unwrap();
    let mut align = alignment_params(8, 8, &mut rng(7));
    student.params.set_requires_grad(true);
    align.set_requires_grad(true);
    let kd = KdConfig::finetune(PredictionLoss::SoftCrossEntropy);
    let (grads, align_grads) = {
        let mut tape = Tape::new();
        let mut b = Binder::new(&student.params);
        let mut ba = Binder::new(&align);
        let art = forward(
            &mut tape,
            &mut b,
            &student.cfg,
            &kd_tokens(),
            Head::Task("t"),
        )
        .unwrap();
        let t = bundle.inject(&mut tape);
        let wh = ba.bind(&mut tape, W_H, &[8, 8]).unwrap();
        let we = ba.bind(&mut tape, W_E, &[8, 8]).unwrap();
        let parts = total_loss(&mut tape, &art, &t, wh, we, &kd, &map).unwrap();
        tape.backward(parts.total).unwrap();
        (b.grads(&tape), ba.grads(&tape))
    };
    let h = 1e-5;
    let mut r = rng(8);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    let names: Vec<String> = student.params.names().map(String::from).collect();
    for name in &names {
        let g = &grads[name];
        for _ in 0..3 {
            let i = r.random_range(0..g.len());
            let at = |d: f64| {
                let mut s = student.clone();
                s.params.get_mut(name).unwrap().values_mut()[i] += d;
                kd_parts(&s, &align, &bundle, &kd, &map)[4]
            };
            worst = worst.max(rel_err(g[i], (at(h) - at(-h)) / (2.0 * h)));
            checked += 1;
        }
    }
    for name in [W_H, W_E] {
        let g = &align_grads[name];
        for i in [0, 9, 27, 63] {
            let at = |d: f64| {
                let mut a = align.clone();
                a.get_mut(name).unwrap().values_mut()[i] += d;
                kd_parts(&student, &a, &bundle, &kd, &map)[4]
            };
            worst = worst.max(rel_err(g[i], (at(h) - at(-h)) / (2.0 * h)));
            checked += 1;
        }
    }
    (worst, checked)
}

fn gradient() -> Check {
    let start = Instant::now();
    let mut r = rng(10);
    let mut worst: f64 = 0.0;
    for op in PrimitiveOp::ALL {
        // magnitudes in [0.2, 2) keep every kink out of reach of the step
        let x = Tensor::from_fn(&[2, 3], |_| {
            r.random_range(0.2..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        let err = if op.arity() == 1 {
            primitive_fd(op, &[x])
        } else {
            let y = Tensor::from_fn(&[2, 3], |j| {
                x.values()[j] + if j % 2 == 0 { 0.5 } else { -0.5 }
            });
            primitive_fd(op, &[x, y])
        };
        ensure(err < 1e-4, format!("{op:?}: relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    let (kd_err, checked) = total_loss_fd();
    ensure(
        kd_err < 1e-4,
        format!("total loss: relative error {kd_err:.2e}"),
    )?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{} primitives max rel err {worst:.1e}; total loss {checked} coords max {kd_err:.1e}",
        PrimitiveOp::ALL.len()
    ))
}

fn identity_align(d: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(W_H, Tensor::eye(d, d));
    s.insert(W_E, Tensor::eye(d, d));
    s
}

fn distill_identities() -> Check {
    let m = kd_model(2, 1);
    let bundle = capture(&m);
    let map = LayerMapping::uniform(2, 2).unwrap();
    let [a, h, e, _, total] =
        kd_parts(&m, &identity_align(8), &bundle, &KdConfig::pretrain(), &map);
    ensure(
        (a, h, e, total) == (0.0, 0.0, 0.0, 0.0),
        format!("self-distillation gave {:?}", (a, h, e, total)),
    )?;

    let (student, teacher) = (kd_model(1, 2), kd_model(2, 3));
    let bundle = capture(&teacher);
    let map = LayerMapping::uniform(1, 2).unwrap();
    let align = alignment_params(8, 8, &mut rng(4));
    let kd = |gamma| KdConfig {
        gamma,
        temperature: 2.0,
        prediction: PredictionLoss::SoftCrossEntropy,
    };
    let t0 = kd_parts(&student, &align, &bundle, &kd(0.0), &map)[4];
    let pred = kd_parts(&student, &align, &bundle, &kd(1.0), &map)[3];
    for gamma in [0.25, 1.0, 3.0, 10.0] {
        let t = kd_parts(&student, &align, &bundle, &kd(gamma), &map)[4];
        ensure(
            t == t0 + gamma * pred,
            format!("gamma {gamma}: {t} != {t0} + {gamma} * {pred}"),
        )?;
    }

    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
    let t = tape.constant(Tensor::new(vec![1, 2], vec![-1.0, -1.0]).unwrap());
    let l = pred_loss(&mut tape, s, t, 1.0).unwrap();
    let err = (tape.item(l) - std::f64::consts::LN_2).abs();
    ensure(err < 1e-10, format!("ln 2 case off by {err:.1e}"))?;
    Ok(format!(
        "zero losses exact, gamma-linearity exact, ln 2 error {err:.1e}"
    ))
}

fn outputs(params: &ParamStore, cfg: &ModelConfig, tokens: &TokenBatch, head: &str) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut b = Binder::new(params);
    let art = forward(&mut tape, &mut b, cfg, tokens, Head::Task(head)).unwrap();
    let mut vars = vec![art.embeddings];
    vars.extend(&art.attentions);
    vars.extend(&art.hidden);
    vars.extend(art.logits);
    vars.into_iter()
        .flat_map(|v| tape.value(v).to_vec())
        .collect()
}

fn slicing(desk: &Desk) -> Check {
    let corpus = desk.run.corpus().unwrap();
    let tokens = TokenBatch::new(&corpus.sequences[..4]).unwrap();
    let handle = &desk.handle;
    let space = SearchSpaceDef::stage1(handle.model().cfg.num_layers);
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let g = sample_uniform(&space, &mut r).unwrap();
        let student = inherit_weights(handle, &g).unwrap();
        let head = ToyTask::ALL[i % 3].name();
        let a = outputs(&student.params, &student.cfg, &tokens, head);
        let b = outputs(&handle.model().params, &student.cfg, &tokens, head);
        worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    ensure(
        worst <= 1e-12,
        format!("inherited vs sliced max abs diff {worst:.1e}"),
    )?;

    let full = inherit_weights(
        handle,
        &FfnGenotype::supernet(handle.model().cfg.num_layers),
    )
    .unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let same = ToyTask::ALL.iter().all(|t| {
        bits(outputs(&full.params, &full.cfg, &tokens, t.name()))
            == bits(outputs(
                &handle.model().params,
                &handle.model().cfg,
                &tokens,
                t.name(),
            ))
    });
    ensure(same, "full-capacity student differs from the supernet")?;

    let before = handle.sha256().unwrap();
    let cfg = desk.run.search_config(Stage::One).unwrap();
    run_stage(StageInput::One, handle, &desk.ctx, &cfg).unwrap();
    let after = handle.sha256().unwrap();
    ensure(
        before == after,
        "frozen supernet hash changed during stage 1",
    )?;
    Ok(format!(
        "100 genotypes max diff {worst:.1e}; full capacity bit-identical; hash {}",
        &before[..12]
    ))
}

fn warmup_efficiency(desk: &Desk) -> Check {
    let start = Instant::now();
    let proto = TrainProtocol {
        pretrain_steps: 0,
        finetune_steps: 30,
        lr_pretrain: 1e-4,
        lr_finetune: 4e-4,
    };
    let task = ToyTask::Which;
    let space = SearchSpaceDef::stage1(desk.handle.model().cfg.num_layers);
    let (mut inherited, mut scratch) = (Vec::new(), Vec::new());
    for s in 0..5 {
        let mut r = rng(100 + s);
        let g = sample_uniform(&space, &mut r).unwrap();
        let mut warm = inherit_weights(&desk.handle, &g).unwrap();
        let mut warm_align = inherit_alignment(&desk.handle);
        let wh = warm_align.get(W_H).unwrap().dims().to_vec();
        train_student(&mut warm, &mut warm_align, &desk.ctx, &[task], &proto).unwrap();
        inherited.push(holdout_kd_loss(&warm, &warm_align, &desk.ctx, task).unwrap());

        let mut cold = Model::new(warm.cfg.clone(), &mut r).unwrap();
        let mut cold_align = alignment_params(wh[0], wh[1], &mut r);
        train_student(&mut cold, &mut cold_align, &desk.ctx, &[task], &proto).unwrap();
        scratch.push(holdout_kd_loss(&cold, &cold_align, &desk.ctx, task).unwrap());
    }
    let (mi, ms) = (median(inherited.clone()), median(scratch.clone()));
    ensure(
        mi < ms,
        format!("median inherited {mi:.4} >= scratch {ms:.4}"),
    )?;
    within(Duration::from_secs(600), start)?;
    Ok(format!(
        "median holdout loss inherited {mi:.4} < scratch {ms:.4} over 5 seeds"
    ))
}

fn search(desk: &Desk) -> Check {
    let start = Instant::now();
    let (mut wins, mut lines) = (0, Vec::new());
    for seed in 0..5 {
        let base = desk.run.search_config(Stage::One).unwrap();
        let tree_cfg = SearchConfig {
            seed,
            ..base.clone()
        };
        let uniform_cfg = SearchConfig {
            sampler_kind: SamplerKind::Uniform,
            ..tree_cfg.clone()
        };
        let one = run_stage(StageInput::One, &desk.handle, &desk.ctx, &tree_cfg).unwrap();
        let uni = run_stage(StageInput::One, &desk.handle, &desk.ctx, &uniform_cfg).unwrap();
        if one.best.proxy_score >= uni.best.proxy_score {
            wins += 1;
        }
        lines.push(format!(
            "{:.4}/{:.4}",
            one.best.proxy_score, uni.best.proxy_score
        ));

        let two_cfg = SearchConfig {
            seed,
            ..desk.run.search_config(Stage::Two).unwrap()
        };
        let two = run_stage(
            StageInput::Two {
                winner: &one.best.genotype,
            },
            &desk.handle,
            &desk.ctx,
            &two_cfg,
        )
        .unwrap();
        let three_cfg = SearchConfig {
            seed,
            ..desk.run.search_config(Stage::Three).unwrap()
        };
        let mut active = desk.handle.clone().activate("stage3");
        let three = run_stage(
            StageInput::Three {
                winner: &two.best.genotype,
                supernet: &mut active,
            },
            &desk.handle,
            &desk.ctx,
            &three_cfg,
        )
        .unwrap();
        let (s1, s2, s3) = (
            one.best.proxy_score,
            two.best.proxy_score,
            three.best.proxy_score,
        );
        ensure(
            s2 >= s1 - 1e-6 && s3 >= s2 - 1e-6,
            format!("seed {seed}: stage winners regress {s1:.6} -> {s2:.6} -> {s3:.6}"),
        )?;
    }
    ensure(
        wins >= 4,
        format!("tree beat uniform in {wins}/5 seeds ({})", lines.join(", ")),
    )?;
    within(Duration::from_secs(1800), start)?;
    Ok(format!(
        "tree >= uniform in {wins}/5 ({}); stages monotone",
        lines.join(", ")
    ))
}

fn rank(desk: &Desk) -> Check {
    let start = Instant::now();
    let tau = |x: &[f64], y: &[f64]| kendall_tau(x, y).unwrap();
    ensure(
        tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]) == 1.0,
        "identical rankings",
    )?;
    ensure(
        tau(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) == -1.0,
        "reversed rankings",
    )?;
    let t = tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
    ensure(t == 4.0 / 6.0, format!("one swap gave {t}"))?;

    let cfg = &desk.run.cfg;
    let space = SearchSpaceDef::stage1(cfg.student_layers);
    let tasks = cfg.task_list().unwrap();
    let mut taus = Vec::new();
    for seed in 0..5 {
        let mut r = rng(seed);
        let cands: Vec<FfnGenotype> = (0..8)
            .map(|_| sample_uniform(&space, &mut r).unwrap())
            .collect();
        let report = rank_correlation_study(
            &cands,
            &desk.handle,
            &desk.ctx,
            &tasks,
            &cfg.proxy_protocol(),
            &cfg.retrain_protocol(),
        )
        .unwrap();
        taus.push(report.overall);
    }
    let positive = taus.iter().filter(|&&t| t > 0.0).count();
    let shown: Vec<String> = taus.iter().map(|t| format!("{t:.3}")).collect();
    ensure(
        positive >= 4,
        format!("tau > 0 in {positive}/5 seeds [{}]", shown.join(", ")),
    )?;
    within(Duration::from_secs(1200), start)?;
    Ok(format!(
        "unit values exact; overall tau > 0 in {positive}/5 [{}]",
        shown.join(", ")
    ))
}

fn surface() -> Check {
    let dag = vec![
        DagNode::input(),
        DagNode::expand(0),
        DagNode::math(PrimitiveOp::Relu, &[1]),
        DagNode::contract(2),
    ];
    let mut cfg = ModelConfig::standard(1, 2, 1, 4, 4, 1);
    cfg.genotype = FfnGenotype::uniform(1, LayerFfnSpec::new(dag, 1, ExpansionRatio::One));
    let s = nonlinearity_surface(&cfg, &GridSpec::default()).unwrap();
    ensure(
        s.points.len() == 10_000,
        format!("{} points", s.points.len()),
    )?;
    let again = nonlinearity_surface(&cfg, &GridSpec::default()).unwrap();
    ensure(
        s.to_csv(None) == again.to_csv(None),
        "surface export is not deterministic",
    )?;
    let rows = s
        .to_csv(None)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1;
    ensure(rows == 10_000, format!("{rows} csv rows"))?;
    // the residual adds 4 * relu(2a) to the mean input a
    let worst = s
        .points
        .iter()
        .map(|p| {
            let a = (p.x + p.y) / 2.0;
            (p.z - (a + 4.0 * (2.0 * a).max(0.0))).abs()
        })
        .fold(0.0, f64::max);
    ensure(worst < 1e-10, format!("closed form off by {worst:.1e}"))?;
    let default = nonlinearity_surface(
        &ModelConfig::standard(1, 2, 1, 4, 4, 1),
        &GridSpec::default(),
    )
    .unwrap();
    ensure(default.points.len() == 10_000, "default model grid size")?;
    Ok(format!(
        "10000 rows, deterministic, closed form max err {worst:.1e}"
    ))
}

fn pipeline_smoke() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for args in [
        &["train-teacher"][..],
        &["pretrain-supernet"],
        &["search", "--stage", "1"],
        &["search", "--stage", "2"],
        &["search", "--stage", "3"],
        &["retrain"],
        &["retrain", "--plus"],
        &["eval"],
        &["cost"],
        &["nonlin-surface"],
        &["rankcorr"],
        &["deepen"],
    ] {
        let o = Command::new(env!("CARGO_BIN_EXE_ffn-nas"))
            .arg("--out-dir")
            .arg(out)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(
            o.status.success(),
            format!(
                "`{}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&o.stderr).trim()
            ),
        )?;
    }
    let expected = [
        "teacher.ckpt",
        "teacher_log.jsonl",
        "supernet.ckpt",
        "supernet_log.jsonl",
        "stage1.jsonl",
        "stage1_winner.json",
        "stage2.jsonl",
        "stage2_winner.json",
        "stage3.jsonl",
        "stage3_winner.json",
        "stage3_supernet.ckpt",
        "retrain.ckpt",
        "retrain_plus.ckpt",
        "retrain_log.jsonl",
        "retrain_plus_log.jsonl",
        "eval.json",
        "report.json",
        "cost.csv",
        "surface.csv",
        "tau.json",
        "deepened.json",
        "data/hashes.json",
    ];
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|f| !Path::new(out).join(f).is_file())
        .collect();
    ensure(missing.is_empty(), format!("missing artifacts {missing:?}"))?;
    within(Duration::from_secs(3600), start)?;
    Ok(format!(
        "{} artifacts in {:.1?}",
        expected.len(),
        start.elapsed()
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let desk = OnceCell::new();
    let desk = || desk.get_or_init(build_desk);
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("cost", Box::new(cost)),
        ("gradient", Box::new(gradient)),
        ("distill-identities", Box::new(distill_identities)),
        ("slicing", Box::new(|| slicing(desk()))),
        ("warmup-efficiency", Box::new(|| warmup_efficiency(desk()))),
        ("search", Box::new(|| search(desk()))),
        ("rank-correlation", Box::new(|| rank(desk()))),
        ("surface", Box::new(surface)),
        ("pipeline-smoke", Box::new(pipeline_smoke)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {name} ({took:.1?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({took:.1?}): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
