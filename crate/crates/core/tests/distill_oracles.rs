use ffn_nas::distill::{
    alignment_params, attn_loss, hidden_and_embed_loss, pred_loss, total_loss, KdConfig,
    LayerMapping, PredictionLoss, TeacherBundle, W_E, W_H,
};
use ffn_nas::model::{forward, Binder, Head, HeadSpec, Model, ModelConfig, ParamStore, TokenBatch};
use ffn_nas::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
}

fn flat_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `x [r, k] * w [k, c]` by triple loop.
fn flat_matmul(x: &[f64], w: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            for p in 0..k {
                out[i * c + j] += x[i * k + p] * w[p * c + j];
            }
        }
    }
    out
}

fn soft_ce(zs: &[f64], zt: &[f64], width: usize, t: f64) -> f64 {
    let rows = zs.len() / width;
    let mut total = 0.0;
    for r in 0..rows {
        let s = &zs[r * width..(r + 1) * width];
        let q = &zt[r * width..(r + 1) * width];
        let ms = s.iter().map(|v| v / t).fold(f64::MIN, f64::max);
        let lse = ms + s.iter().map(|v| (v / t - ms).exp()).sum::<f64>().ln();
        let mq = q.iter().map(|v| v / t).fold(f64::MIN, f64::max);
        let zq: f64 = q.iter().map(|v| (v / t - mq).exp()).sum();
        for i in 0..width {
            let p = (q[i] / t - mq).exp() / zq;
            total -= p * (s[i] / t - lse);
        }
    }
    total / rows as f64
}

#[test]
fn attention_loss_matches_flat_loops() {
    let mapping = LayerMapping::uniform(2, 4).unwrap();
    assert_eq!(mapping.pairs(), &[(0, 1), (1, 3)]);
    let dims = [2, 3, 4, 4];
    let s: Vec<Tensor> = (0..2).map(|i| rand_tensor(&dims, i)).collect();
    let t: Vec<Tensor> = (0..4).map(|i| rand_tensor(&dims, 10 + i)).collect();
    let mut tape = Tape::new();
    let sv: Vec<_> = s.iter().map(|x| tape.constant(x.clone())).collect();
    let tv: Vec<_> = t.iter().map(|x| tape.constant(x.clone())).collect();
    let (per, total) = attn_loss(&mut tape, &sv, &tv, &mapping).unwrap();
    let want: Vec<f64> = mapping
        .pairs()
        .iter()
        .map(|&(m, n)| {
            // mean over heads of each head's MSE
            let head = 16;
            let heads = s[m].numel() / head;
            (0..heads)
                .map(|h| {
                    flat_mse(
                        &s[m].values()[h * head..(h + 1) * head],
                        &t[n].values()[h * head..(h + 1) * head],
                    )
                })
                .sum::<f64>()
                / heads as f64
        })
        .collect();
    for (v, w) in per.iter().zip(&want) {
        assert!((tape.item(*v) - w).abs() < 1e-12);
    }
    assert!((tape.item(total) - want.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn hidden_and_embedding_losses_match_flat_loops() {
    let (rows, ds, dt) = (6, 3, 5);
    let mapping = LayerMapping::uniform(2, 2).unwrap();
    let hs: Vec<Tensor> = (0..2).map(|i| rand_tensor(&[rows, ds], 20 + i)).collect();
    let ht: Vec<Tensor> = (0..2).map(|i| rand_tensor(&[rows, dt], 30 + i)).collect();
    let (es, et) = (rand_tensor(&[rows, ds], 40), rand_tensor(&[rows, dt], 41));
    let (wh, we) = (rand_tensor(&[ds, dt], 42), rand_tensor(&[ds, dt], 43));
    let mut tape = Tape::new();
    let hsv: Vec<_> = hs.iter().map(|x| tape.constant(x.clone())).collect();
    let htv: Vec<_> = ht.iter().map(|x| tape.constant(x.clone())).collect();
    let (esv, etv) = (tape.constant(es.clone()), tape.constant(et.clone()));
    let (whv, wev) = (tape.constant(wh.clone()), tape.constant(we.clone()));
    let (per, embed) =
        hidden_and_embed_loss(&mut tape, &hsv, &htv, esv, etv, whv, wev, &mapping).unwrap();
    for (m, v) in per.iter().enumerate() {
        let p = flat_matmul(hs[m].values(), wh.values(), rows, ds, dt);
        assert!((tape.item(*v) - flat_mse(&p, ht[m].values())).abs() < 1e-12);
    }
    let p = flat_matmul(es.values(), we.values(), rows, ds, dt);
    assert!((tape.item(embed) - flat_mse(&p, et.values())).abs() < 1e-12);
}

#[test]
fn prediction_loss_matches_flat_loops() {
    let (zs, zt) = (rand_tensor(&[5, 3], 50), rand_tensor(&[5, 3], 51));
    for t in [0.5, 1.0, 3.0] {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(zs.clone()), tape.constant(zt.clone()));
        let l = pred_loss(&mut tape, a, b, t).unwrap();
        assert!((tape.item(l) - soft_ce(zs.values(), zt.values(), 3, t)).abs() < 1e-12);
    }
    // uniform teacher over two classes and equal student logits: ln 2
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 2], vec![-1.0, -1.0]).unwrap());
    let l = pred_loss(&mut tape, a, b, 1.0).unwrap();
    assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-10);
}

fn small_model(layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig::standard(layers, 8, 2, 12, 20, 6)
        .with_heads(vec![HeadSpec::new("t", 3)], false);
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tokens() -> TokenBatch {
    TokenBatch::new(&[vec![1, 9, 12, 4, 17], vec![1, 3, 3, 15, 10]]).unwrap()
}

fn identity_align(d: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(W_H, Tensor::eye(d, d));
    s.insert(W_E, Tensor::eye(d, d));
    s
}

/// Runs the student forward against a captured teacher bundle and returns the loss parts.
fn losses(
    student: &Model,
    align: &ParamStore,
    teacher: &TeacherBundle,
    kd: &KdConfig,
    mapping: &LayerMapping,
) -> [f64; 5] {
    let mut tape = Tape::new();
    let mut b = Binder::new(&student.params);
    let mut ba = Binder::new(align);
    let art = forward(&mut tape, &mut b, &student.cfg, &tokens(), Head::Task("t")).unwrap();
    let t = teacher.inject(&mut tape);
    let dims = |n: &str| align.get(n).unwrap().dims().to_vec();
    let wh = ba.bind(&mut tape, W_H, &dims(W_H)).unwrap();
    let we = ba.bind(&mut tape, W_E, &dims(W_E)).unwrap();
    let parts = total_loss(&mut tape, &art, &t, wh, we, kd, mapping).unwrap();
    let r = parts.record(&tape, 0);
    [r.l_attn, r.l_hidn, r.l_embd, r.l_pred, r.total]
}

fn capture(teacher: &Model) -> TeacherBundle {
    let mut tape = Tape::new();
    let mut b = Binder::new(&teacher.params);
    let art = forward(&mut tape, &mut b, &teacher.cfg, &tokens(), Head::Task("t")).unwrap();
    TeacherBundle::capture(&tape, &art)
}

#[test]
fn student_equal_to_teacher_gives_zero_loss() {
    let m = small_model(2, 1);
    let bundle = capture(&m);
    let mapping = LayerMapping::uniform(2, 2).unwrap();
    let [a, h, e, _, total] = losses(
        &m,
        &identity_align(8),
        &bundle,
        &KdConfig::pretrain(),
        &mapping,
    );
    assert_eq!((a, h, e, total), (0.0, 0.0, 0.0, 0.0));
    let [.., p, total] = losses(
        &m,
        &identity_align(8),
        &bundle,
        &KdConfig::finetune(PredictionLoss::Mse),
        &mapping,
    );
    assert_eq!((p, total), (0.0, 0.0));
}

#[test]
fn total_is_linear_in_gamma_and_additive() {
    let (student, teacher) = (small_model(1, 2), small_model(2, 3));
    let bundle = capture(&teacher);
    let mapping = LayerMapping::uniform(1, 2).unwrap();
    let align = alignment_params(8, 8, &mut ChaCha8Rng::seed_from_u64(4));
    let kd = |gamma| KdConfig {
        gamma,
        temperature: 2.0,
        prediction: PredictionLoss::SoftCrossEntropy,
    };
    let [a0, h0, e0, _, t0] = losses(&student, &align, &bundle, &kd(0.0), &mapping);
    assert_eq!(t0, a0 + h0 + e0);
    let pred = losses(&student, &align, &bundle, &kd(1.0), &mapping)[3];
    assert!(pred > 0.0);
    for gamma in [0.25, 1.0, 3.0, 10.0] {
        let [a, h, e, p, t] = losses(&student, &align, &bundle, &kd(gamma), &mapping);
        // the intermediate terms do not depend on gamma at all
        assert_eq!((a, h, e, p), (a0, h0, e0, pred));
        assert_eq!(t, t0 + gamma * pred);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (mut student, teacher) = (small_model(1, 5), small_model(1, 6));
    let bundle = capture(&teacher);
    let mapping = LayerMapping::uniform(1, 1).unwrap();
    let mut align = alignment_params(8, 8, &mut ChaCha8Rng::seed_from_u64(7));
    student.params.set_requires_grad(true);
    align.set_requires_grad(true);
    let kd = KdConfig::finetune(PredictionLoss::SoftCrossEntropy);

    let (grads, align_grads) = {
        let mut tape = Tape::new();
        let mut b = Binder::new(&student.params);
        let mut ba = Binder::new(&align);
        let art = forward(&mut tape, &mut b, &student.cfg, &tokens(), Head::Task("t")).unwrap();
        let t = bundle.inject(&mut tape);
        let wh = ba.bind(&mut tape, W_H, &[8, 8]).unwrap();
        let we = ba.bind(&mut tape, W_E, &[8, 8]).unwrap();
        let parts = total_loss(&mut tape, &art, &t, wh, we, &kd, &mapping).unwrap();
        tape.backward(parts.total).unwrap();
        (b.grads(&tape), ba.grads(&tape))
    };

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    let names: Vec<String> = student.params.names().map(String::from).collect();
    for name in &names {
        let g = &grads[name];
        // a few coordinates per tensor keeps this fast
        for _ in 0..3 {
            let i = rng.random_range(0..g.len());
            let at = |delta: f64| {
                let mut s = student.clone();
                s.params.get_mut(name).unwrap().values_mut()[i] += delta;
                losses(&s, &align, &bundle, &kd, &mapping)[4]
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "{name}[{i}]: analytic {} numeric {numeric}",
                g[i]
            );
            checked += 1;
        }
    }
    for name in [W_H, W_E] {
        let g = &align_grads[name];
        for i in [0, 9, 27, 63] {
            let at = |delta: f64| {
                let mut a = align.clone();
                a.get_mut(name).unwrap().values_mut()[i] += delta;
                losses(&student, &a, &bundle, &kd, &mapping)[4]
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "{name}[{i}]: analytic {} numeric {numeric}",
                g[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn mismatched_shapes_are_contract_errors() {
    let mapping = LayerMapping::uniform(1, 1).unwrap();
    let mut tape = Tape::new();
    let s = tape.constant(rand_tensor(&[1, 2, 3, 3], 1));
    let t = tape.constant(rand_tensor(&[1, 3, 3, 3], 2));
    assert!(matches!(
        attn_loss(&mut tape, &[s], &[t], &mapping),
        Err(ffn_nas::Error::Contract(_))
    ));
    assert!(LayerMapping::uniform(3, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_term_is_non_negative(seed in 0u64..10_000, gamma in 0.0f64..5.0, t in 0.1f64..5.0) {
        let dims = [1, 2, 3, 3];
        let mut tape = Tape::new();
        let mapping = LayerMapping::uniform(1, 2).unwrap();
        let s = vec![tape.constant(rand_tensor(&dims, seed))];
        let tt: Vec<_> = (0..2).map(|i| tape.constant(rand_tensor(&dims, seed + 1 + i))).collect();
        let (_, a) = attn_loss(&mut tape, &s, &tt, &mapping).unwrap();
        prop_assert!(tape.item(a) >= 0.0);
        let zs = tape.constant(rand_tensor(&[4, 3], seed + 5));
        let zt = tape.constant(rand_tensor(&[4, 3], seed + 6));
        let p = pred_loss(&mut tape, zs, zt, t).unwrap();
        // soft cross-entropy is bounded below by the teacher's entropy, itself >= 0
        prop_assert!(tape.item(p) >= 0.0);
        let hs = vec![tape.constant(rand_tensor(&[4, 2], seed + 7))];
        let ht: Vec<_> = (0..2).map(|i| tape.constant(rand_tensor(&[4, 5], seed + 8 + i))).collect();
        let e_s = tape.constant(rand_tensor(&[4, 2], seed + 11));
        let e_t = tape.constant(rand_tensor(&[4, 5], seed + 12));
        let w = tape.constant(rand_tensor(&[2, 5], seed + 13));
        let (h, e) = hidden_and_embed_loss(&mut tape, &hs, &ht, e_s, e_t, w, w, &mapping).unwrap();
        prop_assert!(tape.item(h[0]) >= 0.0 && tape.item(e) >= 0.0);
        prop_assert!(tape.item(a) + tape.item(h[0]) + tape.item(e) + gamma * tape.item(p) >= 0.0);
    }
}
