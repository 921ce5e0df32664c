//! Tiny models and data shared by the integration tests.
#![allow(dead_code)]

use ffn_nas::data::{gen_corpus, gen_task, DataConfig, ToyTask};
use ffn_nas::distill::alignment_params;
use ffn_nas::model::{build_supernet, HeadSpec, Model, ModelConfig, ParamStore};
use ffn_nas::warmup::{ContextOptions, KdContext};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: DataConfig = DataConfig {
    vocab_size: 64,
    seq_len: 8,
};

pub fn heads() -> Vec<HeadSpec> {
    ToyTask::ALL
        .iter()
        .map(|t| HeadSpec::new(t.name(), t.head_width()))
        .collect()
}

/// Two layers, d=8, two heads, d_ref=12.
pub fn student_cfg() -> ModelConfig {
    ModelConfig::standard(2, 8, 2, 12, DATA.vocab_size, 16).with_heads(heads(), false)
}

pub fn supernet(seed: u64) -> (Model, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sn = build_supernet(&student_cfg(), &mut rng).unwrap();
    let align = alignment_params(8, 16, &mut rng);
    (sn, align)
}

/// An untrained two-layer teacher over a small corpus and all three tasks.
pub fn context() -> KdContext {
    let teacher = Model::new(
        ModelConfig::standard(2, 16, 2, 32, DATA.vocab_size, 16).with_heads(heads(), false),
        &mut ChaCha8Rng::seed_from_u64(100),
    )
    .unwrap();
    let corpus = gen_corpus(0, 64, &DATA).unwrap();
    let tasks: Vec<_> = ToyTask::ALL
        .iter()
        .map(|&t| gen_task(1, t, &DATA, 40, 0.5).unwrap())
        .collect();
    let opts = ContextOptions {
        batch_size: 8,
        pretrain_batches: 4,
        mask_prob: 0.15,
        seed: 0,
        student_layers: 2,
    };
    KdContext::build(&teacher, &corpus, &tasks, &opts).unwrap()
}
