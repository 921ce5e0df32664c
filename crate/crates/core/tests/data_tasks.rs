use std::collections::HashSet;

use ffn_nas::data::{
    fixture_hash, from_jsonl, gen_corpus, gen_task, mlm_batches, to_jsonl, DataConfig, Example,
    MarkovSource, ToyTask, CHAIN_STATES, CLS, MASK,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CFG: DataConfig = DataConfig {
    vocab_size: 512,
    seq_len: 16,
};

#[test]
fn corpus_transitions_match_the_generator() {
    let corpus = gen_corpus(3, 10_000, &CFG).unwrap();
    let src = MarkovSource::new(3, CFG.vocab_size);
    let mut counts = vec![vec![0usize; CFG.vocab_size]; CHAIN_STATES];
    for seq in &corpus.sequences {
        let body = &seq[1..];
        for w in body.windows(3) {
            counts[src.state(w[0], w[1])][w[2]] += 1;
        }
    }
    let (mut weighted, mut total) = (0.0, 0usize);
    for (s, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        let tv: f64 = row
            .iter()
            .zip(src.transition(s))
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        weighted += tv * n as f64;
        total += n;
    }
    let tv = weighted / total as f64;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn corpus_is_reproducible_and_in_range() {
    let a = gen_corpus(11, 200, &CFG).unwrap();
    assert_eq!(a, gen_corpus(11, 200, &CFG).unwrap());
    assert_ne!(a, gen_corpus(12, 200, &CFG).unwrap());
    for s in &a.sequences {
        assert_eq!(s.len(), CFG.seq_len + 1);
        assert_eq!(s[0], CLS);
        assert!(s.iter().all(|&t| t < CFG.vocab_size));
    }
    assert!(gen_corpus(1, 0, &CFG).is_err());
}

#[test]
fn oracle_labels_are_perfect_and_in_range() {
    for task in ToyTask::ALL {
        let ds = gen_task(5, task, &CFG, 1000, 0.8).unwrap();
        for e in ds.train.iter().chain(&ds.holdout) {
            assert_eq!(task.oracle_label(&e.tokens), e.label);
            match task {
                ToyTask::Presence => assert!(e.label == 0.0 || e.label == 1.0),
                ToyTask::Which => assert!([0.0, 1.0, 2.0].contains(&e.label)),
                ToyTask::Count => assert!((0.0..=1.0).contains(&e.label)),
            }
        }
    }
}

#[test]
fn binary_task_is_balanced() {
    for seed in 0..5 {
        let ds = gen_task(seed, ToyTask::Presence, &CFG, 1000, 0.8).unwrap();
        let all: Vec<&Example> = ds.train.iter().chain(&ds.holdout).collect();
        let pos = all.iter().filter(|e| e.label == 1.0).count() as f64 / all.len() as f64;
        assert!(
            (0.45..=0.55).contains(&pos),
            "seed {seed}: positive rate {pos}"
        );
    }
}

#[test]
fn splits_are_disjoint_and_stable() {
    for task in ToyTask::ALL {
        let ds = gen_task(9, task, &CFG, 500, 0.8).unwrap();
        assert_eq!((ds.train.len(), ds.holdout.len()), (400, 100));
        let train: HashSet<&Vec<usize>> = ds.train.iter().map(|e| &e.tokens).collect();
        let overlap = ds
            .holdout
            .iter()
            .filter(|e| train.contains(&e.tokens))
            .count();
        assert_eq!(overlap, 0);
        assert_eq!(ds, gen_task(9, task, &CFG, 500, 0.8).unwrap());
    }
}

#[test]
fn masked_fraction_tracks_mask_prob() {
    let corpus = gen_corpus(2, 256, &CFG).unwrap();
    for p in [0.15, 0.4] {
        let (mut masked, mut slots) = (0usize, 0usize);
        for b in mlm_batches(&corpus, p, 16, ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .take(1000)
        {
            masked += b.targets.iter().filter(|t| t.is_some()).count();
            slots += b.tokens.batch * (b.tokens.seq_len - 1);
            assert_eq!(
                b.tokens.ids.iter().filter(|&&t| t == MASK).count(),
                b.targets.iter().flatten().count()
            );
        }
        let rate = masked as f64 / slots as f64;
        assert!((rate - p).abs() <= 0.02, "mask rate {rate} for {p}");
    }
}

#[test]
fn zero_mask_prob_gives_raw_sequences() {
    let corpus = gen_corpus(4, 40, &CFG).unwrap();
    let mut seen = Vec::new();
    for b in mlm_batches(&corpus, 0.0, 8, ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .take(5)
    {
        assert!(b.targets.iter().all(Option::is_none));
        for r in 0..b.tokens.batch {
            seen.push(b.tokens.ids[r * b.tokens.seq_len..(r + 1) * b.tokens.seq_len].to_vec());
        }
    }
    // one full pass is a permutation of the corpus
    seen.sort();
    let mut raw = corpus.sequences.clone();
    raw.sort();
    assert_eq!(seen, raw);
    assert!(mlm_batches(&corpus, 1.0, 8, ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn batch_stream_is_seeded() {
    let corpus = gen_corpus(4, 64, &CFG).unwrap();
    let take = |seed| {
        mlm_batches(&corpus, 0.15, 8, ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .take(20)
            .collect::<Vec<_>>()
    };
    assert_eq!(take(7), take(7));
    assert_ne!(take(7), take(8));
}

#[test]
fn jsonl_fixtures_round_trip_with_stable_hashes() {
    let ds = gen_task(1, ToyTask::Which, &CFG, 50, 0.8).unwrap();
    let text = to_jsonl(&ds.train).unwrap();
    assert_eq!(text.lines().count(), ds.train.len());
    let back: Vec<Example> = from_jsonl(text.as_bytes()).unwrap();
    assert_eq!(back, ds.train);
    assert_eq!(
        fixture_hash(text.as_bytes()),
        fixture_hash(to_jsonl(&back).unwrap().as_bytes())
    );
    assert_eq!(fixture_hash(b"abc").len(), 64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generators_are_pure(seed in 0u64..1_000_000, task in 0usize..3) {
        let task = ToyTask::ALL[task];
        prop_assert_eq!(gen_corpus(seed, 20, &CFG).unwrap(), gen_corpus(seed, 20, &CFG).unwrap());
        prop_assert_eq!(gen_task(seed, task, &CFG, 30, 0.5).unwrap(), gen_task(seed, task, &CFG, 30, 0.5).unwrap());
    }
}
