use lmlab::model::{ModelConfig, TransformerConfig};
use lmlab::rng::seeded;
use lmlab::train::{init_params, train, Optimizer, TrainConfig, TrainData};
use lmlab::LmError;
use rand::Rng as _;

/// Transition matrix over tokens 3..7 and its stationary entropy rate.
fn chain() -> (Vec<Vec<f64>>, f64) {
    let p: Vec<Vec<f64>> = vec![
        vec![0.7, 0.1, 0.1, 0.1],
        vec![0.05, 0.05, 0.85, 0.05],
        vec![0.4, 0.4, 0.1, 0.1],
        vec![0.25, 0.25, 0.25, 0.25],
    ];
    // power iteration for the stationary distribution
    let mut pi = vec![0.25; 4];
    for _ in 0..10_000 {
        let mut next = vec![0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                next[j] += pi[i] * p[i][j];
            }
        }
        pi = next;
    }
    let h: f64 = (0..4)
        .map(|i| pi[i] * -p[i].iter().map(|&x| x * x.ln()).sum::<f64>())
        .sum();
    (p, h)
}

fn sample_chain(p: &[Vec<f64>], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    let mut s = 0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = 3;
        for (j, &q) in p[s].iter().enumerate() {
            acc += q;
            if u < acc {
                next = j;
                break;
            }
        }
        s = next;
        out.push(3 + s);
    }
    out
}

fn small(vocab: usize, window: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig::new(vocab, 16, 2, 2, window))
}

#[test]
fn markov_chain_reaches_entropy_rate() {
    let (p, h) = chain();
    let ids = sample_chain(&p, 30_000, 1);
    let data = TrainData::split_corpus(&ids, 0.1).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        optimizer: Optimizer::Momentum { mu: 0.9 },
        batch_tokens: 512,
        steps: 400,
        eval_every: 100,
        eval_limit: 0,
        seed: 2,
        ..TrainConfig::default()
    };
    let model = init_params(small(7, 16), 2).unwrap();
    let (_, rec) = train(model, &data, &cfg).unwrap().into_result().unwrap();
    let test = rec.last("test").unwrap().loss;
    assert!((test - h).abs() / h < 0.05, "test loss {test} vs entropy rate {h}");
}

#[test]
fn overfits_one_repeated_sequence() {
    let mut rng = seeded(11);
    let pattern: Vec<usize> = (0..32).map(|_| rng.random_range(3..8)).collect();
    let ids: Vec<usize> = pattern.iter().cycle().take(32 * 20).copied().collect();
    let data = TrainData::split_corpus(&ids, 0.1).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        optimizer: Optimizer::Momentum { mu: 0.9 },
        batch_tokens: 128,
        steps: 2000,
        eval_every: 100,
        seed: 4,
        ..TrainConfig::default()
    };
    let model = init_params(small(8, 16), 4).unwrap();
    let (_, rec) = train(model, &data, &cfg).unwrap().into_result().unwrap();
    let reached = rec.split_events("train").find(|e| e.loss < 0.05);
    assert!(reached.is_some(), "final train loss {}", rec.last("train").unwrap().loss);
}

#[test]
fn huge_learning_rate_diverges() {
    let (p, _) = chain();
    let ids = sample_chain(&p, 2_000, 3);
    let data = TrainData::split_corpus(&ids, 0.1).unwrap();
    let cfg = TrainConfig {
        lr: 1e3,
        clip: None,
        batch_tokens: 128,
        steps: 200,
        ..TrainConfig::default()
    };
    let model = init_params(small(7, 16), 5).unwrap();
    let out = train(model, &data, &cfg).unwrap();
    let (step, _) = out.record.diverged.clone().expect("run should be flagged diverged");
    assert!(step >= 1 && step <= 200);
    assert!(out.record.train_loss.iter().take(step - 1).all(|l| l.is_finite()));
    assert!(matches!(out.into_result(), Err(LmError::Diverged { .. })));
}

#[test]
fn same_seed_same_metrics() {
    let (p, _) = chain();
    let ids = sample_chain(&p, 3_000, 6);
    let data = TrainData::split_corpus(&ids, 0.1).unwrap();
    let cfg = TrainConfig {
        batch_tokens: 128,
        steps: 20,
        eval_every: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |workers| {
        let model = init_params(small(7, 8), 9).unwrap();
        let c = TrainConfig { workers, ..cfg.clone() };
        train(model, &data, &c).unwrap().into_result().unwrap()
    };
    let (m1, r1) = run(1);
    let (m1b, r1b) = run(1);
    assert_eq!(r1.to_jsonl(), r1b.to_jsonl());
    assert_eq!(m1, m1b);
    let (m2, r2) = run(3);
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
    for (a, b) in r1.events.iter().zip(&r2.events) {
        assert!((a.loss - b.loss).abs() < 1e-10);
    }
}

#[test]
fn init_variance_is_one_over_fan_in() {
    let m = init_params(
        ModelConfig::FfnLm(lmlab::model::FfnLmConfig {
            vocab_size: 4,
            p_word: 512,
            window: 1,
            hidden: vec![512],
        }),
        7,
    )
    .unwrap();
    let w = m.param_by_name("f.w1").unwrap();
    assert_eq!(w.shape(), &[512, 512]);
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var * 512.0 - 1.0).abs() < 0.2, "variance {var}");
    assert!(m.param_by_name("f.b1").unwrap().data().iter().all(|&b| b == 0.0));
    let again = init_params(m.config().clone(), 7).unwrap();
    assert_eq!(again, m);
    let other = init_params(m.config().clone(), 8).unwrap();
    assert_ne!(other.params()[1], m.params()[1]);
}

#[test]
fn zero_learning_rate_training_is_a_no_op() {
    let (p, _) = chain();
    let ids = sample_chain(&p, 2_000, 12);
    let data = TrainData::split_corpus(&ids, 0.1).unwrap();
    let model = init_params(small(7, 8), 1).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        batch_tokens: 64,
        steps: 25,
        optimizer: Optimizer::Momentum { mu: 0.9 },
        ..TrainConfig::default()
    };
    let (after, _) = train(model.clone(), &data, &cfg).unwrap().into_result().unwrap();
    assert_eq!(after, model);
}

#[test]
fn held_out_tail_is_disjoint_from_training_windows() {
    use std::collections::HashSet;
    use std::hash::{DefaultHasher, Hash, Hasher};
    let ids: Vec<usize> = (0..1_000).collect();
    let TrainData::Corpus { train, test } = TrainData::split_corpus(&ids, 0.1).unwrap() else {
        unreachable!()
    };
    assert_eq!(train.len() + test.len(), ids.len());
    let hash = |w: &[usize]| {
        let mut h = DefaultHasher::new();
        w.hash(&mut h);
        h.finish()
    };
    let len = 16;
    let train_hashes: HashSet<u64> = (0..=train.len() - len - 1)
        .step_by(len)
        .map(|s| hash(&train[s..s + len + 1]))
        .collect();
    for w in lmlab::train::eval_windows(&test, len, 0) {
        assert!(!train_hashes.contains(&hash(&w.input)));
        assert!(w.input.iter().all(|t| !train.contains(t)));
    }
}

#[test]
fn memorizes_full_mod_7_table() {
    use lmlab::grammar::{synth_task, ModularAddParams, TaskKind};
    let ds = synth_task(
        TaskKind::ModularAdd(ModularAddParams {
            modulus: 7,
            train_fraction: 1.0,
            samples: None,
        }),
        &mut seeded(1),
    )
    .unwrap();
    assert_eq!(ds.train.len(), 49);
    let data = TrainData::Task {
        train: ds.train,
        test: ds.test,
    };
    let cfg = TrainConfig {
        lr: 0.05,
        optimizer: Optimizer::Momentum { mu: 0.9 },
        batch_items: 49,
        steps: 1500,
        eval_every: 50,
        eval_limit: 0,
        ..TrainConfig::default()
    };
    let model = init_params(
        ModelConfig::Transformer(TransformerConfig::new(ds.vocab.len(), 32, 4, 4, 5)),
        3,
    )
    .unwrap();
    let (_, rec) = train(model, &data, &cfg).unwrap().into_result().unwrap();
    let step = rec.first_step_reaching("train", 1.0);
    assert!(step.is_some(), "final train accuracy {}", rec.last("train").unwrap().accuracy);
}
