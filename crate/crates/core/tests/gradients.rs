mod common;

use common::{check_fn, check_model, project};
use lmlab::model::{Bilinear, FfnLmConfig, Model, ModelConfig, PositionalMode, RnnConfig, TransformerConfig};
use lmlab::rng::seeded;
use lmlab::tensor::AttentionSpec;
use lmlab::train::{task_example, window_example, Example};
use lmlab::{Tensor, Var};
use rand::Rng as _;

const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    // keep entries away from the ReLU / abs kink at zero
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn elementwise_and_matrix_ops() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    let m = rand_t(&[4, 2], 3);
    let cases: Vec<(&str, f64)> = vec![
        ("add", check_fn(&[a.clone(), b.clone()], |t, v| project(t, v[0].add(&v[1]).unwrap(), 1))),
        ("sub", check_fn(&[a.clone(), b.clone()], |t, v| project(t, v[0].sub(&v[1]).unwrap(), 2))),
        ("mul", check_fn(&[a.clone(), b.clone()], |t, v| project(t, v[0].mul(&v[1]).unwrap(), 3))),
        ("scale", check_fn(&[a.clone()], |t, v| project(t, v[0].scale(-2.5), 4))),
        ("matmul", check_fn(&[a.clone(), m.clone()], |t, v| project(t, v[0].matmul(&v[1]).unwrap(), 5))),
        ("matmul_t", check_fn(&[a.clone(), b.clone()], |t, v| project(t, v[0].matmul_t(&v[1]).unwrap(), 6))),
        ("relu", check_fn(&[a.clone()], |t, v| project(t, v[0].relu(), 7))),
        ("abs", check_fn(&[a.clone()], |t, v| project(t, v[0].abs(), 8))),
        ("sum", check_fn(&[a.clone()], |_, v| v[0].sum())),
        ("mean", check_fn(&[a.clone()], |_, v| v[0].mean())),
        ("row_sum", check_fn(&[a.clone()], |t, v| project(t, v[0].row_sum(), 9))),
        (
            "add_row",
            check_fn(&[a.clone(), rand_t(&[4], 10)], |t, v| project(t, v[0].add_row(&v[1]).unwrap(), 10)),
        ),
    ];
    for (name, err) in cases {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn indexing_and_layout_ops() {
    let table = rand_t(&[5, 3], 11);
    let a = rand_t(&[2, 3], 12);
    let b = rand_t(&[2, 2], 13);
    let c = rand_t(&[1, 3], 14);
    let cases: Vec<(&str, f64)> = vec![
        ("gather", check_fn(&[table], |t, v| project(t, v[0].gather(&[4, 0, 4, 2]).unwrap(), 1))),
        (
            "concat_cols",
            check_fn(&[a.clone(), b], |t, v| project(t, Var::concat_cols(&[v[0], v[1]]).unwrap(), 2)),
        ),
        (
            "concat_rows",
            check_fn(&[a.clone(), c], |t, v| project(t, Var::concat_rows(&[v[0], v[1]]).unwrap(), 3)),
        ),
        ("slice_cols", check_fn(&[a], |t, v| project(t, v[0].slice_cols(1, 3).unwrap(), 4))),
    ];
    for (name, err) in cases {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn normalizing_ops() {
    let a = rand_t(&[3, 5], 21);
    let cases: Vec<(&str, f64)> = vec![
        ("softmax_rows", check_fn(&[a.clone()], |t, v| project(t, v[0].softmax_rows(1.7), 1))),
        ("layer_norm", check_fn(&[a.clone()], |t, v| project(t, v[0].layer_norm(1e-5), 2))),
        (
            "cross_entropy",
            check_fn(&[a], |_, v| v[0].cross_entropy(&[Some(4), None, Some(0)], 2.0).unwrap()),
        ),
    ];
    for (name, err) in cases {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn fused_attention() {
    for (heads, causal, segments) in [(1, true, vec![4]), (2, true, vec![3, 2]), (2, false, vec![5])] {
        let n: usize = segments.iter().sum();
        let q = rand_t(&[n, 4], 31);
        let k = rand_t(&[n, 4], 32);
        let v = rand_t(&[n, 6], 33);
        let spec = AttentionSpec {
            heads,
            key_dim: 4 / heads,
            value_dim: 6 / heads,
            segments: segments.clone(),
            causal,
        };
        let err = check_fn(&[q, k, v], |t, x| project(t, Var::attention(&x[0], &x[1], &x[2], spec.clone()).unwrap(), 5));
        assert!(err < TOL, "heads {heads} causal {causal} segments {segments:?}: {err}");
    }
}

fn corpus_examples(v: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut rng = seeded(seed);
    let ids: Vec<usize> = (0..3 * len + 1).map(|_| rng.random_range(0..v)).collect();
    vec![window_example(&ids, 0, len), window_example(&ids, len, len)]
}

fn check(config: ModelConfig, seed: u64) -> f64 {
    let v = config.vocab_size();
    let len = config.window().unwrap_or(5).min(5);
    let m = Model::init(config, &mut seeded(seed)).unwrap();
    check_model(&m, &corpus_examples(v, len, seed + 100))
}

#[test]
fn transformer_variants() {
    let base = || {
        let mut c = TransformerConfig::new(7, 8, 2, 2, 6);
        c.d_pos = 2;
        c.p_word = 6;
        c.ffn_hidden = 6;
        c
    };
    let mut variants: Vec<(&str, TransformerConfig)> = vec![("default", base())];
    variants.push(("no residual", TransformerConfig { residual: false, ..base() }));
    variants.push(("untied", TransformerConfig { tied: false, ..base() }));
    variants.push(("layer norm", TransformerConfig { layer_norm: true, ..base() }));
    variants.push(("dense bilinear", TransformerConfig { bilinear: Bilinear::Dense, ..base() }));
    variants.push(("output map", TransformerConfig { attn_output_map: true, ..base() }));
    variants.push(("depth 0", TransformerConfig { depth: 0, ..base() }));
    variants.push(("depth 4", TransformerConfig { depth: 4, ..base() }));
    variants.push((
        "additive positions",
        TransformerConfig {
            positional: PositionalMode::Additive,
            d_pos: 8,
            p_word: 8,
            ..base()
        },
    ));
    for (k, (name, c)) in variants.into_iter().enumerate() {
        let err = check(ModelConfig::Transformer(c), k as u64);
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn recurrent_and_feedforward_models() {
    let rnn = RnnConfig {
        vocab_size: 6,
        p_word: 3,
        state_dim: 4,
        recent: 2,
        hidden: 5,
    };
    let err = check(ModelConfig::Rnn(rnn), 1);
    assert!(err < TOL, "rnn: {err}");
    let ffn = FfnLmConfig {
        vocab_size: 6,
        p_word: 3,
        window: 3,
        hidden: vec![5, 4],
    };
    let err = check(ModelConfig::FfnLm(ffn), 2);
    assert!(err < TOL, "ffn: {err}");
}

#[test]
fn task_loss_scores_only_the_answer() {
    let item = lmlab::grammar::TaskItem {
        prompt: vec![3, 4, 5],
        answer: 6,
    };
    let mut c = TransformerConfig::new(7, 8, 2, 2, 6);
    c.d_pos = 2;
    c.p_word = 6;
    let m = Model::init(ModelConfig::Transformer(c), &mut seeded(9)).unwrap();
    let err = check_model(&m, &[task_example(&item)]);
    assert!(err < TOL, "{err}");
}
