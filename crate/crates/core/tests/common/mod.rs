//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

use lmlab::model::Model;
use lmlab::train::{batch_gradients, evaluate, Example};
use lmlab::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-4)`: relative error, with gradients below
/// 1e-4 compared on an absolute 1e-8 scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Largest error between the tape gradient of `f` and central differences,
/// over every entry of every input.
pub fn check_fn<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    assert_eq!(out.value().len(), 1, "check_fn needs a scalar output");
    let grads = tape.backward(out, &vars).unwrap();
    let eval = |xs: &[Tensor]| {
        let t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &v).item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let g = grads.get(vars[i]).clone();
        for j in 0..inputs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(g.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Weighted sum of all entries, so every output entry gets its own
/// upstream gradient.
pub fn project<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let n = v.value().len();
    let w: Vec<f64> = (0..n).map(|i| (((i as u64 + 1) * (seed * 2 + 7)) % 13) as f64 / 6.5 - 1.0).collect();
    let w = tape.constant(Tensor::new(v.shape(), w).unwrap());
    v.mul(&w).unwrap().sum()
}

fn mean_loss(model: &Model, examples: &[Example]) -> f64 {
    let (nll, _, n) = evaluate(model, examples).unwrap();
    nll / n as f64
}

/// Largest error between backprop through `model` and central differences
/// of the mean cross-entropy over `examples`, over every parameter.
pub fn check_model(model: &Model, examples: &[Example]) -> f64 {
    let (_, grads) = batch_gradients(model, examples, 1).unwrap();
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let x0 = m.params()[i].data()[j];
            m.params_mut()[i].data_mut()[j] = x0 + STEP;
            let up = mean_loss(&m, examples);
            m.params_mut()[i].data_mut()[j] = x0 - STEP;
            let down = mean_loss(&m, examples);
            m.params_mut()[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(g.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}
