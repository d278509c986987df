use super::trace::capture_activations;
use crate::error::{LmError, Result};
use crate::grammar::{induction_first_occurrence, TaskItem};
use crate::model::{argmax, Bilinear, Model, ModelConfig, PositionalMode, TransformerConfig};
use crate::tensor::Tensor;
use crate::text::BOS;

#[derive(Clone, Debug, PartialEq)]
pub struct InductionScore {
    /// Fraction of items whose argmax prediction after the second A is B.
    pub accuracy: f64,
    /// Mean over items of the largest attention (any layer, any head) from
    /// the second A onto the earlier A or B.
    pub attention_mass: f64,
    pub items: usize,
}

pub fn induction_score(model: &Model, items: &[TaskItem]) -> Result<InductionScore> {
    if items.is_empty() {
        return Err(LmError::Data("no induction items to score".into()));
    }
    let (mut correct, mut mass) = (0usize, 0.0);
    for item in items {
        let mut input = vec![BOS];
        input.extend_from_slice(&item.prompt);
        let trace = capture_activations(model, &input, &[], true)?;
        let logits = model.logits(&input)?;
        correct += usize::from(argmax(logits.row(logits.rows() - 1)) == item.answer);
        let last = input.len() - 1;
        if let Some(a) = induction_first_occurrence(item) {
            let (pa, pb) = (a + 1, a + 2);
            let best = trace
                .attention
                .iter()
                .flat_map(|m| m.heads.iter())
                .map(|h| h.at(last, pa).max(h.at(last, pb)))
                .fold(0.0, f64::max);
            mass += best;
        }
    }
    Ok(InductionScore {
        accuracy: correct as f64 / items.len() as f64,
        attention_mass: mass / items.len() as f64,
        items: items.len(),
    })
}

/// A 2-attention-layer transformer whose weights are set by hand to copy:
/// layer 1 writes the previous token into a spare slot of the residual
/// stream, and layer 3 attends from the current token to the position whose
/// previous token matches it and adds that position's token to the output.
///
/// Layout of the width-`p` stream (two heads of width `p/2`):
/// `[token one-hot | pad | previous-token one-hot | pad | positions]`
/// with the previous-token slot at `p/2`.
pub fn copy_match_model(vocab_size: usize, p: usize, window: usize) -> Result<Model> {
    let half = p / 2;
    if p % 2 != 0 || half < vocab_size + 4 {
        return Err(LmError::Config(format!(
            "copy-match construction needs even p with p/2 >= vocab + 4, got p = {p}, vocab = {vocab_size}"
        )));
    }
    let d_pos = (half - vocab_size) & !1;
    let c = TransformerConfig {
        p_word: p - d_pos,
        d_pos,
        bilinear: Bilinear::Factored,
        positional: PositionalMode::Concat,
        ..TransformerConfig::new(vocab_size, p, 2, 4, window)
    };
    let config = ModelConfig::Transformer(c.clone());
    let mut params: Vec<Tensor> = config.param_specs().iter().map(|s| Tensor::zeros(&s.shape)).collect();
    let pos0 = c.p_word;
    let omegas: Vec<f64> = (1..=d_pos / 2).map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / d_pos as f64)).collect();
    // Position-match score of offset `delta` falls short of the exact match
    // by `sum_k 1 - cos(omega_k delta)`; scale so the closest offset in the
    // window trails by POS_MARGIN logits.
    let gap = (1..window.max(2))
        .map(|delta| omegas.iter().map(|w| 1.0 - (w * delta as f64).cos()).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    if !(gap > 1e-9) {
        return Err(LmError::Config(format!(
            "copy-match construction: {d_pos} positional dimensions cannot separate {window} positions"
        )));
    }
    const POS_MARGIN: f64 = 60.0;
    let beta_pos = POS_MARGIN / gap;
    let beta_tok = 60.0_f64;
    let gain = 3.0;
    {
        let e = &mut params[0];
        for t in 0..vocab_size {
            e.set(t, t, 1.0);
        }
    }
    // Layer 1 (tensors 1..=3: wq, wk, wv), head 1 rows half..p.
    // Query rotates each (cos, sin) pair back one step; key is the identity.
    let s = beta_pos.sqrt();
    for (k, &omega) in omegas.iter().enumerate() {
        let (co, si) = (omega.cos(), omega.sin());
        let (rc, rs) = (half + 2 * k, half + 2 * k + 1);
        let (cc, cs) = (pos0 + 2 * k, pos0 + 2 * k + 1);
        let wq = &mut params[1];
        wq.set(rc, cc, s * co);
        wq.set(rc, cs, s * si);
        wq.set(rs, cc, -s * si);
        wq.set(rs, cs, s * co);
        let wk = &mut params[2];
        wk.set(rc, cc, s);
        wk.set(rs, cs, s);
    }
    for t in 0..vocab_size {
        params[3].set(half + t, t, 1.0);
    }
    // Layer 3 (tensors 8..=10 after the four FFN tensors), head 0.
    let s = beta_tok.sqrt();
    for t in 0..vocab_size {
        params[8].set(t, t, s);
        params[9].set(t, half + t, s);
        params[10].set(t, t, gain);
    }
    Model::from_params(config, params)
}
