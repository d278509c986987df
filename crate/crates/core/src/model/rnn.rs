use super::{Forward, ParamSpec};
use crate::config::{kv_text, KvConfig};
use crate::error::{LmError, Result};
use crate::tensor::{Tensor, Var};
use crate::text::BOS;

/// `(v_{i+1}, s_{i+1}) = F(s_i, v_i, ..., v_{i-k+1})` with F a one-hidden-layer
/// FFN; `v` is decoded against the word embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    pub vocab_size: usize,
    pub p_word: usize,
    pub state_dim: usize,
    /// Number of recent inputs k fed to F.
    pub recent: usize,
    pub hidden: usize,
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.p_word == 0 || self.recent == 0 || self.hidden == 0 {
            return Err(LmError::Config(
                "rnn needs positive vocab_size, p_word, recent and hidden".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.recent * self.p_word
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (i, h, o) = (self.input_dim(), self.hidden, self.p_word + self.state_dim);
        vec![
            ParamSpec::weight("embed", &[self.vocab_size, self.p_word], self.p_word),
            ParamSpec::weight("f.w0", &[h, i], i),
            ParamSpec::bias("f.b0", h),
            ParamSpec::weight("f.w1", &[o, h], h),
            ParamSpec::bias("f.b1", o),
        ]
    }

    pub fn to_kv(&self) -> String {
        kv_text(&[
            ("vocab_size", self.vocab_size.to_string()),
            ("p_word", self.p_word.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("recent", self.recent.to_string()),
            ("hidden", self.hidden.to_string()),
        ])
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let p_word = kv.take_or("p_word", 16)?;
        Ok(RnnConfig {
            vocab_size: kv.take_required("vocab_size")?,
            p_word,
            state_dim: kv.take_or("state_dim", p_word)?,
            recent: kv.take_or("recent", 1)?,
            hidden: kv.take_or("hidden", 4 * p_word)?,
        })
    }
}

/// One application of F to a batch: `state` is `B x state_dim`, `recent`
/// holds k matrices `B x p_word`, oldest first. Returns `(logits, next state)`.
pub fn rnn_step<'t>(c: &RnnConfig, vars: &[Var<'t>], state: Var<'t>, recent: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    if recent.len() != c.recent {
        return Err(LmError::Contract(format!("rnn step expects {} inputs, got {}", c.recent, recent.len())));
    }
    let mut parts = Vec::with_capacity(1 + recent.len());
    if c.state_dim > 0 {
        parts.push(state);
    }
    parts.extend_from_slice(recent);
    let x = Var::concat_cols(&parts)?;
    let h = x.matmul_t(&vars[1])?.add_row(&vars[2])?.relu();
    let o = h.matmul_t(&vars[3])?.add_row(&vars[4])?;
    let v = o.slice_cols(0, c.p_word)?;
    let next = o.slice_cols(c.p_word, c.p_word + c.state_dim)?;
    Ok((v.matmul_t(&vars[0])?, next))
}

pub(super) fn forward<'t>(c: &RnnConfig, vars: &[Var<'t>], seqs: &[&[usize]]) -> Result<Forward<'t>> {
    if vars.len() != 5 {
        return Err(LmError::Contract(format!("expected 5 parameter vars, got {}", vars.len())));
    }
    let tape = vars[0].tape();
    let embed = vars[0];
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    // Sequences still running at step t, in input order.
    let active = |t: usize| -> Vec<usize> { (0..seqs.len()).filter(|&b| seqs[b].len() > t).collect() };
    let mut prev_active = active(0);
    let mut state = tape.constant(Tensor::zeros(&[prev_active.len(), c.state_dim]));
    let mut blocks = Vec::with_capacity(longest);
    // (sequence, position) of each row in step-major order
    let mut row_of: Vec<(usize, usize)> = Vec::new();
    for t in 0..longest {
        let act = active(t);
        if act.len() != prev_active.len() {
            let keep: Vec<usize> = act
                .iter()
                .map(|b| prev_active.iter().position(|x| x == b).expect("active sets shrink"))
                .collect();
            state = state.gather(&keep)?;
        }
        let mut recent = Vec::with_capacity(c.recent);
        for j in 0..c.recent {
            let back = c.recent - 1 - j;
            let ids: Vec<usize> = act
                .iter()
                .map(|&b| if t >= back { seqs[b][t - back] } else { BOS })
                .collect();
            recent.push(embed.gather(&ids)?);
        }
        let (logits, next) = rnn_step(c, vars, state, &recent)?;
        blocks.push(logits);
        row_of.extend(act.iter().map(|&b| (b, t)));
        state = next;
        prev_active = act;
    }
    let stacked = Var::concat_rows(&blocks)?;
    let mut order: Vec<usize> = (0..row_of.len()).collect();
    order.sort_by_key(|&r| row_of[r]);
    let logits = stacked.gather(&order)?;
    Ok(Forward {
        logits,
        layers: Vec::new(),
        attention: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::rng::seeded;
    use crate::tensor::Tape;

    fn cfg() -> RnnConfig {
        RnnConfig {
            vocab_size: 6,
            p_word: 3,
            state_dim: 4,
            recent: 2,
            hidden: 5,
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let c = cfg();
        let tape = Tape::new();
        let vars: Vec<_> = c.param_specs().iter().map(|s| tape.param(Tensor::zeros(&s.shape))).collect();
        let state = tape.constant(Tensor::full(&[1, 4], 0.7));
        let recent = vec![tape.constant(Tensor::full(&[1, 3], 1.0)); 2];
        let (logits, next) = rnn_step(&c, &vars, state, &recent).unwrap();
        assert!(logits.value().data().iter().all(|&x| x == 0.0));
        assert!(next.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batched_matches_single_sequences() {
        let m = Model::init(ModelConfig::Rnn(cfg()), &mut seeded(3)).unwrap();
        let a: &[usize] = &[1, 2, 3, 4];
        let b: &[usize] = &[5, 0];
        let tape = Tape::new();
        let vars = m.bind(&tape, false);
        let both = m.forward(&vars, &[a, b]).unwrap().logits.value();
        let la = m.logits(a).unwrap();
        let lb = m.logits(b).unwrap();
        let mut expect = la.data().to_vec();
        expect.extend_from_slice(lb.data());
        for (x, y) in both.data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
