use super::{Forward, ParamSpec};
use crate::config::{kv_text, KvConfig};
use crate::error::{LmError, Result};
use crate::tensor::Var;
use crate::text::BOS;

/// L-gram model: the embeddings of the last L tokens are concatenated and
/// mapped by `W_d o relu o ... o W_0` to a prediction vector decoded against
/// the word embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnLmConfig {
    pub vocab_size: usize,
    pub p_word: usize,
    pub window: usize,
    pub hidden: Vec<usize>,
}

impl FfnLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.p_word == 0 || self.window == 0 {
            return Err(LmError::Config("ffn needs positive vocab_size, p_word and window".into()));
        }
        if self.hidden.contains(&0) {
            return Err(LmError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.window * self.p_word];
        w.extend_from_slice(&self.hidden);
        w.push(self.p_word);
        w
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = vec![ParamSpec::weight("embed", &[self.vocab_size, self.p_word], self.p_word)];
        for (i, pair) in self.widths().windows(2).enumerate() {
            s.push(ParamSpec::weight(format!("f.w{i}"), &[pair[1], pair[0]], pair[0]));
            s.push(ParamSpec::bias(format!("f.b{i}"), pair[1]));
        }
        s
    }

    pub fn to_kv(&self) -> String {
        kv_text(&[
            ("vocab_size", self.vocab_size.to_string()),
            ("p_word", self.p_word.to_string()),
            ("window", self.window.to_string()),
            (
                "hidden",
                self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
        ])
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let hidden = match kv.take_str("hidden") {
            None => vec![64],
            Some(s) if s.trim().is_empty() => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| LmError::Config(format!("bad hidden width {x:?}")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(FfnLmConfig {
            vocab_size: kv.take_required("vocab_size")?,
            p_word: kv.take_or("p_word", 16)?,
            window: kv.take_or("window", 4)?,
            hidden,
        })
    }
}

/// Logits for the rows of `windows`, each exactly L ids.
pub fn ffn_lm_forward<'t>(c: &FfnLmConfig, vars: &[Var<'t>], windows: &[Vec<usize>]) -> Result<Var<'t>> {
    if let Some(w) = windows.iter().find(|w| w.len() != c.window) {
        return Err(LmError::Contract(format!("window of {} ids, expected L = {}", w.len(), c.window)));
    }
    let embed = vars[0];
    let slots = (0..c.window)
        .map(|j| embed.gather(&windows.iter().map(|w| w[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let mut x = Var::concat_cols(&slots)?;
    let n_layers = (vars.len() - 1) / 2;
    for l in 0..n_layers {
        x = x.matmul_t(&vars[1 + 2 * l])?.add_row(&vars[2 + 2 * l])?;
        if l + 1 < n_layers {
            x = x.relu();
        }
    }
    x.matmul_t(&embed)
}

pub(super) fn forward<'t>(c: &FfnLmConfig, vars: &[Var<'t>], seqs: &[&[usize]]) -> Result<Forward<'t>> {
    let expected = c.param_specs().len();
    if vars.len() != expected {
        return Err(LmError::Contract(format!("expected {expected} parameter vars, got {}", vars.len())));
    }
    let mut windows = Vec::new();
    for s in seqs {
        for i in 0..s.len() {
            // last L tokens of x[..=i], BOS-padded on the left
            let w: Vec<usize> = (0..c.window)
                .map(|j| {
                    let back = c.window - 1 - j;
                    if i >= back {
                        s[i - back]
                    } else {
                        BOS
                    }
                })
                .collect();
            windows.push(w);
        }
    }
    Ok(Forward {
        logits: ffn_lm_forward(c, vars, &windows)?,
        layers: Vec::new(),
        attention: Vec::new(),
    })
}
