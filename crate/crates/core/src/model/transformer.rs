use super::{Forward, ParamSpec};
use crate::config::{kv_text, KvConfig};
use crate::error::{LmError, Result};
use crate::tensor::{AttentionSpec, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bilinear {
    /// `B_h = K_h^T Q_h` with `Q_h, K_h` both `q x p`.
    Factored,
    /// A full `p x p` matrix per head.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalMode {
    /// `[word embedding ; positional encoding]`, `p = p_word + d_pos`.
    Concat,
    /// Positional encoding added to a width-`p` word embedding.
    Additive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub p: usize,
    pub p_word: usize,
    pub d_pos: usize,
    /// Window length L.
    pub window: usize,
    /// Number of layers, attention and FFN counted separately; they
    /// alternate starting with attention.
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub residual: bool,
    pub layer_norm: bool,
    pub tied: bool,
    pub bilinear: Bilinear,
    /// Extra `p x p` map after the concatenated heads.
    pub attn_output_map: bool,
    pub positional: PositionalMode,
    /// `false` lets every position attend everywhere (diagnostics only).
    pub causal: bool,
}

/// `p / 8` rounded to an even number, at least 2.
pub fn default_d_pos(p: usize) -> usize {
    let d = ((p as f64 / 8.0 / 2.0).round() as usize) * 2;
    d.max(2)
}

impl TransformerConfig {
    /// Defaults: concatenated positional encoding of width `p/8`, FFN width
    /// `4p`, residual on, layer norm off, tied decoder.
    pub fn new(vocab_size: usize, p: usize, heads: usize, depth: usize, window: usize) -> Self {
        let d_pos = default_d_pos(p).min(p.saturating_sub(1) & !1);
        TransformerConfig {
            vocab_size,
            p,
            p_word: p - d_pos,
            d_pos,
            window,
            depth,
            heads,
            ffn_hidden: 4 * p,
            residual: true,
            layer_norm: false,
            tied: true,
            bilinear: Bilinear::Factored,
            attn_output_map: false,
            positional: PositionalMode::Concat,
            causal: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.p / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.vocab_size == 0 || self.p == 0 || self.window == 0 {
            return bad("vocab_size, p and window must be positive".into());
        }
        if self.heads == 0 || self.p % self.heads != 0 {
            return bad(format!("p = {} is not a multiple of heads = {}", self.p, self.heads));
        }
        if self.d_pos % 2 != 0 {
            return bad(format!("d_pos = {} must be even", self.d_pos));
        }
        match self.positional {
            PositionalMode::Concat if self.p_word + self.d_pos != self.p => {
                return bad(format!(
                    "p = {} must equal p_word + d_pos = {} + {}",
                    self.p, self.p_word, self.d_pos
                ))
            }
            PositionalMode::Additive if self.p_word != self.p || self.d_pos != self.p => {
                return bad("additive positions need p_word = d_pos = p".into())
            }
            _ => {}
        }
        if self.p_word == 0 {
            return bad("p_word must be positive".into());
        }
        if self.depth % 2 != 0 {
            return bad(format!("depth = {} must be even (attention and FFN alternate)", self.depth));
        }
        if self.depth > 0 && self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (p, hq) = (self.p, self.heads * self.head_dim());
        let mut s = vec![ParamSpec::weight("embed", &[self.vocab_size, self.p_word], self.p_word)];
        for l in 0..self.depth {
            if l % 2 == 0 {
                match self.bilinear {
                    Bilinear::Factored => {
                        s.push(ParamSpec::weight(format!("layer{l}.attn.wq"), &[hq, p], p));
                        s.push(ParamSpec::weight(format!("layer{l}.attn.wk"), &[hq, p], p));
                    }
                    Bilinear::Dense => {
                        s.push(ParamSpec::weight(format!("layer{l}.attn.b"), &[p, self.heads * p], p));
                    }
                }
                s.push(ParamSpec::weight(format!("layer{l}.attn.wv"), &[hq, p], p));
                if self.attn_output_map {
                    s.push(ParamSpec::weight(format!("layer{l}.attn.wo"), &[p, hq], hq));
                }
            } else {
                let h = self.ffn_hidden;
                s.push(ParamSpec::weight(format!("layer{l}.ffn.w0"), &[h, p], p));
                s.push(ParamSpec::bias(format!("layer{l}.ffn.b0"), h));
                s.push(ParamSpec::weight(format!("layer{l}.ffn.w1"), &[p, h], h));
                s.push(ParamSpec::bias(format!("layer{l}.ffn.b1"), p));
            }
        }
        if !self.tied {
            s.push(ParamSpec::weight("decoder", &[self.vocab_size, p], p));
        }
        s
    }

    /// Number of parameter tensors of layer `l`.
    fn layer_tensor_count(&self, l: usize) -> usize {
        if l % 2 == 0 {
            let qk = match self.bilinear {
                Bilinear::Factored => 2,
                Bilinear::Dense => 1,
            };
            qk + 1 + usize::from(self.attn_output_map)
        } else {
            4
        }
    }

    pub fn to_kv(&self) -> String {
        kv_text(&[
            ("vocab_size", self.vocab_size.to_string()),
            ("p", self.p.to_string()),
            ("p_word", self.p_word.to_string()),
            ("d_pos", self.d_pos.to_string()),
            ("window", self.window.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("residual", self.residual.to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            ("tied", self.tied.to_string()),
            (
                "bilinear",
                match self.bilinear {
                    Bilinear::Factored => "factored",
                    Bilinear::Dense => "dense",
                }
                .into(),
            ),
            ("attn_output_map", self.attn_output_map.to_string()),
            (
                "positional",
                match self.positional {
                    PositionalMode::Concat => "concat",
                    PositionalMode::Additive => "additive",
                }
                .into(),
            ),
            ("causal", self.causal.to_string()),
        ])
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let vocab_size = kv.take_required("vocab_size")?;
        let p = kv.take_required("p")?;
        let heads = kv.take_or("heads", 1)?;
        let depth = kv.take_or("depth", 2)?;
        let window = kv.take_or("window", 64)?;
        let mut c = TransformerConfig::new(vocab_size, p, heads, depth, window);
        c.positional = match kv.take_str("positional").as_deref() {
            None | Some("concat") => PositionalMode::Concat,
            Some("additive") => PositionalMode::Additive,
            Some(o) => return Err(LmError::Config(format!("unknown positional mode {o:?}"))),
        };
        if c.positional == PositionalMode::Additive {
            c.d_pos = p;
            c.p_word = p;
        }
        c.d_pos = kv.take_or("d_pos", c.d_pos)?;
        c.p_word = kv.take_or("p_word", if c.positional == PositionalMode::Concat { p.saturating_sub(c.d_pos) } else { p })?;
        c.ffn_hidden = kv.take_or("ffn_hidden", c.ffn_hidden)?;
        c.residual = kv.take_or("residual", c.residual)?;
        c.layer_norm = kv.take_or("layer_norm", c.layer_norm)?;
        c.tied = kv.take_or("tied", c.tied)?;
        c.bilinear = match kv.take_str("bilinear").as_deref() {
            None | Some("factored") => Bilinear::Factored,
            Some("dense") => Bilinear::Dense,
            Some(o) => return Err(LmError::Config(format!("unknown bilinear mode {o:?}"))),
        };
        c.attn_output_map = kv.take_or("attn_output_map", c.attn_output_map)?;
        c.causal = kv.take_or("causal", c.causal)?;
        Ok(c)
    }
}

/// Row `s` holds the encoding of position `s`; columns `2i - 2, 2i - 1`
/// hold `cos, sin` of `s / 10000^(2i / d_pos)`, `i = 1..=d_pos/2`.
pub fn positional_encoding(len: usize, d_pos: usize) -> Result<Tensor> {
    if d_pos % 2 != 0 {
        return Err(LmError::Config(format!("positional dimension {d_pos} must be even")));
    }
    let mut data = Vec::with_capacity(len * d_pos);
    for s in 0..len {
        for i in 1..=d_pos / 2 {
            let angle = s as f64 / 10000f64.powf(2.0 * i as f64 / d_pos as f64);
            data.push(angle.cos());
            data.push(angle.sin());
        }
    }
    Ok(Tensor::matrix(len, d_pos, data))
}

/// One attention layer over stacked segments. `w` holds the layer's tensors
/// in `param_specs` order. Returns the layer output and the attention node.
pub fn attention_layer<'t>(
    c: &TransformerConfig,
    w: &[Var<'t>],
    u: Var<'t>,
    segments: &[usize],
) -> Result<(Var<'t>, Var<'t>)> {
    let x = if c.layer_norm { u.layer_norm(LN_EPS) } else { u };
    let q = c.head_dim();
    let (qm, km, key_dim, rest) = match c.bilinear {
        Bilinear::Factored => (x.matmul_t(&w[0])?, x.matmul_t(&w[1])?, q, &w[2..]),
        Bilinear::Dense => {
            // u_i . B_h . u_j: queries u_i^T B_h, keys u_j, for every head
            let keys = Var::concat_cols(&vec![x; c.heads])?;
            (x.matmul(&w[0])?, keys, c.p, &w[1..])
        }
    };
    let vm = x.matmul_t(&rest[0])?;
    let spec = AttentionSpec {
        heads: c.heads,
        key_dim,
        value_dim: q,
        segments: segments.to_vec(),
        causal: c.causal,
    };
    let att = Var::attention(&qm, &km, &vm, spec)?;
    let mut out = att;
    if c.attn_output_map {
        out = out.matmul_t(&rest[1])?;
    }
    let out = if c.residual { u.add(&out)? } else { out };
    Ok((out, att))
}

/// Position-wise `W1 relu(W0 u + b0) + b1`, plus `u` with residuals.
pub fn ffn_layer<'t>(c: &TransformerConfig, w: &[Var<'t>], u: Var<'t>) -> Result<Var<'t>> {
    let x = if c.layer_norm { u.layer_norm(LN_EPS) } else { u };
    let h = x.matmul_t(&w[0])?.add_row(&w[1])?.relu();
    let out = h.matmul_t(&w[2])?.add_row(&w[3])?;
    if c.residual {
        u.add(&out)
    } else {
        Ok(out)
    }
}

pub(super) fn forward<'t>(c: &TransformerConfig, vars: &[Var<'t>], seqs: &[&[usize]]) -> Result<Forward<'t>> {
    let expected = c.param_specs().len();
    if vars.len() != expected {
        return Err(LmError::Contract(format!("expected {expected} parameter vars, got {}", vars.len())));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() > c.window) {
        return Err(LmError::Contract(format!(
            "input of {} tokens exceeds the window L = {}",
            s.len(),
            c.window
        )));
    }
    let tape = vars[0].tape();
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let segments: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let embed = vars[0];
    let words = embed.gather(&ids)?;
    let mut u = if c.d_pos == 0 {
        words
    } else {
        let longest = segments.iter().copied().max().unwrap_or(0);
        let table = positional_encoding(longest, c.d_pos)?;
        let mut pos = Vec::with_capacity(ids.len() * c.d_pos);
        for &len in &segments {
            pos.extend_from_slice(&table.data()[..len * c.d_pos]);
        }
        let pos = tape.constant(Tensor::matrix(ids.len(), c.d_pos, pos));
        match c.positional {
            PositionalMode::Concat => Var::concat_cols(&[words, pos])?,
            PositionalMode::Additive => words.add(&pos)?,
        }
    };
    let mut layers = vec![u];
    let mut attention = Vec::new();
    let mut at = 1;
    for l in 0..c.depth {
        let n = c.layer_tensor_count(l);
        let w = &vars[at..at + n];
        at += n;
        if l % 2 == 0 {
            let (out, att) = attention_layer(c, w, u, &segments)?;
            u = out;
            attention.push(att);
        } else {
            u = ffn_layer(c, w, u)?;
        }
        layers.push(u);
    }
    let fin = if c.layer_norm { u.layer_norm(LN_EPS) } else { u };
    let logits = if c.tied {
        let word = if c.p_word == c.p { fin } else { fin.slice_cols(0, c.p_word)? };
        word.matmul_t(&embed)?
    } else {
        fin.matmul_t(&vars[at])?
    };
    Ok(Forward {
        logits,
        layers,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::rng::seeded;
    use crate::tensor::Tape;

    #[test]
    fn position_zero_is_cos_sin_of_zero() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(pe.row(0), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        for s in 0..3 {
            for i in 0..3 {
                let (c, si) = (pe.at(s, 2 * i), pe.at(s, 2 * i + 1));
                assert!((c * c + si * si - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn position_one_lowest_dimension() {
        let pe = positional_encoding(2, 2).unwrap();
        assert!((pe.at(1, 0) - (1e-4f64).cos()).abs() < 1e-16);
        assert!((pe.at(1, 1) - 1e-4f64.sin()).abs() < 1e-16);
        assert!((pe.at(1, 0) - 0.999999995).abs() < 1e-12);
        assert!((pe.at(1, 1) - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(positional_encoding(2, 3), Err(LmError::Config(_))));
    }

    #[test]
    fn config_kv_round_trip() {
        let mut c = TransformerConfig::new(11, 16, 4, 4, 9);
        c.layer_norm = true;
        c.bilinear = Bilinear::Dense;
        let text = ModelConfig::Transformer(c.clone()).to_kv();
        let mut kv = KvConfig::parse(&text).unwrap();
        let back = ModelConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, ModelConfig::Transformer(c));
    }

    #[test]
    fn invalid_shapes_rejected() {
        let mut c = TransformerConfig::new(5, 10, 3, 2, 4);
        assert!(c.validate().is_err());
        c.heads = 2;
        c.validate().unwrap();
        c.depth = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn window_overflow_names_l() {
        let c = TransformerConfig::new(5, 8, 2, 2, 3);
        let m = Model::init(ModelConfig::Transformer(c), &mut seeded(0)).unwrap();
        let e = m.logits(&[0, 1, 2, 3]).unwrap_err().to_string();
        assert!(e.contains("L = 3"), "{e}");
    }

    #[test]
    fn zero_ffn_with_residual_is_identity() {
        let c = TransformerConfig::new(5, 4, 1, 2, 3);
        let tape = Tape::new();
        let w: Vec<_> = [vec![8, 4], vec![8], vec![4, 8], vec![4]]
            .iter()
            .map(|s| tape.param(Tensor::zeros(s)))
            .collect();
        let u = tape.constant(Tensor::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, -1.0, 2.0]));
        let out = ffn_layer(&c, &w, u).unwrap();
        assert_eq!(out.value(), u.value());
    }

    #[test]
    fn zero_bilinear_gives_uniform_prefix_weights() {
        let c = TransformerConfig::new(5, 4, 1, 2, 4);
        let tape = Tape::new();
        let w = vec![
            tape.constant(Tensor::zeros(&[4, 4])),
            tape.constant(Tensor::zeros(&[4, 4])),
            tape.constant(Tensor::identity(4)),
        ];
        let u = tape.constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()));
        let (_, att) = attention_layer(&c, &w, u, &[3]).unwrap();
        let (_, probs) = tape.attention_weights(att).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((probs[i * 3 + j] - expect).abs() < 1e-15);
            }
        }
    }
}
