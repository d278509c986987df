//! Neural language models: the FFN L-gram model, the RNN and the
//! decoder-only transformer.
//!
//! Every model maps a token sequence `x` to one logit row per position;
//! row `i` scores the token that follows `x[..=i]`. As a
//! [`LanguageModel`], a model is fed `[BOS] + prefix`.

mod checkpoint;
mod ffn;
mod rnn;
mod transformer;

pub use checkpoint::{read_checkpoint, read_checkpoint_raw, write_checkpoint, RawCheckpoint, CHECKPOINT_VERSION};
pub use ffn::{ffn_lm_forward, FfnLmConfig};
pub use rnn::{rnn_step, RnnConfig};
pub use transformer::{
    attention_layer, ffn_layer, positional_encoding, Bilinear, PositionalMode, TransformerConfig,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{LmError, Result};
use crate::lm::LanguageModel;
use crate::rng::Rng;
use crate::tensor::{softmax, Tape, Tensor, Var};
use crate::text::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with mean zero and variance `1 / fan_in`.
    Normal { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub(crate) fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Normal { fan_in },
        }
    }

    pub(crate) fn bias(name: impl Into<String>, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![n],
            init: Init::Zeros,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Rnn(RnnConfig),
    FfnLm(FfnLmConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Rnn(_) => "rnn",
            ModelConfig::FfnLm(_) => "ffn",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Rnn(c) => c.vocab_size,
            ModelConfig::FfnLm(c) => c.vocab_size,
        }
    }

    /// Longest input the model accepts in one pass, if bounded.
    pub fn window(&self) -> Option<usize> {
        match self {
            ModelConfig::Transformer(c) => Some(c.window),
            ModelConfig::Rnn(_) => None,
            ModelConfig::FfnLm(c) => Some(c.window),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Rnn(c) => c.validate(),
            ModelConfig::FfnLm(c) => c.validate(),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            ModelConfig::Transformer(c) => c.param_specs(),
            ModelConfig::Rnn(c) => c.param_specs(),
            ModelConfig::FfnLm(c) => c.param_specs(),
        }
    }

    /// Canonical `key=value` text, starting with `model=<kind>`.
    pub fn to_kv(&self) -> String {
        let body = match self {
            ModelConfig::Transformer(c) => c.to_kv(),
            ModelConfig::Rnn(c) => c.to_kv(),
            ModelConfig::FfnLm(c) => c.to_kv(),
        };
        format!("model={}\n{body}", self.kind())
    }

    /// Reads (and removes) the model keys, dispatching on `model`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<ModelConfig> {
        let kind = kv.take_str("model").unwrap_or_else(|| "transformer".into());
        let c = match kind.as_str() {
            "transformer" => ModelConfig::Transformer(TransformerConfig::from_kv(kv)?),
            "rnn" => ModelConfig::Rnn(RnnConfig::from_kv(kv)?),
            "ffn" => ModelConfig::FfnLm(FfnLmConfig::from_kv(kv)?),
            other => {
                return Err(LmError::Config(format!(
                    "unknown model kind {other:?} (transformer, rnn, ffn)"
                )))
            }
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    /// Sum of the sizes of all parameter tensors.
    pub exact: u64,
    /// `12 D p^2` (transformers only).
    pub approx_12dp2: Option<f64>,
    /// `12 (D/2) p^2`: the same rule with D counting attention+FFN blocks.
    pub approx_per_block: Option<f64>,
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let exact = config.param_specs().iter().map(|s| s.numel() as u64).sum();
    let (a, b) = match config {
        ModelConfig::Transformer(c) => {
            let p2 = (c.p as f64).powi(2);
            (Some(12.0 * c.depth as f64 * p2), Some(12.0 * (c.depth / 2) as f64 * p2))
        }
        _ => (None, None),
    };
    ParamCount {
        exact,
        approx_12dp2: a,
        approx_per_block: b,
    }
}

/// Values recorded during a forward pass.
pub struct Forward<'t> {
    /// One row per input position.
    pub logits: Var<'t>,
    /// Transformer: the input embedding followed by every layer's output.
    pub layers: Vec<Var<'t>>,
    /// Transformer: the fused attention node of each attention layer.
    pub attention: Vec<Var<'t>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    /// Weights drawn from `Normal(0, 1/fan_in)`, biases zero.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let params = config
            .param_specs()
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Normal { fan_in } => {
                    let d = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("valid std");
                    let data = (0..s.numel()).map(|_| d.sample(rng)).collect();
                    Tensor::new(s.shape.clone(), data).expect("spec shape")
                }
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Checks every tensor against the shapes the config implies.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Model> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(LmError::Data(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, t) in specs.iter().zip(&params) {
            if s.shape != t.shape() {
                return Err(LmError::Data(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.all_finite() {
                return Err(LmError::Numeric(format!("parameter {} is not finite", s.name)));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|s| s.name).collect()
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.param_names().iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.param_names().iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Puts the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Logit rows for the concatenation of `seqs`, in order.
    pub fn forward<'t>(&self, vars: &[Var<'t>], seqs: &[&[usize]]) -> Result<Forward<'t>> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(LmError::Contract("forward needs non-empty sequences".into()));
        }
        let v = self.config.vocab_size();
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t >= v) {
            return Err(LmError::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        match &self.config {
            ModelConfig::Transformer(c) => transformer::forward(c, vars, seqs),
            ModelConfig::Rnn(c) => rnn::forward(c, vars, seqs),
            ModelConfig::FfnLm(c) => ffn::forward(c, vars, seqs),
        }
    }

    /// Logits (rows = positions of `seq`) without recording gradients.
    pub fn logits(&self, seq: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        Ok(self.forward(&vars, &[seq])?.logits.value())
    }

    fn model_input(&self, prefix: &[usize]) -> Vec<usize> {
        let mut x = Vec::with_capacity(prefix.len() + 1);
        x.push(BOS);
        x.extend_from_slice(prefix);
        match self.config.window() {
            Some(l) if x.len() > l => x[x.len() - l..].to_vec(),
            _ => x,
        }
    }
}

impl LanguageModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let x = self.model_input(prefix);
        let t = self.logits(&x)?;
        Ok(t.row(t.rows() - 1).to_vec())
    }

    fn sequence_logits(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let fits = self.config.window().is_none_or(|l| ids.len() <= l);
        if !fits {
            return (0..ids.len()).map(|i| self.next_logits(&ids[..i])).collect();
        }
        let mut x = vec![BOS];
        x.extend_from_slice(&ids[..ids.len() - 1]);
        let t = self.logits(&x)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// Next-token distribution at temperature `t`: `softmax(logits / t)`;
/// `t = 0` is greedy (one-hot at the lowest-index maximum).
pub fn decode(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(LmError::Config(format!("temperature {t} must be finite and >= 0")));
    }
    if logits.is_empty() {
        return Err(LmError::Contract("empty logit vector".into()));
    }
    if t == 0.0 {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return Ok(p);
    }
    let p = softmax(logits, 1.0 / t);
    if p.iter().any(|x| !x.is_finite()) {
        return Err(LmError::Numeric("next-token distribution is not finite".into()));
    }
    Ok(p)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a probability vector by inversion.
pub fn draw(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative value
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Extends `prompt` one token at a time. Returns only the new tokens; stops
/// after emitting EOS or after `max_len` tokens.
pub fn sample<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    temperature: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let p = decode(&model.next_logits(&seq)?, temperature)?;
        let w = draw(&p, rng);
        seq.push(w);
        out.push(w);
        if w == EOS {
            break;
        }
    }
    Ok(out)
}
