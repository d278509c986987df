//! Initialization, the cross-entropy objective, gradient descent and the
//! training loops for corpora and supervised tasks.

mod record;

pub use record::{EvalEvent, RunRecord, METRICS_FORMAT_VERSION};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{kv_text, KvConfig};
use crate::error::{LmError, Result};
use crate::grammar::TaskItem;
use crate::model::{argmax, Model, ModelConfig};
use crate::rng::{derived, Rng};
use crate::tensor::{log_softmax, Tape, Tensor};
use crate::text::BOS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `theta -= lr * g`
    Sgd,
    /// `v = mu v + g; theta -= lr * v`
    Momentum { mu: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Tokens per step in corpus mode.
    pub batch_tokens: usize,
    /// Items per step in task mode.
    pub batch_items: usize,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub eval_every: usize,
    /// Fraction of the corpus (its tail) held out.
    pub test_fraction: f64,
    /// Training sequence length for models without a window (RNN).
    pub seq_len: usize,
    /// Windows (corpus) or items (task) per split per evaluation; 0 = all.
    pub eval_limit: usize,
    /// Stride of evaluation windows; 0 means the window length.
    pub eval_stride: usize,
    pub optimizer: Optimizer,
    /// Data-parallel shards per step.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            batch_tokens: 4096,
            batch_items: 64,
            steps: 1000,
            seed: 0,
            weight_decay: 0.0,
            clip: Some(1.0),
            eval_every: 100,
            test_fraction: 0.1,
            seq_len: 64,
            eval_limit: 64,
            eval_stride: 0,
            optimizer: Optimizer::Sgd,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if self.batch_tokens == 0 || self.batch_items == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if self.eval_every == 0 || self.workers == 0 || self.seq_len == 0 {
            return bad("eval_every, workers and seq_len must be positive".into());
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let (opt, extra) = match self.optimizer {
            Optimizer::Sgd => ("sgd".to_string(), Vec::new()),
            Optimizer::Momentum { mu } => ("momentum".to_string(), vec![("momentum", mu.to_string())]),
            Optimizer::Adam { beta1, beta2, eps } => (
                "adam".to_string(),
                vec![
                    ("adam_beta1", beta1.to_string()),
                    ("adam_beta2", beta2.to_string()),
                    ("adam_eps", eps.to_string()),
                ],
            ),
        };
        let mut pairs = vec![
            ("lr", self.lr.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("batch_items", self.batch_items.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip", self.clip.map_or("none".into(), |c| c.to_string())),
            ("eval_every", self.eval_every.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("eval_stride", self.eval_stride.to_string()),
            ("optimizer", opt),
        ];
        pairs.extend(extra);
        pairs.push(("workers", self.workers.to_string()));
        kv_text(&pairs)
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let clip = match kv.take_str("clip").as_deref() {
            None => d.clip,
            Some("none") | Some("0") => None,
            Some(s) => Some(s.parse().map_err(|_| LmError::Config(format!("bad clip value {s:?}")))?),
        };
        let optimizer = match kv.take_str("optimizer").as_deref() {
            None | Some("sgd") => Optimizer::Sgd,
            Some("momentum") => Optimizer::Momentum {
                mu: kv.take_or("momentum", 0.9)?,
            },
            Some("adam") => Optimizer::Adam {
                beta1: kv.take_or("adam_beta1", 0.9)?,
                beta2: kv.take_or("adam_beta2", 0.98)?,
                eps: kv.take_or("adam_eps", 1e-8)?,
            },
            Some(o) => return Err(LmError::Config(format!("unknown optimizer {o:?}"))),
        };
        let c = TrainConfig {
            lr: kv.take_or("lr", d.lr)?,
            batch_tokens: kv.take_or("batch_tokens", d.batch_tokens)?,
            batch_items: kv.take_or("batch_items", d.batch_items)?,
            steps: kv.take_or("steps", d.steps)?,
            seed: kv.take_or("seed", d.seed)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            clip,
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            test_fraction: kv.take_or("test_fraction", d.test_fraction)?,
            seq_len: kv.take_or("seq_len", d.seq_len)?,
            eval_limit: kv.take_or("eval_limit", d.eval_limit)?,
            eval_stride: kv.take_or("eval_stride", d.eval_stride)?,
            optimizer,
            workers: kv.take_or("workers", d.workers)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Parameters for `config` drawn from the `init` stream of `seed`.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, &mut derived(seed, "init"))
}

/// Mean over rows of `-ln softmax(row / T)[target]`, in nats.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], temperature: f64) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != targets.len() || targets.is_empty() {
        return Err(LmError::dim("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if !(temperature > 0.0) {
        return Err(LmError::Config(format!("temperature {temperature} must be > 0")));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(LmError::Contract(format!("target {t} out of range")));
        }
        total -= log_softmax(logits.row(r), 1.0 / temperature)[t];
    }
    Ok(total / targets.len() as f64)
}

/// Optimizer state carried between steps.
#[derive(Clone, Debug)]
pub struct OptState {
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// `theta <- theta - lr * clip(g) - lr * decay * theta` (plain SGD; the other
/// optimizers replace `clip(g)` by their update direction).
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    cfg: &TrainConfig,
    state: &mut OptState,
    step: usize,
) -> Result<StepStats> {
    if params.len() != grads.len() {
        return Err(LmError::Contract(format!("{} params but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(LmError::dim("sgd_step", p.shape(), g.shape()));
        }
    }
    let norm_sq: f64 = grads.iter().map(Tensor::norm_sq).sum();
    let grad_norm = norm_sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(LmError::Diverged {
            step,
            message: "non-finite gradient".into(),
        });
    }
    let scale = match cfg.clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let (lr, wd) = (cfg.lr, cfg.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    let decay = if wd > 0.0 { lr * wd * *x } else { 0.0 };
                    *x -= lr * (scale * gi) + decay;
                }
            }
            Optimizer::Momentum { mu } => {
                for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                    *vi = mu * *vi + scale * gi;
                    let decay = if wd > 0.0 { lr * wd * *x } else { 0.0 };
                    *x -= lr * *vi + decay;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = state.step as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (((x, &gi), mi), vi) in
                    p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                {
                    let gi = scale * gi;
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    let decay = if wd > 0.0 { lr * wd * *x } else { 0.0 };
                    *x -= lr * update + decay;
                }
            }
        }
    }
    Ok(StepStats {
        grad_norm,
        clipped: scale < 1.0,
    })
}

/// One training sequence: targets align with input positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn scored(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Next-token example from `ids[start..start + len + 1]`.
pub fn window_example(ids: &[usize], start: usize, len: usize) -> Example {
    Example {
        input: ids[start..start + len].to_vec(),
        targets: ids[start + 1..start + len + 1].iter().map(|&t| Some(t)).collect(),
    }
}

/// `[BOS] + prompt`, scored only at the last position.
pub fn task_example(item: &TaskItem) -> Example {
    let mut input = vec![BOS];
    input.extend_from_slice(&item.prompt);
    let mut targets = vec![None; input.len()];
    *targets.last_mut().expect("non-empty") = Some(item.answer);
    Example { input, targets }
}

fn shards(examples: &[Example], workers: usize) -> Vec<&[Example]> {
    let per = examples.len().div_ceil(workers.max(1)).max(1);
    examples.chunks(per).collect()
}

/// Mean loss over all scored positions and its gradient, computed over
/// `workers` independent shards whose gradients are summed.
pub fn batch_gradients(model: &Model, examples: &[Example], workers: usize) -> Result<(f64, Vec<Tensor>)> {
    let divisor = examples.iter().map(Example::scored).sum::<usize>();
    if divisor == 0 {
        return Err(LmError::Data("batch has no scored positions".into()));
    }
    let parts: Vec<(f64, Vec<Tensor>)> = shards(examples, workers)
        .into_par_iter()
        .map(|shard| {
            let tape = Tape::new();
            let vars = model.bind(&tape, true);
            let seqs: Vec<&[usize]> = shard.iter().map(|e| e.input.as_slice()).collect();
            let targets: Vec<Option<usize>> = shard.iter().flat_map(|e| e.targets.iter().copied()).collect();
            let fwd = model.forward(&vars, &seqs)?;
            let loss = fwd.logits.cross_entropy(&targets, divisor as f64)?;
            let mut g = tape.backward(loss, &vars)?;
            Ok((loss.item(), vars.iter().map(|&v| g.take(v)).collect()))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one shard");
    for (l, g) in iter {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    Ok((loss, grads))
}

/// Summed negative log-likelihood, correct argmax predictions and number of
/// scored positions over `examples`.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<(f64, usize, usize)> {
    let chunks: Vec<&[Example]> = examples.chunks(16).collect();
    let parts: Vec<(f64, usize, usize)> = chunks
        .into_par_iter()
        .map(|chunk| {
            let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
            let tape = Tape::new();
            let vars = model.bind(&tape, false);
            let logits = model.forward(&vars, &seqs)?.logits.value();
            let mut nll = 0.0;
            let (mut correct, mut n) = (0, 0);
            let targets = chunk.iter().flat_map(|e| e.targets.iter());
            for (r, t) in targets.enumerate() {
                let Some(t) = *t else { continue };
                let row = logits.row(r);
                nll -= log_softmax(row, 1.0)[t];
                correct += usize::from(argmax(row) == t);
                n += 1;
            }
            Ok((nll, correct, n))
        })
        .collect::<Result<_>>()?;
    Ok(parts
        .into_iter()
        .fold((0.0, 0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z)))
}

/// Evaluation windows of length `len` over `ids` starting every `stride`
/// tokens; every position is scored exactly once, and after the first window
/// each scored position sees at least `len - stride` earlier tokens.
pub fn eval_windows(ids: &[usize], len: usize, stride: usize) -> Vec<Example> {
    let stride = if stride == 0 { len } else { stride.min(len) };
    let mut out = Vec::new();
    if ids.len() < 2 {
        return out;
    }
    let mut scored_to = 0; // targets ids[1..=scored_to] already scored
    let mut start = 0;
    loop {
        let end = (start + len).min(ids.len() - 1);
        if end <= start {
            break;
        }
        let mut ex = window_example(ids, start, end - start);
        for (i, t) in ex.targets.iter_mut().enumerate() {
            if start + 1 + i <= scored_to {
                *t = None;
            }
        }
        scored_to = end;
        out.push(ex);
        if end == ids.len() - 1 {
            break;
        }
        start += stride;
    }
    out
}

fn spread<T: Clone>(items: &[T], limit: usize) -> Vec<T> {
    if limit == 0 || items.len() <= limit {
        return items.to_vec();
    }
    (0..limit).map(|i| items[i * items.len() / limit].clone()).collect()
}

/// Training data after the split.
#[derive(Clone, Debug)]
pub enum TrainData {
    Corpus { train: Vec<usize>, test: Vec<usize> },
    Task { train: Vec<TaskItem>, test: Vec<TaskItem> },
}

impl TrainData {
    /// Holds out the contiguous tail `test_fraction` of `ids`.
    pub fn split_corpus(ids: &[usize], test_fraction: f64) -> Result<TrainData> {
        let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
        let cut = ids.len() - n_test;
        if cut < 2 || n_test < 2 {
            return Err(LmError::Data(format!(
                "corpus of {} tokens is too small to split at {test_fraction}",
                ids.len()
            )));
        }
        Ok(TrainData::Corpus {
            train: ids[..cut].to_vec(),
            test: ids[cut..].to_vec(),
        })
    }
}

/// Result of a run; `record.diverged` is set when the run was aborted.
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(Model, RunRecord)> {
        match &self.record.diverged {
            Some((step, message)) => Err(LmError::Diverged {
                step: *step,
                message: message.clone(),
            }),
            None => Ok((self.model, self.record)),
        }
    }
}

fn model_len(model: &Model, cfg: &TrainConfig) -> usize {
    model.config().window().unwrap_or(cfg.seq_len)
}

fn eval_sets(model: &Model, data: &TrainData, cfg: &TrainConfig) -> (Vec<Example>, Vec<Example>) {
    match data {
        TrainData::Corpus { train, test } => {
            let len = model_len(model, cfg);
            let tr = spread(&eval_windows(train, len, cfg.eval_stride), cfg.eval_limit);
            let te = spread(&eval_windows(test, len, cfg.eval_stride), cfg.eval_limit);
            (tr, te)
        }
        TrainData::Task { train, test } => (
            spread(&train.iter().map(task_example).collect::<Vec<_>>(), cfg.eval_limit),
            spread(&test.iter().map(task_example).collect::<Vec<_>>(), cfg.eval_limit),
        ),
    }
}

/// Runs `cfg.steps` gradient steps from `model`, evaluating both splits at
/// step 0, every `eval_every` steps and at the end.
pub fn train(mut model: Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng: Rng = derived(cfg.seed, "batches");
    let (eval_train, eval_test) = eval_sets(&model, data, cfg);
    // Pool of training examples and how many make a batch.
    let (pool, per_batch) = match data {
        TrainData::Corpus { train, .. } => {
            let len = model_len(&model, cfg);
            if train.len() < len + 1 {
                return Err(LmError::Data(format!(
                    "training split of {} tokens is shorter than one window of {len}",
                    train.len()
                )));
            }
            let starts = (0..=(train.len() - len - 1)).step_by(len);
            let pool: Vec<Example> = starts.map(|s| window_example(train, s, len)).collect();
            (pool, (cfg.batch_tokens / len).max(1))
        }
        TrainData::Task { train, .. } => {
            if train.is_empty() {
                return Err(LmError::Data("task training split is empty".into()));
            }
            (train.iter().map(task_example).collect(), cfg.batch_items)
        }
    };
    let mut record = RunRecord::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut state = OptState::new(model.params());
    let started = std::time::Instant::now();
    let log = |model: &Model, record: &mut RunRecord, step: usize| -> Result<()> {
        for (split, set) in [("train", &eval_train), ("test", &eval_test)] {
            if set.is_empty() {
                continue;
            }
            let (nll, correct, n) = evaluate(model, set)?;
            record.events.push(EvalEvent {
                step,
                split: split.to_string(),
                loss: nll / n as f64,
                accuracy: correct as f64 / n as f64,
            });
        }
        record.wall_ms.push((step, started.elapsed().as_millis() as u64));
        Ok(())
    };
    log(&model, &mut record, 0)?;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(per_batch);
        while batch.len() < per_batch {
            if cursor == order.len() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pool[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(&model, &batch, cfg.workers)?;
        record.train_loss.push(loss);
        if !loss.is_finite() {
            record.diverged = Some((step, format!("loss became {loss}")));
            break;
        }
        match sgd_step(model.params_mut(), &grads, cfg, &mut state, step) {
            Ok(_) => {}
            Err(LmError::Diverged { step, message }) => {
                record.diverged = Some((step, message));
                break;
            }
            Err(e) => return Err(e),
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            record.diverged = Some((step, "parameters became non-finite".into()));
            break;
        }
        record.final_step = step;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log(&model, &mut record, step)?;
        }
    }
    Ok(TrainOutcome { model, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;

    fn cfg() -> TrainConfig {
        TrainConfig {
            clip: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let c = TrainConfig { lr: 0.0, ..cfg() };
        let mut st = OptState::new(&p);
        sgd_step(&mut p, &[Tensor::vector(vec![3.0, 4.0])], &c, &mut st, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_bowl_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        let c = TrainConfig { lr: 0.1, ..cfg() };
        let mut st = OptState::new(&p);
        let g = vec![Tensor::scalar(2.0 * p[0].item())];
        sgd_step(&mut p, &g, &c, &mut st, 1).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn convex_sequence_converges() {
        // f = (x - 3)^2 / 2 + 1
        let mut p = vec![Tensor::scalar(-5.0)];
        let c = TrainConfig { lr: 0.05, ..cfg() };
        let mut st = OptState::new(&p);
        let mut steps = 0;
        while (p[0].item() - 3.0).abs() > 1e-6 {
            let g = vec![Tensor::scalar(p[0].item() - 3.0)];
            sgd_step(&mut p, &g, &c, &mut st, steps).unwrap();
            steps += 1;
            assert!(steps <= 1000);
        }
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let c = TrainConfig {
            lr: 1.0,
            clip: Some(1.0),
            ..cfg()
        };
        let mut st = OptState::new(&p);
        let s = sgd_step(&mut p, &[Tensor::vector(vec![3.0, 4.0])], &c, &mut st, 1).unwrap();
        assert!(s.clipped);
        assert_eq!(s.grad_norm, 5.0);
        assert!((p[0].data()[0] + 0.6).abs() < 1e-15 && (p[0].data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = vec![Tensor::scalar(2.0)];
        let c = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..cfg()
        };
        let mut st = OptState::new(&p);
        sgd_step(&mut p, &[Tensor::scalar(0.0)], &c, &mut st, 1).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptState::new(&p);
        let e = sgd_step(&mut p, &[Tensor::scalar(f64::NAN)], &cfg(), &mut st, 17).unwrap_err();
        assert!(matches!(e, LmError::Diverged { step: 17, .. }));
    }

    #[test]
    fn uniform_cross_entropy() {
        let l = cross_entropy(&Tensor::zeros(&[3, 16]), &[0, 5, 15], 1.0).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_cross_entropy_vanishes() {
        let mut t = Tensor::zeros(&[1, 4]);
        t.set(0, 2, 1e3);
        assert!(cross_entropy(&t, &[2], 1.0).unwrap() < 1e-300);
    }

    #[test]
    fn two_position_hand_value() {
        // rows [0, ln 3] -> p(1) = 3/4 ; [ln 2, 0] -> p(0) = 2/3
        let t = Tensor::matrix(2, 2, vec![0.0, 3f64.ln(), 2f64.ln(), 0.0]);
        let l = cross_entropy(&t, &[1, 0], 1.0).unwrap();
        let expect = -((0.75f64).ln() + (2.0f64 / 3.0).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-15);
    }

    #[test]
    fn eval_windows_score_each_position_once() {
        let ids: Vec<usize> = (0..23).collect();
        for (len, stride) in [(5, 5), (6, 3), (4, 1), (30, 0)] {
            let w = eval_windows(&ids, len, stride);
            let mut scored: Vec<usize> = Vec::new();
            for ex in &w {
                assert!(ex.input.len() <= len);
                scored.extend(ex.targets.iter().flatten());
            }
            assert_eq!(scored, (1..23).collect::<Vec<_>>(), "len {len} stride {stride}");
        }
    }

    #[test]
    fn sharded_gradients_match_single_worker() {
        let c = ModelConfig::Transformer(TransformerConfig::new(7, 8, 2, 2, 6));
        let m = init_params(c, 3).unwrap();
        let ids: Vec<usize> = (0..40).map(|i| 3 + (i * 7 + i / 3) % 4).collect();
        let ex: Vec<Example> = (0..5).map(|k| window_example(&ids, k * 6, 6)).collect();
        let (l1, g1) = batch_gradients(&m, &ex, 1).unwrap();
        let (l2, g2) = batch_gradients(&m, &ex, 2).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }
}
