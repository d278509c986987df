use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::stats::spearman;
use super::trace::capture_activations;
use crate::error::{LmError, Result};
use crate::grammar::{tree_distance_matrix, ParseTree};
use crate::model::Model;
use crate::rng::{derived, Rng};
use crate::tensor::{Tape, Tensor};
use crate::text::BOS;
use crate::train::{sgd_step, OptState, Optimizer, TrainConfig};

/// Word vectors of one sentence (`n x p`) and the gold tree distances (`n x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub vectors: Tensor,
    pub gold: Tensor,
}

impl ProbeExample {
    pub fn new(vectors: Tensor, gold: Tensor) -> Result<Self> {
        let n = vectors.rows();
        if vectors.rank() != 2 || gold.shape() != [n, n] {
            return Err(LmError::dim("probe example", vectors.shape(), gold.shape()));
        }
        Ok(ProbeExample { vectors, gold })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            rank: 16,
            steps: 500,
            lr: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralProbe {
    /// `rank x p`.
    pub projection: Tensor,
    pub layer: Option<usize>,
    /// Training loss before each step and after the last.
    pub loss_curve: Vec<f64>,
}

impl StructuralProbe {
    /// `||P (u_i - u_j)||^2` for every pair.
    pub fn distances(&self, vectors: &Tensor) -> Result<Tensor> {
        let n = vectors.rows();
        let projected = if self.projection.rows() == 0 {
            Tensor::zeros(&[n, 0])
        } else {
            vectors.matmul(&self.projection.transpose()?)?
        };
        let mut d = Tensor::zeros(&[n, n]);
        for (i, j) in pairs(n) {
            let v: f64 = projected
                .row(i)
                .iter()
                .zip(projected.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
        Ok(d)
    }
}

/// Fits `P` by minimizing the mean over sentences of the mean over pairs of
/// `| ||P(u_i - u_j)||^2 - d(i, j) |` with full-batch Adam, learning rate
/// decaying linearly to zero.
pub fn train_structural_probe(examples: &[ProbeExample], cfg: &ProbeConfig) -> Result<StructuralProbe> {
    let usable: Vec<&ProbeExample> = examples.iter().filter(|e| e.len() >= 2).collect();
    if usable.is_empty() {
        return Err(LmError::Data("probe training needs at least one sentence of length >= 2".into()));
    }
    let p = usable[0].vectors.cols();
    if let Some(e) = usable.iter().find(|e| e.vectors.cols() != p) {
        return Err(LmError::dim("probe vectors", &[p], e.vectors.shape()));
    }
    // Every pair of every sentence as one row of differences.
    let mut diff = Vec::new();
    let mut gold = Vec::new();
    let mut weight = Vec::new();
    for e in &usable {
        let n = e.len();
        let w = 1.0 / ((n * (n - 1) / 2) as f64 * usable.len() as f64);
        for (i, j) in pairs(n) {
            diff.extend(e.vectors.row(i).iter().zip(e.vectors.row(j)).map(|(a, b)| a - b));
            gold.push(e.gold.at(i, j));
            weight.push(w);
        }
    }
    let m = gold.len();
    let diff = Tensor::matrix(m, p, diff);
    let gold = Tensor::matrix(m, 1, gold);
    let weight = Tensor::matrix(m, 1, weight);
    let baseline: f64 = gold.data().iter().zip(weight.data()).map(|(g, w)| g.abs() * w).sum();
    if cfg.rank == 0 {
        return Ok(StructuralProbe {
            projection: Tensor::zeros(&[0, p]),
            layer: None,
            loss_curve: vec![baseline],
        });
    }
    // Rows are drawn in order, so a rank-(r+1) probe starts from the rank-r
    // probe plus one row.
    let mut rng = derived(cfg.seed, "probe");
    let normal = Normal::new(0.0, (1.0 / p as f64).sqrt()).expect("valid std");
    let init: Vec<f64> = (0..cfg.rank * p).map(|_| normal.sample(&mut rng)).collect();
    let mut params = vec![Tensor::matrix(cfg.rank, p, init)];
    let mut tc = TrainConfig {
        lr: cfg.lr,
        clip: None,
        optimizer: Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        ..TrainConfig::default()
    };
    let mut state = OptState::new(&params);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let tape = Tape::new();
        let proj = tape.param(params[0].clone());
        let d = tape.constant(diff.clone());
        let x = d.matmul_t(&proj)?;
        let sq = x.mul(&x)?.row_sum();
        let err = sq.sub(&tape.constant(gold.clone()))?.abs();
        let loss = err.mul(&tape.constant(weight.clone()))?.sum();
        curve.push(loss.item());
        if step == cfg.steps {
            break;
        }
        let mut g = tape.backward(loss, &[proj])?;
        // linear decay to zero lets the L1 objective settle
        tc.lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
        sgd_step(&mut params, &[g.take(proj)], &tc, &mut state, step)?;
    }
    Ok(StructuralProbe {
        projection: params.pop().expect("one tensor"),
        layer: None,
        loss_curve: curve,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScore {
    /// Mean over scored sentences.
    pub spearman: f64,
    pub rmse: f64,
    pub sentences: usize,
    /// Sentences shorter than 2 or with constant distances.
    pub skipped: usize,
    pub per_sentence: Vec<f64>,
}

/// Twelve significant digits, so that distances equal up to rounding error
/// rank as ties.
fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(11 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

pub fn probe_eval(probe: &StructuralProbe, examples: &[ProbeExample]) -> Result<ProbeScore> {
    let mut per = Vec::new();
    let mut skipped = 0;
    let (mut se, mut count) = (0.0, 0usize);
    for e in examples {
        if e.len() < 2 {
            skipped += 1;
            continue;
        }
        let d = probe.distances(&e.vectors)?;
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        for (i, j) in pairs(e.len()) {
            pred.push(round_sig(d.at(i, j)));
            gold.push(e.gold.at(i, j));
            se += (d.at(i, j) - e.gold.at(i, j)).powi(2);
            count += 1;
        }
        match spearman(&pred, &gold) {
            Some(r) => per.push(r),
            None => skipped += 1,
        }
    }
    let spearman = if per.is_empty() {
        f64::NAN
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    Ok(ProbeScore {
        spearman,
        rmse: if count == 0 { f64::NAN } else { (se / count as f64).sqrt() },
        sentences: per.len(),
        skipped,
        per_sentence: per,
    })
}

/// Control task: each sentence's gold matrix is relabelled by a random
/// permutation of its positions.
pub fn shuffle_trees(examples: &[ProbeExample], rng: &mut Rng) -> Vec<ProbeExample> {
    examples
        .iter()
        .map(|e| {
            let n = e.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let mut g = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    g.set(i, j, e.gold.at(perm[i], perm[j]));
                }
            }
            ProbeExample {
                vectors: e.vectors.clone(),
                gold: g,
            }
        })
        .collect()
}

/// Sentences whose gold tree is a path (`d(i, j) = |i - j|`) and whose
/// vectors are `u_i = R (e_1 + ... + e_i)` for one random orthogonal `R`,
/// so that `||u_i - u_j||^2 = d(i, j)` exactly.
pub fn path_graph_fixture(lengths: &[usize], p: usize, rng: &mut Rng) -> Result<Vec<ProbeExample>> {
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if longest > p {
        return Err(LmError::Config(format!("sentence length {longest} exceeds dimension {p}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let g = nalgebra::DMatrix::from_fn(p, p, |_, _| normal.sample(rng));
    let q = g.qr().q();
    lengths
        .iter()
        .map(|&n| {
            let mut v = Tensor::zeros(&[n, p]);
            for i in 0..n {
                for c in 0..p {
                    // column sums of the first i columns of R
                    let x: f64 = (0..i).map(|k| q[(c, k)]).sum();
                    v.set(i, c, x);
                }
            }
            let gold = Tensor::matrix(n, n, (0..n * n).map(|k| (k / n).abs_diff(k % n) as f64).collect());
            ProbeExample::new(v, gold)
        })
        .collect()
}

/// Probe examples from a model layer: the input is `[BOS] + tokens` (cut to
/// the window) and row `k` holds the vector at token `k`.
pub fn probe_examples(model: &Model, layer: usize, sentences: &[(Vec<usize>, ParseTree)]) -> Result<Vec<ProbeExample>> {
    let window = model.config().window().unwrap_or(usize::MAX);
    sentences
        .iter()
        .filter(|(toks, _)| toks.len() < window)
        .map(|(toks, tree)| {
            let mut input = vec![BOS];
            input.extend_from_slice(toks);
            let t = capture_activations(model, &input, &[layer], false)?;
            let full = &t.layers[0];
            let n = toks.len();
            let v = Tensor::matrix(n, full.cols(), full.data()[full.cols()..].to_vec());
            let d = tree_distance_matrix(tree);
            if d.len() != n {
                return Err(LmError::Data(format!("tree has {} leaves for {n} tokens", d.len())));
            }
            let gold = Tensor::matrix(n, n, d.iter().flatten().map(|&x| x as f64).collect());
            ProbeExample::new(v, gold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fixture(seed: u64) -> Vec<ProbeExample> {
        let mut rng = seeded(seed);
        let lengths: Vec<usize> = (0..24).map(|k| 4 + k % 5).collect();
        path_graph_fixture(&lengths, 12, &mut rng).unwrap()
    }

    #[test]
    fn planted_vectors_realize_the_metric() {
        let ex = fixture(1);
        let identity = StructuralProbe {
            projection: Tensor::identity(12),
            layer: None,
            loss_curve: vec![],
        };
        for e in &ex {
            assert!(identity.distances(&e.vectors).unwrap().max_abs_diff(&e.gold) < 1e-12);
        }
        assert_eq!(probe_eval(&identity, &ex).unwrap().spearman, 1.0);
    }

    #[test]
    fn probe_recovers_planted_structure() {
        let mut ex = fixture(2);
        let held = ex.split_off(12);
        let probe = train_structural_probe(
            &ex,
            &ProbeConfig {
                rank: 10,
                steps: 1500,
                lr: 0.01,
                seed: 3,
            },
        )
        .unwrap();
        let last = *probe.loss_curve.last().unwrap();
        assert!(last < 1e-3, "loss {last}");
        let s = probe_eval(&probe, &held).unwrap();
        // residual errors of ~1e-4 break the many ties among gold distances
        assert!(s.spearman > 0.95, "spearman {} loss {last}", s.spearman);
    }

    #[test]
    fn rank_zero_is_the_mean_distance_baseline() {
        let ex = fixture(4);
        let probe = train_structural_probe(&ex, &ProbeConfig { rank: 0, ..ProbeConfig::default() }).unwrap();
        let expect: f64 = ex
            .iter()
            .map(|e| {
                let n = e.len();
                pairs(n).map(|(i, j)| e.gold.at(i, j)).sum::<f64>() / (n * (n - 1) / 2) as f64
            })
            .sum::<f64>()
            / ex.len() as f64;
        assert!((probe.loss_curve[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn short_sentences_are_skipped() {
        let mut ex = fixture(5);
        ex.push(ProbeExample::new(Tensor::zeros(&[1, 12]), Tensor::zeros(&[1, 1])).unwrap());
        let probe = StructuralProbe {
            projection: Tensor::identity(12),
            layer: None,
            loss_curve: vec![],
        };
        let s = probe_eval(&probe, &ex).unwrap();
        assert_eq!(s.skipped, 1);
        assert_eq!(s.sentences, 24);
        assert!(train_structural_probe(&ex[24..], &ProbeConfig::default()).is_err());
    }
}
