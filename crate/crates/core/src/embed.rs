//! Co-occurrence statistics, PCA word embeddings, analogy queries and the
//! Boltzmann decoder from vectors to word distributions.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{LmError, Result};
use crate::tensor::{softmax, Tensor};

/// `M(w, w')` counts length-`window` windows containing both `w` and `w'`.
/// A window containing `w` at least once adds one to the diagonal `M(w, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceMatrix {
    size: usize,
    window: usize,
    counts: Vec<u64>,
    occurrences: Vec<u64>,
}

pub fn cooccurrence(ids: &[usize], window: usize, vocab_size: usize) -> Result<CooccurrenceMatrix> {
    if window < 2 {
        return Err(LmError::Config(format!("co-occurrence window {window} must be >= 2")));
    }
    if ids.len() < window {
        return Err(LmError::Data(format!(
            "sequence of {} tokens is shorter than the window {window}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(LmError::Data(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let mut counts = vec![0u64; vocab_size * vocab_size];
    let mut members = Vec::with_capacity(window);
    for win in ids.windows(window) {
        members.clear();
        members.extend_from_slice(win);
        members.sort_unstable();
        members.dedup();
        for &a in &members {
            for &b in &members {
                counts[a * vocab_size + b] += 1;
            }
        }
    }
    let mut occurrences = vec![0u64; vocab_size];
    for &i in ids {
        occurrences[i] += 1;
    }
    Ok(CooccurrenceMatrix {
        size: vocab_size,
        window,
        counts,
        occurrences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CountTransform {
    #[default]
    Raw,
    /// `ln(1 + count)`.
    Log1p,
}

impl CooccurrenceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn get(&self, a: usize, b: usize) -> u64 {
        self.counts[a * self.size + b]
    }

    /// Number of occurrences of `w` in the corpus.
    pub fn occurrences(&self, w: usize) -> u64 {
        self.occurrences[w]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_matrix(&self, transform: CountTransform) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| {
            let c = self.get(i, j) as f64;
            match transform {
                CountTransform::Raw => c,
                CountTransform::Log1p => c.ln_1p(),
            }
        })
    }
}

/// A word embedding: row `w` of `vectors` is the vector for word id `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vectors: Tensor,
}

impl Embedding {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(LmError::Contract(format!(
                "embedding table must be a matrix, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.all_finite() {
            return Err(LmError::Numeric("embedding contains non-finite values".into()));
        }
        Ok(Embedding { vectors })
    }

    /// Each word is mapped to its column of the (transformed) co-occurrence
    /// matrix, optionally restricted to the rows in `context_rows`.
    pub fn from_columns(
        m: &CooccurrenceMatrix,
        transform: CountTransform,
        context_rows: Option<&[usize]>,
    ) -> Result<Self> {
        let full = m.to_matrix(transform);
        let rows: Vec<usize> = match context_rows {
            Some(r) => r.to_vec(),
            None => (0..m.size).collect(),
        };
        let mut data = Vec::with_capacity(m.size * rows.len());
        for w in 0..m.size {
            data.extend(rows.iter().map(|&r| full[(r, w)]));
        }
        Embedding::new(Tensor::matrix(m.size, rows.len(), data))
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, w: usize) -> &[f64] {
        self.vectors.row(w)
    }

    pub fn table(&self) -> &Tensor {
        &self.vectors
    }

    /// `sum_{w,w'} ((Z^T Z)(w,w') - M(w,w'))^2` with `Z^T Z` the Gram matrix
    /// of the embedding vectors.
    pub fn reconstruction_error(&self, m: &CooccurrenceMatrix, transform: CountTransform) -> f64 {
        let target = m.to_matrix(transform);
        let n = self.vocab_size();
        let mut err = 0.0;
        for a in 0..n {
            for b in 0..n {
                let g: f64 = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
                let d = g - 0.5 * (target[(a, b)] + target[(b, a)]);
                err += d * d;
            }
        }
        err
    }
}

/// Rank-`p` PCA embedding: `Z = diag(sqrt(max(lambda, 0))) V^T` from the
/// top-`p` eigenpairs of the symmetrized (transformed) co-occurrence matrix;
/// column `w` of `Z` is the vector for `w`.
pub fn pca_embed(m: &CooccurrenceMatrix, p: usize, transform: CountTransform) -> Result<Embedding> {
    let n = m.size;
    if p == 0 || p > n {
        return Err(LmError::Config(format!("embedding dimension {p} must be in 1..={n}")));
    }
    let raw = m.to_matrix(transform);
    let sym = (&raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym.clone(), 1e-14, 10_000).ok_or_else(|| {
        let norm = sym.norm();
        LmError::Numeric(format!(
            "symmetric eigensolver did not converge ({n}x{n}, Frobenius norm {norm:.3e})"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    // Descending eigenvalue, ties by index for determinism.
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut data = vec![0.0; n * p];
    for (k, &idx) in order.iter().take(p).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        let v = eig.eigenvectors.column(idx);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for w in 0..n {
            data[w * p + k] = sign * scale * v[w];
        }
    }
    Embedding::new(Tensor::matrix(n, p, data))
}

/// `argmax_{w not in exclude} (iota(a) - iota(b) + iota(c)) . iota(w)`, ties to
/// the lowest id.
pub fn analogy(e: &Embedding, a: usize, b: usize, c: usize, exclude: &BTreeSet<usize>) -> Result<usize> {
    let n = e.vocab_size();
    for w in [a, b, c] {
        if w >= n {
            return Err(LmError::Data(format!("word id {w} not in the embedding (size {n})")));
        }
    }
    let excluded = exclude.iter().filter(|&&w| w < n).count();
    if n < excluded + 1 {
        return Err(LmError::Data(format!(
            "analogy query excludes {excluded} of {n} words, leaving no candidate"
        )));
    }
    let query: Vec<f64> = (0..e.dim())
        .map(|k| e.vector(a)[k] - e.vector(b)[k] + e.vector(c)[k])
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for w in (0..n).filter(|w| !exclude.contains(w)) {
        let s: f64 = query.iter().zip(e.vector(w)).map(|(x, y)| x * y).sum();
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((w, s));
        }
    }
    Ok(best.expect("at least one candidate").0)
}

/// `P(w) = exp(v . iota(w) / T) / Z`.
pub fn decode(v: &[f64], e: &Embedding, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(LmError::Config(format!("temperature {temperature} must be > 0")));
    }
    if v.len() != e.dim() {
        return Err(LmError::dim("decode", &[v.len()], &[e.dim()]));
    }
    let scores: Vec<f64> = (0..e.vocab_size())
        .map(|w| v.iter().zip(e.vector(w)).map(|(x, y)| x * y).sum())
        .collect();
    Ok(softmax(&scores, 1.0 / temperature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot(n: usize) -> Embedding {
        Embedding::new(Tensor::identity(n)).unwrap()
    }

    fn from_counts(counts: Vec<u64>, n: usize) -> CooccurrenceMatrix {
        CooccurrenceMatrix {
            size: n,
            window: 2,
            counts,
            occurrences: vec![1; n],
        }
    }

    #[test]
    fn single_window_pair() {
        let m = cooccurrence(&[0, 1], 2, 2).unwrap();
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(1, 0), 1);
    }

    #[test]
    fn repeated_token_counts_windows() {
        let m = cooccurrence(&[0, 0, 0], 2, 1).unwrap();
        assert_eq!(m.get(0, 0), 2);
    }

    #[test]
    fn disjoint_halves_have_zero_block() {
        let ids = [0, 1, 0, 1, 5, 2, 3, 2, 3];
        let m = cooccurrence(&ids, 2, 6).unwrap();
        for a in 0..2 {
            for b in 2..4 {
                assert_eq!(m.get(a, b), 0);
            }
        }
    }

    #[test]
    fn window_below_two_rejected() {
        assert!(matches!(cooccurrence(&[0, 1], 1, 2), Err(LmError::Config(_))));
    }

    #[test]
    fn diagonal_matrix_full_rank_reconstructs() {
        let m = from_counts(vec![5, 0, 0, 0, 3, 0, 0, 0, 9], 3);
        let e = pca_embed(&m, 3, CountTransform::Raw).unwrap();
        assert!(e.reconstruction_error(&m, CountTransform::Raw) < 1e-18);
    }

    #[test]
    fn rank_one_matrix_reconstructs() {
        let v = [1u64, 2, 3];
        let counts = (0..9).map(|i| 4 * v[i / 3] * v[i % 3]).collect();
        let m = from_counts(counts, 3);
        let e = pca_embed(&m, 1, CountTransform::Raw).unwrap();
        assert!(e.reconstruction_error(&m, CountTransform::Raw).sqrt() < 1e-9);
    }

    #[test]
    fn pca_error_non_increasing_in_rank() {
        let mut rng = crate::rng::seeded(9);
        let ids: Vec<usize> = (0..300).map(|_| rng.random_range(0..7)).collect();
        let m = cooccurrence(&ids, 3, 7).unwrap();
        let mut prev = f64::INFINITY;
        for p in 1..=7 {
            let err = pca_embed(&m, p, CountTransform::Raw)
                .unwrap()
                .reconstruction_error(&m, CountTransform::Raw);
            assert!(err <= prev + 1e-9, "p={p}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn bad_dimension_rejected() {
        let m = cooccurrence(&[0, 1, 2], 2, 3).unwrap();
        assert!(pca_embed(&m, 0, CountTransform::Raw).is_err());
        assert!(pca_embed(&m, 4, CountTransform::Raw).is_err());
    }

    #[test]
    fn one_hot_analogy_is_retrieval() {
        let e = one_hot(10);
        let none = BTreeSet::new();
        for a in 0..10 {
            for b in 0..10 {
                for c in 0..10 {
                    let got = analogy(&e, a, b, c, &none).unwrap();
                    // score(w) = [w==a] - [w==b] + [w==c]
                    let score = |w: usize| {
                        (w == a) as i32 - (w == b) as i32 + (w == c) as i32
                    };
                    let best = (0..10).max_by_key(|&w| (score(w), std::cmp::Reverse(w))).unwrap();
                    assert_eq!(got, best, "({a},{b},{c})");
                }
            }
        }
        assert_eq!(analogy(&e, 4, 4, 7, &none).unwrap(), 7);
    }

    #[test]
    fn exclusion_skips_inputs() {
        let e = one_hot(5);
        let ex: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let got = analogy(&e, 1, 2, 3, &ex).unwrap();
        assert!(!ex.contains(&got));
        let all: BTreeSet<usize> = (0..5).collect();
        assert!(analogy(&e, 1, 2, 3, &all).is_err());
    }

    #[test]
    fn decode_cases() {
        let e = one_hot(2);
        let p = decode(&[0.0, 3f64.ln()], &e, 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let ortho = Embedding::new(Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0])).unwrap();
        let p = decode(&[0.0, 5.0], &ortho, 0.7).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = decode(&[1.0, 0.0], &ortho, 1e-6).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-9);
        assert!(decode(&[1.0, 0.0], &ortho, 0.0).is_err());
        assert!(decode(&[1.0], &ortho, 1.0).is_err());
    }
}
