//! Gaussian kernels, multi-kernel combinations and MMD estimates between
//! per-subject embedding sets.
//!
//! The kernel is `k(a, b) = exp(-‖a − b‖² / (2σ²))` and the bank kernel is
//! the convex combination `Σ_u β_u k_u`. `mmd2` is the biased (V-statistic)
//! estimator, which is nonnegative for any PSD kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidths `σ_u` and convex weights `β_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "kernel bank needs m >= 1 bandwidths and as many weights, got {} and {}",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("bandwidths must be positive: {bandwidths:?}")));
        }
        if weights.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Invalid(format!("weights must be nonnegative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { bandwidths, weights })
    }

    /// Equal weights `1/m` over the given bandwidths.
    pub fn uniform(bandwidths: Vec<f64>) -> Result<Self> {
        let m = bandwidths.len().max(1);
        Self::new(bandwidths, vec![1.0 / m as f64; m])
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma], vec![1.0])
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    /// Bank kernel as a function of squared distance.
    #[inline]
    pub fn eval_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, b)| b * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }

    /// `d k / d(‖a−b‖²)` at squared distance `d2`.
    #[inline]
    pub fn deriv_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, b)| {
                let inv = 1.0 / (2.0 * s * s);
                -b * inv * (-d2 * inv).exp()
            })
            .sum()
    }
}

/// Embedding vectors of one subject, row-major `[count × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Vec<f64>,
    dim: usize,
    pub subject_id: i32,
}

impl EmbeddingBatch {
    pub fn new(vectors: Vec<f64>, dim: usize, subject_id: i32) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(Error::Invalid(format!(
                "embedding batch needs >= 1 vector of dim >= 1, got {} values for dim {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embeddings of subject {subject_id}")));
        }
        Ok(Self {
            vectors,
            dim,
            subject_id,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], subject_id: i32) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("ragged embedding rows".into()));
        }
        Self::new(rows.concat(), dim, subject_id)
    }

    pub fn count(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vectors
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense row-major kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl KernelMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn check_dims(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::shape("kernel inputs", a.dim, b.dim));
    }
    Ok(())
}

fn kernel_matrix_with(a: &EmbeddingBatch, b: &EmbeddingBatch, k: impl Fn(f64) -> f64) -> Result<KernelMatrix> {
    check_dims(a, b)?;
    let mut data = Vec::with_capacity(a.count() * b.count());
    for i in 0..a.count() {
        for j in 0..b.count() {
            data.push(k(sq_dist(a.row(i), b.row(j))));
        }
    }
    Ok(KernelMatrix {
        rows: a.count(),
        cols: b.count(),
        data,
    })
}

pub fn gaussian_kernel_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch, sigma: f64) -> Result<KernelMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("bandwidth {sigma} must be positive")));
    }
    kernel_matrix_with(a, b, |d2| (-d2 / (2.0 * sigma * sigma)).exp())
}

pub fn mk_kernel_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch, bank: &KernelBank) -> Result<KernelMatrix> {
    kernel_matrix_with(a, b, |d2| bank.eval_sq(d2))
}

fn mean_kernel(a: &EmbeddingBatch, b: &EmbeddingBatch, bank: &KernelBank) -> f64 {
    let mut total = 0.0;
    for i in 0..a.count() {
        let ai = a.row(i);
        for j in 0..b.count() {
            total += bank.eval_sq(sq_dist(ai, b.row(j)));
        }
    }
    total / (a.count() * b.count()) as f64
}

/// Biased MMD² estimate between two embedding sets, clamped at zero.
pub fn mmd2(source: &EmbeddingBatch, target: &EmbeddingBatch, bank: &KernelBank) -> Result<f64> {
    check_dims(source, target)?;
    let value = mean_kernel(source, source, bank) + mean_kernel(target, target, bank)
        - 2.0 * mean_kernel(source, target, bank);
    Ok(value.max(0.0))
}

/// Average of `mmd2` over all ordered subject pairs, diagonal included:
/// `(1/K²) Σ_{i,j} MMD²(E_i, E_j)` for `K` subjects.
pub fn multi_domain_mmd(batches: &[EmbeddingBatch], bank: &KernelBank) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Invalid("multi-domain MMD needs at least one subject".into()));
    }
    let k = batches.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += mmd2(&batches[i], &batches[j], bank)?;
            } else {
                check_dims(&batches[i], &batches[j])?;
            }
        }
    }
    Ok(total / (k * k) as f64)
}

/// Median-heuristic bank: base bandwidth is the median pairwise Euclidean
/// distance of `sample`, scaled by each factor, with uniform weights.
pub fn median_heuristic_bank(sample: &EmbeddingBatch, factors: &[f64]) -> Result<KernelBank> {
    if sample.count() < 2 {
        return Err(Error::Invalid("median heuristic needs at least two vectors".into()));
    }
    let mut dists = Vec::with_capacity(sample.count() * (sample.count() - 1) / 2);
    for i in 0..sample.count() {
        for j in i + 1..sample.count() {
            dists.push(sq_dist(sample.row(i), sample.row(j)).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let base = if median > 0.0 && median.is_finite() {
        median
    } else {
        log::warn!("median pairwise distance is zero; falling back to bandwidth 1");
        1.0
    };
    KernelBank::uniform(factors.iter().map(|f| f * base).collect())
}

pub const DEFAULT_BANDWIDTH_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
