//! Loss terms with their gradients.
//!
//! Every loss returns `(value, gradient)` where the gradient is taken with
//! respect to the network output the loss consumes (reconstruction, logits,
//! or pooled embeddings). Batch reduction is a mean unless `Reduction::Sum`
//! is requested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{multi_domain_mmd, sq_dist, EmbeddingBatch, KernelBank};
use crate::nets::Act;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    /// Literal sums over the batch.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_mmd: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 5.0,
            lambda_rec: 5.0,
            lambda_mmd: 1.0,
            lambda_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rec", self.lambda_rec),
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_d", self.lambda_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cls: f64,
    pub dom: f64,
    pub mmd: f64,
    pub objective: f64,
}

/// `λ_cls·cls + λ_rec·rec + λ_mmd·mmd − λ_d·dom`.
pub fn combined_objective(rec: f64, cls: f64, dom: f64, mmd: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("rec", rec), ("cls", cls), ("dom", dom), ("mmd", mmd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        rec,
        cls,
        dom,
        mmd,
        objective: w.lambda_cls * cls + w.lambda_rec * rec + w.lambda_mmd * mmd - w.lambda_d * dom,
    })
}

/// Squared error between `x` and `x_hat` over the first `valid_len` time
/// steps. Mean mode divides by the element count; sum mode sums the
/// per-window squared norms. The gradient (w.r.t. `x_hat`) is zero over the
/// padded tail.
pub fn recon_loss(x: &Act, x_hat: &Act, valid_len: usize, reduction: Reduction) -> Result<(f64, Act)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("reconstruction", format!("{:?}", x.shape()), format!("{:?}", x_hat.shape())));
    }
    if valid_len == 0 || valid_len > x.len {
        return Err(Error::Invalid(format!("valid length {valid_len} outside 1..={}", x.len)));
    }
    if x.batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let norm = match reduction {
        Reduction::Mean => (x.batch * x.channels * valid_len) as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Act::zeros(x.batch, x.channels, x.len);
    let mut total = 0.0;
    for row in 0..x.batch * x.channels {
        let off = row * x.len;
        for t in off..off + valid_len {
            let d = x_hat.data[t] - x.data[t];
            total += d * d;
            grad.data[t] = 2.0 * d / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Softmax cross-entropy of `[b × k]` logits against integer labels.
pub fn cross_entropy(logits: &Act, labels: &[usize], reduction: Reduction) -> Result<(f64, Act)> {
    let k = logits.row_len();
    if labels.len() != logits.batch {
        return Err(Error::shape("labels", logits.batch, labels.len()));
    }
    if logits.batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let norm = match reduction {
        Reduction::Mean => logits.batch as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Act::zeros(logits.batch, logits.channels, logits.len);
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.data[b * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / norm;
        }
    }
    Ok((total / norm, grad))
}

pub fn class_loss(logits: &Act, y: &[usize], reduction: Reduction) -> Result<(f64, Act)> {
    cross_entropy(logits, y, reduction)
}

pub fn domain_loss(subj_logits: &Act, s: &[usize], reduction: Reduction) -> Result<(f64, Act)> {
    cross_entropy(subj_logits, s, reduction)
}

/// Cross-entropy against the uniform distribution over subjects; an optional
/// stand-in for `−L_D` when training the extractor adversarially.
pub fn uniform_label_loss(subj_logits: &Act, reduction: Reduction) -> Result<(f64, Act)> {
    let k = subj_logits.row_len();
    if subj_logits.batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let norm = match reduction {
        Reduction::Mean => subj_logits.batch as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Act::zeros(subj_logits.batch, subj_logits.channels, subj_logits.len);
    let mut total = 0.0;
    for b in 0..subj_logits.batch {
        let row = &subj_logits.data[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += row.iter().map(|v| lse - v).sum::<f64>() / k as f64;
        for (j, v) in row.iter().enumerate() {
            grad.data[b * k + j] = ((v - lse).exp() - 1.0 / k as f64) / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Multi-domain MMD of pooled embeddings grouped by subject, and its
/// gradient with respect to every pooled row.
///
/// `pooled` is `[b × dim]`; `subjects[i]` is the subject of row `i`.
/// Subjects are taken in ascending id order; a single present subject gives 0.
pub fn mmd_loss(pooled: &[f64], dim: usize, subjects: &[i32], bank: &KernelBank) -> Result<(f64, Vec<f64>)> {
    if dim == 0 || pooled.len() != subjects.len() * dim {
        return Err(Error::shape("pooled embeddings", subjects.len() * dim, pooled.len()));
    }
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &s) in subjects.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut grad = vec![0.0; pooled.len()];
    if groups.len() < 2 {
        return Ok((0.0, grad));
    }
    let batches = groups
        .iter()
        .map(|(&s, rows)| EmbeddingBatch::new(rows.iter().flat_map(|&r| pooled[r * dim..(r + 1) * dim].to_vec()).collect(), dim, s))
        .collect::<Result<Vec<_>>>()?;
    let value = multi_domain_mmd(&batches, bank)?;

    // value = Σ_{g,h} w_gh · mean_{a∈g, b∈h} k(a, b) with
    // w_gg = 2(K−1)/K² and w_gh = −2/K² otherwise.
    let kk = groups.len() as f64;
    let group_of: Vec<(usize, f64)> = {
        let mut v = vec![(0, 0.0); subjects.len()];
        for (g, rows) in groups.values().enumerate() {
            for &r in rows {
                v[r] = (g, rows.len() as f64);
            }
        }
        v
    };
    for a in 0..subjects.len() {
        let (ga, na) = group_of[a];
        let ra = &pooled[a * dim..(a + 1) * dim];
        for b in 0..subjects.len() {
            if a == b {
                continue;
            }
            let (gb, nb) = group_of[b];
            let w = if ga == gb { 2.0 * (kk - 1.0) } else { -2.0 } / (kk * kk);
            let rb = &pooled[b * dim..(b + 1) * dim];
            let coef = 2.0 * w / (na * nb) * bank.deriv_sq(sq_dist(ra, rb)) * 2.0;
            for k in 0..dim {
                grad[a * dim + k] += coef * (ra[k] - rb[k]);
            }
        }
    }
    Ok((value, grad))
}

/// `mmd_loss` over explicit per-subject batches; empty batches are skipped
/// with a warning and the normalization uses the present subjects only.
pub fn mmd_loss_batches(batches: &[Option<EmbeddingBatch>], bank: &KernelBank) -> Result<f64> {
    let present: Vec<EmbeddingBatch> = batches
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            if b.is_none() {
                log::warn!("subject slot {i} has no windows in this batch; skipped in MMD");
            }
            b.clone()
        })
        .collect();
    if present.len() < 2 {
        return Ok(0.0);
    }
    multi_domain_mmd(&present, bank)
}
