use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub f_weighted: f64,
    pub f_macro: f64,
}

/// Which classes enter the macro-F1 average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroAverage {
    /// All `n_a` classes; classes absent from truth and prediction count as 0.
    #[default]
    AllClasses,
    /// Only classes present in truth.
    PresentClasses,
}

pub fn metrics(pred: &[usize], truth: &[usize], n_a: usize) -> Result<Metrics> {
    metrics_with(pred, truth, n_a, MacroAverage::AllClasses)
}

pub fn metrics_with(pred: &[usize], truth: &[usize], n_a: usize, macro_avg: MacroAverage) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("metrics need at least one window".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_a) {
        return Err(Error::LabelOutOfRange { label: bad, classes: n_a });
    }
    let mut tp = vec![0usize; n_a];
    let mut pred_count = vec![0usize; n_a];
    let mut support = vec![0usize; n_a];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    // F1 = 2PR/(P+R) = 2tp/(pred + support); integer numerators keep each
    // term to a single rounding
    let f1: Vec<f64> = (0..n_a)
        .map(|c| {
            if tp[c] == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / (pred_count[c] + support[c]) as f64
            }
        })
        .collect();
    let n = truth.len() as f64;
    let present: Vec<usize> = (0..n_a).filter(|&c| support[c] > 0).collect();
    let f_macro = match macro_avg {
        MacroAverage::AllClasses => f1.iter().sum::<f64>() / n_a as f64,
        MacroAverage::PresentClasses => present.iter().map(|&c| f1[c]).sum::<f64>() / present.len() as f64,
    };
    let f_weighted = present
        .iter()
        .map(|&c| (2 * tp[c] * support[c]) as f64 / (pred_count[c] + support[c]) as f64)
        .sum::<f64>()
        / n;
    Ok(Metrics {
        acc: tp.iter().sum::<usize>() as f64 / n,
        f_weighted,
        f_macro,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linear interpolation between order statistics.
pub fn quantiles(values: &[f64]) -> Result<Quantiles> {
    if values.is_empty() {
        return Err(Error::Invalid("quantiles of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Ok(Quantiles {
        min: v[0],
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
        max: v[v.len() - 1],
    })
}

/// `"76.72 ± 1.62"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let m = metrics(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((m.acc, m.f_weighted, m.f_macro), (0.5, 0.5, 0.5));
        let m = metrics(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(m.acc, 0.75);
        assert_eq!(m.f_macro, 3.0 / 7.0);
        assert_eq!(m.f_weighted, 9.0 / 14.0);
        let m = metrics(&[2, 1, 0], &[2, 1, 0], 3).unwrap();
        assert_eq!((m.acc, m.f_weighted, m.f_macro), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_classes_and_errors() {
        let m = metrics(&[0, 1], &[0, 1], 4).unwrap();
        assert_eq!(m.f_macro, 0.5);
        assert_eq!(m.f_weighted, 1.0);
        let p = metrics_with(&[0, 1], &[0, 1], 4, MacroAverage::PresentClasses).unwrap();
        assert_eq!(p.f_macro, 1.0);
        assert!(metrics(&[0], &[0, 1], 2).is_err());
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[5], &[0], 2).is_err());
    }

    #[test]
    fn quantile_and_format() {
        let q = quantiles(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let q = quantiles(&[1.0, 2.0]).unwrap();
        assert_eq!(q.median, 1.5);
        assert_eq!(format_mean_std(76.72, 1.62), "76.72 ± 1.62");
    }
}
