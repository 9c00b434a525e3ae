#![allow(dead_code)]

use harnest::datapipe::{synth_subjects, SynthSpec, WindowedDataset};
use harnest::kernels::{EmbeddingBatch, KernelBank};
use harnest::losses::{class_loss, domain_loss, mmd_loss, recon_loss, LossWeights, Reduction};
use harnest::nets::{build, forward_all, Act, Mode, ModelConfig, NetworkHandle, Role};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- MMD oracle

fn gauss(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for k in 0..a.len() {
        d2 += (a[k] - b[k]) * (a[k] - b[k]);
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Explicit triple loop (kernels × rows × rows), nothing shared with the crate.
pub fn oracle_mmd2(a: &[Vec<f64>], b: &[Vec<f64>], sigmas: &[f64], betas: &[f64]) -> f64 {
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut total = 0.0;
    for (u, &sigma) in sigmas.iter().enumerate() {
        let (mut ss, mut tt, mut st) = (0.0, 0.0, 0.0);
        for x in a {
            for y in a {
                ss += gauss(x, y, sigma);
            }
        }
        for x in b {
            for y in b {
                tt += gauss(x, y, sigma);
            }
        }
        for x in a {
            for y in b {
                st += gauss(x, y, sigma);
            }
        }
        total += betas[u] * (ss / (m * m) + tt / (n * n) - 2.0 * st / (m * n));
    }
    total.max(0.0)
}

pub fn oracle_multi_domain(sets: &[Vec<Vec<f64>>], sigmas: &[f64], betas: &[f64]) -> f64 {
    let k = sets.len() as f64;
    let mut total = 0.0;
    for i in 0..sets.len() {
        for j in 0..sets.len() {
            if i != j {
                total += oracle_mmd2(&sets[i], &sets[j], sigmas, betas);
            }
        }
    }
    total / (k * k)
}

pub fn to_batch(rows: &[Vec<f64>], subject: i32) -> EmbeddingBatch {
    let dim = rows[0].len();
    EmbeddingBatch::new(rows.concat(), dim, subject).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, count: usize, dim: usize, offset: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) + offset).collect())
        .collect()
}

pub fn random_bank(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let m = rng.random_range(1..=5);
    let sigmas: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..4.0)).collect();
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    (sigmas, raw.iter().map(|r| r / s).collect())
}

// ------------------------------------------------------------- metric oracle

pub struct OracleMetrics {
    pub acc: f64,
    pub f_weighted: f64,
    pub f_macro: f64,
}

/// Full confusion matrix, then per-class F1 = 2TP / (2TP + FP + FN).
pub fn oracle_metrics(pred: &[usize], truth: &[usize], n_a: usize) -> OracleMetrics {
    let mut cm = vec![vec![0usize; n_a]; n_a];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let n = truth.len() as f64;
    let mut correct = 0;
    let (mut f_sum, mut fw) = (0.0, 0.0);
    for c in 0..n_a {
        let tp = cm[c][c];
        let fp: usize = (0..n_a).filter(|&r| r != c).map(|r| cm[r][c]).sum();
        let fn_: usize = (0..n_a).filter(|&p| p != c).map(|p| cm[c][p]).sum();
        let support = tp + fn_;
        correct += tp;
        if tp > 0 {
            f_sum += (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        }
        if support > 0 && tp > 0 {
            fw += (2 * tp * support) as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    OracleMetrics {
        acc: correct as f64 / n,
        f_weighted: fw / n,
        f_macro: f_sum / n_a as f64,
    }
}

// ------------------------------------------------------------ gradient check

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rec,
    Cls,
    Dom,
    Mmd,
    Objective,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Rec, LossKind::Cls, LossKind::Dom, LossKind::Mmd, LossKind::Objective];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Rec => "L_rec",
            LossKind::Cls => "L_cls",
            LossKind::Dom => "L_D",
            LossKind::Mmd => "L_MMD",
            LossKind::Objective => "L_obj",
        }
    }

    /// (rec, cls, dom, mmd) coefficients.
    fn coefficients(self) -> [f64; 4] {
        let w = LossWeights::default();
        match self {
            LossKind::Rec => [1.0, 0.0, 0.0, 0.0],
            LossKind::Cls => [0.0, 1.0, 0.0, 0.0],
            LossKind::Dom => [0.0, 0.0, 1.0, 0.0],
            LossKind::Mmd => [0.0, 0.0, 0.0, 1.0],
            LossKind::Objective => [w.lambda_rec, w.lambda_cls, -w.lambda_d, w.lambda_mmd],
        }
    }
}

pub const GRAD_H: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are bounded absolutely (tolerance × floor)
/// and do not count toward the sample size; central differences at h = 1e-6
/// carry ~1e-10 round-off.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Parameters whose gradient magnitude was below [`GRAD_FLOOR`]; not in `checked`.
    pub floored: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

/// Tiny four-network model (n_c=3, n_w=16, base_filters=2, batch=4).
pub struct TinyModel {
    pub q: NetworkHandle,
    pub p: NetworkHandle,
    pub c: NetworkHandle,
    pub d: NetworkHandle,
    pub x: Act,
    pub y: Vec<usize>,
    pub s: Vec<usize>,
    pub bank: KernelBank,
    rng: ChaCha8Rng,
}

impl TinyModel {
    pub fn new(seed: u64) -> Self {
        let mut cfg = ModelConfig::new(3, 16, 3, 3).with_base_filters(2).with_seed(seed);
        cfg.hidden_units = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let data: Vec<f64> = (0..4 * 3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            q: build(&cfg, Role::Q).unwrap(),
            p: build(&cfg, Role::P).unwrap(),
            c: build(&cfg, Role::C).unwrap(),
            d: build(&cfg, Role::D).unwrap(),
            x: Act::from_vec(4, 3, 16, data).unwrap(),
            y: vec![0, 1, 2, 1],
            s: vec![0, 0, 1, 2],
            bank: KernelBank::uniform(vec![0.5, 1.0, 2.0]).unwrap(),
            rng,
        }
    }

    /// Loss value, the four activation patterns and, if `backprop`, Q's gradient.
    fn evaluate(&mut self, kind: LossKind, backprop: bool) -> (f64, [u64; 4], Option<Vec<Vec<f64>>>) {
        let mut rng = self.rng.clone();
        let out = forward_all(&mut self.q, &mut self.p, &mut self.c, Some(&mut self.d), self.x.clone(), Mode::Train, &mut rng)
            .unwrap();
        let [a_rec, a_cls, a_dom, a_mmd] = kind.coefficients();
        let (rec, g_rec) = recon_loss(&self.x, &out.recon, 16, Reduction::Mean).unwrap();
        let (cls, g_cls) = class_loss(&out.class_logits, &self.y, Reduction::Mean).unwrap();
        let (dom, g_dom) = domain_loss(out.subj_logits.as_ref().unwrap(), &self.s, Reduction::Mean).unwrap();
        let subjects: Vec<i32> = self.s.iter().map(|&s| s as i32).collect();
        let (mmd, g_pooled) = mmd_loss(&out.embedding.pooled, out.embedding.dim(), &subjects, &self.bank).unwrap();
        let value = a_rec * rec + a_cls * cls + a_dom * dom + a_mmd * mmd;
        let patterns = [
            self.q.net.activation_pattern(),
            self.p.net.activation_pattern(),
            self.c.net.activation_pattern(),
            self.d.net.activation_pattern(),
        ];
        if !backprop {
            return (value, patterns, None);
        }
        let feats = &out.embedding.features;
        let mut g = Act::zeros(feats.batch, feats.channels, feats.len);
        g.add_assign(&self.p.backward(g_rec), a_rec);
        g.add_assign(&self.c.backward(g_cls), a_cls);
        g.add_assign(&self.d.backward(g_dom), a_dom);
        g.add_assign(&out.embedding.pooled_grad_to_features(&g_pooled), a_mmd);
        self.q.zero_grad();
        self.q.backward(g);
        let grads = self.q.params().iter().map(|p| p.grad.clone()).collect();
        (value, patterns, Some(grads))
    }

    /// Compares Q's analytic gradient of `kind` against central differences
    /// until `want` randomly chosen parameters with non-negligible gradient
    /// have been compared; perturbations that change any rectifier mask or
    /// pooling winner are skipped.
    pub fn check(&mut self, kind: LossKind, want: usize, seed: u64) -> GradReport {
        let (_, base_pattern, grads) = self.evaluate(kind, true);
        let grads = grads.unwrap();
        let mut slots: Vec<(usize, usize)> =
            grads.iter().enumerate().flat_map(|(i, g)| (0..g.len()).map(move |j| (i, j))).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut report = GradReport::default();
        for (i, j) in slots {
            if report.checked == want {
                break;
            }
            let orig = self.q.params()[i].value[j];
            self.q.params_mut()[i].value[j] = orig + GRAD_H;
            let (up, pat_up, _) = self.evaluate(kind, false);
            self.q.params_mut()[i].value[j] = orig - GRAD_H;
            let (down, pat_down, _) = self.evaluate(kind, false);
            self.q.params_mut()[i].value[j] = orig;
            if pat_up != base_pattern || pat_down != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * GRAD_H);
            let analytic = grads[i][j];
            let scale = numeric.abs().max(analytic.abs());
            let rel = (numeric - analytic).abs() / scale.max(GRAD_FLOOR);
            if scale < GRAD_FLOOR {
                // too small for a meaningful relative comparison; still bounded absolutely
                report.floored += 1;
            } else {
                report.checked += 1;
                report.max_rel = report.max_rel.max(rel);
            }
            if rel >= GRAD_TOL {
                let name = self.q.params()[i].name.clone();
                report.failures.push(format!("{name}[{j}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
            }
        }
        report
    }
}

// ------------------------------------------------------------ synthetic data

/// 6 subjects, 4 classes, moderate subject shift.
pub fn shifted_subjects(seed: u64, per_class: usize) -> WindowedDataset {
    synth_subjects(&SynthSpec::new(6, 4, 3, 32, per_class, seed).with_shift(1.0)).unwrap()
}

/// Splits off `test_subject` as an unlabeled target.
pub fn leave_out(ds: &WindowedDataset, test_subject: i32) -> (WindowedDataset, WindowedDataset) {
    let src: Vec<usize> = (0..ds.len()).filter(|&i| ds.s[i] != test_subject).collect();
    (ds.subset(&src), ds.subset(&ds.indices_of_subject(test_subject)))
}
