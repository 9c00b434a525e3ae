//! The four networks: feature extractor Q, reconstructor P, activity
//! classifier C and subject discriminator D.
//!
//! ```text
//!            ┌── P ──> recon        [b × n_c × n_w]
//! x ── Q ──> E ── C ──> class logits [b × n_a]
//!            ├── D ──> subj logits  [b × n_subjects_out]
//!            └── mean over time ──> pooled (MMD only)
//! ```

mod archive;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::WindowedDataset;
use crate::error::{Error, Result};

pub use archive::{
    archive_path, decode_archive, encode_archive, load_network, manifest_path, save_network, ArchiveEntry,
    NetworkManifest, ARCHIVE_MAGIC,
};
pub use layers::{Act, Buffer, Layer, Mode, Param, Sequential};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data-dependent sizes; a config file may leave them out and let the
    /// trainer fill them from the dataset.
    #[serde(default)]
    pub n_c: usize,
    /// Window length as seen by the networks (a multiple of 8).
    #[serde(default)]
    pub n_w: usize,
    #[serde(default)]
    pub n_a: usize,
    #[serde(default)]
    pub n_subjects_out: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    /// Width of the embedding; `None` means `8 · base_filters`.
    #[serde(default)]
    pub latent_channels: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    /// Seed for weight initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_base_filters() -> usize {
    32
}
fn default_conv_kernel() -> usize {
    5
}
fn default_dropout() -> f64 {
    0.5
}
fn default_hidden() -> usize {
    128
}

impl ModelConfig {
    pub fn new(n_c: usize, n_w: usize, n_a: usize, n_subjects_out: usize) -> Self {
        Self {
            n_c,
            n_w,
            n_a,
            n_subjects_out,
            base_filters: default_base_filters(),
            conv_kernel: default_conv_kernel(),
            latent_channels: None,
            dropout_rate: default_dropout(),
            hidden_units: default_hidden(),
            init_seed: 0,
        }
    }

    /// Model config for a dataset, padding its window length up to a multiple of 8.
    pub fn for_dataset(ds: &WindowedDataset, n_subjects_out: usize) -> Self {
        Self::new(ds.n_c, padded_len(ds.n_w), ds.n_a, n_subjects_out)
    }

    /// Copy of this architecture template with the data-dependent sizes taken from `ds`.
    pub fn resolved(&self, ds: &WindowedDataset, n_subjects_out: usize) -> Self {
        Self {
            n_c: ds.n_c,
            n_w: padded_len(ds.n_w),
            n_a: ds.n_a,
            n_subjects_out,
            ..self.clone()
        }
    }

    pub fn latent(&self) -> usize {
        self.latent_channels.unwrap_or(8 * self.base_filters)
    }

    /// Time length of the embedding.
    pub fn latent_len(&self) -> usize {
        self.n_w / 8
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_c", self.n_c),
            ("n_a", self.n_a),
            ("n_subjects_out", self.n_subjects_out),
            ("base_filters", self.base_filters),
            ("latent_channels", self.latent()),
            ("hidden_units", self.hidden_units),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_w == 0 || self.n_w % 8 != 0 {
            return Err(Error::Config(format!(
                "window length {} is not divisible by 8; pad to {}",
                self.n_w,
                padded_len(self.n_w.max(1))
            )));
        }
        if self.n_w < 16 {
            return Err(Error::Config(format!("window length {} is below the minimum of 16", self.n_w)));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel {} must be odd for same padding", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn with_base_filters(mut self, bf: usize) -> Self {
        self.base_filters = bf;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }
}

/// Smallest multiple of 8 that is ≥ `n_w`.
pub fn padded_len(n_w: usize) -> usize {
    n_w.div_ceil(8) * 8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Q,
    P,
    C,
    D,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Q, Role::P, Role::C, Role::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "Q",
            Role::P => "P",
            Role::C => "C",
            Role::D => "D",
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Role::Q => 1,
            Role::P => 2,
            Role::C => 3,
            Role::D => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkHandle {
    pub role: Role,
    pub config: ModelConfig,
    pub net: Sequential,
}

impl NetworkHandle {
    pub fn forward(&mut self, x: Act, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Act> {
        self.net.forward(x, mode, rng)
    }

    pub fn infer(&self, x: &Act) -> Result<Act> {
        self.net.infer(x)
    }

    pub fn backward(&mut self, g: Act) -> Act {
        self.net.backward(g)
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// SHA-256 over every parameter and buffer value, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.net.params() {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        for b in self.net.buffers() {
            h.update(b.name.as_bytes());
            for v in &b.value {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Name of the first parameter or buffer holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let params = self.net.params().into_iter().map(|p| (&p.name, &p.value));
        let buffers = self.net.buffers().into_iter().map(|b| (&b.name, &b.value));
        params
            .chain(buffers)
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.clone())
    }
}

fn init_rng(cfg: &ModelConfig, role: Role) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.init_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(role.seed_offset()))
}

pub fn build_feature_extractor(cfg: &ModelConfig) -> Result<NetworkHandle> {
    cfg.validate()?;
    let mut rng = init_rng(cfg, Role::Q);
    let bf = cfg.base_filters;
    let widths = [bf, 2 * bf, 4 * bf, cfg.latent()];
    let mut net = Sequential::new();
    let mut in_ch = cfg.n_c;
    for (i, &w) in widths.iter().enumerate() {
        let block = i + 1;
        for j in 1..=2 {
            net.conv(&format!("block{block}.conv{j}"), in_ch, w, cfg.conv_kernel, false, &mut rng);
            net.batch_norm(&format!("block{block}.bn{j}"), w);
            net.relu();
            in_ch = w;
        }
        if block < 4 {
            net.max_pool();
        }
    }
    Ok(NetworkHandle {
        role: Role::Q,
        config: cfg.clone(),
        net,
    })
}

pub fn build_reconstructor(cfg: &ModelConfig) -> Result<NetworkHandle> {
    cfg.validate()?;
    let mut rng = init_rng(cfg, Role::P);
    let bf = cfg.base_filters;
    let mut net = Sequential::new();
    let mut in_ch = cfg.latent();
    for (i, w) in [4 * bf, 2 * bf, bf].into_iter().enumerate() {
        let block = i + 1;
        net.upsample();
        for j in 1..=2 {
            net.conv(&format!("block{block}.conv{j}"), in_ch, w, cfg.conv_kernel, false, &mut rng);
            net.batch_norm(&format!("block{block}.bn{j}"), w);
            net.relu();
            in_ch = w;
        }
    }
    net.conv("out", in_ch, cfg.n_c, cfg.conv_kernel, true, &mut rng);
    Ok(NetworkHandle {
        role: Role::P,
        config: cfg.clone(),
        net,
    })
}

pub fn build_classifier(cfg: &ModelConfig) -> Result<NetworkHandle> {
    cfg.validate()?;
    let mut rng = init_rng(cfg, Role::C);
    let latent = cfg.latent();
    let mut net = Sequential::new();
    net.max_pool();
    net.conv("conv", latent, latent, cfg.conv_kernel, true, &mut rng);
    net.relu();
    net.linear("fc1", latent * (cfg.latent_len() / 2), cfg.hidden_units, &mut rng);
    net.relu();
    net.linear("fc2", cfg.hidden_units, cfg.n_a, &mut rng);
    Ok(NetworkHandle {
        role: Role::C,
        config: cfg.clone(),
        net,
    })
}

pub fn build_discriminator(cfg: &ModelConfig) -> Result<NetworkHandle> {
    cfg.validate()?;
    let mut rng = init_rng(cfg, Role::D);
    let latent = cfg.latent();
    let mut net = Sequential::new();
    for block in 1..=3 {
        net.conv(&format!("block{block}.conv"), latent, latent, cfg.conv_kernel, false, &mut rng);
        net.batch_norm(&format!("block{block}.bn"), latent);
        net.relu();
        net.dropout(cfg.dropout_rate);
    }
    net.linear("fc1", latent * cfg.latent_len(), cfg.hidden_units, &mut rng);
    net.relu();
    net.linear("fc2", cfg.hidden_units, cfg.n_subjects_out, &mut rng);
    Ok(NetworkHandle {
        role: Role::D,
        config: cfg.clone(),
        net,
    })
}

pub fn build(cfg: &ModelConfig, role: Role) -> Result<NetworkHandle> {
    match role {
        Role::Q => build_feature_extractor(cfg),
        Role::P => build_reconstructor(cfg),
        Role::C => build_classifier(cfg),
        Role::D => build_discriminator(cfg),
    }
}

/// The embedding E produced by Q.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    /// `[batch × latent_channels × n_w/8]`
    pub features: Act,
    /// `[batch × latent_channels]`, time average of `features`.
    pub pooled: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(features: Act) -> Self {
        let pooled = features
            .data
            .chunks(features.len)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        Self { features, pooled }
    }

    pub fn dim(&self) -> usize {
        self.features.channels
    }

    pub fn pooled_row(&self, b: usize) -> &[f64] {
        &self.pooled[b * self.dim()..(b + 1) * self.dim()]
    }

    /// Gradient w.r.t. `features` given a gradient w.r.t. `pooled`.
    pub fn pooled_grad_to_features(&self, g_pooled: &[f64]) -> Act {
        let t = self.features.len;
        let data = g_pooled.iter().flat_map(|g| std::iter::repeat_n(g / t as f64, t)).collect();
        Act {
            data,
            ..self.features.clone_shape()
        }
    }
}

impl Act {
    fn clone_shape(&self) -> Act {
        Act {
            batch: self.batch,
            channels: self.channels,
            len: self.len,
            data: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub embedding: EmbeddingMap,
    pub recon: Act,
    pub class_logits: Act,
    /// Absent when no discriminator is given.
    pub subj_logits: Option<Act>,
}

fn check_input(q: &NetworkHandle, x: &Act) -> Result<()> {
    if x.batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let cfg = &q.config;
    if x.channels != cfg.n_c || x.len != cfg.n_w {
        return Err(Error::shape(
            "input → Q",
            format!("[b × {} × {}]", cfg.n_c, cfg.n_w),
            format!("[b × {} × {}]", x.channels, x.len),
        ));
    }
    Ok(())
}

fn check_same_config(nets: &[&NetworkHandle]) -> Result<()> {
    let first = &nets[0].config;
    for n in &nets[1..] {
        if n.config.latent() != first.latent() || n.config.n_w != first.n_w || n.config.n_c != first.n_c {
            return Err(Error::shape(
                format!("Q → {}", n.role.as_str()),
                format!("latent {} × {}", first.latent(), first.latent_len()),
                format!("latent {} × {}", n.config.latent(), n.config.latent_len()),
            ));
        }
    }
    Ok(())
}

/// Runs Q once and feeds its features to P, C and (optionally) D, caching
/// every intermediate for a subsequent backward pass.
pub fn forward_all(
    q: &mut NetworkHandle,
    p: &mut NetworkHandle,
    c: &mut NetworkHandle,
    d: Option<&mut NetworkHandle>,
    x: Act,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutputs> {
    check_input(q, &x)?;
    let mut all = vec![&*q, &*p, &*c];
    if let Some(d) = &d {
        all.push(d);
    }
    check_same_config(&all)?;
    let embedding = EmbeddingMap::new(q.forward(x, mode, rng)?);
    let recon = p.forward(embedding.features.clone(), mode, rng)?;
    let class_logits = c.forward(embedding.features.clone(), mode, rng)?;
    let subj_logits = match d {
        Some(d) => Some(d.forward(embedding.features.clone(), mode, rng)?),
        None => None,
    };
    Ok(ForwardOutputs {
        embedding,
        recon,
        class_logits,
        subj_logits,
    })
}

/// Read-only inference pass; safe to call concurrently.
pub fn infer_all(
    q: &NetworkHandle,
    p: &NetworkHandle,
    c: &NetworkHandle,
    d: Option<&NetworkHandle>,
    x: &Act,
) -> Result<ForwardOutputs> {
    check_input(q, x)?;
    let mut all = vec![q, p, c];
    all.extend(d);
    check_same_config(&all)?;
    let embedding = EmbeddingMap::new(q.infer(x)?);
    Ok(ForwardOutputs {
        recon: p.infer(&embedding.features)?,
        class_logits: c.infer(&embedding.features)?,
        subj_logits: d.map(|d| d.infer(&embedding.features)).transpose()?,
        embedding,
    })
}

/// Row-wise softmax of `[b × k]` logits.
pub fn softmax(logits: &Act) -> Vec<f64> {
    let k = logits.row_len();
    let mut out = Vec::with_capacity(logits.data.len());
    for row in logits.data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Act) -> Vec<usize> {
    logits
        .data
        .chunks(logits.row_len())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Gathers windows `indices` into a network input of length `n_w_model`,
/// right-padding each channel with its last value.
pub fn windows_to_act(ds: &WindowedDataset, indices: &[usize], n_w_model: usize) -> Result<Act> {
    if n_w_model < ds.n_w {
        return Err(Error::shape("window → input", format!("≥ {}", ds.n_w), n_w_model));
    }
    let mut data = Vec::with_capacity(indices.len() * ds.n_c * n_w_model);
    for &i in indices {
        let w = ds.window(i);
        for c in 0..ds.n_c {
            let ch = &w[c * ds.n_w..(c + 1) * ds.n_w];
            data.extend(ch.iter().map(|&v| v as f64));
            let last = ch.last().copied().unwrap_or(0.0) as f64;
            data.extend(std::iter::repeat_n(last, n_w_model - ds.n_w));
        }
    }
    Act::from_vec(indices.len(), ds.n_c, n_w_model, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n_w: usize) -> ModelConfig {
        ModelConfig::new(3, n_w, 4, 5).with_base_filters(2)
    }

    fn input(cfg: &ModelConfig, b: usize) -> Act {
        let n = b * cfg.n_c * cfg.n_w;
        Act::from_vec(b, cfg.n_c, cfg.n_w, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap()
    }

    fn all(cfg: &ModelConfig) -> [NetworkHandle; 4] {
        Role::ALL.map(|r| build(cfg, r).unwrap())
    }

    #[test]
    fn encoder_time_length_is_an_eighth() {
        let cfg = tiny(64);
        let q = build_feature_extractor(&cfg).unwrap();
        let e = q.infer(&input(&cfg, 3)).unwrap();
        assert_eq!(e.shape(), [3, 16, 8]);
    }

    #[test]
    fn window_length_must_divide_by_eight() {
        assert!(matches!(build_feature_extractor(&tiny(60)), Err(Error::Config(_))));
        assert_eq!(padded_len(60), 64);
        assert!(build_feature_extractor(&tiny(64)).is_ok());
        // 200 = 8 · 25 needs no padding
        assert_eq!(padded_len(200), 200);
        assert!(build_feature_extractor(&tiny(200)).is_ok());
    }

    #[test]
    fn forward_all_shapes_and_repeatability() {
        let cfg = tiny(16);
        let [mut q, mut p, mut c, mut d] = all(&cfg);
        let x = input(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_all(&mut q, &mut p, &mut c, Some(&mut d), x.clone(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.recon.shape(), x.shape());
        assert_eq!(out.class_logits.shape(), [4, 4, 1]);
        assert_eq!(out.subj_logits.as_ref().unwrap().shape(), [4, 5, 1]);
        let again = infer_all(&q, &p, &c, Some(&d), &x).unwrap();
        assert_eq!(out, again);
        let empty = Act::zeros(0, 3, 16);
        assert!(infer_all(&q, &p, &c, None, &empty).is_err());
    }

    #[test]
    fn mismatched_latent_names_edge() {
        let cfg = tiny(16);
        let q = build_feature_extractor(&cfg).unwrap();
        let mut other = cfg.clone();
        other.latent_channels = Some(3);
        let p = build_reconstructor(&other).unwrap();
        let c = build_classifier(&cfg).unwrap();
        let err = infer_all(&q, &p, &c, None, &input(&cfg, 1)).unwrap_err();
        assert!(err.to_string().contains("Q → P"), "{err}");
    }

    #[test]
    fn discriminator_dropout_train_only() {
        let cfg = tiny(16);
        let mut d = build_discriminator(&cfg).unwrap();
        let e = build_feature_extractor(&cfg).unwrap().infer(&input(&cfg, 2)).unwrap();
        let a = d.forward(e.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = d.forward(e.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(d.infer(&e).unwrap(), d.infer(&e).unwrap());
    }

    #[test]
    fn softmax_rows() {
        let logits = Act::from_vec(2, 3, 1, vec![0.0, 0.0, 0.0, 1.0, -2.0, 30.0]).unwrap();
        let p = softmax(&logits);
        for r in p.chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(argmax_rows(&logits), vec![0, 2]);
    }

    #[test]
    fn edge_padding() {
        let ds = WindowedDataset::from_parts(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0], vec![1], 2, 3, 1).unwrap();
        let x = windows_to_act(&ds, &[0], 8).unwrap();
        assert_eq!(x.data, vec![1.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 4.0, 5.0, 6.0, 6.0, 6.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny(16);
        assert_eq!(build_classifier(&cfg).unwrap().hash(), build_classifier(&cfg).unwrap().hash());
        assert_ne!(build_classifier(&cfg).unwrap().hash(), build_classifier(&cfg.clone().with_seed(1)).unwrap().hash());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn autoencoder_closure(n_c in 1usize..4, eighths in 2usize..6, bf in 1usize..3, k in 0usize..3, b in 1usize..3) {
            let mut cfg = ModelConfig::new(n_c, 8 * eighths, 2, 2).with_base_filters(bf);
            cfg.conv_kernel = 2 * k + 1;
            let q = build_feature_extractor(&cfg).unwrap();
            let p = build_reconstructor(&cfg).unwrap();
            let x = input(&cfg, b);
            let e = EmbeddingMap::new(q.infer(&x).unwrap());
            for (row, chunk) in e.features.data.chunks(e.features.len).enumerate() {
                let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
                prop_assert!((e.pooled[row] - mean).abs() < 1e-6);
            }
            prop_assert_eq!(p.infer(&e.features).unwrap().shape(), x.shape());
        }
    }
}
