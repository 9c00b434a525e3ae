//! Three-stage training with per-stage freezing.
//!
//! ```text
//! stage 1  pretrain     Q, P  ← L_rec                      C, D frozen
//! stage 2  supervised   D     ← L_D
//!                       Q,P,C ← λ_cls·L_cls + λ_rec·L_rec
//! stage 3  adversarial  D     ← L_D                        P frozen
//!                       Q, C  ← L_obj (source subjects)
//!          target step  D     ← L_D (source ∪ target)
//!                       Q     ← λ_mmd·L_mmd − λ_d·L_D (source ∪ target)
//! ```
//!
//! Frozen networks run in inference mode, so their batch-norm statistics do
//! not drift either; the freeze contract is checked by hashing.

mod adam;
mod checkpoint;
mod sampler;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{DatasetName, WindowedDataset};
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_bank, EmbeddingBatch, DEFAULT_BANDWIDTH_FACTORS};
use crate::losses::{
    combined_objective, domain_loss, mmd_loss, recon_loss, class_loss, uniform_label_loss, LossBreakdown,
    LossWeights, Reduction,
};
use crate::nets::{build, windows_to_act, Act, EmbeddingMap, Mode, ModelConfig, NetworkHandle, Role};

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{read_history_csv, write_history_csv, CheckpointManifest, CHECKPOINT_MANIFEST};
pub use sampler::BatchSampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    NoAdv,
    OnlySupervised,
    NoMmd,
    OneStage,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoAdv,
        Variant::OnlySupervised,
        Variant::NoMmd,
        Variant::OneStage,
        Variant::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::NoAdv => "no_adv",
            Variant::OnlySupervised => "only_supervised",
            Variant::NoMmd => "no_mmd",
            Variant::OneStage => "one_stage",
        }
    }

    pub fn has_discriminator(self) -> bool {
        self != Variant::NoAdv
    }

    /// Whether the unlabeled target step runs.
    pub fn uses_target(self) -> bool {
        matches!(self, Variant::Proposed | Variant::NoMmd | Variant::OneStage)
    }

    fn stages(self) -> &'static [Stage] {
        match self {
            Variant::NoAdv => &[Stage::Pretrain, Stage::Supervised],
            Variant::OneStage => &[Stage::Joint],
            _ => &[Stage::Pretrain, Stage::Supervised, Stage::Adversarial],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of proposed, no_adv, only_supervised, no_mmd, one_stage")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Supervised,
    Adversarial,
    /// Everything at once (the one-stage ablation).
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Supervised => "supervised",
            Stage::Adversarial => "adversarial",
            Stage::Joint => "joint",
        }
    }

    fn frozen(self) -> &'static [Role] {
        match self {
            Stage::Pretrain => &[Role::C, Role::D],
            Stage::Adversarial => &[Role::P],
            _ => &[],
        }
    }
}

/// Length of a training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Passes over the source set, `ceil(n / batch)` iterations each.
    Epochs(usize),
    Iterations(usize),
}

impl Budget {
    fn iterations(self, batches_per_epoch: usize) -> u64 {
        match self {
            Budget::Epochs(e) => (e * batches_per_epoch) as u64,
            Budget::Iterations(n) => n as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_c: f64,
    pub lr_q: f64,
    pub lr_p: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub stage1: Budget,
    pub stage2: Budget,
    pub stage3: Budget,
    pub seed: u64,
    pub variant: Variant,
    pub reduction: Reduction,
    /// Replace `−λ_d·L_D` in the extractor update by `λ_d` times the
    /// cross-entropy against uniform subject labels.
    pub adv_surrogate: bool,
    /// Iterations between freeze-contract hash checks.
    pub freeze_check_every: u64,
    pub bandwidth_factors: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr_c: 5e-5,
            lr_q: 5e-5,
            lr_p: 1e-4,
            lr_d: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 200,
            stage1: Budget::Epochs(30),
            stage2: Budget::Epochs(60),
            stage3: Budget::Epochs(60),
            seed: 0,
            variant: Variant::Proposed,
            reduction: Reduction::Mean,
            adv_surrogate: false,
            freeze_check_every: 100,
            bandwidth_factors: DEFAULT_BANDWIDTH_FACTORS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn for_dataset(name: DatasetName) -> Self {
        let batch_size = match name {
            DatasetName::Opportunity => 500,
            DatasetName::Mocapaci => 128,
            DatasetName::Pamap2 | DatasetName::Mhealth | DatasetName::Synthetic => 200,
        };
        Self {
            batch_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, lr) in [("lr_c", self.lr_c), ("lr_q", self.lr_q), ("lr_p", self.lr_p), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} must be positive")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.freeze_check_every == 0 {
            return Err(Error::Config("freeze_check_every must be at least 1".into()));
        }
        if self.bandwidth_factors.is_empty() || self.bandwidth_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("bandwidth_factors must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn adam(&self, role: Role) -> AdamParams {
        AdamParams {
            lr: match role {
                Role::Q => self.lr_q,
                Role::P => self.lr_p,
                Role::C => self.lr_c,
                Role::D => self.lr_d,
            },
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Independent sub-seed `k` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub stage: Stage,
    pub rec: f64,
    pub cls: f64,
    pub dom: f64,
    pub mmd: f64,
    pub objective: f64,
}

impl HistoryRow {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            rec: self.rec,
            cls: self.cls,
            dom: self.dom,
            mmd: self.mmd,
            objective: self.objective,
        }
    }
}

/// Counters gathered while training; used by tests and reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub freeze_checks: u64,
    pub adversarial_checks: u64,
    pub adversarial_violations: u64,
    /// Set when a target-using variant ran without target windows.
    pub downgraded: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints go; nothing is written when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also checkpoint every this many iterations (0: only when training ends or stops).
    pub checkpoint_every: u64,
    /// Stop (and checkpoint) once this many iterations have run in total.
    pub stop_after: Option<u64>,
    /// Stop just before this stage begins.
    pub stop_before: Option<Stage>,
    /// Measure whether every discriminator update lowers its own batch loss.
    pub track_adversarial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Stopped,
}

/// Labeled source windows plus optional unlabeled target windows.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a WindowedDataset,
    /// Only `x` and `s` of the target are read.
    pub target: Option<&'a WindowedDataset>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Effective configuration (after variant adjustments).
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub q: NetworkHandle,
    pub p: NetworkHandle,
    pub c: NetworkHandle,
    pub d: Option<NetworkHandle>,
    pub adam: BTreeMap<Role, AdamState>,
    pub stage_index: usize,
    pub stage_iteration: u64,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub source_sampler: BatchSampler,
    pub target_sampler: Option<BatchSampler>,
    /// Source subject id → discriminator class.
    pub subject_map: BTreeMap<i32, usize>,
    pub target_subjects: Vec<i32>,
    /// Unpadded window length (reconstruction is scored on it only).
    pub valid_len: usize,
    pub history: Vec<HistoryRow>,
    pub diagnostics: Diagnostics,
    frozen_reference: Vec<(Role, String)>,
}

struct Batch {
    x: Act,
    y: Vec<usize>,
    s: Vec<usize>,
    subjects: Vec<i32>,
}

fn concat_rows(a: &Act, b: &Act) -> Act {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Act {
        batch: a.batch + b.batch,
        data,
        ..*a
    }
}

fn scaled(mut g: Act, s: f64) -> Act {
    g.data.iter_mut().for_each(|v| *v *= s);
    g
}

impl TrainState {
    pub fn new(config: &TrainConfig, model_template: &ModelConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let source = data.source;
        source.validate()?;
        if source.is_empty() {
            return Err(Error::Invalid("source dataset is empty".into()));
        }
        let mut config = config.clone();
        let mut diagnostics = Diagnostics::default();
        let target = data.target.filter(|t| !t.is_empty());
        if config.variant.uses_target() && target.is_none() && config.variant != Variant::OneStage {
            log::warn!("no target windows; running {} as only_supervised", config.variant);
            config.variant = Variant::OnlySupervised;
            diagnostics.downgraded = true;
        }
        if config.variant == Variant::NoMmd {
            config.weights.lambda_mmd = 0.0;
        }
        if config.variant == Variant::NoAdv {
            config.weights.lambda_d = 0.0;
        }
        let target = target.filter(|_| config.variant.uses_target());
        if let Some(t) = target {
            if t.n_c != source.n_c || t.n_w != source.n_w {
                return Err(Error::shape(
                    "target windows",
                    format!("{}x{}", source.n_c, source.n_w),
                    format!("{}x{}", t.n_c, t.n_w),
                ));
            }
            if let Some(s) = t.subject_ids.iter().find(|s| source.subject_ids.contains(s)) {
                return Err(Error::Invalid(format!("subject {s} is both source and target")));
            }
        }

        let subject_map: BTreeMap<i32, usize> =
            source.subject_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let n_out = subject_map.len() + usize::from(target.is_some());
        let mut model = model_template.resolved(source, n_out);
        model.init_seed = derive_seed(config.seed, 1);
        model.validate()?;

        let q = build(&model, Role::Q)?;
        let p = build(&model, Role::P)?;
        let c = build(&model, Role::C)?;
        let d = config.variant.has_discriminator().then(|| build(&model, Role::D)).transpose()?;
        let mut adam = BTreeMap::new();
        for net in [Some(&q), Some(&p), Some(&c), d.as_ref()].into_iter().flatten() {
            adam.insert(net.role, AdamState::for_network(net));
        }

        let all: Vec<usize> = (0..source.len()).collect();
        let source_sampler = BatchSampler::new(&all, &source.s, config.batch_size, derive_seed(config.seed, 2));
        let target_sampler = target.map(|t| {
            let idx: Vec<usize> = (0..t.len()).collect();
            let per_subject = config.batch_size.div_ceil(subject_map.len());
            BatchSampler::new(&idx, &t.s, per_subject, derive_seed(config.seed, 3))
        });

        Ok(Self {
            model,
            q,
            p,
            c,
            d,
            adam,
            stage_index: 0,
            stage_iteration: 0,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4)),
            source_sampler,
            target_sampler,
            subject_map,
            target_subjects: target.map(|t| t.subject_ids.clone()).unwrap_or_default(),
            valid_len: source.n_w,
            history: Vec::new(),
            diagnostics,
            frozen_reference: Vec::new(),
            config,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stages(&self) -> &'static [Stage] {
        self.config.variant.stages()
    }

    /// The stage that runs next, or `None` when training is complete.
    pub fn current_stage(&self) -> Option<Stage> {
        self.stages().get(self.stage_index).copied()
    }

    pub fn is_finished(&self) -> bool {
        self.current_stage().is_none()
    }

    pub fn stage_iterations(&self, stage: Stage) -> u64 {
        let per_epoch = self.source_sampler.batches_per_epoch();
        match stage {
            Stage::Pretrain => self.config.stage1.iterations(per_epoch),
            Stage::Supervised => self.config.stage2.iterations(per_epoch),
            Stage::Adversarial => self.config.stage3.iterations(per_epoch),
            Stage::Joint => [self.config.stage1, self.config.stage2, self.config.stage3]
                .iter()
                .map(|b| b.iterations(per_epoch))
                .sum(),
        }
    }

    pub fn network(&self, role: Role) -> Option<&NetworkHandle> {
        match role {
            Role::Q => Some(&self.q),
            Role::P => Some(&self.p),
            Role::C => Some(&self.c),
            Role::D => self.d.as_ref(),
        }
    }

    pub fn networks(&self) -> Vec<&NetworkHandle> {
        Role::ALL.iter().filter_map(|&r| self.network(r)).collect()
    }

    fn network_mut(&mut self, role: Role) -> Option<&mut NetworkHandle> {
        match role {
            Role::Q => Some(&mut self.q),
            Role::P => Some(&mut self.p),
            Role::C => Some(&mut self.c),
            Role::D => self.d.as_mut(),
        }
    }

    /// Runs the remaining stages.
    pub fn train(&mut self, data: TrainData, opts: &TrainOptions) -> Result<Outcome> {
        if data.source.len() != self.source_sampler.len() {
            return Err(Error::Invalid(format!(
                "source has {} windows but this state was built for {}",
                data.source.len(),
                self.source_sampler.len()
            )));
        }
        let target = data.target.filter(|_| self.target_sampler.is_some());
        while let Some(stage) = self.current_stage() {
            if self.stage_iteration == 0 && opts.stop_before == Some(stage) {
                return self.stop(opts);
            }
            self.frozen_reference = stage
                .frozen()
                .iter()
                .filter_map(|&r| self.network(r).map(|n| (r, n.hash())))
                .collect();
            let total = self.stage_iterations(stage);
            while self.stage_iteration < total {
                if opts.stop_after == Some(self.iteration) {
                    return self.stop(opts);
                }
                self.step(stage, data.source, target, opts.track_adversarial)?;
                self.stage_iteration += 1;
                self.iteration += 1;
                if self.iteration % self.config.freeze_check_every == 0 {
                    self.check_frozen()?;
                }
                if opts.checkpoint_every > 0 && self.iteration % opts.checkpoint_every == 0 {
                    if let Some(dir) = &opts.checkpoint_dir {
                        self.save_checkpoint(dir)?;
                    }
                }
            }
            self.check_frozen()?;
            log::info!("{} finished after {} iterations (total {})", stage.as_str(), total, self.iteration);
            self.stage_index += 1;
            self.stage_iteration = 0;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(Outcome::Completed)
    }

    fn stop(&mut self, opts: &TrainOptions) -> Result<Outcome> {
        if let Some(dir) = &opts.checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(Outcome::Stopped)
    }

    fn check_frozen(&mut self) -> Result<()> {
        for (role, reference) in &self.frozen_reference {
            let now = self.network(*role).map(NetworkHandle::hash).unwrap_or_default();
            self.diagnostics.freeze_checks += 1;
            if &now != reference {
                return Err(Error::FreezeViolation(format!(
                    "{} changed during {} (iteration {})",
                    role.as_str(),
                    self.current_stage().map_or("?", Stage::as_str),
                    self.iteration
                )));
            }
        }
        Ok(())
    }

    fn update(&mut self, role: Role) -> Result<()> {
        let hp = self.config.adam(role);
        let iteration = self.iteration;
        let mut st = self.adam.remove(&role).expect("optimizer state exists for every built network");
        let net = self.network_mut(role).expect("updated network exists");
        let res = adam_step(net, &mut st, &hp);
        let bad = net.first_non_finite();
        self.adam.insert(role, st);
        res.map_err(|e| Error::NonFinite(format!("iteration {iteration}: {e}")))?;
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("iteration {iteration}: {} parameter {name}", role.as_str())));
        }
        Ok(())
    }

    fn zero_all(&mut self) {
        self.q.zero_grad();
        self.p.zero_grad();
        self.c.zero_grad();
        if let Some(d) = &mut self.d {
            d.zero_grad();
        }
    }

    fn source_batch(&mut self, ds: &WindowedDataset) -> Result<Batch> {
        let idx = self.source_sampler.next_batch();
        Ok(Batch {
            x: windows_to_act(ds, &idx, self.model.n_w)?,
            y: idx.iter().map(|&i| ds.y[i]).collect(),
            s: idx.iter().map(|&i| self.subject_map[&ds.s[i]]).collect(),
            subjects: idx.iter().map(|&i| ds.s[i]).collect(),
        })
    }

    fn step(&mut self, stage: Stage, source: &WindowedDataset, target: Option<&WindowedDataset>, track: bool) -> Result<()> {
        let batch = self.source_batch(source)?;
        let row = match stage {
            Stage::Pretrain => self.pretrain_step(&batch)?,
            Stage::Supervised => self.supervised_step(&batch)?,
            Stage::Adversarial | Stage::Joint => {
                let row = self.adversarial_step(&batch, stage, track)?;
                if let (Some(t), Some(sampler)) = (target, self.target_sampler.as_mut()) {
                    let idx = sampler.next_batch();
                    let xt = windows_to_act(t, &idx, self.model.n_w)?;
                    let st: Vec<i32> = idx.iter().map(|&i| t.s[i]).collect();
                    self.target_step(&batch, xt, st, track)?;
                }
                row
            }
        };
        self.history.push(HistoryRow {
            iteration: self.iteration,
            stage,
            rec: row.rec,
            cls: row.cls,
            dom: row.dom,
            mmd: row.mmd,
            objective: row.objective,
        });
        Ok(())
    }

    fn pretrain_step(&mut self, b: &Batch) -> Result<LossBreakdown> {
        self.zero_all();
        let red = self.config.reduction;
        let e = self.q.forward(b.x.clone(), Mode::Train, &mut self.rng)?;
        let recon = self.p.forward(e, Mode::Train, &mut self.rng)?;
        let (rec, g) = recon_loss(&b.x, &recon, self.valid_len, red)?;
        let g_e = self.p.backward(g);
        self.q.backward(g_e);
        self.update(Role::Q)?;
        self.update(Role::P)?;
        let w = LossWeights {
            lambda_cls: 0.0,
            lambda_mmd: 0.0,
            lambda_d: 0.0,
            ..self.config.weights
        };
        combined_objective(rec, 0.0, 0.0, 0.0, &w)
    }

    /// One discriminator update on `features` (detached) with labels `s`.
    fn discriminator_step(&mut self, features: &Act, s: &[usize], track: bool) -> Result<f64> {
        let red = self.config.reduction;
        let probe_rng = self.rng.clone();
        let d = self.d.as_mut().expect("discriminator present");
        d.zero_grad();
        let before = if track {
            let mut probe = d.clone();
            let logits = probe.forward(features.clone(), Mode::Train, &mut probe_rng.clone())?;
            Some(domain_loss(&logits, s, red)?.0)
        } else {
            None
        };
        let logits = d.forward(features.clone(), Mode::Train, &mut self.rng)?;
        let (dom, g) = domain_loss(&logits, s, red)?;
        d.backward(g);
        self.update(Role::D)?;
        if let Some(before) = before {
            let mut probe = self.d.clone().expect("discriminator present");
            let logits = probe.forward(features.clone(), Mode::Train, &mut probe_rng.clone())?;
            let after = domain_loss(&logits, s, red)?.0;
            self.diagnostics.adversarial_checks += 1;
            if after > before {
                self.diagnostics.adversarial_violations += 1;
            }
        }
        Ok(dom)
    }

    fn supervised_step(&mut self, b: &Batch) -> Result<LossBreakdown> {
        self.zero_all();
        let (red, w) = (self.config.reduction, self.config.weights);
        let e = self.q.forward(b.x.clone(), Mode::Train, &mut self.rng)?;
        let dom = match self.d {
            Some(_) => self.discriminator_step(&e, &b.s, false)?,
            None => 0.0,
        };
        let recon = self.p.forward(e.clone(), Mode::Train, &mut self.rng)?;
        let (rec, g_rec) = recon_loss(&b.x, &recon, self.valid_len, red)?;
        let mut g_e = self.p.backward(scaled(g_rec, w.lambda_rec));
        let logits = self.c.forward(e, Mode::Train, &mut self.rng)?;
        let (cls, g_cls) = class_loss(&logits, &b.y, red)?;
        g_e.add_assign(&self.c.backward(scaled(g_cls, w.lambda_cls)), 1.0);
        self.q.backward(g_e);
        self.update(Role::P)?;
        self.update(Role::C)?;
        self.update(Role::Q)?;
        let w2 = LossWeights {
            lambda_mmd: 0.0,
            lambda_d: 0.0,
            ..w
        };
        combined_objective(rec, cls, dom, 0.0, &w2)
    }

    /// Gradient at the embedding of the adversarial term (with the current
    /// discriminator), and the domain loss value.
    fn adversarial_grad(&mut self, features: &Act, s: &[usize]) -> Result<(f64, Act)> {
        let (red, w, surrogate) = (self.config.reduction, self.config.weights, self.config.adv_surrogate);
        let d = self.d.as_mut().expect("discriminator present");
        d.zero_grad();
        let logits = d.forward(features.clone(), Mode::Train, &mut self.rng)?;
        let (dom, g_dom) = domain_loss(&logits, s, red)?;
        let g = if surrogate {
            scaled(uniform_label_loss(&logits, red)?.1, w.lambda_d)
        } else {
            scaled(g_dom, -w.lambda_d)
        };
        let g_e = d.backward(g);
        d.zero_grad();
        Ok((dom, g_e))
    }

    /// MMD over the subjects in the batch and its gradient at the embedding.
    fn mmd_grad(&self, e: &EmbeddingMap, subjects: &[i32]) -> Result<(f64, Option<Act>)> {
        let lambda = self.config.weights.lambda_mmd;
        let distinct = subjects.iter().collect::<std::collections::BTreeSet<_>>().len();
        if lambda == 0.0 || distinct < 2 {
            return Ok((0.0, None));
        }
        let sample = EmbeddingBatch::new(e.pooled.clone(), e.dim(), -1)?;
        let bank = median_heuristic_bank(&sample, &self.config.bandwidth_factors)?;
        let (mmd, g) = mmd_loss(&e.pooled, e.dim(), subjects, &bank)?;
        let g: Vec<f64> = g.iter().map(|v| v * lambda).collect();
        Ok((mmd, Some(e.pooled_grad_to_features(&g))))
    }

    fn adversarial_step(&mut self, b: &Batch, stage: Stage, track: bool) -> Result<LossBreakdown> {
        self.zero_all();
        let (red, w) = (self.config.reduction, self.config.weights);
        let train_p = stage == Stage::Joint;
        let e = EmbeddingMap::new(self.q.forward(b.x.clone(), Mode::Train, &mut self.rng)?);
        let (dom, g_adv) = match self.d {
            Some(_) => {
                self.discriminator_step(&e.features, &b.s, track)?;
                let (dom, g) = self.adversarial_grad(&e.features, &b.s)?;
                (dom, Some(g))
            }
            None => (0.0, None),
        };
        let p_mode = if train_p { Mode::Train } else { Mode::Eval };
        let recon = self.p.forward(e.features.clone(), p_mode, &mut self.rng)?;
        let (rec, g_rec) = recon_loss(&b.x, &recon, self.valid_len, red)?;
        let mut g_e = self.p.backward(scaled(g_rec, w.lambda_rec));
        let logits = self.c.forward(e.features.clone(), Mode::Train, &mut self.rng)?;
        let (cls, g_cls) = class_loss(&logits, &b.y, red)?;
        g_e.add_assign(&self.c.backward(scaled(g_cls, w.lambda_cls)), 1.0);
        if let Some(g) = g_adv {
            g_e.add_assign(&g, 1.0);
        }
        let (mmd, g_mmd) = self.mmd_grad(&e, &b.subjects)?;
        if let Some(g) = g_mmd {
            g_e.add_assign(&g, 1.0);
        }
        self.q.backward(g_e);
        if train_p {
            self.update(Role::P)?;
        }
        self.update(Role::C)?;
        self.update(Role::Q)?;
        combined_objective(rec, cls, dom, mmd, &w)
    }

    fn target_step(&mut self, b: &Batch, xt: Act, target_subjects: Vec<i32>, track: bool) -> Result<()> {
        self.zero_all();
        let target_class = self.subject_map.len();
        let x = concat_rows(&b.x, &xt);
        let mut s = b.s.clone();
        s.extend(std::iter::repeat_n(target_class, xt.batch));
        let mut subjects = b.subjects.clone();
        subjects.extend(target_subjects);
        let e = EmbeddingMap::new(self.q.forward(x, Mode::Train, &mut self.rng)?);
        let mut g_e = Act::zeros(e.features.batch, e.features.channels, e.features.len);
        if self.d.is_some() {
            self.discriminator_step(&e.features, &s, track)?;
            g_e.add_assign(&self.adversarial_grad(&e.features, &s)?.1, 1.0);
        }
        if let (_, Some(g)) = self.mmd_grad(&e, &subjects)? {
            g_e.add_assign(&g, 1.0);
        }
        self.q.backward(g_e);
        self.update(Role::Q)
    }

    /// Embeddings (pooled, `[n × latent]`) of every window in `ds`.
    pub fn embed(&self, ds: &WindowedDataset) -> Result<Vec<f64>> {
        embed(&self.q, ds)
    }

    pub fn predict(&self, ds: &WindowedDataset) -> Result<Vec<usize>> {
        predict(&self.q, &self.c, ds)
    }

    /// Mean training accuracy of C∘Q on `ds`.
    pub fn accuracy(&self, ds: &WindowedDataset) -> Result<f64> {
        let pred = self.predict(ds)?;
        Ok(pred.iter().zip(&ds.y).filter(|(a, b)| a == b).count() as f64 / ds.len().max(1) as f64)
    }

    /// Reconstruction loss of P∘Q on `ds` in inference mode.
    pub fn recon_error(&self, ds: &WindowedDataset) -> Result<f64> {
        let mut total = 0.0;
        for chunk in index_chunks(ds.len()) {
            let x = windows_to_act(ds, &chunk, self.model.n_w)?;
            let recon = self.p.infer(&self.q.infer(&x)?)?;
            total += recon_loss(&x, &recon, self.valid_len, Reduction::Mean)?.0 * chunk.len() as f64;
        }
        Ok(total / ds.len() as f64)
    }
}

const INFER_CHUNK: usize = 256;

fn index_chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(INFER_CHUNK).map(<[usize]>::to_vec).collect()
}

/// Feature maps of every window, in inference mode.
pub fn embed_features(q: &NetworkHandle, ds: &WindowedDataset) -> Result<Act> {
    let mut out: Option<Act> = None;
    for chunk in index_chunks(ds.len()) {
        let e = q.infer(&windows_to_act(ds, &chunk, q.config.n_w)?)?;
        out = Some(match out {
            Some(acc) => concat_rows(&acc, &e),
            None => e,
        });
    }
    out.ok_or_else(|| Error::Invalid("no windows to embed".into()))
}

/// Pooled embeddings `[n × latent]` of every window, in inference mode.
pub fn embed(q: &NetworkHandle, ds: &WindowedDataset) -> Result<Vec<f64>> {
    Ok(EmbeddingMap::new(embed_features(q, ds)?).pooled)
}

/// Predicted activity per window.
pub fn predict(q: &NetworkHandle, c: &NetworkHandle, ds: &WindowedDataset) -> Result<Vec<usize>> {
    let mut pred = Vec::with_capacity(ds.len());
    for chunk in index_chunks(ds.len()) {
        let logits = c.infer(&q.infer(&windows_to_act(ds, &chunk, q.config.n_w)?)?)?;
        pred.extend(crate::nets::argmax_rows(&logits));
    }
    Ok(pred)
}

/// Builds a fresh state for `config` and trains it to completion (or until
/// `opts` stops it).
pub fn run_variant(
    config: &TrainConfig,
    model_template: &ModelConfig,
    data: TrainData,
    opts: &TrainOptions,
) -> Result<TrainState> {
    let mut state = TrainState::new(config, model_template, data)?;
    state.train(data, opts)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_subjects, SynthSpec};

    fn data() -> (WindowedDataset, WindowedDataset) {
        let ds = synth_subjects(&SynthSpec::new(4, 3, 2, 16, 4, 7)).unwrap();
        let src: Vec<usize> = (0..ds.len()).filter(|&i| ds.s[i] != 4).collect();
        (ds.subset(&src), ds.subset(&ds.indices_of_subject(4)))
    }

    fn tiny() -> ModelConfig {
        let mut m = ModelConfig::new(0, 0, 0, 0).with_base_filters(2);
        m.hidden_units = 8;
        m
    }

    fn cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_size: 12,
            stage1: Budget::Iterations(3),
            stage2: Budget::Iterations(3),
            stage3: Budget::Iterations(3),
            lr_q: 1e-3,
            lr_c: 1e-3,
            lr_p: 1e-3,
            freeze_check_every: 1,
            variant,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn discriminator_classes() {
        let (src, tgt) = data();
        let data = TrainData { source: &src, target: Some(&tgt) };
        let st = TrainState::new(&cfg(Variant::Proposed), &tiny(), data).unwrap();
        assert_eq!(st.model.n_subjects_out, 4);
        let st = TrainState::new(&cfg(Variant::OnlySupervised), &tiny(), data).unwrap();
        assert_eq!(st.model.n_subjects_out, 3);
        let st = TrainState::new(&cfg(Variant::NoAdv), &tiny(), data).unwrap();
        assert!(st.d.is_none());
        let st = TrainState::new(&cfg(Variant::Proposed), &tiny(), TrainData { source: &src, target: None }).unwrap();
        assert_eq!(st.variant(), Variant::OnlySupervised);
        assert!(st.diagnostics.downgraded);
    }

    #[test]
    fn stage_budgets() {
        let (src, tgt) = data();
        let mut c = cfg(Variant::OneStage);
        c.stage1 = Budget::Epochs(2);
        let st = TrainState::new(&c, &tiny(), TrainData { source: &src, target: Some(&tgt) }).unwrap();
        assert_eq!(st.source_sampler.batches_per_epoch(), 3);
        assert_eq!(st.stage_iterations(Stage::Pretrain), 6);
        assert_eq!(st.stage_iterations(Stage::Joint), 12);
        assert_eq!(st.stages(), &[Stage::Joint]);
    }

    #[test]
    fn every_variant_trains_and_keeps_freezes() {
        let (src, tgt) = data();
        for v in Variant::ALL {
            let st = run_variant(&cfg(v), &tiny(), TrainData { source: &src, target: Some(&tgt) }, &TrainOptions::default())
                .unwrap();
            assert!(st.is_finished());
            let expected = if v == Variant::NoAdv { 6 } else { 9 };
            assert_eq!(st.history.len(), expected, "{v}");
            assert!(st.history.iter().all(|h| h.objective.is_finite()));
            if v == Variant::NoMmd {
                assert!(st.history.iter().all(|h| h.mmd == 0.0));
            }
        }
    }

    #[test]
    fn zero_stage_budget_only_advances_stage() {
        let (src, tgt) = data();
        let mut c = cfg(Variant::Proposed);
        c.stage1 = Budget::Iterations(0);
        let data = TrainData { source: &src, target: Some(&tgt) };
        let mut st = TrainState::new(&c, &tiny(), data).unwrap();
        let hashes: Vec<String> = st.networks().iter().map(|n| n.hash()).collect();
        let opts = TrainOptions {
            stop_before: Some(Stage::Supervised),
            ..TrainOptions::default()
        };
        assert_eq!(st.train(data, &opts).unwrap(), Outcome::Stopped);
        assert_eq!(st.current_stage(), Some(Stage::Supervised));
        assert_eq!(st.iteration, 0);
        assert_eq!(hashes, st.networks().iter().map(|n| n.hash()).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        let (src, tgt) = data();
        let run = || {
            let st = run_variant(
                &cfg(Variant::Proposed),
                &tiny(),
                TrainData { source: &src, target: Some(&tgt) },
                &TrainOptions::default(),
            )
            .unwrap();
            st.networks().iter().map(|n| n.hash()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
