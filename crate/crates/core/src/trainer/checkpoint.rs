//! Checkpoint directory:
//!
//! ```text
//! manifest.json          config, stage, iteration, samplers, RNG, last losses
//! <R>.params.bin/.json   network archives (R ∈ Q, P, C, D)
//! <R>.adam.bin           optimizer moments
//! loss_history.csv
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchSampler, Diagnostics, HistoryRow, Stage, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::nets::{decode_archive, encode_archive, load_network, save_network, ArchiveEntry, ModelConfig, Role};

use super::adam::AdamState;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const HISTORY_FILE: &str = "loss_history.csv";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub stage_index: usize,
    /// Stage that runs next; `None` once training is complete.
    pub stage: Option<Stage>,
    pub stage_iteration: u64,
    pub iteration: u64,
    pub metrics: Option<LossBreakdown>,
    pub rng: ChaCha8Rng,
    pub source_sampler: BatchSampler,
    pub target_sampler: Option<BatchSampler>,
    pub subject_map: Vec<(i32, usize)>,
    pub target_subjects: Vec<i32>,
    pub valid_len: usize,
    pub adam_steps: BTreeMap<Role, u64>,
    /// SHA-256 of each network's parameter archive.
    pub networks: BTreeMap<Role, String>,
    pub diagnostics: Diagnostics,
}

fn adam_path(dir: &Path, role: Role) -> std::path::PathBuf {
    dir.join(format!("{}.adam.bin", role.as_str()))
}

pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

impl TrainState {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rng_json = serde_json::to_value(&self.rng)?;
        let mut networks = BTreeMap::new();
        for net in self.networks() {
            let m = save_network(net, dir, Some(rng_json.clone()))?;
            networks.insert(net.role, m.sha256);
            let st = &self.adam[&net.role];
            let entries: Vec<ArchiveEntry> = net
                .params()
                .iter()
                .zip(st.m.iter().zip(&st.v))
                .flat_map(|(p, (m, v))| {
                    [
                        ArchiveEntry {
                            name: format!("{}.m", p.name),
                            shape: p.shape.clone(),
                            data: m.clone(),
                        },
                        ArchiveEntry {
                            name: format!("{}.v", p.name),
                            shape: p.shape.clone(),
                            data: v.clone(),
                        },
                    ]
                })
                .collect();
            let path = adam_path(dir, net.role);
            std::fs::write(&path, encode_archive(&entries)).map_err(|e| Error::io(&path, e))?;
        }
        for role in Role::ALL {
            if self.network(role).is_none() {
                for stale in [crate::nets::archive_path(dir, role), crate::nets::manifest_path(dir, role), adam_path(dir, role)] {
                    if stale.exists() {
                        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
                    }
                }
            }
        }
        write_history_csv(&self.history, &dir.join(HISTORY_FILE))?;
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            train_config: self.config.clone(),
            model_config: self.model.clone(),
            stage_index: self.stage_index,
            stage: self.current_stage(),
            stage_iteration: self.stage_iteration,
            iteration: self.iteration,
            metrics: self.history.last().map(HistoryRow::breakdown),
            rng: self.rng.clone(),
            source_sampler: self.source_sampler.clone(),
            target_sampler: self.target_sampler.clone(),
            subject_map: self.subject_map.iter().map(|(&k, &v)| (k, v)).collect(),
            target_subjects: self.target_subjects.clone(),
            valid_len: self.valid_len,
            adam_steps: self.adam.iter().map(|(&r, s)| (r, s.t)).collect(),
            networks,
            diagnostics: self.diagnostics.clone(),
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a state saved by [`TrainState::save_checkpoint`]; training
    /// continues exactly where it stopped.
    pub fn resume(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint format {}", m.format_version)));
        }
        m.train_config.validate()?;
        let mut nets = BTreeMap::new();
        let mut adam = BTreeMap::new();
        for (&role, sha) in &m.networks {
            let (net, nm) = load_network(dir, role)?;
            if &nm.sha256 != sha || nm.config != m.model_config {
                return Err(Error::Invalid(format!("{} archive does not belong to this checkpoint", role.as_str())));
            }
            let apath = adam_path(dir, role);
            let abytes = std::fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
            let mut entries: BTreeMap<String, ArchiveEntry> =
                decode_archive(&abytes)?.into_iter().map(|e| (e.name.clone(), e)).collect();
            let mut st = AdamState::for_network(&net);
            for (i, p) in net.params().iter().enumerate() {
                for (suffix, slot) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let e = entries
                        .remove(&format!("{}.{suffix}", p.name))
                        .ok_or_else(|| Error::Invalid(format!("{} lacks moments for {}", apath.display(), p.name)))?;
                    if e.shape != p.shape {
                        return Err(Error::shape(format!("{}.{suffix}", p.name), format!("{:?}", p.shape), format!("{:?}", e.shape)));
                    }
                    *slot = e.data;
                }
            }
            st.t = m.adam_steps.get(&role).copied().unwrap_or(0);
            adam.insert(role, st);
            nets.insert(role, net);
        }
        let mut take = |role: Role| {
            nets.remove(&role)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks network {}", role.as_str())))
        };
        let (q, p, c) = (take(Role::Q)?, take(Role::P)?, take(Role::C)?);
        let d = nets.remove(&Role::D);
        if d.is_some() != m.train_config.variant.has_discriminator() {
            return Err(Error::Invalid("discriminator presence does not match the variant".into()));
        }
        let history = read_history_csv(&dir.join(HISTORY_FILE))?;
        if history.len() as u64 != m.iteration {
            return Err(Error::Invalid(format!(
                "loss history has {} rows for iteration {}",
                history.len(),
                m.iteration
            )));
        }
        Ok(Self {
            config: m.train_config,
            model: m.model_config,
            q,
            p,
            c,
            d,
            adam,
            stage_index: m.stage_index,
            stage_iteration: m.stage_iteration,
            iteration: m.iteration,
            rng: m.rng,
            source_sampler: m.source_sampler,
            target_sampler: m.target_sampler,
            subject_map: m.subject_map.into_iter().collect(),
            target_subjects: m.target_subjects,
            valid_len: m.valid_len,
            history,
            diagnostics: m.diagnostics,
            frozen_reference: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::datapipe::{synth_subjects, SynthSpec};

    #[test]
    fn resume_continues_exactly() {
        let ds = synth_subjects(&SynthSpec::new(3, 2, 2, 16, 3, 1)).unwrap();
        let src_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.s[i] != 3).collect();
        let src = ds.subset(&src_idx);
        let tgt = ds.subset(&ds.indices_of_subject(3));
        let data = TrainData { source: &src, target: Some(&tgt) };
        let mut model = ModelConfig::new(0, 0, 0, 0).with_base_filters(2);
        model.hidden_units = 4;
        let cfg = TrainConfig {
            batch_size: 4,
            stage1: Budget::Iterations(2),
            stage2: Budget::Iterations(3),
            stage3: Budget::Iterations(3),
            ..TrainConfig::default()
        };
        let straight = run_variant(&cfg, &model, data, &TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(4),
            ..TrainOptions::default()
        };
        let stopped = run_variant(&cfg, &model, data, &opts).unwrap();
        assert_eq!(stopped.iteration, 4);
        let mut resumed = TrainState::resume(dir.path()).unwrap();
        assert_eq!(resumed.iteration, 4);
        assert_eq!(resumed.current_stage(), Some(Stage::Supervised));
        resumed.train(data, &TrainOptions::default()).unwrap();
        assert_eq!(resumed.iteration, straight.iteration);
        for role in Role::ALL {
            assert_eq!(resumed.network(role).map(|n| n.hash()), straight.network(role).map(|n| n.hash()));
        }
        assert_eq!(resumed.history, straight.history);
    }
}
