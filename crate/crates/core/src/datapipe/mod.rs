//! Raw sensor recordings to windowed, labeled datasets.
//!
//! ```text
//! *.dat / *.log / *.txt
//!   │
//!   ├─ loaders            dataset-specific column selection and label maps
//!   ├─ interpolate        linear gap filling, edge-hold at the ends
//!   ├─ normalize          fixed min/max, per-user z-score, or endpoint baseline
//!   ├─ slide_windows      fixed window/step, majority label
//!   └─ container          "HARW" little-endian binary file
//! ```

mod container;
mod filter;
mod loaders;
mod preprocess;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{decode_container, encode_container, read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use filter::{bandpass_and_resample, butterworth_bandpass_sos, filtfilt, resample_linear, Biquad};
pub use loaders::{
    load_mhealth, load_mocapaci, load_opportunity, load_pamap2, load_recipe, MinMaxTable,
    OPPORTUNITY_CHANNELS, PAMAP2_CHANNELS,
};
pub use preprocess::{
    interpolate_missing, normalize_minmax, normalize_zscore_per_user, slide_windows,
    window_count,
};
pub use synth::{synth_subjects, SynthSpec};

/// Continuous multichannel recording of one subject, before windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    /// Row-major `[time × channels]`; missing values are NaN.
    pub samples: Vec<f64>,
    pub n_channels: usize,
    pub sample_rate: f64,
    /// Activity label per time step, already mapped to `0..n_a`.
    pub activity: Vec<usize>,
    pub subject_id: i32,
}

impl RawRecording {
    pub fn new(
        samples: Vec<f64>,
        n_channels: usize,
        sample_rate: f64,
        activity: Vec<usize>,
        subject_id: i32,
    ) -> Result<Self> {
        let rec = Self {
            samples,
            n_channels,
            sample_rate,
            activity,
            subject_id,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Invalid("recording has no channels".into()));
        }
        if self.samples.len() % self.n_channels != 0 {
            return Err(Error::shape(
                "recording samples",
                format!("multiple of {} channels", self.n_channels),
                self.samples.len(),
            ));
        }
        if self.len() != self.activity.len() {
            return Err(Error::shape("recording labels", self.len(), self.activity.len()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Invalid(format!("sample rate {} must be positive", self.sample_rate)));
        }
        Ok(())
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.samples.len() / self.n_channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().skip(c).step_by(self.n_channels).copied().collect()
    }

    pub fn set_channel(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.len());
        for (t, v) in values.iter().enumerate() {
            self.samples[t * self.n_channels + c] = *v;
        }
    }
}

/// Windows `X [n × n_c × n_w]` with activity labels `Y` and subject labels `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub s: Vec<i32>,
    pub n_c: usize,
    pub n_w: usize,
    pub n_a: usize,
    /// Distinct subject ids, ascending.
    pub subject_ids: Vec<i32>,
}

impl WindowedDataset {
    pub fn empty(n_c: usize, n_w: usize, n_a: usize) -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            s: Vec::new(),
            n_c,
            n_w,
            n_a,
            subject_ids: Vec::new(),
        }
    }

    /// Builds a dataset and derives `subject_ids` from `s`.
    pub fn from_parts(x: Vec<f32>, y: Vec<usize>, s: Vec<i32>, n_c: usize, n_w: usize, n_a: usize) -> Result<Self> {
        let mut subject_ids: Vec<i32> = s.clone();
        subject_ids.sort_unstable();
        subject_ids.dedup();
        let ds = Self {
            x,
            y,
            s,
            n_c,
            n_w,
            n_a,
            subject_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.s.len() != n {
            return Err(Error::shape("dataset subject labels", n, self.s.len()));
        }
        if self.x.len() != n * self.n_c * self.n_w {
            return Err(Error::shape(
                "dataset windows",
                n * self.n_c * self.n_w,
                self.x.len(),
            ));
        }
        if let Some(&bad) = self.y.iter().find(|&&y| y >= self.n_a) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.n_a,
            });
        }
        if let Some(bad) = self.s.iter().find(|s| self.subject_ids.binary_search(s).is_err()) {
            return Err(Error::Invalid(format!("subject {bad} missing from subject_ids")));
        }
        if self.subject_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("subject_ids must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.n_c * self.n_w
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let w = self.window_len();
        &self.x[i * w..(i + 1) * w]
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let w = self.window_len();
        let mut x = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            x.extend_from_slice(self.window(i));
        }
        let s: Vec<i32> = indices.iter().map(|&i| self.s[i]).collect();
        let mut subject_ids = s.clone();
        subject_ids.sort_unstable();
        subject_ids.dedup();
        Self {
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            s,
            n_c: self.n_c,
            n_w: self.n_w,
            n_a: self.n_a,
            subject_ids,
        }
    }

    pub fn indices_of_subject(&self, subject: i32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.s[i] == subject).collect()
    }

    /// Appends `other`; both must share the window geometry.
    pub fn extend(&mut self, other: &WindowedDataset) -> Result<()> {
        if other.n_c != self.n_c || other.n_w != self.n_w || other.n_a != self.n_a {
            return Err(Error::shape(
                "dataset concat",
                format!("{}x{} / {} classes", self.n_c, self.n_w, self.n_a),
                format!("{}x{} / {} classes", other.n_c, other.n_w, other.n_a),
            ));
        }
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
        self.s.extend_from_slice(&other.s);
        for id in &other.subject_ids {
            if let Err(pos) = self.subject_ids.binary_search(id) {
                self.subject_ids.insert(pos, *id);
            }
        }
        Ok(())
    }

    pub fn subject_histogram(&self) -> BTreeMap<i32, usize> {
        let mut h = BTreeMap::new();
        for &s in &self.s {
            *h.entry(s).or_insert(0) += 1;
        }
        h
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_a];
        for &y in &self.y {
            h[y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Opportunity,
    Pamap2,
    Mhealth,
    Mocapaci,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MinmaxFixed,
    ZscorePerUser,
    GestureEndpoint,
    None,
}

/// Opportunity annotation track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelTrack {
    #[default]
    Locomotion,
    Gestures,
}

/// How a dataset is turned into windows; stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub name: DatasetName,
    pub window_size: usize,
    pub step: usize,
    /// Raw column indices; empty means the loader's default selection.
    #[serde(default)]
    pub channel_selection: Vec<usize>,
    pub normalization: Normalization,
    /// Raw activity codes to keep; empty keeps everything the loader maps.
    #[serde(default)]
    pub activity_filter: Vec<i64>,
    /// Subjects to keep; empty keeps all.
    #[serde(default)]
    pub subject_filter: Vec<i32>,
    #[serde(default)]
    pub label_track: LabelTrack,
    /// Drop the null class (Opportunity only; MHEALTH and PAMAP2 always drop it).
    #[serde(default)]
    pub drop_null: bool,
    /// Override for the Opportunity min/max table.
    #[serde(default)]
    pub minmax_table: Option<std::path::PathBuf>,
    /// Parameters for `name = synthetic`.
    #[serde(default)]
    pub synthetic: Option<SynthSpec>,
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 || self.step > self.window_size {
            return Err(Error::Config(format!(
                "recipe needs 0 < step <= window_size, got step {} window {}",
                self.step, self.window_size
            )));
        }
        let mut seen = self.channel_selection.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("channel_selection indices must be distinct".into()));
        }
        if self.name == DatasetName::Synthetic && self.synthetic.is_none() {
            return Err(Error::Config("synthetic recipe needs a `synthetic` block".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recipe: Self = serde_json::from_str(&text)?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn opportunity(track: LabelTrack) -> Self {
        Self {
            name: DatasetName::Opportunity,
            window_size: 64,
            step: 16,
            channel_selection: Vec::new(),
            normalization: Normalization::MinmaxFixed,
            activity_filter: Vec::new(),
            subject_filter: Vec::new(),
            label_track: track,
            drop_null: false,
            minmax_table: None,
            synthetic: None,
        }
    }

    pub fn pamap2() -> Self {
        Self {
            name: DatasetName::Pamap2,
            window_size: 200,
            step: 50,
            channel_selection: Vec::new(),
            normalization: Normalization::ZscorePerUser,
            activity_filter: Vec::new(),
            subject_filter: (1..=8).collect(),
            label_track: LabelTrack::Locomotion,
            drop_null: true,
            minmax_table: None,
            synthetic: None,
        }
    }

    pub fn mhealth() -> Self {
        Self {
            name: DatasetName::Mhealth,
            window_size: 200,
            step: 50,
            channel_selection: Vec::new(),
            normalization: Normalization::ZscorePerUser,
            activity_filter: Vec::new(),
            subject_filter: Vec::new(),
            label_track: LabelTrack::Locomotion,
            drop_null: true,
            minmax_table: None,
            synthetic: None,
        }
    }

    pub fn mocapaci() -> Self {
        Self {
            name: DatasetName::Mocapaci,
            window_size: 400,
            step: 400,
            channel_selection: Vec::new(),
            normalization: Normalization::GestureEndpoint,
            activity_filter: Vec::new(),
            subject_filter: Vec::new(),
            label_track: LabelTrack::Locomotion,
            drop_null: true,
            minmax_table: None,
            synthetic: None,
        }
    }

    pub fn synthetic(spec: SynthSpec) -> Self {
        Self {
            name: DatasetName::Synthetic,
            window_size: spec.window,
            step: spec.window,
            channel_selection: Vec::new(),
            normalization: Normalization::None,
            activity_filter: Vec::new(),
            subject_filter: Vec::new(),
            label_track: LabelTrack::Locomotion,
            drop_null: false,
            minmax_table: None,
            synthetic: Some(spec),
        }
    }
}
