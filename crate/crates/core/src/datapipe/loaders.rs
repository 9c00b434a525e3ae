//! Readers for the published plain-text layouts of the four benchmark
//! datasets. All produce windows ordered by subject id, then time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::{interpolate_missing, normalize_minmax, normalize_zscore_per_user, slide_windows};
use super::filter::bandpass_and_resample;
use super::synth::synth_subjects;
use super::{DatasetName, DatasetRecipe, LabelTrack, Normalization, RawRecording, WindowedDataset};
use crate::error::{Error, Result};

/// Body-worn channels of the Opportunity `.dat` files (0-based columns):
/// columns 1..=133 without the quaternion blocks of the five IMUs.
pub const OPPORTUNITY_CHANNELS: usize = 113;
const OPPORTUNITY_COLUMNS: usize = 250;
const OPPORTUNITY_RATE: f64 = 30.0;
const OPPORTUNITY_LOCOMOTION_COL: usize = 243;
const OPPORTUNITY_GESTURE_COL: usize = 249;
const OPPORTUNITY_LOCOMOTION_CODES: [i64; 5] = [0, 1, 2, 4, 5];
const OPPORTUNITY_GESTURE_CODES: [i64; 18] = [
    0, 406516, 406517, 404516, 404517, 406520, 404520, 406505, 404505, 406519, 404519, 406511,
    404511, 406508, 404508, 408512, 407521, 405506,
];
const DEFAULT_MINMAX: &str = include_str!("../../configs/opportunity_minmax.json");

pub const PAMAP2_CHANNELS: usize = 36;
const PAMAP2_COLUMNS: usize = 54;
const PAMAP2_RATE: f64 = 100.0;
const PAMAP2_PROTOCOL_CODES: [i64; 12] = [1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24];

const MHEALTH_COLUMNS: usize = 24;
const MHEALTH_RATE: f64 = 50.0;

const MOCAPACI_CHANNELS: usize = 4;
const MOCAPACI_RATE: f64 = 100.0;
const MOCAPACI_LEN: usize = 400;

fn opportunity_default_channels() -> Vec<usize> {
    let quaternions = [46..50, 59..63, 72..76, 85..89, 98..102];
    (1..134)
        .filter(|c| !quaternions.iter().any(|r| r.contains(c)))
        .collect()
}

fn pamap2_default_channels() -> Vec<usize> {
    // per IMU block starting at b: temperature b, acc16 b+1..b+4, acc6, gyro,
    // magnetometer up to b+13, orientation b+13..b+17
    [3usize, 20, 37]
        .iter()
        .flat_map(|&b| b + 1..b + 13)
        .collect()
}

/// Fixed per-channel bounds for min/max normalization. `None` bounds are
/// derived from the loaded recordings themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxTable {
    pub provenance: String,
    pub mins: Option<Vec<f64>>,
    pub maxs: Option<Vec<f64>>,
}

impl MinMaxTable {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            }
            None => Ok(serde_json::from_str(DEFAULT_MINMAX)?),
        }
    }

    fn resolve(&self, recs: &[RawRecording]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_c = recs.first().map(|r| r.n_channels).unwrap_or(0);
        let (mins, maxs) = match (&self.mins, &self.maxs) {
            (Some(mins), Some(maxs)) => (mins.clone(), maxs.clone()),
            _ => {
                let mut mins = vec![f64::INFINITY; n_c];
                let mut maxs = vec![f64::NEG_INFINITY; n_c];
                for rec in recs {
                    for (i, v) in rec.samples.iter().enumerate() {
                        let c = i % n_c;
                        mins[c] = mins[c].min(*v);
                        maxs[c] = maxs[c].max(*v);
                    }
                }
                for c in 0..n_c {
                    if !(maxs[c] > mins[c]) {
                        // flat channel: any positive span maps it to 0
                        maxs[c] = mins[c] + 1.0;
                    }
                }
                (mins, maxs)
            }
        };
        if mins.len() != n_c || maxs.len() != n_c {
            return Err(Error::shape("min/max table", n_c, format!("{} / {}", mins.len(), maxs.len())));
        }
        Ok((mins, maxs))
    }
}

/// Whitespace-separated numeric table with a fixed column count.
fn read_table(path: &Path, columns: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != columns {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected {columns} columns, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file holds no samples".into(),
        });
    }
    Ok(rows)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file")))
    }
}

/// Keeps rows whose raw label is in `codes`, mapping it to its index there,
/// and collects the selected channels into a recording.
fn to_recording(
    rows: &[Vec<f64>],
    channels: &[usize],
    label_col: usize,
    codes: &[i64],
    rate: f64,
    subject: i32,
) -> Result<RawRecording> {
    let mut samples = Vec::with_capacity(rows.len() * channels.len());
    let mut activity = Vec::with_capacity(rows.len());
    for row in rows {
        let code = row[label_col];
        let Some(label) = codes.iter().position(|&c| code.is_finite() && c as f64 == code) else {
            continue;
        };
        samples.extend(channels.iter().map(|&c| row[c]));
        activity.push(label);
    }
    RawRecording::new(samples, channels.len(), rate, activity, subject)
}

fn check_selection(recipe: &DatasetRecipe, default: Vec<usize>, expected: Option<usize>, columns: usize) -> Result<Vec<usize>> {
    let selection = if recipe.channel_selection.is_empty() {
        default
    } else {
        recipe.channel_selection.clone()
    };
    if let Some(n) = expected {
        if selection.len() != n {
            return Err(Error::Config(format!(
                "channel_selection must list {n} channels, found {}",
                selection.len()
            )));
        }
    }
    if let Some(&bad) = selection.iter().find(|&&c| c >= columns) {
        return Err(Error::Config(format!("channel {bad} out of range for {columns} columns")));
    }
    Ok(selection)
}

fn keep_subject(recipe: &DatasetRecipe, subject: i32) -> bool {
    recipe.subject_filter.is_empty() || recipe.subject_filter.contains(&subject)
}

fn keep_codes(recipe: &DatasetRecipe, codes: &[i64]) -> Vec<i64> {
    if recipe.activity_filter.is_empty() {
        codes.to_vec()
    } else {
        codes.iter().copied().filter(|c| recipe.activity_filter.contains(c)).collect()
    }
}

fn normalize(recipe: &DatasetRecipe, rec: RawRecording) -> Result<RawRecording> {
    match recipe.normalization {
        Normalization::ZscorePerUser => normalize_zscore_per_user(&rec),
        Normalization::None | Normalization::MinmaxFixed | Normalization::GestureEndpoint => Ok(rec),
    }
}

fn window_all(recs: &[RawRecording], recipe: &DatasetRecipe, n_a: usize, n_c: usize) -> Result<WindowedDataset> {
    let mut ds = WindowedDataset::empty(n_c, recipe.window_size, n_a);
    for rec in recs {
        ds.extend(&slide_windows(rec, recipe, n_a)?)?;
    }
    Ok(ds)
}

/// Opportunity: four subjects, five ADL runs and one drill run each, 30 Hz,
/// 113 body-worn channels, locomotion or gesture labels (null included unless
/// `drop_null`).
pub fn load_opportunity(root: &Path, recipe: &DatasetRecipe) -> Result<WindowedDataset> {
    recipe.validate()?;
    let channels = check_selection(recipe, opportunity_default_channels(), Some(OPPORTUNITY_CHANNELS), OPPORTUNITY_COLUMNS)?;
    let (label_col, all_codes): (usize, &[i64]) = match recipe.label_track {
        LabelTrack::Locomotion => (OPPORTUNITY_LOCOMOTION_COL, &OPPORTUNITY_LOCOMOTION_CODES),
        LabelTrack::Gestures => (OPPORTUNITY_GESTURE_COL, &OPPORTUNITY_GESTURE_CODES),
    };
    let mut codes = keep_codes(recipe, all_codes);
    if recipe.drop_null {
        codes.retain(|&c| c != 0);
    }
    let runs = ["ADL1", "ADL2", "ADL3", "ADL4", "ADL5", "Drill"];
    let mut recs = Vec::new();
    for subject in 1..=4 {
        if !keep_subject(recipe, subject) {
            continue;
        }
        for run in runs {
            let path = require(root.join(format!("S{subject}-{run}.dat")))?;
            let rows = read_table(&path, OPPORTUNITY_COLUMNS)?;
            let rec = to_recording(&rows, &channels, label_col, &codes, OPPORTUNITY_RATE, subject)?;
            recs.push(interpolate_missing(&rec)?);
        }
    }
    if recipe.normalization == Normalization::MinmaxFixed {
        let table = MinMaxTable::load(recipe.minmax_table.as_deref())?;
        let (mins, maxs) = table.resolve(&recs)?;
        recs = recs
            .iter()
            .map(|r| normalize_minmax(r, &mins, &maxs))
            .collect::<Result<_>>()?;
    } else {
        recs = recs.into_iter().map(|r| normalize(recipe, r)).collect::<Result<_>>()?;
    }
    window_all(&recs, recipe, codes.len(), OPPORTUNITY_CHANNELS)
}

fn pamap2_path(root: &Path, subject: i32) -> Result<PathBuf> {
    let name = format!("subject{}.dat", 100 + subject);
    let nested = root.join("Protocol").join(&name);
    if nested.is_file() {
        Ok(nested)
    } else {
        require(root.join(name))
    }
}

/// PAMAP2 protocol recordings: subjects 1..=8 by default (subject 9 performs a
/// single activity), twelve protocol activities, 36 IMU channels at 100 Hz.
pub fn load_pamap2(root: &Path, recipe: &DatasetRecipe) -> Result<WindowedDataset> {
    recipe.validate()?;
    let channels = check_selection(recipe, pamap2_default_channels(), None, PAMAP2_COLUMNS)?;
    let codes = keep_codes(recipe, &PAMAP2_PROTOCOL_CODES);
    let mut recs = Vec::new();
    for subject in 1..=9 {
        if !keep_subject(recipe, subject) {
            continue;
        }
        let rows = read_table(&pamap2_path(root, subject)?, PAMAP2_COLUMNS)?;
        let rec = to_recording(&rows, &channels, 1, &codes, PAMAP2_RATE, subject)?;
        if rec.is_empty() {
            log::warn!("PAMAP2 subject {subject} has no protocol samples");
            continue;
        }
        recs.push(normalize(recipe, interpolate_missing(&rec)?)?);
    }
    window_all(&recs, recipe, codes.len(), channels.len())
}

/// MHEALTH: ten subjects at 50 Hz, 23 channels, twelve activities; the null
/// label 0 is dropped.
pub fn load_mhealth(root: &Path, recipe: &DatasetRecipe) -> Result<WindowedDataset> {
    recipe.validate()?;
    let channels = check_selection(recipe, (0..23).collect(), None, MHEALTH_COLUMNS)?;
    let codes = keep_codes(recipe, &(1..=12).collect::<Vec<i64>>());
    let mut recs = Vec::new();
    for subject in 1..=10 {
        if !keep_subject(recipe, subject) {
            continue;
        }
        let path = require(root.join(format!("mHealth_subject{subject}.log")))?;
        let rows = read_table(&path, MHEALTH_COLUMNS)?;
        let rec = to_recording(&rows, &channels, 23, &codes, MHEALTH_RATE, subject)?;
        recs.push(normalize(recipe, interpolate_missing(&rec)?)?);
    }
    window_all(&recs, recipe, codes.len(), channels.len())
}

/// MoCapaci gesture instances. Every `*.txt` file under `root` holds rows of
/// `subject gesture instance c1 c2 c3 c4` at 100 Hz; consecutive rows sharing
/// `(subject, gesture, instance)` form one instance, which becomes exactly one
/// 400-sample window after band-pass, endpoint baseline and resampling.
pub fn load_mocapaci(root: &Path, recipe: &DatasetRecipe) -> Result<WindowedDataset> {
    recipe.validate()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "no MoCapaci *.txt files")));
    }
    // (subject, gesture, instance) -> rows of channel values
    let mut instances: Vec<((i32, i64, i64), Vec<f64>)> = Vec::new();
    for path in &files {
        for row in read_table(path, 3 + MOCAPACI_CHANNELS)? {
            let key = (row[0] as i32, row[1] as i64, row[2] as i64);
            match instances.last_mut() {
                Some((k, values)) if *k == key => values.extend_from_slice(&row[3..]),
                _ => instances.push((key, row[3..].to_vec())),
            }
        }
    }
    instances.retain(|((s, g, _), _)| {
        keep_subject(recipe, *s) && (recipe.activity_filter.is_empty() || recipe.activity_filter.contains(g))
    });
    let mut gestures: Vec<i64> = instances.iter().map(|((_, g, _), _)| *g).collect();
    gestures.sort_unstable();
    gestures.dedup();
    instances.sort_by_key(|(k, _)| *k);

    let n_a = gestures.len();
    let mut ds = WindowedDataset::empty(MOCAPACI_CHANNELS, MOCAPACI_LEN, n_a);
    for ((subject, gesture, _), values) in instances {
        let label = gestures.binary_search(&gesture).unwrap();
        let len = values.len() / MOCAPACI_CHANNELS;
        let rec = RawRecording::new(values, MOCAPACI_CHANNELS, MOCAPACI_RATE, vec![label; len], subject)?;
        let rec = interpolate_missing(&rec)?;
        let rec = if recipe.normalization == Normalization::GestureEndpoint {
            bandpass_and_resample(&rec, 1.0, 10.0, 4, MOCAPACI_LEN)?
        } else {
            normalize(recipe, rec)?
        };
        let x: Vec<f32> = (0..MOCAPACI_CHANNELS)
            .flat_map(|c| rec.channel(c))
            .map(|v| v as f32)
            .collect();
        if x.len() != MOCAPACI_CHANNELS * MOCAPACI_LEN {
            return Err(Error::shape("MoCapaci instance", MOCAPACI_LEN, rec.len()));
        }
        ds.extend(&WindowedDataset::from_parts(x, vec![label], vec![subject], MOCAPACI_CHANNELS, MOCAPACI_LEN, n_a)?)?;
    }
    let counts = ds.class_histogram();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        log::warn!("MoCapaci gesture counts are not balanced: {counts:?}");
    }
    Ok(ds)
}

/// Dispatches on `recipe.name`.
pub fn load_recipe(recipe: &DatasetRecipe, root: Option<&Path>) -> Result<WindowedDataset> {
    recipe.validate()?;
    if recipe.name == DatasetName::Synthetic {
        return synth_subjects(recipe.synthetic.as_ref().expect("validated"));
    }
    let root = root.ok_or_else(|| Error::Config("a raw data root is required for this recipe".into()))?;
    match recipe.name {
        DatasetName::Opportunity => load_opportunity(root, recipe),
        DatasetName::Pamap2 => load_pamap2(root, recipe),
        DatasetName::Mhealth => load_mhealth(root, recipe),
        DatasetName::Mocapaci => load_mocapaci(root, recipe),
        DatasetName::Synthetic => unreachable!(),
    }
}
