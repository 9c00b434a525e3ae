use super::{DatasetRecipe, RawRecording, WindowedDataset};
use crate::error::{Error, Result};

/// Fills non-finite samples by linear interpolation between the nearest
/// finite neighbours; leading and trailing gaps hold the nearest finite value.
pub fn interpolate_missing(rec: &RawRecording) -> Result<RawRecording> {
    let mut out = rec.clone();
    for c in 0..rec.n_channels {
        let mut channel = rec.channel(c);
        fill_gaps(&mut channel).ok_or(Error::MissingChannel { channel: c })?;
        out.set_channel(c, &channel);
    }
    Ok(out)
}

/// Returns `None` when the series has no finite value at all.
fn fill_gaps(values: &mut [f64]) -> Option<()> {
    let first = values.iter().position(|v| v.is_finite())?;
    let first_value = values[first];
    for v in &mut values[..first] {
        *v = first_value;
    }
    let mut last_finite = first;
    for t in first + 1..values.len() {
        if !values[t].is_finite() {
            continue;
        }
        let gap = t - last_finite;
        if gap > 1 {
            let (a, b) = (values[last_finite], values[t]);
            for k in 1..gap {
                values[last_finite + k] = a + (b - a) * k as f64 / gap as f64;
            }
        }
        last_finite = t;
    }
    let tail = values[last_finite];
    for v in &mut values[last_finite + 1..] {
        *v = tail;
    }
    Some(())
}

/// Maps each channel to `[0, 1]` through fixed bounds, clamping outliers.
pub fn normalize_minmax(rec: &RawRecording, mins: &[f64], maxs: &[f64]) -> Result<RawRecording> {
    if mins.len() != rec.n_channels || maxs.len() != rec.n_channels {
        return Err(Error::shape(
            "min/max table",
            rec.n_channels,
            format!("{} mins, {} maxs", mins.len(), maxs.len()),
        ));
    }
    if let Some(c) = (0..rec.n_channels).find(|&c| !(maxs[c] > mins[c])) {
        return Err(Error::Invalid(format!(
            "channel {c}: max {} must exceed min {}",
            maxs[c], mins[c]
        )));
    }
    let mut out = rec.clone();
    for (i, v) in out.samples.iter_mut().enumerate() {
        let c = i % rec.n_channels;
        *v = ((*v - mins[c]) / (maxs[c] - mins[c])).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Zero mean, unit population standard deviation per channel. A recording
/// holds one subject, so this is the per-user normalization.
pub fn normalize_zscore_per_user(rec: &RawRecording) -> Result<RawRecording> {
    let mut out = rec.clone();
    let n = rec.len() as f64;
    for c in 0..rec.n_channels {
        let channel = rec.channel(c);
        let mean = channel.iter().sum::<f64>() / n;
        let var = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::ZeroVariance { channel: c });
        }
        let std = var.sqrt();
        let normed: Vec<f64> = channel.iter().map(|v| (v - mean) / std).collect();
        out.set_channel(c, &normed);
    }
    Ok(out)
}

/// `floor((len - window) / step) + 1`, or zero when the series is too short.
pub fn window_count(len: usize, window: usize, step: usize) -> usize {
    if len < window || step == 0 {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Majority label; ties go to the tied label seen latest in the window.
fn majority_label(labels: &[usize]) -> usize {
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    let mut last_seen = vec![0usize; max_label + 1];
    for (t, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        last_seen[l] = t;
    }
    (0..=max_label)
        .filter(|&l| counts[l] > 0)
        .max_by_key(|&l| (counts[l], last_seen[l]))
        .unwrap_or(0)
}

/// Segments a recording into `[n_c × window]` windows.
///
/// Window `i` covers samples `[i·step, i·step + window)`. Recordings shorter
/// than one window produce an empty dataset and a warning.
pub fn slide_windows(rec: &RawRecording, recipe: &DatasetRecipe, n_a: usize) -> Result<WindowedDataset> {
    recipe.validate()?;
    let (window, step) = (recipe.window_size, recipe.step);
    let count = window_count(rec.len(), window, step);
    let n_c = rec.n_channels;
    if count == 0 {
        log::warn!(
            "subject {}: recording of {} samples is shorter than one {}-sample window",
            rec.subject_id,
            rec.len(),
            window
        );
        return Ok(WindowedDataset::empty(n_c, window, n_a));
    }
    let mut x = Vec::with_capacity(count * n_c * window);
    let mut y = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * step;
        for c in 0..n_c {
            x.extend((start..start + window).map(|t| rec.samples[t * n_c + c] as f32));
        }
        y.push(majority_label(&rec.activity[start..start + window]));
    }
    WindowedDataset::from_parts(x, y, vec![rec.subject_id; count], n_c, window, n_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_channel(values: Vec<f64>) -> RawRecording {
        let n = values.len();
        RawRecording::new(values, 1, 100.0, vec![0; n], 1).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let nan = f64::NAN;
        let r = interpolate_missing(&one_channel(vec![1.0, nan, 3.0])).unwrap();
        assert_eq!(r.samples, vec![1.0, 2.0, 3.0]);
        let r = interpolate_missing(&one_channel(vec![nan, 5.0, 5.0])).unwrap();
        assert_eq!(r.samples, vec![5.0, 5.0, 5.0]);
        let r = interpolate_missing(&one_channel(vec![0.0, nan, nan, 6.0])).unwrap();
        assert_eq!(r.samples, vec![0.0, 2.0, 4.0, 6.0]);
        let r = interpolate_missing(&one_channel(vec![2.0, nan, nan])).unwrap();
        assert_eq!(r.samples, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn interpolation_names_missing_channel() {
        let rec = RawRecording::new(vec![1.0, f64::NAN, 2.0, f64::NAN], 2, 10.0, vec![0, 0], 1).unwrap();
        match interpolate_missing(&rec) {
            Err(Error::MissingChannel { channel }) => assert_eq!(channel, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn minmax_examples() {
        let rec = one_channel(vec![-2.0, 2.0, -12.0, 1.0, 9.0]);
        let r = normalize_minmax(&rec, &[-2.0], &[2.0]).unwrap();
        assert_eq!(r.samples, vec![0.0, 1.0, 0.0, 0.75, 1.0]);
        assert!(normalize_minmax(&rec, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn zscore_examples() {
        let r = normalize_zscore_per_user(&one_channel(vec![0.0, 2.0])).unwrap();
        assert_eq!(r.samples, vec![-1.0, 1.0]);
        let r = normalize_zscore_per_user(&one_channel(vec![1.0, 2.0, 3.0])).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(r.samples[0], -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(r.samples[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.samples[2], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 1.2247, epsilon = 1e-4);
        assert!(matches!(
            normalize_zscore_per_user(&one_channel(vec![4.0; 5])),
            Err(Error::ZeroVariance { channel: 0 })
        ));
    }

    #[test]
    fn majority_rule() {
        assert_eq!(majority_label(&[0, 0, 1, 1, 1]), 1);
        assert_eq!(majority_label(&[2, 2, 1, 1]), 1);
        assert_eq!(majority_label(&[1, 1, 2, 2]), 2);
        assert_eq!(majority_label(&[3, 3, 3, 0]), 3);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(1000, 200, 50), 17);
        assert_eq!(window_count(64, 64, 16), 1);
        assert_eq!(window_count(63, 64, 16), 0);
    }

    #[test]
    fn slide_windows_layout_and_labels() {
        // two channels, channel 1 = 10·t
        let t = 10;
        let samples: Vec<f64> = (0..t).flat_map(|i| [i as f64, 10.0 * i as f64]).collect();
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 2, 2];
        let rec = RawRecording::new(samples, 2, 50.0, labels, 4).unwrap();
        let mut recipe = DatasetRecipe::mhealth();
        recipe.window_size = 5;
        recipe.step = 3;
        let ds = slide_windows(&rec, &recipe, 3).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.window(1), &[3.0, 4.0, 5.0, 6.0, 7.0, 30.0, 40.0, 50.0, 60.0, 70.0]);
        assert_eq!(ds.y, vec![0, 1]);
        assert_eq!(ds.s, vec![4, 4]);
    }

    #[test]
    fn short_recording_gives_empty_dataset() {
        let rec = one_channel(vec![0.0; 10]);
        let mut recipe = DatasetRecipe::mhealth();
        recipe.window_size = 20;
        recipe.step = 5;
        let ds = slide_windows(&rec, &recipe, 2).unwrap();
        assert!(ds.is_empty());
    }

    proptest! {
        #[test]
        fn slide_count_formula(t in 1usize..2000, window in 1usize..300, step_frac in 0.0f64..1.0) {
            let step = ((window as f64 * step_frac).floor() as usize).clamp(1, window);
            prop_assume!(t >= window);
            let rec = one_channel((0..t).map(|i| i as f64).collect());
            let mut recipe = DatasetRecipe::mhealth();
            recipe.window_size = window;
            recipe.step = step;
            let ds = slide_windows(&rec, &recipe, 1).unwrap();
            prop_assert_eq!(ds.len(), (t - window) / step + 1);
            for i in 0..ds.len() {
                prop_assert_eq!(ds.window(i)[0], (i * step) as f32);
            }
        }

        #[test]
        fn interpolation_idempotent_on_complete_data(values in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let rec = one_channel(values);
            let once = interpolate_missing(&rec).unwrap();
            prop_assert_eq!(&once, &rec);
            prop_assert_eq!(interpolate_missing(&once).unwrap(), once);
        }

        #[test]
        fn zscore_statistics(values in proptest::collection::vec(-1e3f64..1e3, 2..128)) {
            let rec = one_channel(values);
            prop_assume!(rec.samples.iter().any(|v| (v - rec.samples[0]).abs() > 1e-3));
            let r = normalize_zscore_per_user(&rec).unwrap();
            let n = r.len() as f64;
            let mean = r.samples.iter().sum::<f64>() / n;
            let std = (r.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }
}
