use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{format_mean_std, quantiles, FoldReport, MeanStd, Quantiles, METRIC_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub mean: f64,
    pub std: f64,
    pub quantiles: Option<Quantiles>,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub per_fold_csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary_table: PathBuf,
    pub quantiles_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes per-fold CSV, summary JSON, a mean ± std table, box-whisker
/// quantiles and (when `plots`) one SVG box plot per metric into `out_dir`.
pub fn emit_report(reports: &[FoldReport], out_dir: &Path, plots: bool) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let acc_only = reports.iter().all(|r| r.acc_only);
    let metrics: &[&str] = if acc_only { &METRIC_NAMES[..1] } else { &METRIC_NAMES };

    let per_fold_csv = out_dir.join("per_fold.csv");
    let mut w = csv::Writer::from_path(&per_fold_csv)?;
    let mut header = vec!["subject", "repeat", "variant"];
    header.extend_from_slice(metrics);
    header.extend(["label", "error"]);
    w.write_record(&header)?;
    for r in reports {
        for f in &r.per_fold {
            let mut row = vec![f.subject.to_string(), f.repeat.to_string(), f.variant.clone()];
            row.extend(metrics.iter().map(|m| f.metric(m).to_string()));
            row.push(r.label.clone());
            row.push(f.error.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(&per_fold_csv, e))?;

    let mut summary: BTreeMap<String, BTreeMap<String, SummaryEntry>> = BTreeMap::new();
    let mut table = String::from("| run |");
    for m in metrics {
        let _ = write!(table, " {m} (%) |");
    }
    table.push_str("\n|---|");
    table.push_str(&"---|".repeat(metrics.len()));
    table.push('\n');
    let mut qcsv = String::from("label,metric,min,q1,median,q3,max\n");
    for r in reports {
        let _ = write!(table, "| {}{} |", r.label, if r.incomplete { " (incomplete)" } else { "" });
        let entry = summary.entry(r.label.clone()).or_default();
        for &m in metrics {
            let values = r.values(m);
            let ms = r.aggregate.get(m).copied().unwrap_or(MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            });
            let q = quantiles(&values).ok();
            if let Some(q) = q {
                let _ = writeln!(qcsv, "{},{m},{},{},{},{},{}", r.label, q.min, q.q1, q.median, q.q3, q.max);
            }
            let _ = write!(table, " {} |", format_mean_std(100.0 * ms.mean, 100.0 * ms.std));
            entry.insert(
                m.to_string(),
                SummaryEntry {
                    mean: ms.mean,
                    std: ms.std,
                    quantiles: q,
                    runs: values.len(),
                },
            );
        }
        table.push('\n');
    }
    let summary_json = out_dir.join("summary.json");
    write(&summary_json, serde_json::to_vec_pretty(&summary)?)?;
    let summary_table = out_dir.join("summary.md");
    write(&summary_table, table)?;
    let quantiles_csv = out_dir.join("quantiles.csv");
    write(&quantiles_csv, qcsv)?;

    let mut plot_files = Vec::new();
    if plots {
        for &m in metrics {
            let series: Vec<(String, Quantiles)> = reports
                .iter()
                .filter_map(|r| quantiles(&r.values(m)).ok().map(|q| (r.label.clone(), q)))
                .collect();
            let path = out_dir.join(format!("box_{m}.svg"));
            write(&path, render_box_plot_svg(m, &series))?;
            plot_files.push(path);
        }
    }
    Ok(ReportFiles {
        per_fold_csv,
        summary_json,
        summary_table,
        quantiles_csv,
        plots: plot_files,
    })
}

/// Minimal standalone SVG box-whisker chart, values in [0, 1].
pub fn render_box_plot_svg(title: &str, series: &[(String, Quantiles)]) -> String {
    let (w, h, left, top, plot_h) = (120 + 90 * series.len().max(1), 360.0, 60.0, 30.0, 260.0);
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y0}" y2="{y0}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            w - 20,
            left - 6.0,
            y(v) + 4.0,
            y0 = y(v)
        );
    }
    for (i, (label, q)) in series.iter().enumerate() {
        let cx = left + 45.0 + 90.0 * i as f64;
        let _ = writeln!(
            s,
            r##"<line x1="{cx}" x2="{cx}" y1="{}" y2="{}" stroke="#333"/><rect x="{}" y="{}" width="40" height="{}" fill="#9cc3e6" stroke="#333"/><line x1="{}" x2="{}" y1="{m}" y2="{m}" stroke="#c00" stroke-width="2"/><text x="{cx}" y="{}" text-anchor="middle">{label}</text>"##,
            y(q.max),
            y(q.min),
            cx - 20.0,
            y(q.q3),
            (y(q.q1) - y(q.q3)).max(0.5),
            cx - 20.0,
            cx + 20.0,
            top + plot_h + 18.0,
            m = y(q.median),
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{FoldResult, FoldReport};
    use crate::trainer::Variant;

    fn report(label: &str, accs: &[f64], acc_only: bool) -> FoldReport {
        let mut r = FoldReport {
            label: label.into(),
            variant: Variant::Proposed,
            per_fold: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| FoldResult {
                    subject: i as i32,
                    repeat: 0,
                    variant: "proposed".into(),
                    acc: a,
                    f_weighted: a,
                    f_macro: a / 2.0,
                    test_index_hash: String::new(),
                    error: None,
                })
                .collect(),
            aggregate: BTreeMap::new(),
            acc_only,
            incomplete: false,
            leakage_checks: 0,
            config: serde_json::Value::Null,
        };
        r.recompute_aggregate();
        r
    }

    #[test]
    fn files_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let reports = [report("a", &[0.1, 0.2, 0.3, 0.4, 0.5], false), report("b", &[0.7, 0.8], false)];
        let files = emit_report(&reports, dir.path(), true).unwrap();
        let csv = std::fs::read_to_string(&files.per_fold_csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 7);
        assert!(csv.starts_with("subject,repeat,variant,acc,f_weighted,f_macro"));
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&files.summary_json).unwrap()).unwrap();
        assert_eq!(summary["a"]["acc"]["quantiles"]["median"], 0.3);
        assert_eq!(files.plots.len(), 3);
        assert!(std::fs::read_to_string(&files.plots[0]).unwrap().starts_with("<svg"));
        let table = std::fs::read_to_string(&files.summary_table).unwrap();
        assert!(table.contains("75.00 ± 5.00"), "{table}");
        assert!(emit_report(&[], dir.path(), false).is_err());
    }

    #[test]
    fn acc_only_suppresses_f_columns() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[report("m", &[0.5], true)], dir.path(), false).unwrap();
        let csv = std::fs::read_to_string(&files.per_fold_csv).unwrap();
        assert!(!csv.contains("f_macro"));
        assert!(files.plots.is_empty());
    }
}
