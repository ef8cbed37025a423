//! Plot-ready exports: metric reports, compactness tables, and the
//! per-epoch inter-class similarity series.

use std::fs;
use std::path::Path;

use rhythmlab_core::eval::{round2, CompactnessStats, ConfusionMatrix, MetricReport};
use rhythmlab_core::Tensor;

use crate::{CliError, Result};

/// Human-readable metric report with the confusion matrix.
pub fn metrics_text(report: &MetricReport, cm: &ConfusionMatrix) -> String {
    let mut out = String::new();
    for (name, value) in report.as_rows() {
        out.push_str(&format!("{name} {:.2}\n", round2(value)));
    }
    out.push_str("confusion_matrix (rows = true class, cols = predicted)\n");
    let c = cm.classes();
    for t in 0..c {
        let cells: Vec<String> = (0..c).map(|p| cm.at(t, p).to_string()).collect();
        out.push_str(&format!("  {}\n", cells.join(" ")));
    }
    out
}

/// `metric,value` comma-separated table.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in report.as_rows() {
        out.push_str(&format!("{name},{:.2}\n", round2(value)));
    }
    out
}

pub fn parse_metrics_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (name, value) = line.split_once(',').ok_or_else(|| CliError::Format {
            what: "metrics csv",
            path: path.to_path_buf(),
            detail: format!("bad line {line:?}"),
        })?;
        let v: f64 = value.parse().map_err(|e| CliError::Format {
            what: "metrics csv",
            path: path.to_path_buf(),
            detail: format!("{e}"),
        })?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

/// Long-format compactness export: one `class,similarity` row per sample
/// (1-based class ids).
pub fn compactness_csv(stats: &CompactnessStats) -> String {
    let mut out = String::from("class,similarity\n");
    for (ci, class) in stats.per_class.iter().enumerate() {
        for s in &class.similarities {
            out.push_str(&format!("{},{s:.17e}\n", ci + 1));
        }
    }
    out
}

/// Quartile summary per class.
pub fn compactness_summary_csv(stats: &CompactnessStats) -> String {
    let mut out = String::from("class,count,excluded,degenerate,q1,median,q3\n");
    for (ci, class) in stats.per_class.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            ci + 1,
            class.similarities.len(),
            class.excluded,
            class.degenerate_centroid,
            class.quartiles[0],
            class.quartiles[1],
            class.quartiles[2],
        ));
    }
    out
}

/// Long-format similarity series: `epoch,class_i,class_j,similarity` with
/// 1-based class ids.
pub fn similarity_series_csv(rows: &[(usize, usize, usize, f64)]) -> String {
    let mut out = String::from("epoch,class_i,class_j,similarity\n");
    for (epoch, i, j, v) in rows {
        out.push_str(&format!("{epoch},{},{},{v:.17e}\n", i + 1, j + 1));
    }
    out
}

/// Rebuild the per-epoch matrices from a similarity series export.
pub fn parse_similarity_series(path: &Path) -> Result<Vec<(usize, Tensor)>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |detail: String| CliError::Format { what: "similarity series", path: path.to_path_buf(), detail };
    let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut classes = 0usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(bad(format!("bad line {line:?}")));
        }
        let epoch: usize = cells[0].parse().map_err(|e| bad(format!("{e}")))?;
        let ci: usize = cells[1].parse().map_err(|e| bad(format!("{e}")))?;
        let cj: usize = cells[2].parse().map_err(|e| bad(format!("{e}")))?;
        let v: f64 = cells[3].parse().map_err(|e| bad(format!("{e}")))?;
        if ci == 0 || cj == 0 {
            return Err(bad("class ids are 1-based".into()));
        }
        classes = classes.max(ci).max(cj);
        rows.push((epoch, ci - 1, cj - 1, v));
    }
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.0).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut out = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let mut m = Tensor::zeros(&[classes, classes]);
        for (e, i, j, v) in &rows {
            if *e == epoch {
                m.set2(*i, *j, *v);
            }
        }
        out.push((epoch, m));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rhythmlab_core::eval::{confusion, macro_metrics, similarity_series_rows};

    #[test]
    fn metrics_render_two_decimals() {
        let cm = confusion(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        let m = macro_metrics(&cm).unwrap();
        let text = metrics_text(&m, &cm);
        assert!(text.contains("top1_acc 75.00"), "{text}");
        assert!(text.contains("confusion_matrix"));
        let csv = metrics_csv(&m);
        assert!(csv.starts_with("metric,value\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn similarity_series_round_trips() {
        let s0 = Tensor::new(&[3, 3], vec![1.0, 0.25, -0.5, 0.25, 1.0, 0.125, -0.5, 0.125, 1.0]).unwrap();
        let s1 = s0.map(|v| v * 0.5);
        let rows = similarity_series_rows(&[(0, s0.clone()), (1, s1.clone())]).unwrap();
        let csv = similarity_series_csv(&rows);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        std::fs::write(&path, csv).unwrap();
        let back = parse_similarity_series(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, s0);
        assert_eq!(back[1].1, s1);
    }
}
