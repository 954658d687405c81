//! CSV emission for loss traces, report tables, and plot data, plus the
//! parser the plot command uses to read those files back.

use std::path::Path;

use avgzsl::pipeline::{BiasAblation, ClassifierAblation, NegLossAblation, ThresholdSweep};

use crate::error::{CliError, CliResult};

/// Writes rows as CSV with a header. Fields are already formatted strings;
/// numbers use Rust's shortest round-trip form so files are deterministic.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn fmt_f64(v: f64) -> String {
    // `{}` prints integral floats without a decimal point; keep one so the
    // column parses as float everywhere.
    if v.fract() == 0.0 && v.is_finite() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

pub fn threshold_sweep_rows(sweep: &ThresholdSweep) -> Vec<Vec<String>> {
    sweep
        .points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.tau),
                fmt_f64(p.seen_acc),
                fmt_f64(p.unseen_acc),
                fmt_f64(p.harmonic),
                fmt_f64(p.tpr),
                fmt_f64(p.fpr),
                (p.is_operating as u8).to_string(),
            ]
        })
        .collect()
}

pub const THRESHOLD_HEADER: [&str; 7] =
    ["tau", "seen_acc", "unseen_acc", "harmonic", "tpr", "fpr", "is_operating"];

pub fn bias_table_rows(ablation: &BiasAblation) -> Vec<Vec<String>> {
    ablation
        .rows
        .iter()
        .map(|r| {
            vec![r.method.clone(), fmt_f64(r.auc), fmt_f64(r.fpr_at_60_tpr), fmt_f64(r.harmonic)]
        })
        .collect()
}

pub const BIAS_HEADER: [&str; 4] = ["method", "auc", "fpr_at_60_tpr", "harmonic"];

/// ROC plot data: one row per curve point, tagged with the method and its
/// pooled AUC so the plot legend needs no side table.
pub fn bias_roc_rows(ablation: &BiasAblation) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for curve in &ablation.roc_curves {
        for point in &curve.curve.points {
            rows.push(vec![
                curve.method.clone(),
                fmt_f64(curve.auc),
                fmt_f64(point.fpr),
                fmt_f64(point.tpr),
            ]);
        }
    }
    rows
}

pub const ROC_HEADER: [&str; 4] = ["method", "auc", "fpr", "tpr"];

pub fn classifier_table_rows(ablation: &ClassifierAblation) -> Vec<Vec<String>> {
    ablation
        .rows
        .iter()
        .map(|r| {
            vec![
                r.seen_model.clone(),
                r.unseen_model.clone(),
                fmt_f64(r.seen_acc),
                fmt_f64(r.unseen_acc),
                fmt_f64(r.harmonic),
            ]
        })
        .collect()
}

pub const CLASSIFIER_HEADER: [&str; 5] =
    ["seen_model", "unseen_model", "seen_acc", "unseen_acc", "harmonic"];

pub fn neg_loss_table_rows(ablation: &NegLossAblation) -> Vec<Vec<String>> {
    ablation
        .rows
        .iter()
        .map(|r| {
            vec![
                r.mask.label().to_string(),
                fmt_f64(r.unseen_acc),
                fmt_f64(r.seen_acc),
                fmt_f64(r.harmonic),
            ]
        })
        .collect()
}

pub const NEG_LOSS_HEADER: [&str; 4] = ["mask", "unseen_acc", "seen_acc", "harmonic"];

/// A parsed plot-data file: the header names plus all rows as strings.
#[derive(Debug)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> CliResult<CsvTable> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::usage(format!("{}: empty file", path.display())))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(CliError::usage(format!(
                    "{}: line {} has {} fields, header has {}",
                    path.display(),
                    lineno + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(CsvTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn f64_at(&self, row: usize, col: usize, path: &Path) -> CliResult<f64> {
        self.rows[row][col].parse().map_err(|_| {
            CliError::usage(format!(
                "{}: row {} column {:?} is not a number: {:?}",
                path.display(),
                row + 2,
                self.header[col],
                self.rows[row][col]
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1.0".into(), "x".into()], vec!["0.25".into(), "y".into()]],
        )
        .unwrap();
        let table = CsvTable::read(&path).unwrap();
        assert_eq!(table.header, vec!["a", "b"]);
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.f64_at(1, 0, &path).unwrap(), 0.25);
    }

    #[test]
    fn ragged_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        let err = CsvTable::read(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn floats_keep_a_decimal_point() {
        assert_eq!(fmt_f64(1.0), "1.0");
        assert_eq!(fmt_f64(0.125), "0.125");
    }
}
