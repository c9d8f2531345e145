//! CSV report writing (byte-stable formatting) and plot-data emission.

use std::path::{Path, PathBuf};

use super::run::{AblateRow, EvalRow, SweepRow};
use super::HarnessError;

pub const EVAL_HEADER: &str = "scheme,snr_db,cbr_mean,psnr_mean,psnr_std,n_images,seed";
pub const SWEEP_HEADER: &str =
    "scheme,target_cbr,snr_db,cbr_mean,psnr_mean,psnr_std,n_images,seed,reachable";
pub const ABLATE_HEADER: &str =
    "scheme,snr_db,cbr_mean,psnr_mean,psnr_std,n_images,seed,delta_psnr_vs_no_ckb";

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.2},{:.8},{:.6},{:.6},{},{}",
            self.scheme,
            self.snr_db,
            self.cbr_mean,
            self.psnr_mean,
            self.psnr_std,
            self.n_images,
            self.seed
        )
    }
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from(EVAL_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    write_atomic(path, &text)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{:.8},{:.2},{:.8},{:.6},{:.6},{},{},{}",
            r.row.scheme,
            r.target_cbr,
            r.row.snr_db,
            r.row.cbr_mean,
            r.row.psnr_mean,
            r.row.psnr_std,
            r.row.n_images,
            r.row.seed,
            r.reachable
        ));
        text.push('\n');
    }
    write_atomic(path, &text)
}

pub fn write_ablate_csv(rows: &[AblateRow], path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from(ABLATE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{:.6}\n",
            r.row.csv_line(),
            r.delta_psnr_vs_no_ckb
        ));
    }
    write_atomic(path, &text)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Plot-data emission
// ---------------------------------------------------------------------------

/// Parsed CSV with 1-based line numbers for error reporting.
struct Csv {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn parse_csv(path: &Path) -> Result<Csv, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| HarnessError::Report {
        path: path.to_path_buf(),
        line: 1,
        reason: "empty file".to_string(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != header.len() {
            return Err(HarnessError::Report {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!(
                    "expected {} columns, found {}",
                    header.len(),
                    fields.len()
                ),
            });
        }
        rows.push((idx + 1, fields));
    }
    Ok(Csv { header, rows })
}

fn column(csv: &Csv, name: &str, path: &Path) -> Result<usize, HarnessError> {
    csv.header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HarnessError::Report {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("missing column {name}"),
        })
}

/// Emits one two-column `x,y` series file per (scheme, axis) from evaluation
/// or sweep CSVs: `<scheme>_snr.csv` (PSNR vs SNR) or `<scheme>_cbr.csv`
/// (PSNR vs achieved CBR), sorted by x.
pub fn emit_plotdata(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let csv = parse_csv(path)?;
        let scheme_col = column(&csv, "scheme", path)?;
        let y_col = column(&csv, "psnr_mean", path)?;
        let is_sweep = csv.header.iter().any(|h| h == "target_cbr");
        let (x_col, axis) = if is_sweep {
            (column(&csv, "cbr_mean", path)?, "cbr")
        } else {
            (column(&csv, "snr_db", path)?, "snr")
        };
        let reachable_col = csv.header.iter().position(|h| h == "reachable");

        let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
            std::collections::BTreeMap::new();
        for (line, fields) in &csv.rows {
            if let Some(rc) = reachable_col {
                if fields[rc] != "true" {
                    continue; // unreachable sweep targets carry no data point
                }
            }
            let parse = |col: usize, what: &str| -> Result<f64, HarnessError> {
                fields[col].parse::<f64>().map_err(|e| HarnessError::Report {
                    path: path.to_path_buf(),
                    line: *line,
                    reason: format!("bad {what} value {:?}: {e}", fields[col]),
                })
            };
            let x = parse(x_col, "x")?;
            let y = parse(y_col, "y")?;
            series
                .entry(fields[scheme_col].clone())
                .or_default()
                .push((x, y));
        }
        for (scheme, mut points) in series {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x values"));
            let mut text = String::from("x,y\n");
            for (x, y) in points {
                text.push_str(&format!("{x},{y}\n"));
            }
            let out_path = out_dir.join(format!("{scheme}_{axis}.csv"));
            std::fs::write(&out_path, text)?;
            written.push(out_path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_rows() -> Vec<EvalRow> {
        vec![
            EvalRow {
                scheme: "akb_jscc".into(),
                snr_db: 10.0,
                cbr_mean: 0.03,
                psnr_mean: 28.5,
                psnr_std: 1.2,
                n_images: 4,
                seed: 7,
            },
            EvalRow {
                scheme: "akb_jscc".into(),
                snr_db: 0.0,
                cbr_mean: 0.03,
                psnr_mean: 22.0,
                psnr_std: 1.0,
                n_images: 4,
                seed: 7,
            },
            EvalRow {
                scheme: "jpeg_ldpc".into(),
                snr_db: 10.0,
                cbr_mean: 0.035,
                psnr_mean: 30.0,
                psnr_std: 0.5,
                n_images: 4,
                seed: 7,
            },
        ]
    }

    #[test]
    fn eval_csv_has_exact_header_and_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        write_eval_csv(&eval_rows(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("scheme,snr_db,cbr_mean,psnr_mean,psnr_std,n_images,seed\n"));
        write_eval_csv(&eval_rows(), &path).unwrap();
        let again = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn plotdata_sorted_series_per_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        write_eval_csv(&eval_rows(), &path).unwrap();
        let out = emit_plotdata(&[path], &dir.path().join("plots")).unwrap();
        assert_eq!(out.len(), 2);
        let akb = std::fs::read_to_string(dir.path().join("plots/akb_jscc_snr.csv")).unwrap();
        let lines: Vec<&str> = akb.lines().collect();
        assert_eq!(lines[0], "x,y");
        assert_eq!(lines.len(), 3);
        // Sorted by x even though input had 10 before 0.
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("10,"));
    }

    #[test]
    fn plotdata_errors_carry_line_numbers_and_column_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "scheme,snr_db,psnr_mean\nakb,10\n").unwrap();
        match emit_plotdata(&[path.clone()], dir.path()) {
            Err(HarnessError::Report { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected report error, got {other:?}"),
        }
        std::fs::write(&path, "scheme,snr_db,nope\nakb,10,1\n").unwrap();
        match emit_plotdata(&[path], dir.path()) {
            Err(HarnessError::Report { reason, .. }) => {
                assert!(reason.contains("psnr_mean"), "{reason}")
            }
            other => panic!("expected missing-column error, got {other:?}"),
        }
    }
}
