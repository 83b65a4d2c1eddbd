//! Per-epoch metrics as comma-separated rows behind `# key=value` header lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{KerlError, Result};
use crate::trainer::EpochMetrics;

pub const COLUMNS: &str = "epoch,train_loss,train_accuracy,eval_loss,eval_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_metrics(header: &[(String, String)], rows: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "{COLUMNS}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            opt(r.eval_loss),
            opt(r.eval_accuracy)
        );
    }
    out
}

pub fn write_metrics(path: &Path, header: &[(String, String)], rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, format_metrics(header, rows)).map_err(|e| KerlError::io(path, e))
}

/// Parses a metrics file back into its header and rows.
pub fn parse_metrics(text: &str, origin: &Path) -> Result<(Vec<(String, String)>, Vec<EpochMetrics>)> {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    let mut seen_columns = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(h) = line.strip_prefix("# ") {
            let (k, v) = h
                .split_once('=')
                .ok_or_else(|| KerlError::parse(origin, line_no, "header line without '='"))?;
            header.push((k.to_string(), v.to_string()));
            continue;
        }
        if !seen_columns {
            if line != COLUMNS {
                return Err(KerlError::parse(origin, line_no, format!("expected column line {COLUMNS}")));
            }
            seen_columns = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(KerlError::parse(origin, line_no, format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| KerlError::parse(origin, line_no, format!("bad number {s:?}")))
        };
        let maybe = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        rows.push(EpochMetrics {
            epoch: f[0]
                .parse()
                .map_err(|_| KerlError::parse(origin, line_no, format!("bad epoch {:?}", f[0])))?,
            train_loss: num(f[1])?,
            train_accuracy: num(f[2])?,
            eval_loss: maybe(f[3])?,
            eval_accuracy: maybe(f[4])?,
        });
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            EpochMetrics {
                epoch: 0,
                train_loss: 2.0794415416798357,
                train_accuracy: 0.125,
                eval_accuracy: None,
                eval_loss: None,
            },
            EpochMetrics {
                epoch: 1,
                train_loss: 1.0 / 3.0,
                train_accuracy: 0.5,
                eval_accuracy: Some(0.1),
                eval_loss: Some(1e-300),
            },
        ];
        let header = vec![("sgd.lr".to_string(), "0.01".to_string())];
        let text = format_metrics(&header, &rows);
        assert!(text.starts_with("# sgd.lr=0.01\nepoch,"));
        let (h, r) = parse_metrics(&text, Path::new("m.csv")).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, rows);
        assert!(parse_metrics("epoch\n", Path::new("m.csv")).is_err());
    }
}
