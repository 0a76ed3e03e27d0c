//! Training-log records and their CSV encoding.
//!
//! The header is fixed; fields are never reordered. Probe fields are empty
//! (not zero) on rows where the probe did not run.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One logging point of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub tr_f: Option<f64>,
    pub tr_f_minibatch: Option<f64>,
    pub tr_h: Option<f64>,
    pub empirical_fisher: Option<f64>,
    pub penalty_value: Option<f64>,
    pub grad_norm_clean: Option<f64>,
    pub grad_norm_noisy: Option<f64>,
    pub grad_norm_ratio: Option<f64>,
    pub cos_clean_noisy: Option<f64>,
    pub train_acc_clean: Option<f64>,
    pub train_acc_noisy: Option<f64>,
}

pub const CSV_HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_loss,val_acc,test_acc,tr_f,tr_f_minibatch,tr_h,empirical_fisher,penalty_value,grad_norm_clean,grad_norm_noisy,grad_norm_ratio,cos_clean_noisy,train_acc_clean,train_acc_noisy";

fn push_opt(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(x) = v {
        let _ = write!(out, "{x}");
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut out = String::with_capacity(160);
        let _ = write!(out, "{},{},{}", self.epoch, self.step, self.lr);
        for v in [
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.test_acc,
            self.tr_f,
            self.tr_f_minibatch,
            self.tr_h,
            self.empirical_fisher,
            self.penalty_value,
            self.grad_norm_clean,
            self.grad_norm_noisy,
            self.grad_norm_ratio,
            self.cos_clean_noisy,
            self.train_acc_clean,
            self.train_acc_noisy,
        ] {
            push_opt(&mut out, v);
        }
        out
    }

    pub fn from_csv_line(line: &str, path: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let want = CSV_HEADER.split(',').count();
        if fields.len() != want {
            return Err(Error::MalformedCsv {
                path: path.into(),
                detail: format!("expected {want} fields, got {}", fields.len()),
            });
        }
        let req = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::MalformedCsv {
                path: path.into(),
                detail: format!("bad {what}: {s:?}"),
            })
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                req(s, what).map(Some)
            }
        };
        Ok(Self {
            epoch: req(fields[0], "epoch")? as usize,
            step: req(fields[1], "step")? as usize,
            lr: req(fields[2], "lr")?,
            train_loss: opt(fields[3], "train_loss")?,
            train_acc: opt(fields[4], "train_acc")?,
            val_loss: opt(fields[5], "val_loss")?,
            val_acc: opt(fields[6], "val_acc")?,
            test_acc: opt(fields[7], "test_acc")?,
            tr_f: opt(fields[8], "tr_f")?,
            tr_f_minibatch: opt(fields[9], "tr_f_minibatch")?,
            tr_h: opt(fields[10], "tr_h")?,
            empirical_fisher: opt(fields[11], "empirical_fisher")?,
            penalty_value: opt(fields[12], "penalty_value")?,
            grad_norm_clean: opt(fields[13], "grad_norm_clean")?,
            grad_norm_noisy: opt(fields[14], "grad_norm_noisy")?,
            grad_norm_ratio: opt(fields[15], "grad_norm_ratio")?,
            cos_clean_noisy: opt(fields[16], "cos_clean_noisy")?,
            train_acc_clean: opt(fields[17], "train_acc_clean")?,
            train_acc_noisy: opt(fields[18], "train_acc_noisy")?,
        })
    }
}

/// Serializes rows with the fixed header, UTF-8, one row per logging point.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 + rows.len() * 120);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string())
}

pub fn parse_csv(text: &str, path: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::MalformedCsv { path: path.into(), detail: format!("bad header: {h:?}") })
        }
        None => return Err(Error::MalformedCsv { path: path.into(), detail: "empty file".into() }),
    }
    lines.map(|l| MetricsRow::from_csv_line(l, path)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_rows_and_empties() {
        let rows = vec![
            MetricsRow { epoch: 0, step: 9, lr: 0.1, train_loss: Some(0.7), ..Default::default() },
            MetricsRow {
                epoch: 1,
                step: 19,
                lr: 0.05,
                train_loss: Some(0.5),
                tr_f: Some(3.25),
                tr_h: Some(4.5),
                ..Default::default()
            },
        ];
        let text = to_csv(&rows);
        let back = parse_csv(&text, "mem").unwrap();
        assert_eq!(back, rows);
        assert!(text.lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn header_is_stable() {
        assert!(CSV_HEADER.starts_with("epoch,step,lr,train_loss"));
        assert_eq!(CSV_HEADER.split(',').count(), 19);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(parse_csv("", "p").is_err());
        assert!(parse_csv("foo,bar\n", "p").is_err());
        let bad = format!("{CSV_HEADER}\n1,2\n");
        assert!(parse_csv(&bad, "p").is_err());
        let nonnum = format!("{CSV_HEADER}\n1,2,x,,,,,,,,,,,,,,,,\n");
        assert!(parse_csv(&nonnum, "p").is_err());
    }
}
