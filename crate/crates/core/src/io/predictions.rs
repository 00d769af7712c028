//! Per-case prediction tables: `patient_id,mask,p_hgg,p_lgg,predicted`.
//!
//! `mask` is a path to a predicted mask volume relative to the table; the
//! grade columns are empty when no classifier was run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::phantom::{grade_name, parse_grade};
use crate::error::{Error, FormatError, Result};

pub const PREDICTIONS_HEADER: &str = "patient_id,mask,p_hgg,p_lgg,predicted";

#[derive(Clone, Debug, PartialEq)]
pub struct GradePrediction {
    /// Class probabilities, HGG first.
    pub probs: [f64; 2],
    pub grade: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub patient_id: String,
    pub mask: Option<PathBuf>,
    pub grade: Option<GradePrediction>,
}

fn text_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Text {
        line,
        message: message.into(),
    }
}

pub fn predictions_to_csv(rows: &[Prediction]) -> Result<String> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        let mask = r.mask.as_ref().map(|m| m.to_string_lossy().into_owned()).unwrap_or_default();
        for field in [r.patient_id.as_str(), &mask] {
            if field.contains([',', '\n', '\r']) {
                return Err(Error::Data(format!("prediction field `{field}` contains , or a newline")));
            }
        }
        let _ = match &r.grade {
            Some(g) => writeln!(
                out,
                "{},{mask},{},{},{}",
                r.patient_id,
                g.probs[0],
                g.probs[1],
                grade_name(g.grade)
            ),
            None => writeln!(out, "{},{mask},,,", r.patient_id),
        };
    }
    Ok(out)
}

pub fn predictions_from_csv(text: &str) -> std::result::Result<Vec<Prediction>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, PREDICTIONS_HEADER)) => {}
        Some((_, other)) => return Err(text_err(1, format!("expected header `{PREDICTIONS_HEADER}`, found `{other}`"))),
        None => return Err(text_err(1, "missing header")),
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(text_err(line_no, format!("expected 5 fields, found {}", f.len())));
        }
        if f[0].is_empty() {
            return Err(text_err(line_no, "empty patient id"));
        }
        if !seen.insert(f[0]) {
            return Err(text_err(line_no, format!("patient `{}` appears twice", f[0])));
        }
        let grade = match (f[2], f[3], f[4]) {
            ("", "", "") => None,
            (a, b, g) => {
                let prob = |s: &str| -> std::result::Result<f64, FormatError> {
                    s.parse::<f64>()
                        .ok()
                        .filter(|p| (0.0..=1.0).contains(p))
                        .ok_or_else(|| text_err(line_no, format!("`{s}` is not a probability")))
                };
                let grade = parse_grade(g).map_err(|e| text_err(line_no, e.to_string()))?;
                Some(GradePrediction {
                    probs: [prob(a)?, prob(b)?],
                    grade,
                })
            }
        };
        rows.push(Prediction {
            patient_id: f[0].to_string(),
            mask: (!f[1].is_empty()).then(|| PathBuf::from(f[1])),
            grade,
        });
    }
    Ok(rows)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(predictions_from_csv(&text)?)
}
