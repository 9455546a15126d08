//! Binary classification metrics: accuracy, macro-F1, MCC and RQ
//! (the mean of per-class recalls).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    /// Swaps the roles of the two classes.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

pub fn binarize(score: f64, threshold: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Range(score));
    }
    Ok(u8::from(score >= threshold))
}

pub fn confusion(labels: &[u8], preds: &[u8]) -> Result<ConfusionCounts> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(preds) {
        match (y != 0, p != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// F1 of one class: `2·tp / (2·tp + fp + fn)`, zero when undefined.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn macro_f1(c: &ConfusionCounts) -> f64 {
    (f1(c.tp, c.fp, c.fn_) + f1(c.tn, c.fn_, c.fp)) / 2.0
}

pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

pub fn rq(c: &ConfusionCounts) -> Result<f64> {
    let (positives, negatives) = (c.positives(), c.negatives());
    if positives == 0 || negatives == 0 {
        return Err(Error::OneClassOnly {
            positives,
            negatives,
        });
    }
    Ok((c.tp as f64 / positives as f64 + c.tn as f64 / negatives as f64) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    pub rq: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    #[serde(default)]
    pub k: Option<usize>,
}

pub fn evaluate_run(labels: &[u8], scores: &[f64], threshold: f64) -> Result<MetricsReport> {
    if labels.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: scores.len(),
        });
    }
    let preds = scores
        .iter()
        .map(|&s| binarize(s, threshold))
        .collect::<Result<Vec<_>>>()?;
    let counts = confusion(labels, &preds)?;
    Ok(MetricsReport {
        accuracy: accuracy(&counts),
        macro_f1: macro_f1(&counts),
        mcc: mcc(&counts),
        rq: rq(&counts)?,
        counts,
        threshold,
        k: None,
    })
}

/// Aligned text table: K, Accuracy (%), Macro-F1 (%), MCC, RQ (%).
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>9} {:>9} {:>6} {:>7}",
        "K", "Accuracy", "Macro-F1", "MCC", "RQ (%)"
    );
    for r in reports {
        let k = r.k.map_or_else(|| "-".to_string(), |k| k.to_string());
        let _ = writeln!(
            out,
            "{:<6} {:>9.2} {:>9.2} {:>6.2} {:>7.1}",
            k,
            r.accuracy * 100.0,
            r.macro_f1 * 100.0,
            r.mcc,
            r.rq * 100.0
        );
    }
    out
}
