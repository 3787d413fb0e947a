//! Evaluation metrics for sentiment regression on a [-3, 3] scale.
//!
//! Accumulation is in `f64`. Binary metrics exclude samples whose label is
//! exactly zero and classify by sign, with `pred > 0` meaning positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which F1 to report on the zero-excluded binary task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// F1 of the positive class.
    #[default]
    Binary,
    /// Per-class F1 averaged with class-support weights.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub n_total: usize,
    pub n_nonzero: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

fn check_lengths(preds: &[f32], labels: &[f32]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metric over an empty set".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f32], labels: &[f32]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (f64::from(p) - f64::from(y)).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Sample Pearson correlation. Returns 0 when either side is constant.
pub fn pearson_corr(preds: &[f32], labels: &[f32]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if preds.len() < 2 {
        return Err(Error::Contract("correlation needs at least two samples".into()));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let my = labels.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &y) in preds.iter().zip(labels) {
        let dp = f64::from(p) - mp;
        let dy = f64::from(y) - my;
        sxy += dp * dy;
        sxx += dp * dp;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson correlation of a constant array; reporting 0");
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Seven-class bin of a score: clamp to [-3, 3], then round half away from zero.
pub fn sentiment_class(v: f32) -> i32 {
    f64::from(v).clamp(-3.0, 3.0).round() as i32
}

pub fn acc7(preds: &[f32], labels: &[f32]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| sentiment_class(p) == sentiment_class(y))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Zero-excluded binary confusion matrix.
pub fn binary_confusion(preds: &[f32], labels: &[f32]) -> Result<Confusion> {
    check_lengths(preds, labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        if y == 0.0 {
            continue;
        }
        match (p > 0.0, y > 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::Contract("every label is zero; binary metrics undefined".into()));
    }
    Ok(c)
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        // class absent from both predictions and labels
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Zero-excluded binary accuracy and F1.
pub fn acc2_f1(preds: &[f32], labels: &[f32], mode: F1Mode) -> Result<(f64, f64)> {
    let c = binary_confusion(preds, labels)?;
    let n = c.total() as f64;
    let acc = (c.tp + c.tn) as f64 / n;
    let f1_pos = f1_from(c.tp, c.fp, c.fn_);
    let f1 = match mode {
        F1Mode::Binary => f1_pos,
        F1Mode::Weighted => {
            let f1_neg = f1_from(c.tn, c.fn_, c.fp);
            let pos = (c.tp + c.fn_) as f64;
            let neg = (c.tn + c.fp) as f64;
            (f1_pos * pos + f1_neg * neg) / n
        }
    };
    Ok((acc, f1))
}

pub fn evaluate(preds: &[f32], labels: &[f32], mode: F1Mode) -> Result<MetricsReport> {
    let (acc2, f1) = acc2_f1(preds, labels, mode)?;
    Ok(MetricsReport {
        mae: mae(preds, labels)?,
        corr: pearson_corr(preds, labels)?,
        acc7: acc7(preds, labels)?,
        acc2,
        f1,
        n_total: preds.len(),
        n_nonzero: labels.iter().filter(|&&y| y != 0.0).count(),
    })
}
