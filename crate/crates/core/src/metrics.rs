//! Binary evaluation with COVID as the positive class: confusion counts,
//! accuracy, per-class precision/recall/F1, two macro-F1 definitions and the
//! binomial-proportion confidence radius.

use serde::Serialize;
use thiserror::Error;

use crate::diagnosis::Label;

pub const DEFAULT_Z: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and truths ({truths}) differ in length")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Covid, Label::Covid) => self.tp += 1,
            (Label::Covid, Label::NonCovid) => self.fp += 1,
            (Label::NonCovid, Label::NonCovid) => self.tn += 1,
            (Label::NonCovid, Label::Covid) => self.fn_ += 1,
        }
    }

    /// Counts with the class roles exchanged (Non-COVID as positive).
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        c.record(p, t);
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

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    match c.total() {
        0 => Err(MetricsError::Empty),
        total => Ok((c.tp + c.tn) as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(covid, non_covid)` scores; any 0/0 is taken as 0.
pub fn per_class_prf(c: &ConfusionCounts) -> (ClassScores, ClassScores) {
    let scores = |tp: u64, fp: u64, fn_: u64| {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassScores {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    };
    (scores(c.tp, c.fp, c.fn_), scores(c.tn, c.fn_, c.fp))
}

/// Harmonic mean of the class-averaged precision and recall.
pub fn macro_f1_avgpr(avg_precision: f64, avg_recall: f64) -> f64 {
    f1(avg_precision, avg_recall)
}

/// Arithmetic mean of the per-class F1 scores.
pub fn macro_f1_mean(f1_covid: f64, f1_noncovid: f64) -> f64 {
    (f1_covid + f1_noncovid) / 2.0
}

/// `z·sqrt(score·(1−score)/n)`.
pub fn binomial_ci_radius(score: f64, n: u64, z: f64) -> Result<f64> {
    if n == 0 {
        return Err(MetricsError::ZeroSamples);
    }
    if !(0.0..=1.0).contains(&score) {
        return Err(MetricsError::ScoreOutOfRange(score));
    }
    Ok(z * (score * (1.0 - score) / n as f64).sqrt())
}

/// What the items behind a report are; fixes the `n` of the CI radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemUnit {
    Slices,
    Volumes,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub precision_covid: f64,
    pub recall_covid: f64,
    pub f1_covid: f64,
    pub precision_noncovid: f64,
    pub recall_noncovid: f64,
    pub f1_noncovid: f64,
    /// Harmonic mean of averaged precision and recall.
    pub macro_f1_avgpr: f64,
    /// Mean of the two per-class F1 scores.
    pub macro_f1_mean: f64,
    /// Radius around `macro_f1_mean`.
    pub ci_radius: Option<f64>,
    pub n: u64,
    pub unit: ItemUnit,
    pub z: f64,
}

pub fn build_report(c: &ConfusionCounts, z: f64, unit: ItemUnit) -> Result<MetricsReport> {
    let accuracy = accuracy(c)?;
    let (covid, noncovid) = per_class_prf(c);
    let avg_p = (covid.precision + noncovid.precision) / 2.0;
    let avg_r = (covid.recall + noncovid.recall) / 2.0;
    let mean = macro_f1_mean(covid.f1, noncovid.f1);
    let n = c.total();
    Ok(MetricsReport {
        confusion: *c,
        accuracy,
        precision_covid: covid.precision,
        recall_covid: covid.recall,
        f1_covid: covid.f1,
        precision_noncovid: noncovid.precision,
        recall_noncovid: noncovid.recall,
        f1_noncovid: noncovid.f1,
        macro_f1_avgpr: macro_f1_avgpr(avg_p, avg_r),
        macro_f1_mean: mean,
        ci_radius: Some(binomial_ci_radius(mean, n, z)?),
        n,
        unit,
        z,
    })
}
