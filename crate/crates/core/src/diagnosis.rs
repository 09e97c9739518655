//! Slice thresholding and patient-level aggregation.
//!
//! The model outputs the class-1 (Non-COVID) probability per slice. A slice
//! is Non-COVID iff that probability is strictly above the threshold.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, ConfusionCounts, ItemUnit, MetricsError, MetricsReport};

/// Thresholds reported for the validation and test partitions.
pub const DEFAULT_THRESHOLDS: [f32; 3] = [0.15, 0.5, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Label {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "NON_COVID")]
    NonCovid,
}

pub type SliceLabel = Label;
pub type Diagnosis = Label;

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "COVID",
            Label::NonCovid => "NON_COVID",
        }
    }

    /// Binary training target: 1 for Non-COVID (class 1), 0 for COVID.
    pub fn target(self) -> f32 {
        match self {
            Label::Covid => 0.0,
            Label::NonCovid => 1.0,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Covid => Label::NonCovid,
            Label::NonCovid => Label::Covid,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosisError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f32),
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f32),
    #[error("cannot diagnose a volume with no slices")]
    EmptyVolume,
    #[error("volume `{0}` has no ground-truth label")]
    Unlabeled(String),
    #[error("no thresholds given")]
    NoThresholds,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, DiagnosisError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdPolicy {
    threshold: f32,
}

impl ThresholdPolicy {
    pub fn new(threshold: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(DiagnosisError::ThresholdOutOfRange(threshold));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }
}

/// How slice labels become a patient diagnosis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Non-COVID iff Non-COVID slices are at least as many as COVID slices
    /// (ties go to Non-COVID).
    #[default]
    Majority,
    /// Non-COVID iff Non-COVID slices strictly outnumber COVID slices
    /// (ties go to COVID). Sensitivity-analysis variant.
    MajorityStrict,
    /// COVID if any single slice is COVID.
    Any,
}

impl AggregationRule {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationRule::Majority => "majority",
            AggregationRule::MajorityStrict => "majority_strict",
            AggregationRule::Any => "any",
        }
    }
}

impl FromStr for AggregationRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "majority" => Ok(AggregationRule::Majority),
            "majority_strict" => Ok(AggregationRule::MajorityStrict),
            "any" | "all_or_nothing" => Ok(AggregationRule::Any),
            other => Err(format!("unknown aggregation rule `{other}`")),
        }
    }
}

pub fn classify_slice(p1: f32, policy: &ThresholdPolicy) -> Result<SliceLabel> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(DiagnosisError::ProbabilityOutOfRange(p1));
    }
    Ok(if p1 > policy.threshold {
        Label::NonCovid
    } else {
        Label::Covid
    })
}

fn counts(labels: &[SliceLabel]) -> Result<(usize, usize)> {
    if labels.is_empty() {
        return Err(DiagnosisError::EmptyVolume);
    }
    let covid = labels.iter().filter(|&&l| l == Label::Covid).count();
    Ok((covid, labels.len() - covid))
}

pub fn diagnose_majority(labels: &[SliceLabel]) -> Result<Diagnosis> {
    let (covid, noncovid) = counts(labels)?;
    Ok(if noncovid >= covid {
        Label::NonCovid
    } else {
        Label::Covid
    })
}

pub fn diagnose_majority_strict(labels: &[SliceLabel]) -> Result<Diagnosis> {
    let (covid, noncovid) = counts(labels)?;
    Ok(if noncovid > covid {
        Label::NonCovid
    } else {
        Label::Covid
    })
}

pub fn diagnose_any(labels: &[SliceLabel]) -> Result<Diagnosis> {
    let (covid, _) = counts(labels)?;
    Ok(if covid > 0 { Label::Covid } else { Label::NonCovid })
}

pub fn aggregate(labels: &[SliceLabel], rule: AggregationRule) -> Result<Diagnosis> {
    match rule {
        AggregationRule::Majority => diagnose_majority(labels),
        AggregationRule::MajorityStrict => diagnose_majority_strict(labels),
        AggregationRule::Any => diagnose_any(labels),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumePrediction {
    pub volume_id: String,
    pub probabilities: Vec<f32>,
    pub labels: Vec<SliceLabel>,
    pub covid_count: usize,
    pub noncovid_count: usize,
    pub diagnosis: Diagnosis,
    pub rule: AggregationRule,
}

pub fn diagnose_volume(
    volume_id: &str,
    probs: &[f32],
    policy: &ThresholdPolicy,
    rule: AggregationRule,
) -> Result<VolumePrediction> {
    let labels = probs
        .iter()
        .map(|&p| classify_slice(p, policy))
        .collect::<Result<Vec<_>>>()?;
    let diagnosis = aggregate(&labels, rule)?;
    let covid_count = labels.iter().filter(|&&l| l == Label::Covid).count();
    Ok(VolumePrediction {
        volume_id: volume_id.to_string(),
        probabilities: probs.to_vec(),
        noncovid_count: labels.len() - covid_count,
        covid_count,
        labels,
        diagnosis,
        rule,
    })
}

/// Per-slice probabilities and the ground truth for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVolume {
    pub volume_id: String,
    pub probabilities: Vec<f32>,
    pub truth: Option<Label>,
}

/// Slice- and volume-level reports at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub threshold: f32,
    pub rule: AggregationRule,
    pub volume: MetricsReport,
    pub slice: MetricsReport,
}

/// Evaluates every threshold in the order given. Volume-level metrics use
/// the volume count as `n`; slice-level metrics score each slice against its
/// volume's label and use the slice count.
pub fn sweep_thresholds(
    volumes: &[ScoredVolume],
    thresholds: &[f32],
    rule: AggregationRule,
    z: f64,
) -> Result<Vec<ThresholdReport>> {
    if thresholds.is_empty() {
        return Err(DiagnosisError::NoThresholds);
    }
    if volumes.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let truths = volumes
        .iter()
        .map(|v| v.truth.ok_or_else(|| DiagnosisError::Unlabeled(v.volume_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    thresholds
        .iter()
        .map(|&t| {
            let policy = ThresholdPolicy::new(t)?;
            let mut vol = ConfusionCounts::default();
            let mut sl = ConfusionCounts::default();
            for (v, &truth) in volumes.iter().zip(&truths) {
                let pred = diagnose_volume(&v.volume_id, &v.probabilities, &policy, rule)?;
                vol.record(pred.diagnosis, truth);
                for &l in &pred.labels {
                    sl.record(l, truth);
                }
            }
            Ok(ThresholdReport {
                threshold: t,
                rule,
                volume: metrics::build_report(&vol, z, ItemUnit::Volumes)?,
                slice: metrics::build_report(&sl, z, ItemUnit::Slices)?,
            })
        })
        .collect()
}
