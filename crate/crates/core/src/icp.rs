//! Inductive conformal calibration, p-values, set prediction and the
//! three-valued monitor verdict.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonconformity::{NonconformityFunction, Score};
use crate::types::{Dataset, Features, LabelId, LabelUniverse, SignificanceLevel};

/// Whether a label joins the prediction set when `p > ε` or when `p ≥ ε`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InclusionRule {
    #[default]
    Strict,
    Weak,
}

impl InclusionRule {
    pub fn includes(self, p_value: f64, epsilon: f64) -> bool {
        match self {
            Self::Strict => p_value > epsilon,
            Self::Weak => p_value >= epsilon,
        }
    }
}

impl fmt::Display for InclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Strict => "strict",
            Self::Weak => "weak",
        })
    }
}

impl FromStr for InclusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "weak" => Ok(Self::Weak),
            other => Err(Error::InvalidParameter(format!("unknown inclusion rule `{other}`"))),
        }
    }
}

/// Monitor output: no credible label, one label, or several (alarm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Empty,
    Single,
    Reject,
}

impl Verdict {
    pub fn from_set_size(size: usize) -> Self {
        match size {
            0 => Self::Empty,
            1 => Self::Single,
            _ => Self::Reject,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Empty => "empty",
            Self::Single => "single",
            Self::Reject => "reject",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// p-value per label, indexed by label.
    pub p_values: Vec<f64>,
    /// Labels in the prediction set, ascending.
    pub set: Vec<LabelId>,
    pub verdict: Verdict,
    pub epsilon: SignificanceLevel,
}

impl PredictionResult {
    pub fn from_p_values(p_values: Vec<f64>, epsilon: SignificanceLevel, rule: InclusionRule) -> Self {
        let set: Vec<LabelId> = p_values
            .iter()
            .enumerate()
            .filter(|(_, p)| rule.includes(**p, epsilon.value()))
            .map(|(j, _)| LabelId(j))
            .collect();
        Self {
            verdict: Verdict::from_set_size(set.len()),
            p_values,
            set,
            epsilon,
        }
    }

    pub fn contains(&self, label: LabelId) -> bool {
        self.set.binary_search(&label).is_ok()
    }
}

/// Outcome of one input of a monitored stream.
#[derive(Debug)]
pub struct MonitorRecord {
    pub result: Result<PredictionResult>,
    pub latency: Duration,
}

/// Frozen calibration: the scoring rule plus the sorted calibration scores.
#[derive(Debug, Clone)]
pub struct CalibratedMonitor {
    function: NonconformityFunction,
    calib_scores: Vec<Score>,
    universe: LabelUniverse,
    inclusion: InclusionRule,
}

impl CalibratedMonitor {
    /// Scores every calibration example under its true label.
    pub fn calibrate(function: NonconformityFunction, calib: &Dataset) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        let classes = calib.classes();
        let scores = calib
            .examples
            .par_iter()
            .map(|ex| function.score(&ex.features, ex.label, classes))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(function, scores, calib.universe.clone(), InclusionRule::Strict)
    }

    /// Assembles a monitor from precomputed calibration scores (any order).
    pub fn from_parts(
        function: NonconformityFunction,
        mut calib_scores: Vec<Score>,
        universe: LabelUniverse,
        inclusion: InclusionRule,
    ) -> Result<Self> {
        if calib_scores.is_empty() {
            return Err(Error::Empty("calibration scores"));
        }
        if calib_scores.iter().any(|s| s.value().is_nan()) {
            return Err(Error::InvalidParameter("NaN calibration score".into()));
        }
        calib_scores.sort();
        Ok(Self {
            function,
            calib_scores,
            universe,
            inclusion,
        })
    }

    pub fn with_inclusion(mut self, inclusion: InclusionRule) -> Self {
        self.inclusion = inclusion;
        self
    }

    pub fn function(&self) -> &NonconformityFunction {
        &self.function
    }

    /// Calibration scores, nondecreasing.
    pub fn calib_scores(&self) -> &[Score] {
        &self.calib_scores
    }

    pub fn calibration_size(&self) -> usize {
        self.calib_scores.len()
    }

    pub fn universe(&self) -> &LabelUniverse {
        &self.universe
    }

    pub fn classes(&self) -> usize {
        self.universe.len()
    }

    pub fn inclusion(&self) -> InclusionRule {
        self.inclusion
    }

    /// Fraction of calibration scores that are `>= score`.
    pub fn p_value(&self, score: Score) -> f64 {
        let below = self.calib_scores.partition_point(|a| *a < score);
        (self.calib_scores.len() - below) as f64 / self.calib_scores.len() as f64
    }

    /// p-value of every label for one input.
    pub fn p_values(&self, features: &Features) -> Result<Vec<f64>> {
        Ok(self
            .function
            .score_all(features, self.classes())?
            .into_iter()
            .map(|s| self.p_value(s))
            .collect())
    }

    pub fn predict_set(&self, features: &Features, epsilon: SignificanceLevel) -> Result<PredictionResult> {
        Ok(PredictionResult::from_p_values(
            self.p_values(features)?,
            epsilon,
            self.inclusion,
        ))
    }

    /// Runs [`predict_set`](Self::predict_set) over a stream, keeping input
    /// order; failures are reported per input.
    pub fn monitor<'a, I>(&self, stream: I, epsilon: SignificanceLevel) -> Vec<MonitorRecord>
    where
        I: IntoIterator<Item = &'a Features>,
    {
        stream
            .into_iter()
            .map(|features| {
                let start = Instant::now();
                let result = self.predict_set(features, epsilon);
                MonitorRecord {
                    result,
                    latency: start.elapsed(),
                }
            })
            .collect()
    }

    /// Smallest `ε` for which no validation example gets more than one label.
    ///
    /// Under the strict rule this is the largest second-highest p-value over
    /// the validation set. When that is zero the floor `1/|A|` is returned.
    /// Under the weak rule the next float above it is returned.
    pub fn estimate_epsilon(&self, validation: &Dataset) -> Result<SignificanceLevel> {
        if validation.is_empty() {
            return Err(Error::Empty("validation set for epsilon estimation"));
        }
        let second = validation
            .examples
            .par_iter()
            .map(|ex| self.p_values(&ex.features).map(|p| second_largest(&p)))
            .collect::<Result<Vec<f64>>>()?;
        epsilon_from_second_largest(second, self.calibration_size(), self.inclusion)
    }
}

/// The estimate given each validation example's second-largest p-value.
pub(crate) fn epsilon_from_second_largest(
    second: impl IntoIterator<Item = f64>,
    calibration_size: usize,
    inclusion: InclusionRule,
) -> Result<SignificanceLevel> {
    let worst = second.into_iter().fold(0.0, f64::max);
    if worst >= 1.0 {
        return Err(Error::InvalidParameter(
            "some validation input has two labels with p-value 1; no ε < 1 yields a single prediction"
                .into(),
        ));
    }
    let eps = match inclusion {
        InclusionRule::Strict if worst == 0.0 => 1.0 / calibration_size as f64,
        InclusionRule::Strict => worst,
        InclusionRule::Weak => worst.next_up(),
    };
    SignificanceLevel::new(eps)
}

fn second_largest(values: &[f64]) -> f64 {
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    second.max(0.0)
}
