//! Error, efficiency and latency measurements for a calibrated monitor over
//! a labeled test set.
//!
//! An example counts as an error when its true label is outside the
//! prediction set, so empty sets are always errors and a multiple set that
//! holds the true label is not.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icp::{CalibratedMonitor, InclusionRule, PredictionResult, Verdict};
use crate::nonconformity::NonconformityKind;
use crate::types::{Dataset, LabelId, SignificanceLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub error_rate: f64,
    pub multiple_rate: f64,
    pub empty_rate: f64,
    pub single_rate: f64,
}

/// Running count of errors in input order for one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeErrorCurve {
    pub epsilon: f64,
    /// `errors[i]` is the number of errors among inputs `0..=i`.
    pub errors: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_seconds: f64,
    pub p50_seconds: f64,
    pub p99_seconds: f64,
    /// Serialized size of the monitor artifact.
    pub artifact_bytes: usize,
    /// Estimated in-memory size of the neighbor index or centroids.
    pub model_state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub function: NonconformityKind,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub inclusion: InclusionRule,
    pub calibration_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ReportConfig,
    pub rows: Vec<EpsilonRow>,
    pub cumulative_errors: Vec<CumulativeErrorCurve>,
    pub latency: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub error_rate: f64,
    pub multiple_rate: f64,
}

/// Evenly spaced `ε` values `start, start + step, ...` up to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonGrid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for EpsilonGrid {
    fn default() -> Self {
        Self {
            start: 0.001,
            end: 0.1,
            step: 0.001,
        }
    }
}

impl EpsilonGrid {
    pub fn points(&self) -> Result<Vec<SignificanceLevel>> {
        if !(self.step.is_finite() && self.step > 0.0) || self.end < self.start {
            return Err(Error::InvalidParameter(format!("bad epsilon grid {self:?}")));
        }
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| SignificanceLevel::new(self.start + i as f64 * self.step))
            .collect()
    }
}

/// p-values of every test example, in input order.
pub fn test_p_values(monitor: &CalibratedMonitor, test: &Dataset) -> Result<Vec<Vec<f64>>> {
    test.examples
        .par_iter()
        .map(|ex| monitor.p_values(&ex.features))
        .collect()
}

fn row_for(
    p_values: &[Vec<f64>],
    labels: &[LabelId],
    epsilon: SignificanceLevel,
    rule: InclusionRule,
) -> (EpsilonRow, CumulativeErrorCurve) {
    let (mut errors, mut multiple, mut empty, mut single) = (0u64, 0u64, 0u64, 0u64);
    let mut curve = Vec::with_capacity(labels.len());
    for (p, &y) in p_values.iter().zip(labels) {
        let r = PredictionResult::from_p_values(p.clone(), epsilon, rule);
        if !r.contains(y) {
            errors += 1;
        }
        match r.verdict {
            Verdict::Empty => empty += 1,
            Verdict::Single => single += 1,
            Verdict::Reject => multiple += 1,
        }
        curve.push(errors);
    }
    let n = labels.len() as f64;
    (
        EpsilonRow {
            epsilon: epsilon.value(),
            error_rate: errors as f64 / n,
            multiple_rate: multiple as f64 / n,
            empty_rate: empty as f64 / n,
            single_rate: single as f64 / n,
        },
        CumulativeErrorCurve {
            epsilon: epsilon.value(),
            errors: curve,
        },
    )
}

fn config_of(monitor: &CalibratedMonitor, test: &Dataset) -> ReportConfig {
    let f = monitor.function();
    ReportConfig {
        function: f.kind(),
        k: f.k(),
        temperature: f.temperature(),
        inclusion: monitor.inclusion(),
        calibration_size: monitor.calibration_size(),
        test_size: test.len(),
    }
}

/// Error, multiple, empty and single rates plus cumulative error curves for
/// each requested `ε`.
pub fn evaluate(
    monitor: &CalibratedMonitor,
    test: &Dataset,
    epsilons: &[SignificanceLevel],
) -> Result<EvaluationReport> {
    if epsilons.is_empty() {
        return Err(Error::Empty("epsilon list"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let p = test_p_values(monitor, test)?;
    let labels: Vec<LabelId> = test.examples.iter().map(|e| e.label).collect();
    let (rows, cumulative_errors) = epsilons
        .iter()
        .map(|&e| row_for(&p, &labels, e, monitor.inclusion()))
        .unzip();
    Ok(EvaluationReport {
        config: config_of(monitor, test),
        rows,
        cumulative_errors,
        latency: None,
    })
}

/// Error rate and multiple-prediction rate across a grid of `ε`.
pub fn calibration_curve(
    monitor: &CalibratedMonitor,
    test: &Dataset,
    grid: &EpsilonGrid,
) -> Result<Vec<CurvePoint>> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let p = test_p_values(monitor, test)?;
    let labels: Vec<LabelId> = test.examples.iter().map(|e| e.label).collect();
    Ok(grid
        .points()?
        .into_iter()
        .map(|e| {
            let (row, _) = row_for(&p, &labels, e, monitor.inclusion());
            CurvePoint {
                epsilon: row.epsilon,
                error_rate: row.error_rate,
                multiple_rate: row.multiple_rate,
            }
        })
        .collect())
}

/// Times `predict_set` per input on the calling thread, after one untimed
/// warm-up pass.
pub fn benchmark_latency(
    monitor: &CalibratedMonitor,
    test: &Dataset,
    repetitions: usize,
    epsilon: SignificanceLevel,
) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::InvalidParameter("repetitions must be at least 1".into()));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    for ex in &test.examples {
        std::hint::black_box(monitor.predict_set(&ex.features, epsilon)?);
    }
    let mut samples = Vec::with_capacity(repetitions * test.len());
    for _ in 0..repetitions {
        for ex in &test.examples {
            let start = Instant::now();
            let r = monitor.predict_set(&ex.features, epsilon)?;
            samples.push(start.elapsed().as_secs_f64());
            std::hint::black_box(r);
        }
    }
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    let f = monitor.function();
    let model_state_bytes = f.index().map_or(0, |i| i.heap_bytes())
        + f.centroids().map_or(0, |c| c.len() * c.dim() * std::mem::size_of::<f64>());
    Ok(LatencyStats {
        samples: samples.len(),
        mean_seconds: samples.iter().sum::<f64>() / samples.len() as f64,
        p50_seconds: pick(0.5),
        p99_seconds: pick(0.99),
        artifact_bytes: crate::io::encode_monitor(monitor).len(),
        model_state_bytes,
    })
}
