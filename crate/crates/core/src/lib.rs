//! Inductive conformal prediction monitors for classifiers.
//!
//! A monitor is fitted from a nonconformity function and a calibration set,
//! then maps each input to per-label p-values, a prediction set at a chosen
//! significance level, and a verdict (empty, single, reject).
//!
//! ```no_run
//! use icpmon::{io, CalibratedMonitor, NonconformityFunction, NonconformityKind, Role, SignificanceLevel};
//!
//! # fn main() -> icpmon::Result<()> {
//! let train = io::load_feature_file("train.csv", Role::ProperTraining)?;
//! let calib = io::load_feature_file("calib.csv", Role::Calibration)?;
//! let f = NonconformityFunction::fit(NonconformityKind::Knn, Some(&train), None, 15)?;
//! let monitor = CalibratedMonitor::calibrate(f, &calib)?;
//! let x = &calib.examples[0].features;
//! let result = monitor.predict_set(x, SignificanceLevel::new(0.05)?)?;
//! println!("{} {:?}", result.verdict, result.set);
//! # Ok(())
//! # }
//! ```

pub mod error;
pub mod evaluation;
pub mod icp;
pub mod io;
pub mod neighbors;
pub mod nonconformity;
pub mod refmodel;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
pub use evaluation::{EpsilonGrid, EvaluationReport, LatencyStats};
pub use icp::{CalibratedMonitor, InclusionRule, PredictionResult, Verdict};
pub use neighbors::{NeighborHit, NeighborIndex};
pub use nonconformity::{NonconformityFunction, NonconformityKind, Score, SoftmaxMeasure};
pub use refmodel::{MlpModel, TabularDataset, TrainConfig};
pub use types::{
    Dataset, EmbeddingVector, FeatureKind, Features, LabelId, LabelUniverse, LabeledExample,
    LogitVector, ProbabilityVector, Role, SignificanceLevel,
};
