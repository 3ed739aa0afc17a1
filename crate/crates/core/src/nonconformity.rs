//! Nonconformity functions: larger scores mean an example looks stranger
//! under the candidate label.
//!
//! Three measures work on the embedding space (k-NN label disagreement,
//! nearest-same-class over nearest-other-class distance ratio, nearest
//! centroid ratio) and three on the softmax output (hinge, margin, Brier),
//! each of the latter optionally on temperature-scaled logits.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{euclidean, NeighborIndex};
use crate::types::{
    Dataset, EmbeddingVector, FeatureKind, Features, LabelId, LogitVector, ProbabilityVector,
};

pub const DEFAULT_K: usize = 15;

/// Search interval and tolerance for the temperature fit.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 50.0);
pub const TEMPERATURE_TOLERANCE: f64 = 1e-4;

/// A nonconformity score on the extended reals (finite or `+inf`).
#[derive(Debug, Clone, Copy)]
pub struct Score(f64);

impl Score {
    pub const INFINITY: Score = Score(f64::INFINITY);

    pub fn new(value: f64) -> Self {
        debug_assert!(!value.is_nan(), "nonconformity score is NaN");
        Self(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl PartialEq for Score {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonconformityKind {
    Knn,
    #[serde(rename = "1nn")]
    OneNn,
    #[serde(rename = "centroid")]
    NearestCentroid,
    Hinge,
    Margin,
    Brier,
    TsHinge,
    TsMargin,
    TsBrier,
}

impl NonconformityKind {
    pub const ALL: [NonconformityKind; 9] = [
        Self::Knn,
        Self::OneNn,
        Self::NearestCentroid,
        Self::Hinge,
        Self::Margin,
        Self::Brier,
        Self::TsHinge,
        Self::TsMargin,
        Self::TsBrier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Knn => "knn",
            Self::OneNn => "1nn",
            Self::NearestCentroid => "centroid",
            Self::Hinge => "hinge",
            Self::Margin => "margin",
            Self::Brier => "brier",
            Self::TsHinge => "ts-hinge",
            Self::TsMargin => "ts-margin",
            Self::TsBrier => "ts-brier",
        }
    }

    pub fn required_feature(self) -> FeatureKind {
        match self {
            Self::Knn | Self::OneNn | Self::NearestCentroid => FeatureKind::Embedding,
            Self::Hinge | Self::Margin | Self::Brier => FeatureKind::Probabilities,
            Self::TsHinge | Self::TsMargin | Self::TsBrier => FeatureKind::Logits,
        }
    }

    pub fn uses_embedding(self) -> bool {
        self.required_feature() == FeatureKind::Embedding
    }

    pub fn is_temperature_scaled(self) -> bool {
        self.required_feature() == FeatureKind::Logits
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for NonconformityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NonconformityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown nonconformity function `{s}`")))
    }
}

/// Softmax-layer measure shared by the plain and temperature-scaled kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SoftmaxMeasure {
    Hinge,
    Margin,
    Brier,
}

impl SoftmaxMeasure {
    fn score(self, p: &ProbabilityVector, y: LabelId) -> Score {
        match self {
            Self::Hinge => hinge_score(p, y),
            Self::Margin => margin_score(p, y),
            Self::Brier => brier_score(p, y),
        }
    }
}

/// Per-class mean embeddings, indexed by label.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    means: Vec<EmbeddingVector>,
}

impl Centroids {
    pub fn new(means: Vec<EmbeddingVector>) -> Result<Self> {
        let dim = means.first().map(EmbeddingVector::len).ok_or(Error::Empty("no centroids"))?;
        if let Some(bad) = means.iter().find(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(Self { dim, means })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn get(&self, label: LabelId) -> Option<&EmbeddingVector> {
        self.means.get(label.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.means.iter()
    }
}

/// A fully configured scoring rule. Each variant carries exactly the state
/// its kind needs.
#[derive(Debug, Clone)]
pub enum NonconformityFunction {
    Knn { index: NeighborIndex, k: usize },
    OneNn { index: NeighborIndex },
    NearestCentroid { centroids: Centroids },
    Softmax { measure: SoftmaxMeasure, temperature: Option<f64> },
}

impl NonconformityFunction {
    pub fn knn(index: NeighborIndex, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(Self::Knn { index, k })
    }

    pub fn one_nn(index: NeighborIndex) -> Self {
        Self::OneNn { index }
    }

    pub fn nearest_centroid(centroids: Centroids) -> Self {
        Self::NearestCentroid { centroids }
    }

    pub fn softmax(measure: SoftmaxMeasure) -> Self {
        Self::Softmax {
            measure,
            temperature: None,
        }
    }

    pub fn temperature_scaled(measure: SoftmaxMeasure, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self::Softmax {
            measure,
            temperature: Some(temperature),
        })
    }

    /// Builds the function of `kind` from proper-training data; temperature
    /// scaled kinds fit `T` on `validation`.
    pub fn fit(
        kind: NonconformityKind,
        train: Option<&Dataset>,
        validation: Option<&Dataset>,
        k: usize,
    ) -> Result<Self> {
        let train_index = || -> Result<NeighborIndex> {
            let train = train.ok_or(Error::Empty("training set required for neighbor index"))?;
            let pts = train.labeled_embeddings()?;
            NeighborIndex::build(pts.into_iter().map(|(e, l)| (e.as_slice(), l)))
        };
        let ts = |measure| -> Result<Self> {
            let val = validation.ok_or(Error::Empty("validation set required for temperature fit"))?;
            Self::temperature_scaled(measure, fit_temperature(val)?)
        };
        match kind {
            NonconformityKind::Knn => Self::knn(train_index()?, k),
            NonconformityKind::OneNn => Ok(Self::one_nn(train_index()?)),
            NonconformityKind::NearestCentroid => {
                let train = train.ok_or(Error::Empty("training set required for centroids"))?;
                Ok(Self::nearest_centroid(compute_centroids(train)?))
            }
            NonconformityKind::Hinge => Ok(Self::softmax(SoftmaxMeasure::Hinge)),
            NonconformityKind::Margin => Ok(Self::softmax(SoftmaxMeasure::Margin)),
            NonconformityKind::Brier => Ok(Self::softmax(SoftmaxMeasure::Brier)),
            NonconformityKind::TsHinge => ts(SoftmaxMeasure::Hinge),
            NonconformityKind::TsMargin => ts(SoftmaxMeasure::Margin),
            NonconformityKind::TsBrier => ts(SoftmaxMeasure::Brier),
        }
    }

    pub fn kind(&self) -> NonconformityKind {
        match self {
            Self::Knn { .. } => NonconformityKind::Knn,
            Self::OneNn { .. } => NonconformityKind::OneNn,
            Self::NearestCentroid { .. } => NonconformityKind::NearestCentroid,
            Self::Softmax { measure, temperature } => match (measure, temperature.is_some()) {
                (SoftmaxMeasure::Hinge, false) => NonconformityKind::Hinge,
                (SoftmaxMeasure::Margin, false) => NonconformityKind::Margin,
                (SoftmaxMeasure::Brier, false) => NonconformityKind::Brier,
                (SoftmaxMeasure::Hinge, true) => NonconformityKind::TsHinge,
                (SoftmaxMeasure::Margin, true) => NonconformityKind::TsMargin,
                (SoftmaxMeasure::Brier, true) => NonconformityKind::TsBrier,
            },
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            Self::Knn { k, .. } => Some(*k),
            _ => None,
        }
    }

    pub fn temperature(&self) -> Option<f64> {
        match self {
            Self::Softmax { temperature, .. } => *temperature,
            _ => None,
        }
    }

    pub fn index(&self) -> Option<&NeighborIndex> {
        match self {
            Self::Knn { index, .. } | Self::OneNn { index } => Some(index),
            _ => None,
        }
    }

    pub fn centroids(&self) -> Option<&Centroids> {
        match self {
            Self::NearestCentroid { centroids } => Some(centroids),
            _ => None,
        }
    }

    /// Score of `features` under candidate label `y`.
    pub fn score(&self, features: &Features, y: LabelId, classes: usize) -> Result<Score> {
        if y.0 >= classes {
            return Err(Error::InvalidParameter(format!(
                "label {y} outside universe of {classes} classes"
            )));
        }
        Ok(self.score_all(features, classes)?[y.0])
    }

    /// Scores under every candidate label `0..classes`, sharing the neighbor
    /// query or softmax between labels.
    pub fn score_all(&self, features: &Features, classes: usize) -> Result<Vec<Score>> {
        match self {
            Self::Knn { index, k } => {
                let v = features.require_embedding()?;
                let hits = index.query_knn(v.as_slice(), *k)?;
                let mut agree = vec![0usize; classes];
                for h in &hits {
                    if let Some(c) = agree.get_mut(h.label.0) {
                        *c += 1;
                    }
                }
                Ok(agree.into_iter().map(|a| Score::new((hits.len() - a) as f64)).collect())
            }
            Self::OneNn { index } => {
                let v = features.require_embedding()?;
                let nearest = index.query_nearest_per_class(v.as_slice())?;
                (0..classes)
                    .map(|y| one_nn_from_class_distances(&nearest, LabelId(y)))
                    .collect()
            }
            Self::NearestCentroid { centroids } => {
                let v = features.require_embedding()?;
                if centroids.len() != classes {
                    return Err(Error::CalibrationDomain(format!(
                        "{} centroids for {classes} classes",
                        centroids.len()
                    )));
                }
                let dists = centroid_distances(centroids, v)?;
                Ok((0..classes).map(|y| ratio_from_distances(&dists, y)).collect())
            }
            Self::Softmax { measure, temperature } => {
                let p = match temperature {
                    Some(t) => apply_temperature(features.require_logits()?, *t)?,
                    None => match (&features.probs, &features.logits) {
                        (Some(p), _) => p.clone(),
                        (None, Some(z)) => softmax(z.as_slice()),
                        (None, None) => return Err(Error::FeatureMissing(FeatureKind::Probabilities)),
                    },
                };
                if p.len() != classes {
                    return Err(Error::DimensionMismatch {
                        expected: classes,
                        found: p.len(),
                    });
                }
                Ok((0..classes).map(|y| measure.score(&p, LabelId(y))).collect())
            }
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("temperature must be positive, got {t}")))
    }
}

/// `same / other` with `x/0 = +inf` for every `x`, including zero.
fn ratio(same: f64, other: f64) -> Score {
    if other == 0.0 {
        Score::INFINITY
    } else {
        Score::new(same / other)
    }
}

/// Number of the `k` nearest training labels that differ from `y`.
pub fn knn_score(index: &NeighborIndex, k: usize, v: &EmbeddingVector, y: LabelId) -> Result<Score> {
    let hits = index.query_knn(v.as_slice(), k)?;
    Ok(Score::new(hits.iter().filter(|h| h.label != y).count() as f64))
}

fn one_nn_from_class_distances(nearest: &[Option<f64>], y: LabelId) -> Result<Score> {
    let same = nearest.get(y.0).copied().flatten().ok_or_else(|| {
        Error::CalibrationDomain(format!("class {y} has no points in the training index"))
    })?;
    let other = nearest
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != y.0)
        .filter_map(|(_, d)| *d)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .ok_or_else(|| {
            Error::CalibrationDomain(format!("training index holds no class other than {y}"))
        })?;
    Ok(ratio(same, other))
}

/// Nearest same-class distance over nearest other-class distance.
pub fn one_nn_score(index: &NeighborIndex, v: &EmbeddingVector, y: LabelId) -> Result<Score> {
    let nearest = index.query_nearest_per_class(v.as_slice())?;
    one_nn_from_class_distances(&nearest, y)
}

/// Arithmetic mean of each class's training embeddings.
pub fn compute_centroids(train: &Dataset) -> Result<Centroids> {
    let dim = train
        .embedding_dim
        .ok_or(Error::FeatureMissing(FeatureKind::Embedding))?;
    let classes = train.classes();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for ex in &train.examples {
        let e = ex.features.require_embedding()?;
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.len(),
            });
        }
        let sum = sums.get_mut(ex.label.0).ok_or_else(|| {
            Error::InvalidParameter(format!("label {} outside universe", ex.label))
        })?;
        for (s, x) in sum.iter_mut().zip(e.as_slice()) {
            *s += x;
        }
        counts[ex.label.0] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::CalibrationDomain(format!(
            "class {empty} has no training examples for its centroid"
        )));
    }
    let means = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| EmbeddingVector(s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    Centroids::new(means)
}

fn centroid_distances(centroids: &Centroids, v: &EmbeddingVector) -> Result<Vec<f64>> {
    if v.len() != centroids.dim() {
        return Err(Error::DimensionMismatch {
            expected: centroids.dim(),
            found: v.len(),
        });
    }
    Ok(centroids.iter().map(|m| euclidean(m.as_slice(), v.as_slice())).collect())
}

fn ratio_from_distances(dists: &[f64], y: usize) -> Score {
    let other = dists
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != y)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    ratio(dists[y], other)
}

/// Distance to the own-class centroid over the nearest other centroid.
pub fn centroid_score(centroids: &Centroids, v: &EmbeddingVector, y: LabelId) -> Result<Score> {
    if y.0 >= centroids.len() {
        return Err(Error::CalibrationDomain(format!("no centroid for class {y}")));
    }
    let dists = centroid_distances(centroids, v)?;
    Ok(ratio_from_distances(&dists, y.0))
}

/// `1 - p_y`.
pub fn hinge_score(p: &ProbabilityVector, y: LabelId) -> Score {
    Score::new(1.0 - p.0[y.0])
}

/// Largest competing probability minus `p_y`.
pub fn margin_score(p: &ProbabilityVector, y: LabelId) -> Score {
    let best_other = p
        .0
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y.0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Score::new(best_other - p.0[y.0])
}

/// Mean squared difference between `p` and the one-hot vector at `y`.
pub fn brier_score(p: &ProbabilityVector, y: LabelId) -> Score {
    let c = p.len() as f64;
    let sum: f64 = p
        .0
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let target = if i == y.0 { 1.0 } else { 0.0 };
            (target - v) * (target - v)
        })
        .sum();
    Score::new(sum / c)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> ProbabilityVector {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbabilityVector(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax of `z / T`.
pub fn apply_temperature(z: &LogitVector, temperature: f64) -> Result<ProbabilityVector> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = z.0.iter().map(|v| v / temperature).collect();
    Ok(softmax(&scaled))
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of the true labels under softmax(z / T).
pub fn mean_nll(samples: &[(&LogitVector, LabelId)], temperature: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|(z, y)| {
            let scaled: Vec<f64> = z.0.iter().map(|v| v / temperature).collect();
            log_sum_exp(&scaled) - scaled[y.0]
        })
        .sum();
    total / samples.len() as f64
}

/// Temperature minimizing the validation NLL, by golden-section search over
/// [`TEMPERATURE_RANGE`].
pub fn fit_temperature(validation: &Dataset) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set for temperature fit"));
    }
    let samples: Vec<(&LogitVector, LabelId)> = validation
        .examples
        .iter()
        .map(|ex| Ok((ex.features.require_logits()?, ex.label)))
        .collect::<Result<_>>()?;
    let nll = |t: f64| mean_nll(&samples, t);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while b - a > TEMPERATURE_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(d);
        }
    }
    let fitted = (a + b) / 2.0;
    // The untempered model is a candidate too; it can only win when it sits
    // within the search tolerance of the optimum.
    Ok(if nll(1.0) < nll(fitted) { 1.0 } else { fitted })
}
