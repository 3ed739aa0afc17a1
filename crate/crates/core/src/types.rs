//! Domain types shared across the crate.
//!
//! Everything here is plain data. Construction does not validate so that
//! malformed inputs can be represented and reported by [`validate_dataset`];
//! loaders in [`crate::io`] run validation before handing a dataset out.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Dense class index in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub usize);

impl LabelId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The set of classes `0..C` together with optional display names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelUniverse {
    names: Vec<String>,
}

impl LabelUniverse {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "label universe needs at least 2 classes, got {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::InvalidParameter(format!("duplicate label name `{name}`")));
            }
        }
        Ok(Self { names })
    }

    /// Universe of `classes` labels named by their index.
    pub fn anonymous(classes: usize) -> Result<Self> {
        Self::new((0..classes).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: LabelId) -> Option<&str> {
        self.names.get(label.0).map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> Option<LabelId> {
        self.names.iter().position(|n| n == name).map(LabelId)
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> {
        (0..self.names.len()).map(LabelId)
    }

    /// True when names are just the decimal indices.
    pub fn is_anonymous(&self) -> bool {
        self.names.iter().enumerate().all(|(i, n)| *n == i.to_string())
    }
}

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }
    };
}

real_vector!(
    /// Penultimate-layer activations `v = f(x)`.
    EmbeddingVector
);
real_vector!(
    /// Class probabilities, one per label.
    ProbabilityVector
);
real_vector!(
    /// Pre-softmax outputs, one per label.
    LogitVector
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Embedding,
    Probabilities,
    Logits,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Embedding => "embedding",
            FeatureKind::Probabilities => "probs",
            FeatureKind::Logits => "logits",
        })
    }
}

/// The model outputs available for one input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub embedding: Option<EmbeddingVector>,
    pub probs: Option<ProbabilityVector>,
    pub logits: Option<LogitVector>,
}

impl Features {
    pub fn from_embedding(values: Vec<f64>) -> Self {
        Self {
            embedding: Some(EmbeddingVector(values)),
            ..Self::default()
        }
    }

    pub fn from_probs(values: Vec<f64>) -> Self {
        Self {
            probs: Some(ProbabilityVector(values)),
            ..Self::default()
        }
    }

    pub fn from_logits(values: Vec<f64>) -> Self {
        Self {
            logits: Some(LogitVector(values)),
            ..Self::default()
        }
    }

    /// Presence pattern as (embedding, probs, logits).
    pub fn presence(&self) -> (bool, bool, bool) {
        (self.embedding.is_some(), self.probs.is_some(), self.logits.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.presence() == (false, false, false)
    }

    pub fn require_embedding(&self) -> Result<&EmbeddingVector> {
        self.embedding
            .as_ref()
            .ok_or(Error::FeatureMissing(FeatureKind::Embedding))
    }

    pub fn require_logits(&self) -> Result<&LogitVector> {
        self.logits.as_ref().ok_or(Error::FeatureMissing(FeatureKind::Logits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub features: Features,
    pub label: LabelId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ProperTraining,
    Calibration,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub universe: LabelUniverse,
    /// Length of every embedding; `None` when the dataset carries no embeddings.
    pub embedding_dim: Option<usize>,
    pub role: Role,
}

impl Dataset {
    /// Builds a dataset and rejects it unless [`validate_dataset`] is clean.
    pub fn validated(
        examples: Vec<LabeledExample>,
        universe: LabelUniverse,
        embedding_dim: Option<usize>,
        role: Role,
    ) -> Result<Self> {
        let ds = Self {
            examples,
            universe,
            embedding_dim,
            role,
        };
        let violations = validate_dataset(&ds);
        if violations.is_empty() {
            Ok(ds)
        } else {
            Err(Error::Validation(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.universe.len()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Embeddings paired with labels; fails if any example lacks an embedding.
    pub fn labeled_embeddings(&self) -> Result<Vec<(&EmbeddingVector, LabelId)>> {
        self.examples
            .iter()
            .map(|ex| Ok((ex.features.require_embedding()?, ex.label)))
            .collect()
    }
}

/// Significance level `ε` in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SignificanceLevel(f64);

impl SignificanceLevel {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon < 1.0 {
            Ok(Self(epsilon))
        } else {
            Err(Error::InvalidParameter(format!(
                "significance level must lie in (0, 1), got {epsilon}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SignificanceLevel {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<SignificanceLevel> for f64 {
    fn from(value: SignificanceLevel) -> f64 {
        value.0
    }
}

impl fmt::Display for SignificanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One broken invariant; `example_id` is `None` for dataset-level rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub example_id: Option<String>,
    pub rule: String,
}

impl Violation {
    fn dataset(rule: impl Into<String>) -> Self {
        Self {
            example_id: None,
            rule: rule.into(),
        }
    }

    fn example(id: &str, rule: impl Into<String>) -> Self {
        Self {
            example_id: Some(id.to_string()),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.example_id {
            Some(id) => write!(f, "example `{id}`: {}", self.rule),
            None => f.write_str(&self.rule),
        }
    }
}

/// Checks every dataset invariant and reports all violations found.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let classes = ds.universe.len();
    if classes < 2 {
        out.push(Violation::dataset(format!(
            "label universe has {classes} classes (need at least 2)"
        )));
    }
    if ds.examples.is_empty() {
        out.push(Violation::dataset("empty dataset"));
        return out;
    }

    let pattern = ds.examples[0].features.presence();
    if pattern.0 && ds.embedding_dim.is_none() {
        out.push(Violation::dataset("embeddings present but embedding_dim is unset"));
    }

    for ex in &ds.examples {
        let f = &ex.features;
        if f.is_empty() {
            out.push(Violation::example(&ex.id, "no embedding, probs or logits"));
            continue;
        }
        if f.presence() != pattern {
            out.push(Violation::example(&ex.id, "feature presence differs from the rest of the dataset"));
        }
        if ex.label.0 >= classes {
            out.push(Violation::example(
                &ex.id,
                format!("label {} outside universe of {classes} classes", ex.label),
            ));
        }
        if let Some(e) = &f.embedding {
            if let Some(d) = ds.embedding_dim {
                if e.len() != d {
                    out.push(Violation::example(
                        &ex.id,
                        format!("embedding length {} != {d}", e.len()),
                    ));
                }
            }
            if e.0.iter().any(|v| !v.is_finite()) {
                out.push(Violation::example(&ex.id, "non-finite embedding value"));
            }
        }
        if let Some(p) = &f.probs {
            if p.len() != classes {
                out.push(Violation::example(
                    &ex.id,
                    format!("probability vector length {} != {classes}", p.len()),
                ));
            }
            if p.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
                out.push(Violation::example(&ex.id, "probability outside [0, 1]"));
            }
            let sum: f64 = p.0.iter().sum();
            let normalized = (sum - 1.0).abs() <= PROB_SUM_TOLERANCE;
            if !normalized {
                out.push(Violation::example(
                    &ex.id,
                    format!("probabilities sum to {sum}, not 1"),
                ));
            }
        }
        if let Some(z) = &f.logits {
            if z.len() != classes {
                out.push(Violation::example(
                    &ex.id,
                    format!("logit vector length {} != {classes}", z.len()),
                ));
            }
            if z.0.iter().any(|v| !v.is_finite()) {
                out.push(Violation::example(&ex.id, "non-finite logit"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, label: usize, features: Features) -> LabeledExample {
        LabeledExample {
            id: id.into(),
            features,
            label: LabelId(label),
        }
    }

    fn three_class_d4() -> Dataset {
        let examples = (0..6)
            .map(|i| {
                let mut f = Features::from_embedding(vec![i as f64, 0.5, -1.0, 2.0]);
                f.probs = Some(ProbabilityVector(vec![0.2, 0.3, 0.5]));
                example(&format!("ex{i}"), i % 3, f)
            })
            .collect();
        Dataset {
            examples,
            universe: LabelUniverse::anonymous(3).unwrap(),
            embedding_dim: Some(4),
            role: Role::Test,
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert!(validate_dataset(&three_class_d4()).is_empty());
    }

    #[test]
    fn bad_probability_sum_is_reported_once() {
        let mut ds = three_class_d4();
        ds.examples[2].features.probs = Some(ProbabilityVector(vec![0.2, 0.3, 0.3]));
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].example_id.as_deref(), Some("ex2"));
        assert!(v[0].rule.contains("sum"));
    }

    #[test]
    fn empty_dataset_is_a_violation() {
        let mut ds = three_class_d4();
        ds.examples.clear();
        let v = validate_dataset(&ds);
        assert_eq!(v, vec![Violation::dataset("empty dataset")]);
    }

    #[test]
    fn validation_is_pure() {
        let mut ds = three_class_d4();
        ds.examples[0].label = LabelId(7);
        ds.examples[1].features.embedding = Some(EmbeddingVector(vec![f64::NAN, 0.0, 0.0, 0.0]));
        ds.examples[3].features.logits = Some(LogitVector(vec![0.0; 3]));
        let a = validate_dataset(&ds);
        let b = validate_dataset(&ds);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn significance_level_bounds() {
        assert!(SignificanceLevel::new(0.0).is_err());
        assert!(SignificanceLevel::new(1.0).is_err());
        assert!(SignificanceLevel::new(f64::NAN).is_err());
        assert_eq!(SignificanceLevel::new(0.05).unwrap().value(), 0.05);
    }

    #[test]
    fn universe_rejects_single_class_and_duplicates() {
        assert!(LabelUniverse::anonymous(1).is_err());
        assert!(LabelUniverse::new(vec!["a".into(), "a".into()]).is_err());
        let u = LabelUniverse::new(vec!["left".into(), "right".into()]).unwrap();
        assert_eq!(u.lookup("right"), Some(LabelId(1)));
        assert!(!u.is_anonymous());
    }
}
