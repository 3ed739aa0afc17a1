//! Seeded synthetic datasets for tests, benchmarks and the CLI demo path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nonconformity::softmax;
use crate::types::{
    Dataset, EmbeddingVector, Features, LabelId, LabelUniverse, LabeledExample, LogitVector, Role,
};

/// Isotropic Gaussian classes with means `separation * e_c` (vertices of a
/// scaled simplex) and unit covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConfig {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl MixtureConfig {
    fn check(&self) -> Result<()> {
        if self.classes < 2 || self.dim < self.classes {
            return Err(Error::InvalidParameter(format!(
                "mixture needs 2 <= classes <= dim, got {} classes in {} dims",
                self.classes, self.dim
            )));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::InvalidParameter("separation must be positive".into()));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[class] = self.separation;
        m
    }

    /// Bayes log-likelihoods up to a shared constant: `-||x - mu_c||^2 / 2`.
    pub fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let d2: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let mu = if i == c { self.separation } else { 0.0 };
                        (v - mu) * (v - mu)
                    })
                    .sum();
                -0.5 * d2
            })
            .collect()
    }
}

/// Draws `n` examples with uniformly random labels. Each example carries the
/// point as its embedding, the Bayes log-likelihoods as logits and their
/// softmax as probabilities.
pub fn gaussian_mixture(cfg: &MixtureConfig, n: usize, seed: u64, role: Role) -> Result<Dataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let y = rng.random_range(0..cfg.classes);
            let x: Vec<f64> = cfg
                .mean(y)
                .into_iter()
                .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let z = cfg.log_likelihoods(&x);
            LabeledExample {
                id: format!("g{i}"),
                features: Features {
                    embedding: Some(EmbeddingVector(x)),
                    probs: Some(softmax(&z)),
                    logits: Some(LogitVector(z)),
                },
                label: LabelId(y),
            }
        })
        .collect();
    Dataset::validated(examples, LabelUniverse::anonymous(cfg.classes)?, Some(cfg.dim), role)
}

/// Logits `T0 * log p` for `p ~ Dirichlet(concentration)` and `y ~ p`, so
/// that `softmax(z / T0)` is calibrated by construction.
pub fn tempered_logits(
    classes: usize,
    n: usize,
    true_temperature: f64,
    concentration: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidParameter("need at least 2 classes".into()));
    }
    if !(true_temperature > 0.0 && true_temperature.is_finite()) {
        return Err(Error::InvalidParameter("temperature must be positive".into()));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("concentration: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let g: Vec<f64> = (0..classes)
                .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
                .collect();
            let total: f64 = g.iter().sum();
            let p: Vec<f64> = g.iter().map(|v| v / total).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let y = p
                .iter()
                .position(|pj| {
                    acc += pj;
                    u < acc
                })
                .unwrap_or(classes - 1);
            let z: Vec<f64> = p.iter().map(|pj| true_temperature * pj.ln()).collect();
            LabeledExample {
                id: format!("t{i}"),
                features: Features::from_logits(z),
                label: LabelId(y),
            }
        })
        .collect();
    Dataset::validated(examples, LabelUniverse::anonymous(classes)?, None, Role::Validation)
}
