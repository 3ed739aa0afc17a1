//! A one-hidden-layer rectifier network for tabular inputs.
//!
//! The hidden layer doubles as the embedding for the distance-based
//! nonconformity functions. Inputs are standardized with statistics from the
//! training split before the first layer. Training is plain mini-batch SGD on
//! cross-entropy with early stopping on a seeded held-out slice.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonconformity::softmax;
use crate::types::{
    Dataset, EmbeddingVector, Features, LabelId, LabelUniverse, LabeledExample, LogitVector,
    ProbabilityVector, Role,
};

/// One row of a raw tabular dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub values: Vec<f64>,
    pub label: LabelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub examples: Vec<RawExample>,
    pub universe: LabelUniverse,
    pub role: Role,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.values.len())
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Rejects empty data, ragged rows, non-finite values and unknown labels.
    pub fn check(&self) -> Result<usize> {
        let d = self.dim().ok_or(Error::Empty("tabular dataset"))?;
        for ex in &self.examples {
            if ex.values.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ex.values.len(),
                });
            }
            if ex.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("row `{}` has a non-finite value", ex.id)));
            }
            if ex.label.0 >= self.universe.len() {
                return Err(Error::InvalidParameter(format!("row `{}` has unknown label {}", ex.id, ex.label)));
            }
        }
        Ok(d)
    }
}

/// `floor(2 * inputs / 3 + classes)`.
pub fn default_hidden_width(inputs: usize, classes: usize) -> usize {
    2 * inputs / 3 + classes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Share of the training rows held out for early stopping; 0 disables
    /// the hold-out and monitors training loss instead.
    pub holdout_fraction: f64,
    /// Hidden width; `None` uses [`default_hidden_width`].
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            early_stop_patience: 25,
            holdout_fraction: 0.1,
            hidden: None,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch size and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidParameter("holdout fraction must lie in [0, 1)".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidParameter("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub embedding: EmbeddingVector,
    pub logits: LogitVector,
    pub probs: ProbabilityVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `inputs x hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x classes`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub universe: LabelUniverse,
}

/// Gradients laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &MlpModel) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    /// Same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, identity standardization.
    pub fn init(inputs: usize, hidden: usize, universe: LabelUniverse, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(inputs, hidden, universe, &mut rng)
    }

    fn init_with(inputs: usize, hidden: usize, universe: LabelUniverse, rng: &mut ChaCha8Rng) -> Result<Self> {
        if inputs == 0 || hidden == 0 {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        let classes = universe.len();
        let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let w1 = glorot(inputs, hidden);
        let w2 = glorot(hidden, classes);
        Ok(Self {
            inputs,
            hidden,
            classes,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
            input_mean: vec![0.0; inputs],
            input_scale: vec![1.0; inputs],
            universe,
        })
    }

    pub fn parameters(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let sizes = [self.w1.len(), self.b1.len(), self.w2.len(), self.b2.len()];
        let total: usize = sizes.iter().sum();
        if params.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                found: params.len(),
            });
        }
        let mut rest = params;
        for (dst, n) in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
            .into_iter()
            .zip(sizes)
        {
            let (head, tail) = rest.split_at(n);
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.inputs {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.inputs,
                found: x.len(),
            })
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// (standardized input, pre-activation, hidden activation, logits)
    fn layers(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.standardize(x);
        let mut pre = self.b1.clone();
        for (i, si) in s.iter().enumerate() {
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += si * w;
            }
        }
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut logits = self.b2.clone();
        for (j, hj) in act.iter().enumerate() {
            let row = &self.w2[j * self.classes..(j + 1) * self.classes];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += hj * w;
            }
        }
        (s, pre, act, logits)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        self.check_input(x)?;
        let (_, _, act, logits) = self.layers(x);
        let probs = softmax(&logits);
        Ok(ForwardPass {
            embedding: EmbeddingVector(act),
            logits: LogitVector(logits),
            probs,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<LabelId> {
        let out = self.forward(x)?;
        let best = out
            .logits
            .0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        Ok(LabelId(best.0))
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradients(&self, batch: &[(&[f64], LabelId)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let mut grad = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let mut dz = vec![0.0; self.classes];
        let mut da = vec![0.0; self.hidden];
        for (x, y) in batch {
            self.check_input(x)?;
            if y.0 >= self.classes {
                return Err(Error::InvalidParameter(format!("label {y} outside model classes")));
            }
            let (s, pre, act, logits) = self.layers(x);
            let p = softmax(&logits);
            loss += -p.0[y.0].ln().max(-f64::MAX);
            for (c, d) in dz.iter_mut().enumerate() {
                *d = p.0[c] - if c == y.0 { 1.0 } else { 0.0 };
            }
            for (g, d) in grad.b2.iter_mut().zip(&dz) {
                *g += d;
            }
            for j in 0..self.hidden {
                let row = &self.w2[j * self.classes..(j + 1) * self.classes];
                let grow = &mut grad.w2[j * self.classes..(j + 1) * self.classes];
                let mut back = 0.0;
                for c in 0..self.classes {
                    grow[c] += act[j] * dz[c];
                    back += row[c] * dz[c];
                }
                da[j] = if pre[j] > 0.0 { back } else { 0.0 };
            }
            for (g, d) in grad.b1.iter_mut().zip(&da) {
                *g += d;
            }
            for (i, si) in s.iter().enumerate() {
                let grow = &mut grad.w1[i * self.hidden..(i + 1) * self.hidden];
                for (g, d) in grow.iter_mut().zip(&da) {
                    *g += si * d;
                }
            }
        }
        let n = batch.len() as f64;
        for v in [&mut grad.w1, &mut grad.b1, &mut grad.w2, &mut grad.b2] {
            v.iter_mut().for_each(|g| *g /= n);
        }
        Ok((loss / n, grad))
    }

    /// Mean cross-entropy over a batch, without gradients.
    pub fn loss(&self, batch: &[(&[f64], LabelId)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let mut total = 0.0;
        for (x, y) in batch {
            let out = self.forward(x)?;
            let z = &out.logits.0;
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[y.0];
        }
        Ok(total / batch.len() as f64)
    }

    fn sgd_step(&mut self, grad: &Gradients, lr: f64) {
        for (p, g) in [
            (&mut self.w1, &grad.w1),
            (&mut self.b1, &grad.b1),
            (&mut self.w2, &grad.w2),
            (&mut self.b2, &grad.b2),
        ] {
            p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
        }
    }

    /// Fraction of rows whose arg-max logit matches the label.
    pub fn accuracy(&self, ds: &TabularDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Empty("accuracy dataset"));
        }
        let mut hits = 0usize;
        for ex in &ds.examples {
            if self.predict(&ex.values)? == ex.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / ds.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Mean training loss after each epoch.
    pub train_losses: Vec<f64>,
    /// Mean held-out loss after each epoch (training loss when no hold-out).
    pub monitor_losses: Vec<f64>,
}

pub fn train(train: &TabularDataset, cfg: &TrainConfig) -> Result<MlpModel> {
    train_with_report(train, cfg).map(|(m, _)| m)
}

pub fn train_with_report(train: &TabularDataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    cfg.check()?;
    let d = train.check()?;
    let mut present: Vec<usize> = train.examples.iter().map(|e| e.label.0).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Training("training data must contain at least two classes".into()));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for ex in &train.examples {
        mean.iter_mut().zip(&ex.values).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for ex in &train.examples {
        var.iter_mut()
            .zip(ex.values.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let scale: Vec<f64> = var
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = cfg
        .hidden
        .unwrap_or_else(|| default_hidden_width(d, train.universe.len()));
    let mut model = MlpModel::init_with(d, hidden, train.universe.clone(), &mut rng)?;
    model.input_mean = mean;
    model.input_scale = scale;

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((train.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(train.len() - 1);
    let (hold_idx, fit_idx) = order.split_at(n_hold);
    let pairs = |idx: &[usize]| -> Vec<(&[f64], LabelId)> {
        idx.iter()
            .map(|&i| (train.examples[i].values.as_slice(), train.examples[i].label))
            .collect()
    };
    let fit_rows = pairs(fit_idx);
    let hold_rows = pairs(hold_idx);
    let mut fit_order = fit_rows.clone();

    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        train_losses: Vec::new(),
        monitor_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        fit_order.shuffle(&mut rng);
        for batch in fit_order.chunks(cfg.batch_size) {
            let (_, grad) = model.loss_and_gradients(batch)?;
            model.sgd_step(&grad, cfg.learning_rate);
        }
        let train_loss = model.loss(&fit_rows)?;
        let monitored = if hold_rows.is_empty() {
            train_loss
        } else {
            model.loss(&hold_rows)?
        };
        if !monitored.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        report.train_losses.push(train_loss);
        report.monitor_losses.push(monitored);
        report.epochs_run = epoch + 1;
        if monitored < best_loss {
            best_loss = monitored;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    report.best_epoch = best_epoch;
    Ok((best, report))
}

/// Runs every row through the model and keeps embedding, logits and probs.
pub fn export_features(model: &MlpModel, ds: &TabularDataset) -> Result<Dataset> {
    let examples = ds
        .examples
        .iter()
        .map(|ex| {
            let out = model.forward(&ex.values)?;
            Ok(LabeledExample {
                id: ex.id.clone(),
                features: Features {
                    embedding: Some(out.embedding),
                    probs: Some(out.probs),
                    logits: Some(out.logits),
                },
                label: ex.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::validated(examples, ds.universe.clone(), Some(model.hidden), ds.role)
}
