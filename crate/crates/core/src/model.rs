//! Linear-softmax classifier: local SGD, update application and per-class
//! evaluation.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, LOG_EPSILON};
use crate::rng;

/// Schema tag written as the first line of a model checkpoint.
pub const MODEL_SCHEMA: &str = "# hscsfl-model v1";

/// Weights (`features × classes`), bias and the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub version: u64,
}

/// A client's flattened parameter delta `m* - m` (weights row-major, then
/// bias).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub client_id: usize,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn new(client_id: usize, values: Vec<f64>) -> Self {
        GradientVector { client_id, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            local_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

impl ModelState {
    pub fn zeros(features: usize, classes: usize) -> Self {
        ModelState {
            weights: Matrix::zeros(features, classes),
            bias: vec![0.0; classes],
            version: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.parameter_count());
        flat.extend_from_slice(self.weights.data());
        flat.extend_from_slice(&self.bias);
        flat
    }

    pub fn from_flat(features: usize, classes: usize, flat: &[f64], version: u64) -> Result<Self> {
        let n = features * classes;
        if flat.len() != n + classes {
            return Err(Error::invalid(format!(
                "flat model has {} values, expected {}",
                flat.len(),
                n + classes
            )));
        }
        Ok(ModelState {
            weights: Matrix::new(features, classes, flat[..n].to_vec())?,
            bias: flat[n..].to_vec(),
            version,
        })
    }

    /// Logits for one input, written into `out` (length = classes).
    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let c = self.classes();
        out.copy_from_slice(&self.bias);
        let w = self.weights.data();
        for (j, &xj) in x.iter().enumerate() {
            // Zero pixels contribute exactly nothing; most MNIST pixels are 0.
            if xj == 0.0 {
                continue;
            }
            let row = &w[j * c..(j + 1) * c];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xj * wv;
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes()];
        self.logits_into(x, &mut out);
        out
    }

    /// Arg-max class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        numerics::argmax(&self.logits(x))
    }

    /// Mean cross-entropy over `indices` and its gradient (flattened like the
    /// model).
    pub fn loss_and_gradient(&self, data: &LabeledDataset, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameter_count()];
        let loss = self.accumulate_gradient(data, indices, &mut grad);
        let scale = 1.0 / indices.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    /// Adds Σ ∂loss/∂θ over `indices` into `grad`, returning Σ loss.
    fn accumulate_gradient(&self, data: &LabeledDataset, indices: &[usize], grad: &mut [f64]) -> f64 {
        let c = self.classes();
        let nw = self.weights.data().len();
        let mut probs = vec![0.0; c];
        let mut loss = 0.0;
        for &i in indices {
            let x = data.image(i);
            let y = data.label(i);
            self.logits_into(x, &mut probs);
            numerics::softmax_in_place(&mut probs);
            loss -= (probs[y] + LOG_EPSILON).ln();
            probs[y] -= 1.0;
            let (gw, gb) = grad.split_at_mut(nw);
            for (j, &xj) in x.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                let row = &mut gw[j * c..(j + 1) * c];
                for (g, d) in row.iter_mut().zip(&probs) {
                    *g += xj * d;
                }
            }
            for (g, d) in gb.iter_mut().zip(&probs) {
                *g += d;
            }
        }
        loss
    }

    fn check_compatible(&self, data: &LabeledDataset) -> Result<()> {
        if data.dim() != self.features() {
            return Err(Error::invalid(format!(
                "data has {} features, model expects {}",
                data.dim(),
                self.features()
            )));
        }
        if data.num_classes() > self.classes() {
            return Err(Error::invalid(format!(
                "data has {} classes, model has {}",
                data.num_classes(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// Writes the flat parameter vector as text, one value per line.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{MODEL_SCHEMA} features={} classes={} version={}",
            self.features(),
            self.classes(),
            self.version
        )?;
        for v in self.flatten() {
            writeln!(out, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::invalid(format!("checkpoint read failed: {e}")))?
            .ok_or_else(|| Error::invalid("empty checkpoint"))?;
        let rest = header
            .strip_prefix(MODEL_SCHEMA)
            .ok_or_else(|| Error::invalid(format!("unknown checkpoint header {header:?}")))?;
        let mut fields = [None; 3];
        for tok in rest.split_whitespace() {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad header field {tok:?}")))?;
            let slot = match key {
                "features" => 0,
                "classes" => 1,
                "version" => 2,
                _ => return Err(Error::invalid(format!("unknown header field {key:?}"))),
            };
            fields[slot] = Some(
                value
                    .parse::<u64>()
                    .map_err(|e| Error::invalid(format!("bad header value {tok:?}: {e}")))?,
            );
        }
        let [Some(features), Some(classes), Some(version)] = fields else {
            return Err(Error::invalid("checkpoint header is missing fields"));
        };
        let mut flat = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::invalid(format!("checkpoint read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            flat.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad checkpoint value {line:?}: {e}")))?,
            );
        }
        ModelState::from_flat(features as usize, classes as usize, &flat, version)
    }
}

/// Runs `local_epochs` of mini-batch SGD on mean cross-entropy from `start`
/// and returns the parameter delta. Each epoch visits the data in a fresh
/// order drawn from `cfg.seed`; the final short batch is kept.
pub fn local_train(
    start: &ModelState,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    client_id: usize,
) -> Result<GradientVector> {
    if data.is_empty() {
        return Err(Error::invalid(format!("client {client_id} has no training data")));
    }
    cfg.validate()?;
    start.check_compatible(data)?;

    let mut model = start.clone();
    let mut rng = rng::rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.parameter_count()];
    let nw = model.weights.data().len();

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.accumulate_gradient(data, batch, &mut grad);
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.data_mut().iter_mut().zip(&grad[..nw]) {
                *w -= step * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad[nw..]) {
                *b -= step * g;
            }
        }
    }

    let delta = model
        .flatten()
        .iter()
        .zip(start.flatten())
        .map(|(trained, initial)| trained - initial)
        .collect();
    Ok(GradientVector::new(client_id, delta))
}

/// `global + eta × aggregate`, with the version bumped.
pub fn apply_update(global: &ModelState, aggregate: &GradientVector, eta: f64) -> Result<ModelState> {
    if aggregate.len() != global.parameter_count() {
        return Err(Error::invalid(format!(
            "update has {} values, model has {}",
            aggregate.len(),
            global.parameter_count()
        )));
    }
    let flat: Vec<f64> = global
        .flatten()
        .iter()
        .zip(&aggregate.values)
        .map(|(m, g)| m + eta * g)
        .collect();
    ModelState::from_flat(global.features(), global.classes(), &flat, global.version + 1)
}

/// Per-class accuracy and the number of samples behind each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub accuracy: Vec<f64>,
    pub support: Vec<usize>,
}

impl ClassAccuracy {
    /// Classes without any sample; their accuracy is reported as 0.
    pub fn missing_classes(&self) -> Vec<usize> {
        self.support
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Support-weighted mean, i.e. overall accuracy.
    pub fn weighted_mean(&self) -> f64 {
        let total: usize = self.support.iter().sum();
        let correct: f64 = self
            .accuracy
            .iter()
            .zip(&self.support)
            .map(|(a, &s)| a * s as f64)
            .sum();
        correct / total as f64
    }
}

fn correct_counts(state: &ModelState, data: &LabeledDataset) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    state.check_compatible(data)?;
    let c = state.classes();
    let mut correct = vec![0; c];
    let mut support = vec![0; c];
    let mut logits = vec![0.0; c];
    for i in 0..data.len() {
        let y = data.label(i);
        state.logits_into(data.image(i), &mut logits);
        support[y] += 1;
        if numerics::argmax(&logits) == y {
            correct[y] += 1;
        }
    }
    Ok((correct, support))
}

/// Fraction of correct predictions among samples of each true class.
pub fn evaluate_per_class(state: &ModelState, data: &LabeledDataset) -> Result<ClassAccuracy> {
    let (correct, support) = correct_counts(state, data)?;
    let accuracy = correct
        .iter()
        .zip(&support)
        .map(|(&k, &n)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
        .collect();
    Ok(ClassAccuracy { accuracy, support })
}

/// Overall fraction correct.
pub fn global_accuracy(state: &ModelState, data: &LabeledDataset) -> Result<f64> {
    let (correct, _) = correct_counts(state, data)?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}
