//! Mini-batch gradient training of the substitution model.
//!
//! Each step computes the substitution probabilities for a fresh batch,
//! evaluates the batch loss, backpropagates, and applies a decoupled
//! weight-decay adaptive-moment update under a cosine learning-rate
//! schedule. Everything is deterministic in `(config, dataset, seed)`; a
//! non-finite loss aborts the run loudly with the step index and the last
//! loss snapshot.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{self, Dataset};
use crate::error::{CoreError, Result};
use crate::loss::{self, BatchLabels, LossBreakdown};
use crate::model::SubstitutionModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lambda: 1.0,
            mu: 0.2,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("train.epochs: must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push("train.batch_size: must be >= 2".to_string());
        }
        if !(self.learning_rate >= 0.0) {
            problems.push("train.learning_rate: must be >= 0".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("train.weight_decay: must be >= 0".to_string());
        }
        if !(self.lambda >= 0.0) {
            problems.push("train.lambda: must be >= 0".to_string());
        }
        if !(self.mu >= 0.0) {
            problems.push("train.mu: must be >= 0".to_string());
        }
        if self.log_every == 0 {
            problems.push("train.log_every: must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(problems))
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    pub wall_ms: f64,
}

/// Newline-delimited record log of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for step in &self.steps {
            let line = serde_json::to_string(step)
                .map_err(|e| CoreError::State(format!("log serialize: {e}")))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn final_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Adaptive-moment optimizer state with decoupled weight decay:
/// `param ← param − lr·m̂/(√v̂ + ε) − lr·wd·param` with bias-corrected
/// moments, β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One optimizer step over every parameter that received a gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for i in 0..param.len() {
                let g = grad.values()[i];
                let mi = b1 * m.values()[i] + (1.0 - b1) * g;
                let vi = b2 * v.values()[i] + (1.0 - b2) * g * g;
                m.values_mut()[i] = mi;
                v.values_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = param.values()[i];
                param.values_mut()[i] = p - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * p;
            }
        }
    }
}

/// Trains the model on `train_set` and returns it with the step log.
pub fn train(
    mut model: SubstitutionModel,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(SubstitutionModel, TrainLog)> {
    config.validate()?;
    verify_substitute_source(&model, train_set)?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let constant = run_constant_c(&model, train_set, config)?;

    let mut optimizer = AdamW::new();
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let epoch_batches = data::batches(n, config.batch_size, config.seed, epoch as u64)?;
        for batch in epoch_batches {
            let lr = cosine_lr(step, total_steps, config.learning_rate);

            let x = gather_rows(train_set, &batch);
            let labels = BatchLabels::gather(train_set, &batch, model.substitute())?;

            let mut graph = Graph::new();
            let xi = graph.input("x");
            let probs = model.attach_probs(&mut graph, xi);
            let nodes = loss::attach_loss_total(&mut graph, probs, &labels, config.lambda, config.mu);
            graph.set_output(nodes.total);

            graph.forward(&model.bindings(&x)).map_err(|e| CoreError::TrainAbort {
                step,
                detail: e.to_string(),
            })?;
            let breakdown = loss::breakdown_from_graph(
                &graph,
                &nodes,
                config.lambda,
                config.mu,
                Some(constant),
            );
            if !breakdown.is_finite() {
                return Err(CoreError::TrainAbort {
                    step,
                    detail: format!(
                        "non-finite loss: {}",
                        serde_json::to_string(&breakdown).unwrap_or_default()
                    ),
                });
            }

            let grads = graph.backward()?;
            optimizer.step(model.params_mut(), &grads, lr, config.weight_decay);

            if step.is_multiple_of(config.log_every) || step + 1 == total_steps {
                log.steps.push(TrainStep {
                    step,
                    loss: breakdown,
                    learning_rate: lr,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
            step += 1;
        }
    }
    Ok((model, log))
}

/// The run's bound offset from the training-set useful marginals.
pub fn run_constant_c(
    model: &SubstitutionModel,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    let useful = train_set.names_with_role(crate::data::Role::Useful);
    let private = train_set.names_with_role(crate::data::Role::Private);
    let mut entropies = Vec::with_capacity(useful.len());
    for name in &useful {
        let marginal = train_set.marginal(name)?;
        entropies.push(
            -marginal.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>(),
        );
    }
    Ok(loss::constant_c(
        private.len(),
        useful.len(),
        config.lambda,
        config.mu,
        model.pool_size(),
        &entropies,
    )
    .value)
}

pub fn gather_rows(dataset: &Dataset, indices: &[usize]) -> Tensor {
    let d = dataset.dim();
    let mut values = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        values.extend_from_slice(dataset.features().row(i));
    }
    Tensor::matrix(indices.len(), d, values).unwrap()
}

fn verify_substitute_source(model: &SubstitutionModel, train_set: &Dataset) -> Result<()> {
    let sub = model.substitute();
    for (slot, &idx) in sub.indices.iter().enumerate() {
        if idx >= train_set.len() {
            return Err(CoreError::validation(format!(
                "substitute index {idx} outside the training set"
            )));
        }
        if sub.features.row(slot) != train_set.features().row(idx) {
            return Err(CoreError::validation(format!(
                "substitute row {slot} does not match training row {idx}"
            )));
        }
    }
    Ok(())
}
