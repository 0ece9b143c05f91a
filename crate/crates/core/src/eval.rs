//! The evaluation protocol: probing-attack classifier training, per-attribute
//! accuracy, normalized accuracy gain (NAG), its mean trade-off summary
//! (mNAG), majority-guess and no-suppression baselines, and evaluation with
//! a classifier that never saw released data.
//!
//! The probing attack queries the released-data interface repeatedly on the
//! attacker's share of the training set, collects `(released sample, label)`
//! pairs, and trains a fresh classifier on them. Reported accuracies are
//! always measured on released test samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Dataset, Role};
use crate::error::{CoreError, Result};
use crate::infer::Obfuscator;
use crate::model::{Activation, INIT_SD};
use crate::rng::{self, Stream};
use crate::train::{cosine_lr, AdamW};

/// A small MLP classifier head for one attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeClassifier {
    pub attribute: String,
    pub cardinality: usize,
    input_dim: usize,
    hidden_layers: Vec<usize>,
    activation: Activation,
    params: BTreeMap<String, Tensor>,
}

/// Probe architecture and training lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_layers: vec![64],
            activation: Activation::Tanh,
            epochs: 40,
            batch_size: 128,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
        }
    }
}

/// What the attacker gets: a share of the training data, query repeats per
/// sample, and the probe training length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackBudget {
    /// Fraction of the training set available to the attacker, in (0, 1].
    pub data_fraction: f64,
    /// Released draws collected per original sample.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget { data_fraction: 1.0, repeats: 4, seed: 0 }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            problems.push("attack.data_fraction: must be in (0, 1]".to_string());
        }
        if self.repeats == 0 {
            problems.push("attack.repeats: must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(problems))
        }
    }
}

impl ProbeClassifier {
    pub fn init(
        attribute: &str,
        cardinality: usize,
        input_dim: usize,
        config: &ProbeConfig,
        seed: u64,
    ) -> Self {
        let mut rng = rng::stream(seed, Stream::ProbeInit);
        let normal = Normal::new(0.0, INIT_SD).unwrap();
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&config.hidden_layers);
        widths.push(cardinality);
        let mut params = BTreeMap::new();
        for layer in 0..widths.len() - 1 {
            let (win, wout) = (widths[layer], widths[layer + 1]);
            let w: Vec<f64> = (0..win * wout).map(|_| normal.sample(&mut rng)).collect();
            params.insert(format!("w{layer}"), Tensor::matrix(win, wout, w).unwrap());
            params.insert(format!("b{layer}"), Tensor::vector(vec![0.0; wout]));
        }
        ProbeClassifier {
            attribute: attribute.to_string(),
            cardinality,
            input_dim,
            hidden_layers: config.hidden_layers.clone(),
            activation: config.activation,
            params,
        }
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn attach_logits(&self, graph: &mut Graph, x: usize) -> usize {
        let layers = self.hidden_layers.len() + 1;
        let mut h = x;
        for layer in 0..layers {
            let w = graph.param(format!("w{layer}"));
            let b = graph.param(format!("b{layer}"));
            let lin = graph.matmul(h, w);
            h = graph.add_bias(lin, b);
            if layer + 1 < layers {
                h = match self.activation {
                    Activation::Tanh => graph.tanh(h),
                    Activation::Relu => graph.relu(h),
                };
            }
        }
        h
    }

    fn bindings(&self, x: &Tensor) -> BTreeMap<String, Tensor> {
        let mut b: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        b.insert("x".into(), x.clone());
        b
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let out = self.attach_logits(&mut graph, xi);
        graph.set_output(out);
        graph.forward(&self.bindings(x))
    }

    /// Row-softmax class posteriors.
    pub fn posteriors(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let logits = self.attach_logits(&mut graph, xi);
        let soft = graph.row_softmax(logits);
        graph.set_output(soft);
        graph.forward(&self.bindings(x))
    }

    /// Argmax class per row; ties break toward the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// One cross-entropy gradient step on a batch; returns the batch loss.
    pub fn ce_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        optimizer: &mut AdamW,
        lr: f64,
        weight_decay: f64,
    ) -> Result<f64> {
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let ce = attach_cross_entropy(self, &mut graph, xi, labels, true);
        graph.set_output(ce);
        let value = graph.forward(&self.bindings(x))?.scalar_value();
        let grads = graph.backward()?;
        optimizer.step(&mut self.params, &grads, lr, weight_decay);
        Ok(value)
    }

    /// Supervised cross-entropy training with the same optimizer and cosine
    /// schedule as the substitution model.
    pub fn fit(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        config: &ProbeConfig,
        seed: u64,
    ) -> Result<()> {
        let n = x.rows();
        if n == 0 || labels.len() != n {
            return Err(CoreError::validation("probe fit: empty or mismatched data"));
        }
        let batch_size = config.batch_size.max(2).min(n.max(2));
        let steps_per_epoch = n.div_ceil(batch_size);
        let total_steps = config.epochs * steps_per_epoch;
        let mut optimizer = AdamW::new();
        let mut step = 0usize;
        for epoch in 0..config.epochs {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = rng::substream(seed, Stream::ProbeBatching, epoch as u64);
            use rand::Rng;
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            for chunk in perm.chunks(batch_size) {
                let lr = cosine_lr(step, total_steps, config.learning_rate);
                let bx = gather(x, chunk);
                let blabels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                self.ce_step(&bx, &blabels, &mut optimizer, lr, config.weight_decay)
                    .map_err(|e| CoreError::TrainAbort {
                        step,
                        detail: format!("probe '{}': {e}", self.attribute),
                    })?;
                step += 1;
            }
        }
        Ok(())
    }
}

/// Appends the mean cross-entropy of this probe's predictions against
/// `labels` to a graph rooted at `x`. With `trainable` false the probe's
/// parameters enter as non-trainable leaves (frozen head), which is what the
/// min-max baseline needs when updating the obfuscator through a head.
pub fn attach_cross_entropy(
    probe: &ProbeClassifier,
    graph: &mut Graph,
    x: usize,
    labels: &[usize],
    trainable: bool,
) -> usize {
    let layers = probe.hidden_layers.len() + 1;
    let mut h = x;
    for layer in 0..layers {
        let prefix = if trainable { String::new() } else { format!("{}.", probe.attribute) };
        let w = if trainable {
            graph.param(format!("w{layer}"))
        } else {
            graph.input(format!("{prefix}w{layer}"))
        };
        let b = if trainable {
            graph.param(format!("b{layer}"))
        } else {
            graph.input(format!("{prefix}b{layer}"))
        };
        let lin = graph.matmul(h, w);
        h = graph.add_bias(lin, b);
        if layer + 1 < layers {
            h = match probe.activation {
                Activation::Tanh => graph.tanh(h),
                Activation::Relu => graph.relu(h),
            };
        }
    }
    let soft = graph.row_softmax(h);
    let b = labels.len();
    let mut mask = vec![0.0; b * probe.cardinality];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * probe.cardinality + l] = 1.0;
    }
    let mask = graph.constant(Tensor::matrix(b, probe.cardinality, mask).unwrap());
    let picked = graph.mul(soft, mask);
    let mass = graph.row_sum(picked);
    let clamped = graph.clamp_min(mass, crate::loss::PROB_CLAMP);
    let logs = graph.ln(clamped);
    let mean = graph.mean_all(logs);
    graph.scale(mean, -1.0)
}

/// Frozen-parameter bindings for [`attach_cross_entropy`] with
/// `trainable = false`.
pub fn frozen_probe_bindings(probe: &ProbeClassifier, into: &mut BTreeMap<String, Tensor>) {
    for (name, value) in &probe.params {
        into.insert(format!("{}.{name}", probe.attribute), value.clone());
    }
}

fn gather(x: &Tensor, indices: &[usize]) -> Tensor {
    let d = x.cols();
    let mut values = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        values.extend_from_slice(x.row(i));
    }
    Tensor::matrix(indices.len(), d, values).unwrap()
}

/// Argmax-match rate of the probe on labeled rows.
pub fn accuracy(probe: &ProbeClassifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.rows() == 0 || labels.len() != x.rows() {
        return Err(CoreError::validation("accuracy: empty or mismatched data"));
    }
    let predictions = probe.predict(x)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Normalized accuracy gain: `max(0, (acc − guess) / (ceiling − guess))`.
/// Undefined when the ceiling does not exceed the guess rate (the attribute
/// is unlearnable even without suppression).
pub fn nag(acc: f64, acc_guessing: f64, acc_no_suppression: f64) -> Result<f64> {
    if acc_no_suppression <= acc_guessing {
        return Err(CoreError::validation(format!(
            "nag undefined: ceiling {acc_no_suppression} <= guess rate {acc_guessing}"
        )));
    }
    Ok(((acc - acc_guessing) / (acc_no_suppression - acc_guessing)).max(0.0))
}

/// Mean NAG over useful and hidden attributes minus mean NAG over private
/// attributes.
pub fn mnag(rows: &[AttrMetrics]) -> Result<f64> {
    let preserved: Vec<f64> = rows
        .iter()
        .filter(|r| matches!(r.role, Role::Useful | Role::Hidden))
        .map(|r| r.nag)
        .collect();
    let private: Vec<f64> =
        rows.iter().filter(|r| r.role == Role::Private).map(|r| r.nag).collect();
    if preserved.is_empty() || private.is_empty() {
        return Err(CoreError::validation(
            "mnag needs at least one private and one useful-or-hidden attribute",
        ));
    }
    Ok(preserved.iter().sum::<f64>() / preserved.len() as f64
        - private.iter().sum::<f64>() / private.len() as f64)
}

/// Collects released training pairs and fits a fresh adversarial classifier
/// on them.
pub fn probing_attack(
    obfuscator: &dyn Obfuscator,
    attacker_data: &Dataset,
    attribute: &str,
    budget: &AttackBudget,
    probe_config: &ProbeConfig,
) -> Result<ProbeClassifier> {
    budget.validate()?;
    let attr = attacker_data.attribute(attribute)?.clone();
    let share = attacker_share(attacker_data, budget)?;
    let labels = share.labels(attribute)?;

    let n = share.len();
    let d = share.dim();
    let mut released = Vec::with_capacity(budget.repeats * n * d);
    let mut tiled_labels = Vec::with_capacity(budget.repeats * n);
    for r in 0..budget.repeats {
        let draw = obfuscator
            .release(share.features(), rng::mix(budget.seed, 0x50524f4245, r as u64))?;
        released.extend_from_slice(draw.values());
        tiled_labels.extend_from_slice(labels);
    }
    let released = Tensor::matrix(budget.repeats * n, d, released)?;

    let mut probe =
        ProbeClassifier::init(attribute, attr.cardinality, d, probe_config, budget.seed);
    probe.fit(&released, &tiled_labels, probe_config, budget.seed)?;
    Ok(probe)
}

/// The attacker's share: the first `fraction` of a seeded permutation.
fn attacker_share(data: &Dataset, budget: &AttackBudget) -> Result<Dataset> {
    if budget.data_fraction >= 1.0 {
        return Ok(data.clone());
    }
    let n = data.len();
    let take = ((n as f64) * budget.data_fraction).floor().max(1.0) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(budget.seed, Stream::ProbeBatching, u64::MAX);
    use rand::Rng;
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    data.subset(&perm[..take])
}

/// Majority-guess floor and no-suppression ceiling for one attribute:
/// the test-set frequency of the training majority class, and the accuracy
/// of a probe trained and evaluated on original (unreleased) features.
/// Returns the ceiling probe so callers can reuse it.
pub fn baselines(
    train: &Dataset,
    test: &Dataset,
    attribute: &str,
    probe_config: &ProbeConfig,
    seed: u64,
) -> Result<(f64, f64, ProbeClassifier)> {
    let attr = train.attribute(attribute)?.clone();
    let train_marginal = train.marginal(attribute)?;
    let majority = train_marginal
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let test_labels = test.labels(attribute)?;
    let acc_guessing =
        test_labels.iter().filter(|&&l| l == majority).count() as f64 / test_labels.len() as f64;

    let mut ceiling_probe =
        ProbeClassifier::init(attribute, attr.cardinality, train.dim(), probe_config, seed);
    ceiling_probe.fit(train.features(), train.labels(attribute)?, probe_config, seed)?;
    let acc_no_suppression = accuracy(&ceiling_probe, test.features(), test_labels)?;
    Ok((acc_guessing, acc_no_suppression, ceiling_probe))
}

/// Accuracy of a classifier trained only on original data when evaluated on
/// released test data.
pub fn unfinetuned_eval(
    ceiling_probe: &ProbeClassifier,
    released_test: &Tensor,
    test_labels: &[usize],
) -> Result<f64> {
    accuracy(ceiling_probe, released_test, test_labels)
}

/// Per-attribute evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttrMetrics {
    pub attribute: String,
    pub role: Role,
    pub acc: f64,
    pub acc_guessing: f64,
    pub acc_no_suppression: f64,
    pub nag: f64,
    /// Only for useful/hidden attributes: the original-data classifier's
    /// accuracy on released test data, and its NAG.
    pub acc_unfinetuned: Option<f64>,
    pub nag_unfinetuned: Option<f64>,
}

/// The full evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<AttrMetrics>,
    pub mnag: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn row(&self, attribute: &str) -> Option<&AttrMetrics> {
        self.rows.iter().find(|r| r.attribute == attribute)
    }

    /// Flat CSV: one row per attribute.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "attribute,role,acc,acc_guessing,acc_no_suppr,nag")?;
        for r in &self.rows {
            let role = match r.role {
                Role::Private => "private",
                Role::Useful => "useful",
                Role::Hidden => "hidden",
            };
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.attribute, role, r.acc, r.acc_guessing, r.acc_no_suppression, r.nag
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::State(format!("report serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        format!("mNAG = {:.1}%", self.mnag * 100.0)
    }
}

/// Runs the whole protocol against an obfuscator: baselines, probing attack
/// and NAG per attribute (name order), the unfinetuned column for preserved
/// attributes, and mNAG.
pub fn evaluate(
    obfuscator: &dyn Obfuscator,
    train: &Dataset,
    test: &Dataset,
    budget: &AttackBudget,
    probe_config: &ProbeConfig,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut names: Vec<String> =
        train.schema().iter().map(|a| a.name.clone()).collect();
    names.sort();

    let released_test =
        obfuscator.release(test.features(), rng::mix(budget.seed, 0x5445535452454c, 0))?;

    let mut rows = Vec::with_capacity(names.len());
    for (ordinal, name) in names.iter().enumerate() {
        let role = train.attribute(name)?.role;
        let attr_seed = rng::mix(budget.seed, 0xa77a, ordinal as u64);
        let (acc_guessing, acc_no_suppression, ceiling_probe) =
            baselines(train, test, name, probe_config, attr_seed)?;

        let probe = probing_attack(
            obfuscator,
            train,
            name,
            &AttackBudget { seed: attr_seed, ..budget.clone() },
            probe_config,
        )?;
        let test_labels = test.labels(name)?;
        let acc = accuracy(&probe, &released_test, test_labels)?;
        let nag_value = nag(acc, acc_guessing, acc_no_suppression)?;

        let (acc_unf, nag_unf) = if matches!(role, Role::Useful | Role::Hidden) {
            let acc_u = unfinetuned_eval(&ceiling_probe, &released_test, test_labels)?;
            (Some(acc_u), Some(nag(acc_u, acc_guessing, acc_no_suppression)?))
        } else {
            (None, None)
        };

        rows.push(AttrMetrics {
            attribute: name.clone(),
            role,
            acc,
            acc_guessing,
            acc_no_suppression,
            nag: nag_value,
            acc_unfinetuned: acc_unf,
            nag_unfinetuned: nag_unf,
        });
    }
    let mnag_value = mnag(&rows)?;
    Ok(MetricsReport { rows, mnag: mnag_value, config_hash: config_hash.to_string(), seed: budget.seed })
}
