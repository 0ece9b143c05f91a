//! A minimal adversarial-training obfuscator: a residual encoder-decoder
//! trained in a min-max loop against jointly trained private-attribute
//! classifiers, with utility heads and a distortion anchor.
//!
//! This is the reference point the substitution approach is compared
//! against: after training, the jointly trained adversary is fooled, but the
//! map is deterministic and stays close to the input, so a freshly trained
//! classifier recovers the private attribute. Outputs are tagged
//! "generic-adv" to make clear this is one representative of the family, not
//! a reproduction of any specific published system.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::{Dataset, Role};
use crate::error::{CoreError, Result};
use crate::eval::{attach_cross_entropy, frozen_probe_bindings, ProbeClassifier, ProbeConfig};
use crate::infer::Obfuscator;
use crate::infotheory::{EnumerableInstance, StochasticKernel};
use crate::model::INIT_SD;
use crate::rng::{self, Stream};
use crate::train::{cosine_lr, AdamW};

pub const METHOD_TAG: &str = "generic-adv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adversary_learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the reversed adversary loss in the obfuscator objective.
    pub adversary_weight: f64,
    pub utility_weight: f64,
    /// Weight of the mean squared displacement ‖x' − x‖²; keeps the map
    /// anchored to the sample space.
    pub distortion_weight: f64,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        // The obfuscator outpaces the adversary (higher rate, doubled
        // reversal weight): the min-max settles with the jointly trained
        // adversary fooled while the map itself stays near-invertible.
        AdvConfig {
            hidden: 32,
            epochs: 40,
            batch_size: 64,
            learning_rate: 2e-3,
            adversary_learning_rate: 3e-4,
            weight_decay: 1e-4,
            adversary_weight: 2.0,
            utility_weight: 1.0,
            distortion_weight: 0.5,
            head_hidden: vec![32],
            seed: 0,
        }
    }
}

/// Residual map `x' = x + W2·tanh(W1·x + b1) + b2` with the output layer
/// initialized to zero, so the untrained obfuscator is the identity. The
/// jointly trained adversaries (one per private attribute) and utility heads
/// ride along for evaluation.
#[derive(Debug, Clone)]
pub struct AdvObfuscator {
    input_dim: usize,
    params: BTreeMap<String, Tensor>,
    pub adversaries: Vec<ProbeClassifier>,
    pub utility_heads: Vec<ProbeClassifier>,
}

impl AdvObfuscator {
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::AdvInit);
        let normal = Normal::new(0.0, INIT_SD).unwrap();
        let w1: Vec<f64> = (0..input_dim * hidden).map(|_| normal.sample(&mut rng)).collect();
        let params = BTreeMap::from([
            ("obf.w1".to_string(), Tensor::matrix(input_dim, hidden, w1).unwrap()),
            ("obf.b1".to_string(), Tensor::vector(vec![0.0; hidden])),
            ("obf.w2".to_string(), Tensor::zeros(&[hidden, input_dim])),
            ("obf.b2".to_string(), Tensor::vector(vec![0.0; input_dim])),
        ]);
        AdvObfuscator { input_dim, params, adversaries: Vec::new(), utility_heads: Vec::new() }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Appends the map to a graph; returns `(residual, output)`.
    fn attach_map(&self, graph: &mut Graph, x: NodeId, trainable: bool) -> (NodeId, NodeId) {
        let leaf = |graph: &mut Graph, name: &str| {
            if trainable {
                graph.param(name)
            } else {
                graph.input(name)
            }
        };
        let w1 = leaf(graph, "obf.w1");
        let b1 = leaf(graph, "obf.b1");
        let w2 = leaf(graph, "obf.w2");
        let b2 = leaf(graph, "obf.b2");
        let lin = graph.matmul(x, w1);
        let biased = graph.add_bias(lin, b1);
        let act = graph.tanh(biased);
        let proj = graph.matmul(act, w2);
        let residual = graph.add_bias(proj, b2);
        let sum = graph.add(x, residual);
        (residual, sum)
    }

    fn bindings(&self, x: &Tensor) -> BTreeMap<String, Tensor> {
        let mut b: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        b.insert("x".into(), x.clone());
        b
    }

    /// Deterministic forward map.
    pub fn obfuscate(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(CoreError::validation(format!(
                "input width {} != {}",
                x.cols(),
                self.input_dim
            )));
        }
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let (_, out) = self.attach_map(&mut graph, xi, false);
        graph.set_output(out);
        graph.forward(&self.bindings(x))
    }
}

impl Obfuscator for AdvObfuscator {
    fn release(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        self.obfuscate(x)
    }
}

/// Alternating min-max training: per batch, (a) each adversary takes a
/// cross-entropy step on the private attribute from the current released
/// samples, (b) each utility head takes a step on its useful attribute,
/// (c) the obfuscator descends utility loss plus distortion minus the
/// adversary loss. Deterministic in the config seed.
pub fn train_adv(dataset: &Dataset, config: &AdvConfig) -> Result<AdvObfuscator> {
    let private: Vec<_> = dataset
        .schema()
        .iter()
        .filter(|a| a.role == Role::Private)
        .cloned()
        .collect();
    let useful: Vec<_> = dataset
        .schema()
        .iter()
        .filter(|a| a.role == Role::Useful)
        .cloned()
        .collect();
    if private.is_empty() || useful.is_empty() {
        return Err(CoreError::validation(
            "adversarial baseline needs at least one private and one useful attribute",
        ));
    }

    let d = dataset.dim();
    let mut obf = AdvObfuscator::init(d, config.hidden, config.seed);
    let head_config = ProbeConfig {
        hidden_layers: config.head_hidden.clone(),
        ..Default::default()
    };
    for (ordinal, attr) in private.iter().enumerate() {
        obf.adversaries.push(ProbeClassifier::init(
            &attr.name,
            attr.cardinality,
            d,
            &head_config,
            rng::mix(config.seed, 0xadf, ordinal as u64),
        ));
    }
    for (ordinal, attr) in useful.iter().enumerate() {
        obf.utility_heads.push(ProbeClassifier::init(
            &attr.name,
            attr.cardinality,
            d,
            &head_config,
            rng::mix(config.seed, 0x07f, ordinal as u64),
        ));
    }

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut obf_opt = AdamW::new();
    let mut adv_opts: Vec<AdamW> = obf.adversaries.iter().map(|_| AdamW::new()).collect();
    let mut util_opts: Vec<AdamW> = obf.utility_heads.iter().map(|_| AdamW::new()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        use rand::Rng;
        let mut rng = rng::substream(config.seed, Stream::AdvBatching, epoch as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        for chunk in perm.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.learning_rate);
            let head_lr = cosine_lr(step, total_steps, config.adversary_learning_rate);
            let x = crate::train::gather_rows(dataset, chunk);
            let released = obf.obfuscate(&x).map_err(|e| CoreError::TrainAbort {
                step,
                detail: format!("obfuscator forward: {e}"),
            })?;

            // (a) adversaries chase the private attributes.
            for (head, opt) in obf.adversaries.iter_mut().zip(&mut adv_opts) {
                let labels: Vec<usize> = {
                    let all = dataset.labels(&head.attribute)?;
                    chunk.iter().map(|&i| all[i]).collect()
                };
                head.ce_step(&released, &labels, opt, head_lr, config.weight_decay)?;
            }
            // (b) utility heads track the useful attributes.
            for (head, opt) in obf.utility_heads.iter_mut().zip(&mut util_opts) {
                let labels: Vec<usize> = {
                    let all = dataset.labels(&head.attribute)?;
                    chunk.iter().map(|&i| all[i]).collect()
                };
                head.ce_step(&released, &labels, opt, head_lr, config.weight_decay)?;
            }

            // (c) the obfuscator step through frozen heads.
            let mut graph = Graph::new();
            let xi = graph.input("x");
            let (residual, out) = obf.attach_map(&mut graph, xi, true);
            let mut terms = Vec::new();
            let mut coeffs = Vec::new();
            for head in &obf.adversaries {
                let labels: Vec<usize> = {
                    let all = dataset.labels(&head.attribute)?;
                    chunk.iter().map(|&i| all[i]).collect()
                };
                terms.push(attach_cross_entropy(head, &mut graph, out, &labels, false));
                coeffs.push(-config.adversary_weight);
            }
            for head in &obf.utility_heads {
                let labels: Vec<usize> = {
                    let all = dataset.labels(&head.attribute)?;
                    chunk.iter().map(|&i| all[i]).collect()
                };
                terms.push(attach_cross_entropy(head, &mut graph, out, &labels, false));
                coeffs.push(config.utility_weight);
            }
            let squared = graph.mul(residual, residual);
            let sum_sq = graph.sum_all(squared);
            let distortion = graph.scale(sum_sq, 1.0 / chunk.len() as f64);
            terms.push(distortion);
            coeffs.push(config.distortion_weight);
            let objective = graph.affine(terms, coeffs, 0.0);
            graph.set_output(objective);

            let mut bindings = obf.bindings(&x);
            for head in obf.adversaries.iter().chain(&obf.utility_heads) {
                frozen_probe_bindings(head, &mut bindings);
            }
            let value = graph
                .forward(&bindings)
                .map_err(|e| CoreError::TrainAbort { step, detail: e.to_string() })?
                .scalar_value();
            if !value.is_finite() {
                return Err(CoreError::TrainAbort {
                    step,
                    detail: format!("non-finite min-max objective {value}"),
                });
            }
            let grads = graph.backward()?;
            obf_opt.step(&mut obf.params, &grads, lr, config.weight_decay);
            step += 1;
        }
    }
    Ok(obf)
}

/// The deterministic map as a substitution kernel over an enumerable
/// instance: states map one-hot onto their distinct images. Returns the
/// kernel and the image feature rows (the pool), for exact diagnostics on
/// deterministic obfuscators.
pub fn deterministic_kernel(
    instance: &EnumerableInstance,
    obf: &AdvObfuscator,
) -> Result<(StochasticKernel, Tensor)> {
    let images = obf.obfuscate(&instance.state_features())?;
    let mut index: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    let mut pool_rows: Vec<Vec<f64>> = Vec::new();
    let mut assignment = Vec::with_capacity(instance.n_states());
    for s in 0..images.rows() {
        let row = images.row(s);
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let next = pool_rows.len();
        let slot = *index.entry(key).or_insert_with(|| {
            pool_rows.push(row.to_vec());
            next
        });
        assignment.push(slot);
    }
    let pool = pool_rows.len();
    let rows: Vec<Vec<f64>> = assignment
        .iter()
        .map(|&slot| {
            let mut row = vec![0.0; pool];
            row[slot] = 1.0;
            row
        })
        .collect();
    Ok((StochasticKernel { rows, pool_labels: None }, Tensor::from_rows(&pool_rows)?))
}
