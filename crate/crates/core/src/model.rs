//! The substitution model: an embedding MLP `f`, a learnable embedding table
//! `g` with one row per substitute sample, and the temperature-softmax
//! substitution probabilities
//!
//! `P(x' | x) = exp(cos(f(x), g(x')) / τ) / Σ_x'' exp(cos(f(x), g(x'')) / τ)`.
//!
//! `g` is a free table rather than a second encoder: each substitute sample
//! owns one trainable embedding row. Cosine similarity is computed on
//! guard-normalized rows, so rescaling any embedding leaves the probabilities
//! unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::{Standardization, SubstituteSet};
use crate::error::{CoreError, Result};
use crate::rng::{self, Stream};

pub const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture and temperature of a substitution model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths of the embedding network `f`.
    pub hidden_layers: Vec<usize>,
    /// Output width of `f` and row width of the `g` table.
    pub embed_dim: usize,
    /// Softmax temperature; smaller is sharper.
    pub tau: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_layers: vec![64],
            embed_dim: 32,
            tau: 0.01,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    fn validate(&self, input_dim: usize) -> Result<()> {
        let mut problems = Vec::new();
        if input_dim == 0 {
            problems.push("model: input dimension must be positive".into());
        }
        if self.embed_dim == 0 {
            problems.push("model.embed_dim: must be positive".into());
        }
        if self.hidden_layers.contains(&0) {
            problems.push("model.hidden_layers: layer sizes must be positive".into());
        }
        if !(self.tau > 0.0) {
            problems.push("model.tau: must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(problems))
        }
    }

    /// Layer widths including input and embedding output.
    fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(input_dim);
        w.extend_from_slice(&self.hidden_layers);
        w.push(self.embed_dim);
        w
    }
}

/// Row-stochastic batch × pool-size probability matrix.
#[derive(Debug, Clone)]
pub struct ProbMatrix(Tensor);

impl ProbMatrix {
    /// Validates row-stochasticity: entries in [0, 1], rows sum to 1 ± 1e-9.
    pub fn new(t: Tensor) -> Result<Self> {
        for i in 0..t.rows() {
            let row = t.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(CoreError::validation(format!(
                    "prob matrix row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(ProbMatrix(t))
    }

    pub fn batch(&self) -> usize {
        self.0.rows()
    }

    pub fn pool(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Trained state of the substitution mechanism.
#[derive(Debug, Clone)]
pub struct SubstitutionModel {
    config: ModelConfig,
    input_dim: usize,
    params: BTreeMap<String, Tensor>,
    substitute: SubstituteSet,
    standardization: Option<Standardization>,
}

pub const G_TABLE: &str = "g.table";

pub fn weight_name(layer: usize) -> String {
    format!("f.w{layer}")
}

pub fn bias_name(layer: usize) -> String {
    format!("f.b{layer}")
}

impl SubstitutionModel {
    /// Fresh model with `f` weights and `g` rows drawn from Normal(0, 0.02)
    /// and zero biases; deterministic in `seed`.
    pub fn init(
        config: ModelConfig,
        input_dim: usize,
        substitute: SubstituteSet,
        standardization: Option<Standardization>,
        seed: u64,
    ) -> Result<Self> {
        config.validate(input_dim)?;
        if substitute.is_empty() {
            return Err(CoreError::validation("substitute set is empty"));
        }
        if substitute.features.cols() != input_dim {
            return Err(CoreError::validation(format!(
                "substitute feature width {} != input dim {input_dim}",
                substitute.features.cols()
            )));
        }
        let mut rng = rng::stream(seed, Stream::ModelInit);
        let normal = Normal::new(0.0, INIT_SD).unwrap();
        let widths = config.widths(input_dim);
        let mut params = BTreeMap::new();
        for layer in 0..widths.len() - 1 {
            let (win, wout) = (widths[layer], widths[layer + 1]);
            let w: Vec<f64> = (0..win * wout).map(|_| normal.sample(&mut rng)).collect();
            params.insert(weight_name(layer), Tensor::matrix(win, wout, w)?);
            params.insert(bias_name(layer), Tensor::vector(vec![0.0; wout]));
        }
        let k = substitute.len();
        let g: Vec<f64> = (0..k * config.embed_dim).map(|_| normal.sample(&mut rng)).collect();
        params.insert(G_TABLE.into(), Tensor::matrix(k, config.embed_dim, g)?);
        Ok(SubstitutionModel { config, input_dim, params, substitute, standardization })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn substitute(&self) -> &SubstituteSet {
        &self.substitute
    }

    pub fn pool_size(&self) -> usize {
        self.substitute.len()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn layer_count(&self) -> usize {
        self.config.hidden_layers.len() + 1
    }

    /// Appends the embedding network to `graph`, rooted at `x`; returns the
    /// embedding node. Hidden layers use the configured activation, the
    /// output layer is linear.
    pub fn attach_embedding(&self, graph: &mut Graph, x: NodeId) -> NodeId {
        let layers = self.layer_count();
        let mut h = x;
        for layer in 0..layers {
            let w = graph.param(weight_name(layer));
            let b = graph.param(bias_name(layer));
            let lin = graph.matmul(h, w);
            h = graph.add_bias(lin, b);
            if layer + 1 < layers {
                h = match self.config.activation {
                    Activation::Tanh => graph.tanh(h),
                    Activation::Relu => graph.relu(h),
                };
            }
        }
        h
    }

    /// Appends the full probability head (cosine similarities against the
    /// `g` table at temperature τ, row softmax) and returns the probability
    /// node.
    pub fn attach_probs(&self, graph: &mut Graph, x: NodeId) -> NodeId {
        let f_out = self.attach_embedding(graph, x);
        let f_norm = graph.row_l2norm(f_out);
        let g = graph.param(G_TABLE);
        let g_norm = graph.row_l2norm(g);
        let sims = graph.matmul_t(f_norm, g_norm);
        let scaled = graph.scale(sims, 1.0 / self.config.tau);
        graph.row_softmax(scaled)
    }

    /// Leaf bindings for the current parameters plus the given batch.
    pub fn bindings(&self, x: &Tensor) -> BTreeMap<String, Tensor> {
        let mut b: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        b.insert("x".into(), x.clone());
        b
    }

    /// Embeddings `f(x)` for a batch of rows.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let out = self.attach_embedding(&mut graph, xi);
        graph.set_output(out);
        graph.forward(&self.bindings(x))
    }

    /// Substitution probabilities for a batch of rows.
    pub fn substitution_probs(&self, x: &Tensor) -> Result<ProbMatrix> {
        if x.rows() == 0 {
            return Err(CoreError::validation("empty batch"));
        }
        let mut graph = Graph::new();
        let xi = graph.input("x");
        let out = self.attach_probs(&mut graph, xi);
        graph.set_output(out);
        ProbMatrix::new(graph.forward(&self.bindings(x))?)
    }

    /// Serializes the model to a single JSON checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let ck = Checkpoint {
            format_version: 1,
            config_hash: config_hash.to_string(),
            config: self.config.clone(),
            input_dim: self.input_dim,
            params: self.params.clone(),
            substitute: self.substitute.clone(),
            standardization: self.standardization.clone(),
        };
        let json = serde_json::to_string_pretty(&ck)
            .map_err(|e| CoreError::State(format!("checkpoint serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model and the config hash it was
    /// written under.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&json)
            .map_err(|e| CoreError::State(format!("checkpoint parse: {e}")))?;
        if ck.format_version != 1 {
            return Err(CoreError::State(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        Ok((
            SubstitutionModel {
                config: ck.config,
                input_dim: ck.input_dim,
                params: ck.params,
                substitute: ck.substitute,
                standardization: ck.standardization,
            },
            ck.config_hash,
        ))
    }
}

/// On-disk checkpoint layout (format_version 1): model architecture,
/// all parameters at full 64-bit precision, the substitute pool (indices,
/// cached rows, labels) and the feature standardization. JSON round-trips
/// the f64 values exactly.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_hash: String,
    config: ModelConfig,
    input_dim: usize,
    params: BTreeMap<String, Tensor>,
    substitute: SubstituteSet,
    standardization: Option<Standardization>,
}
