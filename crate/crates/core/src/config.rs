//! Experiment configuration: a sectioned key/value (TOML) file describing
//! the data source, model, training, attack budget, optional adversarial
//! baseline, diagnostics toggles and output location. Validation collects
//! every violation with a path into the config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Role;
use crate::error::{CoreError, Result};
use crate::model::Activation;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub adv: AdvSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Fraction of rows in the training split when no explicit test file is
    /// given.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub csv: Option<CsvSection>,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSection {
    pub n_samples: usize,
    /// 0 means exactly the prototype blocks.
    #[serde(default)]
    pub feature_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    pub attributes: Vec<AttributeSection>,
    #[serde(default)]
    pub correlations: Vec<CorrelationSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSection {
    pub name: String,
    pub cardinality: usize,
    pub role: Role,
    /// Class marginal; uniform when omitted.
    #[serde(default)]
    pub marginal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationSection {
    pub a: String,
    pub b: String,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSection {
    pub path: String,
    /// Separate held-out file; when absent the training file is split.
    #[serde(default)]
    pub test_path: Option<String>,
    pub attributes: Vec<AttributeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_substitute_size")]
    pub substitute_size: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_embed_dim() -> usize {
    32
}
fn default_tau() -> f64 {
    0.01
}
fn default_substitute_size() -> usize {
    4096
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_layers: default_hidden(),
            embed_dim: default_embed_dim(),
            tau: default_tau(),
            substitute_size: default_substitute_size(),
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to N/M (useful over private attribute counts).
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Defaults to 0.2·N.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_log_every() -> usize {
    50
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            lambda: None,
            mu: None,
            log_every: default_log_every(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "default_data_fraction")]
    pub data_fraction: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_probe_hidden")]
    pub probe_hidden: Vec<usize>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_batch")]
    pub probe_batch_size: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_learning_rate: f64,
}

fn default_data_fraction() -> f64 {
    1.0
}
fn default_repeats() -> usize {
    4
}
fn default_probe_hidden() -> Vec<usize> {
    vec![64]
}
fn default_probe_epochs() -> usize {
    40
}
fn default_probe_batch() -> usize {
    128
}
fn default_probe_lr() -> f64 {
    2e-3
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            data_fraction: default_data_fraction(),
            repeats: default_repeats(),
            probe_hidden: default_probe_hidden(),
            probe_epochs: default_probe_epochs(),
            probe_batch_size: default_probe_batch(),
            probe_learning_rate: default_probe_lr(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_adv_epochs")]
    pub epochs: usize,
    #[serde(default = "default_adv_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adv_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_adv_head_lr")]
    pub adversary_learning_rate: f64,
    #[serde(default = "default_adv_weight")]
    pub adversary_weight: f64,
    #[serde(default = "default_util_weight")]
    pub utility_weight: f64,
    #[serde(default = "default_distortion")]
    pub distortion_weight: f64,
    #[serde(default = "default_adv_hidden")]
    pub hidden: usize,
}

fn default_adv_epochs() -> usize {
    40
}
fn default_adv_batch() -> usize {
    64
}
fn default_adv_lr() -> f64 {
    2e-3
}
fn default_adv_head_lr() -> f64 {
    3e-4
}
fn default_adv_weight() -> f64 {
    2.0
}
fn default_util_weight() -> f64 {
    1.0
}
fn default_distortion() -> f64 {
    0.5
}
fn default_adv_hidden() -> usize {
    32
}

impl Default for AdvSection {
    fn default() -> Self {
        AdvSection {
            enabled: false,
            epochs: default_adv_epochs(),
            batch_size: default_adv_batch(),
            learning_rate: default_adv_lr(),
            adversary_learning_rate: default_adv_head_lr(),
            adversary_weight: default_adv_weight(),
            utility_weight: default_util_weight(),
            distortion_weight: default_distortion(),
            hidden: default_adv_hidden(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsSection {
    #[serde(default)]
    pub objective_bound: bool,
    #[serde(default)]
    pub entanglement: bool,
    #[serde(default)]
    pub ldp: bool,
    #[serde(default)]
    pub bias_demo: bool,
    #[serde(default)]
    pub confusion: bool,
    #[serde(default = "default_bound_batches")]
    pub objective_bound_batches: usize,
    #[serde(default = "default_bound_batch_size")]
    pub objective_bound_batch_size: usize,
    #[serde(default = "default_bias_batches")]
    pub bias_batches: usize,
    #[serde(default = "default_bias_batch_size")]
    pub bias_batch_size: usize,
}

fn default_bound_batches() -> usize {
    2000
}
fn default_bound_batch_size() -> usize {
    16
}
fn default_bias_batches() -> usize {
    800
}
fn default_bias_batch_size() -> usize {
    4
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            objective_bound: false,
            entanglement: false,
            ldp: false,
            bias_demo: false,
            confusion: false,
            objective_bound_batches: default_bound_batches(),
            objective_bound_batch_size: default_bound_batch_size(),
            bias_batches: default_bias_batches(),
            bias_batch_size: default_bias_batch_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Also dump full probability rows next to the substitution records.
    #[serde(default)]
    pub audit_rows: bool,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out_dir(), audit_rows: false }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_str_validated(&text)
    }

    pub fn from_str_validated(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CoreError::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Short identity of the resolved config; stamped into every output
    /// file name so mismatched runs cannot silently overwrite each other.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn attributes(&self) -> &[AttributeSection] {
        if let Some(s) = &self.data.synthetic {
            &s.attributes
        } else if let Some(c) = &self.data.csv {
            &c.attributes
        } else {
            &[]
        }
    }

    fn count_role(&self, role: Role) -> usize {
        self.attributes().iter().filter(|a| a.role == role).count()
    }

    /// λ resolved to its default N/M when unset.
    pub fn lambda(&self) -> f64 {
        self.train.lambda.unwrap_or_else(|| {
            self.count_role(Role::Useful) as f64 / self.count_role(Role::Private).max(1) as f64
        })
    }

    /// μ resolved to its default 0.2·N when unset.
    pub fn mu(&self) -> f64 {
        self.train.mu.unwrap_or_else(|| 0.2 * self.count_role(Role::Useful) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();

        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => {
                p.push("data: exactly one of data.synthetic / data.csv allowed".to_string())
            }
            (None, None) => {
                p.push("data: one of data.synthetic / data.csv required".to_string())
            }
            _ => {}
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            p.push("data.train_fraction: must be in (0, 1)".to_string());
        }

        if let Some(s) = &self.data.synthetic {
            if s.n_samples == 0 {
                p.push("data.synthetic.n_samples: must be > 0".to_string());
            }
            if s.noise_sigma < 0.0 {
                p.push("data.synthetic.noise_sigma: must be >= 0".to_string());
            }
            for (i, a) in s.attributes.iter().enumerate() {
                if a.cardinality < 2 {
                    p.push(format!(
                        "data.synthetic.attributes[{i}].cardinality: must be >= 2"
                    ));
                }
                if let Some(m) = &a.marginal {
                    if m.len() != a.cardinality {
                        p.push(format!(
                            "data.synthetic.attributes[{i}].marginal: {} entries for cardinality {}",
                            m.len(),
                            a.cardinality
                        ));
                    }
                    if (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        p.push(format!(
                            "data.synthetic.attributes[{i}].marginal: must sum to 1"
                        ));
                    }
                }
            }
            let names: Vec<&str> = s.attributes.iter().map(|a| a.name.as_str()).collect();
            for (i, c) in s.correlations.iter().enumerate() {
                for side in [&c.a, &c.b] {
                    if !names.contains(&side.as_str()) {
                        p.push(format!(
                            "data.synthetic.correlations[{i}]: unknown attribute '{side}'"
                        ));
                    }
                }
                if !(-1.0..=1.0).contains(&c.rho) {
                    p.push(format!(
                        "data.synthetic.correlations[{i}].rho: {} outside [-1, 1]",
                        c.rho
                    ));
                }
            }
        }
        if let Some(c) = &self.data.csv {
            if c.attributes.is_empty() {
                p.push("data.csv.attributes: at least one required".to_string());
            }
        }

        if self.count_role(Role::Private) == 0 {
            p.push("data: at least one attribute with role = \"private\" required".to_string());
        }
        if self.count_role(Role::Useful) == 0 {
            p.push("data: at least one attribute with role = \"useful\" required".to_string());
        }

        if self.model.embed_dim == 0 {
            p.push("model.embed_dim: must be > 0".to_string());
        }
        if self.model.hidden_layers.contains(&0) {
            p.push("model.hidden_layers: entries must be > 0".to_string());
        }
        if !(self.model.tau > 0.0) {
            p.push("model.tau: must be > 0".to_string());
        }
        if self.model.substitute_size == 0 {
            p.push("model.substitute_size: must be > 0".to_string());
        }

        if self.train.epochs == 0 {
            p.push("train.epochs: must be >= 1".to_string());
        }
        if self.train.batch_size < 2 {
            p.push("train.batch_size: must be >= 2".to_string());
        }
        if !(self.train.learning_rate >= 0.0) {
            p.push("train.learning_rate: must be >= 0".to_string());
        }
        if let Some(l) = self.train.lambda {
            if l < 0.0 {
                p.push("train.lambda: must be >= 0".to_string());
            }
        }
        if let Some(m) = self.train.mu {
            if m < 0.0 {
                p.push("train.mu: must be >= 0".to_string());
            }
        }
        if self.train.log_every == 0 {
            p.push("train.log_every: must be >= 1".to_string());
        }

        if !(self.attack.data_fraction > 0.0 && self.attack.data_fraction <= 1.0) {
            p.push("attack.data_fraction: must be in (0, 1]".to_string());
        }
        if self.attack.repeats == 0 {
            p.push("attack.repeats: must be >= 1".to_string());
        }
        if self.attack.probe_epochs == 0 {
            p.push("attack.probe_epochs: must be >= 1".to_string());
        }

        if self.adv.enabled {
            if self.adv.epochs == 0 {
                p.push("adv.epochs: must be >= 1".to_string());
            }
            if self.adv.batch_size < 2 {
                p.push("adv.batch_size: must be >= 2".to_string());
            }
        }

        if self.diagnostics.objective_bound && self.diagnostics.objective_bound_batch_size < 2 {
            p.push("diagnostics.objective_bound_batch_size: must be >= 2".to_string());
        }
        if self.diagnostics.bias_demo && self.diagnostics.bias_batch_size < 2 {
            p.push("diagnostics.bias_batch_size: must be >= 2".to_string());
        }

        if p.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(p))
        }
    }
}
