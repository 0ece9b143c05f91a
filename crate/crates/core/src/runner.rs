//! Config-driven experiment pipeline: data preparation, training, inference,
//! probing-attack evaluation, the optional adversarial baseline, and exact
//! diagnostics — each stage emitting its report files into the output
//! directory.
//!
//! Every file name carries the config hash and seed. A directory holding a
//! manifest written under a different hash refuses to be reused unless
//! forced, so mismatched runs cannot silently overwrite each other.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adv::{self, AdvConfig};
use crate::config::ExperimentConfig;
use crate::data::{
    self, generate_synthetic, load_csv, sample_substitute, AttributeSchema, Dataset, Role,
    Standardization, SyntheticAttribute, SyntheticSpec,
};
use crate::error::{CoreError, Result};
use crate::eval::{self, accuracy, AttackBudget, MetricsReport, ProbeConfig};
use crate::infer::{self, Obfuscator};
use crate::infotheory::{
    self, check_objective_bound, check_entanglement_ceilings, ldp_bound, minibatch_bias_demo, BoundReport,
    EnumerableInstance, StochasticKernel,
};
use crate::model::{ModelConfig, SubstitutionModel};
use crate::train::{self, TrainConfig};

/// Everything a caller needs to know about a finished pipeline invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub mnag: f64,
    pub summary_line: String,
    pub files: Vec<PathBuf>,
    pub adv: Option<AdvSummary>,
    /// All bound checks that ran held (None when no diagnostics ran).
    pub bounds_ok: Option<bool>,
}

/// Adversarial-baseline outcome: probing mNAG plus, per private attribute,
/// the NAG seen by the jointly trained adversary vs the probing attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvSummary {
    pub mnag: f64,
    pub private_gaps: Vec<PrivateGap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateGap {
    pub attribute: String,
    pub protector_nag: f64,
    pub probing_nag: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    config: ExperimentConfig,
}

fn suffix(config: &ExperimentConfig) -> String {
    format!("{}-s{}", config.hash(), config.seed)
}

fn manifest_guard(out_dir: &Path, config: &ExperimentConfig, force: bool) -> Result<()> {
    if !out_dir.exists() {
        return Ok(());
    }
    let hash = config.hash();
    for entry in std::fs::read_dir(out_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("manifest-") && name.ends_with(".json") {
            let existing: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| CoreError::State(format!("manifest parse: {e}")))?;
            if existing.config_hash != hash && !force {
                return Err(CoreError::State(format!(
                    "output dir {} holds a run with config hash {} (this config is {hash}); \
                     pass --force to overwrite",
                    out_dir.display(),
                    existing.config_hash
                )));
            }
        }
    }
    Ok(())
}

/// Builds the train/test splits from the configured source, standardized on
/// the training split's statistics.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if let Some(s) = &config.data.synthetic {
        let attributes: Vec<SyntheticAttribute> = s
            .attributes
            .iter()
            .map(|a| SyntheticAttribute {
                schema: AttributeSchema {
                    name: a.name.clone(),
                    cardinality: a.cardinality,
                    role: a.role,
                },
                marginal: a
                    .marginal
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / a.cardinality as f64; a.cardinality]),
            })
            .collect();
        let m = attributes.len();
        let mut correlation: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for c in &s.correlations {
            let ia = attributes
                .iter()
                .position(|x| x.schema.name == c.a)
                .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{}'", c.a)))?;
            let ib = attributes
                .iter()
                .position(|x| x.schema.name == c.b)
                .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{}'", c.b)))?;
            correlation[ia][ib] = c.rho;
            correlation[ib][ia] = c.rho;
        }
        let spec = SyntheticSpec {
            n_samples: s.n_samples,
            feature_dim: s.feature_dim,
            attributes,
            correlation,
            noise_sigma: s.noise_sigma,
            seed: config.seed,
        };
        let dataset = generate_synthetic(&spec)?;
        let (train, test) = data::split_dataset(&dataset, config.data.train_fraction, config.seed)?;
        data::standardize_splits(train, test)
    } else if let Some(c) = &config.data.csv {
        let schema: Vec<AttributeSchema> = c
            .attributes
            .iter()
            .map(|a| AttributeSchema {
                name: a.name.clone(),
                cardinality: a.cardinality,
                role: a.role,
            })
            .collect();
        let train_raw = load_csv(&c.path, &schema)?;
        if let Some(test_path) = &c.test_path {
            let test_raw = load_csv(test_path, &schema)?;
            let stats = Standardization::fit(train_raw.features());
            Ok((train_raw.standardized(&stats)?, test_raw.standardized(&stats)?))
        } else {
            let (train, test) =
                data::split_dataset(&train_raw, config.data.train_fraction, config.seed)?;
            data::standardize_splits(train, test)
        }
    } else {
        Err(CoreError::validation("data: no source configured"))
    }
}

fn train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        learning_rate: config.train.learning_rate,
        weight_decay: config.train.weight_decay,
        lambda: config.lambda(),
        mu: config.mu(),
        seed: config.seed,
        log_every: config.train.log_every,
    }
}

fn probe_config(config: &ExperimentConfig) -> ProbeConfig {
    ProbeConfig {
        hidden_layers: config.attack.probe_hidden.clone(),
        activation: crate::model::Activation::Tanh,
        epochs: config.attack.probe_epochs,
        batch_size: config.attack.probe_batch_size,
        learning_rate: config.attack.probe_learning_rate,
        weight_decay: 1e-4,
    }
}

fn attack_budget(config: &ExperimentConfig) -> AttackBudget {
    AttackBudget {
        data_fraction: config.attack.data_fraction,
        repeats: config.attack.repeats,
        seed: config.seed,
    }
}

/// Trains the substitution model for this config on the given splits.
pub fn train_model(
    config: &ExperimentConfig,
    train_set: &Dataset,
) -> Result<(SubstitutionModel, train::TrainLog)> {
    let k = config.model.substitute_size;
    if k > train_set.len() {
        return Err(CoreError::validation(format!(
            "model.substitute_size: {k} exceeds the {} training rows",
            train_set.len()
        )));
    }
    let substitute = sample_substitute(train_set, k, config.seed)?;
    for attr in train_set.schema() {
        if attr.role != Role::Useful {
            continue;
        }
        let labels = substitute.labels_for(&attr.name)?;
        for class in 0..attr.cardinality {
            if !labels.contains(&class) {
                eprintln!(
                    "warning: substitute pool has no sample with {} = {class}; \
                     the preservation loss for that class saturates at its clamp",
                    attr.name
                );
            }
        }
    }
    let model_config = ModelConfig {
        hidden_layers: config.model.hidden_layers.clone(),
        embed_dim: config.model.embed_dim,
        tau: config.model.tau,
        activation: config.model.activation,
    };
    let model = SubstitutionModel::init(
        model_config,
        train_set.dim(),
        substitute,
        train_set.standardization().cloned(),
        config.seed,
    )?;
    train::train(model, train_set, &train_config(config))
}

/// The full pipeline: train, infer, evaluate, optional baseline, optional
/// diagnostics. Returns the summary; all artifacts land in `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    manifest_guard(out_dir, config, force)?;
    let sfx = suffix(config);
    let hash = config.hash();
    let mut files = Vec::new();

    let (train_set, test_set) = prepare_data(config)?;

    // Train and persist.
    let (model, log) = train_model(config, &train_set)?;
    let checkpoint_path = out_dir.join(format!("checkpoint-{sfx}.json"));
    model.save(&checkpoint_path, &hash)?;
    files.push(checkpoint_path);
    let log_path = out_dir.join(format!("trainlog-{sfx}.jsonl"));
    log.write_jsonl(&log_path)?;
    files.push(log_path);

    // Inference records over the test split.
    let records = infer::substitute_batch(
        &model,
        &test_set,
        config.attack.repeats,
        config.seed,
        config.output.audit_rows,
    )?;
    let records_path = out_dir.join(format!("substitutions-{sfx}.csv"));
    infer::write_records_csv(&records, &records_path)?;
    files.push(records_path);
    if config.output.audit_rows {
        let rows_path = out_dir.join(format!("substitution-rows-{sfx}.jsonl"));
        infer::write_rows_jsonl(&records, &rows_path)?;
        files.push(rows_path);
    }

    // Probing-attack evaluation.
    let report = eval::evaluate(
        &model,
        &train_set,
        &test_set,
        &attack_budget(config),
        &probe_config(config),
        &hash,
    )?;
    files.extend(write_metrics(&report, out_dir, &sfx, "")?);

    // Confusion matrices from the inference records.
    if config.diagnostics.confusion {
        for attr in test_set.schema() {
            let cm = infer::confusion(&records, &test_set, model.substitute(), &attr.name)?;
            let path = out_dir.join(format!("confusion-{}-{sfx}.csv", attr.name));
            cm.write_csv(&path)?;
            files.push(path);
        }
    }

    // Adversarial baseline.
    let adv_summary = if config.adv.enabled {
        let (summary, mut adv_files) =
            run_adv_baseline(config, &train_set, &test_set, out_dir, &sfx, &hash)?;
        files.append(&mut adv_files);
        Some(summary)
    } else {
        None
    };

    // Exact diagnostics on the trained model.
    let bounds_ok = run_diagnostics(config, &model, &train_set, out_dir, &sfx, &mut files)?;

    let manifest = Manifest { config_hash: hash.clone(), seed: config.seed, config: config.clone() };
    let manifest_path = out_dir.join(format!("manifest-{sfx}.json"));
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::State(format!("manifest serialize: {e}")))?,
    )?;
    files.push(manifest_path);

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        seed: config.seed,
        mnag: report.mnag,
        summary_line: report.summary_line(),
        files,
        adv: adv_summary,
        bounds_ok,
    })
}

fn write_metrics(
    report: &MetricsReport,
    out_dir: &Path,
    sfx: &str,
    tag: &str,
) -> Result<Vec<PathBuf>> {
    let csv_path = out_dir.join(format!("metrics{tag}-{sfx}.csv"));
    report.write_csv(&csv_path)?;
    let json_path = out_dir.join(format!("metrics{tag}-{sfx}.json"));
    report.write_json(&json_path)?;
    let summary_path = out_dir.join(format!("summary{tag}-{sfx}.txt"));
    let mut out = File::create(&summary_path)?;
    writeln!(out, "mnag = {:.6}", report.mnag)?;
    writeln!(out, "{}", report.summary_line())?;
    Ok(vec![csv_path, json_path, summary_path])
}

fn run_adv_baseline(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: &Path,
    sfx: &str,
    hash: &str,
) -> Result<(AdvSummary, Vec<PathBuf>)> {
    let mut files = Vec::new();
    let adv_config = AdvConfig {
        hidden: config.adv.hidden,
        epochs: config.adv.epochs,
        batch_size: config.adv.batch_size,
        learning_rate: config.adv.learning_rate,
        adversary_learning_rate: config.adv.adversary_learning_rate,
        weight_decay: config.train.weight_decay,
        adversary_weight: config.adv.adversary_weight,
        utility_weight: config.adv.utility_weight,
        distortion_weight: config.adv.distortion_weight,
        head_hidden: config.attack.probe_hidden.clone(),
        seed: config.seed,
    };
    let obf = adv::train_adv(train_set, &adv_config)?;

    let ck = out_dir.join(format!("checkpoint-adv-{sfx}.json"));
    let payload = serde_json::json!({
        "method": adv::METHOD_TAG,
        "config_hash": hash,
        "params": obf.params(),
        "adversaries": obf.adversaries,
        "utility_heads": obf.utility_heads,
    });
    std::fs::write(
        &ck,
        serde_json::to_string_pretty(&payload)
            .map_err(|e| CoreError::State(format!("adv checkpoint: {e}")))?,
    )?;
    files.push(ck);

    let report = eval::evaluate(
        &obf,
        train_set,
        test_set,
        &attack_budget(config),
        &probe_config(config),
        hash,
    )?;
    files.extend(write_metrics(&report, out_dir, sfx, "-adv")?);

    // The protector-side view: the jointly trained adversary's accuracy,
    // normalized against the same baselines as the probing attack.
    let released_test = obf.release(test_set.features(), config.seed)?;
    let mut gaps = Vec::new();
    let protector_path = out_dir.join(format!("metrics-adv-protector-{sfx}.csv"));
    let mut out = File::create(&protector_path)?;
    writeln!(out, "attribute,acc,nag,probing_nag")?;
    for head in &obf.adversaries {
        let labels = test_set.labels(&head.attribute)?;
        let acc = accuracy(head, &released_test, labels)?;
        let row = report
            .row(&head.attribute)
            .ok_or_else(|| CoreError::State("missing metrics row".into()))?;
        let protector_nag = eval::nag(acc, row.acc_guessing, row.acc_no_suppression)?;
        writeln!(out, "{},{:.6},{:.6},{:.6}", head.attribute, acc, protector_nag, row.nag)?;
        gaps.push(PrivateGap {
            attribute: head.attribute.clone(),
            protector_nag,
            probing_nag: row.nag,
        });
    }
    files.push(protector_path);
    Ok((AdvSummary { mnag: report.mnag, private_gaps: gaps }, files))
}

fn run_diagnostics(
    config: &ExperimentConfig,
    model: &SubstitutionModel,
    train_set: &Dataset,
    out_dir: &Path,
    sfx: &str,
    files: &mut Vec<PathBuf>,
) -> Result<Option<bool>> {
    let d = &config.diagnostics;
    if !(d.objective_bound || d.entanglement || d.ldp || d.bias_demo) {
        return Ok(None);
    }
    let instance = EnumerableInstance::from_dataset(train_set, infotheory::MAX_STATES)?;
    let kernel = StochasticKernel::from_model(&instance, model)?;
    let lambda = config.lambda();
    let mu = config.mu();

    let mut reports: Vec<BoundReport> = Vec::new();
    if d.objective_bound {
        reports.push(check_objective_bound(
            &instance,
            &kernel,
            lambda,
            mu,
            d.objective_bound_batches,
            d.objective_bound_batch_size.min(instance.n_rows()),
            config.seed,
            "objective_bound[trained]",
        )?);
    }
    if d.entanglement {
        reports.extend(check_entanglement_ceilings(&instance, &kernel, 3)?);
    }
    if d.ldp {
        for attr in train_set.schema() {
            if attr.role == Role::Private && attr.cardinality <= 8 {
                reports.push(ldp_bound(&instance, &kernel, &attr.name)?.report);
            }
        }
    }

    let bounds_path = out_dir.join(format!("bounds-{sfx}.txt"));
    infotheory::write_bound_reports(&reports, &bounds_path)?;
    if d.bias_demo {
        let bias = minibatch_bias_demo(
            &instance,
            &kernel,
            lambda,
            mu,
            d.bias_batch_size.min(instance.n_rows()),
            d.bias_batches,
            config.seed,
        )?;
        let mut out = std::fs::OpenOptions::new().append(true).open(&bounds_path)?;
        writeln!(
            out,
            "check=minibatch_bias exact={:.12e} batch_mean={:.12e} bias={:.12e} se={:.6e}",
            bias.exact, bias.batch_mean, bias.bias, bias.standard_error
        )?;
    }
    files.push(bounds_path);
    Ok(Some(reports.iter().all(|r| r.holds)))
}

/// Re-runs inference and evaluation against an existing checkpoint; no
/// training.
pub fn eval_only(config: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<RunSummary> {
    config.validate()?;
    let sfx = suffix(config);
    let hash = config.hash();
    let (model, ck_hash) = load_checkpoint(config, out_dir)?;
    if ck_hash != hash && !force {
        return Err(CoreError::State(format!(
            "checkpoint was written under config hash {ck_hash}, current config is {hash}; \
             pass --force to evaluate anyway"
        )));
    }
    let (train_set, test_set) = prepare_data(config)?;
    let report = eval::evaluate(
        &model,
        &train_set,
        &test_set,
        &attack_budget(config),
        &probe_config(config),
        &hash,
    )?;
    let files = write_metrics(&report, out_dir, &sfx, "")?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        seed: config.seed,
        mnag: report.mnag,
        summary_line: report.summary_line(),
        files,
        adv: None,
        bounds_ok: None,
    })
}

/// Runs the configured bound checks against an existing checkpoint.
pub fn diagnose(config: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<RunSummary> {
    config.validate()?;
    let sfx = suffix(config);
    let hash = config.hash();
    let (model, ck_hash) = load_checkpoint(config, out_dir)?;
    if ck_hash != hash && !force {
        return Err(CoreError::State(format!(
            "checkpoint was written under config hash {ck_hash}, current config is {hash}; \
             pass --force to diagnose anyway"
        )));
    }
    let (train_set, _) = prepare_data(config)?;
    let mut files = Vec::new();
    let bounds_ok = run_diagnostics(config, &model, &train_set, out_dir, &sfx, &mut files)?;
    if bounds_ok.is_none() {
        return Err(CoreError::validation(
            "diagnose: no diagnostics enabled in [diagnostics]",
        ));
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        seed: config.seed,
        mnag: f64::NAN,
        summary_line: format!(
            "bounds {}",
            if bounds_ok == Some(true) { "hold" } else { "VIOLATED" }
        ),
        files,
        adv: None,
        bounds_ok,
    })
}

fn load_checkpoint(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(SubstitutionModel, String)> {
    let path = out_dir.join(format!("checkpoint-{}.json", suffix(config)));
    if !path.exists() {
        return Err(CoreError::State(format!(
            "no checkpoint at {}; run the pipeline first",
            path.display()
        )));
    }
    SubstitutionModel::load(&path)
}
