//! Frozen-model inference: drawing substitutes for unseen samples, the
//! released-data interface used by attacks and evaluation, and substitution
//! confusion matrices.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, SubstituteSet};
use crate::error::{CoreError, Result};
use crate::model::SubstitutionModel;
use crate::rng;

/// One substitution draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstitutionRecord {
    pub original_index: usize,
    /// Slot in the substitute pool (0..K).
    pub substitute_index: usize,
    pub repeat: usize,
    /// Seed used for this draw.
    pub seed: u64,
    /// The full probability row, kept only when auditing is enabled.
    pub probability_row: Option<Vec<f64>>,
}

/// Inverse-CDF draw over a probability row with left-to-right cumulative
/// sums; float undershoot at the tail clamps to the last index.
pub fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (j, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return j;
        }
    }
    row.len() - 1
}

/// Substitutes a single sample; deterministic in `seed`.
pub fn substitute(model: &SubstitutionModel, x: &[f64], seed: u64) -> Result<SubstitutionRecord> {
    let batch = Tensor::from_rows(&[x.to_vec()])?;
    let probs = model.substitution_probs(&batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_row(probs.row(0), &mut rng);
    Ok(SubstitutionRecord {
        original_index: 0,
        substitute_index: chosen,
        repeat: 0,
        seed,
        probability_row: Some(probs.row(0).to_vec()),
    })
}

/// `repeats` independent draws per dataset row; the per-draw seed is derived
/// from `(seed, row, repeat)`, so any record is reproducible from the run
/// seed alone.
pub fn substitute_batch(
    model: &SubstitutionModel,
    dataset: &Dataset,
    repeats: usize,
    seed: u64,
    audit_rows: bool,
) -> Result<Vec<SubstitutionRecord>> {
    if repeats == 0 {
        return Err(CoreError::validation("repeats must be >= 1"));
    }
    let probs = model.substitution_probs(dataset.features())?;
    let mut records = Vec::with_capacity(dataset.len() * repeats);
    for i in 0..dataset.len() {
        for r in 0..repeats {
            let draw_seed = rng::mix(seed, i as u64, r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let chosen = sample_row(probs.row(i), &mut rng);
            records.push(SubstitutionRecord {
                original_index: i,
                substitute_index: chosen,
                repeat: r,
                seed: draw_seed,
                probability_row: audit_rows.then(|| probs.row(i).to_vec()),
            });
        }
    }
    Ok(records)
}

/// Writes one record per line: original index, substitute index, repeat.
pub fn write_records_csv(records: &[SubstitutionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "original,substitute,repeat")?;
    for r in records {
        writeln!(out, "{},{},{}", r.original_index, r.substitute_index, r.repeat)?;
    }
    Ok(())
}

/// Optional audit dump: full probability rows, one JSON record per line.
pub fn write_rows_jsonl(records: &[SubstitutionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        if r.probability_row.is_some() {
            let line = serde_json::to_string(r)
                .map_err(|e| CoreError::State(format!("record serialize: {e}")))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Class-to-class substitution frequencies for one attribute: entry `(i, j)`
/// is the fraction of originals with class `i` substituted by a pool sample
/// with class `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub attribute: String,
    pub matrix: Vec<Vec<f64>>,
    /// Classes with no originals among the records; their rows are zero.
    pub absent_classes: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let c = self.matrix.len();
        let present = c - self.absent_classes.len();
        if present == 0 {
            return 0.0;
        }
        (0..c)
            .filter(|i| !self.absent_classes.contains(i))
            .map(|i| self.matrix[i][i])
            .sum::<f64>()
            / present as f64
    }

    /// Max total-variation distance of any present row from `reference`.
    pub fn max_row_tv(&self, reference: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            if self.absent_classes.contains(&i) {
                continue;
            }
            let tv = 0.5
                * row
                    .iter()
                    .zip(reference)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
        worst
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let c = self.matrix.len();
        let header: Vec<String> = (0..c).map(|j| format!("to_{j}")).collect();
        writeln!(out, "from,{}", header.join(","))?;
        for (i, row) in self.matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{i},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Builds the confusion matrix of substitution records for `attribute`.
pub fn confusion(
    records: &[SubstitutionRecord],
    originals: &Dataset,
    substitute: &SubstituteSet,
    attribute: &str,
) -> Result<ConfusionMatrix> {
    let card = originals.attribute(attribute)?.cardinality;
    let orig_labels = originals.labels(attribute)?;
    let sub_labels = substitute.labels_for(attribute)?;
    let mut counts = vec![vec![0.0f64; card]; card];
    for r in records {
        let from = orig_labels[r.original_index];
        let to = sub_labels[r.substitute_index];
        counts[from][to] += 1.0;
    }
    let mut absent = Vec::new();
    for (i, row) in counts.iter_mut().enumerate() {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            absent.push(i);
        } else {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    Ok(ConfusionMatrix { attribute: attribute.to_string(), matrix: counts, absent_classes: absent })
}

// ---------------------------------------------------------------------------
// Released-data interface
// ---------------------------------------------------------------------------

/// Anything that turns original feature rows into released feature rows.
/// Attacks and downstream evaluation only see this surface.
pub trait Obfuscator {
    fn release(&self, x: &Tensor, seed: u64) -> Result<Tensor>;
}

impl Obfuscator for SubstitutionModel {
    /// One substitution draw per row; returns the chosen substitutes' rows.
    fn release(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let probs = self.substitution_probs(x)?;
        let pool = self.substitute();
        let d = pool.features.cols();
        let mut values = Vec::with_capacity(x.rows() * d);
        for i in 0..x.rows() {
            let mut rng = ChaCha8Rng::seed_from_u64(rng::mix(seed, i as u64, 0));
            let chosen = sample_row(probs.row(i), &mut rng);
            values.extend_from_slice(pool.features.row(chosen));
        }
        Tensor::matrix(x.rows(), d, values)
    }
}

/// Releases samples unchanged; the no-protection reference.
pub struct IdentityObfuscator;

impl Obfuscator for IdentityObfuscator {
    fn release(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Releases the same fixed row for every input; the zero-information
/// reference.
pub struct ConstantObfuscator(pub Vec<f64>);

impl Obfuscator for ConstantObfuscator {
    fn release(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        let rows = vec![self.0.clone(); x.rows()];
        Tensor::from_rows(&rows)
    }
}
