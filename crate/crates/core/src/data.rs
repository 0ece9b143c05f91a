//! Datasets with role-tagged categorical attributes: synthetic generation
//! with controllable attribute correlation, CSV ingestion, train/test
//! splitting, substitute-pool sampling and epoch batching.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::rng::{self, Stream};
use crate::stats;

/// What a categorical attribute is for.
///
/// Private attributes must become uninferable from released samples, useful
/// ones must stay inferable, and hidden ones are withheld from training and
/// revealed only at evaluation time to measure general feature preservation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Private,
    Useful,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub cardinality: usize,
    pub role: Role,
}

/// Standardization transform already applied to a dataset's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Per-column mean and standard deviation of `features`; constant
    /// columns get scale 1 so the transform stays invertible.
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += features.get(i, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (j, s) in scale.iter_mut().enumerate() {
                let c = features.get(i, j) - mean[j];
                *s += c * c;
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-9 {
                *s = 1.0;
            }
        }
        Standardization { mean, scale }
    }

    pub fn apply_rows(&self, features: &Tensor) -> Tensor {
        let (n, d) = (features.rows(), features.cols());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push((features.get(i, j) - self.mean[j]) / self.scale[j]);
            }
        }
        Tensor::matrix(n, d, out).unwrap()
    }
}

/// Feature matrix plus per-attribute integer labels.
///
/// Labels are deterministic per feature row: identical rows carrying
/// different labels are rejected at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<Vec<usize>>,
    schema: Vec<AttributeSchema>,
    standardization: Option<Standardization>,
}

// Tensor serializes via its shape/values accessors.
impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Tensor", 2)?;
        st.serialize_field("shape", self.shape())?;
        st.serialize_field("values", self.values())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            shape: Vec<usize>,
            values: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Tensor::new(raw.shape, raw.values).map_err(serde::de::Error::custom)
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<Vec<usize>>,
        schema: Vec<AttributeSchema>,
    ) -> Result<Self> {
        Self::with_standardization(features, labels, schema, None)
    }

    pub fn with_standardization(
        features: Tensor,
        labels: Vec<Vec<usize>>,
        schema: Vec<AttributeSchema>,
        standardization: Option<Standardization>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        let n = features.rows();
        if n == 0 {
            problems.push("dataset: no rows".to_string());
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &schema {
            if a.cardinality < 2 {
                problems.push(format!("schema.{}: cardinality must be >= 2", a.name));
            }
            if !names.insert(a.name.clone()) {
                problems.push(format!("schema.{}: duplicate attribute name", a.name));
            }
        }
        if labels.len() != schema.len() {
            problems.push(format!(
                "labels: {} attribute vectors for {} schema entries",
                labels.len(),
                schema.len()
            ));
        }
        for (a, lab) in schema.iter().zip(&labels) {
            if lab.len() != n {
                problems.push(format!("labels.{}: length {} != {} rows", a.name, lab.len(), n));
            }
            if let Some(bad) = lab.iter().position(|&v| v >= a.cardinality) {
                problems.push(format!(
                    "labels.{}: row {bad} has value {} >= cardinality {}",
                    a.name, lab[bad], a.cardinality
                ));
            }
        }
        if !problems.is_empty() {
            return Err(CoreError::Validation(problems));
        }

        // Identical feature rows must agree on every label.
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in 0..n {
            let key: Vec<u64> = features.row(i).iter().map(|v| v.to_bits()).collect();
            if let Some(&j) = seen.get(&key) {
                for (a, lab) in schema.iter().zip(&labels) {
                    if lab[i] != lab[j] {
                        return Err(CoreError::validation(format!(
                            "labels.{}: rows {j} and {i} have identical features but labels {} vs {}",
                            a.name, lab[j], lab[i]
                        )));
                    }
                }
            } else {
                seen.insert(key, i);
            }
        }

        Ok(Dataset { features, labels, schema, standardization })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn schema(&self) -> &[AttributeSchema] {
        &self.schema
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSchema> {
        self.schema
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{name}'")))
    }

    pub fn labels(&self, name: &str) -> Result<&[usize]> {
        let idx = self
            .schema
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{name}'")))?;
        Ok(&self.labels[idx])
    }

    pub fn names_with_role(&self, role: Role) -> Vec<String> {
        self.schema
            .iter()
            .filter(|a| a.role == role)
            .map(|a| a.name.clone())
            .collect()
    }

    /// New dataset restricted to the given row indices (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
        }
        let labels = self
            .labels
            .iter()
            .map(|lab| indices.iter().map(|&i| lab[i]).collect())
            .collect();
        Dataset::with_standardization(
            Tensor::matrix(indices.len(), d, values)?,
            labels,
            self.schema.clone(),
            self.standardization.clone(),
        )
    }

    /// Applies a standardization transform to this dataset's features and
    /// records it. Fails if one was already applied.
    pub fn standardized(&self, stats: &Standardization) -> Result<Dataset> {
        if self.standardization.is_some() {
            return Err(CoreError::State("dataset already standardized".into()));
        }
        Dataset::with_standardization(
            stats.apply_rows(&self.features),
            self.labels.clone(),
            self.schema.clone(),
            Some(stats.clone()),
        )
    }

    /// Empirical class distribution of an attribute.
    pub fn marginal(&self, name: &str) -> Result<Vec<f64>> {
        let attr = self.attribute(name)?;
        let labels = self.labels(name)?;
        let mut counts = vec![0.0; attr.cardinality];
        for &v in labels {
            counts[v] += 1.0;
        }
        let n = labels.len() as f64;
        Ok(counts.into_iter().map(|c| c / n).collect())
    }
}

/// Substitute pool: row indices into a source dataset with cached feature
/// rows and labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstituteSet {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<Vec<usize>>,
    pub schema: Vec<AttributeSchema>,
}

impl SubstituteSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn labels_for(&self, name: &str) -> Result<&[usize]> {
        let idx = self
            .schema
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{name}'")))?;
        Ok(&self.labels[idx])
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSchema> {
        self.schema
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{name}'")))
    }

    /// Empirical class distribution of an attribute over the pool.
    pub fn marginal(&self, name: &str) -> Result<Vec<f64>> {
        let attr = self.attribute(name)?;
        let labels = self.labels_for(name)?;
        let mut counts = vec![0.0; attr.cardinality];
        for &v in labels {
            counts[v] += 1.0;
        }
        let n = labels.len() as f64;
        Ok(counts.into_iter().map(|c| c / n).collect())
    }
}

/// Uniformly samples `k` distinct training rows as the substitute pool.
pub fn sample_substitute(train: &Dataset, k: usize, seed: u64) -> Result<SubstituteSet> {
    let n = train.len();
    if k == 0 || k > n {
        return Err(CoreError::validation(format!(
            "substitute size {k} out of range 1..={n}"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Substitute);
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let indices = pool[..k].to_vec();
    let sub = train.subset(&indices)?;
    Ok(SubstituteSet {
        indices,
        features: sub.features,
        labels: sub.labels,
        schema: sub.schema,
    })
}

/// One epoch of mini-batch index slices: a fresh uniform permutation per
/// epoch, chunked; the final short chunk is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(CoreError::validation("batch_size must be >= 2"));
    }
    let mut rng = rng::substream(seed, Stream::Batching, epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Splits into (train, test) by a seeded permutation; `train_fraction` of the
/// rows (rounded down, at least 1) go to train.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(CoreError::validation("train_fraction must be in (0, 1)"));
    }
    let n = dataset.len();
    let n_train = ((n as f64 * train_fraction) as usize).clamp(1, n - 1);
    let mut rng = rng::stream(seed, Stream::Split);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let train = dataset.subset(&perm[..n_train])?;
    let test = dataset.subset(&perm[n_train..])?;
    Ok((train, test))
}

/// Fits standardization on the train split and applies it to both splits.
pub fn standardize_splits(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let stats = Standardization::fit(train.features());
    Ok((train.standardized(&stats)?, test.standardized(&stats)?))
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// One attribute of a synthetic task: schema plus its class marginal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticAttribute {
    pub schema: AttributeSchema,
    /// Class probabilities; must sum to 1.
    pub marginal: Vec<f64>,
}

/// Recipe for a synthetic dataset.
///
/// Attributes are drawn from a Gaussian copula discretized against each
/// attribute's marginal; the latent correlations are calibrated so the
/// generated integer labels reach the requested pairwise Pearson
/// correlations. Features are one orthogonal one-hot block per attribute
/// (prototype scale 1.0) plus isotropic Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Total feature width; 0 means "just the prototype blocks". Extra
    /// dimensions beyond the blocks carry pure noise.
    pub feature_dim: usize,
    pub attributes: Vec<SyntheticAttribute>,
    /// Symmetric pairwise label correlation targets with unit diagonal.
    pub correlation: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Uncorrelated spec with uniform marginals; a convenient starting point.
    pub fn uniform(
        n_samples: usize,
        attrs: &[(&str, usize, Role)],
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let attributes = attrs
            .iter()
            .map(|(name, card, role)| SyntheticAttribute {
                schema: AttributeSchema {
                    name: name.to_string(),
                    cardinality: *card,
                    role: *role,
                },
                marginal: vec![1.0 / *card as f64; *card],
            })
            .collect::<Vec<_>>();
        let m = attributes.len();
        let correlation = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        SyntheticSpec { n_samples, feature_dim: 0, attributes, correlation, noise_sigma, seed }
    }

    /// Sets the symmetric correlation target between two named attributes.
    pub fn with_correlation(mut self, a: &str, b: &str, rho: f64) -> Self {
        let ia = self.attributes.iter().position(|x| x.schema.name == a).expect("attr a");
        let ib = self.attributes.iter().position(|x| x.schema.name == b).expect("attr b");
        self.correlation[ia][ib] = rho;
        self.correlation[ib][ia] = rho;
        self
    }

    pub fn with_marginal(mut self, name: &str, marginal: Vec<f64>) -> Self {
        let i = self.attributes.iter().position(|x| x.schema.name == name).expect("attr");
        self.attributes[i].marginal = marginal;
        self
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_samples == 0 {
            problems.push("n_samples: must be > 0".to_string());
        }
        if self.noise_sigma < 0.0 {
            problems.push("noise_sigma: must be >= 0".to_string());
        }
        let m = self.attributes.len();
        if m == 0 {
            problems.push("attributes: at least one required".to_string());
        }
        for a in &self.attributes {
            if a.schema.cardinality < 2 {
                problems.push(format!("attributes.{}: cardinality must be >= 2", a.schema.name));
            }
            if a.marginal.len() != a.schema.cardinality {
                problems.push(format!(
                    "attributes.{}: marginal has {} entries for cardinality {}",
                    a.schema.name,
                    a.marginal.len(),
                    a.schema.cardinality
                ));
            }
            if a.marginal.iter().any(|&p| p < 0.0) {
                problems.push(format!("attributes.{}: negative marginal entry", a.schema.name));
            }
            let total: f64 = a.marginal.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                problems.push(format!(
                    "attributes.{}: marginal sums to {total}, expected 1",
                    a.schema.name
                ));
            }
        }
        if self.correlation.len() != m || self.correlation.iter().any(|r| r.len() != m) {
            problems.push(format!("correlation: expected {m}x{m} matrix"));
        } else {
            for i in 0..m {
                if (self.correlation[i][i] - 1.0).abs() > 1e-12 {
                    problems.push(format!("correlation[{i}][{i}]: diagonal must be 1"));
                }
                for j in 0..m {
                    let r = self.correlation[i][j];
                    if !(-1.0..=1.0).contains(&r) {
                        problems.push(format!("correlation[{i}][{j}]: {r} outside [-1, 1]"));
                    }
                    if (r - self.correlation[j][i]).abs() > 1e-12 {
                        problems.push(format!("correlation[{i}][{j}]: matrix not symmetric"));
                    }
                }
            }
        }
        let blocks: usize = self.attributes.iter().map(|a| a.schema.cardinality).sum();
        if self.feature_dim != 0 && self.feature_dim < blocks {
            problems.push(format!(
                "feature_dim: {} smaller than the {blocks} prototype dimensions",
                self.feature_dim
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(problems))
        }
    }

    /// Feature-column range of each attribute's prototype block.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for a in &self.attributes {
            out.push(offset..offset + a.schema.cardinality);
            offset += a.schema.cardinality;
        }
        out
    }
}

/// Interval thresholds on the latent Gaussian for one marginal.
fn thresholds(marginal: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(marginal.len() + 1);
    t.push(f64::NEG_INFINITY);
    let mut cum = 0.0;
    for &p in &marginal[..marginal.len() - 1] {
        cum += p;
        t.push(stats::norm_quantile(cum.clamp(0.0, 1.0)));
    }
    t.push(f64::INFINITY);
    t
}

/// Pearson correlation of the two discretized labels when the latent
/// Gaussians have correlation `rho_z`. Exact up to BVN quadrature error.
fn discretized_pearson(ta: &[f64], tb: &[f64], ma: &[f64], mb: &[f64], rho_z: f64) -> f64 {
    let (ca, cb) = (ma.len(), mb.len());
    let mean = |m: &[f64]| m.iter().enumerate().map(|(v, p)| v as f64 * p).sum::<f64>();
    let var = |m: &[f64], mu: f64| {
        m.iter()
            .enumerate()
            .map(|(v, p)| (v as f64 - mu) * (v as f64 - mu) * p)
            .sum::<f64>()
    };
    let (mu_a, mu_b) = (mean(ma), mean(mb));
    let (va, vb) = (var(ma, mu_a), var(mb, mu_b));
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    let mut e_ab = 0.0;
    for v in 0..ca {
        for w in 0..cb {
            if v == 0 || w == 0 {
                continue; // value 0 contributes nothing to E[V·W]
            }
            let cell = stats::bvn_cdf(ta[v + 1], tb[w + 1], rho_z)
                - stats::bvn_cdf(ta[v], tb[w + 1], rho_z)
                - stats::bvn_cdf(ta[v + 1], tb[w], rho_z)
                + stats::bvn_cdf(ta[v], tb[w], rho_z);
            e_ab += (v as f64) * (w as f64) * cell.max(0.0);
        }
    }
    (e_ab - mu_a * mu_b) / (va.sqrt() * vb.sqrt())
}

/// Finds the latent correlation whose discretized label Pearson hits
/// `target`, or reports the pair as infeasible.
fn calibrate_latent_rho(
    ta: &[f64],
    tb: &[f64],
    ma: &[f64],
    mb: &[f64],
    target: f64,
    label: &str,
) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let infeasible = |achievable: f64| {
        CoreError::validation(format!(
            "correlation.{label}: target {target} infeasible for these marginals \
             (attainable extreme is {achievable:.4})"
        ))
    };
    if target.abs() == 1.0 {
        // Only the degenerate coupling can reach ±1; verify it does.
        let achieved = discretized_pearson(ta, tb, ma, mb, target);
        if (achieved - target).abs() > 1e-6 {
            return Err(infeasible(achieved));
        }
        return Ok(target);
    }
    // Cap below the degenerate coupling so the joint stays comfortably
    // quadrature-friendly and full rank.
    const EDGE: f64 = 0.999;
    let achievable = discretized_pearson(ta, tb, ma, mb, EDGE.copysign(target));
    if (target > 0.0 && achievable < target - 1e-3) || (target < 0.0 && achievable > target + 1e-3)
    {
        return Err(infeasible(achievable));
    }
    let (mut lo, mut hi) = if target > 0.0 { (0.0, EDGE) } else { (-EDGE, 0.0) };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if discretized_pearson(ta, tb, ma, mb, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Cholesky factor with a zero-pivot tolerance so singular-but-PSD matrices
/// (e.g. perfectly correlated attributes) still factor.
fn cholesky_psd(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = m[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d < -1e-8 {
            return Err(CoreError::validation(
                "correlation: matrix is not positive semi-definite after calibration",
            ));
        }
        let d = d.max(0.0).sqrt();
        l[j][j] = d;
        for i in (j + 1)..n {
            if d == 0.0 {
                l[i][j] = 0.0;
                continue;
            }
            let mut v = m[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            l[i][j] = v / d;
        }
    }
    Ok(l)
}

/// Generates a dataset from the spec. Deterministic in `(spec, spec.seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = spec.attributes.len();
    let thresh: Vec<Vec<f64>> =
        spec.attributes.iter().map(|a| thresholds(&a.marginal)).collect();

    // Calibrate each requested pairwise correlation on the latent Gaussians.
    let mut latent = vec![vec![0.0; m]; m];
    for i in 0..m {
        latent[i][i] = 1.0;
        for j in (i + 1)..m {
            let target = spec.correlation[i][j];
            let rho_z = calibrate_latent_rho(
                &thresh[i],
                &thresh[j],
                &spec.attributes[i].marginal,
                &spec.attributes[j].marginal,
                target,
                &format!(
                    "{}-{}",
                    spec.attributes[i].schema.name, spec.attributes[j].schema.name
                ),
            )?;
            latent[i][j] = rho_z;
            latent[j][i] = rho_z;
        }
    }
    let chol = cholesky_psd(&latent)?;

    let blocks = spec.block_ranges();
    let block_total: usize = spec.attributes.iter().map(|a| a.schema.cardinality).sum();
    let d = if spec.feature_dim == 0 { block_total } else { spec.feature_dim };

    let mut rng = rng::stream(spec.seed, Stream::DataGen);
    let normal = StandardNormal;
    let n = spec.n_samples;
    let mut labels: Vec<Vec<usize>> = vec![Vec::with_capacity(n); m];
    let mut features = Vec::with_capacity(n * d);
    let mut eps = vec![0.0; m];
    for _ in 0..n {
        for e in eps.iter_mut() {
            *e = normal.sample(&mut rng);
        }
        let mut row = vec![0.0; d];
        for (a, attr) in spec.attributes.iter().enumerate() {
            let z: f64 = (0..=a).map(|k| chol[a][k] * eps[k]).sum();
            let t = &thresh[a];
            // t is ascending with t[0] = -inf, t[card] = +inf.
            let mut label = attr.schema.cardinality - 1;
            for v in 0..attr.schema.cardinality {
                if z < t[v + 1] {
                    label = v;
                    break;
                }
            }
            labels[a].push(label);
            row[blocks[a].start + label] = 1.0;
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                let noise: f64 = normal.sample(&mut rng);
                *v += spec.noise_sigma * noise;
            }
        }
        features.extend_from_slice(&row);
    }

    Dataset::new(
        Tensor::matrix(n, d, features)?,
        labels,
        spec.attributes.iter().map(|a| a.schema.clone()).collect(),
    )
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Loads a dataset from UTF-8 comma-delimited text with a header row.
/// Columns named `f_<i>` become features in header order; columns matching
/// schema names become labels. Rows with missing or malformed values are
/// rejected with their line number.
pub fn load_csv(path: impl AsRef<Path>, schema: &[AttributeSchema]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();

    let feature_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("f_"))
        .map(|(i, _)| i)
        .collect();
    if feature_cols.is_empty() {
        return Err(CoreError::Schema("no feature columns (prefix 'f_') found".into()));
    }
    let mut label_cols = Vec::with_capacity(schema.len());
    for attr in schema {
        let idx = headers
            .iter()
            .position(|h| h == attr.name)
            .ok_or_else(|| CoreError::Schema(format!("missing column '{}'", attr.name)))?;
        label_cols.push(idx);
    }

    let d = feature_cols.len();
    let mut features = Vec::new();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); schema.len()];
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_idx + 2; // 1-based, after the header
        for &c in &feature_cols {
            let raw = record.get(c).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(CoreError::Row {
                    line,
                    detail: format!("missing value in column '{}'", &headers[c]),
                });
            }
            let v: f64 = raw.parse().map_err(|_| CoreError::Row {
                line,
                detail: format!("'{raw}' in column '{}' is not a number", &headers[c]),
            })?;
            features.push(v);
        }
        for (attr, &c) in schema.iter().zip(&label_cols) {
            let raw = record.get(c).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(CoreError::Row {
                    line,
                    detail: format!("missing value in column '{}'", attr.name),
                });
            }
            let v: usize = raw.parse().map_err(|_| CoreError::Row {
                line,
                detail: format!("'{raw}' in column '{}' is not a class index", attr.name),
            })?;
            if v >= attr.cardinality {
                return Err(CoreError::Row {
                    line,
                    detail: format!(
                        "value {v} in column '{}' exceeds cardinality {}",
                        attr.name, attr.cardinality
                    ),
                });
            }
            labels[label_cols.iter().position(|&x| x == c).unwrap()].push(v);
        }
    }
    let n = features.len() / d;
    if n == 0 {
        return Err(CoreError::validation("csv contains no data rows"));
    }
    Dataset::new(Tensor::matrix(n, d, features)?, labels, schema.to_vec())
}

/// Writes a dataset as CSV with 17-significant-digit floats, so a reload
/// reproduces the features exactly.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f_{i}")).collect();
    header.extend(dataset.schema().iter().map(|a| a.name.clone()));
    writeln!(file, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let mut fields: Vec<String> =
            dataset.features().row(i).iter().map(|v| format!("{v:.16e}")).collect();
        for lab in &dataset.labels {
            fields.push(lab[i].to_string());
        }
        writeln!(file, "{}", fields.join(","))?;
    }
    Ok(())
}
