//! Exact information-theoretic computations on enumerable instances, and the
//! bound checks built on them.
//!
//! An *enumerable instance* treats the distinct feature rows of a dataset as
//! the states of a discrete variable X (at most [`MAX_STATES`] of them), with
//! every attribute a deterministic label per state. Together with a
//! row-stochastic substitution kernel this pins down the full joint
//! distribution of (X, X', attributes), so mutual informations, the exact
//! training objective, the entanglement ceilings, the randomized-mechanism
//! closeness bound, the adversarial-estimation gap, and the mini-batch bias
//! of the naive objective can all be computed exactly or by seeded
//! Monte-Carlo with reported standard errors.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{AttributeSchema, Dataset, Role};
use crate::error::{CoreError, Result};
use crate::loss::{self, AttrBatch, BatchLabels, UsefulBatch};
use crate::model::{ProbMatrix, SubstitutionModel};
use crate::rng::{self, Stream};

/// Enumeration cap: joints stay dense and exact below this.
pub const MAX_STATES: usize = 4096;
/// Cap on dense joint tables built by [`exact_objective`].
pub const MAX_JOINT_ENTRIES: usize = 1 << 22;

/// Shannon entropy in nats with `0·ln 0 = 0`. Rejects negative entries and
/// non-normalized distributions.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| p < 0.0) {
        return Err(CoreError::validation("entropy: negative probability"));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::validation(format!("entropy: distribution sums to {sum}")));
    }
    Ok(entropy_unchecked(dist))
}

fn entropy_unchecked(dist: &[f64]) -> f64 {
    -dist.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Dense joint distributions
// ---------------------------------------------------------------------------

/// Dense probability table over named finite axes.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    axes: Vec<(String, usize)>,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(axes: Vec<(String, usize)>, table: Vec<f64>) -> Result<Self> {
        let want: usize = axes.iter().map(|(_, c)| c).product();
        if want != table.len() {
            return Err(CoreError::validation(format!(
                "joint table has {} entries for {want} cells",
                table.len()
            )));
        }
        if table.iter().any(|&p| p < 0.0) {
            return Err(CoreError::validation("joint: negative probability"));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::validation(format!("joint sums to {sum}")));
        }
        Ok(DiscreteJoint { axes, table })
    }

    pub fn axes(&self) -> &[(String, usize)] {
        &self.axes
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    fn axis(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CoreError::Schema(format!("joint has no axis '{name}'")))
    }

    /// Marginal table over the given axes (in the given order).
    pub fn marginal(&self, names: &[&str]) -> Result<Vec<f64>> {
        let keep: Vec<usize> = names.iter().map(|n| self.axis(n)).collect::<Result<_>>()?;
        let cards: Vec<usize> = self.axes.iter().map(|(_, c)| *c).collect();
        let out_len: usize = keep.iter().map(|&a| cards[a]).product();
        let mut out = vec![0.0; out_len];
        let mut idx = vec![0usize; cards.len()];
        for &p in &self.table {
            let mut oi = 0;
            for &a in &keep {
                oi = oi * cards[a] + idx[a];
            }
            out[oi] += p;
            // Row-major increment.
            for d in (0..cards.len()).rev() {
                idx[d] += 1;
                if idx[d] < cards[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(out)
    }

    pub fn entropy_of(&self, names: &[&str]) -> Result<f64> {
        Ok(entropy_unchecked(&self.marginal(names)?))
    }

    /// `I(A; B) = H(A) + H(B) − H(A, B)` from marginalized tables.
    pub fn mutual_information(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.entropy_of(&[a])? + self.entropy_of(&[b])? - self.entropy_of(&[a, b])?)
    }
}

// ---------------------------------------------------------------------------
// Enumerable instances and kernels
// ---------------------------------------------------------------------------

/// A dataset collapsed to its distinct feature rows.
#[derive(Debug, Clone)]
pub struct EnumerableInstance {
    /// Distinct feature rows.
    pub states: Vec<Vec<f64>>,
    /// State index of every original dataset row.
    pub row_states: Vec<usize>,
    /// Empirical state distribution.
    pub weights: Vec<f64>,
    pub schema: Vec<AttributeSchema>,
    /// Per attribute (schema order): label of every state.
    pub labels: Vec<Vec<usize>>,
}

impl EnumerableInstance {
    /// Collapses a dataset; errors if there are more than `max_states`
    /// distinct rows. Label determinism per row is already guaranteed by
    /// [`Dataset`].
    pub fn from_dataset(dataset: &Dataset, max_states: usize) -> Result<Self> {
        let n = dataset.len();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut row_states = Vec::with_capacity(n);
        for i in 0..n {
            let row = dataset.features().row(i);
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let next = states.len();
            let state = *index.entry(key).or_insert_with(|| {
                states.push(row.to_vec());
                next
            });
            row_states.push(state);
            if states.len() > max_states {
                return Err(CoreError::Resource(format!(
                    "more than {max_states} distinct feature rows"
                )));
            }
        }
        let mut counts = vec![0.0; states.len()];
        for &s in &row_states {
            counts[s] += 1.0;
        }
        let weights: Vec<f64> = counts.into_iter().map(|c| c / n as f64).collect();
        let mut labels = Vec::with_capacity(dataset.schema().len());
        for attr in dataset.schema() {
            let all = dataset.labels(&attr.name)?;
            let mut per_state = vec![0usize; states.len()];
            for (i, &s) in row_states.iter().enumerate() {
                per_state[s] = all[i];
            }
            labels.push(per_state);
        }
        Ok(EnumerableInstance {
            states,
            row_states,
            weights,
            schema: dataset.schema().to_vec(),
            labels,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_rows(&self) -> usize {
        self.row_states.len()
    }

    pub fn attr_index(&self, name: &str) -> Result<usize> {
        self.schema
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| CoreError::Schema(format!("unknown attribute '{name}'")))
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.schema.len()).filter(|&i| self.schema[i].role == role).collect()
    }

    /// Marginal label distribution of one attribute.
    pub fn attr_marginal(&self, attr: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.schema[attr].cardinality];
        for (s, &w) in self.weights.iter().enumerate() {
            out[self.labels[attr][s]] += w;
        }
        out
    }

    /// Joint entropy of a set of attributes (in nats).
    pub fn label_entropy(&self, attrs: &[usize]) -> f64 {
        let cards: Vec<usize> = attrs.iter().map(|&a| self.schema[a].cardinality).collect();
        let len: usize = cards.iter().product();
        let mut table = vec![0.0; len];
        for (s, &w) in self.weights.iter().enumerate() {
            let mut idx = 0;
            for (k, &a) in attrs.iter().enumerate() {
                idx = idx * cards[k] + self.labels[a][s];
            }
            table[idx] += w;
        }
        entropy_unchecked(&table)
    }

    pub fn state_entropy(&self) -> f64 {
        entropy_unchecked(&self.weights)
    }

    /// Feature matrix of the states, for evaluating a model on all of X.
    pub fn state_features(&self) -> Tensor {
        Tensor::from_rows(&self.states).unwrap()
    }
}

/// A substitution kernel over an instance: one probability row per state,
/// plus the substitute pool's labels for every attribute.
#[derive(Debug, Clone)]
pub struct StochasticKernel {
    /// `n_states × pool` row-stochastic matrix.
    pub rows: Vec<Vec<f64>>,
    /// Per attribute (instance schema order): pool labels, when known.
    pub pool_labels: Option<Vec<Vec<usize>>>,
}

impl StochasticKernel {
    pub fn pool_size(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Evaluates a substitution model on every state.
    pub fn from_model(instance: &EnumerableInstance, model: &SubstitutionModel) -> Result<Self> {
        let probs = model.substitution_probs(&instance.state_features())?;
        let rows = (0..probs.batch()).map(|i| probs.row(i).to_vec()).collect();
        let mut pool_labels = Vec::with_capacity(instance.schema.len());
        for attr in &instance.schema {
            pool_labels.push(model.substitute().labels_for(&attr.name)?.to_vec());
        }
        Ok(StochasticKernel { rows, pool_labels: Some(pool_labels) })
    }

    /// Seeded random kernel: rows are normalized powers of uniforms, with
    /// `sharpness` controlling how peaked they are.
    pub fn random(
        rng: &mut impl Rng,
        n_states: usize,
        pool: usize,
        sharpness: f64,
    ) -> StochasticKernel {
        let rows = (0..n_states)
            .map(|_| {
                let raw: Vec<f64> =
                    (0..pool).map(|_| rng.gen_range(1e-3..1.0f64).powf(sharpness)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        StochasticKernel { rows, pool_labels: None }
    }
}

/// Seeded random enumerable instance for verification sweeps. States carry
/// index-valued feature rows; labels are uniform random per state.
pub fn random_instance(
    rng: &mut impl Rng,
    n_states: usize,
    n_rows: usize,
    attrs: &[(&str, usize, Role)],
) -> EnumerableInstance {
    let states: Vec<Vec<f64>> = (0..n_states).map(|s| vec![s as f64]).collect();
    let row_states: Vec<usize> = (0..n_rows)
        .map(|i| if i < n_states { i } else { rng.gen_range(0..n_states) })
        .collect();
    let mut counts = vec![0.0; n_states];
    for &s in &row_states {
        counts[s] += 1.0;
    }
    let weights: Vec<f64> = counts.into_iter().map(|c| c / n_rows as f64).collect();
    let schema: Vec<AttributeSchema> = attrs
        .iter()
        .map(|(name, card, role)| AttributeSchema {
            name: name.to_string(),
            cardinality: *card,
            role: *role,
        })
        .collect();
    let labels = schema
        .iter()
        .map(|a| (0..n_states).map(|_| rng.gen_range(0..a.cardinality)).collect())
        .collect();
    EnumerableInstance { states, row_states, weights, schema, labels }
}

// ---------------------------------------------------------------------------
// Exact objective
// ---------------------------------------------------------------------------

/// Direct pair computation: `I(X'; attr)` from the kernel and state labels.
pub fn mi_released_attr(
    weights: &[f64],
    rows: &[Vec<f64>],
    labels: &[usize],
    cardinality: usize,
) -> f64 {
    let pool = rows.first().map_or(0, Vec::len);
    let mut joint = vec![0.0; cardinality * pool];
    for (s, &w) in weights.iter().enumerate() {
        let base = labels[s] * pool;
        for (j, &p) in rows[s].iter().enumerate() {
            joint[base + j] += w * p;
        }
    }
    let mut attr_marg = vec![0.0; cardinality];
    let mut pool_marg = vec![0.0; pool];
    for c in 0..cardinality {
        for j in 0..pool {
            attr_marg[c] += joint[c * pool + j];
            pool_marg[j] += joint[c * pool + j];
        }
    }
    entropy_unchecked(&attr_marg) + entropy_unchecked(&pool_marg) - entropy_unchecked(&joint)
}

/// Direct pair computation: `I(X'; X)`.
pub fn mi_released_state(weights: &[f64], rows: &[Vec<f64>]) -> f64 {
    let pool = rows.first().map_or(0, Vec::len);
    let mut pool_marg = vec![0.0; pool];
    let mut joint_entropy = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        for (j, &p) in rows[s].iter().enumerate() {
            let q = w * p;
            pool_marg[j] += q;
            if q > 0.0 {
                joint_entropy -= q * q.ln();
            }
        }
    }
    entropy_unchecked(weights) + entropy_unchecked(&pool_marg) - joint_entropy
}

/// The exact information objective
/// `L = Σ_i I(X'; S_i) − λ Σ_j I(X'; U_j) − μ I(X'; X)`
/// computed from the dense joint `P(X, X', S, U)`.
pub fn exact_objective(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    let joint = build_joint(instance, kernel)?;
    let mut value = mu * 0.0;
    for &i in &instance.indices_with_role(Role::Private) {
        value += joint.mutual_information("x_prime", &instance.schema[i].name)?;
    }
    for &j in &instance.indices_with_role(Role::Useful) {
        value -= lambda * joint.mutual_information("x_prime", &instance.schema[j].name)?;
    }
    value -= mu * joint.mutual_information("x_prime", "x")?;
    Ok(value)
}

/// Dense joint over `(X, X', S…, U…)`; hidden attributes stay out of the
/// objective and are not materialized.
pub fn build_joint(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
) -> Result<DiscreteJoint> {
    let n = instance.n_states();
    let pool = kernel.pool_size();
    if kernel.rows.len() != n {
        return Err(CoreError::validation("kernel rows do not match instance states"));
    }
    let in_scope: Vec<usize> = (0..instance.schema.len())
        .filter(|&i| instance.schema[i].role != Role::Hidden)
        .collect();
    let mut axes = vec![("x".to_string(), n), ("x_prime".to_string(), pool)];
    let mut cells = n * pool;
    for &a in &in_scope {
        let card = instance.schema[a].cardinality;
        cells = cells.saturating_mul(card);
        axes.push((instance.schema[a].name.clone(), card));
    }
    if cells > MAX_JOINT_ENTRIES {
        return Err(CoreError::Resource(format!(
            "joint would need {cells} cells (cap {MAX_JOINT_ENTRIES})"
        )));
    }
    let label_stride: usize =
        in_scope.iter().map(|&a| instance.schema[a].cardinality).product();
    let mut table = vec![0.0; cells];
    for (s, &w) in instance.weights.iter().enumerate() {
        // Deterministic labels pick exactly one cell per (x, x').
        let mut label_idx = 0;
        for &a in &in_scope {
            label_idx = label_idx * instance.schema[a].cardinality + instance.labels[a][s];
        }
        for (j, &p) in kernel.rows[s].iter().enumerate() {
            table[(s * pool + j) * label_stride + label_idx] += w * p;
        }
    }
    DiscreteJoint::new(axes, table)
}

// ---------------------------------------------------------------------------
// Bound reports
// ---------------------------------------------------------------------------

/// Outcome of one inequality check. `holds` allows 3 standard errors of
/// Monte-Carlo slack plus a 1e-10 numerical epsilon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub standard_error: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, standard_error: f64) -> Self {
        let slack = rhs - lhs;
        BoundReport {
            name: name.into(),
            lhs,
            rhs,
            slack,
            standard_error,
            holds: slack >= -(3.0 * standard_error + 1e-10),
        }
    }
}

/// One line per check: name, both sides, slack, standard error, verdict.
pub fn write_bound_reports(reports: &[BoundReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        writeln!(
            out,
            "check={} lhs={:.12e} rhs={:.12e} slack={:.12e} se={:.6e} holds={}",
            r.name, r.lhs, r.rhs, r.slack, r.standard_error, r.holds
        )?;
    }
    Ok(())
}

/// Monte-Carlo check that the expected batch loss plus the constant offset
/// upper-bounds the exact objective: draws `n_batches` uniform row subsets,
/// evaluates the batch loss on kernel rows, and compares
/// `mean + C` against `exact_objective` within three standard errors.
#[allow(clippy::too_many_arguments)]
pub fn check_objective_bound(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    lambda: f64,
    mu: f64,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
    name: &str,
) -> Result<BoundReport> {
    let useful = instance.indices_with_role(Role::Useful);
    let private = instance.indices_with_role(Role::Private);
    if mu > useful.len() as f64 {
        return Err(CoreError::validation(format!(
            "bound hypothesis violated: mu {mu} exceeds the {} useful attributes",
            useful.len()
        )));
    }
    let pool_labels = kernel
        .pool_labels
        .as_ref()
        .ok_or_else(|| CoreError::validation("kernel has no pool labels"))?;
    if batch_size < 2 || batch_size > instance.n_rows() {
        return Err(CoreError::validation("batch_size out of range"));
    }

    let lhs = exact_objective(instance, kernel, lambda, mu)?;

    let entropies: Vec<f64> = useful
        .iter()
        .map(|&a| entropy_unchecked(&instance.attr_marginal(a)))
        .collect();
    let constant =
        loss::constant_c(private.len(), useful.len(), lambda, mu, kernel.pool_size(), &entropies)
            .value;

    let mut rng = rng::substream(seed, Stream::Diagnostics, 1);
    let n_rows = instance.n_rows();
    let mut totals = Vec::with_capacity(n_batches);
    let mut pool: Vec<usize> = (0..n_rows).collect();
    for _ in 0..n_batches {
        // Uniform batch without replacement.
        for i in 0..batch_size {
            let j = rng.gen_range(i..n_rows);
            pool.swap(i, j);
        }
        let batch = &pool[..batch_size];
        let states: Vec<usize> = batch.iter().map(|&r| instance.row_states[r]).collect();
        let prob_rows: Vec<Vec<f64>> =
            states.iter().map(|&s| kernel.rows[s].clone()).collect();
        let probs = ProbMatrix::new(Tensor::from_rows(&prob_rows)?)?;
        let labels = BatchLabels {
            private: private
                .iter()
                .map(|&a| AttrBatch {
                    name: instance.schema[a].name.clone(),
                    cardinality: instance.schema[a].cardinality,
                    labels: states.iter().map(|&s| instance.labels[a][s]).collect(),
                })
                .collect(),
            useful: useful
                .iter()
                .map(|&a| UsefulBatch {
                    name: instance.schema[a].name.clone(),
                    cardinality: instance.schema[a].cardinality,
                    labels: states.iter().map(|&s| instance.labels[a][s]).collect(),
                    substitute_labels: pool_labels[a].clone(),
                })
                .collect(),
        };
        totals.push(loss::loss_total(&probs, &labels, lambda, mu)?.total);
    }
    let (mean, sd) = crate::stats::mean_sd(&totals);
    let se = sd / (n_batches as f64).sqrt();
    Ok(BoundReport::new(name, lhs, mean + constant, se))
}

/// Exact entanglement ceilings. For every private attribute and every
/// non-empty useful subset of size ≤ `max_subset`:
/// `Σ_{j∈J} I(X';U_j) ≤ I(X';S) + H(U_J|S) + C(U_J)` with
/// `C(U_J) = Σ H(U_j) − H(U_J)`, and `I(X';X) ≤ I(X';S) + H(X|S)`.
pub fn check_entanglement_ceilings(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    max_subset: usize,
) -> Result<Vec<BoundReport>> {
    let useful = instance.indices_with_role(Role::Useful);
    let private = instance.indices_with_role(Role::Private);
    let mut reports = Vec::new();

    let mi_attr: HashMap<usize, f64> = useful
        .iter()
        .chain(private.iter())
        .map(|&a| {
            (
                a,
                mi_released_attr(
                    &instance.weights,
                    &kernel.rows,
                    &instance.labels[a],
                    instance.schema[a].cardinality,
                ),
            )
        })
        .collect();
    let mi_state = mi_released_state(&instance.weights, &kernel.rows);

    for &i in &private {
        let s_name = &instance.schema[i].name;
        let mi_s = mi_attr[&i];
        let h_s = instance.label_entropy(&[i]);

        for subset in subsets_up_to(&useful, max_subset) {
            let lhs: f64 = subset.iter().map(|&j| mi_attr[&j]).sum();
            let h_joint = instance.label_entropy(&subset);
            let total_corr: f64 =
                subset.iter().map(|&j| instance.label_entropy(&[j])).sum::<f64>() - h_joint;
            let mut with_s = subset.clone();
            with_s.push(i);
            let h_given_s = instance.label_entropy(&with_s) - h_s;
            let subset_names: Vec<&str> =
                subset.iter().map(|&j| instance.schema[j].name.as_str()).collect();
            reports.push(BoundReport::new(
                format!("entanglement[{s_name}|{}]", subset_names.join("+")),
                lhs,
                mi_s + h_given_s + total_corr,
                0.0,
            ));
        }

        // Deterministic labels: H(X, S) = H(X), so H(X|S) = H(X) − H(S).
        let h_x_given_s = instance.state_entropy() - h_s;
        reports.push(BoundReport::new(
            format!("state_ceiling[{s_name}]"),
            mi_state,
            mi_s + h_x_given_s,
            0.0,
        ));
    }
    Ok(reports)
}

fn subsets_up_to(items: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let n = items.len();
    for mask in 1u32..(1 << n) {
        if (mask.count_ones() as usize) <= max_size {
            out.push(
                (0..n).filter(|&k| mask & (1 << k) != 0).map(|k| items[k]).collect(),
            );
        }
    }
    out
}

/// Result of the randomized-mechanism closeness check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdpReport {
    /// Max over released samples of `KL(P(S|x') ‖ P(S))`.
    pub gamma: f64,
    /// `√(2γ)`: the additive closeness guarantee.
    pub delta: f64,
    /// Largest observed probability gap over all class subsets and input
    /// pairs.
    pub empirical_sup: f64,
    pub report: BoundReport,
}

/// Checks that the ideal attacker's expected inference on any two inputs
/// differs by at most `√(2γ)` in probability for every class event.
///
/// `A(x) = Σ_x' P(x'|x)·P(S|x')` is the attacker's expected posterior for
/// input `x`; the check enumerates every non-trivial class subset (private
/// cardinality ≤ 8) and every state pair.
pub fn ldp_bound(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    private_attr: &str,
) -> Result<LdpReport> {
    let attr = instance.attr_index(private_attr)?;
    let card = instance.schema[attr].cardinality;
    if card > 8 {
        return Err(CoreError::Resource(format!(
            "class-subset enumeration limited to cardinality 8, got {card}"
        )));
    }
    let pool = kernel.pool_size();
    let labels = &instance.labels[attr];

    // P(S, X') and its marginals.
    let mut joint = vec![0.0; card * pool];
    for (s, &w) in instance.weights.iter().enumerate() {
        for (j, &p) in kernel.rows[s].iter().enumerate() {
            joint[labels[s] * pool + j] += w * p;
        }
    }
    let prior = instance.attr_marginal(attr);
    let mut pool_marg = vec![0.0; pool];
    for c in 0..card {
        for j in 0..pool {
            pool_marg[j] += joint[c * pool + j];
        }
    }

    // Posterior per released sample and the worst-case divergence γ.
    let mut posterior = vec![vec![0.0; card]; pool];
    let mut gamma: f64 = 0.0;
    for j in 0..pool {
        if pool_marg[j] <= 0.0 {
            continue;
        }
        let mut kl = 0.0;
        for c in 0..card {
            let p = joint[c * pool + j] / pool_marg[j];
            posterior[j][c] = p;
            if p > 0.0 {
                kl += if prior[c] > 0.0 { p * (p / prior[c]).ln() } else { f64::INFINITY };
            }
        }
        gamma = gamma.max(kl);
    }
    let delta = (2.0 * gamma).sqrt();

    // Expected attacker inference per state.
    let n = instance.n_states();
    let mut inference = vec![vec![0.0; card]; n];
    for s in 0..n {
        for (j, &p) in kernel.rows[s].iter().enumerate() {
            for c in 0..card {
                inference[s][c] += p * posterior[j][c];
            }
        }
    }

    // sup over subsets and pairs = max over subsets of (max − min over x).
    let mut empirical_sup: f64 = 0.0;
    for mask in 1u32..((1 << card) - 1) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &inference {
            let mass: f64 =
                (0..card).filter(|&c| mask & (1 << c) != 0).map(|c| row[c]).sum();
            lo = lo.min(mass);
            hi = hi.max(mass);
        }
        empirical_sup = empirical_sup.max(hi - lo);
    }

    let report = BoundReport::new(
        format!("mechanism_closeness[{private_attr}]"),
        empirical_sup,
        delta,
        0.0,
    );
    Ok(LdpReport { gamma, delta, empirical_sup, report })
}

/// The exact estimation gap `I(X';S) − I_φ(X';S)
/// = E_{P(X')}[KL(P(S|X') ‖ P_φ(S|X'))] ≥ 0` left behind by a classifier
/// with posteriors `probe_posteriors` (one row per pool sample).
pub fn adversary_gap(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    private_attr: &str,
    probe_posteriors: &Tensor,
) -> Result<f64> {
    let attr = instance.attr_index(private_attr)?;
    let card = instance.schema[attr].cardinality;
    let pool = kernel.pool_size();
    if probe_posteriors.rows() != pool || probe_posteriors.cols() != card {
        return Err(CoreError::validation(format!(
            "probe posteriors must be {pool}x{card}"
        )));
    }
    let labels = &instance.labels[attr];
    let mut joint = vec![0.0; card * pool];
    for (s, &w) in instance.weights.iter().enumerate() {
        for (j, &p) in kernel.rows[s].iter().enumerate() {
            joint[labels[s] * pool + j] += w * p;
        }
    }
    let mut pool_marg = vec![0.0; pool];
    for c in 0..card {
        for j in 0..pool {
            pool_marg[j] += joint[c * pool + j];
        }
    }
    let mut gap = 0.0;
    for j in 0..pool {
        if pool_marg[j] <= 0.0 {
            continue;
        }
        for c in 0..card {
            let p = joint[c * pool + j] / pool_marg[j];
            if p > 0.0 {
                let q = probe_posteriors.get(j, c);
                gap += pool_marg[j] * p * (p / q.max(1e-300)).ln();
            }
        }
    }
    Ok(gap)
}

/// Demonstrates that the naive per-batch objective (conditional mutual
/// informations computed within each batch) is a biased estimate of the
/// exact objective. Returns `(E[L(B)], L, bias, standard error)`.
pub struct BiasReport {
    pub batch_mean: f64,
    pub exact: f64,
    pub bias: f64,
    pub standard_error: f64,
}

pub fn minibatch_bias_demo(
    instance: &EnumerableInstance,
    kernel: &StochasticKernel,
    lambda: f64,
    mu: f64,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<BiasReport> {
    if batch_size < 2 || batch_size > instance.n_rows() {
        return Err(CoreError::validation("batch_size out of range"));
    }
    let exact = exact_objective(instance, kernel, lambda, mu)?;
    let private = instance.indices_with_role(Role::Private);
    let useful = instance.indices_with_role(Role::Useful);

    let mut rng = rng::substream(seed, Stream::Diagnostics, 2);
    let n_rows = instance.n_rows();
    let mut pool: Vec<usize> = (0..n_rows).collect();
    let mut values = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        for i in 0..batch_size {
            let j = rng.gen_range(i..n_rows);
            pool.swap(i, j);
        }
        let batch = &pool[..batch_size];
        // Batch-local state distribution.
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for &r in batch {
            *counts.entry(instance.row_states[r]).or_insert(0.0) += 1.0;
        }
        let mut states: Vec<usize> = counts.keys().copied().collect();
        states.sort_unstable();
        let weights: Vec<f64> =
            states.iter().map(|s| counts[s] / batch_size as f64).collect();
        let rows: Vec<Vec<f64>> = states.iter().map(|&s| kernel.rows[s].clone()).collect();

        let mut value = 0.0;
        for &a in &private {
            let labels: Vec<usize> = states.iter().map(|&s| instance.labels[a][s]).collect();
            value +=
                mi_released_attr(&weights, &rows, &labels, instance.schema[a].cardinality);
        }
        for &a in &useful {
            let labels: Vec<usize> = states.iter().map(|&s| instance.labels[a][s]).collect();
            value -= lambda
                * mi_released_attr(&weights, &rows, &labels, instance.schema[a].cardinality);
        }
        value -= mu * mi_released_state(&weights, &rows);
        values.push(value);
    }
    let (mean, sd) = crate::stats::mean_sd(&values);
    let se = sd / (n_batches as f64).sqrt();
    Ok(BiasReport { batch_mean: mean, exact, bias: mean - exact, standard_error: se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_substitute, SyntheticSpec};
    use crate::model::{ModelConfig, SubstitutionModel};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_oracles() {
        assert!((entropy(&[0.25; 4]).unwrap() - (4f64).ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let v = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((v - 1.039_720_770_839_917_9).abs() < 1e-12);
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.4, 0.4]).is_err());
    }

    #[test]
    fn mutual_information_oracles() {
        // Independent product joint.
        let pa = [0.3, 0.7];
        let pb = [0.2, 0.5, 0.3];
        let mut table = Vec::new();
        for &a in &pa {
            for &b in &pb {
                table.push(a * b);
            }
        }
        let joint =
            DiscreteJoint::new(vec![("a".into(), 2), ("b".into(), 3)], table).unwrap();
        assert!(joint.mutual_information("a", "b").unwrap().abs() < 1e-12);

        // Identity coupling of a uniform 4-way variable.
        let mut table = vec![0.0; 16];
        for i in 0..4 {
            table[i * 4 + i] = 0.25;
        }
        let joint =
            DiscreteJoint::new(vec![("a".into(), 4), ("b".into(), 4)], table).unwrap();
        assert!((joint.mutual_information("a", "b").unwrap() - (4f64).ln()).abs() < 1e-12);

        // Hand 2×2 joint.
        let joint = DiscreteJoint::new(
            vec![("a".into(), 2), ("b".into(), 2)],
            vec![0.4, 0.1, 0.1, 0.4],
        )
        .unwrap();
        let v = joint.mutual_information("a", "b").unwrap();
        assert!((v - 0.192_744_757_021_757_47).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_matches_direct_double_sum() {
        // Second, independent route: Σ p·ln(p/(pa·pb)) over the table.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        for _ in 0..50 {
            let (ca, cb) = (rng.gen_range(2..5usize), rng.gen_range(2..5usize));
            let raw: Vec<f64> = (0..ca * cb).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let table: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let joint = DiscreteJoint::new(
                vec![("a".into(), ca), ("b".into(), cb)],
                table.clone(),
            )
            .unwrap();
            let via_entropies = joint.mutual_information("a", "b").unwrap();

            let mut pa = vec![0.0; ca];
            let mut pb = vec![0.0; cb];
            for i in 0..ca {
                for j in 0..cb {
                    pa[i] += table[i * cb + j];
                    pb[j] += table[i * cb + j];
                }
            }
            let mut direct = 0.0;
            for i in 0..ca {
                for j in 0..cb {
                    let p = table[i * cb + j];
                    if p > 0.0 {
                        direct += p * (p / (pa[i] * pb[j])).ln();
                    }
                }
            }
            assert!(
                (via_entropies - direct).abs() < 1e-10,
                "{via_entropies} vs {direct}"
            );
        }
    }

    fn enumerable_fixture(seed: u64) -> (EnumerableInstance, Dataset, SubstitutionModel) {
        let spec = SyntheticSpec::uniform(
            400,
            &[("s", 2, Role::Private), ("u", 4, Role::Useful), ("h", 8, Role::Hidden)],
            0.0,
            seed,
        );
        let ds = generate_synthetic(&spec).unwrap();
        let instance = EnumerableInstance::from_dataset(&ds, MAX_STATES).unwrap();
        let sub = sample_substitute(&ds, 32, seed).unwrap();
        let cfg =
            ModelConfig { hidden_layers: vec![16], embed_dim: 8, tau: 0.1, ..Default::default() };
        let model = SubstitutionModel::init(cfg, ds.dim(), sub, None, seed).unwrap();
        (instance, ds, model)
    }

    #[test]
    fn instance_collapses_duplicate_rows() {
        let (instance, ds, _) = enumerable_fixture(1);
        assert!(instance.n_states() <= 64);
        assert_eq!(instance.n_rows(), ds.len());
        let total: f64 = instance.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        // Too small a cap trips the resource guard.
        assert!(matches!(
            EnumerableInstance::from_dataset(&ds, 3),
            Err(CoreError::Resource(_))
        ));
    }

    fn uniform_kernel(n: usize, pool: usize) -> StochasticKernel {
        StochasticKernel { rows: vec![vec![1.0 / pool as f64; pool]; n], pool_labels: None }
    }

    #[test]
    fn exact_objective_analytic_cases() {
        let (instance, _, _) = enumerable_fixture(2);
        let n = instance.n_states();

        // Uniform kernel: everything independent of X', objective 0.
        let v = exact_objective(&instance, &uniform_kernel(n, 16), 1.0, 0.5).unwrap();
        assert!(v.abs() < 1e-12);

        // Distinct one-hot per state: I(X';X) = H(X).
        let mut rows = vec![vec![0.0; n]; n];
        for (s, row) in rows.iter_mut().enumerate() {
            row[s] = 1.0;
        }
        let kernel = StochasticKernel { rows, pool_labels: None };
        let joint = build_joint(&instance, &kernel).unwrap();
        let mi = joint.mutual_information("x_prime", "x").unwrap();
        assert!((mi - instance.state_entropy()).abs() < 1e-12);
    }

    #[test]
    fn exact_objective_matches_direct_pair_route() {
        let (instance, _, model) = enumerable_fixture(3);
        let kernel = StochasticKernel::from_model(&instance, &model).unwrap();
        let via_joint = exact_objective(&instance, &kernel, 0.7, 0.3).unwrap();

        let mut direct = 0.0;
        for &a in &instance.indices_with_role(Role::Private) {
            direct += mi_released_attr(
                &instance.weights,
                &kernel.rows,
                &instance.labels[a],
                instance.schema[a].cardinality,
            );
        }
        for &a in &instance.indices_with_role(Role::Useful) {
            direct -= 0.7
                * mi_released_attr(
                    &instance.weights,
                    &kernel.rows,
                    &instance.labels[a],
                    instance.schema[a].cardinality,
                );
        }
        direct -= 0.3 * mi_released_state(&instance.weights, &kernel.rows);
        assert!((via_joint - direct).abs() < 1e-10);
    }

    #[test]
    fn exact_objective_is_invariant_to_state_relabeling() {
        let (instance, _, model) = enumerable_fixture(4);
        let kernel = StochasticKernel::from_model(&instance, &model).unwrap();
        let v1 = exact_objective(&instance, &kernel, 1.0, 0.2).unwrap();

        // Permuted summation: reverse the state order everywhere.
        let n = instance.n_states();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = EnumerableInstance {
            states: perm.iter().map(|&s| instance.states[s].clone()).collect(),
            row_states: instance.row_states.iter().map(|&s| n - 1 - s).collect(),
            weights: perm.iter().map(|&s| instance.weights[s]).collect(),
            schema: instance.schema.clone(),
            labels: instance
                .labels
                .iter()
                .map(|l| perm.iter().map(|&s| l[s]).collect())
                .collect(),
        };
        let permuted_kernel = StochasticKernel {
            rows: perm.iter().map(|&s| kernel.rows[s].clone()).collect(),
            pool_labels: kernel.pool_labels.clone(),
        };
        let v2 = exact_objective(&permuted, &permuted_kernel, 1.0, 0.2).unwrap();
        assert!((v1 - v2).abs() < 1e-10, "{v1} vs {v2}");
    }

    #[test]
    fn objective_bound_uniform_kernel_and_hand_case() {
        let (instance, _, model) = enumerable_fixture(5);
        // Uniform kernel via a model with identical table rows.
        let mut model = model;
        let first: Vec<f64> = model.params()[crate::model::G_TABLE].row(0).to_vec();
        let g = model.params_mut().get_mut(crate::model::G_TABLE).unwrap();
        let e = first.len();
        for r in 0..g.rows() {
            g.values_mut()[r * e..(r + 1) * e].copy_from_slice(&first);
        }
        let kernel = StochasticKernel::from_model(&instance, &model).unwrap();
        let report =
            check_objective_bound(&instance, &kernel, 1.0, 0.2, 300, 16, 9, "uniform").unwrap();
        assert!(report.lhs.abs() < 1e-9, "objective {}", report.lhs);
        assert!(report.rhs >= 0.0);
        assert!(report.holds);
    }

    #[test]
    fn objective_bound_two_state_hand_enumeration() {
        // λ = μ = 0, single private attribute, unequal weights: the bound
        // reduces to E[−H(X'|S,B)] + ln K ≥ I(X';S), checkable by hand.
        let features = Tensor::matrix(4, 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = vec![vec![0, 0, 0, 1]];
        let schema = vec![AttributeSchema {
            name: "s".into(),
            cardinality: 2,
            role: Role::Private,
        }];
        let ds = Dataset::new(features, labels, schema).unwrap();
        let instance = EnumerableInstance::from_dataset(&ds, 16).unwrap();
        let rows = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let kernel =
            StochasticKernel { rows: rows.clone(), pool_labels: Some(vec![vec![0, 1]]) };

        // Hand computation: P(X) = (3/4, 1/4); S ≡ X here.
        let mixed = [0.75 * 0.9 + 0.25 * 0.1, 0.75 * 0.1 + 0.25 * 0.9];
        let h_rows = entropy(&rows[0]).unwrap(); // both rows same entropy
        let i_xs = entropy(&mixed).unwrap() - h_rows;

        let report = check_objective_bound(&instance, &kernel, 0.0, 0.0, 500, 4, 3, "hand").unwrap();
        assert!((report.lhs - i_xs).abs() < 1e-12);
        // Full-coverage batches make the estimator exact: rhs − lhs
        // = ln 2 − H(mixed).
        let expected_rhs = -h_rows + (2f64).ln();
        assert!((report.rhs - expected_rhs).abs() < 1e-9);
        assert!(report.holds);
        assert!(report.slack > 0.0);
    }

    #[test]
    fn objective_bound_holds_for_random_models() {
        let (instance, _, model) = enumerable_fixture(6);
        let kernel = StochasticKernel::from_model(&instance, &model).unwrap();
        let report =
            check_objective_bound(&instance, &kernel, 1.0, 0.2, 500, 16, 11, "random").unwrap();
        assert!(report.holds, "slack {} se {}", report.slack, report.standard_error);

        // Hypothesis violation is rejected.
        assert!(check_objective_bound(&instance, &kernel, 1.0, 1.5, 10, 16, 1, "bad").is_err());
    }

    #[test]
    fn entanglement_special_cases() {
        // Single useful attribute independent of S, X' = X (identity
        // kernel): ln|U| ≤ I(X';S) + H(U|S); equality when S carries no
        // information at all (constant label).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut instance = random_instance(
            &mut rng,
            16,
            64,
            &[("s", 2, Role::Private), ("u", 4, Role::Useful)],
        );
        // Make U uniform over states and S constant.
        instance.labels[0] = vec![0; 16];
        instance.labels[1] = (0..16).map(|s| s % 4).collect();
        instance.weights = vec![1.0 / 16.0; 16];
        let mut rows = vec![vec![0.0; 16]; 16];
        for (s, row) in rows.iter_mut().enumerate() {
            row[s] = 1.0;
        }
        let kernel = StochasticKernel { rows, pool_labels: None };
        let reports = check_entanglement_ceilings(&instance, &kernel, 3).unwrap();
        let entangle = reports.iter().find(|r| r.name.starts_with("entanglement")).unwrap();
        assert!((entangle.lhs - (4f64).ln()).abs() < 1e-12);
        assert!(entangle.holds);
        assert!(entangle.slack.abs() < 1e-10, "tight case, slack {}", entangle.slack);

        // Uniform kernel: all lhs zero, slack = rhs.
        let uniform = uniform_kernel(16, 8);
        for r in check_entanglement_ceilings(&instance, &uniform, 3).unwrap() {
            assert!(r.lhs.abs() < 1e-12);
            assert!(r.holds);
            assert!((r.slack - r.rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn entanglement_holds_on_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        for trial in 0..100 {
            let n_states = rng.gen_range(4..32);
            let (c1, c2) = (rng.gen_range(2..5), rng.gen_range(2..4));
            let instance = random_instance(
                &mut rng,
                n_states,
                n_states * 3,
                &[
                    ("s", 2, Role::Private),
                    ("u1", c1, Role::Useful),
                    ("u2", c2, Role::Useful),
                ],
            );
            let (pool, sharpness) = (rng.gen_range(4..24), rng.gen_range(0.5..8.0));
            let kernel = StochasticKernel::random(&mut rng, n_states, pool, sharpness);
            for r in check_entanglement_ceilings(&instance, &kernel, 2).unwrap() {
                assert!(r.holds, "trial {trial}: {} slack {}", r.name, r.slack);
            }
        }
    }

    #[test]
    fn ldp_bound_analytic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let instance = random_instance(
            &mut rng,
            12,
            48,
            &[("s", 2, Role::Private), ("u", 3, Role::Useful)],
        );

        // Kernel independent of x: identical expected inference everywhere.
        let shared: Vec<f64> = {
            let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        };
        let kernel = StochasticKernel {
            rows: vec![shared.clone(); instance.n_states()],
            pool_labels: None,
        };
        let ldp = ldp_bound(&instance, &kernel, "s").unwrap();
        assert!(ldp.empirical_sup < 1e-12);
        assert!(ldp.report.holds);

        // Uniform kernel: posterior equals prior everywhere, so γ = 0.
        let ldp = ldp_bound(&instance, &uniform_kernel(instance.n_states(), 8), "s").unwrap();
        assert!(ldp.gamma.abs() < 1e-12);
        assert!(ldp.delta.abs() < 1e-6);
        assert!(ldp.empirical_sup < 1e-12);
        assert!(ldp.report.holds);
    }

    #[test]
    fn ldp_bound_holds_on_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        for trial in 0..100 {
            let n_states = rng.gen_range(4..24);
            let instance = random_instance(
                &mut rng,
                n_states,
                n_states * 2,
                &[("s", 2, Role::Private), ("u", 3, Role::Useful)],
            );
            let (pool, sharpness) = (rng.gen_range(3..16), rng.gen_range(0.5..6.0));
            let kernel = StochasticKernel::random(&mut rng, n_states, pool, sharpness);
            let ldp = ldp_bound(&instance, &kernel, "s").unwrap();
            assert!(
                ldp.report.holds,
                "trial {trial}: sup {} vs delta {}",
                ldp.empirical_sup, ldp.delta
            );
        }
    }

    #[test]
    fn adversary_gap_oracle_and_prior_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let instance = random_instance(
            &mut rng,
            10,
            40,
            &[("s", 2, Role::Private), ("u", 3, Role::Useful)],
        );
        let kernel = StochasticKernel::random(&mut rng, 10, 6, 2.0);

        // True posterior per pool sample.
        let attr = instance.attr_index("s").unwrap();
        let labels = &instance.labels[attr];
        let mut joint = [0.0; 12];
        for (s, &w) in instance.weights.iter().enumerate() {
            for (j, &p) in kernel.rows[s].iter().enumerate() {
                joint[labels[s] * 6 + j] += w * p;
            }
        }
        let mut pool_marg = [0.0; 6];
        for c in 0..2 {
            for j in 0..6 {
                pool_marg[j] += joint[c * 6 + j];
            }
        }
        let oracle_rows: Vec<Vec<f64>> = (0..6)
            .map(|j| (0..2).map(|c| joint[c * 6 + j] / pool_marg[j]).collect())
            .collect();
        let oracle = Tensor::from_rows(&oracle_rows).unwrap();
        let gap = adversary_gap(&instance, &kernel, "s", &oracle).unwrap();
        assert!(gap.abs() < 1e-10, "oracle gap {gap}");

        // Prior-only probe recovers exactly I(X';S).
        let prior = instance.attr_marginal(attr);
        let prior_probe = Tensor::from_rows(&vec![prior; 6]).unwrap();
        let gap = adversary_gap(&instance, &kernel, "s", &prior_probe).unwrap();
        let mi = mi_released_attr(&instance.weights, &kernel.rows, labels, 2);
        assert!((gap - mi).abs() < 1e-10);
    }

    #[test]
    fn adversary_gap_nonnegative_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        use rand::Rng;
        for _ in 0..100 {
            let n_states = rng.gen_range(4..16);
            let pool = rng.gen_range(3..10);
            let s_card = rng.gen_range(2..4);
            let instance = random_instance(
                &mut rng,
                n_states,
                n_states * 2,
                &[("s", s_card, Role::Private), ("u", 2, Role::Useful)],
            );
            let card = instance.schema[0].cardinality;
            let kernel = StochasticKernel::random(&mut rng, n_states, pool, 1.5);
            let probe_rows: Vec<Vec<f64>> = (0..pool)
                .map(|_| {
                    let raw: Vec<f64> = (0..card).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / sum).collect()
                })
                .collect();
            let probe = Tensor::from_rows(&probe_rows).unwrap();
            let gap = adversary_gap(&instance, &kernel, "s", &probe).unwrap();
            assert!(gap >= -1e-10, "gap {gap}");
        }
    }

    #[test]
    fn bias_demo_cases() {
        let (instance, _, model) = enumerable_fixture(13);
        let kernel = StochasticKernel::from_model(&instance, &model).unwrap();

        // Full-batch: the per-batch objective is the exact objective.
        let full = minibatch_bias_demo(
            &instance,
            &kernel,
            1.0,
            0.2,
            instance.n_rows(),
            5,
            3,
        )
        .unwrap();
        assert!(full.bias.abs() < 1e-10, "full-batch bias {}", full.bias);

        // Small batches on a non-uniform kernel: bias is real.
        let small = minibatch_bias_demo(&instance, &kernel, 1.0, 0.2, 4, 800, 3).unwrap();
        assert!(
            small.bias.abs() > 3.0 * small.standard_error,
            "bias {} se {}",
            small.bias,
            small.standard_error
        );

        // Uniform kernel: every within-batch MI vanishes.
        let uniform = uniform_kernel(instance.n_states(), 8);
        let none = minibatch_bias_demo(&instance, &uniform, 1.0, 0.2, 4, 50, 3).unwrap();
        assert!(none.batch_mean.abs() < 1e-12);
        assert!(none.bias.abs() < 1e-12);
    }

    #[test]
    fn bound_report_files() {
        let reports = vec![
            BoundReport::new("alpha", 0.5, 0.7, 0.0),
            BoundReport::new("beta", 1.0, 0.9, 0.1),
        ];
        assert!(reports[0].holds);
        assert!(reports[1].holds); // within 3 SE
        let strict = BoundReport::new("gamma", 1.0, 0.9, 0.0);
        assert!(!strict.holds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bounds.txt");
        write_bound_reports(&reports, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("check=alpha"));
        assert!(text.contains("slack="));
        assert!(text.contains("se="));
    }
}
