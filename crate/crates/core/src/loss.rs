//! The training loss on a mini-batch of substitution probabilities.
//!
//! Three families of terms, all in nats:
//!
//! * private suppression: minus the entropy of the class-conditional
//!   substitute distribution, averaged over the private classes present in
//!   the batch with their batch frequencies as weights;
//! * useful preservation: log-cardinality-scaled cross-entropy of landing on
//!   a substitute that shares the row's useful label;
//! * general preservation: mean entropy of the per-row substitution
//!   distribution.
//!
//! The total that training minimizes is
//! `Σ_i private_i + λ Σ_j useful_j + μ general`: every term is oriented so
//! that smaller is better, and the λ/μ weights trade suppression against the
//! two preservation pressures. `constant_c` gives the batch-independent
//! offset that turns the expected total into an upper bound on the exact
//! information objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::{Dataset, Role, SubstituteSet};
use crate::error::{CoreError, Result};
use crate::model::ProbMatrix;

/// Probabilities are clamped here before any log.
pub const PROB_CLAMP: f64 = 1e-12;

fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>()
}

/// Batch-aligned labels for every in-scope attribute. Hidden attributes are
/// deliberately absent: they never reach the loss.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub private: Vec<AttrBatch>,
    pub useful: Vec<UsefulBatch>,
}

#[derive(Debug, Clone)]
pub struct AttrBatch {
    pub name: String,
    pub cardinality: usize,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct UsefulBatch {
    pub name: String,
    pub cardinality: usize,
    pub labels: Vec<usize>,
    /// Labels of the substitute pool for this attribute.
    pub substitute_labels: Vec<usize>,
}

impl BatchLabels {
    /// Collects private/useful labels for the given batch rows.
    pub fn gather(
        dataset: &Dataset,
        batch_indices: &[usize],
        substitute: &SubstituteSet,
    ) -> Result<Self> {
        let mut private = Vec::new();
        let mut useful = Vec::new();
        for attr in dataset.schema() {
            match attr.role {
                Role::Private => {
                    let all = dataset.labels(&attr.name)?;
                    private.push(AttrBatch {
                        name: attr.name.clone(),
                        cardinality: attr.cardinality,
                        labels: batch_indices.iter().map(|&i| all[i]).collect(),
                    });
                }
                Role::Useful => {
                    let all = dataset.labels(&attr.name)?;
                    useful.push(UsefulBatch {
                        name: attr.name.clone(),
                        cardinality: attr.cardinality,
                        labels: batch_indices.iter().map(|&i| all[i]).collect(),
                        substitute_labels: substitute.labels_for(&attr.name)?.to_vec(),
                    });
                }
                Role::Hidden => {}
            }
        }
        Ok(BatchLabels { private, useful })
    }
}

/// Per-term values of one batch loss evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub private_terms: Vec<(String, f64)>,
    pub useful_terms: Vec<(String, f64)>,
    pub general_term: f64,
    pub lambda: f64,
    pub mu: f64,
    pub total: f64,
    /// The bound offset for this run's constants, when known.
    pub constant_c: Option<f64>,
}

impl LossBreakdown {
    /// Recombines the stored terms; equals `total` up to rounding.
    pub fn recompute_total(&self) -> f64 {
        let s: f64 = self.private_terms.iter().map(|(_, v)| v).sum();
        let u: f64 = self.useful_terms.iter().map(|(_, v)| v).sum();
        s + self.lambda * u + self.mu * self.general_term
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.private_terms.iter().all(|(_, v)| v.is_finite())
            && self.useful_terms.iter().all(|(_, v)| v.is_finite())
            && self.general_term.is_finite()
    }
}

/// Suppression term for one private attribute: minus the batch-weighted
/// entropy of the class-conditional mean substitution row. Ranges over
/// `[-ln K, 0]`, minimized when every class's conditional distribution is
/// uniform.
pub fn loss_private(probs: &ProbMatrix, labels: &[usize], cardinality: usize) -> Result<f64> {
    let b = probs.batch();
    if b == 0 || labels.len() != b {
        return Err(CoreError::validation("loss_private: empty or mismatched batch"));
    }
    let k = probs.pool();
    let mut value = 0.0;
    for class in 0..cardinality {
        let members: Vec<usize> = (0..b).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let weight = members.len() as f64 / b as f64;
        let mut conditional = vec![0.0; k];
        for &i in &members {
            for (j, c) in conditional.iter_mut().enumerate() {
                *c += probs.row(i)[j];
            }
        }
        let inv = 1.0 / members.len() as f64;
        for c in conditional.iter_mut() {
            *c *= inv;
        }
        value -= weight * entropy_nats(&conditional);
    }
    Ok(value)
}

/// Preservation term for one useful attribute: `ln(cardinality)` times the
/// mean negative log-probability of substituting into the row's own class.
/// Non-negative; zero when every row's mass sits on matching substitutes.
/// Classes missing from the substitute pool are reported so callers can warn;
/// the clamp keeps the loss finite regardless.
pub fn loss_useful(
    probs: &ProbMatrix,
    labels: &[usize],
    substitute_labels: &[usize],
    cardinality: usize,
) -> Result<(f64, Vec<usize>)> {
    let b = probs.batch();
    if b == 0 || labels.len() != b {
        return Err(CoreError::validation("loss_useful: empty or mismatched batch"));
    }
    if cardinality < 2 {
        return Err(CoreError::validation("loss_useful: cardinality must be >= 2"));
    }
    if substitute_labels.len() != probs.pool() {
        return Err(CoreError::validation("loss_useful: substitute labels mismatch pool"));
    }
    let missing: Vec<usize> =
        (0..cardinality).filter(|c| !substitute_labels.contains(c)).collect();
    let mut acc = 0.0;
    for i in 0..b {
        let row = probs.row(i);
        let mass: f64 = row
            .iter()
            .zip(substitute_labels)
            .filter(|(_, &l)| l == labels[i])
            .map(|(p, _)| p)
            .sum();
        acc += -(mass.max(PROB_CLAMP)).ln();
    }
    Ok(((cardinality as f64).ln() * acc / b as f64, missing))
}

/// General-preservation term: mean entropy of the per-row substitution
/// distribution, in `[0, ln K]`. Zero for deterministic rows.
pub fn loss_general(probs: &ProbMatrix) -> Result<f64> {
    let b = probs.batch();
    if b == 0 {
        return Err(CoreError::validation("loss_general: empty batch"));
    }
    let mut acc = 0.0;
    for i in 0..b {
        acc += entropy_nats(probs.row(i));
    }
    Ok(acc / b as f64)
}

/// Full batch loss `Σ private + λ Σ useful + μ general` with its breakdown.
pub fn loss_total(
    probs: &ProbMatrix,
    labels: &BatchLabels,
    lambda: f64,
    mu: f64,
) -> Result<LossBreakdown> {
    if lambda < 0.0 || mu < 0.0 {
        return Err(CoreError::validation("loss weights must be >= 0"));
    }
    let mut private_terms = Vec::with_capacity(labels.private.len());
    for attr in &labels.private {
        private_terms.push((
            attr.name.clone(),
            loss_private(probs, &attr.labels, attr.cardinality)?,
        ));
    }
    let mut useful_terms = Vec::with_capacity(labels.useful.len());
    for attr in &labels.useful {
        let (v, _) =
            loss_useful(probs, &attr.labels, &attr.substitute_labels, attr.cardinality)?;
        useful_terms.push((attr.name.clone(), v));
    }
    let general_term = loss_general(probs)?;
    let total = private_terms.iter().map(|(_, v)| v).sum::<f64>()
        + lambda * useful_terms.iter().map(|(_, v)| v).sum::<f64>()
        + mu * general_term;
    Ok(LossBreakdown {
        private_terms,
        useful_terms,
        general_term,
        lambda,
        mu,
        total,
        constant_c: None,
    })
}

/// The batch-independent offset `C = (M − μ)·ln K − λ·Σ_j H(U_j) + λ`.
///
/// `useful_entropies` are the training-set marginal entropies of the useful
/// attributes in nats. The offset is valid as a bound companion for
/// `μ ≤ N`; callers get `hypothesis_violated` when that is breached, with
/// the value still computed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstantC {
    pub value: f64,
    pub hypothesis_violated: bool,
}

pub fn constant_c(
    n_private: usize,
    n_useful: usize,
    lambda: f64,
    mu: f64,
    pool_size: usize,
    useful_entropies: &[f64],
) -> ConstantC {
    debug_assert_eq!(useful_entropies.len(), n_useful);
    let value = (n_private as f64 - mu) * (pool_size as f64).ln()
        - lambda * useful_entropies.iter().sum::<f64>()
        + lambda;
    ConstantC { value, hypothesis_violated: mu > n_useful as f64 }
}

// ---------------------------------------------------------------------------
// Graph builders (training path)
// ---------------------------------------------------------------------------

/// Node handles of a loss graph, for reading the breakdown after `forward`.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub private: Vec<(String, NodeId)>,
    pub useful: Vec<(String, NodeId)>,
    pub general: NodeId,
}

/// Appends the private term for one attribute onto `probs`.
pub fn attach_loss_private(
    graph: &mut Graph,
    probs: NodeId,
    labels: &[usize],
    cardinality: usize,
) -> NodeId {
    let b = labels.len();
    // Class-selection rows average the batch rows of each class; absent
    // classes keep an all-zero row and zero weight, contributing nothing.
    let mut sel = vec![0.0; cardinality * b];
    let mut weights = vec![0.0; cardinality];
    for class in 0..cardinality {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count == 0 {
            continue;
        }
        weights[class] = count as f64 / b as f64;
        for (i, &l) in labels.iter().enumerate() {
            if l == class {
                sel[class * b + i] = 1.0 / count as f64;
            }
        }
    }
    let sel = graph.constant(Tensor::matrix(cardinality, b, sel).unwrap());
    let w = graph.constant(Tensor::vector(weights));
    let conditional = graph.matmul(sel, probs);
    let xl = graph.xlogx(conditional);
    let row_neg_entropy = graph.row_sum(xl);
    graph.dot(w, row_neg_entropy)
}

/// Appends the useful term for one attribute onto `probs`.
pub fn attach_loss_useful(
    graph: &mut Graph,
    probs: NodeId,
    labels: &[usize],
    substitute_labels: &[usize],
    cardinality: usize,
) -> NodeId {
    let b = labels.len();
    let k = substitute_labels.len();
    let mut mask = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        for (j, &sl) in substitute_labels.iter().enumerate() {
            if sl == l {
                mask[i * k + j] = 1.0;
            }
        }
    }
    let mask = graph.constant(Tensor::matrix(b, k, mask).unwrap());
    let matched = graph.mul(probs, mask);
    let mass = graph.row_sum(matched);
    let clamped = graph.clamp_min(mass, PROB_CLAMP);
    let logs = graph.ln(clamped);
    let mean = graph.mean_all(logs);
    graph.scale(mean, -(cardinality as f64).ln())
}

/// Appends the general term onto `probs`.
pub fn attach_loss_general(graph: &mut Graph, probs: NodeId, batch_size: usize) -> NodeId {
    let xl = graph.xlogx(probs);
    let s = graph.sum_all(xl);
    graph.scale(s, -1.0 / batch_size as f64)
}

/// Appends the full loss and returns handles to every term.
pub fn attach_loss_total(
    graph: &mut Graph,
    probs: NodeId,
    labels: &BatchLabels,
    lambda: f64,
    mu: f64,
) -> LossNodes {
    let batch_size = labels
        .private
        .first()
        .map(|a| a.labels.len())
        .or_else(|| labels.useful.first().map(|a| a.labels.len()))
        .expect("at least one attribute");
    let mut terms = Vec::new();
    let mut coeffs = Vec::new();
    let mut private = Vec::new();
    for attr in &labels.private {
        let node = attach_loss_private(graph, probs, &attr.labels, attr.cardinality);
        private.push((attr.name.clone(), node));
        terms.push(node);
        coeffs.push(1.0);
    }
    let mut useful = Vec::new();
    for attr in &labels.useful {
        let node = attach_loss_useful(
            graph,
            probs,
            &attr.labels,
            &attr.substitute_labels,
            attr.cardinality,
        );
        useful.push((attr.name.clone(), node));
        terms.push(node);
        coeffs.push(lambda);
    }
    let general = attach_loss_general(graph, probs, batch_size);
    terms.push(general);
    coeffs.push(mu);
    let total = graph.affine(terms, coeffs, 0.0);
    LossNodes { total, private, useful, general }
}

/// Reads a [`LossBreakdown`] out of an evaluated loss graph.
pub fn breakdown_from_graph(
    graph: &Graph,
    nodes: &LossNodes,
    lambda: f64,
    mu: f64,
    constant_c: Option<f64>,
) -> LossBreakdown {
    let read = |id: NodeId| graph.value(id).expect("forward has run").scalar_value();
    LossBreakdown {
        private_terms: nodes.private.iter().map(|(n, id)| (n.clone(), read(*id))).collect(),
        useful_terms: nodes.useful.iter().map(|(n, id)| (n.clone(), read(*id))).collect(),
        general_term: read(nodes.general),
        lambda,
        mu,
        total: read(nodes.total),
        constant_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs_from(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn uniform_probs(b: usize, k: usize) -> ProbMatrix {
        probs_from(&vec![vec![1.0 / k as f64; k]; b])
    }

    fn random_probs(seed: u64, b: usize, k: usize) -> ProbMatrix {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Diagnostics);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        probs_from(&rows)
    }

    #[test]
    fn private_loss_reaches_its_minimum_on_uniform_rows() {
        let probs = uniform_probs(6, 16);
        let labels = vec![0, 1, 0, 1, 0, 1];
        let v = loss_private(&probs, &labels, 2).unwrap();
        assert!((v - -(16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn private_loss_zero_for_shared_one_hot() {
        let row = {
            let mut r = vec![0.0; 8];
            r[3] = 1.0;
            r
        };
        let probs = probs_from(&vec![row; 4]);
        let v = loss_private(&probs, &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn private_loss_hand_oracle() {
        // Class 0: rows (0.5, 0.5) and (1, 0) -> conditional (0.75, 0.25).
        // Class 1: row (0, 1) -> entropy 0. Weights 2/3 and 1/3.
        let probs = probs_from(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = loss_private(&probs, &[0, 0, 1], 2).unwrap();
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let expected = -(2.0 / 3.0) * h;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - -0.374_890_096_412_538_85).abs() < 1e-9);
    }

    #[test]
    fn private_loss_is_invariant_to_permutation_within_class() {
        let probs = probs_from(&[
            vec![0.7, 0.3],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
            vec![0.9, 0.1],
        ]);
        let a = loss_private(&probs, &[0, 0, 1, 1], 2).unwrap();
        let permuted = probs_from(&[
            vec![0.2, 0.8],
            vec![0.7, 0.3],
            vec![0.9, 0.1],
            vec![0.5, 0.5],
        ]);
        let b = loss_private(&permuted, &[0, 0, 1, 1], 2).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn useful_loss_oracles() {
        // All mass on matching substitutes: exactly zero.
        let probs = probs_from(&[vec![0.6, 0.4, 0.0], vec![0.0, 0.0, 1.0]]);
        let subs = vec![0, 0, 1];
        let (v, missing) = loss_useful(&probs, &[0, 1], &subs, 2).unwrap();
        assert_eq!(v, 0.0);
        assert!(missing.is_empty());

        // Half the mass on the matching class, |U| = 2: (ln 2)².
        let probs = probs_from(&[vec![0.5, 0.5]]);
        let (v, _) = loss_useful(&probs, &[0], &[0, 1], 2).unwrap();
        assert!((v - LN2 * LN2).abs() < 1e-12);
        assert!((v - 0.480_453_013_918_201_4).abs() < 1e-9);

        // No mass on the matching class: the clamp bounds the log.
        let probs = probs_from(&[vec![1.0, 0.0]]);
        let (v, _) = loss_useful(&probs, &[1], &[0, 0], 2).unwrap();
        let expected = LN2 * -(PROB_CLAMP.ln());
        assert!((v - expected).abs() < 1e-9);

        // A class absent from the pool is flagged.
        let (_, missing) = loss_useful(&probs, &[1], &[0, 0], 3).unwrap();
        assert_eq!(missing, vec![1, 2]);
    }

    #[test]
    fn general_loss_oracles() {
        let one_hot = probs_from(&[vec![1.0, 0.0, 0.0]]);
        assert_eq!(loss_general(&one_hot).unwrap(), 0.0);

        let v = loss_general(&uniform_probs(3, 16)).unwrap();
        assert!((v - (16f64).ln()).abs() < 1e-12);

        let mixed = probs_from(&[vec![0.5, 0.25, 0.25], vec![1.0, 0.0, 0.0]]);
        let h = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h - 1.039_720_770_839_917_9).abs() < 1e-12);
        let v = loss_general(&mixed).unwrap();
        assert!((v - h / 2.0).abs() < 1e-12);
        assert!((v - 0.519_860_385_419_959).abs() < 1e-9);
    }

    fn batch_for(probs: &ProbMatrix, sub_labels: Vec<usize>) -> BatchLabels {
        let b = probs.batch();
        BatchLabels {
            private: vec![AttrBatch {
                name: "s".into(),
                cardinality: 2,
                labels: (0..b).map(|i| i % 2).collect(),
            }],
            useful: vec![UsefulBatch {
                name: "u".into(),
                cardinality: 4,
                labels: (0..b).map(|i| i % 4).collect(),
                substitute_labels: sub_labels,
            }],
        }
    }

    #[test]
    fn total_composes_its_parts() {
        let probs = uniform_probs(8, 16);
        let labels = batch_for(&probs, (0..16).map(|j| j % 4).collect());

        // Degenerate weights: only the private sum remains.
        let b0 = loss_total(&probs, &labels, 0.0, 0.0).unwrap();
        let private_sum: f64 = b0.private_terms.iter().map(|(_, v)| v).sum();
        assert!((b0.total - private_sum).abs() < 1e-15);

        // Composed from the part oracles at λ = μ = 1: uniform rows give
        // −ln16 private, ln4·ln4 useful (mass 1/4 on the matching class),
        // ln16 general.
        let b1 = loss_total(&probs, &labels, 1.0, 1.0).unwrap();
        let ln16 = (16f64).ln();
        let ln4 = (4f64).ln();
        let expected = -ln16 + ln4 * ln4 + ln16;
        assert!((b1.total - expected).abs() < 1e-12);

        // Internal consistency at arbitrary weights.
        let b2 = loss_total(&probs, &labels, 0.7, 0.3).unwrap();
        assert!((b2.total - b2.recompute_total()).abs() < 1e-12);
    }

    #[test]
    fn constant_c_oracles() {
        // M=1, N=1, λ=1, μ=0.2, K=16, H(U)=ln4.
        let c = constant_c(1, 1, 1.0, 0.2, 16, &[(4f64).ln()]);
        assert!(!c.hypothesis_violated);
        assert!((c.value - 1.831_776_616_671_934_3).abs() < 1e-9);

        // λ=0, μ=M: everything cancels.
        let c = constant_c(2, 3, 0.0, 2.0, 64, &[0.5, 0.5, 0.5]);
        assert_eq!(c.value, 0.0);

        // λ=0, μ=0: M·ln K.
        let c = constant_c(1, 1, 0.0, 0.0, 16, &[0.3]);
        assert!((c.value - (16f64).ln()).abs() < 1e-12);

        // μ beyond the useful count is flagged but still evaluated.
        let c = constant_c(1, 1, 1.0, 1.5, 16, &[0.3]);
        assert!(c.hypothesis_violated);
        assert!(c.value.is_finite());
    }

    #[test]
    fn graph_terms_match_plain_evaluation() {
        let probs = random_probs(3, 6, 8);
        let labels = batch_for(&probs, (0..8).map(|j| j % 4).collect());
        let plain = loss_total(&probs, &labels, 0.8, 0.25).unwrap();

        let mut graph = Graph::new();
        let p = graph.input("probs");
        let nodes = attach_loss_total(&mut graph, p, &labels, 0.8, 0.25);
        graph.set_output(nodes.total);
        let mut bindings = std::collections::BTreeMap::new();
        bindings.insert("probs".to_string(), probs.tensor().clone());
        let total = graph.forward(&bindings).unwrap().scalar_value();
        assert!((total - plain.total).abs() < 1e-12);

        let from_graph = breakdown_from_graph(&graph, &nodes, 0.8, 0.25, None);
        for ((_, a), (_, b)) in plain.private_terms.iter().zip(&from_graph.private_terms) {
            assert!((a - b).abs() < 1e-12);
        }
        for ((_, a), (_, b)) in plain.useful_terms.iter().zip(&from_graph.useful_terms) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((plain.general_term - from_graph.general_term).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradients_match_central_differences() {
        use crate::data::{generate_synthetic, sample_substitute, Role, SyntheticSpec};
        use crate::model::{ModelConfig, SubstitutionModel};

        for trial in 0..5u64 {
            let mut spec = SyntheticSpec::uniform(
                32,
                &[("s", 2, Role::Private), ("u", 4, Role::Useful)],
                0.3,
                trial,
            );
            spec.feature_dim = 6;
            let ds = generate_synthetic(&spec).unwrap();
            let substitute = sample_substitute(&ds, 8, trial).unwrap();
            let cfg = ModelConfig {
                hidden_layers: vec![8],
                embed_dim: 5,
                tau: 0.1,
                ..Default::default()
            };
            let mut model =
                SubstitutionModel::init(cfg, 6, substitute.clone(), None, trial).unwrap();
            // Embedding norms of order one, as after training; h = 1e-5 sits
            // well inside the converged regime there.
            for p in model.params_mut().values_mut() {
                for v in p.values_mut() {
                    *v *= 10.0;
                }
            }
            let rows: Vec<usize> = (0..8).collect();
            let x = {
                let mut values = Vec::new();
                for &i in &rows {
                    values.extend_from_slice(ds.features().row(i));
                }
                Tensor::matrix(8, 6, values).unwrap()
            };
            let labels = BatchLabels {
                private: vec![AttrBatch {
                    name: "s".into(),
                    cardinality: 2,
                    labels: rows.iter().map(|&i| ds.labels("s").unwrap()[i]).collect(),
                }],
                useful: vec![UsefulBatch {
                    name: "u".into(),
                    cardinality: 4,
                    labels: rows.iter().map(|&i| ds.labels("u").unwrap()[i]).collect(),
                    substitute_labels: substitute.labels_for("u").unwrap().to_vec(),
                }],
            };
            let build = |model: &SubstitutionModel| {
                let mut graph = Graph::new();
                let xi = graph.input("x");
                let probs = model.attach_probs(&mut graph, xi);
                let nodes = attach_loss_total(&mut graph, probs, &labels, 0.8, 0.3);
                graph.set_output(nodes.total);
                graph
            };
            let mut graph = build(&model);
            graph.forward(&model.bindings(&x)).unwrap();
            let grads = graph.backward().unwrap();
            for (name, analytic) in &grads {
                let point = model.params()[name].clone();
                let mut eval_at = |t: &Tensor| {
                    let mut probe = model.clone();
                    probe.params_mut().insert(name.clone(), t.clone());
                    let mut g = build(&probe);
                    Ok(g.forward(&probe.bindings(&x))?.scalar_value())
                };
                let numeric =
                    crate::autodiff::finite_diff(&mut eval_at, &point, 1e-5).unwrap();
                for (a, n) in analytic.values().iter().zip(numeric.values()) {
                    let denom = a.abs().max(n.abs());
                    if denom < 1e-6 {
                        assert!((a - n).abs() < 1e-7, "{name}: {a} vs {n}");
                    } else {
                        assert!(
                            ((a - n) / denom).abs() < 1e-4,
                            "trial {trial} {name}: {a} vs {n}"
                        );
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn term_ranges_hold_on_random_matrices(seed in 0u64..200) {
            let k = 8 + (seed % 9) as usize;
            let b = 3 + (seed % 5) as usize;
            let probs = random_probs(seed, b, k);
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let ln_k = (k as f64).ln();

            let lp = loss_private(&probs, &labels, 2).unwrap();
            prop_assert!((-ln_k - 1e-12..=1e-12).contains(&lp));

            let lg = loss_general(&probs).unwrap();
            prop_assert!((-1e-12..=ln_k + 1e-12).contains(&lg));

            let subs: Vec<usize> = (0..k).map(|j| j % 4).collect();
            let ulabels: Vec<usize> = (0..b).map(|i| (i + 1) % 4).collect();
            let (lu, _) = loss_useful(&probs, &ulabels, &subs, 4).unwrap();
            prop_assert!(lu >= 0.0);
        }
    }
}
