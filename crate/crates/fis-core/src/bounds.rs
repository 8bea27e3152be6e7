//! Empirical harness for the generalization and risk-disparity bounds
//! on component mixtures.
//!
//! Both checks train models on tagged mixture samples, measure the
//! bounded quantity directly, assemble the bound's right-hand side from
//! empirically estimated constants, and report both sides with their
//! slack. The constants are maxima over declared sample sizes, so they
//! can undershoot the population quantities; negative slack is reported
//! rather than hidden.
//!
//! The distance between distributions is the L1 distance between
//! component frequency vectors. The generalization check compares the
//! risk of a model trained on `P` and evaluated on `Q` against
//! `G_P * dist(P, Q) + sqrt(log(4/delta) / 2 N_P) + R_P(w)`. The
//! disparity check compares a group's excess risk against
//! `G_k * dist(P_k, Q_k) + G_P * dist(P, Q) + Phi * dist(P_k, P)^2 +
//! Upsilon`, where `Phi` accumulates step-size and curvature terms over
//! the training horizon and `Upsilon` collects two concentration terms
//! plus the empirical-versus-ideal risk offsets `varpi` and `varpi_k`.
//! The ideal risks have no closed form, so they are approximated by
//! training reference models on fresh samples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ComponentMixture, DataError, Dataset, Example, TaggedDataset};
use crate::model::{self, init_model, sgd_train, GradScope, ModelError, ModelState, TrainConfig};
use crate::{seed, Scalar};

/// Probability vectors are accepted when they sum to one within this
/// tolerance.
const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("probability vectors have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("not a probability vector: {0:?}")]
    BadProbabilityVector(Vec<f64>),
    #[error("delta must lie strictly between 0 and 1, got {0}")]
    BadDelta(f64),
    #[error("constant estimation needs at least one sample per component")]
    ZeroSamples,
    #[error("group {group} has no examples in the {part} sample")]
    EmptyGroup { part: String, group: usize },
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

fn validate_probability_vector(p: &[f64]) -> Result<(), BoundsError> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0 + PROBABILITY_SUM_TOLERANCE).contains(&x))
        || (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE
    {
        return Err(BoundsError::BadProbabilityVector(p.to_vec()));
    }
    Ok(())
}

/// L1 distance between two probability vectors over the same components.
pub fn dist(pa: &[f64], pb: &[f64]) -> Result<f64, BoundsError> {
    if pa.len() != pb.len() {
        return Err(BoundsError::LengthMismatch {
            a: pa.len(),
            b: pb.len(),
        });
    }
    validate_probability_vector(pa)?;
    validate_probability_vector(pb)?;
    Ok(pa.iter().zip(pb).map(|(a, b)| (a - b).abs()).sum())
}

/// Empirical estimates of the constants appearing in the bounds, taken
/// as maxima over per-component samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Largest per-component mean loss under the given model.
    pub max_component_mean_loss: f64,
    /// Largest per-sample loss-gradient norm.
    pub max_gradient_norm: f64,
    /// Largest gradient-difference quotient over random parameter pairs
    /// near the given model.
    pub max_curvature: f64,
    pub samples_per_component: usize,
}

/// Number of random parameter pairs probed per sample when estimating
/// the curvature constant.
const CURVATURE_PAIRS: usize = 4;

/// Radius of the parameter perturbations used for curvature probing.
const CURVATURE_RADIUS: f64 = 0.25;

/// Estimates the bound constants for one model against one mixture.
/// Draws are sequential per component, so for a fixed seed the
/// estimates are monotone nondecreasing in `samples_per_component`.
pub fn estimate_constants<S: Scalar>(
    m: &ModelState<S>,
    mixture: &ComponentMixture<S>,
    samples_per_component: usize,
    estimate_seed: u64,
) -> Result<ConstantEstimates, BoundsError> {
    if samples_per_component == 0 {
        return Err(BoundsError::ZeroSamples);
    }
    // The probe pairs depend only on the seed, never on the sample
    // count, which keeps the curvature maximum monotone as well.
    let mut probes: Vec<(ModelState<S>, ModelState<S>, S)> = Vec::with_capacity(CURVATURE_PAIRS);
    for pair in 0..CURVATURE_PAIRS {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(estimate_seed, "constants-pair", pair as u64));
        let mut perturb = || -> ModelState<S> {
            let mut probe = m.clone();
            for p in probe.params.iter_mut() {
                *p = *p + S::from_f64_lossy(rng.gen_range(-CURVATURE_RADIUS..CURVATURE_RADIUS));
            }
            probe
        };
        let a = perturb();
        let b = perturb();
        let gap = a
            .params
            .iter()
            .zip(&b.params)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            .sqrt();
        probes.push((a, b, gap));
    }

    let mut max_mean_loss = 0.0f64;
    let mut max_grad_norm = 0.0f64;
    let mut max_curvature = 0.0f64;
    for component in 0..mixture.num_components() {
        let sample = mixture.sample_component(
            component,
            samples_per_component,
            seed::derive(estimate_seed, "constants-component", component as u64),
        );
        let mut loss_sum = 0.0f64;
        for ex in &sample.examples {
            loss_sum += model::example_loss(m, ex)?.to_f64_lossy();
            let g = m.grad_example_loss(ex, GradScope::Full)?;
            max_grad_norm = max_grad_norm.max(g.norm().to_f64_lossy());
            for (a, b, gap) in &probes {
                let ga = a.grad_example_loss(ex, GradScope::Full)?;
                let gb = b.grad_example_loss(ex, GradScope::Full)?;
                let diff = ga
                    .values
                    .iter()
                    .zip(&gb.values)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<S>()
                    .sqrt();
                max_curvature = max_curvature.max((diff / *gap).to_f64_lossy());
            }
        }
        max_mean_loss = max_mean_loss.max(loss_sum / samples_per_component as f64);
    }
    Ok(ConstantEstimates {
        max_component_mean_loss: max_mean_loss,
        max_gradient_norm: max_grad_norm,
        max_curvature,
        samples_per_component,
    })
}

/// Mean loss of a model over a dataset.
pub fn mean_loss<S: Scalar>(m: &ModelState<S>, ds: &Dataset<S>) -> Result<f64, BoundsError> {
    if ds.is_empty() {
        return Err(BoundsError::EmptyDataset(ds.name.clone()));
    }
    let mut total = 0.0f64;
    for ex in &ds.examples {
        total += model::example_loss(m, ex)?.to_f64_lossy();
    }
    Ok(total / ds.len() as f64)
}

/// The Hoeffding concentration term `sqrt(log(4/delta) / (2 n))`.
pub fn hoeffding_term(n: usize, delta: f64) -> Result<f64, BoundsError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BoundsError::BadDelta(delta));
    }
    if n == 0 {
        return Err(BoundsError::ZeroSamples);
    }
    Ok(((4.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Right-hand side of the generalization bound:
/// `G_P * dist(P, Q) + sqrt(log(4/delta) / 2 N_P) + R_P(w)`.
pub fn lemma1_rhs(
    g_p: f64,
    dist_pq: f64,
    n_p: usize,
    delta: f64,
    train_risk: f64,
) -> Result<f64, BoundsError> {
    Ok(g_p * dist_pq + hoeffding_term(n_p, delta)? + train_risk)
}

/// The step-size/curvature constant
/// `Phi = 4 L^2 G^2 * sum_{t=0}^{T-1} (eta^2 (1 + 2 eta^2 L^2))^t`.
pub fn phi_constant(l: f64, g: f64, eta: f64, steps: u64) -> f64 {
    let q = eta * eta * (1.0 + 2.0 * eta * eta * l * l);
    let t = steps as f64;
    let series = if (q - 1.0).abs() < 1e-12 {
        t
    } else {
        (1.0 - q.powf(t)) / (1.0 - q)
    };
    4.0 * l * l * g * g * series
}

/// Everything the disparity bound's right-hand side depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityInputs {
    pub g_k: f64,
    pub g_p: f64,
    pub g: f64,
    pub l: f64,
    pub dist_pk_qk: f64,
    pub dist_pq: f64,
    pub dist_pk_p: f64,
    pub eta: f64,
    /// Optimizer steps taken when training the model under test.
    pub steps: u64,
    pub delta: f64,
    pub n_p: usize,
    pub n_pk: usize,
    pub varpi: f64,
    pub varpi_k: f64,
}

/// The assembled right-hand side of the disparity bound along with its
/// named intermediate terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityTerms {
    pub rhs: f64,
    pub phi: f64,
    pub upsilon: f64,
}

/// Right-hand side of the risk-disparity bound:
/// `G_k * dist(P_k, Q_k) + G_P * dist(P, Q) + Phi * dist(P_k, P)^2 +
/// Upsilon`.
pub fn theorem2_rhs(inputs: &DisparityInputs) -> Result<DisparityTerms, BoundsError> {
    let phi = phi_constant(inputs.l, inputs.g, inputs.eta, inputs.steps);
    let upsilon = hoeffding_term(inputs.n_p, inputs.delta)?
        + hoeffding_term(inputs.n_pk, inputs.delta)?
        + inputs.varpi
        + inputs.varpi_k;
    let rhs = inputs.g_k * inputs.dist_pk_qk
        + inputs.g_p * inputs.dist_pq
        + phi * inputs.dist_pk_p * inputs.dist_pk_p
        + upsilon;
    Ok(DisparityTerms { rhs, phi, upsilon })
}

/// One empirical bound check: the measured quantity, the assembled
/// bound, their slack, and every constant that entered the assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative slack is reported, never clamped.
    pub slack: f64,
    pub constants: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, constants: BTreeMap<String, f64>) -> Self {
        BoundReport {
            lhs,
            rhs,
            slack: rhs - lhs,
            constants,
        }
    }
}

/// Symbols reported by every bound check; entries a bound does not use
/// are present with value zero.
const CONSTANT_KEYS: [&str; 16] = [
    "G_P", "G_k", "G", "L", "Phi", "Upsilon", "varpi", "varpi_k", "dist_PQ", "dist_PkQk",
    "dist_PkP", "N_P", "N_Pk", "delta", "T", "eta",
];

fn constants_map(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
    let mut map: BTreeMap<String, f64> = CONSTANT_KEYS
        .iter()
        .map(|&k| (k.to_string(), 0.0))
        .collect();
    for &(key, value) in values {
        map.insert(key.to_string(), value);
    }
    map
}

fn default_samples_per_component() -> usize {
    200
}

fn default_reference_samples() -> usize {
    400
}

fn default_delta() -> f64 {
    0.05
}

fn default_bounds_hidden() -> Vec<usize> {
    vec![16]
}

/// Configuration of the bound checks: how the models under test are
/// trained and how the constants are estimated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsConfig {
    #[serde(default = "default_bounds_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_samples_per_component")]
    pub samples_per_component: usize,
    /// Fresh-sample size for the reference models approximating the
    /// ideal risks.
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            hidden_layers: default_bounds_hidden(),
            train: TrainConfig::default(),
            samples_per_component: default_samples_per_component(),
            reference_samples: default_reference_samples(),
            delta: default_delta(),
            seed: 0,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<(), BoundsError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(BoundsError::BadDelta(self.delta));
        }
        if self.samples_per_component == 0 || self.reference_samples == 0 {
            return Err(BoundsError::ZeroSamples);
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(BoundsError::BadConfig(
                "hidden_layers entries must be >= 1".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| BoundsError::BadConfig(e.to_string()))
    }

    fn layer_sizes(&self, dim: usize, num_classes: usize) -> Vec<usize> {
        let mut layers = Vec::with_capacity(self.hidden_layers.len() + 2);
        layers.push(dim);
        layers.extend_from_slice(&self.hidden_layers);
        layers.push(num_classes);
        layers
    }

    /// Trains a fresh model on `ds` with seeds derived from `stage`.
    fn fit<S: Scalar>(&self, ds: &Dataset<S>, stage: u64) -> Result<ModelState<S>, BoundsError> {
        if ds.is_empty() {
            return Err(BoundsError::EmptyDataset(ds.name.clone()));
        }
        let layers = self.layer_sizes(ds.dim, ds.num_classes);
        let init = init_model::<S>(&layers, seed::derive(self.seed, "bounds-init", stage))?;
        let data: Vec<(Example<S>, S)> = ds.examples.iter().cloned().map(|e| (e, S::one())).collect();
        let mut train = self.train.clone();
        train.seed = seed::derive(self.seed, "bounds-train", stage);
        let (m, _) = sgd_train(&init, &data, &train)?;
        Ok(m)
    }
}

/// Checks the generalization bound on one train/test pair drawn from a
/// mixture: trains a model on `train`, measures its risk on `test`, and
/// compares against the assembled bound.
pub fn check_generalization_bound<S: Scalar>(
    train: &TaggedDataset<S>,
    test: &TaggedDataset<S>,
    mixture: &ComponentMixture<S>,
    cfg: &BoundsConfig,
) -> Result<BoundReport, BoundsError> {
    cfg.validate()?;
    let w_p = cfg.fit(&train.dataset, 0)?;
    let freq_p: Vec<f64> = train
        .empirical_frequencies::<f64 is unused>(mixture.num_components())?;
    let freq_q: Vec<f64> = test.empirical_frequencies(mixture.num_components())?;
    let dist_pq = dist(&freq_p, &freq_q)?;
    let constants = estimate_constants(
        &w_p,
        mixture,
        cfg.samples_per_component,
        seed::derive(cfg.seed, "bounds-constants", 0),
    )?;
    let g_p = constants.max_component_mean_loss;
    let train_risk = mean_loss(&w_p, &train.dataset)?;
    let lhs = mean_loss(&w_p, &test.dataset)?;
    let n_p = train.dataset.len();
    let rhs = lemma1_rhs(g_p, dist_pq, n_p, cfg.delta, train_risk)?;
    Ok(BoundReport::new(
        lhs,
        rhs,
        constants_map(&[
            ("G_P", g_p),
            ("dist_PQ", dist_pq),
            ("N_P", n_p as f64),
            ("delta", cfg.delta),
        ]),
    ))
}

/// Checks the risk-disparity bound for one group: measures the group's
/// excess risk under the model trained on `train` and compares against
/// the assembled bound, training the group-only and reference models it
/// needs along the way.
pub fn check_disparity_bound<S: Scalar>(
    train: &TaggedDataset<S>,
    test: &TaggedDataset<S>,
    mixture: &ComponentMixture<S>,
    group: usize,
    cfg: &BoundsConfig,
) -> Result<BoundReport, BoundsError> {
    cfg.validate()?;
    let train_k = train.group_subset(group)?;
    let test_k = test.group_subset(group)?;
    if train_k.dataset.is_empty() {
        return Err(BoundsError::EmptyGroup {
            part: "train".into(),
            group,
        });
    }
    if test_k.dataset.is_empty() {
        return Err(BoundsError::EmptyGroup {
            part: "test".into(),
            group,
        });
    }

    let w_p = cfg.fit(&train.dataset, 0)?;
    let w_k = cfg.fit(&train_k.dataset, 1)?;

    let components = mixture.num_components();
    let freq_p: Vec<f64> = train.empirical_frequencies(components)?;
    let freq_q: Vec<f64> = test.empirical_frequencies(components)?;
    let freq_pk: Vec<f64> = train_k.empirical_frequencies(components)?;
    let freq_qk: Vec<f64> = test_k.empirical_frequencies(components)?;
    let dist_pq = dist(&freq_p, &freq_q)?;
    let dist_pk_qk = dist(&freq_pk, &freq_qk)?;
    let dist_pk_p = dist(&freq_pk, &freq_p)?;

    let est_p = estimate_constants(
        &w_p,
        mixture,
        cfg.samples_per_component,
        seed::derive(cfg.seed, "bounds-constants", 0),
    )?;
    let est_k = estimate_constants(
        &w_k,
        mixture,
        cfg.samples_per_component,
        seed::derive(cfg.seed, "bounds-constants", 1),
    )?;
    let g_p = est_p.max_component_mean_loss;
    let g_k = est_k.max_component_mean_loss;
    let g = est_p.max_gradient_norm.max(est_k.max_gradient_norm);
    let l = est_p.max_curvature.max(est_k.max_curvature);

    // Reference models on fresh samples approximate the ideal risks.
    let freq_q_s: Vec<S> = freq_q.iter().map(|&f| S::from_f64_lossy(f)).collect();
    let fresh_q = mixture.sample_with(
        &freq_q_s,
        cfg.reference_samples,
        seed::derive(cfg.seed, "bounds-reference", 0),
    )?;
    let w_q = cfg.fit(&fresh_q.dataset, 2)?;
    let ideal_q = mean_loss(&w_q, &fresh_q.dataset)?;
    let fresh_qk = mixture.sample_group(
        &freq_q_s,
        group,
        cfg.reference_samples,
        seed::derive(cfg.seed, "bounds-reference", 1),
    )?;
    let w_qk = cfg.fit(&fresh_qk.dataset, 3)?;
    let ideal_qk = mean_loss(&w_qk, &fresh_qk.dataset)?;

    let varpi = mean_loss(&w_p, &train.dataset)? - ideal_q;
    let varpi_k = mean_loss(&w_k, &train_k.dataset)? - ideal_qk;

    let inputs = DisparityInputs {
        g_k,
        g_p,
        g,
        l,
        dist_pk_qk,
        dist_pq,
        dist_pk_p,
        eta: cfg.train.learning_rate,
        steps: w_p.step,
        delta: cfg.delta,
        n_p: train.dataset.len(),
        n_pk: train_k.dataset.len(),
        varpi,
        varpi_k,
    };
    let terms = theorem2_rhs(&inputs)?;
    let lhs = mean_loss(&w_p, &test_k.dataset)? - mean_loss(&w_p, &test.dataset)?;
    Ok(BoundReport::new(
        lhs,
        terms.rhs,
        constants_map(&[
            ("G_P", g_p),
            ("G_k", g_k),
            ("G", g),
            ("L", l),
            ("Phi", terms.phi),
            ("Upsilon", terms.upsilon),
            ("varpi", varpi),
            ("varpi_k", varpi_k),
            ("dist_PQ", dist_pq),
            ("dist_PkQk", dist_pk_qk),
            ("dist_PkP", dist_pk_p),
            ("N_P", train.dataset.len() as f64),
            ("N_Pk", train_k.dataset.len() as f64),
            ("delta", cfg.delta),
            ("T", w_p.step as f64),
            ("eta", cfg.train.learning_rate),
        ]),
    ))
}
