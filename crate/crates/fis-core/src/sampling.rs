//! The influence-guided sampling loop and the baseline acquisition
//! strategies it is compared against.
//!
//! A run warm-starts a model on the labeled training part, then spends
//! a per-round label budget on pool candidates. Influence-guided
//! selection keeps only candidates whose guessed-label influences on
//! validation loss and on the fairness surrogate are both
//! non-positive, and takes the ones with the most negative fairness
//! influence. Queried candidates join the training set at a configured
//! weight and the model is retrained, by default continuing from the
//! previous round's parameters. Every round records validation
//! accuracy, fairness reports, and the budget ledger; the output set
//! is the rounds whose validation accuracy strictly beats the warm
//! start.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Example, SplitBundle};
use crate::fairness::{fairness_report, FairnessError, FairnessMetricKind, FairnessReport};
use crate::influence::{
    score_candidates, InfluenceError, InfluenceScore, LabelStrategy, ValidationGradients,
};
use crate::model::{evaluate, init_model, predict, sgd_train, ModelError, ModelState, TrainConfig};
use crate::{seed, Scalar};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("exclusion mask has length {got} but the pool has {expected} candidates")]
    ExclusionLength { got: usize, expected: usize },
}

fn default_rounds() -> usize {
    5
}

fn default_budget() -> usize {
    64
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_hidden_layers() -> Vec<usize> {
    vec![64]
}

/// Configuration of one sampling run.
///
/// The run derives every internal seed (model init, per-round batch
/// shuffles, random selection) from `seed`; the seed inside `train` is
/// ignored during runs so that one number reproduces the whole
/// experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisConfig {
    /// Number of sampling rounds after the warm start.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Label budget per round.
    #[serde(default = "default_budget")]
    pub budget_per_round: usize,
    /// Slack allowed in the round-over-round accuracy comparison.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub metric: FairnessMetricKind,
    #[serde(default)]
    pub strategy: LabelStrategy,
    /// Hidden layer widths; empty means a linear softmax model.
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Retrain each round from the initial parameters instead of
    /// continuing from the previous round's checkpoint.
    #[serde(default)]
    pub retrain_from_scratch: bool,
}

impl Default for FisConfig {
    fn default() -> Self {
        FisConfig {
            rounds: default_rounds(),
            budget_per_round: default_budget(),
            tolerance: default_tolerance(),
            metric: FairnessMetricKind::default(),
            strategy: LabelStrategy::default(),
            hidden_layers: default_hidden_layers(),
            train: TrainConfig::default(),
            seed: 0,
            retrain_from_scratch: false,
        }
    }
}

impl FisConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.rounds == 0 {
            return Err(SamplingError::BadConfig("rounds must be >= 1".into()));
        }
        if self.budget_per_round == 0 {
            return Err(SamplingError::BadConfig(
                "budget_per_round must be >= 1".into(),
            ));
        }
        if !self.tolerance.is_finite() || self.tolerance < 0.0 {
            return Err(SamplingError::BadConfig(
                "tolerance must be finite and >= 0".into(),
            ));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(SamplingError::BadConfig(
                "hidden_layers entries must be >= 1".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| SamplingError::BadConfig(e.to_string()))
    }

    /// Full layer layout for a given input dimension and class count.
    pub fn layer_sizes(&self, dim: usize, num_classes: usize) -> Vec<usize> {
        let mut layers = Vec::with_capacity(self.hidden_layers.len() + 2);
        layers.push(dim);
        layers.extend_from_slice(&self.hidden_layers);
        layers.push(num_classes);
        layers
    }

    fn round_train_config(&self, round: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed::derive(self.seed, "train", round);
        cfg
    }
}

const JTT_DEFAULT_LAMBDA: f64 = 20.0;

fn default_jtt_lambda() -> f64 {
    JTT_DEFAULT_LAMBDA
}

/// Baseline acquisition strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Warm start only; the pool is never touched.
    Erm,
    /// Uniform sampling without replacement each round.
    Random,
    /// Top-r by prediction entropy, ties by id ascending.
    Uncertainty,
    /// Top-r by most negative loss influence under guessed labels,
    /// without the sign filter.
    InfluenceOnly,
    /// No sampling: one retraining with warm-start mistakes upweighted.
    Jtt {
        #[serde(default = "default_jtt_lambda")]
        lambda: f64,
    },
}

impl BaselineKind {
    /// Short lowercase name used in output records and file names.
    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::Erm => "erm",
            BaselineKind::Random => "random",
            BaselineKind::Uncertainty => "uncertainty",
            BaselineKind::InfluenceOnly => "influence_only",
            BaselineKind::Jtt { .. } => "jtt",
        }
    }
}

/// Everything recorded about one round of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Round index; 0 is the warm start.
    pub round: usize,
    pub checkpoint_id: String,
    /// Selected candidate ids in rank order.
    pub selected_ids: Vec<usize>,
    /// Scores of the selected candidates at selection time; empty for
    /// strategies that do not compute influences.
    pub selected_scores: Vec<InfluenceScore>,
    /// Accuracy on the validation part.
    pub val_accuracy: f64,
    /// Whether this round stayed within `tolerance` of the previous
    /// round's validation accuracy.
    pub tolerance_ok: bool,
    /// Whether this round strictly beat the warm-start validation
    /// accuracy, making its checkpoint part of the output set.
    pub output_eligible: bool,
    pub val_fairness: FairnessReport,
    pub test_fairness: FairnessReport,
    /// Distinct true-label queries consumed so far.
    pub budget_used: usize,
    /// Weighted training list length used for this round's model.
    pub train_size: usize,
}

/// Result of one selection pass over the available pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Chosen candidates, most negative fairness influence first, ties
    /// by id ascending.
    pub selected: Vec<InfluenceScore>,
    /// Scores of every available candidate, id ascending.
    pub scored: Vec<InfluenceScore>,
}

impl Selection {
    pub fn selected_ids(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.candidate_id).collect()
    }
}

/// A finished run: per-round records, the checkpoint for every round,
/// per-round candidate score dumps, and the indices of the rounds whose
/// checkpoints form the output set.
#[derive(Debug)]
pub struct RunOutput<S> {
    pub records: Vec<RoundRecord>,
    pub models: Vec<ModelState<S>>,
    /// `round_scores[t]` holds the scores of every candidate available
    /// in round `t`; empty for round 0 and for non-influence baselines.
    pub round_scores: Vec<Vec<InfluenceScore>>,
    pub output_rounds: Vec<usize>,
}

impl<S: Scalar> RunOutput<S> {
    /// Checkpoints whose validation accuracy beat the warm start.
    pub fn output_models(&self) -> Vec<&ModelState<S>> {
        self.output_rounds.iter().map(|&t| &self.models[t]).collect()
    }
}

fn available_ids(excluded: &[bool]) -> Vec<usize> {
    excluded
        .iter()
        .enumerate()
        .filter(|(_, &taken)| !taken)
        .map(|(id, _)| id)
        .collect()
}

/// One selection pass: scores every available candidate, keeps those
/// with both influences non-positive, and returns up to
/// `budget_per_round` of them ordered by most negative fairness
/// influence, ties by id ascending. Returns fewer (possibly zero) when
/// the filtered set is exhausted.
pub fn fis_select_round<S: Scalar>(
    m: &ModelState<S>,
    bundle: &SplitBundle<S>,
    excluded: &[bool],
    cfg: &FisConfig,
) -> Result<Selection, SamplingError> {
    if bundle.pool_len() == 0 {
        return Err(SamplingError::EmptyPool);
    }
    if excluded.len() != bundle.pool_len() {
        return Err(SamplingError::ExclusionLength {
            got: excluded.len(),
            expected: bundle.pool_len(),
        });
    }
    let cache = ValidationGradients::compute(
        m,
        &bundle.validation_qv,
        cfg.metric,
        cfg.train.grad_scope,
    )?;
    let ids = available_ids(excluded);
    let scored = score_candidates(
        m,
        &cache,
        bundle.pool(),
        &ids,
        cfg.strategy,
        cfg.train.learning_rate,
    )?;
    let mut selected: Vec<InfluenceScore> = scored
        .iter()
        .filter(|s| s.infl_acc <= 0.0 && s.infl_fair <= 0.0)
        .cloned()
        .collect();
    selected.sort_by(|a, b| {
        a.infl_fair
            .total_cmp(&b.infl_fair)
            .then(a.candidate_id.cmp(&b.candidate_id))
    });
    selected.truncate(cfg.budget_per_round);
    Ok(Selection { selected, scored })
}

/// Top-r available candidates by prediction entropy, most uncertain
/// first, ties by id ascending.
pub fn uncertainty_select<S: Scalar>(
    m: &ModelState<S>,
    pool: &Dataset<S>,
    excluded: &[bool],
    budget: usize,
) -> Result<Vec<usize>, SamplingError> {
    if excluded.len() != pool.len() {
        return Err(SamplingError::ExclusionLength {
            got: excluded.len(),
            expected: pool.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for id in available_ids(excluded) {
        let probs = m.forward(&pool.examples[id].features)?;
        let entropy: f64 = probs
            .iter()
            .map(|&p| {
                let p = p.to_f64_lossy();
                if p > 0.0 {
                    -p * p.ln()
                } else {
                    0.0
                }
            })
            .sum();
        scored.push((entropy, id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(budget);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

struct RunState<S> {
    init: ModelState<S>,
    base: Vec<(Example<S>, S)>,
    records: Vec<RoundRecord>,
    models: Vec<ModelState<S>>,
    round_scores: Vec<Vec<InfluenceScore>>,
    extra: Vec<(Example<S>, S)>,
    excluded: Vec<bool>,
}

fn warm_start<S: Scalar>(
    bundle: &SplitBundle<S>,
    cfg: &FisConfig,
) -> Result<RunState<S>, SamplingError> {
    cfg.validate()?;
    if bundle.train_p.is_empty() {
        return Err(SamplingError::EmptyTrain);
    }
    let layers = cfg.layer_sizes(bundle.train_p.dim, bundle.train_p.num_classes);
    let init = init_model::<S>(&layers, seed::derive(cfg.seed, "init", 0))?;
    let base: Vec<(Example<S>, S)> = bundle
        .train_p
        .examples
        .iter()
        .cloned()
        .map(|ex| (ex, S::one()))
        .collect();
    let (warm, _) = sgd_train(&init, &base, &cfg.round_train_config(0))?;
    let mut state = RunState {
        init,
        base,
        records: Vec::with_capacity(cfg.rounds + 1),
        models: Vec::with_capacity(cfg.rounds + 1),
        round_scores: Vec::with_capacity(cfg.rounds + 1),
        extra: Vec::new(),
        excluded: vec![false; bundle.pool_len()],
    };
    let record = make_record(0, &warm, Vec::new(), Vec::new(), bundle, cfg, None, None)?;
    state.records.push(record);
    state.models.push(warm);
    state.round_scores.push(Vec::new());
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn make_record<S: Scalar>(
    round: usize,
    m: &ModelState<S>,
    selected_ids: Vec<usize>,
    selected_scores: Vec<InfluenceScore>,
    bundle: &SplitBundle<S>,
    cfg: &FisConfig,
    warm_accuracy: Option<f64>,
    prev_accuracy: Option<f64>,
) -> Result<RoundRecord, SamplingError> {
    let val_accuracy = evaluate(m, &bundle.validation_qv)?.accuracy;
    Ok(RoundRecord {
        round,
        checkpoint_id: format!("round_{round}"),
        selected_ids,
        selected_scores,
        val_accuracy,
        tolerance_ok: prev_accuracy.map_or(true, |p| val_accuracy >= p - cfg.tolerance),
        output_eligible: warm_accuracy.map_or(false, |w| val_accuracy > w),
        val_fairness: fairness_report(m, &bundle.validation_qv)?,
        test_fairness: fairness_report(m, &bundle.test_q)?,
        budget_used: bundle.labels_queried(),
        train_size: bundle.train_p.len() + bundle.labels_queried(),
    })
}

/// Queries the true labels of `ids`, marks them unavailable, and adds
/// them to the weighted extra-data list.
fn query_and_stage<S: Scalar>(
    bundle: &SplitBundle<S>,
    state: &mut RunState<S>,
    ids: &[usize],
    weight: S,
) -> Result<(), SamplingError> {
    for &id in ids {
        let label = bundle.query_true_label(id)?;
        state.excluded[id] = true;
        state
            .extra
            .push((Example::labeled(bundle.pool().examples[id].features.clone(), label), weight));
    }
    Ok(())
}

fn retrain_round<S: Scalar>(
    state: &RunState<S>,
    cfg: &FisConfig,
    round: usize,
) -> Result<ModelState<S>, SamplingError> {
    let data: Vec<(Example<S>, S)> = state
        .base
        .iter()
        .chain(state.extra.iter())
        .cloned()
        .collect();
    let start = if cfg.retrain_from_scratch {
        &state.init
    } else {
        &state.models[round - 1]
    };
    let (m, _) = sgd_train(start, &data, &cfg.round_train_config(round as u64))?;
    Ok(m)
}

fn finish<S: Scalar>(state: RunState<S>) -> RunOutput<S> {
    let output_rounds = state
        .records
        .iter()
        .filter(|r| r.output_eligible)
        .map(|r| r.round)
        .collect();
    RunOutput {
        records: state.records,
        models: state.models,
        round_scores: state.round_scores,
        output_rounds,
    }
}

/// Runs the full influence-guided sampling loop: warm start, `rounds`
/// rounds of select / query / retrain, and the output filter.
pub fn fis_run<S: Scalar>(
    bundle: &SplitBundle<S>,
    cfg: &FisConfig,
) -> Result<RunOutput<S>, SamplingError> {
    let mut state = warm_start(bundle, cfg)?;
    let warm_acc = state.records[0].val_accuracy;
    let omega = S::from_f64_lossy(cfg.train.new_data_weight);
    for t in 1..=cfg.rounds {
        let selection = fis_select_round(&state.models[t - 1], bundle, &state.excluded, cfg)?;
        let ids = selection.selected_ids();
        query_and_stage(bundle, &mut state, &ids, omega)?;
        let m = retrain_round(&state, cfg, t)?;
        let record = make_record(
            t,
            &m,
            ids,
            selection.selected,
            bundle,
            cfg,
            Some(warm_acc),
            Some(state.records[t - 1].val_accuracy),
        )?;
        state.records.push(record);
        state.models.push(m);
        state.round_scores.push(selection.scored);
    }
    Ok(finish(state))
}

/// Runs one baseline strategy under the same recording scheme as
/// [`fis_run`].
pub fn baseline_run<S: Scalar>(
    bundle: &SplitBundle<S>,
    kind: BaselineKind,
    cfg: &FisConfig,
) -> Result<RunOutput<S>, SamplingError> {
    if let BaselineKind::Jtt { lambda } = kind {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(SamplingError::BadConfig(
                "jtt lambda must be finite and > 0".into(),
            ));
        }
    }
    let mut state = warm_start(bundle, cfg)?;
    let warm_acc = state.records[0].val_accuracy;
    let omega = S::from_f64_lossy(cfg.train.new_data_weight);

    match kind {
        BaselineKind::Erm => {}
        BaselineKind::Jtt { lambda } => {
            // One retraining from scratch on the training part, with the
            // examples the warm model got wrong upweighted.
            let predictions = predict(&state.models[0], &bundle.train_p)?;
            let lambda = S::from_f64_lossy(lambda);
            let data: Vec<(Example<S>, S)> = bundle
                .train_p
                .examples
                .iter()
                .cloned()
                .zip(&predictions)
                .map(|(ex, &pred)| {
                    let weight = if Some(pred) == ex.label { S::one() } else { lambda };
                    (ex, weight)
                })
                .collect();
            let (m, _) = sgd_train(&state.init, &data, &cfg.round_train_config(1))?;
            let record = make_record(
                1,
                &m,
                Vec::new(),
                Vec::new(),
                bundle,
                cfg,
                Some(warm_acc),
                Some(warm_acc),
            )?;
            state.records.push(record);
            state.models.push(m);
            state.round_scores.push(Vec::new());
        }
        BaselineKind::Random | BaselineKind::Uncertainty | BaselineKind::InfluenceOnly => {
            if bundle.pool_len() == 0 {
                return Err(SamplingError::EmptyPool);
            }
            for t in 1..=cfg.rounds {
                let m_prev = &state.models[t - 1];
                let (ids, selected_scores, scored) = match kind {
                    BaselineKind::Random => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "select", t as u64));
                        let available = available_ids(&state.excluded);
                        let mut ids: Vec<usize> = available
                            .choose_multiple(&mut rng, cfg.budget_per_round)
                            .copied()
                            .collect();
                        ids.sort_unstable();
                        (ids, Vec::new(), Vec::new())
                    }
                    BaselineKind::Uncertainty => {
                        let ids = uncertainty_select(
                            m_prev,
                            bundle.pool(),
                            &state.excluded,
                            cfg.budget_per_round,
                        )?;
                        (ids, Vec::new(), Vec::new())
                    }
                    BaselineKind::InfluenceOnly => {
                        let cache = ValidationGradients::compute(
                            m_prev,
                            &bundle.validation_qv,
                            cfg.metric,
                            cfg.train.grad_scope,
                        )?;
                        let scored = score_candidates(
                            m_prev,
                            &cache,
                            bundle.pool(),
                            &available_ids(&state.excluded),
                            cfg.strategy,
                            cfg.train.learning_rate,
                        )?;
                        let mut ranked = scored.clone();
                        ranked.sort_by(|a, b| {
                            a.infl_acc
                                .total_cmp(&b.infl_acc)
                                .then(a.candidate_id.cmp(&b.candidate_id))
                        });
                        ranked.truncate(cfg.budget_per_round);
                        let ids = ranked.iter().map(|s| s.candidate_id).collect();
                        (ids, ranked, scored)
                    }
                    _ => unreachable!(),
                };
                query_and_stage(bundle, &mut state, &ids, omega)?;
                let m = retrain_round(&state, cfg, t)?;
                let record = make_record(
                    t,
                    &m,
                    ids,
                    selected_scores,
                    bundle,
                    cfg,
                    Some(warm_acc),
                    Some(state.records[t - 1].val_accuracy),
                )?;
                state.records.push(record);
                state.models.push(m);
                state.round_scores.push(scored);
            }
        }
    }
    Ok(finish(state))
}
