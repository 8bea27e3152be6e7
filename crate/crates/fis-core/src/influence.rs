//! First-order influence of pool candidates on validation loss and
//! fairness.
//!
//! Scoring approximates the effect of one SGD step on a candidate: the
//! loss influence is `-eta * <grad l(w, z'), sum_n grad l(w, z_n)>` over
//! the validation points, and the fairness influence replaces the sum
//! with the gradient of the fairness surrogate. Both are linear in the
//! step size and in the validation set. Candidates are unlabeled, so a
//! label is guessed first, either by minimum absolute loss influence or
//! by maximum predicted probability; guessed labels are used for
//! scoring only, never for training.
//!
//! [`exact_one_step_oracle`] materializes the counterfactual update and
//! reports exact and first-order deltas side by side, which is how the
//! approximation quality is audited.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Example};
use crate::fairness::{self, FairnessError, FairnessMetricKind};
use crate::model::{self, GradScope, GradientVector, ModelError, ModelState};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error("candidate id {id} outside pool of size {size}")]
    BadCandidate { id: usize, size: usize },
}

/// How a candidate's missing label is guessed for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStrategy {
    /// Label whose loss influence is smallest in magnitude.
    MinInfluence,
    /// Label with the highest predicted probability.
    MaxPrediction,
}

impl Default for LabelStrategy {
    fn default() -> Self {
        LabelStrategy::MinInfluence
    }
}

/// Scores of one pool candidate against a frozen model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub candidate_id: usize,
    pub guessed_label: usize,
    pub infl_acc: f64,
    pub infl_fair: f64,
    pub strategy_used: LabelStrategy,
}

/// Exact and first-order effect of one counterfactual SGD step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub delta_loss_exact: f64,
    pub delta_fair_exact: f64,
    pub first_order_loss: f64,
    pub first_order_fair: f64,
}

/// Validation-set gradients for one model snapshot, computed once per
/// round and shared across every candidate scored against it.
#[derive(Debug, Clone)]
pub struct ValidationGradients<S> {
    loss_grad_sum: GradientVector<S>,
    fairness_grad: GradientVector<S>,
    scope: GradScope,
}

impl<S: Scalar> ValidationGradients<S> {
    pub fn compute(
        m: &ModelState<S>,
        val: &Dataset<S>,
        kind: FairnessMetricKind,
        scope: GradScope,
    ) -> Result<Self, InfluenceError> {
        let mut sum = vec![S::zero(); m.params.len()];
        for ex in &val.examples {
            let g = m.grad_example_loss(ex, scope)?;
            for (a, &v) in sum.iter_mut().zip(&g.values) {
                *a += v;
            }
        }
        let fairness_grad = fairness::surrogate_grad(m, val, kind, scope)?;
        Ok(ValidationGradients {
            loss_grad_sum: GradientVector { values: sum, scope },
            fairness_grad,
            scope,
        })
    }

    pub fn loss_grad_sum(&self) -> &GradientVector<S> {
        &self.loss_grad_sum
    }

    pub fn fairness_grad(&self) -> &GradientVector<S> {
        &self.fairness_grad
    }

    pub fn scope(&self) -> GradScope {
        self.scope
    }
}

fn candidate_gradient<S: Scalar>(
    m: &ModelState<S>,
    x: &[S],
    y_hyp: usize,
    scope: GradScope,
) -> Result<GradientVector<S>, ModelError> {
    let ex = Example::labeled(x.to_vec(), y_hyp);
    m.grad_example_loss(&ex, scope)
}

/// First-order change in total validation loss from one step on the
/// hypothetically labeled candidate.
pub fn infl_acc<S: Scalar>(
    m: &ModelState<S>,
    x: &[S],
    y_hyp: usize,
    val: &Dataset<S>,
    eta: f64,
    scope: GradScope,
) -> Result<S, InfluenceError> {
    let mut sum = vec![S::zero(); m.params.len()];
    for ex in &val.examples {
        let g = m.grad_example_loss(ex, scope)?;
        for (a, &v) in sum.iter_mut().zip(&g.values) {
            *a += v;
        }
    }
    let cache = GradientVector { values: sum, scope };
    let g = candidate_gradient(m, x, y_hyp, scope)?;
    Ok(-S::from_f64_lossy(eta) * g.dot(&cache))
}

/// First-order change in the fairness surrogate from one step on the
/// hypothetically labeled candidate.
pub fn infl_fair<S: Scalar>(
    m: &ModelState<S>,
    x: &[S],
    y_hyp: usize,
    val: &Dataset<S>,
    kind: FairnessMetricKind,
    eta: f64,
    scope: GradScope,
) -> Result<S, InfluenceError> {
    let fairness_grad = fairness::surrogate_grad(m, val, kind, scope)?;
    let g = candidate_gradient(m, x, y_hyp, scope)?;
    Ok(-S::from_f64_lossy(eta) * g.dot(&fairness_grad))
}

fn per_class_influence<S: Scalar>(
    m: &ModelState<S>,
    cache: &ValidationGradients<S>,
    x: &[S],
    eta: f64,
) -> Result<Vec<S>, InfluenceError> {
    let eta = S::from_f64_lossy(eta);
    (0..m.num_classes())
        .map(|k| {
            let g = candidate_gradient(m, x, k, cache.scope)?;
            Ok(-eta * g.dot(&cache.loss_grad_sum))
        })
        .collect()
}

/// Guesses the label whose loss influence is smallest in magnitude.
/// Ties resolve to the lowest class index; the choice is invariant to
/// the step size. Returns the label and the per-class influences.
pub fn guess_label_min_influence<S: Scalar>(
    m: &ModelState<S>,
    cache: &ValidationGradients<S>,
    x: &[S],
    eta: f64,
) -> Result<(usize, Vec<S>), InfluenceError> {
    let influences = per_class_influence(m, cache, x, eta)?;
    let mut best = 0usize;
    for (k, infl) in influences.iter().enumerate() {
        if infl.abs() < influences[best].abs() {
            best = k;
        }
    }
    Ok((best, influences))
}

/// Guesses the label with the highest predicted probability; argmax
/// ties resolve to the lowest class index.
pub fn guess_label_max_prediction<S: Scalar>(m: &ModelState<S>, x: &[S]) -> Result<usize, InfluenceError> {
    let probs = m.forward(x)?;
    let mut best = 0usize;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Scores one candidate: guesses a label per `strategy`, then computes
/// both influences for that label against the cached validation
/// gradients.
pub fn score_candidate<S: Scalar>(
    m: &ModelState<S>,
    cache: &ValidationGradients<S>,
    candidate_id: usize,
    x: &[S],
    strategy: LabelStrategy,
    eta: f64,
) -> Result<InfluenceScore, InfluenceError> {
    let eta_s = S::from_f64_lossy(eta);
    let (guessed_label, acc) = match strategy {
        LabelStrategy::MinInfluence => {
            let (label, influences) = guess_label_min_influence(m, cache, x, eta)?;
            (label, influences[label])
        }
        LabelStrategy::MaxPrediction => {
            let label = guess_label_max_prediction(m, x)?;
            let g = candidate_gradient(m, x, label, cache.scope)?;
            (label, -eta_s * g.dot(&cache.loss_grad_sum))
        }
    };
    let g = candidate_gradient(m, x, guessed_label, cache.scope)?;
    let fair = -eta_s * g.dot(&cache.fairness_grad);
    Ok(InfluenceScore {
        candidate_id,
        guessed_label,
        infl_acc: acc.to_f64_lossy(),
        infl_fair: fair.to_f64_lossy(),
        strategy_used: strategy,
    })
}

/// Scores a list of pool candidates in parallel. Results come back in
/// the order of `ids`.
pub fn score_candidates<S: Scalar>(
    m: &ModelState<S>,
    cache: &ValidationGradients<S>,
    pool: &Dataset<S>,
    ids: &[usize],
    strategy: LabelStrategy,
    eta: f64,
) -> Result<Vec<InfluenceScore>, InfluenceError> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= pool.len()) {
        return Err(InfluenceError::BadCandidate {
            id: bad,
            size: pool.len(),
        });
    }
    ids.par_iter()
        .map(|&id| score_candidate(m, cache, id, &pool.examples[id].features, strategy, eta))
        .collect()
}

/// Materializes the counterfactual update `w' = w - eta * grad l(w, z')`
/// and measures the exact change in total validation loss and in the
/// fairness surrogate, next to their first-order estimates.
pub fn exact_one_step_oracle<S: Scalar>(
    m: &ModelState<S>,
    x: &[S],
    y_hyp: usize,
    val: &Dataset<S>,
    kind: FairnessMetricKind,
    eta: f64,
    scope: GradScope,
) -> Result<OracleResult, InfluenceError> {
    let cache = ValidationGradients::compute(m, val, kind, scope)?;
    let eta_s = S::from_f64_lossy(eta);
    let g = candidate_gradient(m, x, y_hyp, scope)?;

    let mut stepped = m.clone();
    for (p, &gv) in stepped.params.iter_mut().zip(&g.values) {
        *p = *p - eta_s * gv;
    }
    stepped.step += 1;

    let total_loss = |model: &ModelState<S>| -> Result<S, InfluenceError> {
        let mut total = S::zero();
        for ex in &val.examples {
            total += model::example_loss(model, ex)?;
        }
        Ok(total)
    };
    let loss_before = total_loss(m)?;
    let loss_after = total_loss(&stepped)?;
    let fair_before = fairness::surrogate_value(m, val, kind)?;
    let fair_after = fairness::surrogate_value(&stepped, val, kind)?;

    Ok(OracleResult {
        delta_loss_exact: (loss_after - loss_before).to_f64_lossy(),
        delta_fair_exact: (fair_after - fair_before).to_f64_lossy(),
        first_order_loss: (-eta_s * g.dot(&cache.loss_grad_sum)).to_f64_lossy(),
        first_order_fair: (-eta_s * g.dot(&cache.fairness_grad)).to_f64_lossy(),
    })
}
