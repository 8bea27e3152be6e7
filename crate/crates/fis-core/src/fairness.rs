//! Group fairness metrics and their differentiable surrogates.
//!
//! Hard metrics (demographic parity, equal opportunity, equalized odds)
//! are computed from discrete predictions. Each also has a smooth
//! surrogate over the model's class-1 probabilities whose gradient
//! drives influence scoring; the surrogate is a set-level functional of
//! the validation set, not a per-example sum. At a gap of exactly zero
//! the surrogate's subgradient is defined as the zero vector.
//!
//! Multi-group inputs reduce to the maximum pairwise gap. Signed risk
//! disparity compares one group's mean loss against the population's.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{self, GradScope, GradientVector, ModelError, ModelState};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("group {group} has no examples")]
    EmptyGroup { group: usize },
    #[error("group {group} has no positive examples")]
    NoPositives { group: usize },
    #[error("group {group} has no negative examples")]
    NoNegatives { group: usize },
    #[error("example {index} has no group attribute")]
    MissingGroup { index: usize },
    #[error("example {index} has no label")]
    MissingLabel { index: usize },
    #[error("inputs disagree in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {group} outside [0, {num_groups})")]
    GroupOutOfRange { group: usize, num_groups: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which fairness criterion a surrogate or report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetricKind {
    #[serde(alias = "dp")]
    DemographicParity,
    #[serde(alias = "eop")]
    EqualOpportunity,
    #[serde(alias = "eod")]
    EqualizedOdds,
}

impl Default for FairnessMetricKind {
    fn default() -> Self {
        FairnessMetricKind::DemographicParity
    }
}

/// Fairness summary of one model on one labeled, grouped dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eop_gap: f64,
    pub eod_gap: f64,
    /// Signed mean-loss deviation of each group from the population.
    pub risk_disparity_per_group: Vec<f64>,
}

fn check_same_length(a: usize, b: usize) -> Result<(), FairnessError> {
    if a != b {
        return Err(FairnessError::LengthMismatch(a, b));
    }
    Ok(())
}

fn check_groups(groups: &[usize], num_groups: usize) -> Result<(), FairnessError> {
    if num_groups < 2 {
        return Err(FairnessError::TooFewGroups(num_groups));
    }
    for &g in groups {
        if g >= num_groups {
            return Err(FairnessError::GroupOutOfRange {
                group: g,
                num_groups,
            });
        }
    }
    Ok(())
}

/// Positive-prediction rate per group; `filter` restricts which
/// examples count (used for the label-conditioned metrics).
fn group_rates(
    predictions: &[usize],
    groups: &[usize],
    num_groups: usize,
    mut eligible: impl FnMut(usize) -> bool,
) -> (Vec<usize>, Vec<usize>) {
    let mut positive = vec![0usize; num_groups];
    let mut total = vec![0usize; num_groups];
    for (i, (&pred, &group)) in predictions.iter().zip(groups).enumerate() {
        if !eligible(i) {
            continue;
        }
        total[group] += 1;
        if pred == 1 {
            positive[group] += 1;
        }
    }
    (positive, total)
}

fn max_rate_gap(positive: &[usize], total: &[usize]) -> f64 {
    let rates: Vec<f64> = positive
        .iter()
        .zip(total)
        .map(|(&p, &t)| p as f64 / t as f64)
        .collect();
    let mut gap = 0.0f64;
    for i in 0..rates.len() {
        for j in (i + 1)..rates.len() {
            gap = gap.max((rates[i] - rates[j]).abs());
        }
    }
    gap
}

/// Demographic parity gap: the largest pairwise difference in
/// positive-prediction rates between groups.
pub fn dp_gap(predictions: &[usize], groups: &[usize], num_groups: usize) -> Result<f64, FairnessError> {
    check_same_length(predictions.len(), groups.len())?;
    check_groups(groups, num_groups)?;
    let (positive, total) = group_rates(predictions, groups, num_groups, |_| true);
    if let Some(group) = total.iter().position(|&t| t == 0) {
        return Err(FairnessError::EmptyGroup { group });
    }
    Ok(max_rate_gap(&positive, &total))
}

/// Equal opportunity gap: the largest pairwise true-positive-rate
/// difference between groups.
pub fn eop_gap(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64, FairnessError> {
    check_same_length(predictions.len(), labels.len())?;
    check_same_length(predictions.len(), groups.len())?;
    check_groups(groups, num_groups)?;
    let (positive, total) = group_rates(predictions, groups, num_groups, |i| labels[i] == 1);
    if let Some(group) = total.iter().position(|&t| t == 0) {
        return Err(FairnessError::NoPositives { group });
    }
    Ok(max_rate_gap(&positive, &total))
}

/// Equalized odds gap: the mean of the true-positive-rate gap and the
/// false-positive-rate gap.
pub fn eod_gap(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64, FairnessError> {
    check_same_length(predictions.len(), labels.len())?;
    check_same_length(predictions.len(), groups.len())?;
    check_groups(groups, num_groups)?;
    let (tp, pos_total) = group_rates(predictions, groups, num_groups, |i| labels[i] == 1);
    if let Some(group) = pos_total.iter().position(|&t| t == 0) {
        return Err(FairnessError::NoPositives { group });
    }
    let (fp, neg_total) = group_rates(predictions, groups, num_groups, |i| labels[i] != 1);
    if let Some(group) = neg_total.iter().position(|&t| t == 0) {
        return Err(FairnessError::NoNegatives { group });
    }
    Ok(0.5 * (max_rate_gap(&tp, &pos_total) + max_rate_gap(&fp, &neg_total)))
}

/// Signed risk disparity from a precomputed loss vector: mean loss of
/// group `k` minus the population mean loss.
pub fn risk_disparity_from_losses(
    losses: &[f64],
    groups: &[usize],
    num_groups: usize,
    k: usize,
) -> Result<f64, FairnessError> {
    check_same_length(losses.len(), groups.len())?;
    check_groups(groups, num_groups)?;
    if k >= num_groups {
        return Err(FairnessError::GroupOutOfRange {
            group: k,
            num_groups,
        });
    }
    if losses.is_empty() {
        return Err(FairnessError::EmptyGroup { group: k });
    }
    let mut group_sum = 0.0;
    let mut group_count = 0usize;
    for (&loss, &group) in losses.iter().zip(groups) {
        if group == k {
            group_sum += loss;
            group_count += 1;
        }
    }
    if group_count == 0 {
        return Err(FairnessError::EmptyGroup { group: k });
    }
    let population = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(group_sum / group_count as f64 - population)
}

fn dataset_losses_and_groups<S: Scalar>(
    m: &ModelState<S>,
    ds: &Dataset<S>,
) -> Result<(Vec<f64>, Vec<usize>), FairnessError> {
    let mut losses = Vec::with_capacity(ds.len());
    let mut groups = Vec::with_capacity(ds.len());
    for (index, ex) in ds.examples.iter().enumerate() {
        let group = ex.group.ok_or(FairnessError::MissingGroup { index })?;
        losses.push(model::example_loss(m, ex)?.to_f64_lossy());
        groups.push(group);
    }
    Ok((losses, groups))
}

/// Signed risk disparity of group `k` under model `m`.
pub fn risk_disparity<S: Scalar>(
    m: &ModelState<S>,
    ds: &Dataset<S>,
    k: usize,
) -> Result<f64, FairnessError> {
    let (losses, groups) = dataset_losses_and_groups(m, ds)?;
    risk_disparity_from_losses(&losses, &groups, ds.num_groups, k)
}

/// Per-example class-1 probabilities with group and label pulled out.
fn probabilities_with_attributes<S: Scalar>(
    m: &ModelState<S>,
    val: &Dataset<S>,
    need_labels: bool,
) -> Result<(Vec<S>, Vec<usize>, Vec<usize>), FairnessError> {
    let mut p1 = Vec::with_capacity(val.len());
    let mut groups = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    for (index, ex) in val.examples.iter().enumerate() {
        let group = ex.group.ok_or(FairnessError::MissingGroup { index })?;
        let label = match (need_labels, ex.label) {
            (true, None) => return Err(FairnessError::MissingLabel { index }),
            (_, label) => label.unwrap_or(0),
        };
        p1.push(m.forward(&ex.features)?[1]);
        groups.push(group);
        labels.push(label);
    }
    Ok((p1, groups, labels))
}

/// Mean class-1 probability per group over the eligible examples, and
/// the member indices backing each mean.
fn group_means<S: Scalar>(
    p1: &[S],
    groups: &[usize],
    num_groups: usize,
    mut eligible: impl FnMut(usize) -> bool,
) -> (Vec<S>, Vec<Vec<usize>>) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for i in 0..p1.len() {
        if eligible(i) {
            members[groups[i]].push(i);
        }
    }
    let means = members
        .iter()
        .map(|ids| {
            if ids.is_empty() {
                S::zero()
            } else {
                ids.iter().map(|&i| p1[i]).sum::<S>() / S::from_usize_lossy(ids.len())
            }
        })
        .collect();
    (means, members)
}

/// The pair of groups with the largest absolute mean difference, with
/// its signed gap. Ties resolve to the lexicographically first pair.
fn achieving_pair<S: Scalar>(means: &[S]) -> (usize, usize, S) {
    let (mut bi, mut bj, mut best) = (0usize, 1usize, means[0] - means[1]);
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            let gap = means[i] - means[j];
            if gap.abs() > best.abs() {
                (bi, bj, best) = (i, j, gap);
            }
        }
    }
    (bi, bj, best)
}

enum Restriction {
    All,
    LabelEquals(usize),
}

fn restricted_gap<S: Scalar>(
    p1: &[S],
    groups: &[usize],
    labels: &[usize],
    num_groups: usize,
    restriction: &Restriction,
) -> Result<(S, usize, usize, Vec<Vec<usize>>), FairnessError> {
    let (means, members) = match restriction {
        Restriction::All => group_means(p1, groups, num_groups, |_| true),
        Restriction::LabelEquals(y) => group_means(p1, groups, num_groups, |i| labels[i] == *y),
    };
    for (group, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            return Err(match restriction {
                Restriction::All => FairnessError::EmptyGroup { group },
                Restriction::LabelEquals(1) => FairnessError::NoPositives { group },
                Restriction::LabelEquals(_) => FairnessError::NoNegatives { group },
            });
        }
    }
    let (i, j, signed) = achieving_pair(&means);
    Ok((signed, i, j, members))
}

/// Differentiable surrogate of a fairness criterion over the class-1
/// probabilities of `val`.
pub fn surrogate_value<S: Scalar>(
    m: &ModelState<S>,
    val: &Dataset<S>,
    kind: FairnessMetricKind,
) -> Result<S, FairnessError> {
    let need_labels = kind != FairnessMetricKind::DemographicParity;
    let (p1, groups, labels) = probabilities_with_attributes(m, val, need_labels)?;
    let num_groups = val.num_groups;
    match kind {
        FairnessMetricKind::DemographicParity => {
            let (signed, _, _, _) = restricted_gap(&p1, &groups, &labels, num_groups, &Restriction::All)?;
            Ok(signed.abs())
        }
        FairnessMetricKind::EqualOpportunity => {
            let (signed, _, _, _) =
                restricted_gap(&p1, &groups, &labels, num_groups, &Restriction::LabelEquals(1))?;
            Ok(signed.abs())
        }
        FairnessMetricKind::EqualizedOdds => {
            let (pos, _, _, _) =
                restricted_gap(&p1, &groups, &labels, num_groups, &Restriction::LabelEquals(1))?;
            let (neg, _, _, _) =
                restricted_gap(&p1, &groups, &labels, num_groups, &Restriction::LabelEquals(0))?;
            let half = S::from_f64_lossy(0.5);
            Ok(half * (pos.abs() + neg.abs()))
        }
    }
}

/// Gradient of one restricted gap term with respect to the parameters.
fn restricted_gap_grad<S: Scalar>(
    m: &ModelState<S>,
    val: &Dataset<S>,
    p1: &[S],
    groups: &[usize],
    labels: &[usize],
    restriction: &Restriction,
    scope: GradScope,
    accumulator: &mut [S],
    factor: S,
) -> Result<(), FairnessError> {
    let (signed, i, j, members) = restricted_gap(p1, groups, labels, val.num_groups, restriction)?;
    let sign = if signed > S::zero() {
        S::one()
    } else if signed < S::zero() {
        -S::one()
    } else {
        // Zero gap: the declared subgradient is the zero vector.
        return Ok(());
    };
    for (group_idx, direction) in [(i, S::one()), (j, -S::one())] {
        let ids = &members[group_idx];
        let scale = factor * sign * direction / S::from_usize_lossy(ids.len());
        for &idx in ids {
            let g = m.grad_class_probability(&val.examples[idx].features, 1, scope)?;
            for (a, &v) in accumulator.iter_mut().zip(&g.values) {
                *a += scale * v;
            }
        }
    }
    Ok(())
}

/// Gradient of [`surrogate_value`] with respect to the model
/// parameters, restricted to `scope`.
pub fn surrogate_grad<S: Scalar>(
    m: &ModelState<S>,
    val: &Dataset<S>,
    kind: FairnessMetricKind,
    scope: GradScope,
) -> Result<GradientVector<S>, FairnessError> {
    let need_labels = kind != FairnessMetricKind::DemographicParity;
    let (p1, groups, labels) = probabilities_with_attributes(m, val, need_labels)?;
    let mut values = vec![S::zero(); m.params.len()];
    match kind {
        FairnessMetricKind::DemographicParity => {
            restricted_gap_grad(m, val, &p1, &groups, &labels, &Restriction::All, scope, &mut values, S::one())?;
        }
        FairnessMetricKind::EqualOpportunity => {
            restricted_gap_grad(
                m,
                val,
                &p1,
                &groups,
                &labels,
                &Restriction::LabelEquals(1),
                scope,
                &mut values,
                S::one(),
            )?;
        }
        FairnessMetricKind::EqualizedOdds => {
            let half = S::from_f64_lossy(0.5);
            restricted_gap_grad(
                m,
                val,
                &p1,
                &groups,
                &labels,
                &Restriction::LabelEquals(1),
                scope,
                &mut values,
                half,
            )?;
            restricted_gap_grad(
                m,
                val,
                &p1,
                &groups,
                &labels,
                &Restriction::LabelEquals(0),
                scope,
                &mut values,
                half,
            )?;
        }
    }
    Ok(GradientVector { values, scope })
}

/// Full fairness summary of `m` on a labeled, grouped dataset.
pub fn fairness_report<S: Scalar>(m: &ModelState<S>, ds: &Dataset<S>) -> Result<FairnessReport, FairnessError> {
    let predictions = model::predict(m, ds)?;
    let mut labels = Vec::with_capacity(ds.len());
    let mut groups = Vec::with_capacity(ds.len());
    for (index, ex) in ds.examples.iter().enumerate() {
        labels.push(ex.label.ok_or(FairnessError::MissingLabel { index })?);
        groups.push(ex.group.ok_or(FairnessError::MissingGroup { index })?);
    }
    let metrics = model::evaluate(m, ds)?;
    let (losses, loss_groups) = dataset_losses_and_groups(m, ds)?;
    let risk_disparity_per_group = (0..ds.num_groups)
        .map(|k| risk_disparity_from_losses(&losses, &loss_groups, ds.num_groups, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FairnessReport {
        accuracy: metrics.accuracy,
        dp_gap: dp_gap(&predictions, &groups, ds.num_groups)?,
        eop_gap: eop_gap(&predictions, &labels, &groups, ds.num_groups)?,
        eod_gap: eod_gap(&predictions, &labels, &groups, ds.num_groups)?,
        risk_disparity_per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::model::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dp_gap_on_documented_rates() {
        // Group 0 positive rate 0.75, group 1 rate 0.25.
        let predictions = vec![1, 1, 1, 0, 1, 0, 0, 0];
        let groups = vec![0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(dp_gap(&predictions, &groups, 2).unwrap(), 0.5);
    }

    #[test]
    fn identical_rates_give_zero_gap() {
        let predictions = vec![1, 0, 1, 0];
        let groups = vec![0, 0, 1, 1];
        assert_eq!(dp_gap(&predictions, &groups, 2).unwrap(), 0.0);
    }

    #[test]
    fn multi_group_gap_is_max_pairwise() {
        // Rates 1.0, 0.5, 0.0 across three groups.
        let predictions = vec![1, 1, 1, 0, 0, 0];
        let groups = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(dp_gap(&predictions, &groups, 3).unwrap(), 1.0);
    }

    #[test]
    fn empty_group_is_an_error_naming_it() {
        let predictions = vec![1, 0];
        let groups = vec![0, 0];
        match dp_gap(&predictions, &groups, 2).unwrap_err() {
            FairnessError::EmptyGroup { group } => assert_eq!(group, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn eop_gap_uses_only_positives() {
        // Positives: group 0 TPR 1.0 (2/2), group 1 TPR 0.5 (1/2).
        let predictions = vec![1, 1, 0, 1, 0, 1];
        let labels = vec![1, 1, 0, 1, 1, 0];
        let groups = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(eop_gap(&predictions, &labels, &groups, 2).unwrap(), 0.5);
        let all_negative_group = eop_gap(&predictions, &[1, 1, 0, 0, 0, 0], &groups, 2);
        assert!(matches!(
            all_negative_group.unwrap_err(),
            FairnessError::NoPositives { group: 1 }
        ));
    }

    #[test]
    fn eod_gap_averages_tpr_and_fpr_gaps() {
        // TPR: group 0 = 1.0, group 1 = 0.0 (gap 1.0).
        // FPR: group 0 = 0.0, group 1 = 0.5 (gap 0.5).
        let predictions = vec![1, 0, 0, 0, 1, 0];
        let labels = vec![1, 0, 0, 1, 0, 0];
        let groups = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(eod_gap(&predictions, &labels, &groups, 2).unwrap(), 0.75);
    }

    #[test]
    fn risk_disparity_is_signed_and_zero_for_population() {
        let losses = vec![1.0, 1.0, 0.0, 0.0];
        let groups = vec![0, 0, 1, 1];
        assert_eq!(risk_disparity_from_losses(&losses, &groups, 2, 0).unwrap(), 0.5);
        assert_eq!(risk_disparity_from_losses(&losses, &groups, 2, 1).unwrap(), -0.5);
    }

    #[test]
    fn weighted_risk_disparities_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..50 {
            let n = rng.gen_range(10..200);
            let num_groups = rng.gen_range(2..5);
            let mut losses = Vec::with_capacity(n);
            let mut groups = Vec::with_capacity(n);
            for i in 0..n {
                losses.push(rng.gen_range(0.0..3.0));
                // Force every group nonempty, then fill randomly.
                groups.push(if i < num_groups { i } else { rng.gen_range(0..num_groups) });
            }
            let mut weighted_total = 0.0;
            for k in 0..num_groups {
                let count = groups.iter().filter(|&&g| g == k).count();
                let disparity = risk_disparity_from_losses(&losses, &groups, num_groups, k).unwrap();
                weighted_total += (count as f64 / n as f64) * disparity;
            }
            assert!(weighted_total.abs() < 1e-9, "total {weighted_total}");
        }
    }

    /// One-input two-class model whose class-1 probability at input x is
    /// the logistic of x.
    fn logistic_model() -> ModelState<f64> {
        ModelState {
            params: vec![-0.5, 0.5, 0.0, 0.0],
            layer_sizes: vec![1, 2],
            step: 0,
        }
    }

    /// Inputs chosen so class-1 probabilities are (0.9, 0.8 | 0.2, 0.1)
    /// across groups (0, 0 | 1, 1).
    fn fixed_probability_dataset() -> Dataset<f64> {
        let inputs = [9.0f64, 4.0, 0.25, 1.0 / 9.0];
        let examples = inputs
            .iter()
            .enumerate()
            .map(|(i, &odds)| Example::full(vec![odds.ln()], 1, i / 2))
            .collect();
        Dataset::new("fixed", 1, 2, 2, examples).unwrap()
    }

    #[test]
    fn dp_surrogate_on_fixed_probabilities() {
        let m = logistic_model();
        let ds = fixed_probability_dataset();
        let value = surrogate_value(&m, &ds, FairnessMetricKind::DemographicParity).unwrap();
        assert!((value - 0.7).abs() < 1e-12, "value {value}");
    }

    #[test]
    fn surrogates_vanish_when_outputs_are_identical() {
        let mut m = init_model::<f64>(&[2, 2], 0).unwrap();
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let examples = vec![
            Example::full(vec![0.1, 0.2], 1, 0),
            Example::full(vec![0.3, 0.4], 0, 0),
            Example::full(vec![0.5, 0.6], 1, 1),
            Example::full(vec![0.7, 0.8], 0, 1),
        ];
        let ds = Dataset::new("uniform", 2, 2, 2, examples).unwrap();
        for kind in [
            FairnessMetricKind::DemographicParity,
            FairnessMetricKind::EqualOpportunity,
            FairnessMetricKind::EqualizedOdds,
        ] {
            assert_eq!(surrogate_value(&m, &ds, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_gap_has_zero_subgradient() {
        let m = init_model::<f64>(&[2, 4, 2], 3).unwrap();
        // Identical feature multisets per group force an exactly zero gap.
        let shared = [vec![0.5, -0.25], vec![-1.0, 0.75]];
        let mut examples = Vec::new();
        for group in 0..2 {
            for (i, features) in shared.iter().enumerate() {
                examples.push(Example::full(features.clone(), i % 2, group));
            }
        }
        let ds = Dataset::new("mirror", 2, 2, 2, examples).unwrap();
        let grad = surrogate_grad(&m, &ds, FairnessMetricKind::DemographicParity, GradScope::Full).unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    fn surrogate_central_difference(
        m: &ModelState<f64>,
        ds: &Dataset<f64>,
        kind: FairnessMetricKind,
        coord: usize,
        h: f64,
    ) -> f64 {
        let mut plus = m.clone();
        plus.params[coord] += h;
        let mut minus = m.clone();
        minus.params[coord] -= h;
        (surrogate_value(&plus, ds, kind).unwrap() - surrogate_value(&minus, ds, kind).unwrap()) / (2.0 * h)
    }

    fn grouped_dataset(seed: u64, n: usize) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|_| {
                let group = rng.gen_range(0..2usize);
                let label = rng.gen_range(0..2usize);
                let features = vec![
                    rng.gen_range(-2.0..2.0) + group as f64,
                    rng.gen_range(-2.0..2.0) - label as f64,
                    rng.gen_range(-1.0..1.0),
                ];
                Example::full(features, label, group)
            })
            .collect();
        Dataset::new("grouped", 3, 2, 2, examples).unwrap()
    }

    #[test]
    fn surrogate_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7777);
        let ds = grouped_dataset(15, 24);
        for kind in [
            FairnessMetricKind::DemographicParity,
            FairnessMetricKind::EqualOpportunity,
            FairnessMetricKind::EqualizedOdds,
        ] {
            let m = init_model::<f64>(&[3, 6, 2], 51).unwrap();
            let grad = surrogate_grad(&m, &ds, kind, GradScope::Full).unwrap();
            for _ in 0..20 {
                let coord = rng.gen_range(0..m.params.len());
                let numeric = surrogate_central_difference(&m, &ds, kind, coord, 1e-5);
                let analytic = grad.values[coord];
                let tolerance = 1e-4 * numeric.abs().max(analytic.abs()) + 1e-8;
                assert!(
                    (numeric - analytic).abs() <= tolerance,
                    "{kind:?} coord {coord}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn group_relabeling_preserves_gap_values() {
        let ds = grouped_dataset(33, 30);
        let m = init_model::<f64>(&[3, 5, 2], 8).unwrap();
        let mut swapped = ds.clone();
        for ex in &mut swapped.examples {
            ex.group = ex.group.map(|g| 1 - g);
        }
        for kind in [
            FairnessMetricKind::DemographicParity,
            FairnessMetricKind::EqualOpportunity,
            FairnessMetricKind::EqualizedOdds,
        ] {
            let a = surrogate_value(&m, &ds, kind).unwrap();
            let b = surrogate_value(&m, &swapped, kind).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let predictions = model::predict(&m, &ds).unwrap();
        let labels: Vec<usize> = ds.examples.iter().map(|e| e.label.unwrap()).collect();
        let groups: Vec<usize> = ds.examples.iter().map(|e| e.group.unwrap()).collect();
        let flipped: Vec<usize> = groups.iter().map(|&g| 1 - g).collect();
        assert_eq!(
            dp_gap(&predictions, &groups, 2).unwrap(),
            dp_gap(&predictions, &flipped, 2).unwrap()
        );
        assert_eq!(
            eod_gap(&predictions, &labels, &groups, 2).unwrap(),
            eod_gap(&predictions, &labels, &flipped, 2).unwrap()
        );
    }

    #[test]
    fn example_order_does_not_change_hard_gaps() {
        let ds = grouped_dataset(60, 40);
        let m = init_model::<f64>(&[3, 5, 2], 2).unwrap();
        let predictions = model::predict(&m, &ds).unwrap();
        let labels: Vec<usize> = ds.examples.iter().map(|e| e.label.unwrap()).collect();
        let groups: Vec<usize> = ds.examples.iter().map(|e| e.group.unwrap()).collect();
        let forward = eod_gap(&predictions, &labels, &groups, 2).unwrap();

        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let p2: Vec<usize> = order.iter().map(|&i| predictions[i]).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let g2: Vec<usize> = order.iter().map(|&i| groups[i]).collect();
        assert_eq!(forward, eod_gap(&p2, &l2, &g2, 2).unwrap());
    }

    /// Rank with average ranks for ties, then Pearson on the ranks. Kept
    /// separate from any library code on purpose: it is the reference
    /// the surrogate trend is checked against.
    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(values: &[f64]) -> Vec<f64> {
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
            let mut out = vec![0.0; values.len()];
            let mut pos = 0;
            while pos < order.len() {
                let mut end = pos;
                while end + 1 < order.len() && values[order[end + 1]] == values[order[pos]] {
                    end += 1;
                }
                let rank = (pos + end) as f64 / 2.0;
                for &idx in &order[pos..=end] {
                    out[idx] = rank;
                }
                pos = end + 1;
            }
            out
        }
        let ra = ranks(a);
        let rb = ranks(b);
        let n = ra.len() as f64;
        let mean_a = ra.iter().sum::<f64>() / n;
        let mean_b = rb.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        for (x, y) in ra.iter().zip(&rb) {
            cov += (x - mean_a) * (y - mean_b);
            var_a += (x - mean_a).powi(2);
            var_b += (y - mean_b).powi(2);
        }
        cov / (var_a.sqrt() * var_b.sqrt())
    }

    #[test]
    fn surrogate_tracks_hard_dp_gap_across_models() {
        let ds = grouped_dataset(91, 60);
        let mut hard = Vec::new();
        let mut smooth = Vec::new();
        for seed in 0..50 {
            let m = init_model::<f64>(&[3, 6, 2], 1000 + seed).unwrap();
            let predictions = model::predict(&m, &ds).unwrap();
            let groups: Vec<usize> = ds.examples.iter().map(|e| e.group.unwrap()).collect();
            hard.push(dp_gap(&predictions, &groups, 2).unwrap());
            smooth
                .push(surrogate_value(&m, &ds, FairnessMetricKind::DemographicParity).unwrap());
        }
        let rho = spearman(&hard, &smooth);
        assert!(rho > 0.0, "Spearman {rho}");
        // Regression pin for the seeded fixture above.
        assert!((rho - 0.5736942648059432).abs() < 1e-9, "Spearman drifted to {rho}");
    }

    #[test]
    fn report_collects_all_metrics() {
        let ds = grouped_dataset(14, 50);
        let m = init_model::<f64>(&[3, 6, 2], 4).unwrap();
        let report = fairness_report(&m, &ds).unwrap();
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
        for gap in [report.dp_gap, report.eop_gap, report.eod_gap] {
            assert!((0.0..=1.0).contains(&gap), "gap {gap}");
        }
        assert_eq!(report.risk_disparity_per_group.len(), 2);
        let n = ds.len() as f64;
        let weighted: f64 = (0..2)
            .map(|k| {
                let count = ds.examples.iter().filter(|e| e.group == Some(k)).count();
                report.risk_disparity_per_group[k] * count as f64 / n
            })
            .sum();
        assert!(weighted.abs() < 1e-9);
    }
}
