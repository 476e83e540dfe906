//! Exhaustive search of the bounded dose grid for the cheapest package that
//! meets the outcome goal (plus optional power and budget constraints), and
//! the confidence set of packages whose predicted-outcome interval contains
//! the goal.
//!
//! Grid evaluation runs in parallel; selection is a reduction over the total
//! order `(cost, lexicographic doses)`, so the result never depends on
//! evaluation order.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{CostModel, Package};
use crate::error::{LagoError, Result};
use crate::inference::power_two_proportions;
use crate::outcome_model::{predict_outcome_with, OutcomeFit, PredictedOutcome, VarianceKind};
use crate::trial_model::TrialConfig;

pub const DEFAULT_GRID_CAP: u64 = 10_000_000;
/// Slack on goal comparisons so packages sitting exactly on the goal qualify.
pub const GOAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalType {
    #[default]
    Absolute,
    RelativeIncrease,
}

/// Inputs of the power constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerContext {
    /// Remaining sample size (individuals) per arm.
    pub n_per_arm: u64,
    pub cluster_size: f64,
    pub icc: f64,
    pub alpha: f64,
    /// Comparison-arm outcome rate `p0`.
    pub baseline_rate: f64,
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationCriteria {
    #[serde(default)]
    pub goal_type: GoalType,
    pub goal_value: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    pub covariate_profile: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_context: Option<PowerContext>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    /// Baseline rate for relative goals; estimated from comparison rows when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_rate: Option<f64>,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl OptimizationCriteria {
    pub fn absolute(goal: f64, covariate_profile: Vec<f64>) -> Self {
        Self {
            goal_type: GoalType::Absolute,
            goal_value: goal,
            level: 0.95,
            covariate_profile,
            power_target: None,
            power_context: None,
            budget: None,
            baseline_rate: None,
            variance: VarianceKind::Robust,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.goal_value) {
            return Err(LagoError::Domain(format!(
                "goal value {} must lie in [0, 1)",
                self.goal_value
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(LagoError::Domain(format!(
                "confidence level {} must lie in (0, 1)",
                self.level
            )));
        }
        if let Some(target) = self.power_target {
            if !(target > 0.0 && target < 1.0) {
                return Err(LagoError::Domain(format!(
                    "power target {target} must lie in (0, 1)"
                )));
            }
            if self.power_context.is_none() {
                return Err(LagoError::Precondition(
                    "a power target needs a power context".into(),
                ));
            }
        }
        if let Some(b) = self.budget {
            if !b.is_finite() {
                return Err(LagoError::Domain("budget must be finite".into()));
            }
        }
        Ok(())
    }

    /// Absolute outcome probability the package must reach.
    pub fn effective_goal(&self) -> Result<f64> {
        match self.goal_type {
            GoalType::Absolute => Ok(self.goal_value),
            GoalType::RelativeIncrease => {
                let base = self.baseline_rate.ok_or_else(|| {
                    LagoError::Precondition(
                        "a relative goal needs a baseline rate (no control or baseline rows?)"
                            .into(),
                    )
                })?;
                Ok(base + self.goal_value)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSummary {
    pub effective_goal: f64,
    pub meets_goal: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meets_power: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meets_budget: Option<usize>,
    pub feasible: usize,
    /// Constraints that exclude at least one package cheaper than the returned one.
    pub binding: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub status: OptimizationStatus,
    pub package: Package,
    pub predicted: PredictedOutcome,
    pub cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    pub grid_size: usize,
    pub constraints: ConstraintSummary,
}

/// Per-package evaluation of every criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct PackageEvaluation {
    pub package: Package,
    pub predicted: PredictedOutcome,
    pub cost: f64,
    pub power: Option<f64>,
    pub meets_goal: bool,
    pub meets_power: bool,
    pub meets_budget: bool,
}

impl PackageEvaluation {
    pub fn feasible(&self) -> bool {
        self.meets_goal && self.meets_power && self.meets_budget
    }
}

pub fn enumerate_grid(config: &TrialConfig) -> Result<Vec<Package>> {
    enumerate_grid_with_cap(config, DEFAULT_GRID_CAP)
}

/// Cartesian product of the component grids; the first component varies slowest.
pub fn enumerate_grid_with_cap(config: &TrialConfig, cap: u64) -> Result<Vec<Package>> {
    let size = config
        .components
        .iter()
        .map(|c| c.grid_len() as u128)
        .product::<u128>();
    if config.components.is_empty() || size == 0 {
        return Err(LagoError::EmptyGrid);
    }
    if size > cap as u128 {
        return Err(LagoError::GridTooLarge { size, cap });
    }
    let axes: Vec<Vec<f64>> = config.components.iter().map(|c| c.grid()).collect();
    let mut grid = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; axes.len()];
    loop {
        grid.push(Package::new(
            idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect(),
        ));
        let mut k = axes.len();
        loop {
            if k == 0 {
                return Ok(grid);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn check_fit_matches(
    fit: &OutcomeFit,
    config: &TrialConfig,
    criteria: &OptimizationCriteria,
) -> Result<()> {
    if fit.component_names != config.component_names() {
        return Err(LagoError::DimensionMismatch {
            what: "fit components vs config components".into(),
            expected: config.components.len(),
            actual: fit.component_names.len(),
        });
    }
    if fit.covariate_names != config.covariate_names() {
        return Err(LagoError::DimensionMismatch {
            what: "fit covariates vs config covariates".into(),
            expected: config.covariates.len(),
            actual: fit.covariate_names.len(),
        });
    }
    if criteria.covariate_profile.len() != config.covariates.len() {
        return Err(LagoError::DimensionMismatch {
            what: "covariate profile".into(),
            expected: config.covariates.len(),
            actual: criteria.covariate_profile.len(),
        });
    }
    Ok(())
}

/// Evaluates every criterion at every package of `grid`, preserving order.
pub fn evaluate_packages(
    fit: &OutcomeFit,
    cost: &CostModel,
    criteria: &OptimizationCriteria,
    grid: &[Package],
) -> Result<Vec<PackageEvaluation>> {
    criteria.validate()?;
    let goal = criteria.effective_goal()?;
    grid.par_iter()
        .map(|package| {
            let predicted = predict_outcome_with(
                fit,
                package,
                &criteria.covariate_profile,
                criteria.level,
                criteria.variance,
            )?;
            let cost_value = cost.total_cost(package)?;
            let power = match (criteria.power_target, criteria.power_context) {
                (Some(_), Some(ctx)) => Some(power_two_proportions(
                    ctx.baseline_rate,
                    predicted.probability,
                    ctx.n_per_arm,
                    ctx.cluster_size,
                    ctx.icc,
                    ctx.alpha,
                )?),
                _ => None,
            };
            Ok(PackageEvaluation {
                meets_goal: predicted.probability >= goal - GOAL_TOLERANCE,
                meets_power: match (criteria.power_target, power) {
                    (Some(target), Some(p)) => p >= target,
                    _ => true,
                },
                meets_budget: criteria
                    .budget
                    .is_none_or(|b| cost_value <= b + GOAL_TOLERANCE),
                package: package.clone(),
                predicted,
                cost: cost_value,
                power,
            })
        })
        .collect()
}

fn cheapest_order(a: &PackageEvaluation, b: &PackageEvaluation) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then_with(|| a.package.lex_cmp(&b.package))
}

/// Best achievable package: highest predicted probability, then cheapest.
fn best_effort_order(a: &PackageEvaluation, b: &PackageEvaluation) -> Ordering {
    b.predicted
        .probability
        .total_cmp(&a.predicted.probability)
        .then_with(|| cheapest_order(a, b))
}

/// Selects the optimum from evaluated packages; independent of their order.
pub fn select_optimum(
    evaluations: &[PackageEvaluation],
    criteria: &OptimizationCriteria,
) -> Result<OptimizationResult> {
    if evaluations.is_empty() {
        return Err(LagoError::EmptyGrid);
    }
    let goal = criteria.effective_goal()?;
    let feasible = evaluations
        .par_iter()
        .filter(|e| e.feasible())
        .min_by(|a, b| cheapest_order(a, b));
    let (status, chosen) = match feasible {
        Some(e) => (OptimizationStatus::Optimal, e),
        None => (
            OptimizationStatus::Infeasible,
            evaluations
                .par_iter()
                .min_by(|a, b| best_effort_order(a, b))
                .expect("non-empty"),
        ),
    };

    let cheaper = |e: &&PackageEvaluation| cheapest_order(e, chosen) == Ordering::Less;
    let mut binding = Vec::new();
    if evaluations.iter().filter(cheaper).any(|e| !e.meets_goal) {
        binding.push("goal".to_string());
    }
    if criteria.power_target.is_some() && evaluations.iter().filter(cheaper).any(|e| !e.meets_power)
    {
        binding.push("power".to_string());
    }
    if criteria.budget.is_some() && evaluations.iter().any(|e| !e.meets_budget) {
        binding.push("budget".to_string());
    }

    let count = |f: fn(&PackageEvaluation) -> bool| evaluations.iter().filter(|e| f(e)).count();
    Ok(OptimizationResult {
        status,
        package: chosen.package.clone(),
        predicted: chosen.predicted,
        cost: chosen.cost,
        power: chosen.power,
        grid_size: evaluations.len(),
        constraints: ConstraintSummary {
            effective_goal: goal,
            meets_goal: count(|e| e.meets_goal),
            meets_power: criteria.power_target.map(|_| count(|e| e.meets_power)),
            meets_budget: criteria.budget.map(|_| count(|e| e.meets_budget)),
            feasible: count(|e| e.feasible()),
            binding,
        },
    })
}

pub fn optimize_package(
    fit: &OutcomeFit,
    cost: &CostModel,
    criteria: &OptimizationCriteria,
    config: &TrialConfig,
) -> Result<OptimizationResult> {
    check_fit_matches(fit, config, criteria)?;
    let grid = enumerate_grid(config)?;
    let evaluations = evaluate_packages(fit, cost, criteria, &grid)?;
    select_optimum(&evaluations, criteria)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMember {
    pub package: Package,
    pub probability: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub cost: f64,
}

/// Member doses of the second component for one value of the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseBand {
    pub first_dose: f64,
    /// Inclusive `(low, high)` runs of consecutive grid values.
    pub ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub level: f64,
    pub goal: f64,
    pub members: Vec<SetMember>,
    pub grid_size: usize,
    pub fraction_of_grid: f64,
    /// Minimum and maximum member cost (`None` for an empty set).
    pub cost_min: Option<f64>,
    pub cost_max: Option<f64>,
    /// Present for two-component trials.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<DoseBand>>,
}

impl ConfidenceSet {
    /// True when every band consists of a single run.
    pub fn bands_contiguous(&self) -> Option<bool> {
        self.bands
            .as_ref()
            .map(|bands| bands.iter().all(|b| b.ranges.len() == 1))
    }

    pub fn contains(&self, package: &Package) -> bool {
        self.members.iter().any(|m| &m.package == package)
    }
}

/// Whether the interval `[ci_lower, ci_upper]` contains `goal`.
pub fn interval_contains_goal(predicted: &PredictedOutcome, goal: f64) -> bool {
    predicted.ci_lower <= goal + GOAL_TOLERANCE && predicted.ci_upper >= goal - GOAL_TOLERANCE
}

pub fn confidence_set(
    fit: &OutcomeFit,
    cost: &CostModel,
    criteria: &OptimizationCriteria,
    config: &TrialConfig,
) -> Result<ConfidenceSet> {
    check_fit_matches(fit, config, criteria)?;
    let grid = enumerate_grid(config)?;
    let evaluations = evaluate_packages(fit, cost, criteria, &grid)?;
    let goal = criteria.effective_goal()?;

    let in_set: Vec<bool> = evaluations
        .iter()
        .map(|e| interval_contains_goal(&e.predicted, goal))
        .collect();
    let members: Vec<SetMember> = evaluations
        .iter()
        .zip(&in_set)
        .filter(|(_, &inside)| inside)
        .map(|(e, _)| SetMember {
            package: e.package.clone(),
            probability: e.predicted.probability,
            ci_lower: e.predicted.ci_lower,
            ci_upper: e.predicted.ci_upper,
            cost: e.cost,
        })
        .collect();

    let bands = (config.components.len() == 2).then(|| {
        let second = config.components[1].grid();
        config.components[0]
            .grid()
            .into_iter()
            .enumerate()
            .filter_map(|(i, first_dose)| {
                let row = &in_set[i * second.len()..(i + 1) * second.len()];
                let mut ranges = Vec::new();
                let mut start: Option<usize> = None;
                for (j, &inside) in row.iter().enumerate() {
                    match (inside, start) {
                        (true, None) => start = Some(j),
                        (false, Some(s)) => {
                            ranges.push((second[s], second[j - 1]));
                            start = None;
                        }
                        _ => {}
                    }
                }
                if let Some(s) = start {
                    ranges.push((second[s], second[row.len() - 1]));
                }
                (!ranges.is_empty()).then_some(DoseBand { first_dose, ranges })
            })
            .collect()
    });

    let cost_min = members.iter().map(|m| m.cost).min_by(f64::total_cmp);
    let cost_max = members.iter().map(|m| m.cost).max_by(f64::total_cmp);
    Ok(ConfidenceSet {
        level: criteria.level,
        goal,
        fraction_of_grid: members.len() as f64 / grid.len() as f64,
        grid_size: grid.len(),
        members,
        cost_min,
        cost_max,
        bands,
    })
}
