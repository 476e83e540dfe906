//! Multi-stage orchestration: refit and recommend between stages, and the
//! final analysis over all stages.
//!
//! A component whose delivered dose does not vary in the combined data cannot
//! be estimated. It is frozen at its latest planned dose, dropped from the
//! fit, its cost moved into the fixed cost, and the freeze is recorded in the
//! recommendation notes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost_model::{CostModel, Package};
use crate::error::{LagoError, Result};
use crate::inference::{default_comparison, overall_effect_test, Comparison, TestResult};
use crate::optimizer::{
    confidence_set, optimize_package, ConfidenceSet, GoalType, OptimizationCriteria,
    OptimizationResult, OptimizationStatus,
};
use crate::outcome_model::{
    component_effect_table_with, fit_logistic, predict_outcome_with, zero_variance_components,
    ComponentEffect, OutcomeFit, PredictedOutcome,
};
use crate::trial_model::{combine_stages, CombinedDataset, StageDataset, TrialConfig};

/// Everything fixed before the trial starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagoDesign {
    pub config: TrialConfig,
    pub cost: CostModel,
    pub criteria: OptimizationCriteria,
    /// Planned package for stage 1.
    pub initial_package: Package,
    /// Criteria replacing `criteria` when recommending for a given stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_criteria: BTreeMap<usize, OptimizationCriteria>,
}

impl LagoDesign {
    pub fn new(
        config: TrialConfig,
        criteria: OptimizationCriteria,
        initial_package: Package,
    ) -> Self {
        let cost = CostModel::from_config(&config);
        Self {
            config,
            cost,
            criteria,
            initial_package,
            stage_criteria: BTreeMap::new(),
        }
    }

    pub fn criteria_for(&self, stage: usize) -> &OptimizationCriteria {
        self.stage_criteria.get(&stage).unwrap_or(&self.criteria)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.ensure_valid()?;
        self.criteria.validate()?;
        for c in self.stage_criteria.values() {
            c.validate()?;
        }
        if self.cost.polynomials.len() != self.config.components.len() {
            return Err(LagoError::DimensionMismatch {
                what: "cost polynomials".into(),
                expected: self.config.components.len(),
                actual: self.cost.polynomials.len(),
            });
        }
        if !self.initial_package.in_bounds(&self.config) {
            return Err(LagoError::Domain(
                "initial package is outside the dose bounds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationStatus {
    Optimal,
    Infeasible,
    CarriedForward,
}

/// Compact description of the fit behind a recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub component_names: Vec<String>,
    pub odds_ratios: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub converged: bool,
    pub iterations: usize,
    pub frozen: Vec<String>,
}

impl FitSummary {
    fn from_fit(fit: &OutcomeFit, frozen: Vec<String>) -> Self {
        Self {
            component_names: fit.component_names.clone(),
            odds_ratios: fit.odds_ratios(),
            coefficients: fit.coefficients(),
            n_rows: fit.n_rows,
            n_clusters: fit.n_clusters,
            converged: fit.converged,
            iterations: fit.iterations,
            frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub for_stage: usize,
    pub package: Package,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis: Option<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<PredictedOutcome>,
    pub cost: f64,
    pub status: RecommendationStatus,
    /// Change from the previous plan below one grid step in every component.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilized: Option<bool>,
    pub notes: Vec<String>,
}

fn format_dose(x: f64) -> String {
    format!("{x}")
}

/// Config, cost and data with the `frozen` components removed.
fn reduce(
    config: &TrialConfig,
    cost: &CostModel,
    data: &CombinedDataset,
    frozen: &[usize],
    frozen_doses: &[f64],
) -> (TrialConfig, CostModel, CombinedDataset) {
    let keep = |j: &usize| !frozen.contains(j);
    let mut reduced = config.clone();
    reduced.components = (0..config.components.len())
        .filter(keep)
        .map(|j| config.components[j].clone())
        .collect();
    let extra: f64 = frozen
        .iter()
        .zip(frozen_doses)
        .map(|(&j, &x)| cost.component_cost(j, x))
        .sum();
    reduced.fixed_cost += extra;
    let reduced_cost = CostModel {
        polynomials: (0..cost.polynomials.len())
            .filter(keep)
            .map(|j| cost.polynomials[j])
            .collect(),
        fixed_cost: cost.fixed_cost + extra,
    };
    let records = data
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.doses = (0..r.doses.len())
                .filter(keep)
                .map(|j| r.doses[j])
                .collect();
            r
        })
        .collect();
    (
        reduced,
        reduced_cost,
        CombinedDataset {
            upto: data.upto,
            records,
        },
    )
}

/// Reinserts frozen doses into a package over the remaining components.
fn expand(reduced: &Package, frozen: &[usize], frozen_doses: &[f64], m: usize) -> Package {
    let mut free = reduced.doses.iter();
    let doses = (0..m)
        .map(|j| match frozen.iter().position(|&f| f == j) {
            Some(i) => frozen_doses[i],
            None => *free.next().expect("reduced package length"),
        })
        .collect();
    Package::new(doses)
}

/// Fills a missing relative-goal baseline from the comparison rows.
fn resolve_criteria(
    criteria: &OptimizationCriteria,
    data: &CombinedDataset,
) -> Result<OptimizationCriteria> {
    let mut c = criteria.clone();
    if c.goal_type == GoalType::RelativeIncrease && c.baseline_rate.is_none() {
        c.baseline_rate = Some(data.baseline_rate().ok_or_else(|| {
            LagoError::Precondition("relative goal needs a baseline rate or comparison rows".into())
        })?);
    }
    Ok(c)
}

fn stabilized(config: &TrialConfig, previous: &Package, next: &Package) -> bool {
    config
        .components
        .iter()
        .zip(previous.doses.iter().zip(&next.doses))
        .all(|(c, (a, b))| (a - b).abs() < c.step)
}

/// Recommends the planned package for stage `k + 1` from stages `1..=k`.
///
/// `previous` is the package planned for stage `k`; the initial package is
/// used when it is absent.
pub fn recommend_next_stage(
    design: &LagoDesign,
    datasets: &[StageDataset],
    k: usize,
    previous: Option<&Package>,
) -> Result<Recommendation> {
    let num_stages = design.config.num_stages;
    if k >= num_stages {
        return Err(LagoError::NoNextStage {
            completed: k,
            num_stages,
        });
    }
    let data = combine_stages(datasets, k, num_stages)?;
    if data.is_empty() {
        return Err(LagoError::Precondition(format!(
            "no observations in stages 1..={k}"
        )));
    }
    let for_stage = k + 1;
    let criteria = resolve_criteria(design.criteria_for(for_stage), &data)?;
    let anchor = previous.unwrap_or(&design.initial_package);
    let m = design.config.components.len();
    if anchor.len() != m {
        return Err(LagoError::DimensionMismatch {
            what: "previous package".into(),
            expected: m,
            actual: anchor.len(),
        });
    }

    let frozen = zero_variance_components(&data, &design.config);
    let frozen_doses: Vec<f64> = frozen.iter().map(|&j| anchor.doses[j]).collect();
    let mut notes: Vec<String> = frozen
        .iter()
        .zip(&frozen_doses)
        .map(|(&j, &x)| {
            format!(
                "{} frozen at {} (no dose variation)",
                design.config.components[j].name,
                format_dose(x)
            )
        })
        .collect();
    let frozen_names: Vec<String> = frozen
        .iter()
        .map(|&j| design.config.components[j].name.clone())
        .collect();

    if frozen.len() == m {
        notes.push("all components frozen; previous plan carried forward".into());
        return Ok(Recommendation {
            for_stage,
            package: anchor.clone(),
            basis: None,
            predicted: None,
            cost: design.cost.total_cost(anchor)?,
            status: RecommendationStatus::CarriedForward,
            stabilized: previous.map(|_| true),
            notes,
        });
    }

    let (config, cost, reduced_data) = if frozen.is_empty() {
        (design.config.clone(), design.cost.clone(), data)
    } else {
        reduce(&design.config, &design.cost, &data, &frozen, &frozen_doses)
    };
    let fit = fit_logistic(&reduced_data, &config)?;
    let result = optimize_package(&fit, &cost, &criteria, &config)?;
    let package = expand(&result.package, &frozen, &frozen_doses, m);
    let status = match result.status {
        OptimizationStatus::Optimal => RecommendationStatus::Optimal,
        OptimizationStatus::Infeasible => {
            notes
                .push("no package meets every constraint; best achievable package returned".into());
            RecommendationStatus::Infeasible
        }
    };
    Ok(Recommendation {
        for_stage,
        stabilized: previous.map(|p| stabilized(&design.config, p, &package)),
        package,
        basis: Some(FitSummary::from_fit(&fit, frozen_names)),
        predicted: Some(result.predicted),
        cost: result.cost,
        status,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupProfile {
    pub label: String,
    pub covariate_profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub label: String,
    pub covariate_profile: Vec<f64>,
    pub optimal: OptimizationResult,
    pub confidence_set: ConfidenceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub stages_analyzed: usize,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub overall_test: TestResult,
    pub fit: FitSummary,
    pub component_effects: Vec<ComponentEffect>,
    pub optimal: OptimizationResult,
    pub confidence_set: ConfidenceSet,
    pub predicted_at_optimal: PredictedOutcome,
    pub cost_at_optimal: f64,
    /// Minimum and maximum cost over the confidence set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_range: Option<(f64, f64)>,
    pub subgroups: Vec<SubgroupResult>,
}

/// Analysis of all `K` stages: overall test, effects, optimum, confidence
/// set and per-subgroup optima.
pub fn final_analysis(
    design: &LagoDesign,
    datasets: &[StageDataset],
    subgroups: &[SubgroupProfile],
    comparison: Option<Comparison>,
) -> Result<FinalReport> {
    let k = design.config.num_stages;
    for stage in 1..=k {
        if !datasets.iter().any(|d| d.stage_index == stage) {
            return Err(LagoError::Precondition(format!(
                "stage {stage} has no data"
            )));
        }
    }
    let data = combine_stages(datasets, k, k)?;
    let comparison = comparison.unwrap_or_else(|| default_comparison(&data));
    let overall_test = overall_effect_test(&data, comparison, None)?;

    let criteria = resolve_criteria(&design.criteria, &data)?;
    let fit = fit_logistic(&data, &design.config)?;
    let component_effects = component_effect_table_with(&fit, criteria.level, criteria.variance)?;
    let optimal = optimize_package(&fit, &design.cost, &criteria, &design.config)?;
    let set = confidence_set(&fit, &design.cost, &criteria, &design.config)?;
    let predicted_at_optimal = predict_outcome_with(
        &fit,
        &optimal.package,
        &criteria.covariate_profile,
        criteria.level,
        criteria.variance,
    )?;

    let subgroups = subgroups
        .iter()
        .map(|s| {
            let mut c = criteria.clone();
            c.covariate_profile = s.covariate_profile.clone();
            Ok(SubgroupResult {
                label: s.label.clone(),
                covariate_profile: s.covariate_profile.clone(),
                optimal: optimize_package(&fit, &design.cost, &c, &design.config)?,
                confidence_set: confidence_set(&fit, &design.cost, &c, &design.config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FinalReport {
        stages_analyzed: k,
        n_rows: data.len(),
        n_clusters: data.cluster_ids().len(),
        overall_test,
        fit: FitSummary::from_fit(&fit, Vec::new()),
        component_effects,
        cost_at_optimal: optimal.cost,
        cost_range: set.cost_min.zip(set.cost_max),
        optimal,
        confidence_set: set,
        predicted_at_optimal,
        subgroups,
    })
}

fn fmt_package(config: &TrialConfig, p: &Package) -> String {
    config
        .components
        .iter()
        .zip(&p.doses)
        .map(|(c, x)| format!("{} {} {}", c.name, format_dose(*x), c.unit))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

fn fmt_range(config: &TrialConfig, r: Option<(f64, f64)>) -> String {
    match r {
        Some((lo, hi)) => format!("{} {lo:.1} to {hi:.1}", config.currency_label),
        None => "empty confidence set".into(),
    }
}

fn fmt_bands(set: &ConfidenceSet) -> Option<String> {
    set.bands.as_ref().map(|bands| {
        bands
            .iter()
            .map(|b| {
                let runs = b
                    .ranges
                    .iter()
                    .map(|(lo, hi)| {
                        if lo == hi {
                            format_dose(*lo)
                        } else {
                            format!("{}-{}", format_dose(*lo), format_dose(*hi))
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(", ");
                format!("({}, {runs})", format_dose(b.first_dose))
            })
            .collect::<Vec<_>>()
            .join(" ")
    })
}

impl FinalReport {
    /// Plain-text summary in the conventional output order: overall test,
    /// optimal package and confidence set, component effects, predicted
    /// outcome, cost; subgroup lines follow each block.
    pub fn render_text(&self, config: &TrialConfig) -> String {
        let mut s = String::new();
        let level = self.confidence_set.level * 100.0;
        let t = &self.overall_test;
        let _ = writeln!(
            s,
            "Overall intervention effect: p = {} ({:?}, {:?}; difference {:.3}, {:.3} vs {:.3})",
            fmt_p(t.p_value),
            t.method,
            t.comparison,
            t.estimate,
            t.intervention_rate,
            t.comparison_rate
        );
        let _ = writeln!(
            s,
            "Optimal package: {} [{:?}]",
            fmt_package(config, &self.optimal.package),
            self.optimal.status
        );
        let _ = writeln!(
            s,
            "{level:.0}% confidence set: {} of {} packages ({:.1}% of grid)",
            self.confidence_set.members.len(),
            self.confidence_set.grid_size,
            100.0 * self.confidence_set.fraction_of_grid
        );
        if let Some(b) = fmt_bands(&self.confidence_set) {
            let _ = writeln!(s, "  bands: {b}");
        }
        for g in &self.subgroups {
            let _ = writeln!(
                s,
                "  subgroup {}: {}",
                g.label,
                fmt_package(config, &g.optimal.package)
            );
        }
        let _ = writeln!(s, "Component effects ({level:.0}% CI):");
        for e in &self.component_effects {
            let _ = writeln!(
                s,
                "  {} per {}: OR {:.3} ({:.3}, {:.3}); {:+.1} pp ({:.1}, {:.1})",
                e.name,
                format_dose(e.scale),
                e.odds_ratio,
                e.ci_lower,
                e.ci_upper,
                e.pp_effect,
                e.pp_ci_lower,
                e.pp_ci_upper
            );
        }
        let p = &self.predicted_at_optimal;
        let _ = writeln!(
            s,
            "Predicted outcome at optimum: {:.3} ({:.3}, {:.3})",
            p.probability, p.ci_lower, p.ci_upper
        );
        for g in &self.subgroups {
            let q = &g.optimal.predicted;
            let _ = writeln!(
                s,
                "  subgroup {}: {:.3} ({:.3}, {:.3})",
                g.label, q.probability, q.ci_lower, q.ci_upper
            );
        }
        let _ = writeln!(
            s,
            "Cost at optimum: {} {:.1} (confidence-set range {})",
            config.currency_label,
            self.cost_at_optimal,
            fmt_range(config, self.cost_range)
        );
        for g in &self.subgroups {
            let _ = writeln!(
                s,
                "  subgroup {}: {} {:.1} (range {})",
                g.label,
                config.currency_label,
                g.optimal.cost,
                fmt_range(
                    config,
                    g.confidence_set.cost_min.zip(g.confidence_set.cost_max)
                )
            );
        }
        s
    }
}
