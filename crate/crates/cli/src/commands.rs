//! Operations shared by the CLI verbs and the HTTP endpoints. Each takes
//! parsed inputs and returns a serializable result, so both front ends emit
//! identical JSON.

use std::collections::BTreeMap;

use lago_core::cost_model::cost_curve;
use lago_core::inference::{
    default_comparison, design_effect, overall_effect_test, power_two_proportions, project_outcome,
    Comparison, Projection, ProjectionInput, TestMethod, TestResult,
};
use lago_core::optimizer::{
    confidence_set, optimize_package, ConfidenceSet, GoalType, OptimizationCriteria,
    OptimizationResult, PowerContext,
};
use lago_core::outcome_model::{fit_logistic, OutcomeFit, VarianceKind};
use lago_core::simulator::{operating_characteristics, OcReport, SimulationScenario};
use lago_core::stage_engine::{
    final_analysis, recommend_next_stage, FinalReport, LagoDesign, Recommendation, SubgroupProfile,
};
use lago_core::trial_model::{
    combine_stages, load_observations, CombinedDataset, Period, StageDataset, TrialConfig,
};
use lago_core::{CostModel, LagoError, Package};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub fn read_text(path: &str) -> AppResult<String> {
    std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn parse_config(text: &str) -> AppResult<TrialConfig> {
    let config = TrialConfig::from_json(text)?;
    config.ensure_valid()?;
    Ok(config)
}

pub fn load_config_file(path: &str) -> AppResult<TrialConfig> {
    parse_config(&read_text(path)?).map_err(|mut e| {
        e.message = format!("{path}: {}", e.message);
        e
    })
}

pub fn parse_data(text: &str, config: &TrialConfig) -> AppResult<Vec<StageDataset>> {
    Ok(load_observations(text.as_bytes(), config)?)
}

pub fn load_data_file(path: &str, config: &TrialConfig) -> AppResult<Vec<StageDataset>> {
    parse_data(&read_text(path)?, config).map_err(|mut e| {
        e.message = format!("{path}: {}", e.message);
        e
    })
}

fn last_stage(datasets: &[StageDataset]) -> AppResult<usize> {
    datasets
        .iter()
        .map(|d| d.stage_index)
        .max()
        .ok_or_else(|| AppError::conflict("no observations loaded"))
}

/// All loaded stages combined.
pub fn combined(config: &TrialConfig, datasets: &[StageDataset]) -> AppResult<CombinedDataset> {
    Ok(combine_stages(
        datasets,
        last_stage(datasets)?,
        config.num_stages,
    )?)
}

/// Goal and constraint settings as given on the command line or in a request body.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalRequest {
    pub goal: f64,
    #[serde(default)]
    pub goal_type: GoalType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Covariate values overriding the configured reference profile.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub at: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_arm: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_rate: Option<f64>,
    #[serde(default)]
    pub variance: VarianceKind,
}

pub fn covariate_profile(config: &TrialConfig, at: &BTreeMap<String, f64>) -> AppResult<Vec<f64>> {
    let mut profile = config.reference_profile();
    for (name, value) in at {
        let j = config
            .covariate_index(name)
            .ok_or_else(|| AppError::usage(format!("unknown covariate `{name}` in profile")))?;
        profile[j] = *value;
    }
    Ok(profile)
}

pub fn criteria_from(
    config: &TrialConfig,
    req: &GoalRequest,
    data: Option<&CombinedDataset>,
) -> AppResult<OptimizationCriteria> {
    let mut c = OptimizationCriteria::absolute(req.goal, covariate_profile(config, &req.at)?);
    c.goal_type = req.goal_type;
    if let Some(level) = req.level {
        c.level = level;
    }
    c.budget = req.budget;
    c.variance = req.variance;
    let observed_baseline = data.and_then(|d| d.baseline_rate());
    c.baseline_rate = match req.goal_type {
        GoalType::RelativeIncrease => req.baseline_rate.or(observed_baseline),
        GoalType::Absolute => req.baseline_rate,
    };
    if let Some(target) = req.power_target {
        let n_per_arm = req
            .n_per_arm
            .ok_or_else(|| AppError::usage("a power target needs n_per_arm"))?;
        let baseline_rate = req.baseline_rate.or(observed_baseline).ok_or_else(|| {
            AppError::conflict("a power target needs a baseline rate or comparison rows")
        })?;
        c.power_target = Some(target);
        c.power_context = Some(PowerContext {
            n_per_arm,
            cluster_size: req
                .cluster_size
                .or_else(|| data.map(|d| d.mean_cluster_size()))
                .unwrap_or(1.0),
            icc: config.icc.unwrap_or(0.0),
            alpha: req.alpha.unwrap_or(0.05),
            baseline_rate,
        });
    }
    c.validate()?;
    Ok(c)
}

pub fn fit(config: &TrialConfig, datasets: &[StageDataset]) -> AppResult<OutcomeFit> {
    Ok(fit_logistic(&combined(config, datasets)?, config)?)
}

pub fn optimize(
    config: &TrialConfig,
    fit: &OutcomeFit,
    req: &GoalRequest,
    data: Option<&CombinedDataset>,
) -> AppResult<OptimizationResult> {
    let criteria = criteria_from(config, req, data)?;
    Ok(optimize_package(
        fit,
        &CostModel::from_config(config),
        &criteria,
        config,
    )?)
}

pub fn confset(
    config: &TrialConfig,
    fit: &OutcomeFit,
    req: &GoalRequest,
    data: Option<&CombinedDataset>,
) -> AppResult<ConfidenceSet> {
    let criteria = criteria_from(config, req, data)?;
    Ok(confidence_set(
        fit,
        &CostModel::from_config(config),
        &criteria,
        config,
    )?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<TestMethod>,
}

pub fn test(
    config: &TrialConfig,
    datasets: &[StageDataset],
    req: &TestRequest,
) -> AppResult<TestResult> {
    let data = combined(config, datasets)?;
    let comparison = req.comparison.unwrap_or_else(|| default_comparison(&data));
    Ok(overall_effect_test(&data, comparison, req.method)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectRequest {
    pub baseline: f64,
    /// Single overall odds ratio, applied at `dose` (default 1).
    #[serde(default, rename = "or", skip_serializing_if = "Option::is_none")]
    pub odds_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ProjectionInput>,
}

pub fn project(req: &ProjectRequest) -> AppResult<Projection> {
    let mut inputs = req.components.clone();
    if let Some(or) = req.odds_ratio {
        inputs.push(ProjectionInput {
            name: "package".into(),
            or_per_unit: or,
            dose: req.dose.unwrap_or(1.0),
        });
    }
    if inputs.is_empty() {
        return Err(AppError::usage("give an odds ratio or a component table"));
    }
    Ok(project_outcome(req.baseline, &inputs)?)
}

/// Reads a `component,or_per_unit,dose` table.
pub fn parse_projection_table(text: &str) -> AppResult<Vec<ProjectionInput>> {
    #[derive(Deserialize)]
    struct Row {
        component: String,
        or_per_unit: f64,
        dose: f64,
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<Row>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| LagoError::Parse {
                line: i as u64 + 2,
                column: String::new(),
                message: e.to_string(),
            })?;
            Ok(ProjectionInput {
                name: row.component,
                or_per_unit: row.or_per_unit,
                dose: row.dose,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRequest {
    pub p0: f64,
    pub p1: f64,
    pub n_per_arm: u64,
    #[serde(default = "one")]
    pub cluster_size: f64,
    #[serde(default)]
    pub icc: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerOutput {
    pub power: f64,
    pub design_effect: f64,
    pub effective_n_per_arm: f64,
}

pub fn power(req: &PowerRequest) -> AppResult<PowerOutput> {
    let power = power_two_proportions(
        req.p0,
        req.p1,
        req.n_per_arm,
        req.cluster_size,
        req.icc,
        req.alpha,
    )?;
    let de = design_effect(req.cluster_size, req.icc)?;
    Ok(PowerOutput {
        power,
        design_effect: de,
        effective_n_per_arm: req.n_per_arm as f64 / de,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRequest {
    /// Last completed stage; defaults to the last stage with data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    /// Package planned for the completed stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<Vec<f64>>,
    #[serde(flatten)]
    pub goal: GoalRequest,
}

/// Trial-weighted mean delivered dose over intervention rows of stages `1..=k`.
fn observed_package(config: &TrialConfig, datasets: &[StageDataset], k: usize) -> Package {
    let rows: Vec<_> = datasets
        .iter()
        .filter(|d| d.stage_index <= k)
        .flat_map(|d| &d.records)
        .filter(|r| r.period == Period::Intervention)
        .collect();
    let total: f64 = rows.iter().map(|r| r.trials as f64).sum();
    Package::new(
        config
            .components
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if total > 0.0 {
                    rows.iter()
                        .map(|r| r.trials as f64 * r.doses[j])
                        .sum::<f64>()
                        / total
                } else {
                    c.lower
                }
            })
            .collect(),
    )
}

pub fn run_stage(
    config: &TrialConfig,
    datasets: &[StageDataset],
    req: &StageRequest,
) -> AppResult<Recommendation> {
    let k = match req.stage {
        Some(k) => k,
        None => last_stage(datasets)?,
    };
    let data = combine_stages(datasets, k.clamp(1, config.num_stages), config.num_stages)?;
    let criteria = criteria_from(config, &req.goal, Some(&data))?;
    let previous = req.previous.clone().map(Package::new);
    let initial = previous
        .clone()
        .unwrap_or_else(|| observed_package(config, datasets, k));
    let design = LagoDesign::new(config.clone(), criteria, initial);
    Ok(recommend_next_stage(
        &design,
        datasets,
        k,
        previous.as_ref(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRequest {
    pub label: String,
    pub at: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalRequest {
    #[serde(flatten)]
    pub goal: GoalRequest,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subgroups: Vec<SubgroupRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

pub fn final_report(
    config: &TrialConfig,
    datasets: &[StageDataset],
    req: &FinalRequest,
) -> AppResult<FinalReport> {
    let data = combined(config, datasets)?;
    let criteria = criteria_from(config, &req.goal, Some(&data))?;
    let subgroups = req
        .subgroups
        .iter()
        .map(|s| {
            Ok(SubgroupProfile {
                label: s.label.clone(),
                covariate_profile: covariate_profile(config, &s.at)?,
            })
        })
        .collect::<AppResult<Vec<_>>>()?;
    let initial = Package::new(config.components.iter().map(|c| c.lower).collect());
    let design = LagoDesign::new(config.clone(), criteria, initial);
    Ok(final_analysis(
        &design,
        datasets,
        &subgroups,
        req.comparison,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub dose: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub component: String,
    pub unit: String,
    pub currency: String,
    pub points: Vec<CurvePoint>,
}

pub fn cost_curve_for(config: &TrialConfig, component: &str) -> AppResult<CostCurve> {
    let j = config
        .component_index(component)
        .ok_or_else(|| AppError::usage(format!("unknown component `{component}`")))?;
    let points = cost_curve(&CostModel::from_config(config), config, j)?
        .into_iter()
        .map(|(dose, cost)| CurvePoint { dose, cost })
        .collect();
    Ok(CostCurve {
        component: component.into(),
        unit: config.components[j].unit.clone(),
        currency: config.currency_label.clone(),
        points,
    })
}

pub fn simulate(
    scenario: &SimulationScenario,
    reps: usize,
    seed: u64,
    alpha: f64,
) -> AppResult<OcReport> {
    Ok(operating_characteristics(scenario, reps, seed, alpha)?)
}
