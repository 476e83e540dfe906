//! Argument definitions and verb dispatch for the `lago` binary.

use std::collections::BTreeMap;
use std::io::Write;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lago_core::inference::{Comparison, TestMethod};
use lago_core::optimizer::GoalType;
use lago_core::outcome_model::{OutcomeFit, VarianceKind};
use lago_core::simulator::{OcReport, SimulationScenario};
use lago_core::trial_model::TrialConfig;
use serde::Serialize;

use crate::canonical::to_canonical_string;
use crate::commands::{
    self, FinalRequest, GoalRequest, PowerRequest, ProjectRequest, StageRequest, SubgroupRequest,
    TestRequest,
};
use crate::error::{AppError, AppResult};

#[derive(Debug, Parser)]
#[command(
    name = "lago",
    version,
    about = "Design, steer and analyze learn-as-you-go cluster trials"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the grouped logistic outcome model
    Fit(DataArgs),
    /// Cheapest package meeting the goal and constraints
    Optimize(ModelArgs),
    /// Packages whose predicted-outcome interval contains the goal
    Confset(ModelArgs),
    /// Overall intervention-effect test
    Test(TestArgs),
    /// Project an outcome rate from a baseline and odds ratios
    Project(ProjectArgs),
    /// Power of the two-proportion test under clustering
    Power(PowerArgs),
    /// Recommend the package for the next stage
    RunStage(StageArgs),
    /// Final analysis over all stages
    Final(FinalArgs),
    /// Cost of one component over its dose grid
    CostCurve(CostCurveArgs),
    /// Operating characteristics by simulation
    Simulate(SimulateArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Output {
    /// Write the result to this file instead of stdout
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Trial configuration (JSON)
    #[arg(long)]
    pub config: String,
    /// Observations (CSV)
    #[arg(long)]
    pub data: String,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GoalTypeArg {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VarianceArg {
    Robust,
    Model,
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("`{value}` is not a number"))?;
    Ok((name.trim().to_string(), value))
}

fn parse_subgroup(s: &str) -> Result<SubgroupRequest, String> {
    let (label, rest) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LABEL:NAME=VALUE[,NAME=VALUE], got `{s}`"))?;
    let at = rest
        .split(',')
        .map(parse_assignment)
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    Ok(SubgroupRequest {
        label: label.to_string(),
        at,
    })
}

/// Comma-separated doses, e.g. `4,36`.
#[derive(Debug, Clone)]
pub struct PackageArg(pub Vec<f64>);

fn parse_package(s: &str) -> Result<PackageArg, String> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{x}` is not a number"))
        })
        .collect::<Result<_, _>>()
        .map(PackageArg)
}

#[derive(Debug, Args)]
pub struct GoalArgs {
    /// Outcome goal (absolute probability, or increase over baseline)
    #[arg(long)]
    pub goal: f64,
    #[arg(long, value_enum, default_value = "absolute")]
    pub goal_type: GoalTypeArg,
    /// Confidence level for intervals and the confidence set
    #[arg(long)]
    pub level: Option<f64>,
    /// Covariate profile entry, repeatable
    #[arg(long = "at", value_name = "NAME=VALUE", value_parser = parse_assignment)]
    pub at: Vec<(String, f64)>,
    /// Maximum package cost
    #[arg(long)]
    pub budget: Option<f64>,
    /// Minimum power of the overall test at the recommended package
    #[arg(long)]
    pub power_target: Option<f64>,
    /// Individuals per arm for the power constraint
    #[arg(long)]
    pub n_per_arm: Option<u64>,
    /// Mean cluster size for the power constraint
    #[arg(long)]
    pub cluster_size: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comparison-group outcome rate (otherwise taken from the data)
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long, value_enum, default_value = "robust")]
    pub variance: VarianceArg,
}

impl GoalArgs {
    pub fn request(&self) -> GoalRequest {
        GoalRequest {
            goal: self.goal,
            goal_type: match self.goal_type {
                GoalTypeArg::Absolute => GoalType::Absolute,
                GoalTypeArg::Relative => GoalType::RelativeIncrease,
            },
            level: self.level,
            at: self.at.iter().cloned().collect(),
            budget: self.budget,
            power_target: self.power_target,
            n_per_arm: self.n_per_arm,
            cluster_size: self.cluster_size,
            alpha: self.alpha,
            baseline_rate: self.baseline,
            variance: match self.variance {
                VarianceArg::Robust => VarianceKind::Robust,
                VarianceArg::Model => VarianceKind::Model,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub config: String,
    /// Observations to fit (CSV)
    #[arg(long, required_unless_present = "fit")]
    pub data: Option<String>,
    /// Previously saved fit (JSON from `lago fit`)
    #[arg(long, conflicts_with = "data")]
    pub fit: Option<String>,
    #[command(flatten)]
    pub goal: GoalArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComparisonArg {
    Arm,
    Prepost,
}

impl From<ComparisonArg> for Comparison {
    fn from(c: ComparisonArg) -> Self {
        match c {
            ComparisonArg::Arm => Comparison::Arm,
            ComparisonArg::Prepost => Comparison::Prepost,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    ClusterT,
    WaldSandwich,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum)]
    pub comparison: Option<ComparisonArg>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Reject at this level (reported on stderr)
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Baseline outcome rate
    #[arg(long)]
    pub baseline: f64,
    /// Overall odds ratio of the package
    #[arg(long = "or")]
    pub odds_ratio: Option<f64>,
    /// Units of the odds ratio applied (default 1)
    #[arg(long)]
    pub dose: Option<f64>,
    /// Table with columns component,or_per_unit,dose
    #[arg(long)]
    pub data: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[arg(long)]
    pub p0: f64,
    #[arg(long)]
    pub p1: f64,
    #[arg(long)]
    pub n_per_arm: u64,
    #[arg(long, default_value_t = 1.0)]
    pub cluster_size: f64,
    #[arg(long, default_value_t = 0.0)]
    pub icc: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: String,
    /// Last completed stage (default: last stage in the data)
    #[arg(long)]
    pub stage: Option<usize>,
    /// Package planned for the completed stage, comma separated
    #[arg(long, value_parser = parse_package)]
    pub previous: Option<PackageArg>,
    #[command(flatten)]
    pub goal: GoalArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct FinalArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: String,
    #[command(flatten)]
    pub goal: GoalArgs,
    /// Subgroup profile LABEL:NAME=VALUE[,NAME=VALUE], repeatable
    #[arg(long = "subgroup", value_parser = parse_subgroup)]
    pub subgroups: Vec<SubgroupRequest>,
    #[arg(long, value_enum)]
    pub comparison: Option<ComparisonArg>,
    /// Print the plain-text summary instead of JSON
    #[arg(long)]
    pub text: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct CostCurveArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub component: String,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation scenario (JSON)
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Sweep seed (default: the scenario's seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Print a CSV header and row instead of JSON
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Create a session from this configuration at startup
    #[arg(long)]
    pub config: Option<String>,
}

fn emit_text(output: &Output, text: &str) -> AppResult<()> {
    match &output.out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            AppError::new(
                crate::error::ErrorClass::Data,
                "io",
                format!("cannot write `{path}`: {e}"),
            )
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| AppError::new(crate::error::ErrorClass::Data, "io", e.to_string()))
        }
    }
}

fn emit<T: Serialize>(output: &Output, value: &T) -> AppResult<()> {
    let mut text = to_canonical_string(value)?;
    text.push('\n');
    emit_text(output, &text)
}

fn load_fit(path: &str, config: &TrialConfig) -> AppResult<OutcomeFit> {
    let fit: OutcomeFit = serde_json::from_str(&commands::read_text(path)?).map_err(|e| {
        AppError::new(
            crate::error::ErrorClass::Data,
            "json",
            format!("{path}: {e}"),
        )
    })?;
    if fit.component_names != config.component_names()
        || fit.covariate_names != config.covariate_names()
    {
        return Err(AppError::usage(format!(
            "{path}: fit terms do not match the configuration"
        )));
    }
    Ok(fit)
}

fn model_inputs(
    args: &ModelArgs,
) -> AppResult<(
    TrialConfig,
    OutcomeFit,
    Option<lago_core::trial_model::CombinedDataset>,
)> {
    let config = commands::load_config_file(&args.config)?;
    match (&args.data, &args.fit) {
        (Some(data), _) => {
            let datasets = commands::load_data_file(data, &config)?;
            let combined = commands::combined(&config, &datasets)?;
            let fit = commands::fit(&config, &datasets)?;
            Ok((config, fit, Some(combined)))
        }
        (None, Some(fit)) => {
            let fit = load_fit(fit, &config)?;
            Ok((config, fit, None))
        }
        (None, None) => Err(AppError::usage("give --data or --fit")),
    }
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Fit(a) => {
            let config = commands::load_config_file(&a.config)?;
            let datasets = commands::load_data_file(&a.data, &config)?;
            emit(&a.output, &commands::fit(&config, &datasets)?)
        }
        Command::Optimize(a) => {
            let (config, fit, data) = model_inputs(&a)?;
            emit(
                &a.output,
                &commands::optimize(&config, &fit, &a.goal.request(), data.as_ref())?,
            )
        }
        Command::Confset(a) => {
            let (config, fit, data) = model_inputs(&a)?;
            emit(
                &a.output,
                &commands::confset(&config, &fit, &a.goal.request(), data.as_ref())?,
            )
        }
        Command::Test(a) => {
            let config = commands::load_config_file(&a.config)?;
            let datasets = commands::load_data_file(&a.data, &config)?;
            let req = TestRequest {
                comparison: a.comparison.map(Into::into),
                method: a.method.map(|m| match m {
                    MethodArg::ClusterT => TestMethod::ClusterT,
                    MethodArg::WaldSandwich => TestMethod::WaldSandwich,
                }),
            };
            let result = commands::test(&config, &datasets, &req)?;
            if let Some(alpha) = a.alpha {
                eprintln!(
                    "{} at alpha = {alpha}",
                    if result.rejects(alpha) {
                        "reject"
                    } else {
                        "do not reject"
                    }
                );
            }
            emit(&a.output, &result)
        }
        Command::Project(a) => {
            let components = match &a.data {
                Some(path) => commands::parse_projection_table(&commands::read_text(path)?)?,
                None => Vec::new(),
            };
            let req = ProjectRequest {
                baseline: a.baseline,
                odds_ratio: a.odds_ratio,
                dose: a.dose,
                components,
            };
            emit(&a.output, &commands::project(&req)?)
        }
        Command::Power(a) => {
            let req = PowerRequest {
                p0: a.p0,
                p1: a.p1,
                n_per_arm: a.n_per_arm,
                cluster_size: a.cluster_size,
                icc: a.icc,
                alpha: a.alpha,
            };
            emit(&a.output, &commands::power(&req)?)
        }
        Command::RunStage(a) => {
            let config = commands::load_config_file(&a.config)?;
            let datasets = commands::load_data_file(&a.data, &config)?;
            let req = StageRequest {
                stage: a.stage,
                previous: a.previous.as_ref().map(|p| p.0.clone()),
                goal: a.goal.request(),
            };
            emit(&a.output, &commands::run_stage(&config, &datasets, &req)?)
        }
        Command::Final(a) => {
            let config = commands::load_config_file(&a.config)?;
            let datasets = commands::load_data_file(&a.data, &config)?;
            let req = FinalRequest {
                goal: a.goal.request(),
                subgroups: a.subgroups.clone(),
                comparison: a.comparison.map(Into::into),
            };
            let report = commands::final_report(&config, &datasets, &req)?;
            if a.text {
                emit_text(&a.output, &report.render_text(&config))
            } else {
                emit(&a.output, &report)
            }
        }
        Command::CostCurve(a) => {
            let config = commands::load_config_file(&a.config)?;
            emit(&a.output, &commands::cost_curve_for(&config, &a.component)?)
        }
        Command::Simulate(a) => {
            let scenario = SimulationScenario::from_json(&commands::read_text(&a.scenario)?)
                .map_err(AppError::from)?;
            let seed = a.seed.unwrap_or(scenario.seed);
            let report = commands::simulate(&scenario, a.reps, seed, a.alpha)?;
            if a.csv {
                let text = format!(
                    "{}\n{}\n",
                    OcReport::csv_header(&scenario.config.component_names()),
                    report.csv_row()
                );
                emit_text(&a.output, &text)
            } else {
                emit(&a.output, &report)
            }
        }
        Command::Serve(a) => {
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| AppError::new(crate::error::ErrorClass::Data, "io", e.to_string()))?;
            runtime.block_on(async {
                let state = crate::api::AppState::new();
                if let Some(path) = &a.config {
                    let config = commands::load_config_file(path)?;
                    let id = state.create_session(config).await;
                    eprintln!("session {id}");
                }
                crate::api::serve(state, a.port).await.map_err(|e| {
                    AppError::new(
                        crate::error::ErrorClass::Data,
                        "io",
                        format!("port {}: {e}", a.port),
                    )
                })
            })
        }
    }
}
