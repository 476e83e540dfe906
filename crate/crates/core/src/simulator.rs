//! Synthetic multi-stage trials and their operating characteristics.
//!
//! Replication `r` of a sweep with seed `s` runs with seed
//! `splitmix64(s + r * 0x9E3779B97F4A7C15)`, so any single replication can be
//! replayed on its own. Replications run in parallel and are aggregated as
//! integer counts, which keeps the report independent of scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::Package;
use crate::error::{LagoError, Result};
use crate::inference::Comparison;
use crate::optimizer::{enumerate_grid, OptimizationCriteria};
use crate::stage_engine::{
    final_analysis, recommend_next_stage, FinalReport, LagoDesign, Recommendation,
};
use crate::stats::expit;
use crate::trial_model::{ObservationRecord, Period, StageDataset, TrialConfig};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `r` in a sweep seeded with `seed`.
pub fn replication_seed(seed: u64, r: u64) -> u64 {
    splitmix64(seed.wrapping_add(r.wrapping_mul(GOLDEN_GAMMA)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCoefficients {
    pub intercept: f64,
    pub components: Vec<f64>,
    #[serde(default)]
    pub covariates: Vec<f64>,
}

impl TrueCoefficients {
    pub fn linear_predictor(&self, doses: &[f64], covariates: &[f64]) -> f64 {
        self.intercept
            + self
                .components
                .iter()
                .zip(doses)
                .map(|(b, x)| b * x)
                .sum::<f64>()
            + self
                .covariates
                .iter()
                .zip(covariates)
                .map(|(g, z)| g * z)
                .sum::<f64>()
    }

    pub fn probability(&self, doses: &[f64], covariates: &[f64]) -> f64 {
        expit(self.linear_predictor(doses, covariates))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateDistribution {
    pub mean: f64,
    pub sd: f64,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub config: TrialConfig,
    pub true_coefficients: TrueCoefficients,
    pub initial_package: Package,
    pub clusters_per_stage: usize,
    pub trials_per_cluster: u64,
    pub dose_noise_sd: Vec<f64>,
    #[serde(default)]
    pub covariate_distribution: Vec<CovariateDistribution>,
    pub criteria: OptimizationCriteria,
    /// Concurrent control arm; otherwise each cluster contributes a baseline row.
    #[serde(default = "default_true")]
    pub control_arm: bool,
    /// Fraction of each stage's clusters allocated to control.
    #[serde(default = "default_fraction")]
    pub control_fraction: f64,
    /// Target ICC of an optional normal random intercept per cluster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_intercept_icc: Option<f64>,
    /// Package `x*` whose inclusion in the final confidence set is counted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_package: Option<Package>,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationScenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn design(&self) -> LagoDesign {
        LagoDesign::new(
            self.config.clone(),
            self.criteria.clone(),
            self.initial_package.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.config.ensure_valid()?;
        self.criteria.validate()?;
        let m = self.config.components.len();
        let p = self.config.covariates.len();
        let dims = [
            (
                "true component coefficients",
                m,
                self.true_coefficients.components.len(),
            ),
            (
                "true covariate coefficients",
                p,
                self.true_coefficients.covariates.len(),
            ),
            ("dose noise sd", m, self.dose_noise_sd.len()),
            (
                "covariate distribution",
                p,
                self.covariate_distribution.len(),
            ),
            ("initial package", m, self.initial_package.len()),
        ];
        for (what, expected, actual) in dims {
            if expected != actual {
                return Err(LagoError::DimensionMismatch {
                    what: what.into(),
                    expected,
                    actual,
                });
            }
        }
        if !self.initial_package.in_bounds(&self.config) {
            return Err(LagoError::Domain(
                "initial package outside dose bounds".into(),
            ));
        }
        if let Some(x) = &self.target_package {
            if x.len() != m || !x.in_bounds(&self.config) {
                return Err(LagoError::Domain(
                    "target package outside dose bounds".into(),
                ));
            }
        }
        if self
            .dose_noise_sd
            .iter()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(LagoError::Domain("dose noise sd must be >= 0".into()));
        }
        if self
            .covariate_distribution
            .iter()
            .any(|d| !(d.sd >= 0.0) || !d.mean.is_finite())
        {
            return Err(LagoError::Domain("covariate sd must be >= 0".into()));
        }
        if self.trials_per_cluster < 1 {
            return Err(LagoError::Domain("trials_per_cluster must be >= 1".into()));
        }
        if self.control_arm {
            if !(self.control_fraction > 0.0 && self.control_fraction < 1.0) {
                return Err(LagoError::Domain(
                    "control_fraction must lie in (0, 1)".into(),
                ));
            }
            let control = self.control_clusters();
            if control == 0 || control == self.clusters_per_stage {
                return Err(LagoError::Domain(
                    "each stage needs both control and intervention clusters".into(),
                ));
            }
        } else if self.clusters_per_stage < 1 {
            return Err(LagoError::Domain("clusters_per_stage must be >= 1".into()));
        }
        if let Some(icc) = self.random_intercept_icc {
            if !(0.0..1.0).contains(&icc) {
                return Err(LagoError::Domain(format!("icc {icc} must lie in [0, 1)")));
            }
        }
        let mean_z: Vec<f64> = self.covariate_distribution.iter().map(|d| d.mean).collect();
        for x in enumerate_grid(&self.config)? {
            let p = self.true_coefficients.probability(&x.doses, &mean_z);
            if !(p > 0.0 && p < 1.0) {
                return Err(LagoError::Domain(format!(
                    "true probability {p} at {:?} is not inside (0, 1)",
                    x.doses
                )));
            }
        }
        Ok(())
    }

    fn control_clusters(&self) -> usize {
        (self.clusters_per_stage as f64 * self.control_fraction).round() as usize
    }

    fn comparison(&self) -> Comparison {
        if self.control_arm {
            Comparison::Arm
        } else {
            Comparison::Prepost
        }
    }
}

/// Delivered doses: planned plus normal noise, clipped to the bounds.
pub fn sample_actual_doses<R: Rng + ?Sized>(
    planned: &Package,
    noise_sd: &[f64],
    config: &TrialConfig,
    rng: &mut R,
) -> Package {
    let doses = planned
        .doses
        .iter()
        .zip(noise_sd)
        .zip(&config.components)
        .map(|((&x, &sd), c)| {
            let draw = if sd > 0.0 {
                Normal::new(0.0, sd).expect("finite sd").sample(rng)
            } else {
                0.0
            };
            (x + draw).clamp(c.lower, c.upper)
        })
        .collect();
    Package::new(doses)
}

/// Logit-scale random-intercept sd implied by a latent-variable ICC.
fn random_intercept_sd(icc: f64) -> f64 {
    let logistic_var = std::f64::consts::PI.powi(2) / 3.0;
    (icc * logistic_var / (1.0 - icc)).sqrt()
}

fn draw_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    Binomial::new(n, p)
        .expect("probability in [0, 1]")
        .sample(rng)
}

fn generate_stage<R: Rng + ?Sized>(
    scenario: &SimulationScenario,
    stage: usize,
    planned: &Package,
    rng: &mut R,
) -> Result<StageDataset> {
    let n = scenario.clusters_per_stage;
    let mut is_control = vec![false; n];
    if scenario.control_arm {
        for c in is_control.iter_mut().take(scenario.control_clusters()) {
            *c = true;
        }
        is_control.shuffle(rng);
    }
    let re_sd = scenario
        .random_intercept_icc
        .map(random_intercept_sd)
        .unwrap_or(0.0);
    let zero = vec![0.0; scenario.config.components.len()];
    let truth = &scenario.true_coefficients;
    let trials = scenario.trials_per_cluster;

    let mut records = Vec::with_capacity(2 * n);
    for (j, &control) in is_control.iter().enumerate() {
        let cluster_id = format!("s{stage}c{j}");
        let covariates: Vec<f64> = scenario
            .covariate_distribution
            .iter()
            .map(|d| {
                if d.sd > 0.0 {
                    Normal::new(d.mean, d.sd).expect("finite sd").sample(rng)
                } else {
                    d.mean
                }
            })
            .collect();
        let shift = if re_sd > 0.0 {
            Normal::new(0.0, re_sd).expect("finite sd").sample(rng)
        } else {
            0.0
        };
        let mut push = |period: Period, doses: Vec<f64>, rng: &mut R| {
            let p = expit(truth.linear_predictor(&doses, &covariates) + shift);
            records.push(ObservationRecord {
                stage,
                cluster_id: cluster_id.clone(),
                period,
                doses,
                covariates: covariates.clone(),
                events: draw_binomial(rng, trials, p),
                trials,
            });
        };
        if control {
            push(Period::Control, zero.clone(), rng);
        } else {
            if !scenario.control_arm {
                push(Period::Baseline, zero.clone(), rng);
            }
            let actual =
                sample_actual_doses(planned, &scenario.dose_noise_sd, &scenario.config, rng);
            push(Period::Intervention, actual.doses, rng);
        }
    }
    StageDataset::new(stage, records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrial {
    pub seed: u64,
    pub datasets: Vec<StageDataset>,
    /// Packages planned for stages `1..=K`.
    pub planned: Vec<Package>,
    pub recommendations: Vec<Recommendation>,
    pub report: FinalReport,
    pub notes: Vec<String>,
}

/// Runs one full trial: stage 1 at the initial package, each later stage at
/// the engine's recommendation, then the final analysis.
///
/// A failed recommendation keeps the previous plan and adds a note; a failed
/// final analysis is returned as the error.
pub fn simulate_trial(scenario: &SimulationScenario, seed: u64) -> Result<SimulatedTrial> {
    let design = scenario.design();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_max = scenario.config.num_stages;
    let mut datasets = Vec::with_capacity(k_max);
    let mut planned = vec![scenario.initial_package.clone()];
    let mut recommendations = Vec::new();
    let mut notes = Vec::new();

    for k in 1..=k_max {
        let current = planned.last().expect("non-empty").clone();
        datasets.push(generate_stage(scenario, k, &current, &mut rng)?);
        if k < k_max {
            match recommend_next_stage(&design, &datasets, k, Some(&current)) {
                Ok(rec) => {
                    planned.push(rec.package.clone());
                    recommendations.push(rec);
                }
                Err(e) => {
                    notes.push(format!(
                        "stage {} plan carried forward after {}: {e}",
                        k + 1,
                        e.kind()
                    ));
                    planned.push(current);
                }
            }
        }
    }
    let report = final_analysis(&design, &datasets, &[], Some(scenario.comparison()))?;
    Ok(SimulatedTrial {
        seed,
        datasets,
        planned,
        recommendations,
        report,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcReport {
    pub replications: usize,
    pub completed: usize,
    pub failed: usize,
    /// Failure counts by error kind.
    pub failures: BTreeMap<String, usize>,
    pub alpha: f64,
    pub level: f64,
    pub rejections: usize,
    pub rejection_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_rate: Option<f64>,
    pub goal_attainment_rate: f64,
    pub mean_package: Vec<f64>,
    pub sd_package: Vec<f64>,
    pub runtime_seconds: f64,
}

impl OcReport {
    pub fn csv_header(component_names: &[String]) -> String {
        let mut cols = vec![
            "replications".to_string(),
            "completed".into(),
            "failed".into(),
            "alpha".into(),
            "level".into(),
            "rejection_rate".into(),
            "coverage_rate".into(),
            "goal_attainment_rate".into(),
        ];
        for n in component_names {
            cols.push(format!("mean_{n}"));
            cols.push(format!("sd_{n}"));
        }
        cols.push("runtime_seconds".into());
        cols.join(",")
    }

    /// One CSV row matching [`OcReport::csv_header`].
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.replications.to_string(),
            self.completed.to_string(),
            self.failed.to_string(),
            self.alpha.to_string(),
            self.level.to_string(),
            self.rejection_rate.to_string(),
            self.coverage_rate
                .map(|c| c.to_string())
                .unwrap_or_default(),
            self.goal_attainment_rate.to_string(),
        ];
        for (m, s) in self.mean_package.iter().zip(&self.sd_package) {
            cols.push(m.to_string());
            cols.push(s.to_string());
        }
        cols.push(format!("{:.3}", self.runtime_seconds));
        cols.join(",")
    }
}

struct Outcome {
    rejected: bool,
    covered: Option<bool>,
    attained: bool,
    package: Vec<f64>,
}

fn replicate(
    scenario: &SimulationScenario,
    seed: u64,
    alpha: f64,
    mean_z: &[f64],
) -> Result<Outcome> {
    let trial = simulate_trial(scenario, seed)?;
    let report = &trial.report;
    let package = report.optimal.package.doses.clone();
    let goal = report.optimal.constraints.effective_goal;
    Ok(Outcome {
        rejected: report.overall_test.rejects(alpha),
        covered: scenario
            .target_package
            .as_ref()
            .map(|x| report.confidence_set.contains(x)),
        attained: scenario.true_coefficients.probability(&package, mean_z) >= goal,
        package,
    })
}

/// Operating characteristics over `reps` replications.
pub fn operating_characteristics(
    scenario: &SimulationScenario,
    reps: usize,
    seed: u64,
    alpha: f64,
) -> Result<OcReport> {
    if reps < 1 {
        return Err(LagoError::Domain("reps must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LagoError::Domain(format!(
            "alpha {alpha} must lie in (0, 1)"
        )));
    }
    scenario.validate()?;
    let start = Instant::now();
    let profile = &scenario.criteria.covariate_profile;
    let outcomes: Vec<Result<Outcome>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| replicate(scenario, replication_seed(seed, r), alpha, profile))
        .collect();

    let m = scenario.config.components.len();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let (mut completed, mut rejections, mut covered, mut attained) =
        (0usize, 0usize, 0usize, 0usize);
    let mut packages = Vec::new();
    for o in &outcomes {
        match o {
            Ok(o) => {
                completed += 1;
                rejections += o.rejected as usize;
                covered += o.covered.unwrap_or(false) as usize;
                attained += o.attained as usize;
                packages.push(o.package.clone());
            }
            Err(e) => *failures.entry(e.kind().to_string()).or_default() += 1,
        }
    }
    let rate = |count: usize| {
        if completed == 0 {
            f64::NAN
        } else {
            count as f64 / completed as f64
        }
    };
    let n = packages.len() as f64;
    let mean_package: Vec<f64> = (0..m)
        .map(|j| packages.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let sd_package: Vec<f64> = (0..m)
        .map(|j| {
            if packages.len() < 2 {
                0.0
            } else {
                let ss: f64 = packages
                    .iter()
                    .map(|p| (p[j] - mean_package[j]).powi(2))
                    .sum();
                (ss / (n - 1.0)).sqrt()
            }
        })
        .collect();

    Ok(OcReport {
        replications: reps,
        completed,
        failed: reps - completed,
        failures,
        alpha,
        level: scenario.criteria.level,
        rejections,
        rejection_rate: rate(rejections),
        coverage_rate: scenario.target_package.as_ref().map(|_| rate(covered)),
        goal_attainment_rate: rate(attained),
        mean_package,
        sd_package,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
