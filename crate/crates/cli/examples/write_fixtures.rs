//! Writes the worked-example configuration, two simulation scenarios and one
//! simulated three-stage data set into a directory (default `fixtures`).

use std::fs;
use std::path::PathBuf;

use lago_core::optimizer::OptimizationCriteria;
use lago_core::simulator::{
    simulate_trial, CovariateDistribution, SimulationScenario, TrueCoefficients,
};
use lago_core::trial_model::write_observations;
use lago_core::worked_example::*;
use lago_core::Package;

fn scenario(truth: TrueCoefficients) -> SimulationScenario {
    SimulationScenario {
        config: better_birth_config(),
        true_coefficients: truth,
        initial_package: Package::new(vec![3.0, 20.0]),
        clusters_per_stage: 60,
        trials_per_cluster: 100,
        dose_noise_sd: vec![0.7, 4.0],
        covariate_distribution: vec![CovariateDistribution {
            mean: MEAN_VOLUME,
            sd: 0.4,
        }],
        criteria: OptimizationCriteria::absolute(GOAL, vec![MEAN_VOLUME]),
        control_arm: true,
        control_fraction: 0.5,
        random_intercept_icc: None,
        target_package: Some(reported_optimum()),
        seed: 2024,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(&dir)?;

    let config = better_birth_config();
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    let derived = scenario(TrueCoefficients {
        intercept: derived_intercept(),
        components: derived_component_coefs(),
        covariates: derived_covariate_coefs(),
    });
    let null = scenario(TrueCoefficients {
        intercept: 0.3,
        components: vec![0.0, 0.0],
        covariates: vec![0.0],
    });
    fs::write(
        dir.join("scenario_derived.json"),
        serde_json::to_string_pretty(&derived)?,
    )?;
    fs::write(
        dir.join("scenario_null.json"),
        serde_json::to_string_pretty(&null)?,
    )?;

    let trial = simulate_trial(&derived, derived.seed)?;
    let mut csv = Vec::new();
    write_observations(&trial.datasets, &config, &mut csv)?;
    fs::write(dir.join("observations.csv"), csv)?;

    fs::write(
        dir.join("projection.csv"),
        "component,or_per_unit,dose\nlaunch,1.18,4\ncoaching,1.0354,36\n",
    )?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
