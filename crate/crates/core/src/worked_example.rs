//! The two-component maternal-care worked example used throughout the docs and
//! tests: launch duration (1-5 days) and coaching visits (1-40), adjusted for
//! facility birth volume in hundreds of births per month, with cubic costs.
//!
//! The odds ratios are those of the final stage analysis (1.18 per launch day,
//! 1.19 per 5 coaching visits, 0.82 per 100 births). The intercept is solved
//! so that 4 launch days and 36 visits at 175 births/month predicts exactly
//! 0.80; it equals -0.18094 to five decimals.

use crate::cost_model::{CostModel, Package};
use crate::outcome_model::{CovMatrix, OutcomeFit};
use crate::stats::logit;
use crate::trial_model::{ComponentSpec, CovariateSpec, TrialConfig};

pub const LAUNCH_OR_PER_DAY: f64 = 1.18;
pub const COACHING_OR_PER_5_VISITS: f64 = 1.19;
pub const VOLUME_OR_PER_100_BIRTHS: f64 = 0.82;
pub const MEAN_VOLUME: f64 = 1.75;
pub const LOW_VOLUME: f64 = 1.30;
pub const GOAL: f64 = 0.80;

pub fn better_birth_config() -> TrialConfig {
    TrialConfig {
        components: vec![
            ComponentSpec {
                name: "launch".into(),
                unit: "days".into(),
                lower: 1.0,
                upper: 5.0,
                step: 1.0,
                cost_poly: [1700.0, -950.0, 220.0],
                expected_or_per_unit: Some(LAUNCH_OR_PER_DAY),
                report_scale: 1.0,
            },
            ComponentSpec {
                name: "coaching".into(),
                unit: "visits".into(),
                lower: 1.0,
                upper: 40.0,
                step: 1.0,
                cost_poly: [380.0, -24.0, 0.6],
                expected_or_per_unit: Some(COACHING_OR_PER_5_VISITS.powf(0.2)),
                report_scale: 5.0,
            },
        ],
        covariates: vec![CovariateSpec {
            name: "volume".into(),
            reference_value: MEAN_VOLUME,
        }],
        num_stages: 3,
        icc: Some(0.062),
        currency_label: "USD".into(),
        fixed_cost: 0.0,
    }
}

pub fn better_birth_cost() -> CostModel {
    CostModel::from_config(&better_birth_config())
}

/// Log-odds slopes per raw unit: `(launch per day, coaching per visit)`.
pub fn derived_component_coefs() -> Vec<f64> {
    vec![LAUNCH_OR_PER_DAY.ln(), COACHING_OR_PER_5_VISITS.ln() / 5.0]
}

pub fn derived_covariate_coefs() -> Vec<f64> {
    vec![VOLUME_OR_PER_100_BIRTHS.ln()]
}

pub fn reported_optimum() -> Package {
    Package::new(vec![4.0, 36.0])
}

/// Intercept placing the reported optimum exactly at the goal.
pub fn derived_intercept() -> f64 {
    let b = derived_component_coefs();
    let g = derived_covariate_coefs();
    logit(GOAL) - (4.0 * b[0] + 36.0 * b[1] + MEAN_VOLUME * g[0])
}

/// Fit carrying the derived coefficients and the given covariance.
pub fn derived_fit(vcov: CovMatrix) -> OutcomeFit {
    OutcomeFit::from_coefficients(
        &better_birth_config(),
        derived_intercept(),
        derived_component_coefs(),
        derived_covariate_coefs(),
        vcov,
    )
    .expect("dimensions match the worked-example config")
}
