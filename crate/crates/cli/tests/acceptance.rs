//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::Instant;

use common::*;
use lago_core::cost_model::total_cost;
use lago_core::inference::{project_outcome, ProjectionInput};
use lago_core::optimizer::{
    confidence_set, optimize_package, OptimizationCriteria, OptimizationStatus,
};
use lago_core::outcome_model::{fit_logistic, CovMatrix, LogisticDesign, VarianceKind};
use lago_core::simulator::{
    operating_characteristics, simulate_trial, SimulationScenario, TrueCoefficients,
};
use lago_core::stats::expit;
use lago_core::trial_model::{CombinedDataset, ObservationRecord, Period};
use lago_core::worked_example::*;
use lago_core::Package;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_regression() -> Check {
    let cost = better_birth_cost();
    let cases = [
        ([4.0, 36.0], 16_249.6),
        ([1.0, 16.0], 3_363.6),
        ([1.0, 36.0], 11_539.6),
        ([4.0, 33.0], 13_646.2),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (doses, expected) in cases {
        let got = total_cost(&cost, &Package::new(doses.to_vec())).map_err(|e| e.to_string())?;
        ok &= (got - expected).abs() < 1e-6;
        detail.push(format!("({},{})={got:.4}", doses[0], doses[1]));
    }
    ensure(ok, detail.join(" "))
}

fn projection_regression() -> Check {
    let cases = [(0.22, 1.83, 0.34), (0.22, 5.31, 0.60), (0.57, 1.53, 0.67)];
    let mut detail = Vec::new();
    let mut ok = true;
    for (baseline, or, expected) in cases {
        let input = [ProjectionInput {
            name: "package".into(),
            or_per_unit: or,
            dose: 1.0,
        }];
        let got = project_outcome(baseline, &input)
            .map_err(|e| e.to_string())?
            .projected_rate;
        ok &= (got - expected).abs() <= 0.005;
        detail.push(format!("{baseline}x{or}={got:.4}"));
    }
    ensure(ok, detail.join(" "))
}

/// Exhaustive search with hand-written logistic and cubic arithmetic.
fn oracle_optimum() -> (f64, f64, f64) {
    let b0 = derived_intercept();
    let (b1, b2, g) = (1.18f64.ln(), 1.19f64.ln() / 5.0, 0.82f64.ln());
    let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
    for x1 in 1..=5 {
        for x2 in 1..=40 {
            let (x1, x2) = (x1 as f64, x2 as f64);
            let p = 1.0 / (1.0 + (-(b0 + b1 * x1 + b2 * x2 + g * 1.75)).exp());
            let c = 1700.0 * x1 - 950.0 * x1 * x1 + 220.0 * x1.powi(3) + 380.0 * x2
                - 24.0 * x2 * x2
                + 0.6 * x2.powi(3);
            if p >= 0.8 - 1e-9 && c < best.2 {
                best = (x1, x2, c);
            }
        }
    }
    best
}

fn derived_optimization() -> Check {
    let fit = derived_fit(CovMatrix::zeros(4));
    let criteria = OptimizationCriteria::absolute(GOAL, vec![MEAN_VOLUME]);
    let result = optimize_package(
        &fit,
        &better_birth_cost(),
        &criteria,
        &better_birth_config(),
    )
    .map_err(|e| e.to_string())?;
    let oracle = oracle_optimum();
    let detail = format!(
        "package {:?} cost {:.4}; oracle ({}, {}) {:.4}; intercept {:.5}",
        result.package.doses,
        result.cost,
        oracle.0,
        oracle.1,
        oracle.2,
        derived_intercept()
    );
    ensure(
        result.status == OptimizationStatus::Optimal
            && result.package == reported_optimum()
            && (result.cost - 16_249.6).abs() < 1e-6
            && (oracle.0, oracle.1) == (4.0, 36.0)
            && (oracle.2 - result.cost).abs() < 1e-9,
        detail,
    )
}

fn fit_recovery() -> Check {
    const TRUTH: [f64; 4] = [-0.6, 0.15, 0.03, -0.2];
    let config = better_birth_config();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let volume = Normal::new(1.75, 0.5).unwrap();
    let records = (0..5000)
        .map(|i| {
            let x1 = rng.random_range(1.0..=5.0);
            let x2 = rng.random_range(1.0..=40.0);
            let z = volume.sample(&mut rng);
            let eta = TRUTH[0] + TRUTH[1] * x1 + TRUTH[2] * x2 + TRUTH[3] * z;
            ObservationRecord {
                stage: 1,
                cluster_id: format!("c{i}"),
                period: Period::Intervention,
                doses: vec![x1, x2],
                covariates: vec![z],
                events: Binomial::new(20, expit(eta)).unwrap().sample(&mut rng),
                trials: 20,
            }
        })
        .collect();
    let data = CombinedDataset { upto: 1, records };
    let fit = fit_logistic(&data, &config).map_err(|e| e.to_string())?;
    let vcov = fit.vcov(VarianceKind::Robust);
    let max_z = fit
        .coefficients()
        .iter()
        .zip(TRUTH)
        .enumerate()
        .map(|(j, (b, t))| (b - t).abs() / vcov.get(j, j).sqrt())
        .fold(0.0, f64::max);

    let design = LogisticDesign::from_data(&data, &config).map_err(|e| e.to_string())?;
    let beta = DVector::from_vec(fit.coefficients());
    let grad_sup = design.gradient(&beta).amax();
    let displaced = &beta + DVector::from_vec(vec![0.05, -0.02, 0.003, 0.04]);
    let analytic = design.gradient(&displaced);
    let mut max_rel: f64 = 0.0;
    for j in 0..4 {
        let h = 1e-5 * displaced[j].abs().max(1.0);
        let (mut up, mut down) = (displaced.clone(), displaced.clone());
        up[j] += h;
        down[j] -= h;
        let fd = (design.log_likelihood(&up) - design.log_likelihood(&down)) / (2.0 * h);
        max_rel = max_rel.max((fd - analytic[j]).abs() / analytic[j].abs());
    }
    ensure(
        fit.converged && max_z < 3.0 && grad_sup < 1e-6 && max_rel < 1e-3,
        format!("max |z| {max_z:.3}, gradient {grad_sup:.2e}, finite-difference rel {max_rel:.2e}"),
    )
}

/// 30 clusters per arm per stage, 100 trials each, three stages.
fn acceptance_scenario(truth: TrueCoefficients, seed: u64) -> SimulationScenario {
    SimulationScenario {
        true_coefficients: truth,
        clusters_per_stage: 60,
        seed,
        ..derived_scenario()
    }
}

fn type_one_error() -> Check {
    let scenario = acceptance_scenario(
        TrueCoefficients {
            intercept: 0.3,
            components: vec![0.0, 0.0],
            covariates: vec![0.0],
        },
        2024,
    );
    let start = Instant::now();
    let oc = operating_characteristics(&scenario, 1000, scenario.seed, 0.05)
        .map_err(|e| e.to_string())?;
    let rate = oc.rejection_rate;
    ensure(
        oc.completed == 1000 && (0.035..=0.065).contains(&rate),
        format!(
            "rejection rate {rate:.3} over {} trials ({} failed) in {:.1}s",
            oc.completed,
            oc.failed,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn coverage() -> Check {
    let scenario = acceptance_scenario(
        TrueCoefficients {
            intercept: derived_intercept(),
            components: derived_component_coefs(),
            covariates: derived_covariate_coefs(),
        },
        2024,
    );
    let start = Instant::now();
    let oc = operating_characteristics(&scenario, 500, scenario.seed, 0.05)
        .map_err(|e| e.to_string())?;
    let rate = oc.coverage_rate.ok_or("no coverage computed")?;
    ensure(
        oc.completed == 500 && rate >= 0.93,
        format!(
            "coverage {rate:.3} of (4,36) over {} trials in {:.1}s",
            oc.completed,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn band_structure() -> Check {
    let config = better_birth_config();
    let cost = better_birth_cost();
    let criteria = OptimizationCriteria::absolute(GOAL, vec![MEAN_VOLUME]);
    let scenario = acceptance_scenario(
        TrueCoefficients {
            intercept: derived_intercept(),
            components: derived_component_coefs(),
            covariates: derived_covariate_coefs(),
        },
        2024,
    );
    let mut split = Vec::new();
    let mut members = 0usize;
    let runs = 50u64;
    for seed in 0..runs {
        let trial = simulate_trial(&scenario, seed).map_err(|e| e.to_string())?;
        let set = &trial.report.confidence_set;
        members += set.members.len();
        if set.bands_contiguous() != Some(true) {
            split.push(seed);
        }
    }
    let fit = derived_fit(CovMatrix::diagonal(&[0.04, 0.001, 0.0001, 0.01]));
    let fixed = confidence_set(&fit, &cost, &criteria, &config).map_err(|e| e.to_string())?;
    ensure(
        split.is_empty() && fixed.bands_contiguous() == Some(true),
        format!(
            "{runs} simulated trials, mean set size {:.1}, split bands in {:?}",
            members as f64 / runs as f64,
            split
        ),
    )
}

fn cli_api_equivalence() -> Check {
    let fx = Fixtures::new();
    let config = fx.path("config.json");
    let data = fx.path("data.csv");
    let stage1 = fx.data_upto(1);
    let goal_args = ["--goal", "0.8", "--at", "volume=1.75"];
    let goal_body = r#"{"goal":0.8,"at":{"volume":1.75}}"#;

    let with = |verb: &str, base: &[&str], extra: &[&str]| -> Vec<String> {
        let mut v = vec![verb.to_string()];
        v.extend(base.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let model = ["--config", config.as_str(), "--data", data.as_str()];
    let staged = ["--config", config.as_str(), "--data", stage1.as_str()];

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let api = Api::new();
        let id = api.session(&fx.config_json).await;
        api.call("POST", &format!("/api/sessions/{id}/data"), &fx.data_csv).await;
        let early = api.session(&fx.config_json).await;
        let stage1_csv = std::fs::read_to_string(&stage1).unwrap();
        api.call("POST", &format!("/api/sessions/{early}/data"), &stage1_csv).await;

        let pairs: Vec<(&str, Vec<String>, &str, String, String)> = vec![
            ("fit", with("fit", &model, &[]), "POST", format!("/api/sessions/{id}/fit"), String::new()),
            (
                "optimize",
                with("optimize", &model, &goal_args),
                "POST",
                format!("/api/sessions/{id}/optimize"),
                goal_body.into(),
            ),
            (
                "confset",
                with("confset", &model, &goal_args),
                "POST",
                format!("/api/sessions/{id}/confidence-set"),
                goal_body.into(),
            ),
            ("test", with("test", &model, &[]), "POST", format!("/api/sessions/{id}/test"), String::new()),
            (
                "project",
                with("project", &["--baseline", "0.57", "--or", "1.53"], &[]),
                "POST",
                "/api/project".into(),
                r#"{"baseline":0.57,"or":1.53}"#.into(),
            ),
            (
                "power",
                with("power", &["--p0", "0.22", "--p1", "0.34", "--n-per-arm", "486", "--cluster-size", "21", "--icc", "0.05"], &[]),
                "POST",
                "/api/power".into(),
                r#"{"p0":0.22,"p1":0.34,"n_per_arm":486,"cluster_size":21,"icc":0.05}"#.into(),
            ),
            (
                "run-stage",
                with("run-stage", &staged, &["--goal", "0.8", "--at", "volume=1.75", "--previous", "3,20"]),
                "POST",
                format!("/api/sessions/{early}/recommend"),
                r#"{"goal":0.8,"at":{"volume":1.75},"previous":[3,20]}"#.into(),
            ),
            (
                "final",
                with("final", &model, &["--goal", "0.8", "--at", "volume=1.75", "--subgroup", "low:volume=1.3"]),
                "POST",
                format!("/api/sessions/{id}/report"),
                r#"{"goal":0.8,"at":{"volume":1.75},"subgroups":[{"label":"low","at":{"volume":1.3}}]}"#.into(),
            ),
            (
                "final (stored goal)",
                with("final", &model, &goal_args),
                "GET",
                format!("/api/sessions/{id}/report"),
                String::new(),
            ),
            (
                "cost-curve",
                with("cost-curve", &["--config", config.as_str(), "--component", "coaching"], &[]),
                "GET",
                format!("/api/sessions/{id}/cost-curve?component=coaching"),
                String::new(),
            ),
        ];

        let mut mismatched = Vec::new();
        for (name, args, method, uri, body) in &pairs {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = lago(&args);
            let (status, response) = api.call(method, uri, body).await;
            let cli = stdout(&out);
            let same = out.status.success()
                && status.is_success()
                && cli.strip_suffix('\n') == Some(response.as_str());
            if !same {
                mismatched.push(name.to_string());
            }
        }
        ensure(
            mismatched.is_empty(),
            format!("{} pairs, mismatched: {:?}", pairs.len(), mismatched),
        )
    })
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("cost-function regression", cost_regression),
        ("projection regression", projection_regression),
        ("derived-scenario optimization", derived_optimization),
        ("fit recovery", fit_recovery),
        ("type I error preservation", type_one_error),
        ("confidence-set coverage", coverage),
        ("band structure", band_structure),
        ("CLI/API equivalence", cli_api_equivalence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {name}: {detail} [{:.2}s]",
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
