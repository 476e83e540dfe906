#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use lago_cli::api::{router, AppState};
use lago_core::optimizer::OptimizationCriteria;
use lago_core::simulator::{
    simulate_trial, CovariateDistribution, SimulationScenario, TrueCoefficients,
};
use lago_core::trial_model::write_observations;
use lago_core::worked_example::*;
use lago_core::Package;
use tower::ServiceExt;

pub fn derived_scenario() -> SimulationScenario {
    SimulationScenario {
        config: better_birth_config(),
        true_coefficients: TrueCoefficients {
            intercept: derived_intercept(),
            components: derived_component_coefs(),
            covariates: derived_covariate_coefs(),
        },
        initial_package: Package::new(vec![3.0, 20.0]),
        clusters_per_stage: 40,
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
        seed: 11,
    }
}

pub struct Fixtures {
    pub dir: tempfile::TempDir,
    pub config_json: String,
    pub data_csv: String,
}

impl Fixtures {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scenario = derived_scenario();
        let config_json = serde_json::to_string(&scenario.config).unwrap();
        let trial = simulate_trial(&scenario, scenario.seed).unwrap();
        let mut csv = Vec::new();
        write_observations(&trial.datasets, &scenario.config, &mut csv).unwrap();
        let data_csv = String::from_utf8(csv).unwrap();
        std::fs::write(dir.path().join("config.json"), &config_json).unwrap();
        std::fs::write(dir.path().join("data.csv"), &data_csv).unwrap();
        std::fs::write(
            dir.path().join("scenario.json"),
            serde_json::to_string(&scenario).unwrap(),
        )
        .unwrap();
        Self {
            dir,
            config_json,
            data_csv,
        }
    }

    pub fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    /// Writes `data.csv` restricted to stages `1..=k`.
    pub fn data_upto(&self, k: usize) -> String {
        let mut lines = self.data_csv.lines();
        let header = lines.next().unwrap();
        let mut out = vec![header.to_string()];
        for line in lines {
            let stage: usize = line.split(',').next().unwrap().parse().unwrap();
            if stage <= k {
                out.push(line.to_string());
            }
        }
        let name = format!("data_upto_{k}.csv");
        std::fs::write(self.dir.path().join(&name), out.join("\n") + "\n").unwrap();
        self.path(&name)
    }
}

pub fn lago(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lago"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

pub fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub struct Api {
    pub app: axum::Router,
}

impl Api {
    pub fn new() -> Self {
        Self {
            app: router(AppState::new()),
        }
    }

    pub async fn call(&self, method: &str, uri: &str, body: &str) -> (StatusCode, String) {
        let request = Request::builder()
            .method(method)
            .uri(uri)
            .header("origin", "http://localhost:5173")
            .body(Body::from(body.to_string()))
            .unwrap();
        let response = self.app.clone().oneshot(request).await.unwrap();
        let status = response.status();
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    /// Creates a session, returning its id.
    pub async fn session(&self, config_json: &str) -> String {
        let (status, body) = self.call("POST", "/api/sessions", config_json).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        v["session_id"].as_str().unwrap().to_string()
    }
}
