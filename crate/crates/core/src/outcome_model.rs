//! Logistic outcome model for grouped binomial data.
//!
//! The model is `logit p = b0 + b'x + g'z`, where `x` are the delivered
//! component doses and `z` the covariates. It is fitted by Newton's method
//! (iteratively reweighted least squares) on the grouped-binomial
//! log-likelihood. Two covariance estimates are kept: the inverse observed
//! information and the cluster sandwich
//!
//! ```text
//! V_cl = G/(G-1) * I^-1 (sum_g U_g U_g') I^-1
//! ```
//!
//! where `U_g` is the score contribution of cluster `g`.
//!
//! Predictions use the delta method on the linear predictor and map the
//! interval through `expit`, so the probability interval is the exact image
//! of the linear-predictor interval.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost_model::Package;
use crate::error::{LagoError, Result};
use crate::stats::{expit, softplus, two_sided_z};
use crate::trial_model::{CombinedDataset, Period, TrialConfig};

/// Which covariance matrix drives standard errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    #[default]
    Robust,
    Model,
}

/// Square covariance matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CovMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * dim],
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.values[i * diag.len() + i] = d;
        }
        m
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.dim + col]
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut values = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                values.push(0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        Self { dim, values }
    }

    /// `d' V d`.
    pub fn quad_form(&self, d: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.values[i * self.dim..(i + 1) * self.dim];
            acc += d[i] * row.iter().zip(d).map(|(v, x)| v * x).sum::<f64>();
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub component_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub intercept: f64,
    /// Log-odds per raw unit of each component.
    pub component_coefs: Vec<f64>,
    pub covariate_coefs: Vec<f64>,
    /// Over `(intercept, components..., covariates...)`.
    pub vcov_model: CovMatrix,
    pub vcov_robust: CovMatrix,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_sup_norm: f64,
    /// Display scale per component (odds ratios are reported per `scale` units).
    pub report_scales: Vec<f64>,
    /// Trial-weighted mean delivered dose over intervention rows.
    pub reference_doses: Vec<f64>,
    pub reference_covariates: Vec<f64>,
}

impl OutcomeFit {
    pub fn n_params(&self) -> usize {
        1 + self.component_coefs.len() + self.covariate_coefs.len()
    }

    /// Parameter vector `(intercept, components..., covariates...)`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.intercept);
        v.extend_from_slice(&self.component_coefs);
        v.extend_from_slice(&self.covariate_coefs);
        v
    }

    pub fn vcov(&self, kind: VarianceKind) -> &CovMatrix {
        match kind {
            VarianceKind::Robust => &self.vcov_robust,
            VarianceKind::Model => &self.vcov_model,
        }
    }

    pub fn odds_ratios(&self) -> Vec<f64> {
        self.component_coefs.iter().map(|b| b.exp()).collect()
    }

    /// Builds a fit from known coefficients, e.g. for what-if optimization.
    #[allow(clippy::too_many_arguments)]
    pub fn from_coefficients(
        config: &TrialConfig,
        intercept: f64,
        component_coefs: Vec<f64>,
        covariate_coefs: Vec<f64>,
        vcov: CovMatrix,
    ) -> Result<Self> {
        let m = config.components.len();
        let p = config.covariates.len();
        check_dim("component coefficients", m, component_coefs.len())?;
        check_dim("covariate coefficients", p, covariate_coefs.len())?;
        check_dim("covariance dimension", 1 + m + p, vcov.dim)?;
        Ok(Self {
            component_names: config.component_names(),
            covariate_names: config.covariate_names(),
            intercept,
            component_coefs,
            covariate_coefs,
            vcov_model: vcov.clone(),
            vcov_robust: vcov,
            n_rows: 0,
            n_clusters: 0,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            gradient_sup_norm: 0.0,
            report_scales: config.components.iter().map(|c| c.report_scale).collect(),
            reference_doses: config.components.iter().map(|c| c.lower).collect(),
            reference_covariates: config.reference_profile(),
        })
    }

    /// Linear predictor gradient `(1, x, z)`.
    fn design_row(&self, package: &Package, covariates: &[f64]) -> Result<Vec<f64>> {
        check_dim("package", self.component_coefs.len(), package.len())?;
        check_dim(
            "covariate profile",
            self.covariate_coefs.len(),
            covariates.len(),
        )?;
        let mut d = Vec::with_capacity(self.n_params());
        d.push(1.0);
        d.extend_from_slice(&package.doses);
        d.extend_from_slice(covariates);
        Ok(d)
    }

    pub fn linear_predictor(&self, package: &Package, covariates: &[f64]) -> Result<f64> {
        let d = self.design_row(package, covariates)?;
        Ok(d.iter().zip(self.coefficients()).map(|(a, b)| a * b).sum())
    }
}

fn check_dim(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LagoError::DimensionMismatch {
            what: what.into(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// Model matrix and responses of a grouped-binomial logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticDesign {
    pub x: DMatrix<f64>,
    pub events: DVector<f64>,
    pub trials: DVector<f64>,
    /// Dense cluster index per row.
    pub cluster: Vec<usize>,
    pub n_clusters: usize,
    pub column_names: Vec<String>,
}

impl LogisticDesign {
    pub fn from_data(data: &CombinedDataset, config: &TrialConfig) -> Result<Self> {
        let m = config.components.len();
        let p = config.covariates.len();
        let n = data.records.len();
        let cols = 1 + m + p;
        let mut x = DMatrix::zeros(n, cols);
        let mut events = DVector::zeros(n);
        let mut trials = DVector::zeros(n);
        let mut cluster_index: BTreeMap<&str, usize> = BTreeMap::new();
        for id in data.cluster_ids() {
            let next = cluster_index.len();
            cluster_index.insert(id, next);
        }
        let mut cluster = Vec::with_capacity(n);
        for (i, r) in data.records.iter().enumerate() {
            check_dim("record doses", m, r.doses.len())?;
            check_dim("record covariates", p, r.covariates.len())?;
            x[(i, 0)] = 1.0;
            for (j, &d) in r.doses.iter().enumerate() {
                x[(i, 1 + j)] = d;
            }
            for (j, &z) in r.covariates.iter().enumerate() {
                x[(i, 1 + m + j)] = z;
            }
            events[i] = r.events as f64;
            trials[i] = r.trials as f64;
            cluster.push(cluster_index[r.cluster_id.as_str()]);
        }
        let mut column_names = vec!["(intercept)".to_string()];
        column_names.extend(config.components.iter().map(|c| c.name.clone()));
        column_names.extend(config.covariates.iter().map(|z| z.name.clone()));
        Ok(Self {
            x,
            events,
            trials,
            cluster,
            n_clusters: cluster_index.len(),
            column_names,
        })
    }

    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.x * beta;
        eta.iter()
            .zip(self.events.iter().zip(self.trials.iter()))
            .map(|(&e, (&y, &n))| y * e - n * softplus(e))
            .sum()
    }

    /// Score vector `X'(y - n p)`.
    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let resid = self.residuals(beta);
        self.x.transpose() * resid
    }

    fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.x * beta;
        DVector::from_iterator(
            eta.len(),
            eta.iter()
                .zip(self.events.iter().zip(self.trials.iter()))
                .map(|(&e, (&y, &n))| y - n * expit(e)),
        )
    }

    /// Observed (= expected) information `X' W X` with `W = n p (1 - p)`.
    pub fn information(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let eta = &self.x * beta;
        let mut weighted = self.x.clone();
        for (i, (&e, &n)) in eta.iter().zip(self.trials.iter()).enumerate() {
            let p = expit(e);
            let w = n * p * (1.0 - p);
            weighted.row_mut(i).scale_mut(w);
        }
        self.x.transpose() * weighted
    }

    /// Per-cluster score sums, one column per cluster.
    fn cluster_scores(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let resid = self.residuals(beta);
        let mut scores = DMatrix::zeros(self.n_params(), self.n_clusters);
        for (i, &g) in self.cluster.iter().enumerate() {
            let r = resid[i];
            for j in 0..self.n_params() {
                scores[(j, g)] += self.x[(i, j)] * r;
            }
        }
        scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative log-likelihood change treated as converged.
    pub tolerance: f64,
    pub gradient_tolerance: f64,
    /// Coefficient magnitude above which a still-improving fit is declared separated.
    pub separation_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-8,
            gradient_tolerance: 1e-6,
            separation_threshold: 30.0,
        }
    }
}

/// Indices of components whose delivered dose is constant across `data`.
pub fn zero_variance_components(data: &CombinedDataset, config: &TrialConfig) -> Vec<usize> {
    (0..config.components.len())
        .filter(|&j| {
            let mut values = data.records.iter().map(|r| r.doses[j]);
            match values.next() {
                Some(first) => values.all(|v| v == first),
                None => true,
            }
        })
        .collect()
}

pub fn fit_logistic(data: &CombinedDataset, config: &TrialConfig) -> Result<OutcomeFit> {
    fit_logistic_with(data, config, &FitOptions::default())
}

pub fn fit_logistic_with(
    data: &CombinedDataset,
    config: &TrialConfig,
    options: &FitOptions,
) -> Result<OutcomeFit> {
    if data.is_empty() {
        return Err(LagoError::Precondition("no observations to fit".into()));
    }
    let total_events: u64 = data.records.iter().map(|r| r.events).sum();
    let total_trials: u64 = data.records.iter().map(|r| r.trials).sum();
    if total_events == 0 || total_events == total_trials {
        return Err(LagoError::NoOutcomeVariation(format!(
            "{total_events} events among {total_trials} trials"
        )));
    }
    if let Some(&j) = zero_variance_components(data, config).first() {
        return Err(LagoError::RankDeficient {
            column: config.components[j].name.clone(),
        });
    }
    for (j, z) in config.covariates.iter().enumerate() {
        let first = data.records[0].covariates.get(j).copied();
        if data
            .records
            .iter()
            .all(|r| r.covariates.get(j).copied() == first)
        {
            return Err(LagoError::RankDeficient {
                column: z.name.clone(),
            });
        }
    }

    let design = LogisticDesign::from_data(data, config)?;
    let k = design.n_params();

    let mut beta = DVector::zeros(k);
    let pooled = total_events as f64 / total_trials as f64;
    beta[0] = (pooled / (1.0 - pooled)).ln();
    let mut loglik = design.log_likelihood(&beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_sup = f64::INFINITY;

    while iterations < options.max_iterations {
        iterations += 1;
        let info = design.information(&beta);
        let score = design.gradient(&beta);
        let chol = info.cholesky().ok_or_else(|| LagoError::RankDeficient {
            column: "model matrix (collinear columns)".into(),
        })?;
        let delta = chol.solve(&score);

        let mut step = 1.0;
        let mut candidate = &beta + &delta;
        let mut cand_ll = design.log_likelihood(&candidate);
        let mut halvings = 0;
        while !(cand_ll >= loglik - 1e-12 * loglik.abs()) && halvings < 40 {
            step *= 0.5;
            candidate = &beta + &delta * step;
            cand_ll = design.log_likelihood(&candidate);
            halvings += 1;
        }

        let improvement = cand_ll - loglik;
        let rel_change = improvement.abs() / loglik.abs().max(1e-300);
        beta = candidate;
        loglik = cand_ll;

        if let Some((j, &value)) = beta
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, b)| b.abs() > options.separation_threshold)
        {
            if rel_change > options.tolerance {
                return Err(LagoError::Separation {
                    column: design.column_names[j].clone(),
                    value,
                });
            }
        }

        grad_sup = design.gradient(&beta).amax();
        let step_sup = (&delta * step).amax();
        if rel_change < options.tolerance
            && (grad_sup < options.gradient_tolerance || step_sup < 1e-12)
        {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LagoError::NonConvergence {
            iterations,
            last_iterate: beta.iter().copied().collect(),
        });
    }

    let info = design.information(&beta);
    let bread = info
        .clone()
        .cholesky()
        .ok_or_else(|| LagoError::RankDeficient {
            column: "model matrix (collinear columns)".into(),
        })?
        .inverse();
    let g = design.n_clusters;
    let robust = if g >= 2 {
        let scores = design.cluster_scores(&beta);
        let meat = &scores * scores.transpose();
        (&bread * meat * &bread) * (g as f64 / (g as f64 - 1.0))
    } else {
        bread.clone()
    };

    let m = config.components.len();
    let coefs: Vec<f64> = beta.iter().copied().collect();
    Ok(OutcomeFit {
        component_names: config.component_names(),
        covariate_names: config.covariate_names(),
        intercept: coefs[0],
        component_coefs: coefs[1..1 + m].to_vec(),
        covariate_coefs: coefs[1 + m..].to_vec(),
        vcov_model: CovMatrix::from_matrix(&bread),
        vcov_robust: CovMatrix::from_matrix(&robust),
        n_rows: data.len(),
        n_clusters: g,
        loglik,
        converged,
        iterations,
        gradient_sup_norm: grad_sup,
        report_scales: config.components.iter().map(|c| c.report_scale).collect(),
        reference_doses: reference_doses(data, m),
        reference_covariates: config.reference_profile(),
    })
}

fn reference_doses(data: &CombinedDataset, m: usize) -> Vec<f64> {
    let rows: Vec<_> = {
        let active: Vec<_> = data
            .records
            .iter()
            .filter(|r| r.period == Period::Intervention)
            .collect();
        if active.is_empty() {
            data.records.iter().collect()
        } else {
            active
        }
    };
    let total: f64 = rows.iter().map(|r| r.trials as f64).sum();
    (0..m)
        .map(|j| {
            rows.iter()
                .map(|r| r.trials as f64 * r.doses[j])
                .sum::<f64>()
                / total
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedOutcome {
    pub probability: f64,
    pub linear_predictor: f64,
    pub se_linear: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

/// Prediction with a delta-method interval from the cluster-robust covariance.
pub fn predict_outcome(
    fit: &OutcomeFit,
    package: &Package,
    covariates: &[f64],
    level: f64,
) -> Result<PredictedOutcome> {
    predict_outcome_with(fit, package, covariates, level, VarianceKind::Robust)
}

pub fn predict_outcome_with(
    fit: &OutcomeFit,
    package: &Package,
    covariates: &[f64],
    level: f64,
    variance: VarianceKind,
) -> Result<PredictedOutcome> {
    let z = two_sided_z(level)?;
    let d = fit.design_row(package, covariates)?;
    let eta: f64 = d.iter().zip(fit.coefficients()).map(|(a, b)| a * b).sum();
    let se = fit.vcov(variance).quad_form(&d).max(0.0).sqrt();
    Ok(PredictedOutcome {
        probability: expit(eta),
        linear_predictor: eta,
        se_linear: se,
        ci_lower: expit(eta - z * se),
        ci_upper: expit(eta + z * se),
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Component,
    Covariate,
}

/// One row of the component effect table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEffect {
    pub name: String,
    pub kind: TermKind,
    /// Units per reported odds ratio.
    pub scale: f64,
    pub odds_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Change in predicted outcome, in percentage points, for one reported
    /// unit above the reference package and profile.
    pub pp_effect: f64,
    pub pp_ci_lower: f64,
    pub pp_ci_upper: f64,
}

pub fn component_effect_table(fit: &OutcomeFit, level: f64) -> Result<Vec<ComponentEffect>> {
    component_effect_table_with(fit, level, VarianceKind::Robust)
}

pub fn component_effect_table_with(
    fit: &OutcomeFit,
    level: f64,
    variance: VarianceKind,
) -> Result<Vec<ComponentEffect>> {
    if !fit.converged {
        return Err(LagoError::Precondition("fit did not converge".into()));
    }
    let z = two_sided_z(level)?;
    let vcov = fit.vcov(variance);
    let coefs = fit.coefficients();
    let m = fit.component_coefs.len();
    let base_row = fit.design_row(
        &Package::new(fit.reference_doses.clone()),
        &fit.reference_covariates,
    )?;

    let terms = fit
        .component_names
        .iter()
        .zip(&fit.report_scales)
        .map(|(n, &s)| (n.clone(), TermKind::Component, s))
        .chain(
            fit.covariate_names
                .iter()
                .map(|n| (n.clone(), TermKind::Covariate, 1.0)),
        );

    let mut table = Vec::new();
    for (offset, (name, kind, scale)) in terms.enumerate() {
        let j = 1 + offset;
        let coef = coefs[j];
        let se = vcov.get(j, j).max(0.0).sqrt();

        let mut shifted = base_row.clone();
        shifted[j] += scale;
        let eta0: f64 = base_row.iter().zip(&coefs).map(|(a, b)| a * b).sum();
        let eta1 = eta0 + coef * scale;
        let (p0, p1) = (expit(eta0), expit(eta1));
        let grad: Vec<f64> = base_row
            .iter()
            .zip(&shifted)
            .map(|(d0, d1)| p1 * (1.0 - p1) * d1 - p0 * (1.0 - p0) * d0)
            .collect();
        let pp_se = vcov.quad_form(&grad).max(0.0).sqrt();
        let diff = p1 - p0;

        table.push(ComponentEffect {
            name,
            kind,
            scale,
            odds_ratio: (coef * scale).exp(),
            ci_lower: ((coef - z * se) * scale).exp(),
            ci_upper: ((coef + z * se) * scale).exp(),
            pp_effect: 100.0 * diff,
            pp_ci_lower: 100.0 * (diff - z * pp_se),
            pp_ci_upper: 100.0 * (diff + z * pp_se),
        });
    }
    debug_assert_eq!(table.len(), m + fit.covariate_coefs.len());
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_model::{ComponentSpec, CovariateSpec, ObservationRecord};
    use crate::worked_example::{better_birth_config, derived_fit};
    use proptest::prelude::*;

    fn row(cluster: &str, doses: Vec<f64>, z: f64, events: u64, trials: u64) -> ObservationRecord {
        ObservationRecord {
            stage: 1,
            cluster_id: cluster.into(),
            period: Period::Intervention,
            doses,
            covariates: vec![z],
            events,
            trials,
        }
    }

    fn combined(records: Vec<ObservationRecord>) -> CombinedDataset {
        CombinedDataset { upto: 1, records }
    }

    #[test]
    fn balanced_outcome_gives_zero_coefficients() {
        let mut records = Vec::new();
        for i in 0..12 {
            let d1 = 1.0 + (i % 5) as f64;
            let d2 = 3.0 * i as f64;
            records.push(row(&format!("c{i}"), vec![d1, d2], (i % 3) as f64, 1, 2));
        }
        let fit = fit_logistic(&combined(records), &better_birth_config()).unwrap();
        for c in fit.coefficients() {
            assert!(c.abs() < 1e-10, "{c}");
        }
        let p = predict_outcome(&fit, &Package::new(vec![4.0, 36.0]), &[1.75], 0.95).unwrap();
        assert!((p.probability - 0.5).abs() < 1e-10);
    }

    #[test]
    fn intercept_only_recovers_logit_of_proportion() {
        let config = TrialConfig {
            components: vec![],
            covariates: vec![],
            num_stages: 1,
            icc: None,
            currency_label: "USD".into(),
            fixed_cost: 0.0,
        };
        let records = vec![ObservationRecord {
            stage: 1,
            cluster_id: "a".into(),
            period: Period::Intervention,
            doses: vec![],
            covariates: vec![],
            events: 22,
            trials: 100,
        }];
        let fit = fit_logistic(&combined(records), &config).unwrap();
        assert!((fit.intercept - (0.22f64 / 0.78).ln()).abs() < 1e-9);
        assert!((fit.intercept + 1.2657).abs() < 1e-4);
    }

    #[test]
    fn zero_dose_variance_names_component() {
        let records = (0..6)
            .map(|i| row(&format!("c{i}"), vec![3.0, i as f64], i as f64, i, 10))
            .collect();
        match fit_logistic(&combined(records), &better_birth_config()) {
            Err(LagoError::RankDeficient { column }) => assert_eq!(column, "launch"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_events_rejected() {
        let records = (0..4)
            .map(|i| row("a", vec![i as f64, i as f64], i as f64, 5, 5))
            .collect();
        assert!(matches!(
            fit_logistic(&combined(records), &better_birth_config()),
            Err(LagoError::NoOutcomeVariation(_))
        ));
    }

    #[test]
    fn separated_data_detected() {
        let config = TrialConfig {
            components: vec![ComponentSpec {
                name: "x".into(),
                unit: String::new(),
                lower: 0.0,
                upper: 10.0,
                step: 1.0,
                cost_poly: [1.0, 0.0, 0.0],
                expected_or_per_unit: None,
                report_scale: 1.0,
            }],
            covariates: vec![],
            num_stages: 1,
            icc: None,
            currency_label: "USD".into(),
            fixed_cost: 0.0,
        };
        let records = (0..10)
            .map(|i| ObservationRecord {
                stage: 1,
                cluster_id: format!("c{i}"),
                period: Period::Intervention,
                doses: vec![i as f64],
                covariates: vec![],
                events: if i < 5 { 0 } else { 4 },
                trials: 4,
            })
            .collect();
        match fit_logistic(&combined(records), &config) {
            Err(LagoError::Separation { column, .. }) => assert_eq!(column, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn derived_prediction_at_reported_optimum() {
        let fit = derived_fit(CovMatrix::zeros(4));
        let p = predict_outcome(&fit, &Package::new(vec![4.0, 36.0]), &[1.75], 0.95).unwrap();
        assert!((p.probability - 0.8).abs() < 1e-12);
        assert_eq!(p.ci_lower, p.probability);
        assert_eq!(p.ci_upper, p.probability);
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let fit = derived_fit(CovMatrix::zeros(4));
        assert!(predict_outcome(&fit, &Package::new(vec![4.0]), &[1.75], 0.95).is_err());
        assert!(predict_outcome(&fit, &Package::new(vec![4.0, 1.0]), &[], 0.95).is_err());
    }

    #[test]
    fn effect_table_or_and_ci() {
        let config = TrialConfig {
            components: vec![ComponentSpec {
                name: "x".into(),
                unit: String::new(),
                lower: 0.0,
                upper: 1.0,
                step: 1.0,
                cost_poly: [0.0; 3],
                expected_or_per_unit: None,
                report_scale: 1.0,
            }],
            covariates: vec![],
            num_stages: 1,
            icc: None,
            currency_label: String::new(),
            fixed_cost: 0.0,
        };
        let fit = OutcomeFit::from_coefficients(
            &config,
            0.0,
            vec![0.0],
            vec![],
            CovMatrix::diagonal(&[0.0, 0.01]),
        )
        .unwrap();
        let t = component_effect_table(&fit, 0.95).unwrap();
        assert!((t[0].odds_ratio - 1.0).abs() < 1e-12);
        assert!((t[0].ci_lower - 0.822).abs() < 1e-3);
        assert!((t[0].ci_upper - 1.216).abs() < 1e-3);
    }

    #[test]
    fn effect_table_reports_per_scale_units() {
        let fit = derived_fit(CovMatrix::diagonal(&[0.0, 1e-4, 1e-6, 1e-4]));
        let t = component_effect_table(&fit, 0.95).unwrap();
        assert!((t[0].odds_ratio - 1.18).abs() < 1e-12);
        assert!((t[1].odds_ratio - 1.19).abs() < 1e-12);
        assert_eq!(t[1].scale, 5.0);
        assert!((t[2].odds_ratio - 0.82).abs() < 1e-12);
        assert!(t[0].pp_effect > 0.0 && t[2].pp_effect < 0.0);
        // independent recomputation of exp(coef * scale)
        for (row, (c, s)) in t
            .iter()
            .zip(fit.component_coefs.iter().zip(&fit.report_scales))
        {
            assert_eq!(row.odds_ratio, f64::exp(c * s));
        }
    }

    proptest! {
        #[test]
        fn ci_is_expit_image_of_eta_interval(
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            v in proptest::collection::vec(0.0f64..0.05, 4),
            x1 in 1.0f64..5.0, x2 in 1.0f64..40.0, z in 0.5f64..3.0,
            level in 0.5f64..0.99,
        ) {
            let config = better_birth_config();
            let fit = OutcomeFit::from_coefficients(&config, b[0], vec![b[1], b[2] / 10.0], vec![b[3]], CovMatrix::diagonal(&v)).unwrap();
            let p = predict_outcome(&fit, &Package::new(vec![x1, x2]), &[z], level).unwrap();
            let zc = two_sided_z(level).unwrap();
            prop_assert_eq!(p.ci_lower, expit(p.linear_predictor - zc * p.se_linear));
            prop_assert_eq!(p.ci_upper, expit(p.linear_predictor + zc * p.se_linear));
            prop_assert!(p.ci_lower <= p.probability && p.probability <= p.ci_upper);
        }

        #[test]
        fn positive_effects_are_monotone(
            b in proptest::collection::vec(0.01f64..0.3, 2),
            x1 in 1.0f64..4.0, x2 in 1.0f64..39.0, bump in 0.1f64..1.0,
        ) {
            let fit = OutcomeFit::from_coefficients(&better_birth_config(), -2.0, vec![b[0], b[1] / 10.0], vec![0.3], CovMatrix::zeros(4)).unwrap();
            let base = predict_outcome(&fit, &Package::new(vec![x1, x2]), &[1.0], 0.95).unwrap().probability;
            let up1 = predict_outcome(&fit, &Package::new(vec![x1 + bump, x2]), &[1.0], 0.95).unwrap().probability;
            let up2 = predict_outcome(&fit, &Package::new(vec![x1, x2 + bump]), &[1.0], 0.95).unwrap().probability;
            prop_assert!(up1 > base && up2 > base);
        }
    }

    #[test]
    fn covariate_reference_used_for_pp_effect() {
        let mut config = better_birth_config();
        config.covariates = vec![CovariateSpec {
            name: "volume".into(),
            reference_value: 1.3,
        }];
        let fit = OutcomeFit::from_coefficients(
            &config,
            0.0,
            vec![0.1, 0.01],
            vec![-0.2],
            CovMatrix::zeros(4),
        )
        .unwrap();
        assert_eq!(fit.reference_covariates, vec![1.3]);
    }
}
