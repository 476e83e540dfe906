//! Overall intervention-effect test, odds-ratio product projections, design
//! effect and two-proportion power.
//!
//! The overall test compares intervention rows with zero-dose comparison rows
//! and never looks at the component model, so re-optimizing the package
//! between stages leaves its null distribution untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::stats::{
    expit, logit, normal_cdf, normal_quantile, normal_two_sided, student_t_two_sided,
};
use crate::trial_model::{CombinedDataset, Period};

/// Cluster count per group below which the t-test is preferred.
pub const SMALL_SAMPLE_CLUSTERS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// Intervention rows against concurrent control-arm rows.
    Arm,
    /// Intervention rows against baseline-period rows.
    Prepost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ClusterT,
    WaldSandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub comparison: Comparison,
    pub statistic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub p_value: f64,
    /// Intervention minus comparison proportion.
    pub estimate: f64,
    pub intervention_rate: f64,
    pub comparison_rate: f64,
    pub n_clusters_intervention: usize,
    pub n_clusters_comparison: usize,
}

impl TestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `Arm` when the data carry control rows, otherwise `Prepost`.
pub fn default_comparison(data: &CombinedDataset) -> Comparison {
    if data.records.iter().any(|r| r.period == Period::Control) {
        Comparison::Arm
    } else {
        Comparison::Prepost
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    events: f64,
    trials: f64,
}

/// Per-cluster event and trial totals of each group, keyed by cluster id.
fn group_counts(
    data: &CombinedDataset,
    comparison: Comparison,
) -> (BTreeMap<&str, Counts>, BTreeMap<&str, Counts>) {
    let control_period = match comparison {
        Comparison::Arm => Period::Control,
        Comparison::Prepost => Period::Baseline,
    };
    let mut treated: BTreeMap<&str, Counts> = BTreeMap::new();
    let mut control: BTreeMap<&str, Counts> = BTreeMap::new();
    for r in &data.records {
        let target = if r.period == Period::Intervention {
            &mut treated
        } else if r.period == control_period {
            &mut control
        } else {
            continue;
        };
        let c = target.entry(r.cluster_id.as_str()).or_default();
        c.events += r.events as f64;
        c.trials += r.trials as f64;
    }
    (treated, control)
}

/// Two-sided test of the overall intervention effect.
///
/// With `method = None` the cluster t-test is used when either group has
/// fewer than 30 clusters and the sandwich Wald test otherwise.
pub fn overall_effect_test(
    data: &CombinedDataset,
    comparison: Comparison,
    method: Option<TestMethod>,
) -> Result<TestResult> {
    let (treated, control) = group_counts(data, comparison);
    if treated.is_empty() {
        return Err(LagoError::EmptyGroup("intervention".into()));
    }
    if control.is_empty() {
        return Err(LagoError::EmptyGroup(
            match comparison {
                Comparison::Arm => "control",
                Comparison::Prepost => "baseline",
            }
            .into(),
        ));
    }
    let method = method.unwrap_or(
        if treated.len() < SMALL_SAMPLE_CLUSTERS || control.len() < SMALL_SAMPLE_CLUSTERS {
            TestMethod::ClusterT
        } else {
            TestMethod::WaldSandwich
        },
    );
    let pooled = |g: &BTreeMap<&str, Counts>| {
        let (e, t) = g
            .values()
            .fold((0.0, 0.0), |(e, t), c| (e + c.events, t + c.trials));
        e / t
    };
    let (rate1, rate0) = (pooled(&treated), pooled(&control));

    let (statistic, df, estimate) = match method {
        TestMethod::ClusterT => cluster_t(&treated, &control)?,
        TestMethod::WaldSandwich => {
            let (z, diff) = wald_sandwich(&treated, &control, rate1, rate0);
            (z, None, diff)
        }
    };
    let p_value = match df {
        Some(df) => student_t_two_sided(statistic, df),
        None => normal_two_sided(statistic),
    };
    let p_value = if statistic == 0.0 { 1.0 } else { p_value };

    Ok(TestResult {
        method,
        comparison,
        statistic,
        df,
        p_value,
        estimate,
        intervention_rate: rate1,
        comparison_rate: rate0,
        n_clusters_intervention: treated.len(),
        n_clusters_comparison: control.len(),
    })
}

fn sorted_proportions(group: &BTreeMap<&str, Counts>) -> Vec<f64> {
    let mut v: Vec<f64> = group.values().map(|c| c.events / c.trials).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Pooled-variance two-sample t-test on cluster-level proportions.
fn cluster_t(
    treated: &BTreeMap<&str, Counts>,
    control: &BTreeMap<&str, Counts>,
) -> Result<(f64, Option<f64>, f64)> {
    for (name, g) in [("intervention", treated), ("comparison", control)] {
        if g.len() < 2 {
            return Err(LagoError::TooFewClusters {
                group: name.into(),
                clusters: g.len(),
                required: 2,
            });
        }
    }
    let a = sorted_proportions(treated);
    let b = sorted_proportions(control);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let (ma, mb) = (mean(&a), mean(&b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled_var = (ss(&a, ma) + ss(&b, mb)) / df;
    let se = (pooled_var * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    let t = if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / se
    };
    Ok((t, Some(df), diff))
}

/// Pooled proportion difference with a cluster-robust variance. Clusters
/// contributing to both groups (pre-post) enter with their joint influence.
fn wald_sandwich(
    treated: &BTreeMap<&str, Counts>,
    control: &BTreeMap<&str, Counts>,
    rate1: f64,
    rate0: f64,
) -> (f64, f64) {
    let n1: f64 = treated.values().map(|c| c.trials).sum();
    let n0: f64 = control.values().map(|c| c.trials).sum();
    let mut influence: BTreeMap<&str, f64> = BTreeMap::new();
    for (id, c) in treated {
        *influence.entry(id).or_default() += (c.events - rate1 * c.trials) / n1;
    }
    for (id, c) in control {
        *influence.entry(id).or_default() -= (c.events - rate0 * c.trials) / n0;
    }
    let g = influence.len() as f64;
    let mut terms: Vec<f64> = influence.values().map(|v| v * v).collect();
    terms.sort_by(f64::total_cmp);
    let correction = if g > 1.0 { g / (g - 1.0) } else { 1.0 };
    let var = correction * terms.iter().sum::<f64>();
    let diff = rate1 - rate0;
    let z = if diff == 0.0 {
        0.0
    } else if var == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / var.sqrt()
    };
    (z, diff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInput {
    #[serde(default)]
    pub name: String,
    pub or_per_unit: f64,
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub name: String,
    pub or_per_unit: f64,
    pub dose: f64,
    /// `or_per_unit ^ dose`.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub baseline_rate: f64,
    pub overall_or: f64,
    pub projected_rate: f64,
    pub contributions: Vec<Contribution>,
}

/// Projects the outcome rate from a baseline and per-unit odds ratios at
/// planned doses, multiplying the odds-ratio contributions.
pub fn project_outcome(baseline_rate: f64, components: &[ProjectionInput]) -> Result<Projection> {
    if !(baseline_rate > 0.0 && baseline_rate < 1.0) {
        return Err(LagoError::Domain(format!(
            "baseline rate {baseline_rate} must lie in (0, 1)"
        )));
    }
    let mut contributions = Vec::with_capacity(components.len());
    for c in components {
        if !(c.or_per_unit > 0.0) || !c.or_per_unit.is_finite() {
            return Err(LagoError::Domain(format!(
                "odds ratio {} for `{}` must be positive",
                c.or_per_unit, c.name
            )));
        }
        if !(c.dose >= 0.0) || !c.dose.is_finite() {
            return Err(LagoError::Domain(format!(
                "dose {} for `{}` must be non-negative",
                c.dose, c.name
            )));
        }
        contributions.push(Contribution {
            name: c.name.clone(),
            or_per_unit: c.or_per_unit,
            dose: c.dose,
            contribution: c.or_per_unit.powf(c.dose),
        });
    }
    let log_or: f64 = contributions
        .iter()
        .map(|c| c.or_per_unit.ln() * c.dose)
        .sum();
    Ok(Projection {
        baseline_rate,
        overall_or: log_or.exp(),
        projected_rate: expit(logit(baseline_rate) + log_or),
        contributions,
    })
}

/// `1 + (m - 1) * icc` for clusters of (mean) size `m`.
pub fn design_effect(cluster_size: f64, icc: f64) -> Result<f64> {
    if !(cluster_size >= 1.0) || !cluster_size.is_finite() {
        return Err(LagoError::Domain(format!(
            "cluster size {cluster_size} must be >= 1"
        )));
    }
    if !(0.0..1.0).contains(&icc) {
        return Err(LagoError::Domain(format!("icc {icc} must lie in [0, 1)")));
    }
    Ok(1.0 + (cluster_size - 1.0) * icc)
}

/// Normal-approximation power of the two-sided pooled two-proportion z-test
/// with `n_per_arm / design_effect` effective observations per arm.
pub fn power_two_proportions(
    p0: f64,
    p1: f64,
    n_per_arm: u64,
    cluster_size: f64,
    icc: f64,
    alpha: f64,
) -> Result<f64> {
    for (name, p) in [("p0", p0), ("p1", p1)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(LagoError::Domain(format!(
                "{name} = {p} must lie in (0, 1)"
            )));
        }
    }
    if n_per_arm < 1 {
        return Err(LagoError::Domain("n_per_arm must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LagoError::Domain(format!(
            "alpha {alpha} must lie in (0, 1)"
        )));
    }
    let n_eff = n_per_arm as f64 / design_effect(cluster_size, icc)?;
    let pbar = 0.5 * (p0 + p1);
    let se_null = (2.0 * pbar * (1.0 - pbar) / n_eff).sqrt();
    let se_alt = ((p0 * (1.0 - p0) + p1 * (1.0 - p1)) / n_eff).sqrt();
    let z = normal_quantile(1.0 - alpha / 2.0);
    let d = p1 - p0;
    Ok(normal_cdf((d - z * se_null) / se_alt) + normal_cdf((-d - z * se_null) / se_alt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_model::ObservationRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Binomial, Distribution};

    fn rec(cluster: &str, period: Period, events: u64, trials: u64) -> ObservationRecord {
        ObservationRecord {
            stage: 1,
            cluster_id: cluster.into(),
            period,
            doses: vec![if period == Period::Intervention {
                1.0
            } else {
                0.0
            }],
            covariates: vec![],
            events,
            trials,
        }
    }

    fn data(records: Vec<ObservationRecord>) -> CombinedDataset {
        CombinedDataset { upto: 1, records }
    }

    #[test]
    fn identical_groups_give_unit_p_value() {
        let mut rows = Vec::new();
        for (i, e) in [3, 5, 7].iter().enumerate() {
            rows.push(rec(&format!("t{i}"), Period::Intervention, *e, 10));
            rows.push(rec(&format!("c{i}"), Period::Control, *e, 10));
        }
        for method in [TestMethod::ClusterT, TestMethod::WaldSandwich] {
            let t =
                overall_effect_test(&data(rows.clone()), Comparison::Arm, Some(method)).unwrap();
            assert_eq!(t.statistic, 0.0);
            assert_eq!(t.p_value, 1.0);
        }
    }

    #[test]
    fn two_by_two_matches_hand_formula() {
        let rows = vec![
            rec("a", Period::Intervention, 2, 10),
            rec("b", Period::Intervention, 4, 10),
            rec("c", Period::Control, 3, 10),
            rec("d", Period::Control, 5, 10),
        ];
        let t = overall_effect_test(&data(rows), Comparison::Arm, None).unwrap();
        assert_eq!(t.method, TestMethod::ClusterT);
        // means 0.3 and 0.4; each group variance 0.02; pooled 0.02; se = sqrt(0.02 * (1/2 + 1/2))
        let expected_t = (0.3 - 0.4) / (0.02f64).sqrt();
        assert!((t.statistic - expected_t).abs() < 1e-12);
        assert_eq!(t.df, Some(2.0));
        // t_2 two-sided tail: p = 1 - |t| / sqrt(2 + t^2)
        let p = 1.0 - expected_t.abs() / (2.0 + expected_t * expected_t).sqrt();
        assert!((t.p_value - p).abs() < 1e-9, "{} vs {p}", t.p_value);
    }

    #[test]
    fn empty_or_small_groups_rejected() {
        let rows = vec![rec("a", Period::Intervention, 2, 10)];
        assert!(matches!(
            overall_effect_test(&data(rows.clone()), Comparison::Arm, None),
            Err(LagoError::EmptyGroup(_))
        ));
        let mut rows2 = rows;
        rows2.push(rec("c", Period::Control, 3, 10));
        rows2.push(rec("d", Period::Control, 3, 12));
        assert!(matches!(
            overall_effect_test(
                &data(rows2.clone()),
                Comparison::Arm,
                Some(TestMethod::ClusterT)
            ),
            Err(LagoError::TooFewClusters { .. })
        ));
        assert!(overall_effect_test(
            &data(rows2),
            Comparison::Arm,
            Some(TestMethod::WaldSandwich)
        )
        .is_ok());
    }

    fn observed_rate_trial(seed: u64) -> Vec<ObservationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for (stage, (pi, pc)) in [(0.38, 0.21), (0.36, 0.17), (0.69, 0.40)]
            .iter()
            .enumerate()
        {
            for j in 0..10 {
                let e1 = Binomial::new(200, *pi).unwrap().sample(&mut rng);
                let e0 = Binomial::new(200, *pc).unwrap().sample(&mut rng);
                rows.push(rec(&format!("s{stage}t{j}"), Period::Intervention, e1, 200));
                rows.push(rec(&format!("s{stage}c{j}"), Period::Control, e0, 200));
            }
        }
        rows
    }

    #[test]
    fn observed_stage_rates_are_highly_significant() {
        let rows = observed_rate_trial(7);
        let d = data(rows.clone());
        let result = overall_effect_test(&d, Comparison::Arm, None).unwrap();
        assert_eq!(result.n_clusters_intervention, 30);
        assert!(result.p_value < 0.001, "{}", result.p_value);

        // oracle: permutation p-value of the cluster mean difference
        let props: Vec<(f64, bool)> = rows
            .iter()
            .map(|r| {
                (
                    r.events as f64 / r.trials as f64,
                    r.period == Period::Intervention,
                )
            })
            .collect();
        let diff = |labels: &[bool]| {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
            for ((p, _), &l) in props.iter().zip(labels) {
                if l {
                    s1 += p;
                    n1 += 1.0
                } else {
                    s0 += p;
                    n0 += 1.0
                }
            }
            s1 / n1 - s0 / n0
        };
        let observed: Vec<bool> = props.iter().map(|p| p.1).collect();
        let obs = diff(&observed).abs();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut labels = observed.clone();
        let mut extreme = 0;
        let perms = 2000;
        for _ in 0..perms {
            for i in (1..labels.len()).rev() {
                labels.swap(i, rng.random_range(0..=i));
            }
            if diff(&labels).abs() >= obs {
                extreme += 1;
            }
        }
        let perm_p = (extreme as f64 + 1.0) / (perms as f64 + 1.0);
        assert!(perm_p < 0.001, "{perm_p}");
    }

    #[test]
    fn prepost_uses_baseline_rows() {
        let mut rows = Vec::new();
        for i in 0..4 {
            let id = format!("f{i}");
            rows.push(rec(&id, Period::Baseline, 20 + i, 100));
            rows.push(rec(&id, Period::Intervention, 40 + 2 * i, 100));
        }
        let d = data(rows);
        assert_eq!(default_comparison(&d), Comparison::Prepost);
        let t = overall_effect_test(&d, Comparison::Prepost, None).unwrap();
        assert!(t.estimate > 0.0 && t.p_value < 0.01);
        assert!(overall_effect_test(&d, Comparison::Arm, None).is_err());
        let w =
            overall_effect_test(&d, Comparison::Prepost, Some(TestMethod::WaldSandwich)).unwrap();
        assert!(w.statistic > 0.0);
    }

    #[test]
    fn cluster_t_invariant_to_relabeling_and_scaling() {
        let rows = observed_rate_trial(3);
        let base = overall_effect_test(
            &data(rows.clone()),
            Comparison::Arm,
            Some(TestMethod::ClusterT),
        )
        .unwrap();
        let relabeled: Vec<_> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.cluster_id = format!("zz{}", r.cluster_id.chars().rev().collect::<String>());
                r
            })
            .collect();
        let scaled: Vec<_> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.events *= 3;
                r.trials *= 3;
                r
            })
            .collect();
        let a = overall_effect_test(
            &data(relabeled),
            Comparison::Arm,
            Some(TestMethod::ClusterT),
        )
        .unwrap();
        let b = overall_effect_test(&data(scaled), Comparison::Arm, Some(TestMethod::ClusterT))
            .unwrap();
        assert_eq!(base.p_value, a.p_value);
        assert_eq!(base.p_value, b.p_value);
    }

    fn single(or: f64) -> Vec<ProjectionInput> {
        vec![ProjectionInput {
            name: "package".into(),
            or_per_unit: or,
            dose: 1.0,
        }]
    }

    #[test]
    fn projections_match_reported_targets() {
        assert!(
            (project_outcome(0.22, &single(1.83)).unwrap().projected_rate - 0.34).abs() < 0.005
        );
        assert!(
            (project_outcome(0.22, &single(5.31)).unwrap().projected_rate - 0.60).abs() < 0.005
        );
        assert!(
            (project_outcome(0.57, &single(1.53)).unwrap().projected_rate - 0.67).abs() < 0.005
        );
    }

    #[test]
    fn projection_identity_and_domain() {
        let ones = vec![
            ProjectionInput {
                name: "a".into(),
                or_per_unit: 1.0,
                dose: 3.0,
            },
            ProjectionInput {
                name: "b".into(),
                or_per_unit: 1.0,
                dose: 0.5,
            },
        ];
        assert!((project_outcome(0.37, &ones).unwrap().projected_rate - 0.37).abs() < 1e-15);
        assert!(project_outcome(1.0, &ones).is_err());
        assert!(project_outcome(0.3, &single(-1.0)).is_err());
    }

    #[test]
    fn design_effect_values() {
        assert_eq!(design_effect(1.0, 0.3).unwrap(), 1.0);
        assert_eq!(design_effect(50.0, 0.0).unwrap(), 1.0);
        assert!((design_effect(100.0, 0.062).unwrap() - 7.138).abs() < 1e-12);
        assert!(design_effect(0.5, 0.1).is_err());
        assert!(design_effect(10.0, 1.0).is_err());
    }

    #[test]
    fn null_power_is_alpha() {
        let p = power_two_proportions(0.3, 0.3, 200, 10.0, 0.05, 0.05).unwrap();
        assert!((p - 0.05).abs() < 0.005);
    }

    #[test]
    fn inflating_n_by_design_effect_cancels() {
        let de = design_effect(21.0, 0.05).unwrap();
        assert_eq!(de, 2.0);
        let a = power_two_proportions(0.22, 0.34, 243, 1.0, 0.0, 0.05).unwrap();
        let b = power_two_proportions(0.22, 0.34, 486, 21.0, 0.05, 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn power_matches_monte_carlo() {
        let analytic = power_two_proportions(0.22, 0.34, 243, 1.0, 0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 243u64;
        let reps = 10_000;
        let z = 1.959_963_984_540_054;
        let mut rejections = 0;
        for _ in 0..reps {
            let x0 = Binomial::new(n, 0.22).unwrap().sample(&mut rng) as f64;
            let x1 = Binomial::new(n, 0.34).unwrap().sample(&mut rng) as f64;
            let (p0, p1) = (x0 / n as f64, x1 / n as f64);
            let pbar = (x0 + x1) / (2.0 * n as f64);
            let se = (pbar * (1.0 - pbar) * 2.0 / n as f64).sqrt();
            if ((p1 - p0) / se).abs() > z {
                rejections += 1;
            }
        }
        let mc = rejections as f64 / reps as f64;
        assert!((analytic - mc).abs() < 0.03, "analytic {analytic}, mc {mc}");
    }

    proptest! {
        #[test]
        fn power_monotone(
            p0 in 0.05f64..0.5, d in 0.0f64..0.3, n in 10u64..2000, icc in 0.0f64..0.3, m in 1.0f64..50.0
        ) {
            let p1 = p0 + d;
            let base = power_two_proportions(p0, p1, n, m, icc, 0.05).unwrap();
            prop_assert!(power_two_proportions(p0, p1, n + 50, m, icc, 0.05).unwrap() >= base - 1e-12);
            prop_assert!(power_two_proportions(p0, p1 + 0.05, n, m, icc, 0.05).unwrap() >= base - 1e-12);
            prop_assert!(power_two_proportions(p0, p1, n, m, icc + 0.1, 0.05).unwrap() <= base + 1e-12);
        }

        #[test]
        fn projection_order_free(
            ors in proptest::collection::vec((0.2f64..5.0, 0.0f64..4.0), 1..6),
            base in 0.01f64..0.99,
        ) {
            let inputs: Vec<ProjectionInput> = ors.iter().enumerate()
                .map(|(i, &(or, dose))| ProjectionInput { name: format!("c{i}"), or_per_unit: or, dose })
                .collect();
            let mut reversed = inputs.clone();
            reversed.reverse();
            let a = project_outcome(base, &inputs).unwrap();
            let b = project_outcome(base, &reversed).unwrap();
            let product: f64 = a.contributions.iter().map(|c| c.contribution).product();
            prop_assert!((a.projected_rate - b.projected_rate).abs() < 1e-12);
            prop_assert!((a.overall_or - product).abs() <= 1e-9 * product);
        }
    }
}
