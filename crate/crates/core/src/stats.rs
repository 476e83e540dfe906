//! Small numeric helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{LagoError, Result};

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn standard_normal() -> Normal {
    Normal::standard()
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Upper-tail survival `1 - Phi(x)`, accurate in the far tail.
pub fn normal_sf(x: f64) -> f64 {
    standard_normal().sf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Two-sided critical value `z` with `P(|Z| <= z) = level`.
pub fn two_sided_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(LagoError::Domain(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }
    Ok(normal_quantile(1.0 - (1.0 - level) / 2.0))
}

/// Two-sided p-value of a Student t statistic.
pub fn student_t_two_sided(statistic: f64, df: f64) -> f64 {
    if statistic.is_nan() {
        return f64::NAN;
    }
    if statistic.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(statistic.abs())).clamp(0.0, 1.0)
}

pub fn normal_two_sided(statistic: f64) -> f64 {
    if statistic.is_infinite() {
        return 0.0;
    }
    (2.0 * normal_sf(statistic.abs())).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_expit_inverse() {
        for p in [1e-6, 0.22, 0.5, 0.8, 0.999] {
            assert!((expit(logit(p)) - p).abs() < 1e-12);
        }
        assert!((logit(0.22) + 1.265_666_373_331_276).abs() < 1e-12);
    }

    #[test]
    fn softplus_matches_naive_in_range() {
        for x in [-30.0, -2.0, 0.0, 1.5, 20.0] {
            assert!((softplus(x) - (1.0f64 + f64::exp(x)).ln()).abs() < 1e-12);
        }
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn critical_values() {
        assert!((two_sided_z(0.95).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(two_sided_z(1.0).is_err());
        assert!((normal_two_sided(1.959_963_984_540_054) - 0.05).abs() < 1e-9);
    }
}
