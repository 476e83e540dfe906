//! Per-cluster implementation cost as a function of package intensity.

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::trial_model::TrialConfig;

/// Doses of every component, ordered as in the trial configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Package {
    pub doses: Vec<f64>,
}

impl Package {
    pub fn new(doses: Vec<f64>) -> Self {
        Self { doses }
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    /// True when every dose lies within its component bounds.
    pub fn in_bounds(&self, config: &TrialConfig) -> bool {
        self.doses.len() == config.components.len()
            && self
                .doses
                .iter()
                .zip(&config.components)
                .all(|(&d, c)| d >= c.lower && d <= c.upper)
    }

    /// Lexicographic comparison of dose vectors.
    pub fn lex_cmp(&self, other: &Package) -> std::cmp::Ordering {
        for (a, b) in self.doses.iter().zip(&other.doses) {
            match a.total_cmp(b) {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.doses.len().cmp(&other.doses.len())
    }
}

impl From<Vec<f64>> for Package {
    fn from(doses: Vec<f64>) -> Self {
        Self { doses }
    }
}

/// Additive cubic cost model: `fixed + sum_i (c1 x_i + c2 x_i^2 + c3 x_i^3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub polynomials: Vec<[f64; 3]>,
    #[serde(default)]
    pub fixed_cost: f64,
}

impl CostModel {
    pub fn from_config(config: &TrialConfig) -> Self {
        Self {
            polynomials: config.components.iter().map(|c| c.cost_poly).collect(),
            fixed_cost: config.fixed_cost,
        }
    }

    /// Constant unit prices, i.e. `c2 = c3 = 0` for every component.
    pub fn linear(unit_prices: &[f64]) -> Self {
        Self {
            polynomials: unit_prices.iter().map(|&p| [p, 0.0, 0.0]).collect(),
            fixed_cost: 0.0,
        }
    }

    pub fn component_cost(&self, index: usize, dose: f64) -> f64 {
        let [c1, c2, c3] = self.polynomials[index];
        dose * (c1 + dose * (c2 + dose * c3))
    }

    pub fn total_cost(&self, package: &Package) -> Result<f64> {
        if package.len() != self.polynomials.len() {
            return Err(LagoError::DimensionMismatch {
                what: "package".into(),
                expected: self.polynomials.len(),
                actual: package.len(),
            });
        }
        Ok(self.fixed_cost
            + package
                .doses
                .iter()
                .enumerate()
                .map(|(i, &x)| self.component_cost(i, x))
                .sum::<f64>())
    }
}

/// Free-function form of [`CostModel::total_cost`].
pub fn total_cost(model: &CostModel, package: &Package) -> Result<f64> {
    model.total_cost(package)
}

/// Cost under constant unit prices.
pub fn linear_cost(unit_prices: &[f64], package: &Package) -> Result<f64> {
    CostModel::linear(unit_prices).total_cost(package)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWarning {
    pub component: String,
    pub message: String,
}

/// Flags components whose cost is negative at a grid point or decreases
/// between consecutive grid points. Flat costs are allowed.
pub fn validate_cost_shape(model: &CostModel, config: &TrialConfig) -> Vec<CostWarning> {
    let mut warnings = Vec::new();
    for (i, spec) in config.components.iter().enumerate() {
        if i >= model.polynomials.len() {
            break;
        }
        let costs: Vec<(f64, f64)> = spec
            .grid()
            .into_iter()
            .map(|x| (x, model.component_cost(i, x)))
            .collect();
        if let Some((x, c)) = costs.iter().find(|(_, c)| *c < 0.0) {
            warnings.push(CostWarning {
                component: spec.name.clone(),
                message: format!("negative cost {c} at dose {x}"),
            });
        }
        if let Some(w) = costs.windows(2).find(|w| w[1].1 < w[0].1) {
            warnings.push(CostWarning {
                component: spec.name.clone(),
                message: format!(
                    "cost decreases from {} at dose {} to {} at dose {}",
                    w[0].1, w[0].0, w[1].1, w[1].0
                ),
            });
        }
    }
    warnings
}

/// `(dose, cost)` pairs over the grid of one component.
pub fn cost_curve(
    model: &CostModel,
    config: &TrialConfig,
    component: usize,
) -> Result<Vec<(f64, f64)>> {
    let spec = config
        .components
        .get(component)
        .ok_or_else(|| LagoError::Domain(format!("component index {component} out of range")))?;
    if component >= model.polynomials.len() {
        return Err(LagoError::DimensionMismatch {
            what: "cost model components".into(),
            expected: config.components.len(),
            actual: model.polynomials.len(),
        });
    }
    Ok(spec
        .grid()
        .into_iter()
        .map(|x| (x, model.component_cost(component, x)))
        .collect())
}
