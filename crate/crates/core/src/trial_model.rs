//! Trial configuration, observation records and stage-wise data ingestion.
//!
//! Observations are grouped-binomial rows: each row carries the delivered
//! doses of every component at one cluster in one period, the covariate
//! values of that cluster, and the count of events among the trials measured.
//! A row with `trials = 1` is a single Bernoulli outcome.
//!
//! The observation CSV layout is
//!
//! ```text
//! stage,cluster_id,period,dose_<c1>,...,dose_<cM>,cov_<z1>,...,cov_<zP>,events,trials
//! ```
//!
//! where the dose and covariate column names must match the configured
//! component and covariate names exactly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};

fn default_report_scale() -> f64 {
    1.0
}

fn default_currency() -> String {
    "USD".to_string()
}

/// One component of the intervention package.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
    /// Coefficients `(c1, c2, c3)` of `c1*x + c2*x^2 + c3*x^3`.
    pub cost_poly: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_or_per_unit: Option<f64>,
    /// Display scale for odds ratios, e.g. 5 for "per 5 visits".
    #[serde(default = "default_report_scale")]
    pub report_scale: f64,
}

impl ComponentSpec {
    /// Number of grid points `lower, lower + step, ...` not exceeding `upper`.
    pub fn grid_len(&self) -> usize {
        if !(self.step > 0.0) || self.upper < self.lower {
            return 0;
        }
        ((self.upper - self.lower) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_len();
        let snap = 1e-9 * self.upper.abs().max(1.0);
        (0..n)
            .map(|i| {
                let x = self.lower + i as f64 * self.step;
                if (x - self.upper).abs() <= snap {
                    self.upper
                } else {
                    x
                }
            })
            .collect()
    }

    pub fn cost_at(&self, dose: f64) -> f64 {
        let [c1, c2, c3] = self.cost_poly;
        dose * (c1 + dose * (c2 + dose * c3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    /// Default covariate value used when optimizing without an explicit profile.
    pub reference_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub num_stages: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icc: Option<f64>,
    #[serde(default = "default_currency")]
    pub currency_label: String,
    /// Per-cluster fixed cost added to every package.
    #[serde(default)]
    pub fixed_cost: f64,
}

impl TrialConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn component_names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn reference_profile(&self) -> Vec<f64> {
        self.covariates.iter().map(|c| c.reference_value).collect()
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    /// Fails with [`LagoError::InvalidConfig`] when validation reports violations.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_config(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(LagoError::InvalidConfig(report))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Lists every violation of the configuration invariants. Never fails.
pub fn validate_config(config: &TrialConfig) -> ValidationReport {
    let mut report = ValidationReport::default();

    if config.components.is_empty() {
        report.push("components", "at least one component is required");
    }
    let mut seen = HashSet::new();
    for (i, c) in config.components.iter().enumerate() {
        let field = format!("components[{i}]");
        if c.name.trim().is_empty() {
            report.push(&field, "empty name");
        } else if !seen.insert(c.name.as_str()) {
            report.push(&field, format!("duplicate component name `{}`", c.name));
        }
        if !c.lower.is_finite() || !c.upper.is_finite() {
            report.push(&field, "bounds must be finite");
        } else if c.lower > c.upper {
            report.push(&field, "lower > upper");
        }
        if !(c.step > 0.0) || !c.step.is_finite() {
            report.push(&field, "step must be > 0");
        }
        if c.cost_poly.iter().any(|v| !v.is_finite()) {
            report.push(&field, "cost coefficients must be finite");
        } else if c.step > 0.0
            && c.lower <= c.upper
            && c.grid().iter().any(|&x| !c.cost_at(x).is_finite())
        {
            report.push(&field, "cost is not finite on the dose grid");
        }
        if let Some(or) = c.expected_or_per_unit {
            if !(or > 0.0) || !or.is_finite() {
                report.push(&field, "expected_or_per_unit must be positive");
            }
        }
        if !(c.report_scale > 0.0) || !c.report_scale.is_finite() {
            report.push(&field, "report_scale must be positive");
        }
    }

    let mut seen = HashSet::new();
    for (i, z) in config.covariates.iter().enumerate() {
        let field = format!("covariates[{i}]");
        if z.name.trim().is_empty() {
            report.push(&field, "empty name");
        } else if !seen.insert(z.name.as_str()) {
            report.push(&field, format!("duplicate covariate name `{}`", z.name));
        }
        if !z.reference_value.is_finite() {
            report.push(&field, "reference_value must be finite");
        }
    }

    if config.num_stages < 1 {
        report.push("num_stages", "must be >= 1");
    }
    if let Some(icc) = config.icc {
        if !(0.0..1.0).contains(&icc) {
            report.push("icc", "must lie in [0, 1)");
        }
    }
    if !config.fixed_cost.is_finite() {
        report.push("fixed_cost", "must be finite");
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Control,
    Baseline,
    Intervention,
}

impl Period {
    /// Control and baseline periods are the zero-dose comparison periods.
    pub fn is_comparison(self) -> bool {
        !matches!(self, Period::Intervention)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Period::Control => "control",
            Period::Baseline => "baseline",
            Period::Intervention => "intervention",
        }
    }
}

impl std::str::FromStr for Period {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "control" => Ok(Period::Control),
            "baseline" => Ok(Period::Baseline),
            "intervention" => Ok(Period::Intervention),
            other => Err(format!(
                "unknown period `{other}` (expected control, baseline or intervention)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub stage: usize,
    pub cluster_id: String,
    pub period: Period,
    /// Delivered doses, one per component.
    pub doses: Vec<f64>,
    pub covariates: Vec<f64>,
    pub events: u64,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDataset {
    pub stage_index: usize,
    pub records: Vec<ObservationRecord>,
}

impl StageDataset {
    pub fn new(stage_index: usize, records: Vec<ObservationRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.stage != stage_index) {
            return Err(LagoError::Precondition(format!(
                "record for cluster `{}` has stage {} in dataset for stage {stage_index}",
                r.cluster_id, r.stage
            )));
        }
        Ok(Self {
            stage_index,
            records,
        })
    }
}

/// Records from stages `1..=upto`, in stage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedDataset {
    pub upto: usize,
    pub records: Vec<ObservationRecord>,
}

impl CombinedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cluster_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.cluster_id.as_str()).collect()
    }

    /// Pooled event rate over the control and baseline rows, if any.
    pub fn baseline_rate(&self) -> Option<f64> {
        let (events, trials) = self
            .records
            .iter()
            .filter(|r| r.period.is_comparison())
            .fold((0u64, 0u64), |(e, t), r| (e + r.events, t + r.trials));
        (trials > 0).then(|| events as f64 / trials as f64)
    }

    /// Mean number of trials per cluster (design-effect cluster size).
    pub fn mean_cluster_size(&self) -> f64 {
        let clusters = self.cluster_ids().len();
        if clusters == 0 {
            return 0.0;
        }
        let trials: u64 = self.records.iter().map(|r| r.trials).sum();
        trials as f64 / clusters as f64
    }
}

/// Concatenates the records of stages `1..=upto`.
pub fn combine_stages(
    datasets: &[StageDataset],
    upto: usize,
    num_stages: usize,
) -> Result<CombinedDataset> {
    if upto < 1 || upto > num_stages {
        return Err(LagoError::Domain(format!(
            "upto = {upto} outside [1, {num_stages}]"
        )));
    }
    let mut ordered: Vec<&StageDataset> = datasets
        .iter()
        .filter(|d| d.stage_index >= 1 && d.stage_index <= upto)
        .collect();
    ordered.sort_by_key(|d| d.stage_index);
    let records = ordered
        .into_iter()
        .flat_map(|d| d.records.iter().cloned())
        .collect();
    Ok(CombinedDataset { upto, records })
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Stage,
    Cluster,
    Period,
    Dose(usize),
    Covariate(usize),
    Events,
    Trials,
}

/// Canonical header for the observation CSV of `config`.
pub fn observation_header(config: &TrialConfig) -> Vec<String> {
    let mut header = vec![
        "stage".to_string(),
        "cluster_id".to_string(),
        "period".to_string(),
    ];
    header.extend(config.components.iter().map(|c| format!("dose_{}", c.name)));
    header.extend(config.covariates.iter().map(|z| format!("cov_{}", z.name)));
    header.push("events".to_string());
    header.push("trials".to_string());
    header
}

fn parse_err(line: u64, column: &str, message: impl Into<String>) -> LagoError {
    LagoError::Parse {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parses an observation CSV into one dataset per distinct stage, in stage order.
///
/// Line numbers in errors count the header as line 1.
pub fn load_observations<R: Read>(source: R, config: &TrialConfig) -> Result<Vec<StageDataset>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, "", e.to_string()))?
        .clone();

    let canonical = observation_header(config);
    let mut columns = Vec::with_capacity(headers.len());
    let mut seen = HashSet::new();
    for name in headers.iter() {
        let pos = canonical
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| parse_err(1, name, "unknown column"))?;
        if !seen.insert(pos) {
            return Err(parse_err(1, name, "duplicate column"));
        }
        let m = config.components.len();
        let p = config.covariates.len();
        columns.push(match pos {
            0 => Column::Stage,
            1 => Column::Cluster,
            2 => Column::Period,
            i if i < 3 + m => Column::Dose(i - 3),
            i if i < 3 + m + p => Column::Covariate(i - 3 - m),
            i if i == 3 + m + p => Column::Events,
            _ => Column::Trials,
        });
    }
    if let Some(missing) = canonical
        .iter()
        .enumerate()
        .find(|(i, _)| !seen.contains(i))
    {
        return Err(parse_err(1, missing.1, "missing column"));
    }

    let mut by_stage: BTreeMap<usize, Vec<ObservationRecord>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, "", e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let record = parse_row(&row, &columns, &headers, config, line)?;
        by_stage.entry(record.stage).or_default().push(record);
    }

    Ok(by_stage
        .into_iter()
        .map(|(stage_index, records)| StageDataset {
            stage_index,
            records,
        })
        .collect())
}

fn parse_row(
    row: &csv::StringRecord,
    columns: &[Column],
    headers: &csv::StringRecord,
    config: &TrialConfig,
    line: u64,
) -> Result<ObservationRecord> {
    let mut stage = 0usize;
    let mut cluster_id = String::new();
    let mut period = Period::Intervention;
    let mut doses = vec![0.0; config.components.len()];
    let mut covariates = vec![0.0; config.covariates.len()];
    let mut events = 0u64;
    let mut trials = 0u64;

    for ((field, column), name) in row.iter().zip(columns).zip(headers.iter()) {
        match *column {
            Column::Stage => {
                stage = field.parse().map_err(|_| {
                    parse_err(line, name, format!("`{field}` is not a stage number"))
                })?;
                if stage < 1 || stage > config.num_stages {
                    return Err(parse_err(
                        line,
                        name,
                        format!("stage {stage} outside [1, {}]", config.num_stages),
                    ));
                }
            }
            Column::Cluster => {
                if field.is_empty() {
                    return Err(parse_err(line, name, "empty cluster id"));
                }
                cluster_id = field.to_string();
            }
            Column::Period => {
                period = field
                    .parse()
                    .map_err(|m: String| parse_err(line, name, m))?;
            }
            Column::Dose(i) | Column::Covariate(i) => {
                let value: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, name, format!("`{field}` is not numeric")))?;
                if !value.is_finite() {
                    return Err(parse_err(line, name, "value must be finite"));
                }
                if matches!(column, Column::Dose(_)) {
                    doses[i] = value;
                } else {
                    covariates[i] = value;
                }
            }
            Column::Events => {
                events = field.parse().map_err(|_| {
                    parse_err(
                        line,
                        name,
                        format!("`{field}` is not a non-negative integer"),
                    )
                })?;
            }
            Column::Trials => {
                trials = field.parse().map_err(|_| {
                    parse_err(
                        line,
                        name,
                        format!("`{field}` is not a non-negative integer"),
                    )
                })?;
            }
        }
    }

    if trials < 1 {
        return Err(parse_err(line, "trials", "trials must be >= 1"));
    }
    if events > trials {
        return Err(parse_err(
            line,
            "events",
            format!("events ({events}) exceed trials ({trials})"),
        ));
    }
    if period.is_comparison() {
        if let Some(i) = doses.iter().position(|&d| d != 0.0) {
            return Err(parse_err(
                line,
                &format!("dose_{}", config.components[i].name),
                format!("{} rows must carry zero doses", period.as_str()),
            ));
        }
    }

    Ok(ObservationRecord {
        stage,
        cluster_id,
        period,
        doses,
        covariates,
        events,
        trials,
    })
}

/// Writes datasets in the canonical observation CSV layout.
pub fn write_observations<W: Write>(
    datasets: &[StageDataset],
    config: &TrialConfig,
    sink: W,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| LagoError::Io(std::io::Error::other(e.to_string()));
    writer
        .write_record(observation_header(config))
        .map_err(csv_err)?;
    for record in datasets.iter().flat_map(|d| &d.records) {
        let mut row = vec![
            record.stage.to_string(),
            record.cluster_id.clone(),
            record.period.as_str().to_string(),
        ];
        row.extend(record.doses.iter().map(|d| d.to_string()));
        row.extend(record.covariates.iter().map(|z| z.to_string()));
        row.push(record.events.to_string());
        row.push(record.trials.to_string());
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}
