//! CSV loading, fit configuration and JSON result documents.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::closed_forms::Dependence;
use crate::error::{CencovError, Result};
use crate::estimators::{
    fit_estimator, Dataset, EstimatorKind, EstimatorSpec, FitOptions, FitResult, LambdaMode, NuisanceConfig,
    ProbabilitySource, Problem, PsiMode,
};
use crate::inference::{confidence_intervals, Interval};
use crate::model::{CensoredObservation, MeanSpec, MissingObservation};
use crate::nuisance::MisspecInjector;
use crate::numerics::solver::SolverConfig;
use crate::simulation::SimulatedData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Censored,
    Missing,
}

/// Header names for each role; unset names fall back to the layout defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ColumnMap {
    #[serde(default)]
    pub y: Option<String>,
    #[serde(default)]
    pub w: Option<String>,
    #[serde(default)]
    pub delta: Option<String>,
    #[serde(default)]
    pub x: Option<String>,
    #[serde(default)]
    pub r: Option<String>,
    /// Covariate columns; defaults to every header named `z<k>`.
    #[serde(default)]
    pub z: Option<Vec<String>>,
    /// Age column for the time-to-event mean `(a - x)`.
    #[serde(default)]
    pub age: Option<String>,
}

fn default_nuisance() -> NuisanceConfig {
    NuisanceConfig::Estimate { cols: None, cov_xc_given_z: 0.0, fixed: Default::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub columns: ColumnMap,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub dependence: Dependence,
    #[serde(default)]
    pub psi_mode: PsiMode,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub probability_source: ProbabilitySource,
    #[serde(default = "default_nuisance")]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub injectors: Vec<MisspecInjector>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl FitConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CencovError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: FitConfig = serde_json::from_str(&text)
            .map_err(|e| CencovError::Config(format!("invalid fit config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec {
            kind: self.estimator,
            problem: match self.layout {
                Layout::Censored => Problem::Cens,
                Layout::Missing => Problem::Miss,
            },
            dependence: self.dependence,
            psi_mode: self.psi_mode,
            lambda_mode: self.lambda_mode,
            probability_source: self.probability_source,
        }
    }

    pub fn options(&self) -> FitOptions {
        FitOptions { solver: self.solver, injectors: self.injectors.clone(), seed: self.seed, stream: self.stream }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.columns;
        match self.layout {
            Layout::Censored if c.x.is_some() || c.r.is_some() => {
                return Err(CencovError::Config("censored layout does not take 'x' or 'r' columns".into()))
            }
            Layout::Missing if c.w.is_some() || c.delta.is_some() => {
                return Err(CencovError::Config("missing layout does not take 'w' or 'delta' columns".into()))
            }
            _ => {}
        }
        self.solver.validate()?;
        for inj in &self.injectors {
            inj.validate()?;
        }
        self.spec().validate()
    }
}

/// A dataset read from CSV together with the resolved covariate names.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub covariates: Vec<String>,
}

fn parse_field(raw: &str, col: &str, row: usize) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| CencovError::InvalidObservation {
        index: row,
        reason: format!("column '{col}' value '{raw}' is not numeric"),
    })?;
    if !v.is_finite() {
        return Err(CencovError::InvalidObservation { index: row, reason: format!("column '{col}' is not finite") });
    }
    Ok(v)
}

fn parse_indicator(raw: &str, col: &str, row: usize) -> Result<u8> {
    match parse_field(raw, col, row)? {
        0.0 => Ok(0),
        1.0 => Ok(1),
        v => Err(CencovError::InvalidObservation { index: row, reason: format!("column '{col}' must be 0 or 1, got {v}") }),
    }
}

/// Reads a headered CSV in the censored `(y, w, delta, z...)` or missing `(y, x, r, z...)` layout.
pub fn load_csv(path: &Path, layout: Layout, columns: &ColumnMap) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CencovError::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CencovError::Config(format!("bad CSV header: {e}")))?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| CencovError::Config(format!("column '{name}' not found in {}", path.display())))
    };
    let name_or = |v: &Option<String>, d: &str| v.clone().unwrap_or_else(|| d.to_string());
    let y_name = name_or(&columns.y, "y");
    let (v_name, i_name) = match layout {
        Layout::Censored => (name_or(&columns.w, "w"), name_or(&columns.delta, "delta")),
        Layout::Missing => (name_or(&columns.x, "x"), name_or(&columns.r, "r")),
    };
    let y_col = find(&y_name)?;
    let v_col = find(&v_name)?;
    let i_col = find(&i_name)?;
    let z_names: Vec<String> = match &columns.z {
        Some(z) => z.clone(),
        None => {
            let mut z: Vec<String> = headers
                .iter()
                .filter(|h| h.len() > 1 && h.starts_with('z') && h[1..].chars().all(|c| c.is_ascii_digit()))
                .map(str::to_string)
                .collect();
            z.sort_by_key(|h| h[1..].parse::<usize>().unwrap_or(usize::MAX));
            z
        }
    };
    let mut cov_names = Vec::new();
    if let Some(a) = &columns.age {
        cov_names.push(a.clone());
    }
    cov_names.extend(z_names);
    let cov_cols = cov_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let mean = if columns.age.is_some() { MeanSpec::TimeToEvent { age_column: 0 } } else { MeanSpec::LinearX };

    let mut cens = Vec::new();
    let mut miss = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CencovError::InvalidObservation { index: row, reason: e.to_string() })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let y = parse_field(get(y_col), &y_name, row)?;
        let ind = parse_indicator(get(i_col), &i_name, row)?;
        let z = cov_cols.iter().zip(&cov_names).map(|(&c, n)| parse_field(get(c), n, row)).collect::<Result<Vec<_>>>()?;
        match layout {
            Layout::Censored => {
                let w = parse_field(get(v_col), &v_name, row)?;
                cens.push(CensoredObservation { y, w, delta: ind, z });
            }
            Layout::Missing => {
                let raw = get(v_col);
                let x = if ind == 0 {
                    if !raw.is_empty() {
                        log::debug!("row {row}: ignoring '{v_name}' value on a record with r = 0");
                    }
                    None
                } else {
                    Some(parse_field(raw, &v_name, row)?)
                };
                miss.push(MissingObservation { y, x, r: ind, z });
            }
        }
    }
    let dataset = match layout {
        Layout::Censored => Dataset::censored(&cens, mean)?,
        Layout::Missing => Dataset::missing(&miss, mean)?,
    };
    Ok(LoadedData { dataset, covariates: cov_names })
}

/// Writes a simulated dataset in the censored layout. With a time-to-event mean the first
/// covariate is written as `a`, the rest as `z1..zk`.
pub fn write_censored_csv(path: &Path, data: &SimulatedData, age_first: bool) -> Result<()> {
    let io_err = |e: csv::Error| CencovError::Config(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let nz = data.records.first().map_or(0, |r| r.z.len());
    let mut header = vec!["y".to_string(), "w".into(), "delta".into()];
    for k in 0..nz {
        header.push(if age_first && k == 0 { "a".into() } else { format!("z{}", if age_first { k } else { k + 1 }) });
    }
    w.write_record(&header).map_err(io_err)?;
    for r in &data.records {
        let mut row = vec![r.y.to_string(), r.w.to_string(), r.delta.to_string()];
        row.extend(r.z.iter().map(f64::to_string));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| CencovError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub se_uncorrected: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// The JSON document written by `cencov fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub seed: u64,
    pub stream: u64,
    pub n: usize,
    pub n_complete: usize,
    pub estimator: EstimatorSpec,
    pub coefficients: Vec<CoefficientReport>,
    pub result: FitResult,
}

/// Diagnostics written by `cencov fit` when the solver stops before converging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonConvergenceReport {
    pub version: String,
    pub seed: u64,
    pub stream: u64,
    pub status: String,
    pub message: String,
    pub iterations: usize,
    pub residual: f64,
    pub last_iterate: Vec<f64>,
}

/// The diagnostics document for a non-convergence error, `None` for any other error.
pub fn non_convergence_report(cfg: &FitConfig, err: &CencovError) -> Option<NonConvergenceReport> {
    match err.root() {
        CencovError::NonConvergence { iterations, residual, last } => Some(NonConvergenceReport {
            version: crate::VERSION.to_string(),
            seed: cfg.seed,
            stream: cfg.stream,
            status: "non_convergence".into(),
            message: err.to_string(),
            iterations: *iterations,
            residual: *residual,
            last_iterate: last.clone(),
        }),
        _ => None,
    }
}

pub fn coefficient_names(mean: &MeanSpec, covariates: &[String]) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    match mean {
        MeanSpec::TimeToEvent { age_column } => {
            names.push(format!("{}_minus_x", covariates[*age_column]));
            names.extend(covariates.iter().enumerate().filter(|(k, _)| k != age_column).map(|(_, n)| n.clone()));
        }
        MeanSpec::LinearX => {
            names.push("x".into());
            names.extend(covariates.iter().cloned());
        }
    }
    names.push("sigma".into());
    names
}

pub fn build_report(cfg: &FitConfig, loaded: &LoadedData, fit: FitResult) -> Result<FitReport> {
    let names = coefficient_names(&loaded.dataset.mean, &loaded.covariates);
    let ci: Vec<Interval> = confidence_intervals(&fit, 0.95)?;
    let est = fit.theta_hat.to_vec();
    let coefficients = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| CoefficientReport {
            name,
            estimate: est[j],
            se: fit.se[j],
            se_uncorrected: fit.se_uncorrected[j],
            ci_lower: ci[j].lower,
            ci_upper: ci[j].upper,
        })
        .collect();
    Ok(FitReport {
        version: crate::VERSION.to_string(),
        seed: cfg.seed,
        stream: cfg.stream,
        n: loaded.dataset.n(),
        n_complete: loaded.dataset.n_observed(),
        estimator: cfg.spec(),
        coefficients,
        result: fit,
    })
}

/// Loads the data named in the config and runs the estimator.
pub fn run_fit(cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let loaded = load_csv(&cfg.input, cfg.layout, &cfg.columns)?;
    let fit = fit_estimator(cfg.spec(), &loaded.dataset, &cfg.nuisance, &cfg.options())?;
    build_report(cfg, &loaded, fit)
}

pub fn render_report(report: &FitReport) -> String {
    let mut out = format!(
        "{:?} fit, n = {} ({} complete), converged = {}\n{:<16} {:>12} {:>12} {:>12} {:>12}\n",
        report.estimator.kind,
        report.n,
        report.n_complete,
        report.result.converged,
        "coefficient",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper"
    );
    for c in &report.coefficients {
        out.push_str(&format!(
            "{:<16} {:>12.5} {:>12.5} {:>12.5} {:>12.5}\n",
            c.name, c.estimate, c.se, c.ci_lower, c.ci_upper
        ));
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CencovError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CencovError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Summary rows as CSV with the table column schema plus the raw metrics.
pub fn summary_csv(summary: &crate::simulation::SimulationSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CencovError::Config(e.to_string());
    w.write_record([
        "estimator",
        "coefficient",
        "truth",
        "estimate",
        "bias",
        "percent_bias",
        "se_x100",
        "sd_x100",
        "coverage",
        "se_uncorrected_x100",
        "replications_used",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &summary.rows {
        w.write_record([
            r.label.clone(),
            r.coefficient.clone(),
            r.truth.to_string(),
            r.estimate.to_string(),
            r.bias.to_string(),
            opt(r.percent_bias),
            r.se_x100.to_string(),
            opt(r.sd_x100),
            r.coverage.to_string(),
            r.se_uncorrected_x100.to_string(),
            r.replications_used.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CencovError::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CencovError::Config(e.to_string()))
}

pub fn load_scenario(path: &Path) -> Result<crate::simulation::Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CencovError::Config(format!("cannot read {}: {e}", path.display())))?;
    let s: crate::simulation::Scenario = serde_json::from_str(&text)
        .map_err(|e| CencovError::Config(format!("invalid scenario {}: {e}", path.display())))?;
    s.validate()?;
    Ok(s)
}
