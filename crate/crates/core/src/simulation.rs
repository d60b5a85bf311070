//! Scenario-driven data generation, replication runner and Monte Carlo summaries.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_forms::{logistic, Dependence, GaussianConditional};
use crate::error::{CencovError, Result};
use crate::estimators::{
    fit_estimator, Dataset, EstimatorKind, EstimatorSpec, FitOptions, LambdaMode, NuisanceConfig, ProbabilitySource,
    PsiMode,
};
use crate::inference::wald_intervals;
use crate::model::{CensoredObservation, MeanSpec, Theta};
use crate::nuisance::{MisspecInjector, NuisanceBundle};
use crate::numerics::mvn::{covariance_factor, mvn_draw};
use crate::numerics::solver::SolverConfig;

/// Offset separating injected-probability streams from data streams.
const INJECTION_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Design {
    /// `(X, C, Z)` jointly normal, `A ~ N(0, 1)` independent; covariates are `(A, Z)`.
    TrivariateNormal { mean: [f64; 3], cov: [[f64; 3]; 3] },
    /// `(X, Z)` bivariate normal with unit variances, `E[X] = x_mean`, `E[Z] = 0` and
    /// correlation `xz_corr`; `X` observed with probability `expit(l0 + lx x + lz z)`,
    /// otherwise `W = X - Beta(exp(Z), 1)`; covariates are `(Z)`.
    Bartlett {
        logit: [f64; 3],
        #[serde(default)]
        x_mean: f64,
        #[serde(default)]
        xz_corr: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    #[default]
    Known,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Complete-case fit on the latent full data.
    Oracle,
    /// Complete-case fit treating `W` as `X` for every record.
    Naive,
    Cc,
    Ipw,
    Mle,
    Acc,
    Macc,
    Aipw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub estimator: Method,
    #[serde(default)]
    pub psi_mode: PsiMode,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub probability_source: ProbabilitySource,
    #[serde(default)]
    pub injectors: Vec<MisspecInjector>,
    /// Overrides the scenario-level nuisance mode for this entry.
    #[serde(default)]
    pub nuisance: Option<NuisanceMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanForm {
    TimeToEvent,
    LinearX,
}

fn default_reps() -> usize {
    300
}
fn default_cap() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub theta_true: Theta,
    pub mean: MeanForm,
    pub design: Design,
    pub dependence: Dependence,
    #[serde(default)]
    pub nuisance: NuisanceMode,
    /// Covariate columns entering estimated nuisance means.
    #[serde(default)]
    pub nuisance_cols: Option<Vec<usize>>,
    pub grid: Vec<GridEntry>,
    #[serde(default = "default_cap")]
    pub failure_cap: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// One generated dataset together with the latent covariate values.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub records: Vec<CensoredObservation>,
    pub x_true: Vec<f64>,
}

impl SimulatedData {
    pub fn censoring_rate(&self) -> f64 {
        self.records.iter().filter(|r| r.delta == 0).count() as f64 / self.records.len().max(1) as f64
    }
}

impl Scenario {
    pub fn mean_spec(&self) -> MeanSpec {
        match self.mean {
            MeanForm::TimeToEvent => MeanSpec::TimeToEvent { age_column: 0 },
            MeanForm::LinearX => MeanSpec::LinearX,
        }
    }

    pub fn nz(&self) -> usize {
        match (&self.design, self.mean) {
            (Design::TrivariateNormal { .. }, MeanForm::TimeToEvent) => 2,
            (Design::TrivariateNormal { .. }, MeanForm::LinearX) => 1,
            (Design::Bartlett { .. }, _) => 1,
        }
    }

    /// Index of the `Z` column in the covariate vector.
    fn z_col(&self) -> usize {
        self.nz() - 1
    }

    /// `Cov(X, C | Z)` implied by the design.
    pub fn conditional_cov_xc(&self) -> f64 {
        match &self.design {
            Design::TrivariateNormal { cov, .. } => cov[0][1] - cov[0][2] * cov[1][2] / cov[2][2],
            Design::Bartlett { .. } => f64::NAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CencovError::Config(m));
        if self.n < 2 {
            return bad("scenario n must be at least 2".into());
        }
        if self.replications < 1 {
            return bad("scenario needs at least one replication".into());
        }
        if self.grid.is_empty() {
            return bad("scenario grid is empty".into());
        }
        if !(0.0..=1.0).contains(&self.failure_cap) {
            return bad("failure_cap must lie in [0, 1]".into());
        }
        self.solver.validate()?;
        let expected = self.mean_spec().theta_dim(self.nz());
        if self.theta_true.dim() != expected {
            return Err(CencovError::DimensionMismatch { what: "theta_true", expected, got: self.theta_true.dim() });
        }
        Theta::new(self.theta_true.beta.clone(), self.theta_true.sigma)?;
        match &self.design {
            Design::TrivariateNormal { cov, .. } => {
                for i in 0..3 {
                    for j in 0..3 {
                        if (cov[i][j] - cov[j][i]).abs() > 1e-12 {
                            return bad("design covariance must be symmetric".into());
                        }
                    }
                }
                let m = DMatrix::from_fn(3, 3, |i, j| cov[i][j]);
                covariance_factor(&m)?;
                let s = self.conditional_cov_xc();
                if self.dependence == Dependence::Ind && s.abs() > 1e-12 {
                    return bad(format!("independent censoring requires Cov(X, C | Z) = 0, design gives {s}"));
                }
                if self.dependence == Dependence::Dep && s.abs() <= 1e-12 {
                    return bad("dependent censoring requires a non-zero Cov(X, C | Z)".into());
                }
            }
            Design::Bartlett { xz_corr, .. } => {
                if !(xz_corr.abs() < 1.0) {
                    return bad("Bartlett design needs |xz_corr| < 1".into());
                }
                if self.mean != MeanForm::LinearX {
                    return bad("the Bartlett design uses the linear_x mean".into());
                }
            }
        }
        if let Some(cols) = &self.nuisance_cols {
            if cols.iter().any(|&c| c >= self.nz()) {
                return bad("nuisance_cols out of range".into());
            }
        }
        for e in &self.grid {
            for inj in &e.injectors {
                inj.validate()?;
            }
            if let Some(spec) = self.spec_for(e) {
                spec.validate()?;
            }
        }
        Ok(())
    }

    fn spec_for(&self, e: &GridEntry) -> Option<EstimatorSpec> {
        let kind = match e.estimator {
            Method::Oracle | Method::Naive => return None,
            Method::Cc => EstimatorKind::Cc,
            Method::Ipw => EstimatorKind::Ipw,
            Method::Mle => EstimatorKind::Mle,
            Method::Acc => EstimatorKind::Acc,
            Method::Macc => EstimatorKind::Macc,
            Method::Aipw => EstimatorKind::Aipw,
        };
        Some(EstimatorSpec {
            kind,
            problem: crate::estimators::Problem::Cens,
            dependence: self.dependence,
            psi_mode: e.psi_mode,
            lambda_mode: e.lambda_mode,
            probability_source: e.probability_source,
        })
    }

    /// True nuisance blocks implied by the design.
    pub fn known_bundle(&self) -> NuisanceBundle {
        let nz = self.nz();
        let zc = self.z_col();
        let mut b = NuisanceBundle { pi_theta: Some(self.theta_true.clone()), ..Default::default() };
        match &self.design {
            Design::TrivariateNormal { mean, cov } => {
                let cond = |v: usize| {
                    let slope = cov[v][2] / cov[2][2];
                    let mut slopes = vec![0.0; nz];
                    slopes[zc] = slope;
                    GaussianConditional {
                        intercept: mean[v] - slope * mean[2],
                        slopes,
                        sd: (cov[v][v] - cov[v][2] * cov[v][2] / cov[2][2]).sqrt(),
                    }
                };
                b.x_given_z = Some(cond(0));
                b.c_given_z = Some(cond(1));
                b.cov_xc_given_z = if self.dependence == Dependence::Dep { self.conditional_cov_xc() } else { 0.0 };
            }
            Design::Bartlett { x_mean, xz_corr, .. } => {
                b.x_given_z = Some(GaussianConditional {
                    intercept: *x_mean,
                    slopes: vec![*xz_corr; nz],
                    sd: (1.0 - xz_corr * xz_corr).sqrt(),
                });
            }
        }
        b
    }

    /// Blocks held fixed when the rest of the nuisance is estimated.
    fn fixed_blocks(&self) -> NuisanceBundle {
        match &self.design {
            Design::TrivariateNormal { .. } => NuisanceBundle::default(),
            Design::Bartlett { .. } => {
                let k = self.known_bundle();
                NuisanceBundle { x_given_z: k.x_given_z, ..Default::default() }
            }
        }
    }

    fn nuisance_config(&self, mode: NuisanceMode) -> NuisanceConfig {
        match mode {
            NuisanceMode::Known => NuisanceConfig::Known { bundle: self.known_bundle() },
            NuisanceMode::Estimated => NuisanceConfig::Estimate {
                cols: Some(self.nuisance_cols.clone().unwrap_or_else(|| vec![self.z_col()])),
                cov_xc_given_z: if self.dependence == Dependence::Dep { self.conditional_cov_xc() } else { 0.0 },
                fixed: self.fixed_blocks(),
            },
        }
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        names.push(match self.mean {
            MeanForm::TimeToEvent => "a_minus_x".into(),
            MeanForm::LinearX => "x".into(),
        });
        names.push("z".into());
        names
    }
}

/// Deterministic dataset for `(master_seed, replication_index)`.
pub fn generate_dataset(scenario: &Scenario, replication_index: u64) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.master_seed);
    rng.set_stream(replication_index);
    let th = &scenario.theta_true;
    let spec = scenario.mean_spec();
    let n = scenario.n;
    let mut records = Vec::with_capacity(n);
    let mut x_true = Vec::with_capacity(n);
    match &scenario.design {
        Design::TrivariateNormal { mean, cov } => {
            let mu = DVector::from_column_slice(mean);
            let factor = covariance_factor(&DMatrix::from_fn(3, 3, |i, j| cov[i][j]))?;
            for _ in 0..n {
                let d = mvn_draw(&mu, &factor, &mut rng);
                let a: f64 = rng.sample(StandardNormal);
                let eps: f64 = rng.sample(StandardNormal);
                let (x, c, zv) = (d[0], d[1], d[2]);
                let z = match scenario.mean {
                    MeanForm::TimeToEvent => vec![a, zv],
                    MeanForm::LinearX => vec![zv],
                };
                let lp = spec.linear_parts(&th.beta, &z);
                let y = lp.c0 - lp.k * x + th.sigma * eps;
                let delta = (x <= c) as u8;
                records.push(CensoredObservation { y, w: x.min(c), delta, z });
                x_true.push(x);
            }
        }
        Design::Bartlett { logit: l, x_mean, xz_corr } => {
            let resid = (1.0 - xz_corr * xz_corr).sqrt();
            for _ in 0..n {
                let zv: f64 = rng.sample(StandardNormal);
                let u0: f64 = rng.sample(StandardNormal);
                let x = x_mean + xz_corr * zv + resid * u0;
                let eps: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.random();
                let b: f64 = rng.sample(Beta::new(zv.exp(), 1.0).map_err(|e| CencovError::InvalidParameter(e.to_string()))?);
                let z = vec![zv];
                let lp = spec.linear_parts(&th.beta, &z);
                let y = lp.c0 - lp.k * x + th.sigma * eps;
                let observed = u < logistic(l[0] + l[1] * x + l[2] * zv);
                let (w, delta) = if observed { (x, 1) } else { (x - b, 0) };
                records.push(CensoredObservation { y, w, delta, z });
                x_true.push(x);
            }
        }
    }
    Ok(SimulatedData { records, x_true })
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFit {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub se_uncorrected: Vec<f64>,
    pub clamp_events: usize,
}

/// Fits one grid entry on one dataset.
pub fn fit_entry(scenario: &Scenario, entry: &GridEntry, data: &SimulatedData, replication_index: u64) -> Result<ReplicationFit> {
    let spec = scenario.mean_spec();
    let p = spec.theta_dim(scenario.nz());
    let opts = FitOptions {
        solver: scenario.solver,
        injectors: entry.injectors.clone(),
        seed: scenario.master_seed,
        stream: INJECTION_STREAM_OFFSET + replication_index,
    };
    let (dataset, estimator) = match entry.estimator {
        Method::Oracle | Method::Naive => {
            let y: Vec<f64> = data.records.iter().map(|r| r.y).collect();
            let z: Vec<Vec<f64>> = data.records.iter().map(|r| r.z.clone()).collect();
            let x: Vec<f64> = if entry.estimator == Method::Oracle {
                data.x_true.clone()
            } else {
                data.records.iter().map(|r| r.w).collect()
            };
            (Dataset::fully_observed(&y, &x, &z, spec)?, EstimatorSpec::new(EstimatorKind::Cc))
        }
        _ => (Dataset::censored(&data.records, spec)?, scenario.spec_for(entry).expect("estimator entry")),
    };
    let mode = entry.nuisance.unwrap_or(scenario.nuisance);
    let fit = fit_estimator(estimator, &dataset, &scenario.nuisance_config(mode), &opts)?;
    if !fit.converged {
        return Err(CencovError::NonConvergence { iterations: fit.iterations, residual: fit.residual, last: fit.theta_hat.to_vec() });
    }
    if fit.se.iter().any(|s| !s.is_finite()) {
        return Err(CencovError::Singular("standard errors"));
    }
    Ok(ReplicationFit {
        estimate: fit.theta_hat.to_vec()[..p - 1].to_vec(),
        se: fit.se[..p - 1].to_vec(),
        se_uncorrected: fit.se_uncorrected[..p - 1].to_vec(),
        clamp_events: fit.clamp_events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub coefficient: String,
    pub truth: f64,
    pub estimate: f64,
    pub bias: f64,
    pub percent_bias: Option<f64>,
    pub se_x100: f64,
    pub se_uncorrected_x100: f64,
    pub sd_x100: Option<f64>,
    pub coverage: f64,
    pub replications_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryCounters {
    pub label: String,
    pub failures: usize,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub scenario: String,
    pub master_seed: u64,
    pub n: usize,
    pub replications: usize,
    pub rows: Vec<SummaryRow>,
    pub counters: Vec<EntryCounters>,
    pub total_fits: usize,
    pub failed_fits: usize,
    pub failure_cap_exceeded: bool,
}

impl SimulationSummary {
    pub fn row(&self, label: &str, coefficient: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label && r.coefficient == coefficient)
    }
}

/// Monte Carlo metrics for one coefficient from per-replication estimates.
pub fn summarize_coefficient(
    label: &str,
    coefficient: &str,
    truth: f64,
    fits: &[(f64, f64, f64)],
) -> SummaryRow {
    let n = fits.len();
    let nf = n as f64;
    let mean = fits.iter().map(|f| f.0).sum::<f64>() / nf;
    let sd = (n > 1).then(|| (fits.iter().map(|f| (f.0 - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt());
    let se = fits.iter().map(|f| f.1).sum::<f64>() / nf;
    let se_u = fits.iter().map(|f| f.2).sum::<f64>() / nf;
    let covered = fits
        .iter()
        .filter(|f| wald_intervals(&[f.0], &[f.1], 0.95).map(|iv| iv[0].contains(truth)).unwrap_or(false))
        .count();
    SummaryRow {
        label: label.to_string(),
        coefficient: coefficient.to_string(),
        truth,
        estimate: mean,
        bias: mean - truth,
        percent_bias: (truth != 0.0).then(|| 100.0 * fits.iter().map(|f| (f.0 - truth) / truth).sum::<f64>() / nf),
        se_x100: 100.0 * se,
        se_uncorrected_x100: 100.0 * se_u,
        sd_x100: sd.map(|s| 100.0 * s),
        coverage: 100.0 * covered as f64 / nf,
        replications_used: n,
    }
}

type RepOutcome = Vec<std::result::Result<ReplicationFit, String>>;

fn run_one(scenario: &Scenario, rep: u64) -> RepOutcome {
    match generate_dataset(scenario, rep) {
        Ok(data) => scenario
            .grid
            .iter()
            .map(|e| fit_entry(scenario, e, &data, rep).map_err(|err| err.to_string()))
            .collect(),
        Err(e) => scenario.grid.iter().map(|_| Err(e.to_string())).collect(),
    }
}

/// Runs every replication of the scenario, in parallel across replications when a worker
/// count above one is given.
pub fn run_replications(scenario: &Scenario, threads: Option<usize>) -> Result<SimulationSummary> {
    scenario.validate()?;
    let reps: Vec<u64> = (0..scenario.replications as u64).collect();
    let outcomes: Vec<RepOutcome> = match threads {
        Some(t) if t > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CencovError::Config(e.to_string()))?;
            pool.install(|| reps.par_iter().map(|&r| run_one(scenario, r)).collect())
        }
        Some(_) => reps.iter().map(|&r| run_one(scenario, r)).collect(),
        None => reps.par_iter().map(|&r| run_one(scenario, r)).collect(),
    };
    Ok(aggregate(scenario, &outcomes))
}

fn aggregate(scenario: &Scenario, outcomes: &[RepOutcome]) -> SimulationSummary {
    let names = scenario.coefficient_names();
    let truth = &scenario.theta_true.beta;
    let mut rows = Vec::new();
    let mut counters = Vec::new();
    let mut failed = 0;
    for (k, entry) in scenario.grid.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures = 0;
        let mut clamps = 0;
        for (rep, out) in outcomes.iter().enumerate() {
            match &out[k] {
                Ok(f) => {
                    clamps += f.clamp_events;
                    ok.push(f);
                }
                Err(msg) => {
                    failures += 1;
                    log::warn!("{} failed on replication {rep}: {msg}", entry.label);
                }
            }
        }
        failed += failures;
        counters.push(EntryCounters { label: entry.label.clone(), failures, clamp_events: clamps });
        if ok.is_empty() {
            continue;
        }
        for (j, name) in names.iter().enumerate() {
            let fits: Vec<(f64, f64, f64)> = ok.iter().map(|f| (f.estimate[j], f.se[j], f.se_uncorrected[j])).collect();
            rows.push(summarize_coefficient(&entry.label, name, truth[j], &fits));
        }
    }
    let total = scenario.grid.len() * outcomes.len();
    SimulationSummary {
        scenario: scenario.name.clone(),
        master_seed: scenario.master_seed,
        n: scenario.n,
        replications: outcomes.len(),
        rows,
        counters,
        total_fits: total,
        failed_fits: failed,
        failure_cap_exceeded: total > 0 && failed as f64 / total as f64 > scenario.failure_cap,
    }
}

/// One formatted table row: Estimate, Bias, SE x100, SD x100, 95% coverage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub coefficient: String,
    pub estimate: String,
    pub bias: String,
    pub se: String,
    pub sd: String,
    pub coverage: String,
}

pub fn summarize_to_table(summary: &SimulationSummary) -> Vec<TableRow> {
    summary
        .rows
        .iter()
        .map(|r| TableRow {
            label: r.label.clone(),
            coefficient: r.coefficient.clone(),
            estimate: format!("{:.2}", r.estimate),
            bias: format!("{:.2}", r.bias),
            se: format!("{:.2}", r.se_x100),
            sd: r.sd_x100.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}")),
            coverage: format!("{:.2}", r.coverage),
        })
        .collect()
}

/// Plain-text rendering of the table, grouped by coefficient.
pub fn render_table(summary: &SimulationSummary) -> String {
    let table = summarize_to_table(summary);
    let width = table.iter().map(|r| r.label.len()).max().unwrap_or(9).max(9);
    let mut out = String::new();
    let mut coefs: Vec<&str> = Vec::new();
    for r in &table {
        if !coefs.contains(&r.coefficient.as_str()) {
            coefs.push(&r.coefficient);
        }
    }
    for c in coefs {
        out.push_str(&format!("[{c}]\n"));
        out.push_str(&format!(
            "{:<width$} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "Estimator", "Estimate", "Bias", "SE", "SD", "95% Cov"
        ));
        for r in table.iter().filter(|r| r.coefficient == c) {
            out.push_str(&format!(
                "{:<width$} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                r.label, r.estimate, r.bias, r.se, r.sd, r.coverage
            ));
        }
    }
    out
}
