//! C ABI over the `cencov` estimators.
//!
//! Every fallible call returns a [`CencovStatus`]; on failure the message is available from
//! [`cencov_last_error_message`] on the same thread. Objects are passed as opaque handles and
//! released with their matching `*_free` function. Strings returned by the library are
//! released with [`cencov_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use cencov::closed_forms::psi_closed;
use cencov::numerics::normal::{log_normal_upper_tail, normal_upper_tail};
use cencov::simulation::{run_replications, Scenario};
use cencov::{
    fit_estimator, CencovError, CensoredObservation, Dataset, Dependence, EstimatorKind, EstimatorSpec, FitOptions,
    FitResult, GaussianConditional, LambdaMode, MeanSpec, MissingObservation, NuisanceBundle, NuisanceConfig,
    ProbabilitySource, Problem, PsiMode, Theta,
};
use serde::Deserialize;

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CencovStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NonConvergence = 3,
    Singular = 4,
    Numerical = 5,
    Panic = 6,
    BufferTooSmall = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CencovEstimator {
    Cc = 0,
    Ipw = 1,
    Mle = 2,
    Acc = 3,
    Macc = 4,
    Aipw = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CencovLambda {
    None = 0,
    Plain = 1,
    NuisanceAdjusted = 2,
}

/// Estimator selection for [`cencov_fit`]. The problem type comes from the dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CencovSpec {
    pub estimator: CencovEstimator,
    pub lambda: CencovLambda,
    /// Non-zero for dependent censoring or missingness.
    pub dependent: u8,
    /// Non-zero to use the conditional-expectation form of the augmentation term.
    pub effective_psi: u8,
    /// Non-zero to model `Pr(observed | Y, Z)` by logistic regression.
    pub logistic_pi_yz: u8,
}

/// Opaque dataset handle.
pub struct CencovDataset(Dataset);
/// Opaque nuisance handle.
pub struct CencovNuisance(NuisanceBundle);
/// Opaque fit handle.
pub struct CencovFit(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &CencovError) -> CencovStatus {
    match err.root() {
        CencovError::NonConvergence { .. } => CencovStatus::NonConvergence,
        CencovError::Singular(_) | CencovError::IllConditioned(_) | CencovError::Separation(_) => CencovStatus::Singular,
        CencovError::DegenerateDenominator { .. } | CencovError::QuadratureDisagreement(_) => CencovStatus::Numerical,
        _ => CencovStatus::InvalidInput,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> CencovStatus
where
    F: FnOnce() -> Result<(), (CencovStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CencovStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CencovStatus::Panic
        }
    }
}

fn lib_err(e: CencovError) -> (CencovStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CencovStatus, String) {
    (CencovStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice_or_err<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (CencovStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn str_or_err<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CencovStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (CencovStatus::InvalidInput, format!("{what} is not UTF-8")))
}

fn mean_spec(age_column: i32, nz: usize) -> Result<MeanSpec, (CencovStatus, String)> {
    if age_column < 0 {
        return Ok(MeanSpec::LinearX);
    }
    let c = age_column as usize;
    if c >= nz {
        return Err((CencovStatus::InvalidInput, format!("age column {c} out of range for {nz} covariates")));
    }
    Ok(MeanSpec::TimeToEvent { age_column: c })
}

fn rows(z: &[f64], n: usize, nz: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..n).map(move |i| z[i * nz..(i + 1) * nz].to_vec())
}

/// Last error message on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn cencov_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cencov_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cencov_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a censored-covariate dataset from column arrays. `z` is row-major `n x nz`.
/// `age_column < 0` selects the linear-in-x mean; otherwise the time-to-event mean with
/// that covariate as the age.
///
/// # Safety
/// Array pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_dataset_censored(
    y: *const f64,
    w: *const f64,
    delta: *const u8,
    z: *const f64,
    n: usize,
    nz: usize,
    age_column: i32,
    out: *mut *mut CencovDataset,
) -> CencovStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let y = slice_or_err(y, n, "y")?;
        let w = slice_or_err(w, n, "w")?;
        let d = slice_or_err(delta, n, "delta")?;
        let z = slice_or_err(z, n * nz, "z")?;
        let mean = mean_spec(age_column, nz)?;
        let obs: Vec<CensoredObservation> = rows(z, n, nz)
            .enumerate()
            .map(|(i, zi)| CensoredObservation { y: y[i], w: w[i], delta: d[i], z: zi })
            .collect();
        let ds = Dataset::censored(&obs, mean).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CencovDataset(ds)));
        Ok(())
    })
}

/// Builds a missing-covariate dataset. `x[i]` is ignored when `r[i] == 0`.
///
/// # Safety
/// As for [`cencov_dataset_censored`].
#[no_mangle]
pub unsafe extern "C" fn cencov_dataset_missing(
    y: *const f64,
    x: *const f64,
    r: *const u8,
    z: *const f64,
    n: usize,
    nz: usize,
    age_column: i32,
    out: *mut *mut CencovDataset,
) -> CencovStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let y = slice_or_err(y, n, "y")?;
        let x = slice_or_err(x, n, "x")?;
        let r = slice_or_err(r, n, "r")?;
        let z = slice_or_err(z, n * nz, "z")?;
        let mean = mean_spec(age_column, nz)?;
        let obs: Vec<MissingObservation> = rows(z, n, nz)
            .enumerate()
            .map(|(i, zi)| MissingObservation { y: y[i], x: (r[i] == 1).then_some(x[i]), r: r[i], z: zi })
            .collect();
        let ds = Dataset::missing(&obs, mean).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CencovDataset(ds)));
        Ok(())
    })
}

/// Number of records in a dataset, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cencov_dataset_len(ds: *const CencovDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n())
}

/// # Safety
/// `ds` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cencov_dataset_free(ds: *mut CencovDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Parses a nuisance bundle from JSON (the `NuisanceBundle` document layout).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_nuisance_from_json(json: *const c_char, out: *mut *mut CencovNuisance) -> CencovStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_or_err(json, "json")?;
        let b: NuisanceBundle =
            serde_json::from_str(text).map_err(|e| (CencovStatus::InvalidInput, format!("nuisance JSON: {e}")))?;
        *out = Box::into_raw(Box::new(CencovNuisance(b)));
        Ok(())
    })
}

/// # Safety
/// `nu` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cencov_nuisance_free(nu: *mut CencovNuisance) {
    if !nu.is_null() {
        drop(Box::from_raw(nu));
    }
}

fn to_spec(s: &CencovSpec, problem: Problem) -> EstimatorSpec {
    EstimatorSpec {
        kind: match s.estimator {
            CencovEstimator::Cc => EstimatorKind::Cc,
            CencovEstimator::Ipw => EstimatorKind::Ipw,
            CencovEstimator::Mle => EstimatorKind::Mle,
            CencovEstimator::Acc => EstimatorKind::Acc,
            CencovEstimator::Macc => EstimatorKind::Macc,
            CencovEstimator::Aipw => EstimatorKind::Aipw,
        },
        problem,
        dependence: if s.dependent != 0 { Dependence::Dep } else { Dependence::Ind },
        psi_mode: if s.effective_psi != 0 { PsiMode::Effective } else { PsiMode::Closed },
        lambda_mode: match s.lambda {
            CencovLambda::None => LambdaMode::None,
            CencovLambda::Plain => LambdaMode::Plain,
            CencovLambda::NuisanceAdjusted => LambdaMode::NuisanceAdjusted,
        },
        probability_source: if s.logistic_pi_yz != 0 { ProbabilitySource::Logistic } else { ProbabilitySource::Analytic },
    }
}

fn default_options() -> FitOptions {
    FitOptions { solver: Default::default(), injectors: Vec::new(), seed: 0, stream: 0 }
}

/// Fits an estimator. A null `nuisance` estimates the required nuisance blocks from the
/// data; otherwise the supplied blocks are treated as known.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit(
    ds: *const CencovDataset,
    spec: CencovSpec,
    nuisance: *const CencovNuisance,
    out: *mut *mut CencovFit,
) -> CencovStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match nuisance.as_ref() {
            Some(nu) => NuisanceConfig::Known { bundle: nu.0.clone() },
            None => NuisanceConfig::Estimate { cols: None, cov_xc_given_z: 0.0, fixed: NuisanceBundle::default() },
        };
        let fit = fit_estimator(to_spec(&spec, ds.0.problem), &ds.0, &cfg, &default_options()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CencovFit(fit)));
        Ok(())
    })
}

#[derive(Deserialize)]
struct FitRequest {
    estimator: EstimatorSpec,
    nuisance: NuisanceConfig,
    #[serde(default = "default_options")]
    options: FitOptions,
}

/// Fits an estimator described by a JSON request
/// `{"estimator": {...}, "nuisance": {...}, "options": {...}}`. The `problem` field of the
/// estimator is overridden by the dataset's problem type.
///
/// # Safety
/// `ds` must be live, `json` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_json(ds: *const CencovDataset, json: *const c_char, out: *mut *mut CencovFit) -> CencovStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let req: FitRequest = serde_json::from_str(str_or_err(json, "json")?)
            .map_err(|e| (CencovStatus::InvalidInput, format!("fit request JSON: {e}")))?;
        let mut spec = req.estimator;
        spec.problem = ds.0.problem;
        let fit = fit_estimator(spec, &ds.0, &req.nuisance, &req.options).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CencovFit(fit)));
        Ok(())
    })
}

/// Length of the parameter vector `(beta..., sigma)` of a fit, or 0 for null.
///
/// # Safety
/// `fit` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_dim(fit: *const CencovFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.theta_hat.dim())
}

/// 1 when the final solve met its tolerance, 0 otherwise (including null).
///
/// # Safety
/// `fit` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_converged(fit: *const CencovFit) -> u8 {
    fit.as_ref().map_or(0, |f| f.0.converged as u8)
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), (CencovStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len < src.len() {
        return Err((CencovStatus::BufferTooSmall, format!("buffer holds {len}, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Copies the estimates into `out` (capacity `len`).
///
/// # Safety
/// `fit` must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_estimates(fit: *const CencovFit, out: *mut f64, len: usize) -> CencovStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        copy_out(&f.0.theta_hat.to_vec(), out, len)
    })
}

/// Copies the sandwich standard errors into `out` (capacity `len`).
///
/// # Safety
/// As for [`cencov_fit_estimates`].
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_std_errors(fit: *const CencovFit, out: *mut f64, len: usize) -> CencovStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        copy_out(&f.0.se, out, len)
    })
}

/// Serializes the full fit result to JSON. Free the string with [`cencov_string_free`].
///
/// # Safety
/// `fit` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_to_json(fit: *const CencovFit, out: *mut *mut c_char) -> CencovStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = serde_json::to_string(&f.0).map_err(|e| (CencovStatus::Numerical, e.to_string()))?;
        *out = CString::new(s).map_err(|e| (CencovStatus::Numerical, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cencov_fit_free(fit: *mut CencovFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Closed-form augmentation vector `Psi(y, z)` for a Gaussian x-law with mean `mu_x` and sd
/// `sd_x`. Writes `nbeta + 1` values into `out`.
///
/// # Safety
/// `beta` valid for `nbeta`, `z` for `nz`, `out` for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cencov_psi_closed(
    beta: *const f64,
    nbeta: usize,
    sigma: f64,
    y: f64,
    z: *const f64,
    nz: usize,
    age_column: i32,
    mu_x: f64,
    sd_x: f64,
    out: *mut f64,
    out_len: usize,
) -> CencovStatus {
    guard(|| {
        let beta = slice_or_err(beta, nbeta, "beta")?;
        let z = slice_or_err(z, nz, "z")?;
        let mean = mean_spec(age_column, nz)?;
        let theta = Theta::new(beta.to_vec(), sigma).map_err(lib_err)?;
        let law = GaussianConditional::new(mu_x, vec![0.0; nz], sd_x).map_err(lib_err)?;
        let psi = psi_closed(&theta, y, z, &law, mean).map_err(lib_err)?;
        copy_out(&psi, out, out_len)
    })
}

/// Standard normal upper tail `1 - Phi(t)`.
#[no_mangle]
pub extern "C" fn cencov_normal_upper_tail(t: f64) -> f64 {
    normal_upper_tail(t)
}

/// `log(1 - Phi(t))`, accurate far into the upper tail.
#[no_mangle]
pub extern "C" fn cencov_log_normal_upper_tail(t: f64) -> f64 {
    log_normal_upper_tail(t)
}

/// Runs a simulation scenario given as JSON and returns the summary as JSON.
/// `threads == 0` uses the default worker pool.
///
/// # Safety
/// `scenario_json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cencov_simulate_json(scenario_json: *const c_char, threads: usize, out: *mut *mut c_char) -> CencovStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s: Scenario = serde_json::from_str(str_or_err(scenario_json, "scenario_json")?)
            .map_err(|e| (CencovStatus::InvalidInput, format!("scenario JSON: {e}")))?;
        let summary = run_replications(&s, (threads > 0).then_some(threads)).map_err(lib_err)?;
        let text = serde_json::to_string(&summary).map_err(|e| (CencovStatus::Numerical, e.to_string()))?;
        *out = CString::new(text).map_err(|e| (CencovStatus::Numerical, e.to_string()))?.into_raw();
        Ok(())
    })
}
