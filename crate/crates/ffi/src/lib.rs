//! C ABI over trained dimorl artifacts.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a `DimorlStatus`
//! and, on failure, leaves a message readable through `dimorl_last_error`
//! on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dimorl::envmodel::{vrex_combine, GaussianEnsemble, ModelError};
use dimorl::rollout::{penalized_reward, uncertainty};
use dimorl::sac::{SacAgent, SacError};
use dimorl::seeding::rng_from;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimorlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Dimension = 5,
    Panic = 6,
}

/// Trained environment-model ensemble.
pub struct DimorlEnsemble {
    inner: GaussianEnsemble,
}

/// Trained SAC policy.
pub struct DimorlAgent {
    inner: SacAgent,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DimorlStatus, msg: impl Into<String>) -> DimorlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> DimorlStatus) -> DimorlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DimorlStatus::Panic, "internal panic"),
    }
}

fn model_status(e: &ModelError) -> DimorlStatus {
    match e {
        ModelError::Checkpoint(_) | ModelError::Dataset(_) => DimorlStatus::Io,
        ModelError::Dimension(_) | ModelError::BadMember(_) => DimorlStatus::Dimension,
        ModelError::NonFiniteLoss { .. } | ModelError::NonPositiveVariance | ModelError::Member { .. } => {
            DimorlStatus::Numeric
        }
        _ => DimorlStatus::InvalidArgument,
    }
}

fn sac_status(e: &SacError) -> DimorlStatus {
    match e {
        SacError::Checkpoint(_) => DimorlStatus::Io,
        SacError::Dimension(_) => DimorlStatus::Dimension,
        SacError::NonFiniteLoss { .. } | SacError::Network { .. } => DimorlStatus::Numeric,
        _ => DimorlStatus::InvalidArgument,
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, DimorlStatus> {
    if path.is_null() {
        return Err(fail(DimorlStatus::NullPointer, "path is null"));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(DimorlStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], DimorlStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DimorlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], DimorlStatus> {
    if p.is_null() {
        return Err(fail(DimorlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dimorl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dimorl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an ensemble written by `train-model`.
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_load(path: *const c_char, out: *mut *mut DimorlEnsemble) -> DimorlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DimorlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = tri!(path_arg(path));
        match GaussianEnsemble::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DimorlEnsemble { inner }));
                DimorlStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_free(ensemble: *mut DimorlEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// State dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_state_dim(ensemble: *const DimorlEnsemble) -> usize {
    ensemble.as_ref().map_or(0, |e| e.inner.d_s)
}

/// Action dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_action_dim(ensemble: *const DimorlEnsemble) -> usize {
    ensemble.as_ref().map_or(0, |e| e.inner.d_a)
}

/// Number of members, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_members(ensemble: *const DimorlEnsemble) -> usize {
    ensemble.as_ref().map_or(0, |e| e.inner.len())
}

/// Gaussian prediction of one member over `(s', r)`. `mean_out` and
/// `var_out` must each hold `state_dim + 1` values.
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_predict(
    ensemble: *const DimorlEnsemble,
    member: usize,
    state: *const f64,
    action: *const f64,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> DimorlStatus {
    guard(|| {
        let Some(e) = ensemble.as_ref() else { return fail(DimorlStatus::NullPointer, "ensemble is null") };
        let e = &e.inner;
        let s = tri!(slice_arg(state, e.d_s, "state"));
        let a = tri!(slice_arg(action, e.d_a, "action"));
        let mean_out = tri!(out_arg(mean_out, e.d_s + 1, "mean_out"));
        let var_out = tri!(out_arg(var_out, e.d_s + 1, "var_out"));
        match e.predict(member, s, a) {
            Ok(p) => {
                mean_out.copy_from_slice(&p.mean);
                var_out.copy_from_slice(&p.var);
                DimorlStatus::Ok
            }
            Err(err) => fail(model_status(&err), err.to_string()),
        }
    })
}

/// Reward-penalty uncertainty at `(s, a)`: the largest member norm of the
/// predicted variance (or std when `on_std`).
#[no_mangle]
pub unsafe extern "C" fn dimorl_ensemble_uncertainty(
    ensemble: *const DimorlEnsemble,
    state: *const f64,
    action: *const f64,
    on_std: bool,
    out: *mut f64,
) -> DimorlStatus {
    guard(|| {
        let Some(e) = ensemble.as_ref() else { return fail(DimorlStatus::NullPointer, "ensemble is null") };
        let e = &e.inner;
        let s = tri!(slice_arg(state, e.d_s, "state"));
        let a = tri!(slice_arg(action, e.d_a, "action"));
        let out = tri!(out_arg(out, 1, "out"));
        let mut vars = Vec::with_capacity(e.len());
        for m in 0..e.len() {
            match e.predict(m, s, a) {
                Ok(p) => vars.push(p.var),
                Err(err) => return fail(model_status(&err), err.to_string()),
            }
        }
        let refs: Vec<&[f64]> = vars.iter().map(Vec::as_slice).collect();
        out[0] = uncertainty(&refs, on_std);
        DimorlStatus::Ok
    })
}

/// Load a policy written by `train-policy`.
#[no_mangle]
pub unsafe extern "C" fn dimorl_agent_load(path: *const c_char, out: *mut *mut DimorlAgent) -> DimorlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DimorlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = tri!(path_arg(path));
        match SacAgent::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DimorlAgent { inner }));
                DimorlStatus::Ok
            }
            Err(e) => fail(sac_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn dimorl_agent_free(agent: *mut DimorlAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

#[no_mangle]
pub unsafe extern "C" fn dimorl_agent_state_dim(agent: *const DimorlAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.inner.d_s)
}

#[no_mangle]
pub unsafe extern "C" fn dimorl_agent_action_dim(agent: *const DimorlAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.inner.d_a)
}

/// Policy action for one state. Stochastic actions draw from a stream
/// seeded by `seed`; `deterministic` uses the squashed mean.
#[no_mangle]
pub unsafe extern "C" fn dimorl_agent_act(
    agent: *const DimorlAgent,
    state: *const f64,
    deterministic: bool,
    seed: u64,
    action_out: *mut f64,
) -> DimorlStatus {
    guard(|| {
        let Some(a) = agent.as_ref() else { return fail(DimorlStatus::NullPointer, "agent is null") };
        let a = &a.inner;
        let s = tri!(slice_arg(state, a.d_s, "state"));
        let out = tri!(out_arg(action_out, a.d_a, "action_out"));
        if s.iter().any(|x| !x.is_finite()) {
            return fail(DimorlStatus::Numeric, "non-finite state");
        }
        match a.act(s, deterministic, &mut rng_from(seed, &[])) {
            Ok(act) => {
                out.copy_from_slice(&act);
                DimorlStatus::Ok
            }
            Err(e) => fail(sac_status(&e), e.to_string()),
        }
    })
}

/// `Σ risks + β·Var(risks) + weight_reg + var_bound_reg`.
#[no_mangle]
pub unsafe extern "C" fn dimorl_vrex_combine(
    risks: *const f64,
    n: usize,
    beta: f64,
    weight_reg: f64,
    var_bound_reg: f64,
    out: *mut f64,
) -> DimorlStatus {
    guard(|| {
        let risks = tri!(slice_arg(risks, n, "risks"));
        let out = tri!(out_arg(out, 1, "out"));
        match vrex_combine(risks, beta, weight_reg, var_bound_reg) {
            Ok(v) => {
                out[0] = v;
                DimorlStatus::Ok
            }
            Err(e) => fail(DimorlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// `raw − λ·u` where `u` is the largest member norm of the variance rows.
/// `variances` is row-major, `members × dim`.
#[no_mangle]
pub unsafe extern "C" fn dimorl_penalized_reward(
    raw: f64,
    variances: *const f64,
    members: usize,
    dim: usize,
    lambda: f64,
    out: *mut f64,
) -> DimorlStatus {
    guard(|| {
        let Some(len) = members.checked_mul(dim) else {
            return fail(DimorlStatus::InvalidArgument, "members × dim overflows");
        };
        let v = tri!(slice_arg(variances, len, "variances"));
        let out = tri!(out_arg(out, 1, "out"));
        let rows: Vec<&[f64]> = if dim == 0 { vec![&[]; members] } else { v.chunks(dim).collect() };
        match penalized_reward(raw, &rows, lambda) {
            Ok(r) => {
                out[0] = r;
                DimorlStatus::Ok
            }
            Err(e) => fail(DimorlStatus::InvalidArgument, e.to_string()),
        }
    })
}
