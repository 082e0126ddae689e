//! C interface to the `cirl` library.
//!
//! Every fallible function returns a [`CirlStatus`]; on failure the message
//! is available from [`cirl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they are reported as `CIRL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use cirl::cohort::BatchDataset;
use cirl::history::History;
use cirl::oncosim::{self, EnvState, SimConfig};
use cirl::policy::QNetwork;
use cirl::rng::SimRng;
use cirl::CirlError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirlStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    Parse = 3,
    MissingArtifact = 4,
    Numerical = 5,
    InvalidState = 6,
    Io = 7,
    Panic = 8,
}

impl From<&CirlError> for CirlStatus {
    fn from(e: &CirlError) -> Self {
        match e.exit_code() {
            2 => CirlStatus::InvalidArgument,
            3 => CirlStatus::Parse,
            4 => CirlStatus::MissingArtifact,
            5 => CirlStatus::Numerical,
            6 => CirlStatus::InvalidState,
            _ => CirlStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CirlStatus, String);

impl From<CirlError> for Fail {
    fn from(e: CirlError) -> Self {
        Fail(CirlStatus::from(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(CirlStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CirlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CirlStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CirlStatus::Panic
        }
    }
}

unsafe fn read<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn write<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CirlStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cirl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cirl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulated treatment environment with its own random stream.
pub struct CirlEnv {
    config: SimConfig,
    state: EnvState,
    rng: SimRng,
}

/// Create an environment of autoregressive order `order` with the default
/// dynamics for that order and noise level `noise_std`; it starts reset.
///
/// # Safety
/// `out_env` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn cirl_env_new(
    order: usize,
    noise_std: f64,
    seed: u64,
    out_env: *mut *mut CirlEnv,
) -> CirlStatus {
    guard(|| {
        let slot = out(out_env, "out_env")?;
        let config = SimConfig {
            noise_std,
            ..SimConfig::with_order(order)
        };
        config.validate()?;
        let mut rng = cirl::rng::stream(seed, 0);
        let state = oncosim::reset(&config, &mut rng);
        *slot = Box::into_raw(Box::new(CirlEnv { config, state, rng }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`cirl_env_new`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cirl_env_free(env: *mut CirlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Start a new episode.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cirl_env_reset(env: *mut CirlEnv) -> CirlStatus {
    guard(|| {
        let e = out(env, "env")?;
        e.state = oncosim::reset(&e.config, &mut e.rng);
        Ok(())
    })
}

/// Current covariates and step index.
///
/// # Safety
/// `env` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_env_observe(env: *const CirlEnv, x: *mut f64, z: *mut f64, t: *mut usize) -> CirlStatus {
    guard(|| {
        let e = env.as_ref().ok_or_else(|| null("env"))?;
        *out(x, "x")? = e.state.x();
        *out(z, "z")? = e.state.z();
        *out(t, "t")? = e.state.t;
        Ok(())
    })
}

/// Apply `action` (0 or 1); writes the next covariates and whether the
/// episode has ended. Stepping a finished episode is `CIRL_STATUS_INVALID_STATE`.
///
/// # Safety
/// `env` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_env_step(
    env: *mut CirlEnv,
    action: u8,
    x: *mut f64,
    z: *mut f64,
    done: *mut bool,
) -> CirlStatus {
    guard(|| {
        let e = out(env, "env")?;
        let (xo, zo, d) = (out(x, "x")?, out(z, "z")?, out(done, "done")?);
        let (next, nx, nz) = oncosim::step(&e.config, &e.state, action, &mut e.rng)?;
        e.state = next;
        (*xo, *zo, *d) = (nx, nz, e.state.terminated());
        Ok(())
    })
}

/// A logged cohort read from disk.
pub struct CirlDataset {
    data: BatchDataset,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_dataset` writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_dataset_load(path: *const c_char, out_dataset: *mut *mut CirlDataset) -> CirlStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let data = cirl::cohort::load(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(CirlDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`cirl_dataset_load`]. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cirl_dataset_free(dataset: *mut CirlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of trajectories; 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cirl_dataset_len(dataset: *const CirlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// Copy trajectory `index`: `T` actions and `T + 1` covariate pairs
/// (interleaved `x, z`). With `capacity < T` nothing is copied and the
/// call fails with `CIRL_STATUS_INVALID_ARGUMENT`; `length` is always set.
///
/// # Safety
/// `covariates` must hold `2 * (capacity + 1)` doubles, `actions` `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn cirl_dataset_trajectory(
    dataset: *const CirlDataset,
    index: usize,
    covariates: *mut f64,
    actions: *mut u8,
    capacity: usize,
    length: *mut usize,
) -> CirlStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let len_out = out(length, "length")?;
        let tr = d.data.trajectories.get(index).ok_or_else(|| {
            Fail(
                CirlStatus::InvalidArgument,
                format!("index {index} out of range ({} trajectories)", d.data.len()),
            )
        })?;
        *len_out = tr.len();
        if capacity < tr.len() {
            return Err(Fail(
                CirlStatus::InvalidArgument,
                format!("capacity {capacity} < trajectory length {}", tr.len()),
            ));
        }
        let cov = write(covariates, 2 * (tr.len() + 1), "covariates")?;
        for (dst, src) in cov.chunks_exact_mut(2).zip(tr.covariates()) {
            dst.copy_from_slice(src);
        }
        write(actions, tr.len(), "actions")?.copy_from_slice(tr.actions());
        Ok(())
    })
}

/// A recurrent Q-network (expert or candidate policy).
pub struct CirlQNetwork {
    q: QNetwork,
}

/// Load a saved Q-network; input scaling follows `env`'s configuration.
///
/// # Safety
/// `path` must be NUL-terminated, `env` live, `out_network` writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_qnetwork_load(
    path: *const c_char,
    env: *const CirlEnv,
    out_network: *mut *mut CirlQNetwork,
) -> CirlStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        let e = env.as_ref().ok_or_else(|| null("env"))?;
        let q = QNetwork::load(&path_arg(path)?, &e.config)?;
        *slot = Box::into_raw(Box::new(CirlQNetwork { q }));
        Ok(())
    })
}

/// # Safety
/// `network` must come from [`cirl_qnetwork_load`]. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cirl_qnetwork_free(network: *mut CirlQNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// `Q(h, 0)` and `Q(h, 1)` for the history of `steps` actions and
/// `steps + 1` interleaved covariate pairs.
///
/// # Safety
/// Buffers must have the stated lengths; `q_out` holds 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn cirl_qnetwork_q_values(
    network: *const CirlQNetwork,
    covariates: *const f64,
    actions: *const u8,
    steps: usize,
    q_out: *mut f64,
) -> CirlStatus {
    guard(|| {
        let n = network.as_ref().ok_or_else(|| null("network"))?;
        let cov = read(covariates, 2 * (steps + 1), "covariates")?;
        let acts = read(actions, steps, "actions")?;
        if acts.iter().any(|&a| a > 1) {
            return Err(Fail(CirlStatus::InvalidArgument, "actions must be 0 or 1".into()));
        }
        let h = History {
            covariates: cov.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            actions: acts.to_vec(),
        };
        write(q_out, 2, "q_out")?.copy_from_slice(&n.q.q_values(&h));
        Ok(())
    })
}

/// One orthogonal-projection step: writes the new `mu_bar` (length `dim`)
/// and the margin `||mu_expert - mu_bar||`.
///
/// # Safety
/// Vector arguments hold `dim` doubles; `margin` is writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_projection_step(
    mu_expert: *const f64,
    mu_bar_prev: *const f64,
    mu_k: *const f64,
    dim: usize,
    mu_bar_out: *mut f64,
    margin: *mut f64,
) -> CirlStatus {
    guard(|| {
        let p = cirl::cirl::projection_step(
            read(mu_expert, dim, "mu_expert")?,
            read(mu_bar_prev, dim, "mu_bar_prev")?,
            read(mu_k, dim, "mu_k")?,
        )?;
        write(mu_bar_out, dim, "mu_bar_out")?.copy_from_slice(&p.mu_bar);
        *out(margin, "margin")? = p.margin;
        Ok(())
    })
}

/// Mixing weights over `count` feature expectations (row-major,
/// `count * dim`) minimizing the distance to `mu_expert`.
///
/// # Safety
/// `mus` holds `count * dim` doubles, `lambdas_out` `count`; `distance` writable.
#[no_mangle]
pub unsafe extern "C" fn cirl_mixing_policy(
    mu_expert: *const f64,
    mus: *const f64,
    count: usize,
    dim: usize,
    lambdas_out: *mut f64,
    distance: *mut f64,
) -> CirlStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(CirlStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let rows: Vec<Vec<f64>> = read(mus, count * dim, "mus")?
            .chunks_exact(dim)
            .map(<[f64]>::to_vec)
            .collect();
        let m = cirl::cirl::mixing_policy(read(mu_expert, dim, "mu_expert")?, &rows)?;
        write(lambdas_out, count, "lambdas_out")?.copy_from_slice(&m.lambdas);
        *out(distance, "distance")? = m.distance;
        Ok(())
    })
}
