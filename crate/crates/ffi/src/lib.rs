//! C ABI over `replica-flow`.
//!
//! Objects cross the boundary as opaque handles created by `rf_*_new` or
//! `rf_*_load` and released by the matching `rf_*_free`. Every fallible call
//! returns an [`RfStatus`]; on failure `rf_last_error()` describes the error
//! for the calling thread. Panics are caught and reported as
//! `RF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use replica_flow::estimators::{ess, log_ratio_from_works};
use replica_flow::heatbath::PriorPlan;
use replica_flow::lattice::{ActionParams, FieldConfig, Lattice, ReplicaGeometry};
use replica_flow::oracle::gaussian_log_ratio;
use replica_flow::pipeline::{evaluate, transfer_to, Sampler};
use replica_flow::protocol::{Direction, Method, ProtocolSchedule};
use replica_flow::train::Checkpoint;
use replica_flow::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    InvalidInput = 1,
    ShapeMismatch = 2,
    Numerical = 3,
    SamplerCap = 4,
    Incompatible = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    NullPointer = 9,
    Panic = 10,
}

impl From<&Error> for RfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => RfStatus::InvalidInput,
            Error::ShapeMismatch { .. } => RfStatus::ShapeMismatch,
            Error::Numerical(_) => RfStatus::Numerical,
            Error::SamplerCap(_) => RfStatus::SamplerCap,
            Error::Incompatible(_) => RfStatus::Incompatible,
            Error::Format(_) => RfStatus::Format,
            Error::Config(_) => RfStatus::Config,
            Error::Io(_) => RfStatus::Io,
        }
    }
}

/// Lattice geometry and couplings of one replica system. In D = 3 the
/// transverse extent equals `extent_l`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RfSystem {
    pub dim: u32,
    pub extent_t: usize,
    pub extent_l: usize,
    pub replicas: usize,
    pub cut: usize,
    pub kappa: f64,
    pub lambda: f64,
}

/// Summary of a batch of works `w` with `<exp(-w)>` estimating a ratio.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct RfRatio {
    pub ln_ratio: f64,
    pub sigma: f64,
    pub sigma_gamma: f64,
    pub ess: f64,
    pub ess_sigma: f64,
    pub n: usize,
}

/// Opaque lattice handle.
pub struct RfLattice {
    lattice: Lattice,
    params: ActionParams,
}

/// Opaque handle to a trained flow or SNF.
pub struct RfCheckpoint {
    inner: Checkpoint,
}

/// Opaque handle to a configured sampler.
pub struct RfSampler {
    sampler: Sampler,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            RfStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic");
            RfStatus::Panic
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(concat!("null pointer: ", stringify!($p)));
            return RfStatus::NullPointer;
        })+
    };
}

impl RfSystem {
    fn geometry(&self) -> Result<ReplicaGeometry, Error> {
        let ly = if self.dim == 3 { self.extent_l } else { 1 };
        ReplicaGeometry::new(self.dim as usize, self.extent_t, self.extent_l, ly, self.replicas, self.cut)
    }

    fn params(&self) -> Result<ActionParams, Error> {
        ActionParams::new(self.kappa, self.lambda)
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `system` must point to a valid `RfSystem`; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rf_lattice_new(system: *const RfSystem, out: *mut *mut RfLattice) -> RfStatus {
    non_null!(system, out);
    guard(|| {
        let s = &*system;
        let lattice = Lattice::new(&s.geometry()?)?;
        *out = Box::into_raw(Box::new(RfLattice { lattice, params: s.params()? }));
        Ok(())
    })
}

/// # Safety
/// `lattice` must come from `rf_lattice_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_lattice_free(lattice: *mut RfLattice) {
    if !lattice.is_null() {
        drop(Box::from_raw(lattice));
    }
}

/// Total number of sites over all replicas, or 0 for NULL.
///
/// # Safety
/// `lattice` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_lattice_sites(lattice: *const RfLattice) -> usize {
    lattice.as_ref().map_or(0, |l| l.lattice.n_sites())
}

/// Action of `phi` (length `len`) at the lattice's cut. A finite `level`
/// in [0, 1] interpolates towards cut + 1; pass NaN for the plain action.
///
/// # Safety
/// `phi` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_action(lattice: *const RfLattice, phi: *const f64, len: usize, level: f64, out: *mut f64) -> RfStatus {
    non_null!(lattice, phi, out);
    guard(|| {
        let l = &*lattice;
        let values = std::slice::from_raw_parts(phi, len).to_vec();
        let field = FieldConfig::from_values(l.lattice.geometry(), values)?;
        let level = (!level.is_nan()).then_some(level);
        *out = l.lattice.action_at(&field, &l.params, level)?;
        Ok(())
    })
}

/// Exact free-field ln[Z(cut + 1)/Z(cut)] at `system.kappa`.
///
/// # Safety
/// `system` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_gaussian_log_ratio(system: *const RfSystem, out: *mut f64) -> RfStatus {
    non_null!(system, out);
    guard(|| {
        let s = &*system;
        let g = s.geometry()?;
        *out = gaussian_log_ratio(&g, &g.with_cut(g.cut + 1)?, s.kappa)?;
        Ok(())
    })
}

/// Effective sample size fraction of `works`.
///
/// # Safety
/// `works` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_ess(works: *const f64, n: usize, out: *mut f64) -> RfStatus {
    non_null!(works, out);
    guard(|| {
        *out = ess(std::slice::from_raw_parts(works, n))?;
        Ok(())
    })
}

/// Ratio estimate with jackknife and autocorrelation errors.
///
/// # Safety
/// `works` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_log_ratio(works: *const f64, n: usize, out: *mut RfRatio) -> RfStatus {
    non_null!(works, out);
    guard(|| {
        let r = log_ratio_from_works(std::slice::from_raw_parts(works, n), Method::Nemc)?;
        *out = RfRatio { ln_ratio: r.ln_ratio, sigma: r.sigma, sigma_gamma: r.sigma_gamma, ess: r.ess, ess_sigma: r.ess_sigma, n: r.n };
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 path; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_checkpoint_load(path: *const c_char, out: *mut *mut RfCheckpoint) -> RfStatus {
    non_null!(path, out);
    guard(|| {
        let p = CStr::from_ptr(path).to_str().map_err(|_| Error::InvalidInput("path is not UTF-8".into()))?;
        let inner = Checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(RfCheckpoint { inner }));
        Ok(())
    })
}

/// # Safety
/// `ck` must come from `rf_checkpoint_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_checkpoint_free(ck: *mut RfCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Geometry and couplings the checkpoint was trained at.
///
/// # Safety
/// `ck` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_checkpoint_system(ck: *const RfCheckpoint, out: *mut RfSystem) -> RfStatus {
    non_null!(ck, out);
    guard(|| {
        let c = &(*ck).inner;
        let g = &c.geometry;
        *out = RfSystem {
            dim: g.dim as u32,
            extent_t: g.extent_t,
            extent_l: g.extent_x,
            replicas: g.n_replicas,
            cut: g.cut,
            kappa: c.params.kappa,
            lambda: c.params.lambda,
        };
        Ok(())
    })
}

/// Non-equilibrium Monte Carlo with `n_step` stochastic steps (0: plain
/// reweighting); `reverse` evolves from cut + 1 back to cut.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_sampler_nemc(n_step: usize, reverse: bool, out: *mut *mut RfSampler) -> RfStatus {
    non_null!(out);
    guard(|| {
        let direction = if reverse { Direction::Reverse } else { Direction::Forward };
        let sampler = Sampler::Nemc { schedule: ProtocolSchedule::linear(n_step), direction };
        *out = Box::into_raw(Box::new(RfSampler { sampler }));
        Ok(())
    })
}

/// The checkpoint's flow or SNF moved onto `system` (volume, cut, κ);
/// fails with `RF_STATUS_INCOMPATIBLE` when the network cannot transfer.
///
/// # Safety
/// `ck` and `system` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_sampler_from_checkpoint(ck: *const RfCheckpoint, system: *const RfSystem, out: *mut *mut RfSampler) -> RfStatus {
    non_null!(ck, system, out);
    guard(|| {
        let s = &*system;
        let moved = transfer_to(&(*ck).inner, &s.geometry()?, &s.params()?)?;
        *out = Box::into_raw(Box::new(RfSampler { sampler: Sampler::from_model(moved.model) }));
        Ok(())
    })
}

/// # Safety
/// `sampler` must come from an `rf_sampler_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_sampler_free(sampler: *mut RfSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

/// Runs `count` evolutions from a fresh heatbath chain (`thermalization`
/// sweeps, then one sample every `stride`) and writes their works to
/// `works_out`. Deterministic in `seed`.
///
/// # Safety
/// `sampler` and `system` must be valid; `works_out` must hold `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_sample_works(
    sampler: *const RfSampler,
    system: *const RfSystem,
    thermalization: u64,
    stride: u64,
    count: usize,
    seed: u64,
    works_out: *mut f64,
) -> RfStatus {
    non_null!(sampler, system, works_out);
    guard(|| {
        let s = &*system;
        let plan = PriorPlan { thermalization, stride, samples: count as u64, hot_start: false };
        let out = std::slice::from_raw_parts_mut(works_out, count);
        let mut at = 0;
        evaluate(&(*sampler).sampler, &s.geometry()?, &s.params()?, plan, count as u64, 1000, seed, |recs| {
            for r in recs {
                out[at] = r.work;
                at += 1;
            }
            Ok(())
        })
    })
}
