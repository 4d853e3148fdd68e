//! C ABI over the asyndiff scheduling, mask and sampling primitives.
//!
//! Every function returns an [`AsynStatus`]; on failure the message is kept
//! per thread and can be read with [`asyn_last_error_message`]. Objects are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use asyndiff::attention::{extract_mask, AttentionLayer, Mask, TokenSelection};
use asyndiff::data::{make_gaussian_spec, GaussianStructure};
use asyndiff::denoiser::GaussianOracle;
use asyndiff::schedule::{advance_concave, advance_linear, max_timestep_gap, solve_shift, transition_field};
use asyndiff::{
    Curve, Error, MaskPolicy, NoiseSchedule, Sampler, SamplerConfig, SamplerKind, ScheduleFamily,
    TimestepField, TimestepMode,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    OutOfRange = 4,
    Degenerate = 5,
    ShapeMismatch = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsynCurve {
    Linear = 0,
    Quadratic = 1,
    PiecewiseLinear = 2,
    Exponential = 3,
    ExtremeClamp = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsynTimestepMode {
    Continuous = 0,
    Rounded = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsynGaussianKind {
    Isotropic = 0,
    Smooth = 1,
}

impl From<AsynCurve> for Curve {
    fn from(c: AsynCurve) -> Self {
        match c {
            AsynCurve::Linear => Curve::Linear,
            AsynCurve::Quadratic => Curve::Quadratic,
            AsynCurve::PiecewiseLinear => Curve::PiecewiseLinear,
            AsynCurve::Exponential => Curve::Exponential,
            AsynCurve::ExtremeClamp => Curve::ExtremeClamp,
        }
    }
}

/// Scheduler family `f` (optionally reweighted toward the linear schedule).
pub struct AsynSchedule {
    family: ScheduleFamily,
}

/// Oracle-driven sampler over a Gaussian target.
pub struct AsynGaussianSampler {
    sampler: Sampler,
    oracle: GaussianOracle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AsynStatus {
    match err {
        Error::Domain(_) => AsynStatus::Domain,
        Error::OutOfRange { .. } => AsynStatus::OutOfRange,
        Error::Degenerate { .. } => AsynStatus::Degenerate,
        Error::ShapeMismatch(_) => AsynStatus::ShapeMismatch,
        Error::Numerical(_) | Error::Diverged { .. } => AsynStatus::Numerical,
        Error::Io(_) | Error::Json(_) | Error::Format { .. } => AsynStatus::Io,
        Error::InvalidArgument(_) | Error::Config(_) => AsynStatus::InvalidArgument,
    }
}

struct NullPointer(&'static str);

enum Failure {
    Null(NullPointer),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<NullPointer> for Failure {
    fn from(e: NullPointer) -> Self {
        Failure::Null(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> AsynStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AsynStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(NullPointer(name)))) => {
            set_error(format!("null pointer passed as '{name}'"));
            AsynStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            AsynStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, NullPointer> {
    p.as_ref().ok_or(NullPointer(name))
}

unsafe fn as_mut<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, NullPointer> {
    p.as_mut().ok_or(NullPointer(name))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], NullPointer> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(NullPointer(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], NullPointer> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(NullPointer(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn asyn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always nul-terminated when `len > 0`). Returns the full message length,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn asyn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates a scheduler; `omega = 1` gives the plain curve.
///
/// # Safety
/// `out` must be a valid pointer; the handle is freed with [`asyn_schedule_free`].
#[no_mangle]
pub unsafe extern "C" fn asyn_schedule_new(
    curve: AsynCurve,
    omega: f64,
    horizon: f64,
    out: *mut *mut AsynSchedule,
) -> AsynStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let family = ScheduleFamily::with_omega(curve.into(), omega, horizon)?;
        *out = Box::into_raw(Box::new(AsynSchedule { family }));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a handle from [`asyn_schedule_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn asyn_schedule_free(schedule: *mut AsynSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// `f(i)` for `i` in `[0, T]`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asyn_schedule_eval(
    schedule: *const AsynSchedule,
    i: f64,
    out: *mut f64,
) -> AsynStatus {
    guard(|| {
        let s = as_ref(schedule, "schedule")?;
        *as_mut(out, "out")? = s.family.eval(i)?;
        Ok(())
    })
}

/// Shift `(a, b)` with `f(i0 - a) + b = t0` and `f(T - a) + b = 0`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asyn_solve_shift(
    schedule: *const AsynSchedule,
    i0: f64,
    t0: f64,
    out_a: *mut f64,
    out_b: *mut f64,
) -> AsynStatus {
    guard(|| {
        let s = as_ref(schedule, "schedule")?;
        let (a, b) = (as_mut(out_a, "out_a")?, as_mut(out_b, "out_b")?);
        let sol = solve_shift(&s.family, i0, t0)?;
        *a = sol.a;
        *b = sol.b;
        Ok(())
    })
}

/// Next timestep of a masked pixel at `(i, t)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asyn_advance_concave(
    schedule: *const AsynSchedule,
    i: f64,
    t: f64,
    out: *mut f64,
) -> AsynStatus {
    guard(|| {
        let s = as_ref(schedule, "schedule")?;
        *as_mut(out, "out")? = advance_concave(&s.family, i, t)?;
        Ok(())
    })
}

/// Next timestep of an unmasked pixel at `(i, t)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asyn_advance_linear(horizon: f64, i: f64, t: f64, out: *mut f64) -> AsynStatus {
    guard(|| {
        *as_mut(out, "out")? = advance_linear(horizon, i, t)?;
        Ok(())
    })
}

/// Largest `f(i) - (T - i)` over the schedule.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asyn_max_timestep_gap(schedule: *const AsynSchedule, out: *mut f64) -> AsynStatus {
    guard(|| {
        let s = as_ref(schedule, "schedule")?;
        *as_mut(out, "out")? = max_timestep_gap(&s.family);
        Ok(())
    })
}

/// Advances a row-major `height x width` timestep field at step `step_index`.
/// `mask` holds one byte per pixel (non-zero = masked); `out` receives
/// `height * width` timesteps and may alias neither input.
///
/// # Safety
/// Arrays must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn asyn_transition_field(
    schedule: *const AsynSchedule,
    height: usize,
    width: usize,
    step_index: usize,
    timesteps: *const f64,
    mask: *const u8,
    mode: AsynTimestepMode,
    out: *mut f64,
) -> AsynStatus {
    guard(|| {
        let s = as_ref(schedule, "schedule")?;
        let n = height * width;
        let ts = as_slice(timesteps, n, "timesteps")?;
        let m = as_slice(mask, n, "mask")?;
        let out = as_slice_mut(out, n, "out")?;
        let field = TimestepField::from_values(height, width, s.family.horizon(), step_index, ts.to_vec())?;
        let mask = Mask::from_values(height, width, m.iter().map(|&b| b != 0).collect())?;
        let mode = match mode {
            AsynTimestepMode::Continuous => TimestepMode::Continuous,
            AsynTimestepMode::Rounded => TimestepMode::Rounded,
        };
        let next = transition_field(&field, &mask, &s.family, mode)?;
        out.copy_from_slice(next.values());
        Ok(())
    })
}

/// Mask from one attention map laid out token-major
/// (`n_tokens x height x width`), OR-ing the above-mean pixels of the
/// selected tokens and upsampling to `target_height x target_width`.
///
/// # Safety
/// `attention` must hold `n_tokens * height * width` values, `tokens`
/// `n_selected` indices and `out` `target_height * target_width` bytes.
#[no_mangle]
pub unsafe extern "C" fn asyn_extract_mask(
    n_tokens: usize,
    height: usize,
    width: usize,
    attention: *const f64,
    tokens: *const usize,
    n_selected: usize,
    target_height: usize,
    target_width: usize,
    out: *mut u8,
) -> AsynStatus {
    guard(|| {
        let values = as_slice(attention, n_tokens * height * width, "attention")?;
        let selected = as_slice(tokens, n_selected, "tokens")?;
        let out = as_slice_mut(out, target_height * target_width, "out")?;
        let layer = AttentionLayer::new(n_tokens, height, width, values.to_vec())?;
        let selection = TokenSelection::new(selected.to_vec())?;
        let mask = extract_mask(&layer, &selection, (target_height, target_width))?;
        for (o, &m) in out.iter_mut().zip(mask.values()) {
            *o = u8::from(m);
        }
        Ok(())
    })
}

/// Parameters of [`asyn_gaussian_sampler_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AsynGaussianSamplerConfig {
    /// Target grid is `side x side`, one channel.
    pub side: usize,
    pub kind: AsynGaussianKind,
    pub variance: f64,
    /// Squared-exponential length scale (smooth targets only).
    pub length_scale: f64,
    pub data_seed: u64,
    pub curve: AsynCurve,
    pub omega: f64,
    pub steps: usize,
    /// DDIM noise weight.
    pub eta: f64,
    /// Per-step probability that a pixel is masked.
    pub mask_density: f64,
    pub seed: u64,
}

/// Builds a DDIM sampler driven by the exact Gaussian denoiser, with random
/// per-step masks.
///
/// # Safety
/// Pointers must be valid; free the handle with [`asyn_gaussian_sampler_free`].
#[no_mangle]
pub unsafe extern "C" fn asyn_gaussian_sampler_new(
    config: *const AsynGaussianSamplerConfig,
    out: *mut *mut AsynGaussianSampler,
) -> AsynStatus {
    guard(|| {
        let c = *as_ref(config, "config")?;
        let out = as_mut(out, "out")?;
        let structure = match c.kind {
            AsynGaussianKind::Isotropic => GaussianStructure::Isotropic { variance: c.variance },
            AsynGaussianKind::Smooth => GaussianStructure::Smooth {
                variance: c.variance,
                length_scale: c.length_scale,
            },
        };
        let spec = make_gaussian_spec(c.side, c.side, structure, c.data_seed)?;
        let horizon = c.steps as f64;
        let noise = NoiseSchedule::cosine(horizon.max(1.0));
        let sampler = Sampler::new(
            ScheduleFamily::with_omega(c.curve.into(), c.omega, horizon)?,
            noise.clone(),
            SamplerConfig {
                kind: SamplerKind::Ddim,
                eta: c.eta,
                guidance_scale: 1.0,
                steps: c.steps,
                seed: c.seed,
                timestep_mode: TimestepMode::Continuous,
            },
            MaskPolicy::Random {
                density: c.mask_density,
            },
        )?;
        let oracle = GaussianOracle {
            spec,
            schedule: noise,
        };
        *out = Box::into_raw(Box::new(AsynGaussianSampler { sampler, oracle }));
        Ok(())
    })
}

/// # Safety
/// `sampler` must be null or a handle from [`asyn_gaussian_sampler_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn asyn_gaussian_sampler_free(sampler: *mut AsynGaussianSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

/// Draws one `side * side` sample from random stream `stream`; `synchronous`
/// runs the scalar-timestep sampler instead.
///
/// # Safety
/// `out` must hold `out_len` values and `out_len` must equal `side * side`.
#[no_mangle]
pub unsafe extern "C" fn asyn_gaussian_sampler_sample(
    sampler: *const AsynGaussianSampler,
    stream: u64,
    synchronous: bool,
    out: *mut f64,
    out_len: usize,
) -> AsynStatus {
    guard(|| {
        let s = as_ref(sampler, "sampler")?;
        let (h, w) = (s.oracle.spec.height(), s.oracle.spec.width());
        if out_len != h * w {
            return Err(
                Error::ShapeMismatch(format!("output holds {out_len} values, sample has {}", h * w)).into(),
            );
        }
        let out = as_slice_mut(out, out_len, "out")?;
        let shape = (1, h, w);
        let result = if synchronous {
            s.sampler.sample_synchronous(&s.oracle, None, shape, stream)?
        } else {
            s.sampler.sample(&s.oracle, None, shape, stream)?
        };
        out.copy_from_slice(result.final_state.data());
        Ok(())
    })
}
