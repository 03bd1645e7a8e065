//! C ABI for `abseg`.
//!
//! Every fallible function returns an [`AbsegStatus`]; on failure the
//! message is kept per thread and can be read with
//! [`abseg_last_error_message`]. Arrays are row-major with the last axis
//! fastest, i.e. a (C, X, Y, Z) tensor is indexed `((c*X + x)*Y + y)*Z + z`.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use abseg::grid::{AxisSet, Grid3, Spacing};
use abseg::inference::{predict_volume, InferenceOptions, WindowWeighting};
use abseg::metrics::{dice_score, surface_dice};
use abseg::network::{Checkpoint, Network};
use abseg::trainer::poly_lr;
use abseg::volume_io::LabelMap;
use abseg::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Config = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque trained network.
pub struct AbsegModel {
    net: Network,
}

/// Sliding-window and test-time flip settings for [`abseg_model_predict`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AbsegInferenceOptions {
    pub patch_size: [usize; 3],
    /// Fraction of the patch shared by neighbouring windows, in [0, 1).
    pub overlap: f64,
    /// Bit 0 = x, bit 1 = y, bit 2 = z. 0 disables flip averaging.
    pub flip_axes: u8,
    /// Center-weighted window blending instead of uniform averaging.
    pub gaussian_weighting: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("nul bytes removed")));
}

fn status_of(err: &Error) -> AbsegStatus {
    match err {
        Error::Io { .. } => AbsegStatus::Io,
        Error::Format { .. } | Error::UnsupportedDtype { .. } | Error::Json(_) => AbsegStatus::Format,
        Error::ShapeMismatch { .. } | Error::Indivisible { .. } => AbsegStatus::ShapeMismatch,
        Error::Config(_) | Error::NameMismatch(_) | Error::DetachedParameter(_) => AbsegStatus::Config,
        Error::NonFinite { .. } => AbsegStatus::NonFinite,
        Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } | Error::MissingCase(_) => {
            AbsegStatus::InvalidArgument
        }
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (AbsegStatus, String)>) -> AbsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AbsegStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            AbsegStatus::Panic
        }
    }
}

fn lib(e: Error) -> (AbsegStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (AbsegStatus, String) {
    (AbsegStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> (AbsegStatus, String) {
    (AbsegStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null if the last
/// call succeeded. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn abseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn abseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a model that must be
/// released with [`abseg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abseg_model_load(path: *const c_char, out: *mut *mut AbsegModel) -> AbsegStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(p)).map_err(lib)?;
        let model = Box::new(AbsegModel { net: ck.network() });
        unsafe { *out = Box::into_raw(model) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`abseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abseg_model_free(model: *mut AbsegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Output class count of the model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn abseg_model_num_classes(model: *const AbsegModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.net.spec.num_classes)
}

/// Input channel count of the model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn abseg_model_in_channels(model: *const AbsegModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.net.spec.in_channels)
}

/// Predicts class probabilities for one (C_in, X, Y, Z) volume into
/// `out_probs`, which must hold `num_classes * X * Y * Z` values.
///
/// # Safety
/// `input` must point to `in_channels * x * y * z` readable values and
/// `out_probs` to `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn abseg_model_predict(
    model: *const AbsegModel,
    input: *const f64,
    x: usize,
    y: usize,
    z: usize,
    options: *const AbsegInferenceOptions,
    out_probs: *mut f64,
    out_len: usize,
) -> AbsegStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let o = unsafe { options.as_ref() }.ok_or_else(|| null("options"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        if o.flip_axes > 7 {
            return Err(invalid(format!("flip_axes {} has bits beyond x, y, z", o.flip_axes)));
        }
        let cin = m.net.spec.in_channels;
        let vox = x
            .checked_mul(y)
            .and_then(|v| v.checked_mul(z))
            .ok_or_else(|| invalid("volume size overflows"))?;
        let need = m.net.spec.num_classes * vox;
        if out_len < need {
            return Err((
                AbsegStatus::BufferTooSmall,
                format!("output holds {out_len} values, {need} needed"),
            ));
        }
        let data = unsafe { std::slice::from_raw_parts(input, cin * vox) }.to_vec();
        let vol = Tensor::from_vec(&[cin, x, y, z], data).map_err(lib)?;
        let opts = InferenceOptions {
            patch_size: o.patch_size,
            overlap: o.overlap,
            weighting: if o.gaussian_weighting { WindowWeighting::Gaussian } else { WindowWeighting::Uniform },
            flip_axes: AxisSet::from_bits(o.flip_axes),
        };
        if !(0.0..1.0).contains(&opts.overlap) {
            return Err(invalid(format!("overlap {} outside [0, 1)", opts.overlap)));
        }
        let probs = predict_volume(std::slice::from_ref(&m.net), &vol, &opts).map_err(lib)?;
        unsafe { std::slice::from_raw_parts_mut(out_probs, need) }.copy_from_slice(probs.data());
        Ok(())
    })
}

/// Polynomial learning-rate decay at `epoch` of `total_epochs`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abseg_poly_lr(
    epoch: u64,
    total_epochs: u64,
    lr0: f64,
    power: f64,
    out: *mut f64,
) -> AbsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = poly_lr(epoch, total_epochs, lr0, power).map_err(lib)?;
        unsafe { *out = v };
        Ok(())
    })
}

unsafe fn label_maps(
    pred: *const u8,
    gt: *const u8,
    shape: [usize; 3],
    num_classes: usize,
) -> Result<(LabelMap, LabelMap), (AbsegStatus, String)> {
    if pred.is_null() {
        return Err(null("pred"));
    }
    if gt.is_null() {
        return Err(null("gt"));
    }
    let n = shape.iter().product();
    let make = |p: *const u8| {
        let v = unsafe { std::slice::from_raw_parts(p, n) }.to_vec();
        LabelMap::new(Grid3::new(shape, v).map_err(lib)?, num_classes).map_err(lib)
    };
    Ok((make(pred)?, make(gt)?))
}

/// Hard Dice of `class_id` between two label volumes of shape (x, y, z).
///
/// # Safety
/// `pred` and `gt` must each point to `x * y * z` labels; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abseg_dice(
    pred: *const u8,
    gt: *const u8,
    x: usize,
    y: usize,
    z: usize,
    num_classes: usize,
    class_id: usize,
    out: *mut f64,
) -> AbsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = unsafe { label_maps(pred, gt, [x, y, z], num_classes) }?;
        unsafe { *out = dice_score(&p, &g, class_id).map_err(lib)? };
        Ok(())
    })
}

/// Surface Dice of `class_id` at tolerance `tau_mm`; `spacing` holds the
/// three voxel sizes in millimetres.
///
/// # Safety
/// As [`abseg_dice`]; `spacing` must point to three values.
#[no_mangle]
pub unsafe extern "C" fn abseg_surface_dice(
    pred: *const u8,
    gt: *const u8,
    x: usize,
    y: usize,
    z: usize,
    num_classes: usize,
    class_id: usize,
    spacing: *const f64,
    tau_mm: f64,
    out: *mut f64,
) -> AbsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if spacing.is_null() {
            return Err(null("spacing"));
        }
        let s = unsafe { std::slice::from_raw_parts(spacing, 3) };
        let sp = Spacing::new([s[0], s[1], s[2]]).map_err(lib)?;
        let (p, g) = unsafe { label_maps(pred, gt, [x, y, z], num_classes) }?;
        unsafe { *out = surface_dice(&p, &g, class_id, tau_mm, sp).map_err(lib)? };
        Ok(())
    })
}
