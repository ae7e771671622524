//! C interface to the nucleus-aware unpaired pretraining toolkit.
//!
//! The surface covers the two pieces other languages actually embed:
//! deterministic mask synthesis and the instance segmentation metrics.
//! Heavier workflows (training, export, probing) run through the `nup`
//! binary instead, so the ABI stays small and stable.
//!
//! Conventions: every fallible function returns a [`NupStatus`] and
//! writes its result through an out pointer that is touched only on
//! `NUP_STATUS_OK`. Objects cross the boundary as opaque handles
//! created and destroyed by matching `_new`/`_free` pairs; frees accept
//! null. After any failure, [`nup_last_error_message`] returns a
//! thread-local description of what went wrong.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use libc::c_char;
use ndarray::Array2;

use nup_core::metrics::{
    aji, detection_f1, object_dice, object_hausdorff, InstanceLabeling, PqAccumulator,
};
use nup_core::synth::{
    annotations_to_json, synthesize_image, ImageStats, InstanceAnnotationSet, MaskImage,
    SynthConfig,
};

/// Result code for every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NupStatus {
    /// Success; out parameters are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    Utf8Error = 2,
    /// Arguments were structurally invalid (bad config, bad shapes).
    InvalidArgument = 3,
    /// Synthesis failed; see `nup_last_error_message`.
    SynthFailed = 4,
    /// A metric could not be computed; see `nup_last_error_message`.
    MetricsFailed = 5,
    /// An internal invariant failed and the call was aborted safely.
    Internal = 6,
}

/// Placement accounting for one synthesized image (or a sum of them).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NupImageStats {
    pub placed: u64,
    pub epithelial: u64,
    pub other: u64,
    pub dropped_overlap: u64,
    pub dropped_degenerate: u64,
    pub dropped_out_of_bounds: u64,
}

/// A synthesized nuclear mask image with its annotations. Opaque.
pub struct NupMaskImage {
    image: MaskImage,
    annotations: InstanceAnnotationSet,
    stats: ImageStats,
}

/// An instance label map prepared for metric computation. Opaque.
pub struct NupLabeling {
    inner: InstanceLabeling,
}

/// Pools panoptic-quality statistics over many images. Opaque.
pub struct NupPqAccumulator {
    inner: PqAccumulator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).expect("nul bytes stripped");
    });
}

/// Run a body, converting panics into a status instead of unwinding
/// across the ABI boundary.
fn guarded(f: impl FnOnce() -> NupStatus) -> NupStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(format!("internal panic: {msg}"));
            NupStatus::Internal
        }
    }
}

macro_rules! require {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(concat!("`", stringify!($ptr), "` is null"));
            return NupStatus::NullArgument;
        }
    };
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn nup_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next failing call on the
/// same thread; copy it if you need to keep it.
#[no_mangle]
pub extern "C" fn nup_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned through a `char**` out parameter. Null is a
/// no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by this library's
/// string-producing functions, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nup_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Synthesize one mask image.
///
/// `config_json` is a JSON object of synthesis settings, or null for
/// the defaults. `seed` and `index` select the deterministic stream:
/// the same triple of config, seed, and index always yields the same
/// image. On success `*out` owns the result; free it with
/// [`nup_mask_image_free`].
///
/// # Safety
/// `config_json` and `image_id`, when non-null, must point to
/// nul-terminated strings. `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_synthesize(
    config_json: *const c_char,
    seed: u64,
    index: u64,
    image_id: *const c_char,
    out: *mut *mut NupMaskImage,
) -> NupStatus {
    guarded(|| {
        require!(out);
        require!(image_id);
        let id = match CStr::from_ptr(image_id).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("`image_id` is not valid utf-8");
                return NupStatus::Utf8Error;
            }
        };
        let cfg = if config_json.is_null() {
            SynthConfig::default()
        } else {
            let text = match CStr::from_ptr(config_json).to_str() {
                Ok(s) => s,
                Err(_) => {
                    set_error("`config_json` is not valid utf-8");
                    return NupStatus::Utf8Error;
                }
            };
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(e) => {
                    set_error(format!("config: {e}"));
                    return NupStatus::InvalidArgument;
                }
            }
        };
        match synthesize_image(&cfg, seed, index, id) {
            Ok((image, annotations, stats)) => {
                let handle = Box::new(NupMaskImage {
                    image,
                    annotations,
                    stats,
                });
                *out = Box::into_raw(handle);
                NupStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                NupStatus::SynthFailed
            }
        }
    })
}

/// Report the image's height and width in pixels.
///
/// # Safety
/// `img` must be a live handle from [`nup_synthesize`]; `height` and
/// `width` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_size(
    img: *const NupMaskImage,
    height: *mut usize,
    width: *mut usize,
) -> NupStatus {
    guarded(|| {
        require!(img);
        require!(height);
        require!(width);
        *height = (*img).image.height();
        *width = (*img).image.width();
        NupStatus::Ok
    })
}

/// Borrow the raw pixels: row-major height x width x 3 (epithelial
/// fill, other fill, boundary), one byte per channel. The pointer
/// belongs to the handle and dies with it.
///
/// # Safety
/// `img` must be a live handle; `data` and `len` must be valid
/// pointers. Do not use `*data` after freeing `img`.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_pixels(
    img: *const NupMaskImage,
    data: *mut *const u8,
    len: *mut usize,
) -> NupStatus {
    guarded(|| {
        require!(img);
        require!(data);
        require!(len);
        let pixels = &(*img).image.pixels;
        match pixels.as_slice() {
            Some(s) => {
                *data = s.as_ptr();
                *len = s.len();
                NupStatus::Ok
            }
            None => {
                set_error("pixel buffer is not contiguous");
                NupStatus::Internal
            }
        }
    })
}

/// Report how many instances the image contains.
///
/// # Safety
/// `img` must be a live handle; `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_instance_count(
    img: *const NupMaskImage,
    count: *mut usize,
) -> NupStatus {
    guarded(|| {
        require!(img);
        require!(count);
        *count = (*img).annotations.instances.len();
        NupStatus::Ok
    })
}

/// Copy the image's placement statistics into `stats`.
///
/// # Safety
/// `img` must be a live handle; `stats` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_stats(
    img: *const NupMaskImage,
    stats: *mut NupImageStats,
) -> NupStatus {
    guarded(|| {
        require!(img);
        require!(stats);
        let s = &(*img).stats;
        *stats = NupImageStats {
            placed: s.placed as u64,
            epithelial: s.epithelial as u64,
            other: s.other as u64,
            dropped_overlap: s.dropped_overlap as u64,
            dropped_degenerate: s.dropped_degenerate as u64,
            dropped_out_of_bounds: s.dropped_out_of_bounds as u64,
        };
        NupStatus::Ok
    })
}

/// Render the per-instance annotations as a JSON document, the same
/// schema the CLI writes next to each mask image. Free the string with
/// [`nup_string_free`].
///
/// # Safety
/// `img` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_annotations_json(
    img: *const NupMaskImage,
    out: *mut *mut c_char,
) -> NupStatus {
    guarded(|| {
        require!(img);
        require!(out);
        match annotations_to_json(&(*img).annotations) {
            Ok(text) => {
                let c = CString::new(text.replace('\0', " ")).expect("nul bytes stripped");
                *out = c.into_raw();
                NupStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                NupStatus::Internal
            }
        }
    })
}

/// Destroy a mask image handle. Null is a no-op.
///
/// # Safety
/// `img` must be a handle from [`nup_synthesize`] that has not been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn nup_mask_image_free(img: *mut NupMaskImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Build a labeling from a row-major `height x width` map of instance
/// ids (0 background, instances numbered contiguously from 1).
///
/// `classes` may be null for a class-agnostic labeling; otherwise it
/// must hold one class id per instance (`classes_len` of them), and the
/// labeling becomes eligible for panoptic quality.
///
/// # Safety
/// `labels` must point to `height * width` readable `uint32_t`s;
/// `classes`, when non-null, to `classes_len` readable bytes; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_labeling_new(
    labels: *const u32,
    height: usize,
    width: usize,
    classes: *const u8,
    classes_len: usize,
    out: *mut *mut NupLabeling,
) -> NupStatus {
    guarded(|| {
        require!(labels);
        require!(out);
        let Some(n) = height.checked_mul(width).filter(|&n| n > 0) else {
            set_error("labeling dimensions must be positive and not overflow");
            return NupStatus::InvalidArgument;
        };
        let raw = slice::from_raw_parts(labels, n).to_vec();
        let map = Array2::from_shape_vec((height, width), raw).expect("length checked");
        let built = if classes.is_null() {
            InstanceLabeling::new(map)
        } else {
            let cls = slice::from_raw_parts(classes, classes_len).to_vec();
            InstanceLabeling::with_classes(map, cls)
        };
        match built {
            Ok(lab) => {
                *out = Box::into_raw(Box::new(NupLabeling { inner: lab }));
                NupStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                NupStatus::InvalidArgument
            }
        }
    })
}

/// Report how many instances a labeling contains.
///
/// # Safety
/// `lab` must be a live handle; `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_labeling_instance_count(
    lab: *const NupLabeling,
    count: *mut usize,
) -> NupStatus {
    guarded(|| {
        require!(lab);
        require!(count);
        *count = (*lab).inner.len();
        NupStatus::Ok
    })
}

/// Destroy a labeling handle. Null is a no-op.
///
/// # Safety
/// `lab` must be a handle from [`nup_labeling_new`] that has not been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn nup_labeling_free(lab: *mut NupLabeling) {
    if !lab.is_null() {
        drop(Box::from_raw(lab));
    }
}

unsafe fn metric2(
    pred: *const NupLabeling,
    gt: *const NupLabeling,
    value: *mut f64,
    f: impl FnOnce(&InstanceLabeling, &InstanceLabeling) -> Result<f64, nup_core::metrics::MetricsError>,
) -> NupStatus {
    require!(pred);
    require!(gt);
    require!(value);
    match f(&(*pred).inner, &(*gt).inner) {
        Ok(v) => {
            *value = v;
            NupStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            NupStatus::MetricsFailed
        }
    }
}

/// Aggregated Jaccard index of `pred` against `gt`.
///
/// # Safety
/// `pred` and `gt` must be live labeling handles of equal shape;
/// `value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_aji(
    pred: *const NupLabeling,
    gt: *const NupLabeling,
    value: *mut f64,
) -> NupStatus {
    guarded(|| metric2(pred, gt, value, aji))
}

/// Detection F1 with greedy IoU matching at `iou_threshold`.
///
/// # Safety
/// `pred` and `gt` must be live labeling handles of equal shape;
/// `value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_detection_f1(
    pred: *const NupLabeling,
    gt: *const NupLabeling,
    iou_threshold: f64,
    value: *mut f64,
) -> NupStatus {
    guarded(|| metric2(pred, gt, value, |p, g| detection_f1(p, g, iou_threshold)))
}

/// Object-level Dice coefficient.
///
/// # Safety
/// `pred` and `gt` must be live labeling handles of equal shape;
/// `value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_object_dice(
    pred: *const NupLabeling,
    gt: *const NupLabeling,
    value: *mut f64,
) -> NupStatus {
    guarded(|| metric2(pred, gt, value, object_dice))
}

/// Object-level Hausdorff distance in pixels.
///
/// # Safety
/// `pred` and `gt` must be live labeling handles of equal shape;
/// `value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_object_hausdorff(
    pred: *const NupLabeling,
    gt: *const NupLabeling,
    value: *mut f64,
) -> NupStatus {
    guarded(|| metric2(pred, gt, value, object_hausdorff))
}

/// Create an empty panoptic-quality accumulator; free it with
/// [`nup_pq_accumulator_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_pq_accumulator_new(out: *mut *mut NupPqAccumulator) -> NupStatus {
    guarded(|| {
        require!(out);
        *out = Box::into_raw(Box::new(NupPqAccumulator {
            inner: PqAccumulator::new(),
        }));
        NupStatus::Ok
    })
}

/// Pool one image pair into the accumulator. Both labelings need
/// per-instance classes (see [`nup_labeling_new`]) unless they are
/// empty.
///
/// # Safety
/// `acc`, `pred`, and `gt` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn nup_pq_accumulator_add(
    acc: *mut NupPqAccumulator,
    pred: *const NupLabeling,
    gt: *const NupLabeling,
) -> NupStatus {
    guarded(|| {
        require!(acc);
        require!(pred);
        require!(gt);
        match (*acc).inner.add_image(&(*pred).inner, &(*gt).inner) {
            Ok(()) => NupStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                NupStatus::MetricsFailed
            }
        }
    })
}

/// Mean panoptic quality over the classes seen so far. Fails when
/// nothing has been accumulated.
///
/// # Safety
/// `acc` must be a live handle; `value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nup_pq_accumulator_mpq(
    acc: *const NupPqAccumulator,
    value: *mut f64,
) -> NupStatus {
    guarded(|| {
        require!(acc);
        require!(value);
        match (*acc).inner.mpq() {
            Some(v) => {
                *value = v;
                NupStatus::Ok
            }
            None => {
                set_error("no classes accumulated yet");
                NupStatus::MetricsFailed
            }
        }
    })
}

/// Destroy an accumulator handle. Null is a no-op.
///
/// # Safety
/// `acc` must be a handle from [`nup_pq_accumulator_new`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn nup_pq_accumulator_free(acc: *mut NupPqAccumulator) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}
