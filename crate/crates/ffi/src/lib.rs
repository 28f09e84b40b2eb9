//! C ABI for the evttc estimator.
//!
//! Conventions: objects cross the boundary as opaque handles created and
//! destroyed by this library; every fallible call returns an [`EvttcStatus`]
//! and writes results through out-pointers. The most recent failure message
//! per thread is available via [`evttc_last_error`]. The matching header is
//! generated into `include/evttc.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;

use evttc::event::{parse_events, BoundingBox, CameraIntrinsics, Event, EventSlice};
use evttc::linear_solver::Ttc;
use evttc::pipeline::{run_pipeline, PipelineConfig, Stage};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior NUL"));
}

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvttcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    /// The pipeline ran but produced zero estimates.
    NoEstimates = 4,
    IoError = 5,
}

/// Pinhole intrinsics of the (rectified) event camera.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvttcIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// One input event.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvttcEvent {
    /// Timestamp in microseconds.
    pub t_us: i64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1; other non-zero values are mapped to their sign.
    pub polarity: i8,
}

/// One detection box on the leading object.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvttcBbox {
    pub t_s: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub track_id: i64,
}

/// One TTC estimate. `ttc_s` is positive when approaching, negative when
/// receding and infinite when no approach is measurable; `stage` is 0 for the
/// linear initialization and 1 for registration-only updates.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvttcEstimate {
    pub t_ref_s: f64,
    pub ttc_s: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    pub rms_s: f64,
    pub n_events: u64,
    pub n_inliers: u64,
    pub stage: i32,
}

/// Opaque event container.
pub struct EvttcSlice {
    inner: EventSlice,
}

/// Opaque estimator: intrinsics plus pipeline configuration.
pub struct EvttcEstimator {
    intr: CameraIntrinsics,
    cfg: PipelineConfig,
}

fn intr_from_c(intr: &EvttcIntrinsics) -> Result<CameraIntrinsics, EvttcStatus> {
    if !(intr.fx > 0.0 && intr.fy > 0.0) || intr.width == 0 || intr.height == 0 {
        set_last_error("intrinsics: focal lengths and dimensions must be positive");
        return Err(EvttcStatus::InvalidArgument);
    }
    Ok(CameraIntrinsics::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height))
}

/// Message of the most recent failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn evttc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds an event slice from an array sorted by non-decreasing timestamp.
///
/// # Safety
/// `events` must point to `len` readable elements and `out` must be a valid
/// destination for one pointer.
#[no_mangle]
pub unsafe extern "C" fn evttc_slice_from_events(
    events: *const EvttcEvent,
    len: usize,
    width: u32,
    height: u32,
    out: *mut *mut EvttcSlice,
) -> EvttcStatus {
    if out.is_null() || (events.is_null() && len > 0) {
        set_last_error("null pointer argument");
        return EvttcStatus::NullPointer;
    }
    let raw = std::slice::from_raw_parts(events, len);
    let converted: Vec<Event> = raw
        .iter()
        .map(|e| Event::new(e.x, e.y, e.t_us, if e.polarity >= 0 { 1 } else { -1 }))
        .collect();
    let (t0, t1) = match (converted.first(), converted.last()) {
        (Some(f), Some(l)) => (f.t_s(), l.t_s()),
        _ => (0.0, 0.0),
    };
    match EventSlice::new(converted, t0, t1, width, height) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EvttcSlice { inner }));
            EvttcStatus::Ok
        }
        Err(e) => {
            set_last_error(e.to_string());
            EvttcStatus::InvalidArgument
        }
    }
}

/// Loads the text event format (`t_us x y p` per line).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn evttc_slice_load(
    path: *const c_char,
    width: u32,
    height: u32,
    out: *mut *mut EvttcSlice,
) -> EvttcStatus {
    if path.is_null() || out.is_null() {
        set_last_error("null pointer argument");
        return EvttcStatus::NullPointer;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_last_error("path is not valid UTF-8");
        return EvttcStatus::InvalidArgument;
    };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            set_last_error(format!("{path}: {e}"));
            return EvttcStatus::IoError;
        }
    };
    match parse_events(
        BufReader::new(file),
        width,
        height,
        evttc::event::DEFAULT_REORDER_CAPACITY,
    ) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EvttcSlice { inner }));
            EvttcStatus::Ok
        }
        Err(e) => {
            set_last_error(e.to_string());
            EvttcStatus::ParseError
        }
    }
}

/// Number of events in the slice; 0 for a null handle.
///
/// # Safety
/// `slice` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn evttc_slice_len(slice: *const EvttcSlice) -> usize {
    if slice.is_null() {
        return 0;
    }
    (*slice).inner.len()
}

/// Releases a slice handle. Null is a no-op.
///
/// # Safety
/// `slice` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn evttc_slice_free(slice: *mut EvttcSlice) {
    if !slice.is_null() {
        drop(Box::from_raw(slice));
    }
}

/// Creates an estimator. `config_json` may be null for defaults, or hold a
/// JSON object overriding any subset of the pipeline configuration.
///
/// # Safety
/// `intr` and `out` must be valid; `config_json` must be null or
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn evttc_estimator_new(
    intr: *const EvttcIntrinsics,
    config_json: *const c_char,
    out: *mut *mut EvttcEstimator,
) -> EvttcStatus {
    if intr.is_null() || out.is_null() {
        set_last_error("null pointer argument");
        return EvttcStatus::NullPointer;
    }
    let intr = match intr_from_c(&*intr) {
        Ok(i) => i,
        Err(status) => return status,
    };
    let cfg = if config_json.is_null() {
        PipelineConfig::default()
    } else {
        let Ok(text) = CStr::from_ptr(config_json).to_str() else {
            set_last_error("config is not valid UTF-8");
            return EvttcStatus::InvalidArgument;
        };
        match serde_json::from_str(text) {
            Ok(cfg) => cfg,
            Err(e) => {
                set_last_error(format!("config: {e}"));
                return EvttcStatus::ParseError;
            }
        }
    };
    *out = Box::into_raw(Box::new(EvttcEstimator { intr, cfg }));
    EvttcStatus::Ok
}

/// Releases an estimator handle. Null is a no-op.
///
/// # Safety
/// `estimator` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn evttc_estimator_free(estimator: *mut EvttcEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// Runs the pipeline over a slice and a detection track. Up to `cap`
/// estimates are written to `out_buf`; `out_len` receives the number written.
/// Returns `NoEstimates` when the run completes without any output.
///
/// # Safety
/// All handles must be live; `track` must hold `track_len` elements sorted by
/// time; `out_buf` must hold `cap` writable elements; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn evttc_estimate_run(
    estimator: *const EvttcEstimator,
    slice: *const EvttcSlice,
    track: *const EvttcBbox,
    track_len: usize,
    out_buf: *mut EvttcEstimate,
    cap: usize,
    out_len: *mut usize,
) -> EvttcStatus {
    if estimator.is_null()
        || slice.is_null()
        || out_len.is_null()
        || (track.is_null() && track_len > 0)
        || (out_buf.is_null() && cap > 0)
    {
        set_last_error("null pointer argument");
        return EvttcStatus::NullPointer;
    }
    *out_len = 0;
    let est = &*estimator;
    let boxes: Vec<BoundingBox> = std::slice::from_raw_parts(track, track_len)
        .iter()
        .map(|b| BoundingBox {
            t_s: b.t_s,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            track_id: b.track_id,
        })
        .collect();
    if boxes.iter().any(|b| !(b.x_min < b.x_max && b.y_min < b.y_max)) {
        set_last_error("bounding boxes must have positive area");
        return EvttcStatus::InvalidArgument;
    }
    let output = run_pipeline(&(*slice).inner, &boxes, &est.intr, &est.cfg);
    let n = output.estimates.len().min(cap);
    for (i, e) in output.estimates.iter().take(n).enumerate() {
        let ttc_s = match e.ttc {
            Ttc::Approaching(s) => s,
            Ttc::Diverging => f64::INFINITY,
            Ttc::Receding(s) => -s,
        };
        *out_buf.add(i) = EvttcEstimate {
            t_ref_s: e.t_ref_s,
            ttc_s,
            a_x: e.params.a_x,
            a_y: e.params.a_y,
            a_z: e.params.a_z,
            rms_s: e.rms_s,
            n_events: e.n_events as u64,
            n_inliers: e.n_inliers as u64,
            stage: match e.stage {
                Stage::Init => 0,
                Stage::Refine => 1,
            },
        };
    }
    *out_len = n;
    if output.estimates.is_empty() {
        set_last_error("pipeline produced no estimates");
        return EvttcStatus::NoEstimates;
    }
    EvttcStatus::Ok
}
