//! C ABI over the `beamloc` engine.
//!
//! Every fallible call returns a [`BeamlocStatus`]; on failure the message is
//! available from [`beamloc_last_error`] on the same thread. Handles are
//! opaque, created by `*_new`/`*_from_*`/`beamloc_localize_scene` and released
//! with the matching `*_free`. Passing NULL to a `*_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use beamloc::error::Error;
use beamloc::eval;
use beamloc::heatmap::{accumulate, extract_detections, point_response};
use beamloc::provider::synthetic::{PairedHead, Scene, DEFAULT_BETA};
use beamloc::provider::SyntheticProvider;
use beamloc::search::{BeamConfig, Localizer, SearchNode};
use beamloc::tensor::{self, FeatureMap, GridBox, PixelRect};
use beamloc::HeatMap;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamlocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfBounds = 3,
    ShapeMismatch = 4,
    Format = 5,
    Io = 6,
    Bridge = 7,
    Panic = 8,
}

/// Rectangle in pixels or grid cells, depending on the call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BeamlocRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeamlocNode {
    /// Crop in image pixels.
    pub rect: BeamlocRect,
    /// Box in the parent's lattice.
    pub grid_box: BeamlocRect,
    pub level: usize,
    pub score: f64,
    /// Index into the previous level, or -1 for the root.
    pub parent: isize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeamlocPoint {
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
    pub no_response: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeamlocDetection {
    pub rect: BeamlocRect,
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamlocSearchParams {
    pub grid: usize,
    pub beta: f64,
    pub beam_width: usize,
    pub beam_depth: usize,
    pub target_class: usize,
    pub use_rescoring: bool,
    pub alpha: f64,
}

pub struct BeamlocFeatureMap(FeatureMap);

pub struct BeamlocScene(Scene);

/// Survivor levels and heat map for one class of one scene.
pub struct BeamlocResult {
    levels: Vec<Vec<SearchNode>>,
    extractions: usize,
    heat: HeatMap,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BeamlocStatus {
    match e {
        Error::BoxOutOfBounds { .. } => BeamlocStatus::OutOfBounds,
        Error::ShapeMismatch { .. } => BeamlocStatus::ShapeMismatch,
        Error::InvalidGridSize(_) | Error::NonFinite(_) | Error::InvalidArgument(_) | Error::UnknownImage(_) => {
            BeamlocStatus::InvalidArgument
        }
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => BeamlocStatus::Format,
        Error::Io(_) => BeamlocStatus::Io,
        Error::Bridge(_) => BeamlocStatus::Bridge,
    }
}

struct Fail(BeamlocStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BeamlocStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BeamlocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BeamlocStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BeamlocStatus::Panic
        }
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

impl From<PixelRect> for BeamlocRect {
    fn from(r: PixelRect) -> Self {
        BeamlocRect { x: r.x, y: r.y, w: r.w, h: r.h }
    }
}

impl From<GridBox> for BeamlocRect {
    fn from(g: GridBox) -> Self {
        BeamlocRect { x: g.x, y: g.y, w: g.w, h: g.h }
    }
}

impl From<BeamlocRect> for PixelRect {
    fn from(r: BeamlocRect) -> Self {
        PixelRect::new(r.x, r.y, r.w, r.h)
    }
}

impl From<BeamlocRect> for GridBox {
    fn from(r: BeamlocRect) -> Self {
        GridBox::new(r.x, r.y, r.w, r.h)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn beamloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn beamloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn beamloc_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Copies `len` values laid out `[row][col][channel]` into a new map.
///
/// # Safety
/// `values` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_new(
    grid: usize,
    channels: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut BeamlocFeatureMap,
) -> BeamlocStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if values.is_null() && len > 0 {
            return Err(null("values"));
        }
        let data = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(values, len).to_vec()
        };
        let map = FeatureMap::new(grid, channels, data)?;
        *out = Box::into_raw(Box::new(BeamlocFeatureMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_free(map: *mut BeamlocFeatureMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Grid side length, or 0 for NULL.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_grid_size(map: *const BeamlocFeatureMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.grid_size())
}

/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_channels(map: *const BeamlocFeatureMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.channels())
}

/// Borrowed view of the values; valid while `map` lives.
///
/// # Safety
/// `map` must be NULL or a live handle; `len` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_values(map: *const BeamlocFeatureMap, len: *mut usize) -> *const f64 {
    let Some(m) = map.as_ref() else {
        return ptr::null();
    };
    if let Some(len) = len.as_mut() {
        *len = m.0.values().len();
    }
    m.0.values().as_ptr()
}

/// Crops `gbox` out of `map` and resizes it back to the full lattice.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_fmap_truncate(
    map: *const BeamlocFeatureMap,
    gbox: BeamlocRect,
    out: *mut *mut BeamlocFeatureMap,
) -> BeamlocStatus {
    guard(|| {
        let m = in_ref(map, "map")?;
        let out = out_ptr(out, "out")?;
        let t = tensor::truncate_and_resize(&m.0, gbox.into())?;
        *out = Box::into_raw(Box::new(BeamlocFeatureMap(t)));
        Ok(())
    })
}

/// Maps a grid box onto an image of `width × height` pixels.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_backproject(
    gbox: BeamlocRect,
    grid: usize,
    width: usize,
    height: usize,
    out: *mut BeamlocRect,
) -> BeamlocStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = tensor::backproject(gbox.into(), grid, width, height)?.into();
        Ok(())
    })
}

/// Intersection over union of two pixel rectangles.
#[no_mangle]
pub extern "C" fn beamloc_iou(a: BeamlocRect, b: BeamlocRect) -> f64 {
    eval::iou(a.into(), b.into())
}

/// Parses a scene from its JSON form (the files under `scenes/`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_scene_from_json(json: *const c_char, out: *mut *mut BeamlocScene) -> BeamlocStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Fail(BeamlocStatus::Format, format!("scene json is not UTF-8: {e}")))?;
        let scene: Scene = serde_json::from_str(text).map_err(Error::from)?;
        scene.validate()?;
        *out = Box::into_raw(Box::new(BeamlocScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_scene_free(scene: *mut BeamlocScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

#[no_mangle]
pub extern "C" fn beamloc_search_params_default() -> BeamlocSearchParams {
    let b = BeamConfig::default();
    BeamlocSearchParams {
        grid: 6,
        beta: DEFAULT_BETA,
        beam_width: b.beam_width,
        beam_depth: b.beam_depth,
        target_class: b.target_class,
        use_rescoring: false,
        alpha: b.alpha,
    }
}

/// Beam search for one class over a synthetic scene. Rescoring, when
/// requested, uses the identity co-occurrence matrix.
///
/// # Safety
/// `scene` and `params` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_localize_scene(
    scene: *const BeamlocScene,
    params: *const BeamlocSearchParams,
    out: *mut *mut BeamlocResult,
) -> BeamlocStatus {
    guard(|| {
        let scene = &in_ref(scene, "scene")?.0;
        let p = *in_ref(params, "params")?;
        let out = out_ptr(out, "out")?;
        let provider = SyntheticProvider::new(p.grid, scene.channels)?;
        let head = PairedHead::new(p.grid, scene.channels, scene.classes, p.beta)?;
        let cooc = beamloc::CooccurrenceMatrix::identity(scene.classes);
        let cfg = BeamConfig {
            beam_width: p.beam_width,
            beam_depth: p.beam_depth,
            target_class: p.target_class,
            use_rescoring: p.use_rescoring,
            alpha: p.alpha,
        };
        let localizer = Localizer::new(&provider, &head).with_cooccurrence(Some(&cooc));
        let trace = localizer.beam(scene, scene.image_w, scene.image_h, &cfg)?;
        let heat = accumulate(trace.nodes(), scene.image_w, scene.image_h, p.target_class)?;
        *out = Box::into_raw(Box::new(BeamlocResult {
            levels: trace.levels,
            extractions: trace.extractions,
            heat,
        }));
        Ok(())
    })
}

/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_free(result: *mut BeamlocResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Levels reached, root included; 0 for NULL.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_num_levels(result: *const BeamlocResult) -> usize {
    result.as_ref().map_or(0, |r| r.levels.len())
}

/// Survivors at `level`; 0 when out of range.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_level_len(result: *const BeamlocResult, level: usize) -> usize {
    result
        .as_ref()
        .and_then(|r| r.levels.get(level))
        .map_or(0, Vec::len)
}

/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_extractions(result: *const BeamlocResult) -> usize {
    result.as_ref().map_or(0, |r| r.extractions)
}

/// # Safety
/// `result` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_node(
    result: *const BeamlocResult,
    level: usize,
    index: usize,
    out: *mut BeamlocNode,
) -> BeamlocStatus {
    guard(|| {
        let r = in_ref(result, "result")?;
        let out = out_ptr(out, "out")?;
        let node = r
            .levels
            .get(level)
            .and_then(|l| l.get(index))
            .ok_or_else(|| Fail(BeamlocStatus::OutOfBounds, format!("no node {index} at level {level}")))?;
        *out = BeamlocNode {
            rect: node.abs_rect.into(),
            grid_box: node.grid_box.into(),
            level: node.level,
            score: node.score,
            parent: node.parent.map_or(-1, |p| p as isize),
        };
        Ok(())
    })
}

/// Borrowed row-major heat values; valid while `result` lives.
///
/// # Safety
/// `result` must be NULL or live; `width`/`height` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_heat(
    result: *const BeamlocResult,
    width: *mut usize,
    height: *mut usize,
) -> *const f64 {
    let Some(r) = result.as_ref() else {
        return ptr::null();
    };
    if let Some(w) = width.as_mut() {
        *w = r.heat.width();
    }
    if let Some(h) = height.as_mut() {
        *h = r.heat.height();
    }
    r.heat.values().as_ptr()
}

/// # Safety
/// `result` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_point(result: *const BeamlocResult, out: *mut BeamlocPoint) -> BeamlocStatus {
    guard(|| {
        let r = in_ref(result, "result")?;
        let out = out_ptr(out, "out")?;
        let p = point_response(&r.heat);
        *out = BeamlocPoint {
            x: p.x,
            y: p.y,
            confidence: p.confidence,
            no_response: p.no_response,
        };
        Ok(())
    })
}

/// Thresholds the heat map at `theta` and writes up to `capacity` boxes.
/// `count` always receives the total, so a first call with `capacity = 0`
/// sizes the buffer.
///
/// # Safety
/// `result` must be live; `dets` must hold `capacity` entries (or be NULL
/// when `capacity` is 0); `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn beamloc_result_detections(
    result: *const BeamlocResult,
    theta: f64,
    dets: *mut BeamlocDetection,
    capacity: usize,
    count: *mut usize,
) -> BeamlocStatus {
    guard(|| {
        let r = in_ref(result, "result")?;
        let count = out_ptr(count, "count")?;
        if dets.is_null() && capacity > 0 {
            return Err(null("dets"));
        }
        let found = extract_detections(&r.heat, theta)?;
        *count = found.len();
        for (i, d) in found.iter().take(capacity).enumerate() {
            *dets.add(i) = BeamlocDetection {
                rect: d.rect.into(),
                score: d.score,
            };
        }
        Ok(())
    })
}
