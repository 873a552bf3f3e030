//! C ABI over the takit core.
//!
//! Every function returns a [`TakitStatus`]; on failure a message is available
//! from [`takit_last_error`] on the same thread. Strings and arrays handed out
//! by the library must be released with the matching `*_free` function.
//! Boxes are passed as four doubles `x_min, y_min, x_max, y_max`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use takit::adapters::{builtin_profiles, find_profile, parse_prediction, ParsedPrediction};
use takit::bench::Direction;
use takit::cqmd::{forward, CqmdParams, HiddenStates, Matrix, ParamsFile};
use takit::evaluator::{aggregate, match_t2r, score_r2t, Outcome, QueryResult};
use takit::geometry::{iou, to_canonical, Box, CoordConvention, ImageSize};
use takit::maskrender::{default_rasterizer, render_destylized};
use takit::rng::Pcg32;
use takit::spi::{derive_weights, jitter_box, normalize_weights, NoiseProfile};
use takit::textnorm::{canonicalize_t2r, normalize_r2t};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TakitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    BufferTooSmall = 5,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TakitCoordConvention {
    XyxyAbs = 0,
    YxyxAbs = 1,
    XyxyNorm01 = 2,
    XyxyRel1000 = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TakitDirection {
    R2T = 0,
    T2R = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TakitScores {
    pub acc_r2t: f64,
    pub precision_t2r: f64,
    pub recall_t2r: f64,
    pub f1_t2r: f64,
    pub overall: f64,
    pub r2t_queries: u64,
    pub t2r_queries: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TakitNoiseProfile {
    pub recall: f64,
    pub precision: f64,
    pub cer: f64,
    pub e_del_hat: f64,
    pub e_ins_hat: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TakitModeProbs {
    pub p_del: f64,
    pub p_jit: f64,
    pub p_txt: f64,
}

/// Accumulates per-query outcomes and pools them into scores.
pub struct TakitEvaluator {
    threshold: f64,
    results: Vec<QueryResult>,
}

/// Mask decoder parameters.
pub struct TakitCqmd {
    params: CqmdParams,
}

type Failure = (TakitStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn call(f: impl FnOnce() -> Result<(), Failure>) -> TakitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TakitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            TakitStatus::Panic
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    (TakitStatus::InvalidArgument, e.to_string())
}

fn null(name: &str) -> Failure {
    (TakitStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (TakitStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn box_arg(p: *const f64, name: &str) -> Result<Box, Failure> {
    let c = slice_arg(p, 4, name)?;
    Box::new(c[0], c[1], c[2], c[3]).map_err(invalid)
}

unsafe fn boxes_arg(p: *const f64, n: usize, name: &str) -> Result<Vec<Box>, Failure> {
    let n4 = n.checked_mul(4).ok_or_else(|| invalid("box count overflows"))?;
    slice_arg(p, n4, name)?
        .chunks_exact(4)
        .map(|c| Box::new(c[0], c[1], c[2], c[3]).map_err(invalid))
        .collect()
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn image_arg(width: u32, height: u32) -> Result<ImageSize, Failure> {
    ImageSize::new(width, height).map_err(invalid)
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("result contains a NUL byte"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn takit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn takit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn takit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `a` and `b` point to four doubles each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_iou(a: *const f64, b: *const f64, out: *mut f64) -> TakitStatus {
    call(|| {
        let (a, b) = (box_arg(a, "a")?, box_arg(b, "b")?);
        *out_arg(out, "out")? = iou(&a, &b);
        Ok(())
    })
}

/// Converts model-interface coordinates to an absolute `x_min, y_min, x_max,
/// y_max` box.
///
/// # Safety
/// `coords` points to four doubles; `out` to four writable doubles.
#[no_mangle]
pub unsafe extern "C" fn takit_to_canonical(
    coords: *const f64,
    convention: TakitCoordConvention,
    width: u32,
    height: u32,
    out: *mut f64,
) -> TakitStatus {
    call(|| {
        let c = slice_arg(coords, 4, "coords")?;
        let conv = match convention {
            TakitCoordConvention::XyxyAbs => CoordConvention::XyxyAbs,
            TakitCoordConvention::YxyxAbs => CoordConvention::YxyxAbs,
            TakitCoordConvention::XyxyNorm01 => CoordConvention::XyxyNorm01,
            TakitCoordConvention::XyxyRel1000 => CoordConvention::XyxyRel1000,
        };
        let b = to_canonical([c[0], c[1], c[2], c[3]], conv, image_arg(width, height)?).map_err(invalid)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&b.to_array());
        Ok(())
    })
}

unsafe fn text_fn(s: *const c_char, out: *mut *mut c_char, f: fn(&str) -> String) -> TakitStatus {
    call(|| {
        let s = str_arg(s, "s")?;
        let out = out_arg(out, "out")?;
        *out = to_c_string(f(s))?;
        Ok(())
    })
}

/// Region-to-text normalization. Free the result with `takit_string_free`.
///
/// # Safety
/// `s` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_normalize_r2t(s: *const c_char, out: *mut *mut c_char) -> TakitStatus {
    text_fn(s, out, normalize_r2t)
}

/// Text-to-region merge key. Free the result with `takit_string_free`.
///
/// # Safety
/// `s` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_canonicalize_t2r(s: *const c_char, out: *mut *mut c_char) -> TakitStatus {
    text_fn(s, out, canonicalize_t2r)
}

/// Parses a raw model response with a built-in interface profile and writes
/// the parsed prediction as JSON. A response that cannot be parsed is not an
/// error: the JSON then has `parse_ok: false` and a `failure` reason.
///
/// # Safety
/// String arguments are NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_parse_prediction(
    profile: *const c_char,
    raw: *const c_char,
    direction: TakitDirection,
    width: u32,
    height: u32,
    out_json: *mut *mut c_char,
) -> TakitStatus {
    call(|| {
        let name = str_arg(profile, "profile")?;
        let raw = str_arg(raw, "raw")?;
        let out = out_arg(out_json, "out_json")?;
        let profiles = builtin_profiles();
        let prof = find_profile(&profiles, name).map_err(invalid)?;
        let dir = match direction {
            TakitDirection::R2T => Direction::R2T,
            TakitDirection::T2R => Direction::T2R,
        };
        let parsed = parse_prediction("", raw, prof, dir, image_arg(width, height)?);
        *out = to_c_string(serde_json::to_string(&parsed).map_err(invalid)?)?;
        Ok(())
    })
}

/// # Safety
/// `out` is writable. Free the handle with `takit_evaluator_free`.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_new(iou_threshold: f64, out: *mut *mut TakitEvaluator) -> TakitStatus {
    call(|| {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(invalid(format!("IoU threshold {iou_threshold} outside (0, 1]")));
        }
        let out = out_arg(out, "out")?;
        *out = std::boxed::Box::into_raw(std::boxed::Box::new(TakitEvaluator {
            threshold: iou_threshold,
            results: Vec::new(),
        }));
        Ok(())
    })
}

/// # Safety
/// `ev` is NULL or a handle from `takit_evaluator_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_free(ev: *mut TakitEvaluator) {
    if !ev.is_null() {
        drop(std::boxed::Box::from_raw(ev));
    }
}

fn push(ev: &mut TakitEvaluator, category: &str, outcome: Outcome) {
    let id = format!("q{}", ev.results.len());
    ev.results.push(QueryResult {
        query_id: id,
        category: category.to_string(),
        outcome,
    });
}

/// Adds a region-to-text query. A NULL `predicted` counts as a failed parse.
///
/// # Safety
/// `ev` is a live handle; strings are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_add_r2t(
    ev: *mut TakitEvaluator,
    category: *const c_char,
    predicted: *const c_char,
    ground_truth: *const c_char,
) -> TakitStatus {
    call(|| {
        let ev = out_arg(ev, "ev")?;
        let category = str_arg(category, "category")?;
        let gt = str_arg(ground_truth, "ground_truth")?;
        let pred = if predicted.is_null() {
            ParsedPrediction::failed("", takit::adapters::ParseFailure::Missing)
        } else {
            ParsedPrediction {
                query_id: String::new(),
                boxes: Vec::new(),
                text: Some(str_arg(predicted, "predicted")?.to_string()),
                parse_ok: true,
                failure: None,
            }
        };
        push(
            ev,
            category,
            Outcome::R2T {
                correct: score_r2t(&pred, gt),
            },
        );
        Ok(())
    })
}

/// Adds a text-to-region query. `predicted` and `ground_truth` hold `n * 4`
/// doubles.
///
/// # Safety
/// `ev` is a live handle; arrays hold the stated number of boxes.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_add_t2r(
    ev: *mut TakitEvaluator,
    category: *const c_char,
    predicted: *const f64,
    n_predicted: usize,
    ground_truth: *const f64,
    n_ground_truth: usize,
) -> TakitStatus {
    call(|| {
        let ev = out_arg(ev, "ev")?;
        let category = str_arg(category, "category")?;
        let pred = boxes_arg(predicted, n_predicted, "predicted")?;
        let gt = boxes_arg(ground_truth, n_ground_truth, "ground_truth")?;
        if gt.is_empty() {
            return Err(invalid("a text-to-region query needs at least one target box"));
        }
        let counts = match_t2r(&pred, &gt, ev.threshold);
        push(ev, category, Outcome::T2R(counts));
        Ok(())
    })
}

/// Pooled scores over every query added so far, in percent.
///
/// # Safety
/// `ev` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_scores(ev: *const TakitEvaluator, out: *mut TakitScores) -> TakitStatus {
    call(|| {
        let ev = ev.as_ref().ok_or_else(|| null("ev"))?;
        let out = out_arg(out, "out")?;
        let s = aggregate(&ev.results).map_err(invalid)?.scores;
        *out = TakitScores {
            acc_r2t: s.acc_r2t,
            precision_t2r: s.precision_t2r,
            recall_t2r: s.recall_t2r,
            f1_t2r: s.f1_t2r,
            overall: s.overall,
            r2t_queries: s.counts.r2t_queries,
            t2r_queries: s.counts.t2r_queries,
        };
        Ok(())
    })
}

/// Full report with per-category scores as JSON.
///
/// # Safety
/// `ev` is a live handle; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_evaluator_report_json(
    ev: *const TakitEvaluator,
    out_json: *mut *mut c_char,
) -> TakitStatus {
    call(|| {
        let ev = ev.as_ref().ok_or_else(|| null("ev"))?;
        let out = out_arg(out_json, "out_json")?;
        let r = aggregate(&ev.results).map_err(invalid)?;
        *out = to_c_string(serde_json::to_string(&r).map_err(invalid)?)?;
        Ok(())
    })
}

/// Corruption-mode probabilities from OCR engine statistics.
///
/// # Safety
/// `profile` is readable; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_spi_mode_probs(
    profile: *const TakitNoiseProfile,
    out: *mut TakitModeProbs,
) -> TakitStatus {
    call(|| {
        let p = profile.as_ref().ok_or_else(|| null("profile"))?;
        let out = out_arg(out, "out")?;
        let np = NoiseProfile {
            recall: p.recall,
            precision: p.precision,
            cer: p.cer,
            e_del_hat: p.e_del_hat,
            e_ins_hat: p.e_ins_hat,
        };
        np.validate().map_err(invalid)?;
        let pr = normalize_weights(&derive_weights(&np)).map_err(invalid)?;
        *out = TakitModeProbs {
            p_del: pr.p_del,
            p_jit: pr.p_jit,
            p_txt: pr.p_txt,
        };
        Ok(())
    })
}

/// Jitters a box inside a `width x height` image. `degenerate` (optional) is
/// set when every attempt collapsed and the original box was returned.
///
/// # Safety
/// `bbox` holds four doubles; `out` four writable doubles.
#[no_mangle]
pub unsafe extern "C" fn takit_spi_jitter_box(
    bbox: *const f64,
    width: u32,
    height: u32,
    seed: u64,
    out: *mut f64,
    degenerate: *mut bool,
) -> TakitStatus {
    call(|| {
        let b = box_arg(bbox, "bbox")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let j = jitter_box(&b, image_arg(width, height)?, &mut Pcg32::seed_from(seed));
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&j.bbox.to_array());
        if let Some(d) = degenerate.as_mut() {
            *d = j.degenerate;
        }
        Ok(())
    })
}

fn cqmd_handle(params: CqmdParams) -> *mut TakitCqmd {
    std::boxed::Box::into_raw(std::boxed::Box::new(TakitCqmd { params }))
}

/// Loads decoder parameters from the JSON parameter-file format.
///
/// # Safety
/// `json` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_cqmd_from_json(json: *const c_char, out: *mut *mut TakitCqmd) -> TakitStatus {
    call(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let f = ParamsFile::from_json(text).map_err(|e| (TakitStatus::ParseError, e.to_string()))?;
        *out = cqmd_handle(f.params().map_err(invalid)?);
        Ok(())
    })
}

/// Random parameters with hidden size `d` (even) and feed-forward size `d_ff`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_cqmd_random(d: usize, d_ff: usize, seed: u64, out: *mut *mut TakitCqmd) -> TakitStatus {
    call(|| {
        if d < 2 || !d.is_multiple_of(2) || d_ff == 0 {
            return Err(invalid("d must be even and at least 2, d_ff positive"));
        }
        let out = out_arg(out, "out")?;
        *out = cqmd_handle(CqmdParams::random(d, d_ff, &mut Pcg32::seed_from(seed)));
        Ok(())
    })
}

/// # Safety
/// `h` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn takit_cqmd_free(h: *mut TakitCqmd) {
    if !h.is_null() {
        drop(std::boxed::Box::from_raw(h));
    }
}

/// # Safety
/// `h` is a live handle; `d` and `d_ff` are writable.
#[no_mangle]
pub unsafe extern "C" fn takit_cqmd_dims(h: *const TakitCqmd, d: *mut usize, d_ff: *mut usize) -> TakitStatus {
    call(|| {
        let h = h.as_ref().ok_or_else(|| null("h"))?;
        *out_arg(d, "d")? = h.params.d();
        *out_arg(d_ff, "d_ff")? = h.params.d_ff();
        Ok(())
    })
}

/// Decodes a mask from final-layer hidden states.
///
/// `hidden` is row-major `rows x d`. The three index arrays partition the rows
/// into image, query and answer tokens; image rows are the `grid_h x grid_w`
/// patch grid in row-major order. The mask (`4*grid_h x 4*grid_w`, row-major)
/// is written to `mask_out`, which must hold at least that many doubles.
///
/// # Safety
/// Arrays hold the stated number of elements; `mask_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn takit_cqmd_forward(
    h: *const TakitCqmd,
    hidden: *const f64,
    rows: usize,
    idx_img: *const usize,
    n_img: usize,
    idx_q: *const usize,
    n_q: usize,
    idx_a: *const usize,
    n_a: usize,
    grid_h: usize,
    grid_w: usize,
    mask_out: *mut f64,
    mask_len: usize,
) -> TakitStatus {
    call(|| {
        let h = h.as_ref().ok_or_else(|| null("h"))?;
        let d = h.params.d();
        let n = rows.checked_mul(d).ok_or_else(|| invalid("size overflows"))?;
        let data = slice_arg(hidden, n, "hidden")?;
        let hs = HiddenStates {
            h_out: Matrix::from_shape_vec((rows, d), data.to_vec()).map_err(invalid)?,
            idx_img: slice_arg(idx_img, n_img, "idx_img")?.to_vec(),
            idx_q: slice_arg(idx_q, n_q, "idx_q")?.to_vec(),
            idx_a: slice_arg(idx_a, n_a, "idx_a")?.to_vec(),
        };
        let need = 16 * grid_h * grid_w;
        if mask_len < need {
            return Err((
                TakitStatus::BufferTooSmall,
                format!("mask buffer holds {mask_len} values, {need} needed"),
            ));
        }
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let fw = forward(&hs, (grid_h, grid_w), &h.params).map_err(invalid)?;
        let out = std::slice::from_raw_parts_mut(mask_out, need);
        for (o, v) in out.iter_mut().zip(fw.mask.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Renders the de-stylized mask of `text` inside `bbox` and returns it as
/// run lengths (starting with a background run) over the row-major
/// `width x height` image. Release with `takit_rle_free`.
///
/// # Safety
/// `text` is NUL-terminated; `bbox` holds four doubles; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn takit_render_mask_rle(
    text: *const c_char,
    bbox: *const f64,
    width: u32,
    height: u32,
    out_rle: *mut *mut u32,
    out_len: *mut usize,
) -> TakitStatus {
    call(|| {
        let text = str_arg(text, "text")?;
        let b = box_arg(bbox, "bbox")?;
        let image = image_arg(width, height)?;
        let out_rle = out_arg(out_rle, "out_rle")?;
        let out_len = out_arg(out_len, "out_len")?;
        let r = default_rasterizer().map_err(invalid)?;
        let o = render_destylized(text, &b, image, r.as_ref()).map_err(invalid)?;
        let rle = o.mask.to_rle().into_boxed_slice();
        *out_len = rle.len();
        *out_rle = std::boxed::Box::into_raw(rle).cast();
        Ok(())
    })
}

/// # Safety
/// `rle` and `len` come from one `takit_render_mask_rle` call.
#[no_mangle]
pub unsafe extern "C" fn takit_rle_free(rle: *mut u32, len: usize) {
    if !rle.is_null() {
        drop(std::boxed::Box::from_raw(ptr::slice_from_raw_parts_mut(rle, len)));
    }
}
