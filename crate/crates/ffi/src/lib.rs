//! C ABI over the fableloop score parser, prompt renderer and survival analytics.
//!
//! Every entry point returns an [`FlStatus`]. On failure a message is kept per
//! thread and can be read with [`fl_last_error_message`]. Handles are opaque and
//! must be released with their matching `*_free` function. Strings returned
//! through `char **` belong to the caller and are released with [`fl_string_free`].

use fableloop::analytics::{
    fit_discrete_hazard, first_failure, survival_from_hazards, EventTime, FitError, FitOptions,
    ImprovementRule, Link, PersonPeriodRecord, SeparationPolicy, SurvivalFit,
};
use fableloop::domain::{BranchKey, SpecialAppearance, TileTuple, TupleId};
use fableloop::engine::{extract_score, ScoreError};
use fableloop::prompts::PromptForge;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    EmptyInput = 4,
    NoScoreFound = 5,
    AmbiguousScore = 6,
    ScoreOutOfRange = 7,
    TooShort = 8,
    InvalidTuple = 9,
    Template = 10,
    NoEvents = 11,
    Separation = 12,
    FitFailed = 13,
    BufferTooSmall = 14,
    Panic = 15,
}

/// Link function for [`fl_hazard_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlLink {
    Logit = 0,
    Cloglog = 1,
}

/// The six elements of a story tuple. `special_appearance` may be null, in
/// which case the Writer chooses it.
#[repr(C)]
pub struct FlTuple {
    pub protagonist: *const c_char,
    pub location: *const c_char,
    pub mood: *const c_char,
    pub important_object: *const c_char,
    pub activity: *const c_char,
    pub special_appearance: *const c_char,
}

/// Prompt templates.
pub struct FlPromptForge {
    forge: PromptForge,
}

/// Person-period records awaiting a fit.
pub struct FlHazardData {
    n_covariates: usize,
    records: Vec<PersonPeriodRecord>,
}

/// A fitted discrete-time hazard model.
pub struct FlHazardFit {
    fit: SurvivalFit,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FlStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn fail<T>(status: FlStatus, message: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, message.into()))
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            FlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(FlStatus::NullPointer, format!("`{name}` is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(FlStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(FlStatus::NullPointer, format!("`{name}` is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure(FlStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize, written: *mut usize) -> FfiResult {
    if !written.is_null() {
        *written = values.len();
    }
    if capacity < values.len() {
        return fail(
            FlStatus::BufferTooSmall,
            format!("need room for {} values, got {capacity}", values.len()),
        );
    }
    if !values.is_empty() {
        if out.is_null() {
            return fail(FlStatus::NullPointer, "`out` is null");
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

fn score_status(e: &ScoreError) -> FlStatus {
    match e {
        ScoreError::EmptyInput => FlStatus::EmptyInput,
        ScoreError::NoScoreFound => FlStatus::NoScoreFound,
        ScoreError::AmbiguousScore(_) => FlStatus::AmbiguousScore,
        ScoreError::OutOfRange(_) => FlStatus::ScoreOutOfRange,
    }
}

fn fit_status(e: &FitError) -> FlStatus {
    match e {
        FitError::NoEvents => FlStatus::NoEvents,
        FitError::CompleteSeparation(_) => FlStatus::Separation,
        FitError::DimensionMismatch | FitError::MissingPeriod(_) => FlStatus::InvalidArgument,
        _ => FlStatus::FitFailed,
    }
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses the overall score out of an Editor response. On success writes the
/// value and the byte range `[start, end)` of the number within `raw`; either
/// span pointer may be null.
///
/// # Safety
/// `raw` must be a nul-terminated string; output pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn fl_extract_score(
    raw: *const c_char,
    out_value: *mut f64,
    out_start: *mut usize,
    out_end: *mut usize,
) -> FlStatus {
    guard(|| {
        let raw = str_arg(raw, "raw")?;
        let value = out_arg(out_value, "out_value")?;
        let parse = extract_score(raw).map_err(|e| Failure(score_status(&e), e.to_string()))?;
        *value = parse.value;
        if !out_start.is_null() {
            *out_start = parse.source_span.start;
        }
        if !out_end.is_null() {
            *out_end = parse.source_span.end;
        }
        Ok(())
    })
}

/// First transition where `scores` fails to improve. `strict` makes a tie a
/// failure. Writes the period and whether it is an event (`false` means
/// censored after the last transition).
///
/// # Safety
/// `scores` must point to `len` doubles; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_detect_mortality(
    scores: *const f64,
    len: usize,
    strict: bool,
    out_period: *mut u32,
    out_event: *mut bool,
) -> FlStatus {
    guard(|| {
        let scores = slice_arg(scores, len, "scores")?;
        let period = out_arg(out_period, "out_period")?;
        let event = out_arg(out_event, "out_event")?;
        let time = first_failure(scores, ImprovementRule::from_strict(strict))
            .map_err(|e| Failure(FlStatus::TooShort, e.to_string()))?;
        *period = time.last_period();
        *event = matches!(time, EventTime::Event { .. });
        Ok(())
    })
}

/// Cumulative survival `S(t)` for `len` per-period hazards, written to `out`.
///
/// # Safety
/// `hazards` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_survival_from_hazards(
    hazards: *const f64,
    len: usize,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        let hazards = slice_arg(hazards, len, "hazards")?;
        if let Some(h) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return fail(FlStatus::InvalidArgument, format!("hazard {h} is outside [0, 1]"));
        }
        copy_out(&survival_from_hazards(hazards), out, len, ptr::null_mut())
    })
}

/// Built-in prompt templates.
#[no_mangle]
pub extern "C" fn fl_prompt_forge_builtin() -> *mut FlPromptForge {
    catch_unwind(|| Box::into_raw(Box::new(FlPromptForge { forge: PromptForge::builtin() })))
        .unwrap_or(ptr::null_mut())
}

/// Templates loaded from a directory of template files.
///
/// # Safety
/// `dir` must be a nul-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_prompt_forge_load_dir(
    dir: *const c_char,
    out: *mut *mut FlPromptForge,
) -> FlStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let forge = PromptForge::load_dir(Path::new(dir))
            .map_err(|e| Failure(FlStatus::Template, e.to_string()))?;
        *out = Box::into_raw(Box::new(FlPromptForge { forge }));
        Ok(())
    })
}

/// # Safety
/// `forge` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_prompt_forge_free(forge: *mut FlPromptForge) {
    if !forge.is_null() {
        drop(Box::from_raw(forge));
    }
}

unsafe fn tuple_arg(t: *const FlTuple) -> FfiResult<TileTuple> {
    let t = t
        .as_ref()
        .ok_or_else(|| Failure(FlStatus::NullPointer, "`tuple` is null".into()))?;
    let special = if t.special_appearance.is_null() {
        SpecialAppearance::AiChosen
    } else {
        match str_arg(t.special_appearance, "special_appearance")?.trim() {
            "" | "ai_chosen" => SpecialAppearance::AiChosen,
            s => SpecialAppearance::Tile(s.to_string()),
        }
    };
    let tuple = TileTuple {
        protagonist: str_arg(t.protagonist, "protagonist")?.trim().to_string(),
        location: str_arg(t.location, "location")?.trim().to_string(),
        mood: str_arg(t.mood, "mood")?.trim().to_string(),
        important_object: str_arg(t.important_object, "important_object")?.trim().to_string(),
        activity: str_arg(t.activity, "activity")?.trim().to_string(),
        special_appearance: special,
    };
    tuple
        .validate()
        .map_err(|e| Failure(FlStatus::InvalidTuple, e.to_string()))?;
    Ok(tuple)
}

/// Renders the first Writer prompt for `tuple`. The result is released with
/// [`fl_string_free`].
///
/// # Safety
/// `forge` and `tuple` must be valid; every non-null string in `tuple` must be
/// nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_prompt_forge_render_writer_first(
    forge: *const FlPromptForge,
    tuple: *const FlTuple,
    out: *mut *mut c_char,
) -> FlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let forge = forge
            .as_ref()
            .ok_or_else(|| Failure(FlStatus::NullPointer, "`forge` is null".into()))?;
        let tuple = tuple_arg(tuple)?;
        let prompt = forge
            .forge
            .render_writer_first(&tuple)
            .map_err(|e| Failure(FlStatus::Template, e.to_string()))?;
        let c = CString::new(prompt)
            .or_else(|_| fail(FlStatus::Template, "rendered prompt contains a nul byte"))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// An empty record set with `n_covariates` covariates per record.
#[no_mangle]
pub extern "C" fn fl_hazard_data_new(n_covariates: usize) -> *mut FlHazardData {
    Box::into_raw(Box::new(FlHazardData {
        n_covariates,
        records: Vec::new(),
    }))
}

/// # Safety
/// `data` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_data_free(data: *mut FlHazardData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Adds one record: a branch at risk in `period` (1-based) with covariates `x`
/// (`n_covariates` doubles; may be null when there are none).
///
/// # Safety
/// `data` must be valid; `x` must point to `n_covariates` doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_data_push(
    data: *mut FlHazardData,
    period: u32,
    x: *const f64,
    event: bool,
) -> FlStatus {
    guard(|| {
        let data = out_arg(data, "data")?;
        if period == 0 {
            return fail(FlStatus::InvalidArgument, "periods start at 1");
        }
        let x = slice_arg(x, data.n_covariates, "x")?;
        if x.iter().any(|v| !v.is_finite()) {
            return fail(FlStatus::InvalidArgument, "covariates must be finite");
        }
        let branch = BranchKey {
            tuple_id: TupleId(format!("r{}", data.records.len())),
            editor: String::new(),
        };
        data.records.push(PersonPeriodRecord {
            branch,
            period,
            covariates: x.to_vec(),
            event,
        });
        Ok(())
    })
}

/// Number of records added so far.
///
/// # Safety
/// `data` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_data_len(data: *const FlHazardData) -> usize {
    data.as_ref().map_or(0, |d| d.records.len())
}

/// Fits the hazard model. With `firth` set, separation is handled by a
/// penalized fit (logit only); otherwise it is an error.
///
/// # Safety
/// `data` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit(
    data: *const FlHazardData,
    link: FlLink,
    firth: bool,
    out: *mut *mut FlHazardFit,
) -> FlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let data = data
            .as_ref()
            .ok_or_else(|| Failure(FlStatus::NullPointer, "`data` is null".into()))?;
        let names: Vec<String> = (1..=data.n_covariates).map(|i| format!("x{i}")).collect();
        let opts = FitOptions {
            link: match link {
                FlLink::Logit => Link::Logit,
                FlLink::Cloglog => Link::Cloglog,
            },
            separation: if firth {
                SeparationPolicy::Firth
            } else {
                SeparationPolicy::Error
            },
            ..FitOptions::default()
        };
        let fit = fit_discrete_hazard(&data.records, &names, &opts)
            .map_err(|e| Failure(fit_status(&e), e.to_string()))?;
        *out = Box::into_raw(Box::new(FlHazardFit { fit }));
        Ok(())
    })
}

/// # Safety
/// `fit` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_free(fit: *mut FlHazardFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_n_periods(fit: *const FlHazardFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.n_periods())
}

/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_n_covariates(fit: *const FlHazardFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.coefficients.len())
}

/// Whether the penalized fit was used.
///
/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_penalized(fit: *const FlHazardFit) -> bool {
    fit.as_ref().is_some_and(|f| f.fit.penalized)
}

/// Log-likelihood at the estimate.
///
/// # Safety
/// `fit` must be valid or null (NaN is returned).
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_log_likelihood(fit: *const FlHazardFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.fit.log_likelihood)
}

/// Likelihood-ratio p-value of the covariate block; NaN without covariates.
///
/// # Safety
/// `fit` must be valid or null (NaN is returned).
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_p_value(fit: *const FlHazardFit) -> f64 {
    fit.as_ref()
        .and_then(|f| f.fit.p_value)
        .unwrap_or(f64::NAN)
}

/// Copies the period effects into `out`. `written` (may be null) receives the
/// number needed, also when `capacity` is too small.
///
/// # Safety
/// `fit` must be valid; `out` must point to `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_period_effects(
    fit: *const FlHazardFit,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FlStatus {
    guard(|| {
        let fit = fit_arg(fit)?;
        copy_out(&fit.fit.period_effects, out, capacity, written)
    })
}

/// Copies the covariate coefficients into `out`, as for period effects.
///
/// # Safety
/// `fit` must be valid; `out` must point to `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_coefficients(
    fit: *const FlHazardFit,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FlStatus {
    guard(|| {
        let fit = fit_arg(fit)?;
        copy_out(&fit.fit.coefficients, out, capacity, written)
    })
}

/// Fitted hazards `h(t | x)` for every period.
///
/// # Safety
/// `fit` must be valid; `x` must point to `n_covariates` doubles; `out` to
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_hazards(
    fit: *const FlHazardFit,
    x: *const f64,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FlStatus {
    guard(|| {
        let fit = fit_arg(fit)?;
        let x = slice_arg(x, fit.fit.coefficients.len(), "x")?;
        copy_out(&fit.fit.hazards(x), out, capacity, written)
    })
}

/// Survival curve `S(t | x)` for every period.
///
/// # Safety
/// As for [`fl_hazard_fit_hazards`].
#[no_mangle]
pub unsafe extern "C" fn fl_hazard_fit_survival(
    fit: *const FlHazardFit,
    x: *const f64,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FlStatus {
    guard(|| {
        let fit = fit_arg(fit)?;
        let x = slice_arg(x, fit.fit.coefficients.len(), "x")?;
        copy_out(&survival_from_hazards(&fit.fit.hazards(x)), out, capacity, written)
    })
}

unsafe fn fit_arg<'a>(fit: *const FlHazardFit) -> FfiResult<&'a FlHazardFit> {
    fit.as_ref()
        .ok_or_else(|| Failure(FlStatus::NullPointer, "`fit` is null".into()))
}
