//! C ABI over the trustsim core.
//!
//! Every fallible function returns a [`TsStatus`]. On failure the message
//! is available from [`ts_last_error_message`] on the same thread until the
//! next call into the library. Handles are opaque and must be released with
//! their `_free` function. Strings returned through `char **` out-parameters
//! are owned by the caller and released with [`ts_string_free`]; strings
//! returned directly from a handle accessor live as long as the handle.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use trustsim::anchor::{PcrBank, PCR_COUNT};
use trustsim::crypto::{hash160, Digest160};
use trustsim::scenarios::{self, ScenarioError, VerifyError};

/// Length in bytes of a register value or measurement.
pub const TS_DIGEST_LEN: usize = 20;
/// Number of registers in a bank.
pub const TS_PCR_COUNT: usize = 24;
const _: () = assert!(TS_PCR_COUNT == PCR_COUNT);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Unknown attack, bad variant or malformed variant JSON.
    Config = 3,
    UnknownScenario = 4,
    /// The scenario failed while running.
    Run = 5,
    /// A transcript could not be parsed.
    Parse = 6,
    /// A register index was out of range.
    OutOfRange = 7,
    /// The library panicked; the call had no effect.
    Panic = 8,
}

/// A finished scenario run.
pub struct TsRun {
    transcript: CString,
    report_json: CString,
    passed: bool,
}

/// A bank of SHA-1 platform configuration registers.
pub struct TsPcrBank(PcrBank);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn fail(status: TsStatus, msg: impl Into<String>) -> TsStatus {
    set_error(msg);
    status
}

/// Run `f`, clearing the error slot first and mapping a panic to
/// `TsStatus::Panic`.
fn guard(f: impl FnOnce() -> TsStatus) -> TsStatus {
    set_error("");
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(TsStatus::Panic, "internal panic"))
}

/// Borrow a C string; `Ok(None)` for null when `optional`.
unsafe fn str_arg<'a>(p: *const c_char, what: &str, optional: bool) -> Result<Option<&'a str>, TsStatus> {
    if p.is_null() {
        return if optional { Ok(None) } else { Err(fail(TsStatus::NullArgument, format!("{what} is null"))) };
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| fail(TsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn to_c(s: String) -> CString {
    CString::new(s.replace('\0', "\\u0000")).unwrap_or_default()
}

fn scenario_status(e: &ScenarioError) -> TsStatus {
    match e {
        ScenarioError::Config(_) => TsStatus::Config,
        ScenarioError::UnknownScenario(_) => TsStatus::UnknownScenario,
        _ => TsStatus::Run,
    }
}

/// Run a catalog scenario.
///
/// `attack` may be null for an attack-free run. `variants_json` may be null
/// or a JSON object of string overrides, e.g. `{"encryption":"off"}`.
/// On success `*out` receives a handle to free with [`ts_run_free`].
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_run_new(
    scenario: *const c_char,
    seed: u64,
    attack: *const c_char,
    variants_json: *const c_char,
    out: *mut *mut TsRun,
) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let args = (|| {
            let name = str_arg(scenario, "scenario", false)?.unwrap_or_default();
            let attack = str_arg(attack, "attack", true)?;
            let overrides: BTreeMap<String, String> = match str_arg(variants_json, "variants_json", true)? {
                Some(j) => {
                    serde_json::from_str(j).map_err(|e| fail(TsStatus::Config, format!("variants_json: {e}")))?
                }
                None => BTreeMap::new(),
            };
            Ok((name, attack, overrides))
        })();
        let (name, attack, overrides) = match args {
            Ok(a) => a,
            Err(status) => return status,
        };
        let attacks: Vec<String> = attack.into_iter().map(str::to_string).collect();
        match scenarios::run_scenario(name, seed, &attacks, &overrides) {
            Ok(r) => {
                let report = serde_json::to_string(&r.report).expect("report serializes");
                *out = Box::into_raw(Box::new(TsRun {
                    transcript: to_c(r.transcript.to_jsonl()),
                    report_json: to_c(report),
                    passed: r.report.passed,
                }));
                TsStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// 1 if every check held, 0 if not, -1 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle from [`ts_run_new`].
#[no_mangle]
pub unsafe extern "C" fn ts_run_passed(run: *const TsRun) -> c_int {
    run.as_ref().map_or(-1, |r| c_int::from(r.passed))
}

/// JSON-lines transcript; valid until the handle is freed. Null for a null
/// handle.
///
/// # Safety
/// `run` must be null or a live handle from [`ts_run_new`].
#[no_mangle]
pub unsafe extern "C" fn ts_run_transcript(run: *const TsRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.transcript.as_ptr())
}

/// Report as JSON; valid until the handle is freed. Null for a null handle.
///
/// # Safety
/// `run` must be null or a live handle from [`ts_run_new`].
#[no_mangle]
pub unsafe extern "C" fn ts_run_report_json(run: *const TsRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.report_json.as_ptr())
}

/// # Safety
/// `run` must be null or a handle from [`ts_run_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_run_free(run: *mut TsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Audit, replay and re-check a transcript.
///
/// On `TsStatus::Ok`, `*out_report_json` receives the report (free with
/// [`ts_string_free`]) and `*out_passed` is 1 if every check held. A header
/// naming an unknown scenario, attack or variant yields `TsStatus::Config`
/// or `TsStatus::UnknownScenario`.
///
/// # Safety
/// `transcript` must be NUL-terminated; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_verify_transcript(
    transcript: *const c_char,
    out_report_json: *mut *mut c_char,
    out_passed: *mut c_int,
) -> TsStatus {
    guard(|| {
        if out_report_json.is_null() || out_passed.is_null() {
            return fail(TsStatus::NullArgument, "out pointer is null");
        }
        *out_report_json = ptr::null_mut();
        *out_passed = 0;
        let text = match str_arg(transcript, "transcript", false) {
            Ok(t) => t.unwrap_or_default(),
            Err(s) => return s,
        };
        match scenarios::verify_transcript(text) {
            Ok(report) => {
                *out_passed = c_int::from(report.passed);
                *out_report_json = to_c(serde_json::to_string(&report).expect("report serializes")).into_raw();
                TsStatus::Ok
            }
            Err(VerifyError::Parse(e)) => fail(TsStatus::Parse, e.to_string()),
            Err(VerifyError::Scenario(e)) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Catalog as a JSON array of `{name, kind, description, attacks,
/// variants}`. Free with [`ts_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_catalog_json(out: *mut *mut c_char) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let mut entries = Vec::new();
        for name in scenarios::names() {
            let s = match scenarios::load(name) {
                Ok(s) => s,
                Err(e) => return fail(TsStatus::Config, e.to_string()),
            };
            entries.push(serde_json::json!({
                "name": s.name,
                "kind": s.kind.as_str(),
                "description": s.description,
                "attacks": s.attacks,
                "variants": s.resolve_variants(&BTreeMap::new()).unwrap_or_default(),
            }));
        }
        *out = to_c(serde_json::Value::Array(entries).to_string()).into_raw();
        TsStatus::Ok
    })
}

/// Release a string returned through an out-parameter.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// SHA-1 of `len` bytes at `data` into `out[20]`. `data` may be null when
/// `len` is 0.
///
/// # Safety
/// `data` must be readable for `len` bytes; `out` writable for 20.
#[no_mangle]
pub unsafe extern "C" fn ts_hash160(data: *const u8, len: usize, out: *mut u8) -> TsStatus {
    guard(|| {
        if out.is_null() || (data.is_null() && len > 0) {
            return fail(TsStatus::NullArgument, "data or out is null");
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        ptr::copy_nonoverlapping(hash160(bytes).0.as_ptr(), out, TS_DIGEST_LEN);
        TsStatus::Ok
    })
}

/// A bank with every register zero. Free with [`ts_pcr_bank_free`].
#[no_mangle]
pub extern "C" fn ts_pcr_bank_new() -> *mut TsPcrBank {
    Box::into_raw(Box::new(TsPcrBank(PcrBank::new())))
}

/// Extend register `index` with a 20-byte measurement.
///
/// # Safety
/// `bank` must be a live handle; `measurement` readable for 20 bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_pcr_bank_extend(bank: *mut TsPcrBank, index: usize, measurement: *const u8) -> TsStatus {
    guard(|| {
        let Some(bank) = bank.as_mut() else { return fail(TsStatus::NullArgument, "bank is null") };
        if measurement.is_null() {
            return fail(TsStatus::NullArgument, "measurement is null");
        }
        let mut m = [0u8; TS_DIGEST_LEN];
        ptr::copy_nonoverlapping(measurement, m.as_mut_ptr(), TS_DIGEST_LEN);
        match bank.0.extend(index, &Digest160(m)) {
            Ok(_) => TsStatus::Ok,
            Err(e) => fail(TsStatus::OutOfRange, e.to_string()),
        }
    })
}

/// Copy register `index` into `out[20]`.
///
/// # Safety
/// `bank` must be a live handle; `out` writable for 20 bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_pcr_bank_read(bank: *const TsPcrBank, index: usize, out: *mut u8) -> TsStatus {
    guard(|| {
        let Some(bank) = bank.as_ref() else { return fail(TsStatus::NullArgument, "bank is null") };
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        match bank.0.read(index) {
            Ok(v) => {
                ptr::copy_nonoverlapping(v.0.as_ptr(), out, TS_DIGEST_LEN);
                TsStatus::Ok
            }
            Err(e) => fail(TsStatus::OutOfRange, e.to_string()),
        }
    })
}

/// # Safety
/// `bank` must be null or a handle from [`ts_pcr_bank_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_pcr_bank_free(bank: *mut TsPcrBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Message for the last failure on this thread, or an empty string. Valid
/// until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
