//! C ABI over `a2as-core`.
//!
//! Pointer contract, shared by every function: string arguments are
//! NUL-terminated UTF-8 and may be NULL only where noted. Handles come from
//! the matching constructor and are freed exactly once. Strings returned
//! through `char **` outputs belong to the caller and are released with
//! `a2as_string_free`. A failing call leaves its outputs untouched, except
//! `a2as_verify_context` and `a2as_audit_verify`, which still report what
//! they found.
//!
//! Every call returns an `A2asStatus`. On anything but `A2AS_STATUS_OK` a
//! message is available from `a2as_last_error` on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::{Arc, Mutex};

use a2as_core::behavior::{parse_certificate, ActionRequest, BehaviorCertificate, Verdict};
use a2as_core::boundary::{escape_tags, parse_window, unescape_tags};
use a2as_core::context::{ApprovalMode, MacKey, Message, RuntimeConfig};
use a2as_core::defense::default_profile;
use a2as_core::integrity::MessageStore;
use a2as_core::pipeline::{parse_jsonl, verify_audit_chain, ChainError, Clock, Runtime, SystemClock};
use a2as_core::policy::{parse_policy, PolicyDocument};
use chrono::{DateTime, Utc};

/// Status codes. 0 to 3 match the exit codes of the `a2as` CLI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A2asStatus {
    Ok = 0,
    /// Verification ran and rejected its input.
    VerifyFailed = 1,
    /// Bad key, clock or other configuration input.
    Usage = 2,
    /// Input text could not be parsed or was refused.
    Parse = 3,
    NullArgument = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A2asVerdict {
    Allow = 0,
    Deny = 1,
    RequireApproval = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A2asApprovalMode {
    Interactive = 0,
    Token = 1,
    Deny = 2,
}

/// Pinned time, or the system clock while unset.
#[derive(Default)]
struct HandleClock(Mutex<Option<DateTime<Utc>>>);

impl Clock for HandleClock {
    fn now(&self) -> DateTime<Utc> {
        let pinned = *self.0.lock().unwrap_or_else(|e| e.into_inner());
        pinned.unwrap_or_else(|| SystemClock.now())
    }
}

/// Runtime with its audit log. Not thread-safe; callers serialize access.
pub struct A2asRuntime {
    runtime: Runtime,
    clock: Arc<HandleClock>,
}

pub struct A2asCertificate {
    cert: BehaviorCertificate,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', "\\0")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (A2asStatus, String);

fn fail(status: A2asStatus, message: impl Into<String>) -> Failure {
    (status, message.into())
}

/// Runs `f`, records its error message and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<A2asStatus, Failure>) -> A2asStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            A2asStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(A2asStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(A2asStatus::Parse, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn to_c(text: String) -> Result<*mut c_char, Failure> {
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|_| fail(A2asStatus::Parse, "output contains a NUL byte"))
}

/// Stores `text` in `out` when `out` is non-NULL.
unsafe fn put(out: *mut *mut c_char, text: String) -> Result<(), Failure> {
    if !out.is_null() {
        *out = to_c(text)?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

unsafe fn runtime_mut<'a>(rt: *mut A2asRuntime) -> Result<&'a mut A2asRuntime, Failure> {
    rt.as_mut().ok_or_else(|| fail(A2asStatus::NullArgument, "runtime is NULL"))
}

fn load_policy(text: Option<&str>) -> Result<Option<PolicyDocument>, Failure> {
    text.map(|t| parse_policy(t).map_err(|e| fail(A2asStatus::Parse, format!("policy: {e}"))))
        .transpose()
}

fn load_transcript(text: &str, name: &str) -> Result<Vec<Message>, Failure> {
    serde_json::from_str(text).map_err(|e| fail(A2asStatus::Parse, format!("{name}: {e}")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn a2as_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn a2as_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn a2as_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a runtime keyed with `key_hex` (at least 16 bytes). `key_id` may
/// be NULL, which names the key `ffi`.
#[no_mangle]
pub unsafe extern "C" fn a2as_runtime_new(
    key_hex: *const c_char,
    key_id: *const c_char,
    out: *mut *mut A2asRuntime,
) -> A2asStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out is NULL"));
        }
        let key = MacKey::from_hex(str_arg(key_hex, "key_hex")?).map_err(|e| fail(A2asStatus::Usage, e.to_string()))?;
        let key_id = opt_str_arg(key_id, "key_id")?.unwrap_or("ffi");
        let clock = Arc::new(HandleClock::default());
        let runtime = Runtime::new(RuntimeConfig::new(key_id, key), clock.clone());
        *out = Box::into_raw(Box::new(A2asRuntime { runtime, clock }));
        Ok(A2asStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn a2as_runtime_free(rt: *mut A2asRuntime) {
    if !rt.is_null() {
        drop(Box::from_raw(rt));
    }
}

/// Pins the clock to an RFC 3339 time; NULL returns to the system clock.
#[no_mangle]
pub unsafe extern "C" fn a2as_runtime_set_clock(rt: *mut A2asRuntime, rfc3339: *const c_char) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        let pinned = opt_str_arg(rfc3339, "rfc3339")?
            .map(|t| {
                DateTime::parse_from_rfc3339(t)
                    .map(|d| d.with_timezone(&Utc))
                    .map_err(|e| fail(A2asStatus::Usage, format!("clock: {e}")))
            })
            .transpose()?;
        *rt.clock.0.lock().unwrap_or_else(|e| e.into_inner()) = pinned;
        Ok(A2asStatus::Ok)
    })
}

/// `mode` is an `A2asApprovalMode` value; anything else is a usage error.
#[no_mangle]
pub unsafe extern "C" fn a2as_runtime_set_approval_mode(rt: *mut A2asRuntime, mode: u32) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        rt.runtime.config_mut().approval_mode = match mode {
            m if m == A2asApprovalMode::Interactive as u32 => ApprovalMode::Interactive,
            m if m == A2asApprovalMode::Token as u32 => ApprovalMode::Token,
            m if m == A2asApprovalMode::Deny as u32 => ApprovalMode::Deny,
            other => return Err(fail(A2asStatus::Usage, format!("unknown approval mode {other}"))),
        };
        Ok(A2asStatus::Ok)
    })
}

/// Directory that relative certificate and action paths resolve against.
#[no_mangle]
pub unsafe extern "C" fn a2as_runtime_set_workdir(rt: *mut A2asRuntime, path: *const c_char) -> A2asStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        runtime_mut(rt)?.runtime.config_mut().workdir = path.into();
        Ok(A2asStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn a2as_certificate_parse(json: *const c_char, out: *mut *mut A2asCertificate) -> A2asStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out is NULL"));
        }
        let cert = parse_certificate(str_arg(json, "json")?).map_err(|e| fail(A2asStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(A2asCertificate { cert }));
        Ok(A2asStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn a2as_certificate_free(cert: *mut A2asCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

/// Instruments a JSON transcript. `cert` and `policy_text` may be NULL;
/// `with_defense` adds the default defense block. Either output may be NULL:
/// `out_rendered` receives the prompt text, `out_json` the structured form.
#[no_mangle]
pub unsafe extern "C" fn a2as_instrument(
    rt: *mut A2asRuntime,
    transcript_json: *const c_char,
    cert: *const A2asCertificate,
    policy_text: *const c_char,
    with_defense: bool,
    out_rendered: *mut *mut c_char,
    out_json: *mut *mut c_char,
) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        let messages = load_transcript(str_arg(transcript_json, "transcript_json")?, "transcript")?;
        let policy = load_policy(opt_str_arg(policy_text, "policy_text")?)?;
        let profile = with_defense.then(default_profile);
        let prompt = rt
            .runtime
            .instrument_request(&messages, cert.as_ref().map(|c| &c.cert), policy.as_ref(), profile.as_ref())
            .map_err(|e| fail(A2asStatus::Parse, e.to_string()))?;
        let rendered = to_c(prompt.render())?;
        let json = to_c(to_json(&prompt))?;
        for (out, value) in [(out_rendered, rendered), (out_json, json)] {
            if out.is_null() {
                drop(CString::from_raw(value));
            } else {
                *out = value;
            }
        }
        Ok(A2asStatus::Ok)
    })
}

/// Gates one JSON action. Returns OK whatever the verdict; the verdict goes
/// to `out_verdict` and the full decision to `out_decision_json` (nullable).
/// A NULL `cert` denies everything while enforcement is on.
#[no_mangle]
pub unsafe extern "C" fn a2as_gate_action(
    rt: *mut A2asRuntime,
    action_json: *const c_char,
    cert: *const A2asCertificate,
    out_verdict: *mut A2asVerdict,
    out_decision_json: *mut *mut c_char,
) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        if out_verdict.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out_verdict is NULL"));
        }
        let action: ActionRequest = serde_json::from_str(str_arg(action_json, "action_json")?)
            .map_err(|e| fail(A2asStatus::Parse, format!("action: {e}")))?;
        let decision = rt.runtime.gate_action(&action, cert.as_ref().map(|c| &c.cert));
        put(out_decision_json, to_json(&decision))?;
        *out_verdict = match decision.verdict {
            Verdict::Allow => A2asVerdict::Allow,
            Verdict::Deny => A2asVerdict::Deny,
            Verdict::RequireApproval => A2asVerdict::RequireApproval,
        };
        Ok(A2asStatus::Ok)
    })
}

/// Verifies a rendered context against the JSON transcript it came from.
/// OK when every segment verifies, VERIFY_FAILED otherwise, including when
/// the rendering no longer parses. The report goes to `out_report_json`
/// (nullable) in both cases.
#[no_mangle]
pub unsafe extern "C" fn a2as_verify_context(
    rt: *mut A2asRuntime,
    rendered: *const c_char,
    originals_json: *const c_char,
    policy_text: *const c_char,
    out_report_json: *mut *mut c_char,
) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        let rendered = str_arg(rendered, "rendered")?;
        let originals = load_transcript(str_arg(originals_json, "originals_json")?, "originals")?;
        let policy = load_policy(opt_str_arg(policy_text, "policy_text")?)?;
        let window = match parse_window(rendered) {
            Ok(w) => w,
            Err(e) => return Err(fail(A2asStatus::VerifyFailed, format!("rendering does not parse: {e}"))),
        };
        let store = MessageStore::from_transcript(&originals);
        let report = rt.runtime.verify_request(&window, &store, policy.as_ref().map(|p| p.digest.as_str()));
        put(out_report_json, to_json(&report))?;
        if report.is_valid() {
            Ok(A2asStatus::Ok)
        } else {
            Err(fail(A2asStatus::VerifyFailed, "context rejected"))
        }
    })
}

/// Neutralizes boundary tags in untrusted text.
#[no_mangle]
pub unsafe extern "C" fn a2as_escape(text: *const c_char, out: *mut *mut c_char) -> A2asStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out is NULL"));
        }
        *out = to_c(escape_tags(str_arg(text, "text")?))?;
        Ok(A2asStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn a2as_unescape(text: *const c_char, out: *mut *mut c_char) -> A2asStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out is NULL"));
        }
        let plain = unescape_tags(str_arg(text, "text")?).map_err(|e| fail(A2asStatus::Parse, e.to_string()))?;
        *out = to_c(plain)?;
        Ok(A2asStatus::Ok)
    })
}

/// The runtime's audit log as JSON lines.
#[no_mangle]
pub unsafe extern "C" fn a2as_audit_export(rt: *mut A2asRuntime, out_jsonl: *mut *mut c_char) -> A2asStatus {
    guard(|| {
        let rt = runtime_mut(rt)?;
        if out_jsonl.is_null() {
            return Err(fail(A2asStatus::NullArgument, "out_jsonl is NULL"));
        }
        *out_jsonl = to_c(rt.runtime.audit().to_jsonl())?;
        Ok(A2asStatus::Ok)
    })
}

/// Checks a JSON-lines audit log. On VERIFY_FAILED the first broken seq is
/// written to `out_broken_seq` (nullable).
#[no_mangle]
pub unsafe extern "C" fn a2as_audit_verify(jsonl: *const c_char, out_broken_seq: *mut u64) -> A2asStatus {
    guard(|| {
        let records = parse_jsonl(str_arg(jsonl, "jsonl")?).map_err(|e| fail(A2asStatus::Parse, e.to_string()))?;
        match verify_audit_chain(&records) {
            Ok(()) => Ok(A2asStatus::Ok),
            Err(e @ ChainError::Broken { seq }) => {
                if !out_broken_seq.is_null() {
                    *out_broken_seq = seq;
                }
                Err(fail(A2asStatus::VerifyFailed, e.to_string()))
            }
        }
    })
}
