//! C ABI over `pba-core`.
//!
//! Conventions:
//! - every fallible function returns a [`PbaStatus`]; on failure a message
//!   is available from [`pba_last_error`] on the same thread;
//! - matrices are dense, row-major `double` arrays;
//! - sessions and reports are opaque handles released with their `_free`
//!   function; strings returned by the library are released with
//!   [`pba_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use pba_core::elicitation::{start_session, ElicitationSession, HypotheticalPolicy, StepAnswers};
use pba_core::linear_belief::{adjust_expectation, adjust_variance, pseudo_inverse, JointBelief, VariableSet};
use pba_core::synthesis::{dominance_check, pba};
use pba_core::workbench::documents::{
    self, BatchDocument, ClassDocument, InputRef, PriorDocument, ReportDocument, ReportInputs,
};
use pba_core::workbench::store::sha256_hex;
use pba_core::workbench::{ErrorKind, ServiceError};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Incoherent = 4,
    SessionClosed = 5,
    Degenerate = 6,
    Internal = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(PbaStatus, String);

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        let status = match (&e.kind, e.code.as_str()) {
            (_, "session_closed") => PbaStatus::SessionClosed,
            (_, "degenerate_conditioning") => PbaStatus::Degenerate,
            (ErrorKind::Incoherent, _) => PbaStatus::Incoherent,
            (ErrorKind::Internal, _) => PbaStatus::Internal,
            _ => PbaStatus::InvalidArgument,
        };
        Failure(status, message)
    }
}

macro_rules! impl_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                ServiceError::from(e).into()
            }
        }
    )*};
}
impl_failure!(
    pba_core::linear_belief::BeliefError,
    pba_core::synthesis::SynthesisError,
    pba_core::elicitation::ElicitationError,
    documents::DocumentError
);

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PbaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PbaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PbaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PbaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(PbaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable doubles, or be null when `len == 0`.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Failure> {
    Ok(DMatrix::from_row_slice(rows, cols, slice(p, rows * cols, what)?))
}

unsafe fn write_matrix(out: *mut f64, m: &DMatrix<f64>, what: &str) -> Result<(), Failure> {
    if m.is_empty() {
        return Ok(());
    }
    non_null(out, what)?;
    let dst = std::slice::from_raw_parts_mut(out, m.len());
    for (k, v) in m.transpose().iter().enumerate() {
        dst[k] = *v;
    }
    Ok(())
}

unsafe fn write_vec(out: *mut f64, cap: usize, values: &[f64], what: &str) -> Result<(), Failure> {
    if values.len() > cap {
        return Err(Failure(
            PbaStatus::BufferTooSmall,
            format!("{what}: {} values, capacity {cap}", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    non_null(out, what)?;
    std::slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    non_null(out, "output pointer")?;
    let c = CString::new(s).map_err(|_| Failure(PbaStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

// ---------------------------------------------------------------------------
// Errors and strings
// ---------------------------------------------------------------------------

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn pba_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pba_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Linear belief
// ---------------------------------------------------------------------------

/// Moore-Penrose inverse of a `rows x cols` matrix into `out` (`cols x rows`).
///
/// # Safety
/// `m` holds `rows * cols` doubles and `out` has room for as many.
#[no_mangle]
pub unsafe extern "C" fn pba_pseudo_inverse(m: *const f64, rows: usize, cols: usize, out: *mut f64) -> PbaStatus {
    guard(|| {
        let a = matrix(m, rows, cols, "m")?;
        write_matrix(out, &pseudo_inverse(&a)?, "out")
    })
}

/// Adjusts `B` (length `nb`) by observing `D` (length `nd`).
///
/// Writes `P_D(B)` to `out_expectation` (`nb`) and `Var_D(B)` to
/// `out_variance` (`nb x nb`); either output may be null to skip it.
/// Returns `Incoherent` when the joint specification is not coherent.
///
/// # Safety
/// Inputs must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn pba_adjust(
    nb: usize,
    nd: usize,
    prevision_b: *const f64,
    prevision_d: *const f64,
    var_b: *const f64,
    var_d: *const f64,
    cov_bd: *const f64,
    observed_d: *const f64,
    out_expectation: *mut f64,
    out_variance: *mut f64,
) -> PbaStatus {
    guard(|| {
        let joint = JointBelief::new(
            DVector::from_column_slice(slice(prevision_b, nb, "prevision_b")?),
            DVector::from_column_slice(slice(prevision_d, nd, "prevision_d")?),
            matrix(var_b, nb, nb, "var_b")?,
            matrix(var_d, nd, nd, "var_d")?,
            matrix(cov_bd, nb, nd, "cov_bd")?,
        )?;
        if !out_expectation.is_null() {
            let d = DVector::from_column_slice(slice(observed_d, nd, "observed_d")?);
            let e = adjust_expectation(&joint, &d)?;
            write_vec(out_expectation, nb, e.as_slice(), "out_expectation")?;
        }
        if !out_variance.is_null() {
            write_matrix(out_variance, &adjust_variance(&joint)?, "out_variance")?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Elicitation sessions
// ---------------------------------------------------------------------------

/// Opaque elicitation session.
pub struct PbaSession {
    inner: ElicitationSession,
}

/// Starts a session over `n` variables named by `names`, all sharing
/// `unit`. `integral` nonzero rounds hypothetical values to integers;
/// `multiplier` is the number of conditional standard deviations added to
/// form each hypothetical (0.5 is the usual choice).
///
/// # Safety
/// `names` holds `n` NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_session_new(
    names: *const *const c_char,
    n: usize,
    unit: *const c_char,
    integral: c_int,
    first_prevision: f64,
    first_variance: f64,
    multiplier: f64,
    out: *mut *mut PbaSession,
) -> PbaStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(names, "names")?;
        let mut list = Vec::with_capacity(n);
        for k in 0..n {
            list.push(str_arg(*names.add(k), "variable name")?.to_string());
        }
        let unit = if unit.is_null() { "" } else { str_arg(unit, "unit")? };
        let vars = VariableSet::uniform(&list, unit, integral != 0)?;
        let inner = start_session(vars, first_prevision, first_variance, HypotheticalPolicy { multiplier })?;
        *out = Box::into_raw(Box::new(PbaSession { inner }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`pba_session_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pba_session_free(s: *mut PbaSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

unsafe fn session<'a>(s: *const PbaSession) -> Result<&'a PbaSession, Failure> {
    non_null(s, "session")?;
    Ok(&*s)
}

unsafe fn session_mut<'a>(s: *mut PbaSession) -> Result<&'a mut PbaSession, Failure> {
    non_null(s, "session")?;
    Ok(&mut *s)
}

/// Number of variables elicited so far.
///
/// # Safety
/// `s` is a live session handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pba_session_elicited(s: *const PbaSession) -> usize {
    if s.is_null() {
        0
    } else {
        (*s).inner.elicited()
    }
}

/// The next question as a JSON document.
///
/// # Safety
/// `s` is a live session handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_session_next_json(s: *const PbaSession, out: *mut *mut c_char) -> PbaStatus {
    guard(|| {
        let prompt = session(s)?.inner.next_question()?;
        let json = serde_json::to_string(&prompt).map_err(|e| Failure(PbaStatus::Internal, e.to_string()))?;
        write_string(out, json)
    })
}

/// Hypothetical values chosen so far, into `out` (capacity `cap`); the count
/// is written to `len`.
///
/// # Safety
/// `out` has room for `cap` doubles; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_session_hypotheticals(
    s: *const PbaSession,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> PbaStatus {
    guard(|| {
        non_null(len, "len")?;
        let h = session(s)?.inner.hypotheticals();
        *len = h.len();
        write_vec(out, cap, h, "out")
    })
}

/// Answers for the next variable: one conditional prevision per
/// conditioning set (`k` of them for the `k`-th variable, counting from 0),
/// the conditional variance given all of them, and the unconditional
/// prevision. The session is unchanged on failure.
///
/// # Safety
/// `conditional_previsions` holds `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn pba_session_submit(
    s: *mut PbaSession,
    conditional_previsions: *const f64,
    k: usize,
    conditional_variance: f64,
    prior_prevision: f64,
) -> PbaStatus {
    guard(|| {
        let c = slice(conditional_previsions, k, "conditional_previsions")?.to_vec();
        session_mut(s)?.inner.submit_answers(StepAnswers {
            conditional_previsions: c,
            conditional_variance,
            prior_prevision,
        })?;
        Ok(())
    })
}

/// The covariance elicited so far (`k x k`, `k` = [`pba_session_elicited`]).
///
/// # Safety
/// `out` has room for `k * k` doubles.
#[no_mangle]
pub unsafe extern "C" fn pba_session_covariance(s: *const PbaSession, out: *mut f64) -> PbaStatus {
    guard(|| write_matrix(out, session(s)?.inner.covariance(), "out"))
}

/// Rescales the elicited correlations by `n` directly assessed marginal
/// variances and closes the session. Writes the `n x n` covariance to
/// `out_covariance` when non-null.
///
/// # Safety
/// `marginal_variances` holds `n` doubles; `out_covariance` has room for
/// `n * n`.
#[no_mangle]
pub unsafe extern "C" fn pba_session_finalize(
    s: *mut PbaSession,
    marginal_variances: *const f64,
    n: usize,
    out_covariance: *mut f64,
) -> PbaStatus {
    guard(|| {
        let mv = slice(marginal_variances, n, "marginal_variances")?;
        let spec = session_mut(s)?.inner.finalize(mv)?;
        if !out_covariance.is_null() {
            write_matrix(out_covariance, spec.covariance(), "out_covariance")?;
        }
        Ok(())
    })
}

/// The finalized prior as a prior document (JSON).
///
/// # Safety
/// `s` is a live session handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_session_prior_json(s: *const PbaSession, out: *mut *mut c_char) -> PbaStatus {
    guard(|| {
        let spec = session(s)?
            .inner
            .result()
            .ok_or_else(|| invalid("session is not finalized"))?;
        let doc = PriorDocument::from_spec(spec, None);
        write_string(out, String::from_utf8_lossy(&documents::to_bytes(&doc)).into_owned())
    })
}

/// The session transcript (JSON), enough to replay it.
///
/// # Safety
/// `s` is a live session handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_session_transcript_json(s: *const PbaSession, out: *mut *mut c_char) -> PbaStatus {
    guard(|| {
        let t = session(s)?.inner.transcript();
        let json = serde_json::to_string_pretty(&t).map_err(|e| Failure(PbaStatus::Internal, e.to_string()))?;
        write_string(out, json)
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Opaque assessment report.
pub struct PbaReport {
    doc: ReportDocument,
}

fn inline_ref(json: &str) -> InputRef {
    InputRef {
        id: "inline".into(),
        sha256: sha256_hex(json.as_bytes()),
    }
}

/// Runs the assessment from prior, class-structure and model-output
/// documents (JSON).
///
/// # Safety
/// String arguments are NUL-terminated UTF-8; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_report_compute(
    prior_json: *const c_char,
    classes_json: *const c_char,
    batch_json: *const c_char,
    out: *mut *mut PbaReport,
) -> PbaStatus {
    guard(|| {
        non_null(out, "out")?;
        let (p, c, b) = (
            str_arg(prior_json, "prior_json")?,
            str_arg(classes_json, "classes_json")?,
            str_arg(batch_json, "batch_json")?,
        );
        let prior = documents::from_bytes::<PriorDocument>(p.as_bytes())?.to_spec()?;
        let cs = documents::from_bytes::<ClassDocument>(c.as_bytes())?.to_structure()?;
        let batch = documents::from_bytes::<BatchDocument>(b.as_bytes())?.to_batch();
        let report = pba(&prior, &cs, &batch)?;
        let dominance = dominance_check(&prior, &cs, &batch)?;
        let inputs = ReportInputs {
            prior: inline_ref(p),
            class_structure: inline_ref(c),
            batch: inline_ref(b),
        };
        let doc = ReportDocument::new(inputs, Vec::new(), &report, dominance);
        *out = Box::into_raw(Box::new(PbaReport { doc }));
        Ok(())
    })
}

/// Parses a report document (JSON).
///
/// # Safety
/// `json` is NUL-terminated UTF-8; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_report_from_json(json: *const c_char, out: *mut *mut PbaReport) -> PbaStatus {
    guard(|| {
        non_null(out, "out")?;
        let doc = documents::from_bytes::<ReportDocument>(str_arg(json, "json")?.as_bytes())?;
        *out = Box::into_raw(Box::new(PbaReport { doc }));
        Ok(())
    })
}

/// # Safety
/// `r` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pba_report_free(r: *mut PbaReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

unsafe fn report<'a>(r: *const PbaReport) -> Result<&'a PbaReport, Failure> {
    non_null(r, "report")?;
    Ok(&*r)
}

/// Number of assessed variables, or 0 for a null handle.
///
/// # Safety
/// `r` is a live report handle or null.
#[no_mangle]
pub unsafe extern "C" fn pba_report_dim(r: *const PbaReport) -> usize {
    if r.is_null() {
        0
    } else {
        (*r).doc.variables.len()
    }
}

/// Which per-variable row of a report to read.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbaReportRow {
    /// Adjusted expectation of the quantity.
    Assessment = 0,
    /// Diagonal of the adjusted variance.
    AdjustedVariance = 1,
    /// Diagonal of the prior variance.
    PriorVariance = 2,
    /// Diagonal of the discrepancy variance.
    DiscrepancyVariance = 3,
    /// Percentage of prior variance resolved.
    ResolvedPct = 4,
    /// Percentage resolvable with unlimited model runs.
    MaxResolvablePct = 5,
}

/// Copies one per-variable row into `out` (capacity `cap`).
///
/// # Safety
/// `out` has room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn pba_report_row(r: *const PbaReport, row: PbaReportRow, out: *mut f64, cap: usize) -> PbaStatus {
    guard(|| {
        let d = &report(r)?.doc;
        let values = match row {
            PbaReportRow::Assessment => d.pba.clone(),
            PbaReportRow::AdjustedVariance => d.adjusted_variance_diag(),
            PbaReportRow::PriorVariance => d.prior_variance.clone(),
            PbaReportRow::DiscrepancyVariance => d.discrepancy_variance_diag(),
            PbaReportRow::ResolvedPct => d.resolved_pct.clone(),
            PbaReportRow::MaxResolvablePct => d.max_resolvable_pct.clone(),
        };
        write_vec(out, cap, &values, "out")
    })
}

/// 1 when the assessment is at least as close to the quantity as every
/// individual model in every variable, 0 otherwise or for a null handle.
///
/// # Safety
/// `r` is a live report handle or null.
#[no_mangle]
pub unsafe extern "C" fn pba_report_dominance_holds(r: *const PbaReport) -> c_int {
    if r.is_null() {
        0
    } else {
        (*r).doc.dominance.holds() as c_int
    }
}

/// The report document (JSON), identical to what the service stores.
///
/// # Safety
/// `r` is a live report handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pba_report_to_json(r: *const PbaReport, out: *mut *mut c_char) -> PbaStatus {
    guard(|| {
        let bytes = documents::to_bytes(&report(r)?.doc);
        write_string(out, String::from_utf8_lossy(&bytes).into_owned())
    })
}
