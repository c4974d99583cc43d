//! C interface to the carbonci engine.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every call returns a [`CciStatus`]; on
//! failure `cci_last_error_message` describes the error for the calling
//! thread. Strings handed out by the library must be released with
//! `cci_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use carbonci::carbon::{to_instant, DataError, IntensityDataset, IntensityKind, RegionId, SyntheticConfig};
use carbonci::scheduler::{StrategyConfig, StrategyKind};
use carbonci::service::{CompletionMessage, IntensitySource, ScheduleRequestMessage, Service, ServiceConfig, ServiceError};
use carbonci::workflow::parse_annotation;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CciStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Malformed = 4,
    OutOfCoverage = 5,
    Infeasible = 6,
    UnknownRegion = 7,
    InvalidArgument = 8,
    UnknownJob = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CciKind {
    Actual = 0,
    Forecast = 1,
}

/// An intensity dataset.
pub struct CciDataset(IntensityDataset);

/// A scheduling service bound to a dataset snapshot.
pub struct CciService(Service);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(CciStatus, String);

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io { .. } => CciStatus::Io,
            DataError::OutOfCoverage { .. } => CciStatus::OutOfCoverage,
            DataError::UnknownRegion(_) => CciStatus::UnknownRegion,
            DataError::ZeroOrNegativeDuration(_) | DataError::InvalidConfig(_) => CciStatus::InvalidArgument,
            _ => CciStatus::Malformed,
        };
        Failure(status, e.to_string())
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::BadRequest(_) => CciStatus::Malformed,
            ServiceError::Infeasible(_) => CciStatus::Infeasible,
            ServiceError::OutOfCoverage(_) => CciStatus::OutOfCoverage,
            ServiceError::UnknownJob(_) => CciStatus::UnknownJob,
            ServiceError::Refresh(_) | ServiceError::Internal(_) => CciStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CciStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CciStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CciStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CciStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CciStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(CciStatus::NullPointer, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(CciStatus::NullPointer, "output pointer is null".into()));
    }
    out.write(value);
    Ok(())
}

fn string_out(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(CciStatus::Malformed, "string contains NUL".into()))
}

fn json<T: serde::Serialize>(v: &T) -> Result<*mut c_char, Failure> {
    let s = serde_json::to_string(v).map_err(|e| Failure(CciStatus::Malformed, e.to_string()))?;
    string_out(s)
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn cci_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an intensity CSV; `forecast_path` may be NULL.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cci_dataset_load_csv(
    path: *const c_char,
    forecast_path: *const c_char,
    out: *mut *mut CciDataset,
) -> CciStatus {
    guard(|| {
        let source = IntensitySource {
            actual: Path::new(str_arg(path, "path")?).to_path_buf(),
            forecast: opt_str_arg(forecast_path, "forecast_path")?.map(Into::into),
        };
        let ds = source.load()?;
        write_out(out, Box::into_raw(Box::new(CciDataset(ds))))
    })
}

/// Builds a synthetic dataset from TOML settings (NULL for defaults).
///
/// # Safety
/// `config_toml` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cci_dataset_synthesize(config_toml: *const c_char, out: *mut *mut CciDataset) -> CciStatus {
    guard(|| {
        let cfg = match opt_str_arg(config_toml, "config_toml")? {
            Some(t) => SyntheticConfig::from_toml(t)?,
            None => SyntheticConfig::default(),
        };
        let ds = carbonci::synthesize_dataset(&cfg)?;
        write_out(out, Box::into_raw(Box::new(CciDataset(ds))))
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cci_dataset_free(ds: *mut CciDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cci_dataset_region_count(ds: *const CciDataset, out: *mut usize) -> CciStatus {
    guard(|| write_out(out, handle(ds, "dataset")?.0.regions().len()))
}

/// Emissions in REU of a 1 kW job in `region` from `start_unix` for
/// `duration_s` seconds.
///
/// # Safety
/// `ds` must be a live handle, `region` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cci_integrate_emissions(
    ds: *const CciDataset,
    region: *const c_char,
    start_unix: i64,
    duration_s: i64,
    kind: CciKind,
    out: *mut f64,
) -> CciStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let region = RegionId::new(str_arg(region, "region")?)
            .ok_or_else(|| Failure(CciStatus::UnknownRegion, "invalid region id".into()))?;
        let kind = match kind {
            CciKind::Actual => IntensityKind::Actual,
            CciKind::Forecast => IntensityKind::Forecast,
        };
        let v = ds.0.integrate_emissions(&region, to_instant(start_unix), duration_s, kind)?;
        write_out(out, v)
    })
}

/// Creates a service over a copy of `ds`. `strategy` is `round_robin`,
/// `location` or `location_time`; `buffer_hours` applies to the last.
///
/// # Safety
/// `ds` must be a live handle, `strategy` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cci_service_new(
    ds: *const CciDataset,
    strategy: *const c_char,
    buffer_hours: f64,
    out: *mut *mut CciService,
) -> CciStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let name = str_arg(strategy, "strategy")?;
        let kind = StrategyKind::parse(name)
            .ok_or_else(|| Failure(CciStatus::InvalidArgument, format!("unknown strategy {name:?}")))?;
        let strategy = match kind {
            StrategyKind::RoundRobin => StrategyConfig::round_robin(),
            StrategyKind::LocationShift => StrategyConfig::location_shift(),
            StrategyKind::LocationTimeShift => StrategyConfig::location_time_shift(buffer_hours),
        };
        let config = ServiceConfig { strategy, ..ServiceConfig::default() };
        let svc = Service::new(config, ds.0.clone()).map_err(|e| Failure(CciStatus::InvalidArgument, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(CciService(svc))))
    })
}

/// # Safety
/// `svc` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cci_service_free(svc: *mut CciService) {
    if !svc.is_null() {
        drop(Box::from_raw(svc));
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(CciStatus::Malformed, e.to_string()))
}

/// Schedules a job described by a JSON request; writes the JSON response.
///
/// # Safety
/// `svc` must be a live handle, `request_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cci_schedule_json(
    svc: *const CciService,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> CciStatus {
    guard(|| {
        let svc = handle(svc, "service")?;
        let msg: ScheduleRequestMessage = parse_json(str_arg(request_json, "request_json")?)?;
        let resp = svc.0.handle_schedule(&msg)?;
        write_out(out, json(&resp)?)
    })
}

/// Reports a completed job; writes the JSON acknowledgement.
///
/// # Safety
/// `svc` must be a live handle, `completion_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cci_complete_json(
    svc: *const CciService,
    completion_json: *const c_char,
    out: *mut *mut c_char,
) -> CciStatus {
    guard(|| {
        let svc = handle(svc, "service")?;
        let msg: CompletionMessage = parse_json(str_arg(completion_json, "completion_json")?)?;
        let ack = svc.0.handle_report_completion(&msg)?;
        write_out(out, json(&ack)?)
    })
}

/// Parses the carbon annotations of a workflow document into JSON.
///
/// # Safety
/// `yaml` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cci_parse_annotation(yaml: *const c_char, out: *mut *mut c_char) -> CciStatus {
    guard(|| {
        let a = parse_annotation(str_arg(yaml, "yaml")?).map_err(|e| Failure(CciStatus::Malformed, e.to_string()))?;
        write_out(out, json(&a)?)
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cci_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
