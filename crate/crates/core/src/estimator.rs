//! Duration estimates, implicit deadlines, dependency guesses and job
//! classification from historical execution data.

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, NaiveTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workflow::{Annotation, Histories, JobRequest, WorkflowHistory, WorkflowKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("no user estimate and no history for {0}")]
    NoEstimateAvailable(WorkflowKey),
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorParams {
    /// Buffer fraction with no history.
    pub b_max: f64,
    /// Floor of the buffer fraction.
    pub b_min: f64,
    #[serde(with = "hhmm")]
    pub office_start_utc: NaiveTime,
    #[serde(with = "hhmm")]
    pub office_end_utc: NaiveTime,
    pub dep_max_gap_s: i64,
    pub dep_min_support: usize,
    pub periodic_tolerance_s: i64,
    pub periodic_min_runs: usize,
    /// Shrink night-window deadlines using guessed downstream jobs.
    pub dependency_capping: bool,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            b_max: 0.5,
            b_min: 0.1,
            office_start_utc: NaiveTime::from_hms_opt(8, 0, 0).unwrap(),
            office_end_utc: NaiveTime::from_hms_opt(18, 0, 0).unwrap(),
            dep_max_gap_s: 300,
            dep_min_support: 3,
            periodic_tolerance_s: 15 * 60,
            periodic_min_runs: 3,
            dependency_capping: false,
        }
    }
}

impl EstimatorParams {
    pub fn from_toml(text: &str) -> Result<Self, EstimateError> {
        let params: Self =
            toml::from_str(text).map_err(|e| EstimateError::InvalidConfig(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), EstimateError> {
        if !(0.0 <= self.b_min && self.b_min <= self.b_max) {
            return Err(EstimateError::InvalidConfig(format!(
                "need 0 <= b_min <= b_max, got b_min={} b_max={}",
                self.b_min, self.b_max
            )));
        }
        if self.office_start_utc == self.office_end_utc {
            return Err(EstimateError::InvalidConfig("empty office hours".into()));
        }
        if self.dep_max_gap_s <= 0 || self.periodic_tolerance_s < 0 {
            return Err(EstimateError::InvalidConfig("gap and tolerance must be positive".into()));
        }
        Ok(())
    }
}

mod hhmm {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveTime::parse_from_str(&s, "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(&s, "%H:%M:%S"))
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateSource {
    UserOnly,
    HistoryOnly,
    Blended,
    /// Ground truth handed in by a replay harness.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationEstimate {
    pub expected_s: f64,
    pub buffer_s: f64,
    pub total_s: f64,
    /// Buffer as a fraction of the expected duration.
    pub fraction: f64,
    pub source: EstimateSource,
    pub n_history: usize,
}

impl DurationEstimate {
    /// An estimate equal to a known duration, without buffer.
    pub fn exact(duration_s: i64) -> Self {
        Self {
            expected_s: duration_s as f64,
            buffer_s: 0.0,
            total_s: duration_s as f64,
            fraction: 0.0,
            source: EstimateSource::Exact,
            n_history: 0,
        }
    }

    /// Planning length in whole seconds (rounded up).
    pub fn total_secs(&self) -> i64 {
        (self.total_s.ceil() as i64).max(1)
    }

    pub fn buffer_fraction(&self) -> f64 {
        self.fraction
    }
}

/// Blends a user estimate with the historical mean and adds a buffer that
/// shrinks as history grows.
pub fn estimate_duration(
    annotation: &Annotation,
    history: Option<&WorkflowHistory>,
    params: &EstimatorParams,
    workflow: &WorkflowKey,
) -> Result<DurationEstimate, EstimateError> {
    let n = history.map_or(0, WorkflowHistory::len);
    let mean = history.and_then(WorkflowHistory::mean_duration_s);
    let user = annotation.duration_estimate_s.map(|u| u as f64);

    let (expected, source) = match (user, mean) {
        (Some(u), Some(m)) => {
            let w = 1.0 / (1.0 + n as f64);
            (w * u + (1.0 - w) * m, EstimateSource::Blended)
        }
        (Some(u), None) => (u, EstimateSource::UserOnly),
        (None, Some(m)) => (m, EstimateSource::HistoryOnly),
        (None, None) => return Err(EstimateError::NoEstimateAvailable(workflow.clone())),
    };
    let fraction = (params.b_max / (1.0 + n as f64)).clamp(params.b_min, params.b_max);
    let buffer = fraction * expected;
    Ok(DurationEstimate {
        expected_s: expected,
        buffer_s: buffer,
        total_s: expected + buffer,
        fraction,
        source,
        n_history: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeadlineBasis {
    UserProvided,
    NightWindow,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferredDeadline {
    pub deadline: Option<DateTime<Utc>>,
    pub basis: DeadlineBasis,
}

impl InferredDeadline {
    pub const NONE: Self = Self {
        deadline: None,
        basis: DeadlineBasis::None,
    };
}

fn seconds_of_day(t: DateTime<Utc>) -> i64 {
    t.num_seconds_from_midnight() as i64
}

fn time_secs(t: NaiveTime) -> i64 {
    t.num_seconds_from_midnight() as i64
}

/// First office-hours start strictly after `t`.
pub fn next_office_start(t: DateTime<Utc>, params: &EstimatorParams) -> DateTime<Utc> {
    let day_start = t - Duration::seconds(seconds_of_day(t));
    let candidate = day_start + Duration::seconds(time_secs(params.office_start_utc));
    if candidate > t {
        candidate
    } else {
        candidate + Duration::days(1)
    }
}

/// True when `t` falls outside office hours.
pub fn in_off_hours(t: DateTime<Utc>, params: &EstimatorParams) -> bool {
    let s = seconds_of_day(t);
    let open = time_secs(params.office_start_utc);
    let close = time_secs(params.office_end_utc);
    if open < close {
        s < open || s >= close
    } else {
        // office hours wrap midnight
        s >= close && s < open
    }
}

/// Deadline from the annotation, else a night window when every past run
/// started off-hours and finished before the next office-hours start.
pub fn infer_deadline(
    request: &JobRequest,
    history: Option<&WorkflowHistory>,
    params: &EstimatorParams,
) -> InferredDeadline {
    if let Some(offset) = request.annotation.deadline_offset_s {
        return InferredDeadline {
            deadline: Some(request.arrival + Duration::seconds(offset)),
            basis: DeadlineBasis::UserProvided,
        };
    }
    let Some(history) = history.filter(|h| !h.is_empty()) else {
        return InferredDeadline::NONE;
    };
    let nightly = history.records().iter().all(|r| {
        in_off_hours(r.start, params) && r.end() <= next_office_start(r.start, params)
    });
    if nightly && in_off_hours(request.arrival, params) {
        InferredDeadline {
            deadline: Some(next_office_start(request.arrival, params)),
            basis: DeadlineBasis::NightWindow,
        }
    } else {
        InferredDeadline::NONE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGuess {
    pub upstream: WorkflowKey,
    pub downstream: WorkflowKey,
    pub max_gap_s: i64,
    pub support: usize,
}

/// Gaps (seconds) from each upstream run's end to the first downstream run
/// starting within `(0, max_gap]` afterwards. Each downstream run is used once.
fn matched_gaps(up: &WorkflowHistory, down: &WorkflowHistory, max_gap: i64) -> Vec<(i64, i64)> {
    let mut used = vec![false; down.len()];
    let mut out = Vec::new();
    for a in up.records() {
        let end = a.end();
        let first = down.records().partition_point(|b| b.start <= end);
        for (j, b) in down.records().iter().enumerate().skip(first) {
            let gap = (b.start - end).num_seconds();
            if gap > max_gap {
                break;
            }
            if !used[j] {
                used[j] = true;
                out.push((gap, (b.start - a.start).num_seconds()));
                break;
            }
        }
    }
    out
}

/// Guesses `upstream -> downstream` pairs from run timing: the downstream
/// repeatedly starts shortly after the upstream ends.
pub fn infer_dependencies(histories: &Histories, params: &EstimatorParams) -> Vec<DependencyGuess> {
    let mut keys: Vec<&WorkflowKey> = histories.keys().collect();
    keys.sort();
    let mut out = Vec::new();
    for up in &keys {
        for down in &keys {
            if up == down {
                continue;
            }
            let gaps = matched_gaps(&histories[*up], &histories[*down], params.dep_max_gap_s);
            if gaps.len() >= params.dep_min_support.max(1) {
                out.push(DependencyGuess {
                    upstream: (*up).clone(),
                    downstream: (*down).clone(),
                    max_gap_s: gaps.iter().map(|g| g.0).max().unwrap_or(0),
                    support: gaps.len(),
                });
            }
        }
    }
    out
}

/// Shrinks a night-window deadline so the job ends before its guessed
/// downstream jobs would historically have started, minus the gap
/// tolerance. No-op unless `dependency_capping` is enabled.
pub fn cap_deadline_by_dependencies(
    inferred: InferredDeadline,
    request: &JobRequest,
    guesses: &[DependencyGuess],
    histories: &Histories,
    params: &EstimatorParams,
) -> InferredDeadline {
    if !params.dependency_capping || inferred.basis != DeadlineBasis::NightWindow {
        return inferred;
    }
    let (Some(deadline), Some(up)) = (inferred.deadline, histories.get(&request.workflow)) else {
        return inferred;
    };
    let earliest_offset = guesses
        .iter()
        .filter(|g| g.upstream == request.workflow)
        .filter_map(|g| histories.get(&g.downstream))
        .flat_map(|down| matched_gaps(up, down, params.dep_max_gap_s))
        .map(|(_, offset)| offset)
        .min();
    match earliest_offset {
        Some(offset) => {
            let cap = request.arrival + Duration::seconds((offset - params.dep_max_gap_s).max(0));
            InferredDeadline {
                deadline: Some(deadline.min(cap)),
                basis: inferred.basis,
            }
        }
        None => inferred,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobClass {
    Periodic,
    FlexibleWindow,
    Inflexible,
    Unknown,
}

fn circular_distance(a: i64, b: i64) -> i64 {
    let d = (a - b).rem_euclid(86_400);
    d.min(86_400 - d)
}

/// True when at least `periodic_min_runs` runs on distinct days start within
/// the tolerance of a common time of day.
pub fn is_periodic(history: &WorkflowHistory, params: &EstimatorParams) -> bool {
    let runs: Vec<(i64, chrono::NaiveDate)> = history
        .records()
        .iter()
        .map(|r| (seconds_of_day(r.start), r.start.date_naive()))
        .collect();
    runs.iter().any(|&(anchor, _)| {
        let days: BTreeSet<chrono::NaiveDate> = runs
            .iter()
            .filter(|(tod, _)| circular_distance(*tod, anchor) <= params.periodic_tolerance_s)
            .map(|(_, day)| *day)
            .collect();
        days.len() >= params.periodic_min_runs
    })
}

pub fn classify_job(
    request: &JobRequest,
    history: Option<&WorkflowHistory>,
    params: &EstimatorParams,
) -> JobClass {
    let has_history = history.is_some_and(|h| !h.is_empty());
    if !has_history && request.annotation.duration_estimate_s.is_none() {
        return JobClass::Unknown;
    }
    if history.is_some_and(|h| is_periodic(h, params)) {
        return JobClass::Periodic;
    }
    if infer_deadline(request, history, params).basis != DeadlineBasis::None {
        return JobClass::FlexibleWindow;
    }
    JobClass::Inflexible
}
