//! CI/CD jobs, execution traces and carbon-aware workflow annotations.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use thiserror::Error;

use crate::carbon::{format_instant, parse_instant, RegionId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("non-positive duration {duration} at line {line}")]
    NonPositiveDuration { line: usize, duration: i64 },
    #[error("unparseable workflow document: {0}")]
    UnparseableDocument(String),
    #[error("bad duration literal {0:?}")]
    BadDurationLiteral(String),
    #[error("bad region token {0:?}")]
    UnknownRegionFormat(String),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Identifies a workflow definition: repository plus workflow name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkflowKey {
    pub repo: String,
    pub workflow: String,
}

impl WorkflowKey {
    pub fn new(repo: impl Into<String>, workflow: impl Into<String>) -> Option<Self> {
        let (repo, workflow) = (repo.into(), workflow.into());
        if repo.is_empty() || workflow.is_empty() {
            None
        } else {
            Some(Self { repo, workflow })
        }
    }
}

impl fmt::Display for WorkflowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.repo, self.workflow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub workflow: WorkflowKey,
    pub start: DateTime<Utc>,
    pub duration_s: i64,
}

impl ExecutionRecord {
    pub fn end(&self) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(self.duration_s)
    }
}

/// User-supplied scheduling hints. `None` fields mean "not provided";
/// `allowed_regions: None` means every region is allowed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Annotation {
    pub carbon_aware: bool,
    pub duration_estimate_s: Option<i64>,
    /// Relative to the request's arrival.
    pub deadline_offset_s: Option<i64>,
    pub allowed_regions: Option<BTreeSet<RegionId>>,
}

impl Annotation {
    pub fn allows(&self, region: &RegionId) -> bool {
        self.allowed_regions
            .as_ref()
            .map_or(true, |set| set.contains(region))
    }
}

/// What the scheduler sees of a job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRequest {
    pub workflow: WorkflowKey,
    pub arrival: DateTime<Utc>,
    pub annotation: Annotation,
}

/// A replayable trace entry: the request plus its ground-truth runtime,
/// which only the simulator reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedJob {
    pub request: JobRequest,
    pub true_duration_s: i64,
}

impl TracedJob {
    pub fn record(&self) -> ExecutionRecord {
        ExecutionRecord {
            workflow: self.request.workflow.clone(),
            start: self.request.arrival,
            duration_s: self.true_duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowHistory {
    pub workflow: WorkflowKey,
    records: Vec<ExecutionRecord>,
}

impl WorkflowHistory {
    pub fn new(workflow: WorkflowKey) -> Self {
        Self {
            workflow,
            records: Vec::new(),
        }
    }

    /// Inserts keeping records sorted by start; equal starts keep insertion order.
    pub fn push(&mut self, record: ExecutionRecord) {
        let at = self.records.partition_point(|r| r.start <= record.start);
        self.records.insert(at, record);
    }

    pub fn records(&self) -> &[ExecutionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_duration_s(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let sum: f64 = self.records.iter().map(|r| r.duration_s as f64).sum();
        Some(sum / self.records.len() as f64)
    }

    pub fn max_duration_s(&self) -> Option<i64> {
        self.records.iter().map(|r| r.duration_s).max()
    }
}

pub type Histories = HashMap<WorkflowKey, WorkflowHistory>;

pub fn build_histories(records: impl IntoIterator<Item = ExecutionRecord>) -> Histories {
    let mut out: Histories = HashMap::new();
    for r in records {
        out.entry(r.workflow.clone())
            .or_insert_with(|| WorkflowHistory::new(r.workflow.clone()))
            .push(r);
    }
    out
}

pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TracedJob>, WorkflowError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| WorkflowError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_trace_csv(file)
}

/// Reads `repo,workflow,start,duration_s` rows, sorted by arrival with
/// ties broken by (repo, workflow).
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<TracedJob>, WorkflowError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut jobs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| WorkflowError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() < 4 {
            return Err(WorkflowError::MalformedRow {
                line,
                reason: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let workflow = WorkflowKey::new(&record[0], &record[1]).ok_or_else(|| {
            WorkflowError::MalformedRow {
                line,
                reason: "empty repo or workflow".into(),
            }
        })?;
        let arrival = parse_instant(&record[2]).ok_or_else(|| WorkflowError::MalformedRow {
            line,
            reason: format!("bad timestamp {:?}", &record[2]),
        })?;
        let duration: f64 = record[3].parse().map_err(|_| WorkflowError::MalformedRow {
            line,
            reason: format!("bad duration {:?}", &record[3]),
        })?;
        let duration = duration.round() as i64;
        if duration <= 0 {
            return Err(WorkflowError::NonPositiveDuration { line, duration });
        }
        jobs.push(TracedJob {
            request: JobRequest {
                workflow,
                arrival,
                annotation: Annotation::default(),
            },
            true_duration_s: duration,
        });
    }
    sort_trace(&mut jobs);
    Ok(jobs)
}

pub fn sort_trace(jobs: &mut [TracedJob]) {
    jobs.sort_by(|a, b| {
        a.request
            .arrival
            .cmp(&b.request.arrival)
            .then_with(|| a.request.workflow.cmp(&b.request.workflow))
    });
}

pub fn write_trace_csv<W: Write>(writer: W, jobs: &[TracedJob]) -> Result<(), WorkflowError> {
    let records: Vec<ExecutionRecord> = jobs.iter().map(TracedJob::record).collect();
    write_records_csv(writer, &records, true)
}

pub fn write_records_csv<W: Write>(
    writer: W,
    records: &[ExecutionRecord],
    header: bool,
) -> Result<(), WorkflowError> {
    let io = |e: csv::Error| WorkflowError::Io {
        path: "<writer>".into(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(writer);
    if header {
        w.write_record(["repo", "workflow", "start", "duration_s"])
            .map_err(io)?;
    }
    for r in records {
        w.write_record([
            r.workflow.repo.as_str(),
            r.workflow.workflow.as_str(),
            &format_instant(r.start),
            &r.duration_s.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| WorkflowError::Io {
        path: "<writer>".into(),
        reason: e.to_string(),
    })
}

/// Parses `1h`, `90m`, `45s` and compositions such as `1h30m`. A bare
/// integer is taken as seconds. The result must be positive.
pub fn parse_duration_literal(s: &str) -> Result<i64, WorkflowError> {
    let bad = || WorkflowError::BadDurationLiteral(s.to_string());
    let text = s.trim();
    if text.is_empty() {
        return Err(bad());
    }
    if let Ok(secs) = text.parse::<i64>() {
        return if secs > 0 { Ok(secs) } else { Err(bad()) };
    }

    let mut total: i64 = 0;
    let mut digits = String::new();
    let mut last_unit = u8::MAX;
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
            continue;
        }
        let (rank, scale) = match c.to_ascii_lowercase() {
            'h' => (0, 3600),
            'm' => (1, 60),
            's' => (2, 1),
            _ => return Err(bad()),
        };
        // units must appear once each, largest first
        if digits.is_empty() || (last_unit != u8::MAX && rank <= last_unit) {
            return Err(bad());
        }
        let n: i64 = digits.parse().map_err(|_| bad())?;
        total = n
            .checked_mul(scale)
            .and_then(|v| total.checked_add(v))
            .ok_or_else(bad)?;
        digits.clear();
        last_unit = rank;
    }
    if !digits.is_empty() || total <= 0 {
        return Err(bad());
    }
    Ok(total)
}

fn duration_value(v: &Value) -> Result<i64, WorkflowError> {
    match v {
        Value::String(s) => parse_duration_literal(s),
        Value::Number(n) => match n.as_i64() {
            Some(secs) if secs > 0 => Ok(secs),
            _ => Err(WorkflowError::BadDurationLiteral(n.to_string())),
        },
        other => Err(WorkflowError::BadDurationLiteral(format!("{other:?}"))),
    }
}

fn truthy(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "true" | "on" => Some(true),
            "no" | "n" | "false" | "off" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn region_token(v: &Value) -> Result<RegionId, WorkflowError> {
    let raw = match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => return Err(WorkflowError::UnknownRegionFormat(format!("{other:?}"))),
    };
    RegionId::new(raw.clone()).ok_or(WorkflowError::UnknownRegionFormat(raw))
}

fn regions_value(v: &Value) -> Result<BTreeSet<RegionId>, WorkflowError> {
    match v {
        Value::Sequence(items) => items.iter().map(region_token).collect(),
        Value::String(s) => {
            let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
            inner
                .split(',')
                .map(|tok| {
                    let tok = tok.trim();
                    RegionId::new(tok).ok_or_else(|| WorkflowError::UnknownRegionFormat(tok.into()))
                })
                .collect()
        }
        other => Err(WorkflowError::UnknownRegionFormat(format!("{other:?}"))),
    }
}

fn get<'a>(map: &'a serde_yaml::Mapping, key: &str) -> Option<&'a Value> {
    map.get(Value::String(key.to_string()))
}

/// Carbon-aware keys collected from one place (a job or a step).
#[derive(Default)]
struct Hints {
    duration: Option<i64>,
    deadline: Option<i64>,
    regions: Option<BTreeSet<RegionId>>,
}

impl Hints {
    fn read(map: &serde_yaml::Mapping) -> Result<Self, WorkflowError> {
        Ok(Self {
            duration: get(map, "duration").map(duration_value).transpose()?,
            deadline: get(map, "deadline").map(duration_value).transpose()?,
            regions: get(map, "allowed-regions").map(regions_value).transpose()?,
        })
    }
}

fn intersect(a: Option<BTreeSet<RegionId>>, b: Option<BTreeSet<RegionId>>) -> Option<BTreeSet<RegionId>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.intersection(&b).cloned().collect()),
        (a, b) => a.or(b),
    }
}

fn min_opt(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Annotation of a single job block. Step-level hints override job-level
/// ones: step durations add up, the tightest step deadline wins and step
/// region lists intersect.
fn job_annotation(job: &serde_yaml::Mapping) -> Result<Annotation, WorkflowError> {
    let carbon_aware = get(job, "carbon-aware").and_then(truthy).unwrap_or(false);
    let job_hints = Hints::read(job)?;

    let mut step_duration: Option<i64> = None;
    let mut step_deadline: Option<i64> = None;
    let mut step_regions: Option<BTreeSet<RegionId>> = None;
    if let Some(Value::Sequence(steps)) = get(job, "steps") {
        for step in steps {
            let Value::Mapping(step) = step else { continue };
            let with = match get(step, "with") {
                Some(Value::Mapping(with)) => Some(Hints::read(with)?),
                _ => None,
            };
            for hints in [Some(Hints::read(step)?), with].into_iter().flatten() {
                if let Some(d) = hints.duration {
                    step_duration = Some(step_duration.unwrap_or(0) + d);
                }
                step_deadline = min_opt(step_deadline, hints.deadline);
                step_regions = intersect(step_regions, hints.regions);
            }
        }
    }

    Ok(Annotation {
        carbon_aware,
        duration_estimate_s: step_duration.or(job_hints.duration),
        deadline_offset_s: step_deadline.or(job_hints.deadline),
        allowed_regions: step_regions.or(job_hints.regions),
    })
}

/// Removes the indentation shared by every non-blank line, so documents
/// pasted with a uniform indent still parse.
fn dedent(doc: &str) -> String {
    let indent = doc
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    doc.lines()
        .map(|l| if l.len() >= indent { &l[indent..] } else { l.trim_start() })
        .collect::<Vec<_>>()
        .join("\n")
}

fn first_mapping(doc: &str) -> Result<Option<serde_yaml::Mapping>, WorkflowError> {
    let text = dedent(doc);
    for de in serde_yaml::Deserializer::from_str(&text) {
        let value = Value::deserialize(de)
            .map_err(|e| WorkflowError::UnparseableDocument(e.to_string()))?;
        match value {
            Value::Null => continue,
            Value::Mapping(m) => return Ok(Some(m)),
            other => {
                return Err(WorkflowError::UnparseableDocument(format!(
                    "top level is not a mapping: {other:?}"
                )))
            }
        }
    }
    Ok(None)
}

/// Per-job annotations keyed by job id, in document order.
pub fn parse_job_annotations(doc: &str) -> Result<Vec<(String, Annotation)>, WorkflowError> {
    let Some(root) = first_mapping(doc)? else {
        return Ok(Vec::new());
    };
    let Some(Value::Mapping(jobs)) = get(&root, "jobs") else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (name, job) in jobs {
        let Value::Mapping(job) = job else { continue };
        let name = match name {
            Value::String(s) => s.clone(),
            other => format!("{other:?}"),
        };
        out.push((name, job_annotation(job)?));
    }
    Ok(out)
}

/// Parses a workflow definition and merges the annotations of all its jobs
/// into one: carbon-aware if any job opts in, durations add up, the
/// tightest deadline wins and region lists intersect.
pub fn parse_annotation(doc: &str) -> Result<Annotation, WorkflowError> {
    let jobs = parse_job_annotations(doc)?;
    let mut merged = Annotation::default();
    let mut duration: Option<i64> = None;
    for (_, a) in jobs {
        merged.carbon_aware |= a.carbon_aware;
        if let Some(d) = a.duration_estimate_s {
            duration = Some(duration.unwrap_or(0) + d);
        }
        merged.deadline_offset_s = min_opt(merged.deadline_offset_s, a.deadline_offset_s);
        merged.allowed_regions = intersect(merged.allowed_regions.take(), a.allowed_regions);
    }
    merged.duration_estimate_s = duration;
    Ok(merged)
}
