//! Request/response scheduling service for CI runners.
//!
//! The service holds an immutable dataset snapshot that can be swapped
//! atomically, and a single writer lock for the round-robin rotation, the
//! workflow histories and the jobs awaiting a completion report. Decisions
//! come straight from [`crate::scheduler::decide`].

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::{
    load_intensity_csv, parse_instant, CoveragePolicy, DataError, IntensityDataset, IntensityKind, RegionId,
};
use crate::scheduler::{
    decide, DecisionBasis, RoundRobin, ScheduleDecision, ScheduleError, SchedulerParams, SchedulingContext,
    StrategyConfig, StrategyKind, DEFAULT_SLOT_S,
};
use crate::workflow::{
    build_histories, load_trace_csv, parse_annotation, parse_duration_literal, write_records_csv, Annotation,
    ExecutionRecord, Histories, JobRequest, WorkflowHistory, WorkflowKey,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Infeasible(ScheduleError),
    #[error("intensity data unavailable: {0}")]
    OutOfCoverage(ScheduleError),
    #[error("unknown job id {0}")]
    UnknownJob(u64),
    #[error("refresh failed: {0}")]
    Refresh(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status_code(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::UnknownJob(_) => 404,
            ServiceError::Infeasible(_) => 422,
            ServiceError::OutOfCoverage(_) => 503,
            ServiceError::Refresh(_) | ServiceError::Internal(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::UnknownJob(_) => "unknown_job",
            ServiceError::Infeasible(ScheduleError::InfeasibleDeadline { .. }) => "infeasible_deadline",
            ServiceError::Infeasible(_) => "unschedulable",
            ServiceError::OutOfCoverage(_) => "out_of_coverage",
            ServiceError::Refresh(_) => "refresh_failed",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<ScheduleError> for ServiceError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Data(DataError::OutOfCoverage { .. } | DataError::UnknownRegion(_)) => {
                ServiceError::OutOfCoverage(e)
            }
            ScheduleError::InvalidStrategy(msg) => ServiceError::BadRequest(msg),
            other => ServiceError::Infeasible(other),
        }
    }
}

/// Seconds as a number or a literal such as `"1h30m"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DurationField {
    Seconds(i64),
    Literal(String),
}

impl DurationField {
    pub fn seconds(&self) -> Result<i64, ServiceError> {
        match self {
            DurationField::Seconds(s) if *s > 0 => Ok(*s),
            DurationField::Seconds(s) => Err(ServiceError::BadRequest(format!("duration must be positive, got {s}"))),
            DurationField::Literal(l) => parse_duration_literal(l).map_err(|e| ServiceError::BadRequest(e.to_string())),
        }
    }
}

/// `true`/`false` or `"yes"`/`"no"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlagField {
    Bool(bool),
    Text(String),
}

impl FlagField {
    fn value(&self) -> Result<bool, ServiceError> {
        match self {
            FlagField::Bool(b) => Ok(*b),
            FlagField::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "yes" | "true" | "on" => Ok(true),
                "no" | "false" | "off" => Ok(false),
                other => Err(ServiceError::BadRequest(format!("bad carbon_aware value {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyOverride {
    pub kind: StrategyKind,
    #[serde(default)]
    pub buffer_hours: Option<f64>,
    #[serde(default)]
    pub slot_s: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRequestMessage {
    pub repo: String,
    pub workflow: String,
    /// ISO-8601; the server clock when absent.
    #[serde(default)]
    pub arrival: Option<String>,
    #[serde(default)]
    pub carbon_aware: Option<FlagField>,
    #[serde(default)]
    pub duration: Option<DurationField>,
    #[serde(default)]
    pub deadline: Option<DurationField>,
    #[serde(default)]
    pub allowed_regions: Option<Vec<String>>,
    /// A workflow document whose annotations are used for any field not
    /// given explicitly.
    #[serde(default)]
    pub workflow_yaml: Option<String>,
    #[serde(default)]
    pub strategy: Option<StrategyOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResponseMessage {
    pub job_id: u64,
    pub repo: String,
    pub workflow: String,
    pub arrival: DateTime<Utc>,
    pub region: String,
    pub start: DateTime<Utc>,
    pub estimated_duration: Option<i64>,
    pub deadline: Option<DateTime<Utc>>,
    pub predicted_emissions_reu: f64,
    pub fallback: bool,
    pub decision_basis: DecisionBasis,
    pub coverage_gap: bool,
}

impl ScheduleResponseMessage {
    pub fn from_decision(job_id: u64, d: &ScheduleDecision) -> Self {
        Self {
            job_id,
            repo: d.workflow.repo.clone(),
            workflow: d.workflow.workflow.clone(),
            arrival: d.arrival,
            region: d.region.to_string(),
            start: d.start,
            estimated_duration: d.estimated_duration_s,
            deadline: d.deadline,
            predicted_emissions_reu: d.predicted_emissions,
            fallback: d.fallback,
            decision_basis: d.basis,
            coverage_gap: d.coverage_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionMessage {
    pub job_id: u64,
    pub actual_duration: DurationField,
    /// Measured energy of the run; emissions assume a 1 kW draw otherwise.
    #[serde(default)]
    pub measured_energy_kwh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionAck {
    pub job_id: u64,
    pub repo: String,
    pub workflow: String,
    pub region: String,
    pub start: DateTime<Utc>,
    pub actual_duration: i64,
    pub predicted_emissions_reu: f64,
    pub actual_emissions_reu: f64,
    /// Actual minus predicted.
    pub delta_reu: f64,
    pub coverage_gap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthMessage {
    pub status: String,
    pub strategy: String,
    pub regions: Vec<String>,
    pub coverage_start: DateTime<Utc>,
    pub coverage_end: DateTime<Utc>,
    pub pending_jobs: usize,
    pub history_records: usize,
}

/// Where refreshed intensity data is read from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntensitySource {
    pub actual: PathBuf,
    #[serde(default)]
    pub forecast: Option<PathBuf>,
}

impl IntensitySource {
    pub fn load(&self) -> Result<IntensityDataset, DataError> {
        let actual = load_intensity_csv(&self.actual, IntensityKind::Actual)?;
        match &self.forecast {
            Some(f) => actual.with_forecast_from(&load_intensity_csv(f, IntensityKind::Forecast)?),
            None => Ok(actual),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub strategy: StrategyConfig,
    /// Defaults to the regions of the dataset.
    pub regions: Option<Vec<RegionId>>,
    pub params: SchedulerParams,
    /// Append-only trace CSV of completed runs, reloaded at startup.
    pub history_path: Option<PathBuf>,
    /// JSON lines, one per decision.
    pub decision_log: Option<PathBuf>,
    pub source: Option<IntensitySource>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::location_time_shift(3.0),
            regions: None,
            params: SchedulerParams::default(),
            history_path: None,
            decision_log: None,
            source: None,
        }
    }
}

struct State {
    rotation: RoundRobin,
    histories: Histories,
    pending: HashMap<u64, ScheduleDecision>,
    next_id: u64,
    history_file: Option<File>,
    decision_log: Option<File>,
}

pub struct Service {
    config: ServiceConfig,
    snapshot: RwLock<Arc<IntensityDataset>>,
    state: Mutex<State>,
}

fn open_append(path: &Path) -> Result<File, ServiceError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
}

impl Service {
    pub fn new(config: ServiceConfig, dataset: IntensityDataset) -> Result<Self, ServiceError> {
        config.strategy.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        config
            .params
            .estimator
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;

        let mut histories = Histories::new();
        let mut history_file = None;
        if let Some(path) = &config.history_path {
            let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
            if exists {
                let jobs = load_trace_csv(path).map_err(|e| ServiceError::Internal(e.to_string()))?;
                histories = build_histories(jobs.iter().map(|j| j.record()));
            }
            let mut file = open_append(path)?;
            if !exists {
                write_records_csv(&mut file, &[], true).map_err(|e| ServiceError::Internal(e.to_string()))?;
            }
            history_file = Some(file);
        }
        let decision_log = config.decision_log.as_deref().map(open_append).transpose()?;

        Ok(Self {
            config,
            snapshot: RwLock::new(Arc::new(dataset)),
            state: Mutex::new(State {
                rotation: RoundRobin::new(),
                histories,
                pending: HashMap::new(),
                next_id: 1,
                history_file,
                decision_log,
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// The dataset decisions are currently made on.
    pub fn snapshot(&self) -> Arc<IntensityDataset> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn replace_dataset(&self, dataset: IntensityDataset) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(dataset);
    }

    /// Reloads intensity data from `source` (or the configured one). The
    /// load happens outside any lock; requests keep using the old snapshot
    /// until the swap.
    pub fn refresh(&self, source: Option<&IntensitySource>) -> Result<(), ServiceError> {
        let source = source
            .or(self.config.source.as_ref())
            .ok_or_else(|| ServiceError::BadRequest("no intensity source configured".into()))?;
        let dataset = source.load().map_err(|e| ServiceError::Refresh(e.to_string()))?;
        self.replace_dataset(dataset);
        Ok(())
    }

    fn regions(&self, dataset: &IntensityDataset) -> Vec<RegionId> {
        self.config.regions.clone().unwrap_or_else(|| dataset.regions())
    }

    fn strategy_for(&self, over: Option<StrategyOverride>) -> Result<StrategyConfig, ServiceError> {
        let Some(o) = over else { return Ok(self.config.strategy) };
        let buffer_hours = match o.kind {
            StrategyKind::LocationTimeShift => o.buffer_hours.or(self.config.strategy.buffer_hours).or(Some(1.0)),
            _ => None,
        };
        let s = StrategyConfig { kind: o.kind, buffer_hours, slot_s: o.slot_s.unwrap_or(DEFAULT_SLOT_S) };
        s.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(s)
    }

    /// Turns a request message into a job request; explicit fields take
    /// precedence over the embedded workflow document.
    pub fn parse_request(msg: &ScheduleRequestMessage, now: DateTime<Utc>) -> Result<JobRequest, ServiceError> {
        let workflow = WorkflowKey::new(msg.repo.trim(), msg.workflow.trim())
            .ok_or_else(|| ServiceError::BadRequest("repo and workflow must be non-empty".into()))?;
        let arrival = match &msg.arrival {
            Some(s) => parse_instant(s).ok_or_else(|| ServiceError::BadRequest(format!("bad arrival {s:?}")))?,
            None => now,
        };
        let mut annotation = match &msg.workflow_yaml {
            Some(doc) => parse_annotation(doc).map_err(|e| ServiceError::BadRequest(e.to_string()))?,
            None => Annotation::default(),
        };
        if let Some(f) = &msg.carbon_aware {
            annotation.carbon_aware = f.value()?;
        }
        if let Some(d) = &msg.duration {
            annotation.duration_estimate_s = Some(d.seconds()?);
        }
        if let Some(d) = &msg.deadline {
            annotation.deadline_offset_s = Some(d.seconds()?);
        }
        if let Some(list) = &msg.allowed_regions {
            let regions = list
                .iter()
                .map(|r| RegionId::new(r.trim()).ok_or_else(|| ServiceError::BadRequest(format!("bad region {r:?}"))))
                .collect::<Result<BTreeSet<_>, _>>()?;
            if regions.is_empty() {
                return Err(ServiceError::BadRequest("allowed_regions is empty".into()));
            }
            annotation.allowed_regions = Some(regions);
        }
        Ok(JobRequest { workflow, arrival, annotation })
    }

    pub fn handle_schedule(&self, msg: &ScheduleRequestMessage) -> Result<ScheduleResponseMessage, ServiceError> {
        let request = Self::parse_request(msg, Utc::now())?;
        let strategy = self.strategy_for(msg.strategy)?;
        let (id, decision) = self.schedule_request(&request, &strategy)?;
        Ok(ScheduleResponseMessage::from_decision(id, &decision))
    }

    /// Decides on the current snapshot and records the job as pending.
    pub fn schedule_request(
        &self,
        request: &JobRequest,
        strategy: &StrategyConfig,
    ) -> Result<(u64, ScheduleDecision), ServiceError> {
        let dataset = self.snapshot();
        let regions = self.regions(&dataset);
        let mut state = self.state.lock().expect("state lock poisoned");
        let state = &mut *state;
        let ctx = SchedulingContext {
            regions: &regions,
            dataset: &dataset,
            histories: &state.histories,
            dependencies: &[],
            params: &self.config.params,
            coverage: CoveragePolicy::Strict,
        };
        let decision = decide(request, strategy, &ctx, &mut state.rotation)?;
        let id = state.next_id;
        state.next_id += 1;
        if let Some(log) = state.decision_log.as_mut() {
            let line = serde_json::to_string(&ScheduleResponseMessage::from_decision(id, &decision))
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        state.pending.insert(id, decision.clone());
        Ok((id, decision))
    }

    pub fn handle_report_completion(&self, msg: &CompletionMessage) -> Result<CompletionAck, ServiceError> {
        let duration = msg.actual_duration.seconds()?;
        if let Some(e) = msg.measured_energy_kwh {
            if !(e.is_finite() && e >= 0.0) {
                return Err(ServiceError::BadRequest(format!("bad measured_energy_kwh {e}")));
            }
        }
        let dataset = self.snapshot();
        let mut state = self.state.lock().expect("state lock poisoned");
        let decision = state.pending.remove(&msg.job_id).ok_or(ServiceError::UnknownJob(msg.job_id))?;

        let charged = dataset
            .integrate(
                &decision.region,
                decision.start.timestamp(),
                duration,
                IntensityKind::Actual,
                CoveragePolicy::HoldEdges,
            )
            .map_err(|e| ServiceError::OutOfCoverage(e.into()))?;
        // the integral assumes 1 kW; measured energy rescales it
        let actual = match msg.measured_energy_kwh {
            Some(kwh) => charged.reu * kwh / (duration as f64 / 3600.0),
            None => charged.reu,
        };

        let record = ExecutionRecord { workflow: decision.workflow.clone(), start: decision.start, duration_s: duration };
        if let Some(file) = state.history_file.as_mut() {
            write_records_csv(&mut *file, std::slice::from_ref(&record), false)
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        state
            .histories
            .entry(record.workflow.clone())
            .or_insert_with(|| WorkflowHistory::new(record.workflow.clone()))
            .push(record);

        Ok(CompletionAck {
            job_id: msg.job_id,
            repo: decision.workflow.repo.clone(),
            workflow: decision.workflow.workflow.clone(),
            region: decision.region.to_string(),
            start: decision.start,
            actual_duration: duration,
            predicted_emissions_reu: decision.predicted_emissions,
            actual_emissions_reu: actual,
            delta_reu: actual - decision.predicted_emissions,
            coverage_gap: charged.coverage_gap,
        })
    }

    pub fn history_len(&self, workflow: &WorkflowKey) -> usize {
        let state = self.state.lock().expect("state lock poisoned");
        state.histories.get(workflow).map_or(0, WorkflowHistory::len)
    }

    pub fn health(&self) -> HealthMessage {
        let dataset = self.snapshot();
        let (coverage_start, coverage_end) = dataset.coverage();
        let state = self.state.lock().expect("state lock poisoned");
        HealthMessage {
            status: "ok".into(),
            strategy: self.config.strategy.label(),
            regions: self.regions(&dataset).iter().map(ToString::to_string).collect(),
            coverage_start,
            coverage_end,
            pending_jobs: state.pending.len(),
            history_records: state.histories.values().map(WorkflowHistory::len).sum(),
        }
    }
}

/// JSON over HTTP.
pub mod http {
    use super::*;
    use axum::body::Bytes;
    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::{Json, Router};
    use serde::de::DeserializeOwned;

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: String,
        pub message: String,
    }

    impl IntoResponse for ServiceError {
        fn into_response(self) -> Response {
            let status = StatusCode::from_u16(self.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let body = ErrorBody { error: self.kind().into(), message: self.to_string() };
            (status, Json(body)).into_response()
        }
    }

    fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
        serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
    }

    async fn blocking<T: Send + 'static>(
        f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
    ) -> Result<T, ServiceError> {
        tokio::task::spawn_blocking(f)
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }

    async fn schedule(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Json<ScheduleResponseMessage>, ServiceError> {
        let msg: ScheduleRequestMessage = parse(&body)?;
        blocking(move || svc.handle_schedule(&msg)).await.map(Json)
    }

    async fn complete(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Json<CompletionAck>, ServiceError> {
        let msg: CompletionMessage = parse(&body)?;
        blocking(move || svc.handle_report_completion(&msg)).await.map(Json)
    }

    async fn refresh(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Json<HealthMessage>, ServiceError> {
        let source: Option<IntensitySource> = if body.iter().all(u8::is_ascii_whitespace) { None } else { Some(parse(&body)?) };
        blocking(move || {
            svc.refresh(source.as_ref())?;
            Ok(svc.health())
        })
        .await
        .map(Json)
    }

    async fn health(State(svc): State<Arc<Service>>) -> Json<HealthMessage> {
        Json(svc.health())
    }

    pub fn router(service: Arc<Service>) -> Router {
        Router::new()
            .route("/v1/schedule", post(schedule))
            .route("/v1/complete", post(complete))
            .route("/admin/refresh-intensity", post(refresh))
            .route("/v1/health", get(health))
            .with_state(service)
    }

    /// Serves until ctrl-c.
    pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    }
}

pub use http::{router, serve};
