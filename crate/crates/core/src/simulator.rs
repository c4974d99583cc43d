//! Trace-driven replay of CI/CD jobs against intensity data.
//!
//! Every strategy replays the same trace independently, in arrival order,
//! with unlimited regional capacity. Decisions are planned on the forecast
//! series and charged on the actual series.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::{format_instant, to_instant, CoveragePolicy, IntensityDataset, IntensityKind, RegionId};
use crate::estimator::{DeadlineBasis, DurationEstimate, InferredDeadline};
use crate::scheduler::{
    decide_location_shift, decide_planned, Plan, RoundRobin, ScheduleDecision, ScheduleError,
    SchedulerParams, SchedulingContext, StrategyConfig, StrategyKind,
};
use crate::workflow::{Annotation, Histories, JobRequest, TracedJob, WorkflowHistory, WorkflowKey};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace contains no jobs")]
    EmptyTrace,
    #[error("no strategies requested")]
    NoStrategies,
    #[error("job {index} ({workflow}): {source}")]
    Schedule {
        index: usize,
        workflow: WorkflowKey,
        source: ScheduleError,
    },
    #[error(transparent)]
    InvalidStrategy(ScheduleError),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Where the scheduler's duration estimates and deadlines come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    /// Every job is carbon-aware, its estimate equals its true duration and
    /// its deadline is arrival + duration + the strategy's buffer.
    #[default]
    UniformBuffer,
    /// Estimates and deadlines come from the job's annotation and the
    /// history of runs that completed before it arrived.
    AnnotationDriven,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub strategies: Vec<StrategyConfig>,
    pub intensity: IntensityDataset,
    /// Sorted by arrival.
    pub jobs: Vec<TracedJob>,
    pub buffer_policy: BufferPolicy,
    /// Recorded in the report; replay itself is deterministic.
    pub seed: u64,
    /// Defaults to every region of the dataset.
    pub regions: Option<Vec<RegionId>>,
    pub params: SchedulerParams,
}

impl SimulationConfig {
    pub fn new(strategies: Vec<StrategyConfig>, intensity: IntensityDataset, jobs: Vec<TracedJob>) -> Self {
        Self {
            strategies,
            intensity,
            jobs,
            buffer_policy: BufferPolicy::UniformBuffer,
            seed: 0,
            regions: None,
            params: SchedulerParams::default(),
        }
    }

    /// Round-robin, location shifting and time shifting with 1, 3 and 6 h buffers.
    pub fn standard_strategies() -> Vec<StrategyConfig> {
        vec![
            StrategyConfig::round_robin(),
            StrategyConfig::location_shift(),
            StrategyConfig::location_time_shift(1.0),
            StrategyConfig::location_time_shift(3.0),
            StrategyConfig::location_time_shift(6.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutedJob {
    pub decision: ScheduleDecision,
    pub actual_duration_s: i64,
    pub actual_emissions: f64,
    pub predicted_emissions: f64,
    pub deadline_violated: bool,
    /// Charged partly at the nearest known intensity.
    pub coverage_gap: bool,
}

impl ExecutedJob {
    pub fn end(&self) -> DateTime<Utc> {
        self.decision.start + Duration::seconds(self.actual_duration_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub timestamp: DateTime<Utc>,
    pub cumulative_emissions: f64,
    pub running_jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyReport {
    pub label: String,
    pub strategy: StrategyConfig,
    pub total_actual_emissions: f64,
    pub total_predicted_emissions: f64,
    /// `1 - total / baseline_total`.
    pub relative_improvement: f64,
    pub series: Vec<SeriesPoint>,
    pub fallback_count: usize,
    pub deadline_violation_count: usize,
    pub coverage_gap_count: usize,
    pub executed: Vec<ExecutedJob>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmissionsReport {
    pub seed: u64,
    pub baseline_total: f64,
    pub strategies: Vec<StrategyReport>,
}

impl EmissionsReport {
    pub fn get(&self, label: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.label == label)
    }
}

/// Number of jobs running at `t` (half-open `[start, end)` intervals).
pub fn running_jobs_at(executed: &[ExecutedJob], t: DateTime<Utc>) -> usize {
    executed
        .iter()
        .filter(|j| j.decision.start <= t && t < j.end())
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ForecastErrorSummary {
    pub jobs: usize,
    pub mean_absolute_error: f64,
    /// Mean of predicted minus actual.
    pub mean_signed_error: f64,
}

pub fn forecast_error_report(executed: &[ExecutedJob]) -> ForecastErrorSummary {
    if executed.is_empty() {
        return ForecastErrorSummary::default();
    }
    let n = executed.len() as f64;
    let (abs, signed) = executed.iter().fold((0.0, 0.0), |(a, s), j| {
        let diff = j.predicted_emissions - j.actual_emissions;
        (a + diff.abs(), s + diff)
    });
    ForecastErrorSummary {
        jobs: executed.len(),
        mean_absolute_error: abs / n,
        mean_signed_error: signed / n,
    }
}

struct Replay<'a> {
    config: &'a SimulationConfig,
    regions: Vec<RegionId>,
}

impl<'a> Replay<'a> {
    fn uniform_plan(job: &TracedJob, strategy: &StrategyConfig) -> (JobRequest, Plan) {
        let buffer = match strategy.kind {
            StrategyKind::LocationTimeShift => strategy.buffer_s(),
            _ => None,
        };
        let offset = buffer.map(|b| job.true_duration_s + b);
        let request = JobRequest {
            annotation: Annotation {
                carbon_aware: true,
                duration_estimate_s: Some(job.true_duration_s),
                deadline_offset_s: offset,
                allowed_regions: job.request.annotation.allowed_regions.clone(),
            },
            ..job.request.clone()
        };
        let plan = Plan {
            estimate: Some(DurationEstimate::exact(job.true_duration_s)),
            deadline: match offset {
                Some(o) => InferredDeadline {
                    deadline: Some(job.request.arrival + Duration::seconds(o)),
                    basis: DeadlineBasis::UserProvided,
                },
                None => InferredDeadline::NONE,
            },
        };
        (request, plan)
    }

    fn run(&self, strategy: &StrategyConfig) -> Result<StrategyReport, SimError> {
        let dataset = &self.config.intensity;
        let mut histories: Histories = HashMap::new();
        let mut pending: BinaryHeap<Reverse<(DateTime<Utc>, usize)>> = BinaryHeap::new();
        let mut rotation = RoundRobin::new();
        let mut executed = Vec::with_capacity(self.config.jobs.len());

        for (index, job) in self.config.jobs.iter().enumerate() {
            // runs that finished before this arrival become history
            while let Some(Reverse((end, i))) = pending.peek().copied() {
                if end > job.request.arrival {
                    break;
                }
                pending.pop();
                let record = self.config.jobs[i].record();
                histories
                    .entry(record.workflow.clone())
                    .or_insert_with(|| WorkflowHistory::new(record.workflow.clone()))
                    .push(record);
            }

            let ctx = SchedulingContext {
                regions: &self.regions,
                dataset,
                histories: &histories,
                dependencies: &[],
                params: &self.config.params,
                coverage: CoveragePolicy::HoldEdges,
            };
            let (request, plan) = match self.config.buffer_policy {
                BufferPolicy::UniformBuffer => Self::uniform_plan(job, strategy),
                BufferPolicy::AnnotationDriven => (job.request.clone(), ctx.plan(&job.request)),
            };
            let decision = match decide_planned(&request, &plan, strategy, &ctx, &mut rotation) {
                Ok(d) => d,
                Err(ScheduleError::InfeasibleDeadline { .. }) => {
                    // the annotated deadline cannot be met: run now in the best region
                    let mut d = decide_location_shift(
                        &request,
                        &self.regions,
                        dataset,
                        plan.estimate.as_ref(),
                        CoveragePolicy::HoldEdges,
                    )
                    .map_err(|source| SimError::Schedule { index, workflow: request.workflow.clone(), source })?;
                    d.basis.strategy = strategy.kind;
                    d.deadline = plan.deadline.deadline;
                    d
                }
                Err(source) => {
                    return Err(SimError::Schedule { index, workflow: request.workflow.clone(), source })
                }
            };

            let actual = dataset
                .integrate(
                    &decision.region,
                    decision.start.timestamp(),
                    job.true_duration_s,
                    IntensityKind::Actual,
                    CoveragePolicy::HoldEdges,
                )
                .map_err(|e| SimError::Schedule {
                    index,
                    workflow: request.workflow.clone(),
                    source: e.into(),
                })?;
            let end = decision.start + Duration::seconds(job.true_duration_s);
            pending.push(Reverse((end, index)));
            executed.push(ExecutedJob {
                deadline_violated: decision.deadline.is_some_and(|d| end > d),
                coverage_gap: decision.coverage_gap || actual.coverage_gap,
                predicted_emissions: decision.predicted_emissions,
                actual_emissions: actual.reu,
                actual_duration_s: job.true_duration_s,
                decision,
            });
        }

        let total_actual: f64 = executed.iter().map(|j| j.actual_emissions).sum();
        let total_predicted: f64 = executed.iter().map(|j| j.predicted_emissions).sum();
        Ok(StrategyReport {
            label: strategy.label(),
            strategy: *strategy,
            total_actual_emissions: total_actual,
            total_predicted_emissions: total_predicted,
            relative_improvement: 0.0,
            series: build_series(&executed, dataset),
            fallback_count: executed.iter().filter(|j| j.decision.fallback).count(),
            deadline_violation_count: executed.iter().filter(|j| j.deadline_violated).count(),
            coverage_gap_count: executed.iter().filter(|j| j.coverage_gap).count(),
            executed,
        })
    }
}

/// Cumulative emissions and running-job counts on the dataset's resolution
/// grid, from the first start to the last end.
fn build_series(executed: &[ExecutedJob], dataset: &IntensityDataset) -> Vec<SeriesPoint> {
    if executed.is_empty() {
        return Vec::new();
    }
    let step = dataset.resolution_s();
    let first = executed.iter().map(|j| j.decision.start.timestamp()).min().unwrap();
    let last = executed.iter().map(|j| j.end().timestamp()).max().unwrap();
    let origin = first.div_euclid(step) * step;
    let samples = ((last - origin + step - 1) / step) as usize + 1;

    // bucket k collects emissions accrued in (t_{k-1}, t_k]
    let mut buckets = vec![0.0; samples];
    for job in executed {
        let (start, end) = (job.decision.start.timestamp(), job.end().timestamp());
        let mut k = ((start - origin) / step) as usize;
        let mut from = start;
        while from < end {
            let bucket_end = origin + (k as i64 + 1) * step;
            let to = end.min(bucket_end);
            let piece = dataset
                .integrate(&job.decision.region, from, to - from, IntensityKind::Actual, CoveragePolicy::HoldEdges)
                .map(|e| e.reu)
                .unwrap_or(0.0);
            buckets[(k + 1).min(samples - 1)] += piece;
            from = to;
            k += 1;
        }
    }

    let mut starts: Vec<i64> = executed.iter().map(|j| j.decision.start.timestamp()).collect();
    let mut ends: Vec<i64> = executed.iter().map(|j| j.end().timestamp()).collect();
    starts.sort_unstable();
    ends.sort_unstable();

    let mut cumulative = 0.0;
    (0..samples)
        .map(|k| {
            let t = origin + k as i64 * step;
            cumulative += buckets[k];
            let running = starts.partition_point(|&s| s <= t) - ends.partition_point(|&e| e <= t);
            SeriesPoint {
                timestamp: to_instant(t),
                cumulative_emissions: cumulative,
                running_jobs: running,
            }
        })
        .collect()
}

fn improvement(total: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        1.0 - total / baseline
    } else {
        0.0
    }
}

/// Replays the trace once per strategy (in parallel) and reports emissions
/// relative to round-robin. The baseline is computed even when round-robin
/// is not among the requested strategies.
pub fn run_simulation(config: &SimulationConfig) -> Result<EmissionsReport, SimError> {
    if config.jobs.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    if config.strategies.is_empty() {
        return Err(SimError::NoStrategies);
    }
    for s in &config.strategies {
        s.validate().map_err(SimError::InvalidStrategy)?;
    }
    let mut sorted_config;
    let config = if config.jobs.windows(2).all(|w| w[0].request.arrival <= w[1].request.arrival) {
        config
    } else {
        sorted_config = config.clone();
        crate::workflow::sort_trace(&mut sorted_config.jobs);
        &sorted_config
    };

    let mut regions = config.regions.clone().unwrap_or_else(|| config.intensity.regions());
    regions.sort();
    regions.dedup();
    let replay = Replay { config, regions };

    let mut strategies = config.strategies.clone();
    let baseline_requested = strategies.iter().any(|s| s.kind == StrategyKind::RoundRobin);
    if !baseline_requested {
        strategies.push(StrategyConfig::round_robin());
    }

    let results: Vec<Result<StrategyReport, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|s| {
                let replay = &replay;
                scope.spawn(move || replay.run(s))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay thread panicked")).collect()
    });
    let mut reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let baseline_total = reports
        .iter()
        .find(|r| r.strategy.kind == StrategyKind::RoundRobin)
        .map(|r| r.total_actual_emissions)
        .expect("baseline was replayed");
    if !baseline_requested {
        reports.pop();
    }
    for r in &mut reports {
        r.relative_improvement = if r.strategy.kind == StrategyKind::RoundRobin {
            0.0
        } else {
            improvement(r.total_actual_emissions, baseline_total)
        };
    }
    Ok(EmissionsReport { seed: config.seed, baseline_total, strategies: reports })
}

fn csv_io(e: impl std::fmt::Display) -> SimError {
    SimError::Io { path: "<writer>".into(), reason: e.to_string() }
}

/// `strategy,total_reu,improvement_pct,fallbacks,deadline_violations`
pub fn write_summary_csv<W: Write>(report: &EmissionsReport, writer: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "total_reu", "improvement_pct", "fallbacks", "deadline_violations"])
        .map_err(csv_io)?;
    for s in &report.strategies {
        w.write_record([
            s.label.clone(),
            format!("{:.6}", s.total_actual_emissions),
            format!("{:.4}", s.relative_improvement * 100.0),
            s.fallback_count.to_string(),
            s.deadline_violation_count.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush().map_err(csv_io)
}

/// `timestamp,cumulative_emissions_reu,running_jobs`
pub fn write_series_csv<W: Write>(strategy: &StrategyReport, writer: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "cumulative_emissions_reu", "running_jobs"])
        .map_err(csv_io)?;
    for p in &strategy.series {
        w.write_record([
            format_instant(p.timestamp),
            format!("{:.6}", p.cumulative_emissions),
            p.running_jobs.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush().map_err(csv_io)
}

/// Long format `strategy,timestamp,metric,value` for plotting tools.
pub fn write_plot_csv<W: Write>(report: &EmissionsReport, writer: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "timestamp", "metric", "value"]).map_err(csv_io)?;
    for s in &report.strategies {
        for p in &s.series {
            let ts = format_instant(p.timestamp);
            w.write_record([s.label.as_str(), &ts, "cumulative_emissions_reu", &format!("{:.6}", p.cumulative_emissions)])
                .map_err(csv_io)?;
            w.write_record([s.label.as_str(), &ts, "running_jobs", &p.running_jobs.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush().map_err(csv_io)
}

/// Writes `summary.csv`, `series_<label>.csv` per strategy and `plot_data.csv`.
pub fn write_report_dir(report: &EmissionsReport, dir: &Path) -> Result<(), SimError> {
    let io = |p: &Path, e: std::io::Error| SimError::Io { path: p.display().to_string(), reason: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let create = |name: String| {
        let path = dir.join(name);
        std::fs::File::create(&path).map_err(|e| io(&path, e))
    };
    write_summary_csv(report, create("summary.csv".into())?)?;
    for s in &report.strategies {
        write_series_csv(s, create(format!("series_{}.csv", s.label))?)?;
    }
    write_plot_csv(report, create("plot_data.csv".into())?)
}

/// A summary row read back from `summary.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub total_reu: f64,
    pub improvement_pct: f64,
    pub fallbacks: usize,
    pub deadline_violations: usize,
}

pub fn read_summary_csv<R: std::io::Read>(reader: R) -> Result<Vec<SummaryRow>, SimError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(csv_io)
}

pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<22} {:>16} {:>12} {:>10} {:>10}\n",
        "strategy", "total_reu", "improvement", "fallbacks", "late"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<22} {:>16.3} {:>11.2}% {:>10} {:>10}\n",
            r.strategy, r.total_reu, r.improvement_pct, r.fallbacks, r.deadline_violations
        ));
    }
    out
}

impl EmissionsReport {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.strategies
            .iter()
            .map(|s| SummaryRow {
                strategy: s.label.clone(),
                total_reu: s.total_actual_emissions,
                improvement_pct: s.relative_improvement * 100.0,
                fallbacks: s.fallback_count,
                deadline_violations: s.deadline_violation_count,
            })
            .collect()
    }
}

/// Synthetic job trace settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub jobs: usize,
    pub workflows: usize,
    pub start: DateTime<Utc>,
    /// Arrivals are spread uniformly over this many seconds.
    pub span_s: i64,
    pub min_duration_s: i64,
    pub max_duration_s: i64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            jobs: 500,
            workflows: 20,
            start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            span_s: 3 * 86_400,
            min_duration_s: 120,
            max_duration_s: 2 * 3600,
            seed: 0,
        }
    }
}

/// Generates a trace where each workflow has a typical duration and
/// individual runs vary by up to ±20 % around it.
pub fn synthesize_trace(config: &TraceConfig) -> Vec<TracedJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let workflows = config.workflows.max(1);
    let lo = config.min_duration_s.max(1);
    let hi = config.max_duration_s.max(lo);
    let typical: Vec<i64> = (0..workflows).map(|_| rng.gen_range(lo..=hi)).collect();
    let mut jobs: Vec<TracedJob> = (0..config.jobs)
        .map(|_| {
            let w = rng.gen_range(0..workflows);
            let arrival = config.start + Duration::seconds(rng.gen_range(0..config.span_s.max(1)));
            let scale: f64 = rng.gen_range(0.8..1.2);
            let duration = ((typical[w] as f64 * scale).round() as i64).clamp(lo, hi);
            TracedJob {
                request: JobRequest {
                    workflow: WorkflowKey::new(format!("repo-{}", w % 10), format!("workflow-{w:02}"))
                        .expect("non-empty"),
                    arrival,
                    annotation: Annotation::default(),
                },
                true_duration_s: duration,
            }
        })
        .collect();
    crate::workflow::sort_trace(&mut jobs);
    jobs
}
