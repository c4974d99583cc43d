//! The decision engine: a preprocessing gate followed by one of three
//! placement strategies.
//!
//! All strategies plan on the FORECAST series. Placement cost is the
//! integrated forecast intensity over the job's planned window, so the
//! location-only strategy is the time-shifting search restricted to the
//! arrival instant.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::{CoveragePolicy, DataError, IntensityDataset, IntensityKind, RegionId};
use crate::estimator::{
    cap_deadline_by_dependencies, estimate_duration, infer_deadline, DependencyGuess,
    DurationEstimate, EstimatorParams, InferredDeadline,
};
use crate::workflow::{Histories, JobRequest, WorkflowHistory, WorkflowKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("no eligible regions")]
    NoRegions,
    #[error("deadline {deadline} leaves less than {needed_s} s after arrival {arrival}")]
    InfeasibleDeadline {
        arrival: DateTime<Utc>,
        deadline: DateTime<Utc>,
        needed_s: i64,
    },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ScheduleError {
    pub fn is_out_of_coverage(&self) -> bool {
        matches!(self, ScheduleError::Data(DataError::OutOfCoverage { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(alias = "round-robin", alias = "rr")]
    RoundRobin,
    #[serde(rename = "location", alias = "location_shift", alias = "ls")]
    LocationShift,
    #[serde(rename = "location_time", alias = "location_time_shift", alias = "lts")]
    LocationTimeShift,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::RoundRobin => "round_robin",
            StrategyKind::LocationShift => "location",
            StrategyKind::LocationTimeShift => "location_time",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "round_robin" | "round-robin" | "rr" => Some(StrategyKind::RoundRobin),
            "location" | "location_shift" | "ls" => Some(StrategyKind::LocationShift),
            "location_time" | "location_time_shift" | "lts" => Some(StrategyKind::LocationTimeShift),
            _ => None,
        }
    }
}

pub const DEFAULT_SLOT_S: i64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Uniform deadline buffer for replayed jobs (time shifting only).
    pub buffer_hours: Option<f64>,
    pub slot_s: i64,
}

impl StrategyConfig {
    pub fn round_robin() -> Self {
        Self { kind: StrategyKind::RoundRobin, buffer_hours: None, slot_s: DEFAULT_SLOT_S }
    }

    pub fn location_shift() -> Self {
        Self { kind: StrategyKind::LocationShift, buffer_hours: None, slot_s: DEFAULT_SLOT_S }
    }

    pub fn location_time_shift(buffer_hours: f64) -> Self {
        Self {
            kind: StrategyKind::LocationTimeShift,
            buffer_hours: Some(buffer_hours),
            slot_s: DEFAULT_SLOT_S,
        }
    }

    pub fn with_slot_s(mut self, slot_s: i64) -> Self {
        self.slot_s = slot_s;
        self
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.slot_s <= 0 {
            return Err(ScheduleError::InvalidStrategy(format!("slot_s must be positive, got {}", self.slot_s)));
        }
        if self.kind == StrategyKind::LocationTimeShift && !self.buffer_hours.is_some_and(|b| b > 0.0) {
            return Err(ScheduleError::InvalidStrategy("location_time needs buffer_hours > 0".into()));
        }
        Ok(())
    }

    /// Stable label such as `round_robin`, `location` or `location_time_3h`.
    pub fn label(&self) -> String {
        match (self.kind, self.buffer_hours) {
            (StrategyKind::LocationTimeShift, Some(b)) => format!("location_time_{b}h"),
            (kind, _) => kind.as_str().to_string(),
        }
    }

    pub fn buffer_s(&self) -> Option<i64> {
        self.buffer_hours.map(|h| (h * 3600.0).round() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessReason {
    Eligible,
    NotCarbonAware,
    Unknown,
    TooShort,
    NoFlexibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOutcome {
    pub eligible: bool,
    pub reason: PreprocessReason,
}

impl From<PreprocessReason> for PreprocessOutcome {
    fn from(reason: PreprocessReason) -> Self {
        Self { eligible: reason == PreprocessReason::Eligible, reason }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerParams {
    pub estimator: EstimatorParams,
    /// Jobs expected to run shorter than this skip carbon-aware placement.
    pub min_duration_s: i64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self { estimator: EstimatorParams::default(), min_duration_s: 60 }
    }
}

/// Duration and deadline the scheduler plans with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub estimate: Option<DurationEstimate>,
    pub deadline: InferredDeadline,
}

impl Plan {
    pub fn infer(
        request: &JobRequest,
        history: Option<&WorkflowHistory>,
        params: &EstimatorParams,
    ) -> Self {
        Self {
            estimate: estimate_duration(&request.annotation, history, params, &request.workflow).ok(),
            deadline: infer_deadline(request, history, params),
        }
    }
}

/// Decides whether a request goes through carbon-aware placement.
/// Unknown jobs are reported as such even when not carbon-aware.
pub fn preprocess_planned(
    request: &JobRequest,
    plan: &Plan,
    strategy: StrategyKind,
    params: &SchedulerParams,
) -> PreprocessOutcome {
    let reason = match plan.estimate {
        None => PreprocessReason::Unknown,
        Some(_) if !request.annotation.carbon_aware => PreprocessReason::NotCarbonAware,
        Some(e) if e.expected_s < params.min_duration_s as f64 => PreprocessReason::TooShort,
        Some(_)
            if strategy == StrategyKind::LocationTimeShift && plan.deadline.deadline.is_none() =>
        {
            PreprocessReason::NoFlexibility
        }
        Some(_) => PreprocessReason::Eligible,
    };
    reason.into()
}

pub fn preprocess(
    request: &JobRequest,
    history: Option<&WorkflowHistory>,
    strategy: StrategyKind,
    params: &SchedulerParams,
) -> PreprocessOutcome {
    let plan = Plan::infer(request, history, &params.estimator);
    preprocess_planned(request, &plan, strategy, params)
}

/// Cyclic region rotation shared by one decision stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRobin {
    counter: u64,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn advance(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionBasis {
    pub strategy: StrategyKind,
    pub reason: PreprocessReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub workflow: WorkflowKey,
    pub arrival: DateTime<Utc>,
    pub region: RegionId,
    pub start: DateTime<Utc>,
    pub estimated_duration_s: Option<i64>,
    pub deadline: Option<DateTime<Utc>>,
    /// Forecast emissions over the planned window, in REU.
    pub predicted_emissions: f64,
    /// Set when the round-robin rule placed the job.
    pub fallback: bool,
    pub basis: DecisionBasis,
    /// Part of the planned window lies outside forecast coverage.
    pub coverage_gap: bool,
}

/// Everything a decision may read besides the request itself.
#[derive(Debug, Clone, Copy)]
pub struct SchedulingContext<'a> {
    pub regions: &'a [RegionId],
    pub dataset: &'a IntensityDataset,
    pub histories: &'a Histories,
    pub dependencies: &'a [DependencyGuess],
    pub params: &'a SchedulerParams,
    pub coverage: CoveragePolicy,
}

impl<'a> SchedulingContext<'a> {
    pub fn plan(&self, request: &JobRequest) -> Plan {
        let history = self.histories.get(&request.workflow);
        let mut plan = Plan::infer(request, history, &self.params.estimator);
        plan.deadline = cap_deadline_by_dependencies(
            plan.deadline,
            request,
            self.dependencies,
            self.histories,
            &self.params.estimator,
        );
        plan
    }
}

/// Allowed regions in lexicographic order.
fn candidate_regions(request: &JobRequest, regions: &[RegionId]) -> Result<Vec<RegionId>, ScheduleError> {
    let mut out: Vec<RegionId> = regions
        .iter()
        .filter(|r| request.annotation.allows(r))
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    if out.is_empty() {
        Err(ScheduleError::NoRegions)
    } else {
        Ok(out)
    }
}

fn window_cost(
    dataset: &IntensityDataset,
    region: &RegionId,
    start: i64,
    duration_s: i64,
    policy: CoveragePolicy,
) -> Result<(f64, bool), ScheduleError> {
    let e = dataset.integrate(region, start, duration_s, IntensityKind::Forecast, policy)?;
    Ok((e.reu, e.coverage_gap))
}

fn point_cost(
    dataset: &IntensityDataset,
    region: &RegionId,
    t: i64,
    policy: CoveragePolicy,
) -> Result<(f64, bool), ScheduleError> {
    let series = dataset.series(region, IntensityKind::Forecast)?;
    if let Some(v) = series.value_at_secs(t) {
        return Ok((v, false));
    }
    if policy == CoveragePolicy::Strict {
        return Err(DataError::OutOfCoverage { region: region.to_string(), t: crate::carbon::to_instant(t) }.into());
    }
    let (start, _) = series.coverage_secs();
    let values = series.values();
    let v = if t < start { values[0] } else { values[values.len() - 1] };
    Ok((v, true))
}

/// Places the job in the next region of the rotation, starting immediately.
/// Rotation runs over the allowed regions only.
pub fn decide_round_robin(
    request: &JobRequest,
    regions: &[RegionId],
    rotation: &mut RoundRobin,
    dataset: &IntensityDataset,
    estimate: Option<&DurationEstimate>,
    policy: CoveragePolicy,
) -> Result<ScheduleDecision, ScheduleError> {
    let allowed: Vec<&RegionId> = regions.iter().filter(|r| request.annotation.allows(r)).collect();
    if allowed.is_empty() {
        return Err(ScheduleError::NoRegions);
    }
    let index = (rotation.advance() % allowed.len() as u64) as usize;
    let region = allowed[index].clone();
    let duration = estimate.map(DurationEstimate::total_secs);
    let (predicted, gap) = match duration {
        Some(d) => window_cost(dataset, &region, request.arrival.timestamp(), d, policy)?,
        None => (0.0, false),
    };
    Ok(ScheduleDecision {
        workflow: request.workflow.clone(),
        arrival: request.arrival,
        region,
        start: request.arrival,
        estimated_duration_s: duration,
        deadline: None,
        predicted_emissions: predicted,
        fallback: true,
        basis: DecisionBasis { strategy: StrategyKind::RoundRobin, reason: PreprocessReason::Eligible },
        coverage_gap: gap,
    })
}

/// Starts immediately in the allowed region with the lowest forecast cost
/// over the planned window (or the lowest current intensity when no
/// estimate exists). Ties go to the lexicographically smallest region.
pub fn decide_location_shift(
    request: &JobRequest,
    regions: &[RegionId],
    dataset: &IntensityDataset,
    estimate: Option<&DurationEstimate>,
    policy: CoveragePolicy,
) -> Result<ScheduleDecision, ScheduleError> {
    let arrival = request.arrival.timestamp();
    let duration = estimate.map(DurationEstimate::total_secs);
    let mut best: Option<(f64, bool, RegionId)> = None;
    for region in candidate_regions(request, regions)? {
        let (cost, gap) = match duration {
            Some(d) => window_cost(dataset, &region, arrival, d, policy)?,
            None => point_cost(dataset, &region, arrival, policy)?,
        };
        if best.as_ref().map_or(true, |(c, _, _)| cost < *c) {
            best = Some((cost, gap, region));
        }
    }
    let (cost, gap, region) = best.expect("candidate regions are non-empty");
    Ok(ScheduleDecision {
        workflow: request.workflow.clone(),
        arrival: request.arrival,
        region,
        start: request.arrival,
        estimated_duration_s: duration,
        deadline: None,
        predicted_emissions: if duration.is_some() { cost } else { 0.0 },
        fallback: false,
        basis: DecisionBasis { strategy: StrategyKind::LocationShift, reason: PreprocessReason::Eligible },
        coverage_gap: gap,
    })
}

/// Exhaustive search over `(start, region)` with starts on the grid
/// `arrival + k * slot_s` that still finish by the deadline. Ties go to the
/// earliest start, then the lexicographically smallest region.
pub fn decide_location_time_shift(
    request: &JobRequest,
    regions: &[RegionId],
    dataset: &IntensityDataset,
    estimate: &DurationEstimate,
    deadline: DateTime<Utc>,
    slot_s: i64,
    policy: CoveragePolicy,
) -> Result<ScheduleDecision, ScheduleError> {
    if slot_s <= 0 {
        return Err(ScheduleError::InvalidStrategy(format!("slot_s must be positive, got {slot_s}")));
    }
    let total = estimate.total_secs();
    let arrival = request.arrival.timestamp();
    let latest_start = deadline.timestamp() - total;
    if latest_start < arrival {
        return Err(ScheduleError::InfeasibleDeadline {
            arrival: request.arrival,
            deadline,
            needed_s: total,
        });
    }
    let regions = candidate_regions(request, regions)?;

    let mut best: Option<(f64, bool, i64, &RegionId)> = None;
    let mut start = arrival;
    while start <= latest_start {
        for region in &regions {
            let (cost, gap) = window_cost(dataset, region, start, total, policy)?;
            if best.as_ref().map_or(true, |b| cost < b.0) {
                best = Some((cost, gap, start, region));
            }
        }
        start += slot_s;
    }
    let (cost, gap, start, region) = best.expect("at least the arrival slot is a candidate");
    Ok(ScheduleDecision {
        workflow: request.workflow.clone(),
        arrival: request.arrival,
        region: region.clone(),
        start: crate::carbon::to_instant(start),
        estimated_duration_s: Some(total),
        deadline: Some(deadline),
        predicted_emissions: cost,
        fallback: false,
        basis: DecisionBasis {
            strategy: StrategyKind::LocationTimeShift,
            reason: PreprocessReason::Eligible,
        },
        coverage_gap: gap,
    })
}

/// Infers a plan from the context and decides.
pub fn decide(
    request: &JobRequest,
    strategy: &StrategyConfig,
    ctx: &SchedulingContext<'_>,
    rotation: &mut RoundRobin,
) -> Result<ScheduleDecision, ScheduleError> {
    let plan = ctx.plan(request);
    decide_planned(request, &plan, strategy, ctx, rotation)
}

/// Decides with an explicit plan. The rotation advances exactly once per
/// call whatever the outcome, so a job's round-robin slot depends only on
/// its position in the decision stream.
pub fn decide_planned(
    request: &JobRequest,
    plan: &Plan,
    strategy: &StrategyConfig,
    ctx: &SchedulingContext<'_>,
    rotation: &mut RoundRobin,
) -> Result<ScheduleDecision, ScheduleError> {
    strategy.validate()?;
    let estimate = plan.estimate.as_ref();
    if strategy.kind == StrategyKind::RoundRobin {
        let mut d = decide_round_robin(request, ctx.regions, rotation, ctx.dataset, estimate, ctx.coverage)?;
        d.deadline = plan.deadline.deadline;
        return check_deadline(d);
    }

    let outcome = preprocess_planned(request, plan, strategy.kind, ctx.params);
    if outcome.reason == PreprocessReason::Unknown {
        let mut d = decide_round_robin(request, ctx.regions, rotation, ctx.dataset, estimate, ctx.coverage)?;
        d.basis = DecisionBasis { strategy: strategy.kind, reason: outcome.reason };
        d.deadline = plan.deadline.deadline;
        return check_deadline(d);
    }
    rotation.advance();

    let mut decision = match (outcome.reason, strategy.kind) {
        (PreprocessReason::Eligible, StrategyKind::LocationTimeShift) => {
            let estimate = estimate.expect("eligible jobs have an estimate");
            let deadline = plan.deadline.deadline.expect("eligible jobs have a deadline");
            decide_location_time_shift(
                request,
                ctx.regions,
                ctx.dataset,
                estimate,
                deadline,
                strategy.slot_s,
                ctx.coverage,
            )?
        }
        _ => decide_location_shift(request, ctx.regions, ctx.dataset, estimate, ctx.coverage)?,
    };
    decision.basis = DecisionBasis { strategy: strategy.kind, reason: outcome.reason };
    decision.deadline = plan.deadline.deadline;
    check_deadline(decision)
}

/// A decision that carries a deadline must finish its planned window by it.
fn check_deadline(d: ScheduleDecision) -> Result<ScheduleDecision, ScheduleError> {
    match (d.deadline, d.estimated_duration_s) {
        (Some(deadline), Some(total)) if d.start + Duration::seconds(total) > deadline => {
            Err(ScheduleError::InfeasibleDeadline { arrival: d.arrival, deadline, needed_s: total })
        }
        _ => Ok(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carbon::CarbonIntensitySeries;
    use crate::estimator::DeadlineBasis;
    use crate::workflow::Annotation;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn r(s: &str) -> RegionId {
        RegionId::new(s).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap()
    }

    fn plus(t: DateTime<Utc>, secs: i64) -> DateTime<Utc> {
        t + Duration::seconds(secs)
    }

    fn dataset(regions: &[(&str, Vec<f64>)], resolution: i64) -> IntensityDataset {
        IntensityDataset::from_series(regions.iter().map(|(name, vals)| {
            CarbonIntensitySeries::new(r(name), IntensityKind::Forecast, t0(), resolution, vals.clone()).unwrap()
        }))
        .unwrap()
    }

    fn job(annotation: Annotation) -> JobRequest {
        JobRequest { workflow: WorkflowKey::new("repo", "wf").unwrap(), arrival: t0(), annotation }
    }

    fn aware(duration: i64, deadline: i64) -> Annotation {
        Annotation {
            carbon_aware: true,
            duration_estimate_s: Some(duration),
            deadline_offset_s: Some(deadline),
            allowed_regions: None,
        }
    }

    fn exact_plan(duration: i64, deadline_offset: Option<i64>) -> Plan {
        Plan {
            estimate: Some(DurationEstimate::exact(duration)),
            deadline: InferredDeadline {
                deadline: deadline_offset.map(|o| plus(t0(), o)),
                basis: if deadline_offset.is_some() { DeadlineBasis::UserProvided } else { DeadlineBasis::None },
            },
        }
    }

    #[test]
    fn preprocess_reasons() {
        let p = SchedulerParams::default();
        let lts = StrategyKind::LocationTimeShift;
        assert_eq!(preprocess(&job(aware(3600, 10800)), None, lts, &p).reason, PreprocessReason::Eligible);
        assert!(preprocess(&job(aware(3600, 10800)), None, lts, &p).eligible);
        assert_eq!(preprocess(&job(Annotation::default()), None, lts, &p).reason, PreprocessReason::Unknown);
        assert_eq!(preprocess(&job(aware(10, 10800)), None, lts, &p).reason, PreprocessReason::TooShort);
        let no_deadline = Annotation { deadline_offset_s: None, ..aware(3600, 1) };
        assert_eq!(preprocess(&job(no_deadline.clone()), None, lts, &p).reason, PreprocessReason::NoFlexibility);
        assert_eq!(
            preprocess(&job(no_deadline), None, StrategyKind::LocationShift, &p).reason,
            PreprocessReason::Eligible
        );
        let lazy = Annotation { carbon_aware: false, ..aware(3600, 10800) };
        assert_eq!(preprocess(&job(lazy), None, lts, &p).reason, PreprocessReason::NotCarbonAware);
    }

    #[test]
    fn round_robin_rotation() {
        let ds = dataset(&[("a", vec![1.0; 4]), ("b", vec![1.0; 4]), ("c", vec![1.0; 4])], 3600);
        let regions = ds.regions();
        let mut rr = RoundRobin::new();
        let picked: Vec<String> = (0..4)
            .map(|_| {
                decide_round_robin(&job(Annotation::default()), &regions, &mut rr, &ds, None, CoveragePolicy::Strict)
                    .unwrap()
                    .region
                    .to_string()
            })
            .collect();
        assert_eq!(picked, ["a", "b", "c", "a"]);

        let one = [r("a")];
        let mut rr = RoundRobin::new();
        for _ in 0..3 {
            let d = decide_round_robin(&job(Annotation::default()), &one, &mut rr, &ds, None, CoveragePolicy::Strict).unwrap();
            assert_eq!(d.region, r("a"));
            assert!(d.fallback);
        }
        assert!(matches!(
            decide_round_robin(&job(Annotation::default()), &[], &mut rr, &ds, None, CoveragePolicy::Strict),
            Err(ScheduleError::NoRegions)
        ));
    }

    #[test]
    fn location_shift_choices() {
        let ds = dataset(&[("a", vec![100.0; 4]), ("b", vec![50.0; 4])], 3600);
        let regions = ds.regions();
        let e = DurationEstimate::exact(3600);
        let d = decide_location_shift(&job(aware(3600, 7200)), &regions, &ds, Some(&e), CoveragePolicy::Strict).unwrap();
        assert_eq!(d.region, r("b"));
        assert_eq!(d.predicted_emissions, 50.0);
        assert_eq!(d.start, t0());

        let d = decide_location_shift(&job(Annotation::default()), &regions, &ds, None, CoveragePolicy::Strict).unwrap();
        assert_eq!(d.region, r("b"));

        let flat = dataset(&[("z", vec![7.0; 4]), ("m", vec![7.0; 4])], 3600);
        let d = decide_location_shift(&job(aware(60, 60)), &flat.regions(), &flat, Some(&e), CoveragePolicy::Strict).unwrap();
        assert_eq!(d.region, r("m"));

        let ds = dataset(&[("eu-central-1", vec![100.0; 4]), ("us-west-2", vec![1.0; 4])], 3600);
        let mut ann = aware(3600, 7200);
        ann.allowed_regions = Some([r("eu-central-1")].into_iter().collect());
        let d = decide_location_shift(&job(ann), &ds.regions(), &ds, Some(&e), CoveragePolicy::Strict).unwrap();
        assert_eq!(d.region, r("eu-central-1"));
    }

    #[test]
    fn time_shift_finds_cheap_hour() {
        let ds = dataset(&[("a", vec![100.0, 50.0, 200.0])], 3600);
        let e = DurationEstimate::exact(3600);
        let d = decide_location_time_shift(
            &job(aware(3600, 10800)), &ds.regions(), &ds, &e, plus(t0(), 10800), 300, CoveragePolicy::Strict,
        )
        .unwrap();
        assert_eq!(d.start, plus(t0(), 3600));
        assert_eq!(d.predicted_emissions, 50.0);

        let d = decide_location_time_shift(
            &job(aware(3600, 3600)), &ds.regions(), &ds, &e, plus(t0(), 3600), 300, CoveragePolicy::Strict,
        )
        .unwrap();
        assert_eq!(d.start, t0());

        let err = decide_location_time_shift(
            &job(aware(3600, 1800)), &ds.regions(), &ds, &e, plus(t0(), 1800), 300, CoveragePolicy::Strict,
        );
        assert!(matches!(err, Err(ScheduleError::InfeasibleDeadline { .. })));

        let err = decide_location_time_shift(
            &job(aware(3600, 14400)), &ds.regions(), &ds, &e, plus(t0(), 14400), 300, CoveragePolicy::Strict,
        );
        assert!(err.unwrap_err().is_out_of_coverage());
    }

    #[test]
    fn time_shift_flat_prefers_arrival_and_smallest_region() {
        let ds = dataset(&[("b", vec![10.0; 12]), ("a", vec![10.0; 12])], 3600);
        let e = DurationEstimate::exact(3600);
        let d = decide_location_time_shift(
            &job(aware(3600, 6 * 3600)), &ds.regions(), &ds, &e, plus(t0(), 6 * 3600), 300, CoveragePolicy::Strict,
        )
        .unwrap();
        assert_eq!((d.start, d.region), (t0(), r("a")));
    }

    #[test]
    fn unmeetable_deadline_rejected_on_every_path() {
        let ds = dataset(&[("a", vec![100.0; 24]), ("b", vec![50.0; 24])], 3600);
        let regions = ds.regions();
        let histories = HashMap::new();
        let params = SchedulerParams::default();
        let ctx = SchedulingContext {
            regions: &regions,
            dataset: &ds,
            histories: &histories,
            dependencies: &[],
            params: &params,
            coverage: CoveragePolicy::Strict,
        };
        // 1 h with the default buffer plans 1.5 h, more than the 1.25 h allowed
        let tight = Annotation { carbon_aware: false, ..aware(3600, 4500) };
        let mut rr = RoundRobin::new();
        for (i, s) in [
            StrategyConfig::round_robin(),
            StrategyConfig::location_shift(),
            StrategyConfig::location_time_shift(3.0),
        ]
        .iter()
        .enumerate()
        {
            let e = decide(&job(tight.clone()), s, &ctx, &mut rr).unwrap_err();
            assert!(matches!(e, ScheduleError::InfeasibleDeadline { needed_s: 5400, .. }), "{e:?}");
            assert_eq!(rr.counter(), i as u64 + 1);
        }
        let loose = Annotation { carbon_aware: false, ..aware(3600, 5400) };
        let d = decide(&job(loose), &StrategyConfig::location_shift(), &ctx, &mut rr).unwrap();
        assert_eq!(d.deadline, Some(plus(t0(), 5400)));
    }

    #[test]
    fn dispatch_fallbacks() {
        let ds = dataset(&[("a", vec![100.0; 24]), ("b", vec![50.0; 24])], 3600);
        let regions = ds.regions();
        let histories = HashMap::new();
        let params = SchedulerParams::default();
        let ctx = SchedulingContext {
            regions: &regions,
            dataset: &ds,
            histories: &histories,
            dependencies: &[],
            params: &params,
            coverage: CoveragePolicy::Strict,
        };
        let lts = StrategyConfig::location_time_shift(6.0);

        let mut rr = RoundRobin::new();
        let d = decide(&job(Annotation::default()), &lts, &ctx, &mut rr).unwrap();
        assert!(d.fallback);
        assert_eq!(d.basis.reason, PreprocessReason::Unknown);
        assert_eq!(d.region, r("a"));
        assert_eq!(rr.counter(), 1);

        let lazy = Annotation { carbon_aware: false, ..aware(3600, 10800) };
        let d = decide(&job(lazy), &StrategyConfig::location_shift(), &ctx, &mut rr).unwrap();
        assert_eq!((d.region.clone(), d.start, d.fallback), (r("b"), t0(), false));
        assert_eq!(d.basis.reason, PreprocessReason::NotCarbonAware);
        assert_eq!(rr.counter(), 2);

        let d = decide(&job(aware(3600, 10800)), &lts, &ctx, &mut rr).unwrap();
        assert_eq!(d.basis.reason, PreprocessReason::Eligible);
        assert_eq!(d.basis.strategy, StrategyKind::LocationTimeShift);
        assert!(d.start + Duration::seconds(d.estimated_duration_s.unwrap()) <= d.deadline.unwrap());

        let d = decide(&job(aware(3600, 10800)), &StrategyConfig::round_robin(), &ctx, &mut rr).unwrap();
        assert!(d.fallback);
        assert_eq!(d.region, r("b"));

        // an explicit plan bypasses the estimator buffer
        let d = decide_planned(&job(aware(3600, 10800)), &exact_plan(3600, Some(3600)), &lts, &ctx, &mut rr).unwrap();
        assert_eq!((d.start, d.estimated_duration_s), (t0(), Some(3600)));

        assert!(matches!(
            decide(&job(aware(3600, 10800)), &StrategyConfig { buffer_hours: None, ..lts }, &ctx, &mut rr),
            Err(ScheduleError::InvalidStrategy(_))
        ));
    }

    #[test]
    fn strategy_labels() {
        assert_eq!(StrategyConfig::round_robin().label(), "round_robin");
        assert_eq!(StrategyConfig::location_shift().label(), "location");
        assert_eq!(StrategyConfig::location_time_shift(3.0).label(), "location_time_3h");
        assert_eq!(StrategyKind::parse("lts"), Some(StrategyKind::LocationTimeShift));
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<u16>>, i64, i64, i64, i64)> {
        (1usize..4, 8usize..40).prop_flat_map(|(regions, points)| {
            (
                proptest::collection::vec(proptest::collection::vec(0u16..500, points), regions),
                0i64..1800,
                1i64..4 * 3600,
                0i64..6 * 3600,
                prop_oneof![Just(300i64), Just(600), Just(900)],
            )
        })
    }

    proptest! {
        #[test]
        fn decisions_respect_deadlines_and_nesting((values, offset, duration, buffer, slot) in arb_instance()) {
            let names = ["r0", "r1", "r2", "r3"];
            let regions: Vec<(&str, Vec<f64>)> = values
                .iter()
                .enumerate()
                .map(|(i, v)| (names[i], v.iter().map(|&x| f64::from(x)).collect()))
                .collect();
            let ds = dataset(&regions, 900);
            let (_, end) = ds.coverage_secs();
            let arrival = t0().timestamp() + offset;
            prop_assume!(arrival + duration + buffer <= end);
            let req = JobRequest { arrival: crate::carbon::to_instant(arrival), ..job(aware(duration, duration + buffer)) };
            let e = DurationEstimate::exact(duration);
            let deadline = crate::carbon::to_instant(arrival + duration + buffer);
            let d = decide_location_time_shift(&req, &ds.regions(), &ds, &e, deadline, slot, CoveragePolicy::Strict).unwrap();
            prop_assert!(d.start >= req.arrival);
            prop_assert!(d.start + Duration::seconds(d.estimated_duration_s.unwrap()) <= deadline);
            let ls = decide_location_shift(&req, &ds.regions(), &ds, Some(&e), CoveragePolicy::Strict).unwrap();
            prop_assert!(d.predicted_emissions <= ls.predicted_emissions);
        }
    }
}
