//! Carbon-aware scheduling for CI/CD jobs.
//!
//! The crate decides when and in which region a CI/CD job should run so that
//! the carbon intensity of the consumed electricity is minimized, and replays
//! historical job traces against intensity data to compare strategies.

pub mod carbon;
pub mod estimator;
pub mod scheduler;
pub mod service;
pub mod simulator;
pub mod workflow;

pub use carbon::{
    load_intensity_csv, synthesize_dataset, CarbonIntensitySeries, CoveragePolicy, DataError,
    IntensityDataset, IntensityKind, RegionId, SyntheticConfig,
};
pub use estimator::{
    classify_job, estimate_duration, infer_deadline, infer_dependencies, DurationEstimate,
    EstimatorParams, JobClass,
};
pub use scheduler::{
    decide, ScheduleDecision, ScheduleError, SchedulerParams, SchedulingContext, StrategyConfig,
    StrategyKind,
};
pub use simulator::{
    run_simulation, BufferPolicy, EmissionsReport, ExecutedJob, SimError, SimulationConfig,
    StrategyReport,
};
pub use workflow::{
    build_histories, load_trace_csv, parse_annotation, Annotation, JobRequest, TracedJob,
    WorkflowKey,
};
