//! Simulation design and the Monte Carlo study.

pub mod generate;
pub mod study;

pub use generate::{
    calibrate_censoring, generate_sample, generate_with_c, propose_population, resolve_censoring, CalibrationPool, CensoringBasis,
    GeneratorConfig, PopulationDraw,
};
pub use study::{
    run_cell, run_mc, summarize, CellResult, Estimator, McMetrics, MetricsRow, ReplicateOutcome, StudyCell, StudyConfig,
    METRICS_COLUMNS,
};
