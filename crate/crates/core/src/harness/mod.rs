//! Experiment driver: open- and closed-loop evaluation, bilinear-matrix
//! export, and the end-to-end desk pipeline.

pub mod closed_loop;
pub mod export;
pub mod open_loop;
pub mod pipeline;
pub mod report;
pub mod scenario;

pub use closed_loop::{closed_loop_report, run_closed_loop, ClosedLoopRow, ClosedLoopRun};
pub use open_loop::{open_loop_errors, open_loop_report, RolloutError};
pub use pipeline::{run_desk_pipeline, PipelineConfig, PipelineSummary};
pub use report::{RmseRow, TimingRow, Verdict};
pub use scenario::{dlc_reference, Profile, Scenario, Transition};
