//! Discrete-event core. Time is integer microseconds; metrics are reported
//! in milliseconds.

mod engine;
pub mod metrics;
mod queue;

pub use crate::baselines::SchemeId;
pub use engine::{build_topology, run_on, run_scenario, run_single, sample_telemetry, RunOptions};
pub use metrics::{bandwidth_factor, coverage_time, RunMetrics, TxMetrics};
pub use queue::EventQueue;

pub type SimTime = u64;

pub fn ms_to_us(ms: f64) -> SimTime {
    (ms * 1000.0).round().max(0.0) as SimTime
}

pub fn us_to_ms(t: SimTime) -> f64 {
    t as f64 / 1000.0
}
