//! Metrics, the per-step cost model, parameter sweeps and result files.

mod cost;
mod emit;
mod metrics;
mod sweep;

pub use cost::{h2d_bytes, h2d_bytes_kept, kv_bytes, search_closed_form, table_bytes, CostCounters};
pub use emit::{write_decode_results, write_sweep_results, DECODE_COLUMNS, SWEEP_COLUMNS};
pub use metrics::{l2_distance, mean, percentile, recall_at_k};
pub use sweep::{check_report, sweep, SkippedCell, SweepCell, SweepGrid, SweepOutput, SweepResult};
