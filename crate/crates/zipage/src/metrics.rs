//! Run metrics: throughput, per-request latency, utilization and
//! concurrency series, stage time shares, and their JSON/CSV emission.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of simulated time spent per stage. In asynchronous mode the
/// compression share measures overlapped occupancy rather than stalls,
/// so the three shares need not sum to one there.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageShares {
    pub prefill: f64,
    pub decode: f64,
    pub compression: f64,
}

/// Per-step time series. All series have `total_steps` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    /// Running-queue size at the end of each step.
    pub running: Vec<u32>,
    /// Waiting-queue size at the end of each step.
    pub waiting: Vec<u32>,
    /// Owned blocks / total blocks.
    pub utilization: Vec<f64>,
    /// Tokens decoded this step divided by the step's simulated ticks.
    pub throughput: Vec<f64>,
}

/// Everything a run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub total_steps: u64,
    pub total_ticks: f64,
    /// Decoded tokens across all requests (prompt tokens excluded).
    pub total_tokens: u64,
    /// total_tokens / total_ticks.
    pub tps: f64,
    /// Mean over finished requests of (last-token time - first-token
    /// time) / tokens generated.
    pub mean_tpot: f64,
    pub tpot_per_request: Vec<f64>,
    pub stage_shares: StageShares,
    /// (running count, steps spent at that count), sorted by count.
    pub concurrency_histogram: Vec<(u32, u64)>,
    pub preemptions: u64,
    pub compressions: u64,
    /// Prompt tokens actually written during prefill (shared prefix
    /// tokens are not re-written).
    pub prefill_tokens_written: u64,
    /// Mean over decode steps of (compression triggers / running count).
    pub mean_compression_fraction: f64,
    /// False when the run stopped at max_steps with work remaining.
    pub completed: bool,
    pub series: MetricsSeries,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Writes the metrics as one JSON document.
pub fn emit_metrics_json(metrics: &EngineMetrics, path: &Path) -> Result<(), MetricsError> {
    let text = serde_json::to_string_pretty(metrics)?;
    std::fs::write(path, text)?;
    Ok(())
}

// Numbers in CSV go through serde_json too, so both formats print
// byte-identical values.
fn fmt_num<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("numbers always serialize")
}

/// Writes a summary file plus one CSV per time series (step column
/// first) into `dir`.
pub fn emit_metrics_csv(metrics: &EngineMetrics, dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir)?;

    let mut summary = std::fs::File::create(dir.join("summary.csv"))?;
    writeln!(summary, "metric,value")?;
    writeln!(summary, "total_steps,{}", metrics.total_steps)?;
    writeln!(summary, "total_ticks,{}", fmt_num(&metrics.total_ticks))?;
    writeln!(summary, "total_tokens,{}", metrics.total_tokens)?;
    writeln!(summary, "tps,{}", fmt_num(&metrics.tps))?;
    writeln!(summary, "mean_tpot,{}", fmt_num(&metrics.mean_tpot))?;
    writeln!(summary, "stage_share_prefill,{}", fmt_num(&metrics.stage_shares.prefill))?;
    writeln!(summary, "stage_share_decode,{}", fmt_num(&metrics.stage_shares.decode))?;
    writeln!(summary, "stage_share_compression,{}", fmt_num(&metrics.stage_shares.compression))?;
    writeln!(summary, "preemptions,{}", metrics.preemptions)?;
    writeln!(summary, "compressions,{}", metrics.compressions)?;
    writeln!(summary, "prefill_tokens_written,{}", metrics.prefill_tokens_written)?;
    writeln!(summary, "mean_compression_fraction,{}", fmt_num(&metrics.mean_compression_fraction))?;
    writeln!(summary, "completed,{}", metrics.completed)?;

    write_series(&dir.join("running.csv"), "running", &metrics.series.running, |v| v.to_string())?;
    write_series(&dir.join("waiting.csv"), "waiting", &metrics.series.waiting, |v| v.to_string())?;
    write_series(&dir.join("utilization.csv"), "utilization", &metrics.series.utilization, fmt_num)?;
    write_series(&dir.join("throughput.csv"), "throughput", &metrics.series.throughput, fmt_num)?;
    Ok(())
}

fn write_series<T>(
    path: &Path,
    name: &str,
    series: &[T],
    fmt: impl Fn(&T) -> String,
) -> Result<(), MetricsError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,{name}")?;
    for (step, v) in series.iter().enumerate() {
        writeln!(f, "{step},{}", fmt(v))?;
    }
    Ok(())
}
