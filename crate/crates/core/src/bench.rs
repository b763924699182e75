//! Wall-clock timing protocol and the benchmark report schema.

use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::compile::MultiplyCount;
use crate::error::{Error, Result};
use crate::runtime::{InferenceSession, Real};

pub const REPORT_VERSION: u32 = 1;
pub const MIN_WARMUP: usize = 3;
pub const MIN_REPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self {
            warmup: MIN_WARMUP,
            reps: MIN_REPS,
        }
    }
}

impl TimingProtocol {
    pub fn new(warmup: usize, reps: usize) -> Result<Self> {
        if warmup < MIN_WARMUP || reps < MIN_REPS {
            return Err(Error::InvalidConfig(format!(
                "timing needs at least {MIN_WARMUP} warmup and {MIN_REPS} timed repetitions, got {warmup} and {reps}"
            )));
        }
        Ok(Self { warmup, reps })
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Seconds per call of `infer_batch` for both sessions on the same batch.
///
/// Warmup runs go first; timed runs then alternate between the two sessions
/// so that drift in machine load affects both sides alike.
pub fn time_pair<F: Real>(
    model: &InferenceSession<F>,
    baseline: &InferenceSession<F>,
    batch: &ArrayView2<'_, F>,
    protocol: TimingProtocol,
) -> Result<(Vec<f64>, Vec<f64>)> {
    for _ in 0..protocol.warmup {
        std::hint::black_box(model.infer_batch(batch)?);
        std::hint::black_box(baseline.infer_batch(batch)?);
    }
    let mut model_times = Vec::with_capacity(protocol.reps);
    let mut baseline_times = Vec::with_capacity(protocol.reps);
    for _ in 0..protocol.reps {
        model_times.push(time_once(model, batch)?);
        baseline_times.push(time_once(baseline, batch)?);
    }
    Ok((model_times, baseline_times))
}

fn time_once<F: Real>(session: &InferenceSession<F>, batch: &ArrayView2<'_, F>) -> Result<f64> {
    let start = Instant::now();
    let out = session.infer_batch(batch)?;
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(out);
    // Timer granularity can report zero for tiny batches.
    Ok(elapsed.max(1e-9))
}

/// Ratio of dense to compiled multiplies. Zero compiled work reports infinity.
pub fn multiply_ratio(dense: u64, compiled: u64) -> f64 {
    if compiled == 0 {
        f64::INFINITY
    } else {
        dense as f64 / compiled as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub report_version: u32,
    pub model_id: String,
    pub baseline_id: String,
    pub mode: String,
    pub precision: String,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub workers: usize,
    pub chunk_rows: usize,
    pub model_times_s: Vec<f64>,
    pub baseline_times_s: Vec<f64>,
    pub model_median_s: f64,
    pub baseline_median_s: f64,
    pub model_multiplies: MultiplyCount,
    pub baseline_multiplies: MultiplyCount,
    /// Baseline over model multiplies, transforms included.
    pub speedup_multiply: f64,
    /// Same ratio over linear layers only.
    pub speedup_multiply_layers: f64,
    pub speedup_time: f64,
    pub model_accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub model_peak_bytes: usize,
    pub baseline_peak_bytes: usize,
}

/// Identity and accounting inputs for a report; timings are added by
/// [`BenchReport::new`].
#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub model_id: String,
    pub baseline_id: String,
    pub mode: String,
    pub precision: String,
    pub batch_size: usize,
    pub protocol: TimingProtocol,
    pub workers: usize,
    pub chunk_rows: usize,
    pub model_multiplies: MultiplyCount,
    pub baseline_multiplies: MultiplyCount,
    pub model_peak_bytes: usize,
    pub baseline_peak_bytes: usize,
}

impl BenchReport {
    pub fn new(setup: BenchSetup, model_times_s: Vec<f64>, baseline_times_s: Vec<f64>) -> Result<Self> {
        if model_times_s.is_empty() || baseline_times_s.is_empty() {
            return Err(Error::InvalidArgument("a report needs at least one timed run per side".into()));
        }
        if model_times_s.iter().chain(&baseline_times_s).any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("timings must be positive".into()));
        }
        let model_median_s = median(&model_times_s);
        let baseline_median_s = median(&baseline_times_s);
        Ok(Self {
            report_version: REPORT_VERSION,
            model_id: setup.model_id,
            baseline_id: setup.baseline_id,
            mode: setup.mode,
            precision: setup.precision,
            batch_size: setup.batch_size,
            repetitions: setup.protocol.reps,
            warmup: setup.protocol.warmup,
            workers: setup.workers,
            chunk_rows: setup.chunk_rows,
            model_times_s,
            baseline_times_s,
            model_median_s,
            baseline_median_s,
            speedup_multiply: multiply_ratio(setup.baseline_multiplies.total(), setup.model_multiplies.total()),
            speedup_multiply_layers: multiply_ratio(setup.baseline_multiplies.linear, setup.model_multiplies.linear),
            model_multiplies: setup.model_multiplies,
            baseline_multiplies: setup.baseline_multiplies,
            speedup_time: baseline_median_s / model_median_s,
            model_accuracy: None,
            baseline_accuracy: None,
            model_peak_bytes: setup.model_peak_bytes,
            baseline_peak_bytes: setup.baseline_peak_bytes,
        })
    }
}
