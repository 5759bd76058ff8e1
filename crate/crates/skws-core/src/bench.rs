//! Latency and memory benchmarking of the two inference modes.
//!
//! For each requested utterance length the harness times a full streaming
//! pass (per-block wall times come from the session itself) and a vanilla
//! full-context forward pass over the same frames. All timing uses the
//! monotonic clock; totals are the median over repeated runs and per-block
//! statistics pool the block times of every repeat. Streaming rows also
//! carry the analytic resident-state size, which depends only on the model
//! configuration, never on the utterance length.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{forward_full, ModelConfig, ModelParams};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::streaming::StreamingSession;
use crate::tensor::Matrix;

/// Benchmark request: which lengths to run and how often to repeat each.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Frame counts, at least two, strictly increasing.
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            lengths: vec![80, 800],
            repeats: 5,
            seed: 1,
        }
    }
}

/// One benchmark measurement: a mode at a length.
#[derive(Debug, Clone)]
pub struct BenchRow {
    /// "streaming" or "full-pass".
    pub mode: &'static str,
    pub frames: usize,
    /// Median whole-pass wall time over the repeats.
    pub total: Duration,
    pub block_median: Option<Duration>,
    pub block_mean: Option<Duration>,
    pub block_p95: Option<Duration>,
    pub state_bytes: Option<usize>,
}

fn median(sorted: &[Duration]) -> Duration {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

fn percentile_95(sorted: &[Duration]) -> Duration {
    let idx = ((sorted.len() as f64 * 0.95).ceil() as usize).saturating_sub(1);
    sorted[idx.min(sorted.len() - 1)]
}

fn mean(values: &[Duration]) -> Duration {
    let total: Duration = values.iter().sum();
    total / values.len() as u32
}

/// Run the benchmark matrix: every length in streaming mode, then every
/// length as a single vanilla full-context pass.
pub fn run_bench<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    if opts.lengths.len() < 2 {
        return Err(Error::InvalidInput(
            "benchmark needs at least two utterance lengths".into(),
        ));
    }
    if !opts.lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidInput(
            "benchmark lengths must be strictly increasing".into(),
        ));
    }
    if opts.lengths[0] == 0 {
        return Err(Error::InvalidInput("benchmark length 0 is empty".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::InvalidInput("benchmark needs repeats >= 1".into()));
    }
    if config.block_shift == 0 {
        return Err(Error::InvalidInput(
            "benchmark needs a streaming config (block_shift >= 1)".into(),
        ));
    }
    let mut full_config = config.clone();
    full_config.block_shift = 0;

    let inputs: Vec<Matrix<T>> = opts
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &frames)| {
            let mut rng = SplitMix64::new(opts.seed).fork(i as u64);
            Matrix::from_fn(frames, config.feature_dim, |_, _| T::from_f64(rng.normal()))
        })
        .collect();

    let mut rows = Vec::with_capacity(opts.lengths.len() * 2);
    for (features, &frames) in inputs.iter().zip(&opts.lengths) {
        let mut totals = Vec::with_capacity(opts.repeats);
        let mut blocks: Vec<Duration> = Vec::new();
        let mut state_bytes = 0;
        for _ in 0..opts.repeats {
            let mut session = StreamingSession::new(params, config)?;
            let start = Instant::now();
            session.push(features)?;
            session.finish()?;
            totals.push(start.elapsed());
            let stats = session.stats();
            blocks.extend(stats.per_block_elapsed);
            state_bytes = stats.state_bytes;
        }
        totals.sort();
        blocks.sort();
        rows.push(BenchRow {
            mode: "streaming",
            frames,
            total: median(&totals),
            block_median: Some(median(&blocks)),
            block_mean: Some(mean(&blocks)),
            block_p95: Some(percentile_95(&blocks)),
            state_bytes: Some(state_bytes),
        });
    }
    for (features, &frames) in inputs.iter().zip(&opts.lengths) {
        let mut totals = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let start = Instant::now();
            forward_full(features, params, &full_config, false, None)?;
            totals.push(start.elapsed());
        }
        totals.sort();
        rows.push(BenchRow {
            mode: "full-pass",
            frames,
            total: median(&totals),
            block_median: None,
            block_mean: None,
            block_p95: None,
            state_bytes: None,
        });
    }
    Ok(rows)
}

/// CSV report, one row per mode and length. Microsecond columns keep three
/// decimals; full-pass rows leave the per-block and state columns empty.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let us = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1e6);
    let opt = |d: Option<Duration>| d.map(us).unwrap_or_default();
    let mut out =
        String::from("mode,frames,total_us,block_median_us,block_mean_us,block_p95_us,state_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mode,
            r.frames,
            us(r.total),
            opt(r.block_median),
            opt(r.block_mean),
            opt(r.block_p95),
            r.state_bytes.map(|b| b.to_string()).unwrap_or_default(),
        ));
    }
    out
}
