use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::decoders::DecoderMode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Timed samples per length; at least 50.
    pub runs: usize,
    /// Discarded iterations per length; at least 5.
    pub warmup: usize,
    /// Samples shorter than this are measured over a batch of calls.
    pub min_sample: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: (1..=10).map(|i| 5 * i).collect(),
            runs: 50,
            warmup: 5,
            min_sample: Duration::from_micros(200),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyPoint {
    pub length: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    /// Per-call microseconds, one per timed sample.
    pub samples_us: Vec<f64>,
    /// Calls averaged into each sample.
    pub inner_iters: usize,
    /// Decoder forwards per call.
    pub invocations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyProfile {
    pub mode: DecoderMode,
    pub alpha: Option<f64>,
    pub points: Vec<LatencyPoint>,
    /// Least-squares line of mean latency against output length.
    pub fit: Option<LinearFit>,
    /// Some point needed inner-loop batching to clear the timer resolution.
    pub batched: bool,
}

impl LatencyProfile {
    pub fn mean_at(&self, length: usize) -> Option<f64> {
        self.points.iter().find(|p| p.length == length).map(|p| p.mean_us)
    }
}

/// Ordinary least squares `y ≈ slope·x + intercept` with its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit { slope, intercept, r2 })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times decoding alone from a fixed pooled encoding, forcing each output
/// length in `cfg.lengths`. The encoder is not run inside the timed region.
pub fn bench_latency(model: &Model, memory: &Tensor, valid: usize, cfg: &BenchConfig) -> Result<LatencyProfile> {
    if cfg.runs < 50 {
        return Err(Error::usage(format!("runs = {} but at least 50 are required", cfg.runs)));
    }
    if cfg.warmup < 5 {
        return Err(Error::usage(format!("warmup = {} but at least 5 are required", cfg.warmup)));
    }
    let mut points = Vec::with_capacity(cfg.lengths.len());
    let mut batched = false;
    for &n in &cfg.lengths {
        let mut invocations = 0;
        for _ in 0..cfg.warmup {
            invocations = black_box(model.decode_forced(memory, valid, n)?).1;
        }
        let start = Instant::now();
        black_box(model.decode_forced(memory, valid, n)?);
        let once = start.elapsed();
        let inner = if once < cfg.min_sample {
            batched = true;
            (cfg.min_sample.as_nanos() / once.as_nanos().max(1)) as usize + 1
        } else {
            1
        };
        let mut samples = Vec::with_capacity(cfg.runs);
        for _ in 0..cfg.runs {
            let start = Instant::now();
            for _ in 0..inner {
                black_box(model.decode_forced(black_box(memory), valid, n)?);
            }
            samples.push(start.elapsed().as_secs_f64() * 1e6 / inner as f64);
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        points.push(LatencyPoint {
            length: n,
            mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
            median_us: percentile(&sorted, 0.5),
            p95_us: percentile(&sorted, 0.95),
            samples_us: samples,
            inner_iters: inner,
            invocations,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.length as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_us).collect();
    Ok(LatencyProfile {
        mode: model.mode(),
        alpha: (model.mode() == DecoderMode::Ctc).then_some(model.config().decoder.alpha),
        points,
        fit: linear_fit(&xs, &ys),
        batched,
    })
}

/// `mode,length,run,micros`
pub fn latency_csv(profiles: &[LatencyProfile]) -> String {
    let mut out = String::from("mode,length,run,micros\n");
    for p in profiles {
        for pt in &p.points {
            for (run, us) in pt.samples_us.iter().enumerate() {
                let _ = writeln!(out, "{},{},{run},{us:.3}", p.mode, pt.length);
            }
        }
    }
    out
}
