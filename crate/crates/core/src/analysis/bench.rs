//! Wall-clock latency of eval-mode forward passes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub input: Shape,
    pub warmup: usize,
    pub iters: usize,
    /// Worker threads available to the kernels during the run.
    pub workers: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// `1000 / mean_ms`.
    pub fps: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Time `iters` forward passes after `warmup` discarded ones. Each timed
/// region includes building the input tensor, standing in for the transfer
/// of the frame to the compute device.
pub fn benchmark_latency<T: Element>(
    model: &Model<T>,
    input: Shape,
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    if iters < 1 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one timed iteration".into(),
        ));
    }
    model.check_input(input)?;
    let frame: Vec<f32> = (0..input.iter().product::<usize>())
        .map(|i| ((i * 2_654_435_761) % 1000) as f32 / 1000.0)
        .collect();
    let run = || -> Result<()> {
        let x = Tensor::from_vec(input, frame.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        model.predict(&x).map(|_| ())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = samples.iter().sum::<f64>() / iters as f64;
    samples.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        input,
        warmup,
        iters,
        workers: rayon::current_num_threads(),
        mean_ms,
        p50_ms: percentile(&samples, 0.5),
        p95_ms: percentile(&samples, 0.95),
        fps: 1000.0 / mean_ms,
    })
}
