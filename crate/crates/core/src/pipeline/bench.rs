//! Wall-clock fusion timing and dataset evaluation.

use std::io::Write;
use std::time::Instant;

use super::dataset::ImagePair;
use crate::error::Result;
use crate::metrics::{evaluate_pair, MetricsReport};
use crate::network::{ModelParams, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pair: String,
    /// Mean seconds per fusion over the repeats.
    pub seconds: f64,
    /// Population variance of the repeat timings.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn mean_seconds(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.seconds).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "pair,seconds,variance")?;
        for r in &self.rows {
            writeln!(out, "{},{:.3},{:.3e}", r.pair, r.seconds, r.variance)?;
        }
        writeln!(out, "mean,{:.3},", self.mean_seconds())?;
        Ok(())
    }
}

pub fn mean_and_variance(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Times `repeats` fusions of every pair after one untimed warm-up fusion.
pub fn bench_runtime(
    net: &Network<f32>,
    params: &ModelParams<f32>,
    pairs: &[ImagePair],
    repeats: usize,
) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    if let Some(first) = pairs.first() {
        net.fuse(params, &first.ir, &first.vi)?;
    }
    let mut report = BenchReport::default();
    for p in pairs {
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            net.fuse(params, &p.ir, &p.vi)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        let (seconds, variance) = mean_and_variance(&samples);
        report.rows.push(BenchRow {
            pair: p.name.clone(),
            seconds,
            variance,
        });
    }
    Ok(report)
}

/// Fuses every pair and scores it; `seconds` holds the fusion time.
pub fn evaluate_dataset(
    net: &Network<f32>,
    params: &ModelParams<f32>,
    pairs: &[ImagePair],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for p in pairs {
        let start = Instant::now();
        let fused = net.fuse(params, &p.ir, &p.vi)?;
        let seconds = start.elapsed().as_secs_f64();
        let mut row = evaluate_pair(&p.name, &fused, &p.ir, &p.vi)?;
        row.seconds = seconds;
        report.push(row);
    }
    Ok(report)
}
