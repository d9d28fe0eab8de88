//! Wall-clock inference benchmarking: fixed input, warmup, timed iterations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{fold_batch_norm, NetworkGraph, WeightStore};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
    /// Worker threads for intra-op parallelism.
    pub threads: usize,
    pub deterministic: bool,
    /// Seed for the synthetic input tensor.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            warmup: DEFAULT_WARMUP,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            deterministic: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub label: String,
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub threads: usize,
    pub deterministic: bool,
    pub host: String,
}

pub const BENCH_CSV_HEADER: &str = "label,iterations,warmup,mean_ms,median_ms,p95_ms,fps,threads,deterministic,host";

impl BenchReport {
    /// Summarizes per-iteration latencies in milliseconds.
    pub fn from_latencies(label: &str, latencies_ms: &[f64], warmup: usize, threads: usize, deterministic: bool) -> Result<Self> {
        if latencies_ms.is_empty() {
            return Err(Error::config("benchmark needs at least one timed iteration"));
        }
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            label: label.to_string(),
            iterations: n,
            warmup,
            mean_ms: mean,
            median_ms: median,
            p95_ms: p95,
            fps: 1000.0 / mean,
            threads,
            deterministic,
            host: host_description(),
        })
    }

    pub fn to_csv_row(&self) -> String {
        let clean = |s: &str| s.replace([',', '\n'], ";");
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            clean(&self.label),
            self.iterations,
            self.warmup,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.fps,
            self.threads,
            self.deterministic,
            clean(&self.host)
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(Error::parse(0, format!("expected 10 fields, found {}", f.len())));
        }
        let field_offset = |i: usize| f[..i].iter().map(|s| s.len() + 1).sum::<usize>();
        macro_rules! num {
            ($i:expr) => {
                f[$i]
                    .parse()
                    .map_err(|_| Error::parse(field_offset($i), format!("bad value `{}`", f[$i])))?
            };
        }
        Ok(Self {
            label: f[0].to_string(),
            iterations: num!(1),
            warmup: num!(2),
            mean_ms: num!(3),
            median_ms: num!(4),
            p95_ms: num!(5),
            fps: num!(6),
            threads: num!(7),
            deterministic: num!(8),
            host: f[9].to_string(),
        })
    }
}

/// OS, architecture, logical cores and CPU model when available.
pub fn host_description() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{} {} {} cores {}", std::env::consts::OS, std::env::consts::ARCH, cores, model)
}

/// Seeded uniform input in [-1, 1).
pub fn synthetic_input(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Times single-image inference after folding batch norm.
///
/// Returns the report and the output of the final iteration.
pub fn benchmark(
    label: &str,
    graph: &NetworkGraph,
    weights: &WeightStore,
    input: Shape,
    cfg: &BenchConfig,
) -> Result<(BenchReport, Tensor)> {
    if cfg.iterations == 0 {
        return Err(Error::config("iterations must be at least 1"));
    }
    let threads = cfg.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let (folded, fw) = fold_batch_norm(graph, weights)?;
    let x = synthetic_input(input, cfg.seed);
    pool.install(|| {
        let mut out = None;
        for _ in 0..cfg.warmup {
            out = Some(folded.forward(&fw, &[&x])?);
        }
        let mut lat = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let t = Instant::now();
            let y = folded.forward(&fw, &[&x])?;
            lat.push(t.elapsed().as_secs_f64() * 1e3);
            out = Some(y);
        }
        let report = BenchReport::from_latencies(label, &lat, cfg.warmup, threads, cfg.deterministic)?;
        Ok((report, out.expect("at least one iteration")))
    })
}
