//! Cost accounting for the attention trunk: exact FLOP/byte formulas, wall
//! clock throughput over sequence length, and log-log slope fits that make
//! the quadratic growth measurable. Results land in a schema-stable CSV.
//!
//! Empirical timing drives the transformer blocks (plus final norm and
//! head) directly on an n-token sequence, so any n can be measured without
//! inventing a clip that tokenizes to it. The patch/mel front is linear in
//! n and irrelevant to the scaling question.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::{block_forward, ModelConfig, ModelParams};
use crate::rng;
use std::io::Write;
use std::time::Instant;

/// Exact per-run cost of the attention trunk at sequence length `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    /// Everything that grows with n^2: the Q K^T and A V products
    /// (2 b n^2 E each) plus the softmax's 3 b h n^2 elementwise pass,
    /// summed over layers.
    pub attn_quadratic_flops: u64,
    /// Projections and FFN: (8 + 4 mlp_ratio) b n E^2 per layer.
    pub linear_flops: u64,
    /// Bytes held by the attention matrices: 4 b h n^2 per layer, f32.
    pub attn_matrix_bytes: u64,
}

pub fn analytic_cost(config: &ModelConfig, n: usize, b: usize) -> CostBreakdown {
    let (n64, b64) = (n as u64, b as u64);
    let e = config.embed_dim as u64;
    let h = config.n_heads as u64;
    let r = (config.mlp_ratio * config.embed_dim) as u64;
    let depth = config.depth as u64;
    let quad_per_layer = 4 * b64 * n64 * n64 * e + 3 * b64 * h * n64 * n64;
    let linear_per_layer = 8 * b64 * n64 * e * e + 4 * b64 * n64 * e * r;
    CostBreakdown {
        attn_quadratic_flops: depth * quad_per_layer,
        linear_flops: depth * linear_per_layer,
        attn_matrix_bytes: depth * 4 * b64 * h * n64 * n64,
    }
}

/// Analytic peak-activation estimate for one lean forward at length `n`:
/// one layer's attention buffers plus three n x E f32 sequence buffers
/// (input, residual, scratch).
pub fn peak_activation_bytes(config: &ModelConfig, n: usize, b: usize) -> u64 {
    let e = config.embed_dim as u64;
    let h = config.n_heads as u64;
    let n64 = n as u64;
    let per_clip = 4 * (h * n64 * n64 + 4 * n64 * e) + 3 * 4 * n64 * e;
    b as u64 * per_clip
}

/// One measured (or skipped) sequence length.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub b: usize,
    pub depth: usize,
    pub cost: CostBreakdown,
    /// Median spectrograms per second; `None` means the row was skipped as
    /// OOM under the memory limit.
    pub spectrograms_per_second: Option<f64>,
    pub peak_bytes: u64,
    pub config_hash: String,
}

/// Stable fingerprint of the benchmarked configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    format!("{:016x}", rng::fnv1a64(format!("{config:?}").as_bytes()))
}

fn trunk_forward(x: &Mat<f32>, params: &ModelParams<f32>, config: &ModelConfig) -> Result<f32> {
    let mut x = x.clone();
    for bp in &params.blocks {
        x = block_forward(&x, bp, config.n_heads, None)?;
    }
    // Touch every output so the work cannot be optimized away.
    Ok(x.data().iter().sum())
}

/// Times the attention trunk at each sequence length, median over
/// `repeats` (after one warm-up). Lengths whose estimated peak activation
/// exceeds `mem_limit` bytes are marked OOM and skipped; the run continues.
/// Rows come back sorted by n.
pub fn measure_throughput(
    config: &ModelConfig,
    n_values: &[usize],
    b: usize,
    repeats: usize,
    mem_limit: u64,
) -> Result<Vec<BenchRow>> {
    if b == 0 {
        return Err(Error::config("batch must be at least 1"));
    }
    if repeats == 0 {
        return Err(Error::config("need at least one timed repeat"));
    }
    if n_values.is_empty() {
        return Err(Error::config("no sequence lengths to measure"));
    }
    let params = ModelParams::<f32>::init(config, 1);
    let hash = config_hash(config);
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        if n == 0 {
            return Err(Error::config("sequence length 0"));
        }
        let peak = peak_activation_bytes(config, n, b);
        let cost = analytic_cost(config, n, b);
        if peak > mem_limit {
            rows.push(BenchRow {
                n,
                b,
                depth: config.depth,
                cost,
                spectrograms_per_second: None,
                peak_bytes: peak,
                config_hash: hash.clone(),
            });
            continue;
        }
        let x = Mat::from_fn(n, config.embed_dim, |i, j| {
            ((i * 31 + j * 7) % 113) as f32 / 113.0 - 0.5
        });
        let mut sink = 0.0f32;
        sink += trunk_forward(&x, &params, config)?; // warm-up
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            for _ in 0..b {
                sink += trunk_forward(&x, &params, config)?;
            }
            times.push(start.elapsed().as_secs_f64());
        }
        assert!(
            sink.is_finite(),
            "benchmark forward produced non-finite sums"
        );
        times.sort_by(|p, q| p.partial_cmp(q).expect("finite times"));
        let median = times[times.len() / 2];
        rows.push(BenchRow {
            n,
            b,
            depth: config.depth,
            cost,
            spectrograms_per_second: Some(b as f64 / median),
            peak_bytes: peak,
            config_hash: hash.clone(),
        });
    }
    rows.sort_by_key(|r| r.n);
    Ok(rows)
}

/// Which column of the bench table to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostTerm {
    AnalyticQuadratic,
    AnalyticLinear,
    /// Per-spectrogram wall time (1 / throughput); OOM rows are skipped.
    EmpiricalTime,
}

/// Least-squares slope of log(cost) against log(n). Needs at least four
/// distinct lengths spanning a factor of eight.
pub fn fit_scaling_exponent(rows: &[BenchRow], term: CostTerm) -> Result<f64> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        let value = match term {
            CostTerm::AnalyticQuadratic => Some(r.cost.attn_quadratic_flops as f64),
            CostTerm::AnalyticLinear => Some(r.cost.linear_flops as f64),
            CostTerm::EmpiricalTime => r.spectrograms_per_second.map(|s| 1.0 / s),
        };
        if let Some(v) = value {
            points.push(((r.n as f64).ln(), v.ln()));
        }
    }
    points.sort_by(|p, q| p.partial_cmp(q).expect("finite logs"));
    points.dedup_by(|p, q| p.0 == q.0);
    if points.len() < 4 {
        return Err(Error::config(format!(
            "need at least 4 distinct sequence lengths, have {}",
            points.len()
        )));
    }
    let span = (points.last().unwrap().0 - points[0].0).exp();
    if span < 8.0 {
        return Err(Error::config(format!(
            "sequence lengths span only {span:.2}x, need at least 8x"
        )));
    }
    let n = points.len() as f64;
    let (sx, sy): (f64, f64) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    Ok(num / den)
}

pub const BENCH_CSV_HEADER: &str = "n,b,depth,analytic_quadratic_flops,analytic_linear_flops,attn_matrix_bytes,empirical_sps,peak_bytes,config_hash";

/// Writes rows (already sorted by n) under the documented header. OOM rows
/// carry `OOM` in the throughput column.
pub fn write_bench_csv(rows: &[BenchRow], out: &mut impl Write) -> Result<()> {
    let emit = |e: std::io::Error| Error::io(format!("bench csv: {e}"));
    writeln!(out, "{BENCH_CSV_HEADER}").map_err(emit)?;
    for r in rows {
        let sps = match r.spectrograms_per_second {
            Some(s) => format!("{s:.3}"),
            None => "OOM".to_string(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.n,
            r.b,
            r.depth,
            r.cost.attn_quadratic_flops,
            r.cost.linear_flops,
            r.cost.attn_matrix_bytes,
            sps,
            r.peak_bytes,
            r.config_hash
        )
        .map_err(emit)?;
    }
    Ok(())
}
