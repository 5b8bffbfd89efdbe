//! Wall-clock comparison of axial and full spatial attention.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gas::{attention_cost, AttentionMode, AxialLayout};
use crate::kernels::attention_rows;

/// One timed attention evaluation on an `H×W×B` map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchPoint {
    pub size: usize,
    pub bands: usize,
    pub mode: AttentionMode,
    pub score_entries: u64,
    /// Fastest of the repetitions.
    pub time: Duration,
}

/// Shape `(heads, len, dim)` of the attention problem for a mode.
pub fn attention_problem(h: usize, w: usize, b: usize, mode: AttentionMode) -> (usize, usize, usize) {
    match mode {
        AttentionMode::Axial(layout) => {
            let d = layout.dims(h, w, b);
            (d.heads, d.len, d.dim)
        }
        AttentionMode::Full => (b, h * w, 1),
    }
}

/// Runs scaled dot-product attention for the given mode on random inputs and
/// returns the fastest of `reps` runs.
pub fn time_attention(h: usize, w: usize, b: usize, mode: AttentionMode, reps: usize, seed: u64) -> Duration {
    let (heads, len, dim) = attention_problem(h, w, b, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let n = heads * len * dim;
    let (q, k, v) = (gen(n), gen(n), gen(n));
    let mut best = Duration::MAX;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let out = attention_rows(&q, &k, &v, heads, len, dim);
        let e = t.elapsed();
        std::hint::black_box(out);
        best = best.min(e);
    }
    best
}

/// Times every mode at every square size `H = W = s`.
pub fn run_bench(sizes: &[usize], bands: usize, modes: &[AttentionMode], reps: usize) -> Result<Vec<BenchPoint>> {
    let mut points = Vec::new();
    for &mode in modes {
        for &s in sizes {
            let cost = attention_cost(s as u64, s as u64, bands as u64, mode)?;
            points.push(BenchPoint {
                size: s,
                bands,
                mode,
                score_entries: cost.score_entries,
                time: time_attention(s, s, bands, mode, reps, s as u64),
            });
        }
    }
    Ok(points)
}

/// Ratio of consecutive timings for one mode, in size order.
pub fn growth_factors(points: &[BenchPoint], mode: AttentionMode) -> Vec<f64> {
    let times: Vec<f64> = points
        .iter()
        .filter(|p| p.mode == mode)
        .map(|p| p.time.as_secs_f64())
        .collect();
    times.windows(2).map(|w| w[1] / w[0]).collect()
}

pub fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Axial(AxialLayout::Grs) => "GRS",
        AttentionMode::Axial(AxialLayout::Gcs) => "GCS",
        AttentionMode::Full => "full",
    }
}

/// Plain-text table: one row per point plus the growth over the previous size.
pub fn format_table(points: &[BenchPoint]) -> String {
    let mut s = format!(
        "{:<6} {:>5} {:>5} {:>14} {:>12} {:>8}\n",
        "mode", "H=W", "B", "scores", "time_ms", "growth"
    );
    let mut prev: Option<&BenchPoint> = None;
    for p in points {
        let growth = match prev {
            Some(q) if q.mode == p.mode => format!("{:.2}", p.time.as_secs_f64() / q.time.as_secs_f64()),
            _ => "-".to_string(),
        };
        s.push_str(&format!(
            "{:<6} {:>5} {:>5} {:>14} {:>12.3} {:>8}\n",
            mode_name(p.mode),
            p.size,
            p.bands,
            p.score_entries,
            p.time.as_secs_f64() * 1e3,
            growth
        ));
        prev = Some(p);
    }
    s
}
