use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_masked_attention, global_attention, linear_attention, subtree_local_attention, MaskMode};
use crate::error::{Error, Result};
use crate::graphs::{build_rct_adjacency, build_sim_adjacency, SensorGraph};
use crate::ndtensor::{Tape, Tensor};
use crate::nn::uniform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub steps: usize,
    pub width: usize,
    pub batch: usize,
    pub levels: usize,
    pub span: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 512],
            steps: 4,
            width: 16,
            batch: 4,
            levels: 2,
            span: 1,
            repetitions: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Softmax attention per step, masked by `A + I`.
    DenseMasked,
    GlobalLinear,
    /// Sub-tree local attention over the rct graph.
    RctSubtree,
    /// Masked linear attention over the flat sim graph.
    SimMasked,
}

pub const KERNELS: [Kernel; 4] = [Kernel::DenseMasked, Kernel::GlobalLinear, Kernel::RctSubtree, Kernel::SimMasked];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub nodes: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Shortest wall time of one timed repetition; fast kernels are looped.
const MIN_REPETITION_SECONDS: f64 = 0.02;

/// Median per-call time of `run` over `reps` repetitions after one warm-up.
/// Each repetition loops `run` enough times to last about
/// [`MIN_REPETITION_SECONDS`].
fn time(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    run()?;
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let inner = (MIN_REPETITION_SECONDS / once).ceil().max(1.0) as usize;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            run()?;
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(median(samples))
}

pub fn benchmark_attention(cfg: &BenchConfig, kernels: &[Kernel]) -> Result<Vec<BenchRow>> {
    if cfg.repetitions < 5 || cfg.sizes.is_empty() || cfg.steps == 0 || cfg.width == 0 || cfg.batch == 0 {
        return Err(Error::Config(format!("bench needs >= 5 repetitions and positive sizes, got {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let graph = SensorGraph::grid(n);
        let (b, t, d) = (cfg.batch, cfg.steps, cfg.width);
        let q = uniform(&[b, t, n, d], 1.0, &mut rng);
        let k = uniform(&[b, t, n, d], 1.0, &mut rng);
        let v = uniform(&[b, t, n, d], 1.0, &mut rng);
        let flat = |x: &Tensor| x.reshaped(&[b, t * n, d]);
        let (qf, kf, vf) = (flat(&q)?, flat(&k)?, flat(&v)?);
        let weights = Tensor::full(&[cfg.levels + 1], 1.0 / (cfg.levels + 1) as f64);
        for &kernel in kernels {
            let seconds = match kernel {
                Kernel::DenseMasked => {
                    let mut mask = graph.dense_adjacency();
                    for i in 0..n {
                        mask.set(&[i, i], 1.0);
                    }
                    time(cfg.repetitions, || {
                        let tape = Tape::new();
                        let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                        dense_masked_attention(q, k, v, &mask, MaskMode::Additive).map(drop)
                    })?
                }
                Kernel::GlobalLinear => time(cfg.repetitions, || {
                    let tape = Tape::new();
                    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                    global_attention(q, k, v).map(drop)
                })?,
                Kernel::RctSubtree => {
                    let adj = build_rct_adjacency(&graph, t, cfg.span)?;
                    time(cfg.repetitions, || {
                        let tape = Tape::new();
                        let (q, k, v) = (tape.constant(qf.clone()), tape.constant(kf.clone()), tape.constant(vf.clone()));
                        subtree_local_attention(q, k, v, &adj, tape.constant(weights.clone())).map(drop)
                    })?
                }
                Kernel::SimMasked => {
                    let mask = build_sim_adjacency(&graph, t, cfg.span)?.to_dense();
                    time(cfg.repetitions, || {
                        let tape = Tape::new();
                        let (q, k, v) = (tape.constant(qf.clone()), tape.constant(kf.clone()), tape.constant(vf.clone()));
                        linear_attention(q, k, v, &mask).map(drop)
                    })?
                }
            };
            rows.push(BenchRow {
                kernel,
                nodes: n,
                repetitions: cfg.repetitions,
                median_seconds: seconds,
            });
        }
    }
    Ok(rows)
}

/// Median time at `2n` over median time at `n` for each consecutive size pair.
pub fn doubling_ratios(rows: &[BenchRow], kernel: Kernel) -> Vec<(usize, f64)> {
    let mut mine: Vec<&BenchRow> = rows.iter().filter(|r| r.kernel == kernel).collect();
    mine.sort_by_key(|r| r.nodes);
    mine.windows(2)
        .filter(|w| w[1].nodes == 2 * w[0].nodes)
        .map(|w| (w[0].nodes, w[1].median_seconds / w[0].median_seconds))
        .collect()
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs_every_kernel() {
        let cfg = BenchConfig {
            sizes: vec![8, 16],
            batch: 1,
            ..BenchConfig::default()
        };
        let rows = benchmark_attention(&cfg, &KERNELS).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.median_seconds > 0.0));
        assert_eq!(doubling_ratios(&rows, Kernel::GlobalLinear).len(), 1);
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("kernel,nodes,repetitions,median_seconds"));
        assert!(benchmark_attention(&BenchConfig { repetitions: 3, ..cfg }, &KERNELS).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
