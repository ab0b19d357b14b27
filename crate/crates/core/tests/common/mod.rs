#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualcast::backbone::{DualCast, ModelConfig};
use dualcast::data::{generate_synthetic, Batch, GraphKind, SyntheticConfig};
use dualcast::graphs::SensorGraph;
use dualcast::losses::{Derangement, LossWeights, EPS_SEP};
use dualcast::ndtensor::{Tape, Tensor, TensorError};
use dualcast::nn::uniform;
use dualcast::patterns::PatternCalendar;
use dualcast::trainkit::objective;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 1.0, &mut rng(seed))
}

pub fn to_tensor_err(e: dualcast::Error) -> TensorError {
    match e {
        dualcast::Error::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

/// Loop evaluation of the Davies-Bouldin objective.
pub fn brute_dbi(z: &Tensor, psi: &Tensor, ids: &[usize]) -> f64 {
    let block: usize = z.shape()[1..].iter().product();
    let row = |t: &Tensor, i: usize| t.data()[i * block..(i + 1) * block].to_vec();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut present = ids.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return 0.0;
    }
    let spread: Vec<f64> = present
        .iter()
        .map(|&p| {
            let members: Vec<usize> = (0..ids.len()).filter(|&j| ids[j] == p).collect();
            members.iter().map(|&j| dist(&row(psi, p), &row(z, j))).sum::<f64>() / members.len() as f64
        })
        .collect();
    let mut total = 0.0;
    for (a, &p) in present.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        for (b, &q) in present.iter().enumerate() {
            if a != b {
                worst = worst.max((spread[a] + spread[b]) / (dist(&row(psi, p), &row(psi, q)) + EPS_SEP));
            }
        }
        total += worst;
    }
    total / present.len() as f64
}

/// Level-`k` sub-tree readout through the dense `k`-th power of `adj`.
pub fn dense_subtree_level(q: &Tensor, k: &Tensor, v: &Tensor, adj: &Tensor, level: usize) -> Tensor {
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let mut power = Tensor::eye(rows);
    for _ in 0..level {
        let mut next = Tensor::zeros(&[rows, rows]);
        for i in 0..rows {
            for j in 0..rows {
                let s: f64 = (0..rows).map(|m| adj.get(&[i, m]) * power.get(&[m, j])).sum();
                next.set(&[i, j], s);
            }
        }
        power = next;
    }
    let relu = |x: f64| x.max(0.0);
    let mut out = Tensor::zeros(&[rows, dv]);
    for i in 0..rows {
        let mut numer = vec![0.0; dv];
        let mut denom = 0.0;
        for j in 0..rows {
            let w: f64 = (0..d).map(|c| relu(q.get(&[i, c])) * relu(k.get(&[j, c]))).sum::<f64>() * power.get(&[i, j]);
            denom += w;
            for (c, acc) in numer.iter_mut().enumerate() {
                *acc += w * v.get(&[j, c]);
            }
        }
        for (c, acc) in numer.iter().enumerate() {
            out.set(&[i, c], acc / (denom + dualcast::attention::EPS_DEN));
        }
    }
    out
}

/// Largest relative error between tape and central-difference gradients of
/// the full objective with respect to every model parameter.
pub fn model_gradient_error(model: &DualCast, batch: &Batch, weights: &LossWeights, h: f64) -> f64 {
    let loss_at = |params: &dualcast::nn::ParamStore| {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let (total, _, _) = objective(model, &p, batch, weights, Derangement::CyclicShift).unwrap();
        total.item().unwrap()
    };
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let (total, _, _) = objective(model, &p, batch, weights, Derangement::CyclicShift).unwrap();
    let analytic = p.gradients(&tape.backward(total).unwrap());
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    for (i, id) in model.params.ids().enumerate() {
        for j in 0..analytic[i].numel() {
            let x0 = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = x0 + h;
            let up = loss_at(&params);
            params.get_mut(id).data_mut()[j] = x0 - h;
            let down = loss_at(&params);
            params.get_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Model with B=2, T=T'=3, N=4, D=4, L=1, one sub-tree level and a batch
/// spanning two calendar patterns.
pub fn tiny_model_and_batch(seed: u64) -> (DualCast, Batch) {
    let config = ModelConfig {
        width: 4,
        layers: 1,
        levels: 1,
        input_steps: 3,
        output_steps: 3,
        seed,
        ..ModelConfig::default()
    };
    let model = DualCast::new(config, SensorGraph::path(4)).unwrap();
    let batch = Batch {
        x: rand_tensor(&[2, 3, 4, 1], seed + 1),
        y: rand_tensor(&[2, 3, 4, 1], seed + 2),
        patterns: vec![3, 11],
    };
    (model, batch)
}

/// Synthetic data at the end-to-end scale: 8 sensors, 15-minute readings.
pub fn synthetic(days: usize, incident_rate: f64, seed: u64) -> dualcast::data::Dataset {
    generate_synthetic(&SyntheticConfig {
        nodes: 8,
        days,
        interval_minutes: 15,
        graph: GraphKind::Grid,
        incident_rate,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        width: 8,
        layers: 1,
        levels: 2,
        input_steps: 4,
        output_steps: 4,
        seed,
        ..ModelConfig::default()
    }
}

pub fn calendar() -> PatternCalendar {
    PatternCalendar::default()
}
