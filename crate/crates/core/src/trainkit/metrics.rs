use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::patterns::PatternCalendar;

/// Lead times reported per horizon, in minutes.
pub const HORIZON_MINUTES: [u32; 3] = [15, 30, 60];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetric {
    pub minutes: u32,
    /// 1-based step within the output window.
    pub step: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetric {
    pub samples: usize,
    /// Absent when the slice is empty.
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Mean over output steps of the per-step RMSE.
    pub rmse: f64,
    pub mae: f64,
    pub horizons: Vec<HorizonMetric>,
    /// Workday 16:00-20:00 targets, at the one-hour step.
    pub cpx: SliceMetric,
    /// Samples whose target window overlaps an incident.
    pub incident: SliceMetric,
    pub non_incident: SliceMetric,
}

/// 1-based step of `minutes` ahead, if it falls on the output grid.
pub fn horizon_step(minutes: u32, interval_minutes: u32, output_steps: usize) -> Option<usize> {
    minutes.is_multiple_of(interval_minutes)
        .then_some((minutes / interval_minutes) as usize)
        .filter(|&s| s >= 1 && s <= output_steps)
}

/// Step used for the cpx slice: one hour ahead, or the last step when the
/// window is shorter.
pub fn hour_step(interval_minutes: u32, output_steps: usize) -> usize {
    horizon_step(60, interval_minutes, output_steps).unwrap_or(output_steps)
}

struct Errors<'a> {
    pred: &'a [f64],
    target: &'a [f64],
    steps: usize,
    block: usize,
}

impl Errors<'_> {
    /// Sum of squared and absolute errors at `step` over `samples`.
    fn at(&self, samples: impl Iterator<Item = usize>, step: usize) -> (f64, f64, usize) {
        let (mut sq, mut abs, mut n) = (0.0, 0.0, 0);
        for s in samples {
            let off = (s * self.steps + step) * self.block;
            for k in off..off + self.block {
                let e = self.pred[k] - self.target[k];
                sq += e * e;
                abs += e.abs();
                n += 1;
            }
        }
        (sq, abs, n)
    }

    fn mean_step_rmse(&self, samples: &[usize]) -> Option<f64> {
        if samples.is_empty() {
            return None;
        }
        let total: f64 = (0..self.steps)
            .map(|t| {
                let (sq, _, n) = self.at(samples.iter().copied(), t);
                (sq / n as f64).sqrt()
            })
            .sum();
        Some(total / self.steps as f64)
    }
}

/// Metrics over `(S, T', N, C)` predictions and targets in original units.
pub fn compute_metrics(
    pred: &Tensor,
    target: &Tensor,
    samples: &[Sample],
    calendar: &PatternCalendar,
) -> Result<MetricsReport> {
    let s = pred.shape();
    if s != target.shape() || s.len() != 4 || s[0] != samples.len() {
        return Err(Error::Data(format!(
            "metrics: predictions {s:?}, targets {:?}, {} samples",
            target.shape(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("metrics need at least one sample".into()));
    }
    let steps = s[1];
    let errors = Errors {
        pred: pred.data(),
        target: target.data(),
        steps,
        block: s[2] * s[3],
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut per_step = Vec::with_capacity(steps);
    for t in 0..steps {
        let (sq, abs, n) = errors.at(all.iter().copied(), t);
        per_step.push(((sq / n as f64).sqrt(), abs / n as f64));
    }
    let rmse = per_step.iter().map(|p| p.0).sum::<f64>() / steps as f64;
    let mae = per_step.iter().map(|p| p.1).sum::<f64>() / steps as f64;
    let interval = calendar.interval_minutes;
    let horizons = HORIZON_MINUTES
        .iter()
        .filter_map(|&m| {
            horizon_step(m, interval, steps).map(|step| HorizonMetric {
                minutes: m,
                step,
                rmse: per_step[step - 1].0,
                mae: per_step[step - 1].1,
            })
        })
        .collect();

    let cpx: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| calendar.is_complex_time(&samples[i].target_timestamp))
        .collect();
    let cpx_rmse = (!cpx.is_empty()).then(|| {
        let (sq, _, n) = errors.at(cpx.iter().copied(), hour_step(interval, steps) - 1);
        (sq / n as f64).sqrt()
    });
    let (inc, calm): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| samples[i].incident);
    Ok(MetricsReport {
        samples: samples.len(),
        rmse,
        mae,
        horizons,
        cpx: SliceMetric {
            samples: cpx.len(),
            rmse: cpx_rmse,
        },
        incident: SliceMetric {
            samples: inc.len(),
            rmse: errors.mean_step_rmse(&inc),
        },
        non_incident: SliceMetric {
            samples: calm.len(),
            rmse: errors.mean_step_rmse(&calm),
        },
    })
}
