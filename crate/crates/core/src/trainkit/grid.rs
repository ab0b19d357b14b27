use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossWeights;

/// Candidate values for each auxiliary weight.
pub const GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Alpha,
    Beta,
    Gamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub stage: Stage,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: LossWeights,
    pub best_val_rmse: f64,
    pub trials: Vec<Trial>,
}

impl GridResult {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for t in &self.trials {
            w.serialize(t)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sweeps alpha, then beta, then gamma over [`GRID`], holding the others at
/// their current best (initially 0.01). Ties keep the smaller weight.
pub fn staged_grid_search(
    base: &LossWeights,
    mut evaluate: impl FnMut(&LossWeights) -> Result<f64>,
) -> Result<GridResult> {
    let mut best = LossWeights {
        alpha: GRID[0],
        beta: GRID[0],
        gamma: GRID[0],
        ..*base
    };
    let mut best_val_rmse = f64::INFINITY;
    let mut trials = Vec::with_capacity(3 * GRID.len());
    for stage in [Stage::Alpha, Stage::Beta, Stage::Gamma] {
        let mut stage_best = (f64::INFINITY, best);
        for &value in &GRID {
            let mut w = best;
            match stage {
                Stage::Alpha => w.alpha = value,
                Stage::Beta => w.beta = value,
                Stage::Gamma => w.gamma = value,
            }
            let val_rmse = evaluate(&w)?;
            trials.push(Trial {
                stage,
                alpha: w.alpha,
                beta: w.beta,
                gamma: w.gamma,
                val_rmse,
            });
            if val_rmse < stage_best.0 {
                stage_best = (val_rmse, w);
            }
        }
        best = stage_best.1;
        best_val_rmse = stage_best.0;
    }
    Ok(GridResult {
        best,
        best_val_rmse,
        trials,
    })
}
