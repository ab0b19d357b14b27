//! Training objectives: filter, environment, DBI and prediction losses and
//! their weighted total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Tensor, Var};

/// Lower clamp on divergences before taking reciprocals.
pub const EPS_KL: f64 = 1e-6;
/// Guard on prototype separation.
pub const EPS_SEP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// 1 for absolute error, 2 for squared error.
    pub p_norm: u8,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.01,
            p_norm: 2,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            p_norm: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be nonnegative")));
            }
        }
        if !matches!(self.p_norm, 1 | 2) {
            return Err(Error::Config(format!("p_norm must be 1 or 2, got {}", self.p_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_flt: f64,
    pub l_env: f64,
    pub l_dbi: f64,
    pub total: f64,
}

/// How the batch is paired with itself for the environment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derangement {
    /// Row `j` is paired with row `(j + 1) mod B`.
    #[default]
    CyclicShift,
    /// Seeded single-cycle permutation (Sattolo), which has no fixed point.
    Random(u64),
}

impl Derangement {
    pub fn indices(&self, batch: usize) -> Vec<usize> {
        match *self {
            Derangement::CyclicShift => (0..batch).map(|j| (j + 1) % batch).collect(),
            Derangement::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut perm: Vec<usize> = (0..batch).collect();
                for i in (1..batch).rev() {
                    let j = rng.random_range(0..i);
                    perm.swap(i, j);
                }
                perm
            }
        }
    }
}

fn expect_rows(op: &str, g: &Var<'_>) -> Result<(usize, usize)> {
    match g.shape()[..] {
        [b, d] => Ok((b, d)),
        ref s => Err(Error::Config(format!("{op}: expected (B, D), got {s:?}"))),
    }
}

fn reciprocal_of_clamped<'t>(kl: Var<'t>) -> Result<Var<'t>> {
    let one = kl.tape().constant(Tensor::scalar(1.0));
    Ok(one.div(kl.clamp_min(EPS_KL)?)?)
}

/// `1 / max(KL(softmax(g_i) || softmax(g_e)), eps)` with the divergence
/// averaged over the batch.
pub fn filter_loss<'t>(g_i: Var<'t>, g_e: Var<'t>) -> Result<Var<'t>> {
    let si = expect_rows("filter_loss", &g_i)?;
    let se = expect_rows("filter_loss", &g_e)?;
    if si != se {
        return Err(Error::Config(format!("filter_loss: {si:?} vs {se:?}")));
    }
    reciprocal_of_clamped(g_i.softmax_kl(g_e)?.mean_all()?)
}

/// `1 / max(KL(softmax(pi(g_e)) || softmax(g_e)), eps)`; zero for a batch of one.
pub fn environment_loss<'t>(g_e: Var<'t>, pairing: Derangement) -> Result<Var<'t>> {
    let (b, _) = expect_rows("environment_loss", &g_e)?;
    if b < 2 {
        return Ok(g_e.tape().constant(Tensor::scalar(0.0)));
    }
    let shifted = g_e.index_select(0, &pairing.indices(b))?;
    reciprocal_of_clamped(shifted.softmax_kl(g_e)?.mean_all()?)
}

/// Intermediate quantities of the DBI loss over the patterns present in a batch.
pub struct DbiComponents<'t> {
    /// Present pattern ids, ascending.
    pub present: Vec<usize>,
    /// Compactness per present pattern, `(P,)`.
    pub compactness: Var<'t>,
    /// Prototype separation for ordered pairs `p != q`, `(P, P - 1)`.
    pub separation: Var<'t>,
    /// Ratio `(S_p + S_q) / (P_pq + eps)`, `(P, P - 1)`.
    pub ratio: Var<'t>,
    /// Worst ratio per pattern, `(P,)`.
    pub worst: Var<'t>,
}

impl DbiComponents<'_> {
    /// Column of `ratio`/`separation` holding pair `(p, q)`, given positions
    /// into `present`.
    pub fn pair_column(p: usize, q: usize) -> usize {
        if q < p {
            q
        } else {
            q - 1
        }
    }
}

/// Compactness, separation and ratio terms. Needs at least two present patterns.
pub fn dbi_components<'t>(z_i: Var<'t>, psi: Var<'t>, ids: &[usize]) -> Result<DbiComponents<'t>> {
    let zs = z_i.shape();
    let ps = psi.shape();
    if zs.len() != 4 || ps.len() != 4 || zs[1..] != ps[1..] || zs[0] != ids.len() {
        return Err(Error::Config(format!(
            "dbi: representations {zs:?}, prototypes {ps:?}, {} ids",
            ids.len()
        )));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= ps[0]) {
        return Err(Error::Data(format!("pattern id {bad} outside prototype bank")));
    }
    let mut present: Vec<usize> = ids.to_vec();
    present.sort_unstable();
    present.dedup();
    let np = present.len();
    if np < 2 {
        return Err(Error::Config("dbi needs at least two patterns in the batch".into()));
    }
    let tape = z_i.tape();

    let dist = psi.index_select(0, ids)?.sub(z_i)?.l2_norm(3)?;
    let mut avg = Tensor::zeros(&[np, ids.len()]);
    for (p, pat) in present.iter().enumerate() {
        let members: Vec<usize> = (0..ids.len()).filter(|&j| ids[j] == *pat).collect();
        for &j in &members {
            avg.set(&[p, j], 1.0 / members.len() as f64);
        }
    }
    let compactness = tape
        .constant(avg)
        .matmul(dist.reshape(&[ids.len(), 1])?)?
        .reshape(&[np])?;

    let (mut first, mut second) = (Vec::new(), Vec::new());
    for p in 0..np {
        for q in (0..np).filter(|&q| q != p) {
            first.push(p);
            second.push(q);
        }
    }
    let protos = psi.index_select(0, &present)?;
    let separation = protos
        .index_select(0, &first)?
        .sub(protos.index_select(0, &second)?)?
        .l2_norm(3)?;
    let spread = compactness
        .index_select(0, &first)?
        .add(compactness.index_select(0, &second)?)?;
    let ratio = spread.div(separation.add_scalar(EPS_SEP)?)?;
    let ratio = ratio.reshape(&[np, np - 1])?;
    let worst = ratio.max_axis(1)?;
    Ok(DbiComponents {
        present,
        compactness,
        separation: separation.reshape(&[np, np - 1])?,
        ratio,
        worst,
    })
}

/// Mean worst-case ratio over present patterns; zero with fewer than two.
pub fn dbi_loss<'t>(z_i: Var<'t>, psi: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let mut distinct = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(z_i.tape().constant(Tensor::scalar(0.0)));
    }
    Ok(dbi_components(z_i, psi, ids)?.worst.mean_all()?)
}

/// Mean squared (`p_norm = 2`) or absolute (`p_norm = 1`) error.
pub fn prediction_loss<'t>(x_hat: Var<'t>, y: Var<'t>, p_norm: u8) -> Result<Var<'t>> {
    let diff = x_hat.sub(y)?;
    let per_entry = match p_norm {
        1 => diff.abs()?,
        2 => diff.square()?,
        other => return Err(Error::Config(format!("p_norm must be 1 or 2, got {other}"))),
    };
    Ok(per_entry.mean_all()?)
}

/// `l_pred + alpha l_flt + beta l_env + gamma l_dbi`, with the scalar breakdown.
pub fn total_loss<'t>(
    l_pred: Var<'t>,
    l_flt: Var<'t>,
    l_env: Var<'t>,
    l_dbi: Var<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    weights.validate()?;
    let mut total = l_pred;
    for (w, term) in [(weights.alpha, l_flt), (weights.beta, l_env), (weights.gamma, l_dbi)] {
        if w != 0.0 {
            total = total.add(term.scale(w)?)?;
        }
    }
    let breakdown = LossBreakdown {
        l_pred: l_pred.item()?,
        l_flt: l_flt.item()?,
        l_env: l_env.item()?,
        l_dbi: l_dbi.item()?,
        total: total.item()?,
    };
    Ok((total, breakdown))
}
