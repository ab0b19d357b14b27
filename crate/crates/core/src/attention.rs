//! Feature-mapped linear attention (global and rooted sub-tree local), the
//! dense softmax baseline, and temporal attention.
//!
//! Kernels act on the last two axes: inputs are `(..., R, d)` where `R` rows
//! attend to each other and leading axes index independent slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::CrossTimeAdjacency;
use crate::ndtensor::{Tensor, Var};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

/// Guard added to every linear-attention denominator.
pub const EPS_DEN: f64 = 1e-8;

/// How a binary mask enters dense softmax attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked logits are excluded (weight exactly zero).
    #[default]
    Additive,
    /// Logits are multiplied by the mask before the softmax.
    Product,
}

fn rows_and_width(op: &str, x: &[usize]) -> Result<(usize, usize)> {
    if x.len() < 2 {
        return Err(Error::Tensor(crate::ndtensor::TensorError::InvalidArgument(format!(
            "{op}: expected (..., rows, width), got {x:?}"
        ))));
    }
    Ok((x[x.len() - 2], x[x.len() - 1]))
}

fn check_qkv(op: &'static str, q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
    let lead_ok = q.len() == k.len()
        && q.len() == v.len()
        && q[..q.len() - 1] == k[..k.len() - 1]
        && v[..v.len() - 1] == q[..q.len() - 1]
        && q.last() == k.last();
    if !lead_ok {
        return Err(Error::Tensor(crate::ndtensor::TensorError::ShapeMismatch {
            op,
            lhs: q.to_vec(),
            rhs: v.to_vec(),
        }));
    }
    Ok(())
}

fn check_mask(op: &'static str, mask: &Tensor, rows: usize) -> Result<()> {
    if mask.shape() != [rows, rows] {
        return Err(Error::Tensor(crate::ndtensor::TensorError::ShapeMismatch {
            op,
            lhs: vec![rows, rows],
            rhs: mask.shape().to_vec(),
        }));
    }
    Ok(())
}

fn with_shape(base: &[usize], tail: &[usize]) -> Vec<usize> {
    let mut s = base[..base.len() - 2].to_vec();
    s.extend_from_slice(tail);
    s
}

/// Per-row summaries `phi(K_m)^T V_m`, flattened to `(..., R, d * dv)`.
fn key_value_outer<'t>(phi_k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (ks, vs) = (phi_k.shape(), v.shape());
    let (rows, d) = rows_and_width("outer", &ks)?;
    let dv = vs[vs.len() - 1];
    let col = phi_k.reshape(&with_shape(&ks, &[rows, d, 1]))?;
    let row = v.reshape(&with_shape(&vs, &[rows, 1, dv]))?;
    Ok(col.matmul(row)?.reshape(&with_shape(&ks, &[rows, d * dv]))?)
}

/// Row-wise readout `phi(Q_n) S_n / (phi(Q_n) s_n + eps)` from per-row
/// numerator summaries `(..., R, d*dv)` and denominator summaries `(..., R, d)`.
fn read_rows<'t>(phi_q: Var<'t>, num: Var<'t>, den: Var<'t>, dv: usize) -> Result<Var<'t>> {
    let qs = phi_q.shape();
    let (rows, d) = rows_and_width("readout", &qs)?;
    let q_row = phi_q.reshape(&with_shape(&qs, &[rows, 1, d]))?;
    let s = num.reshape(&with_shape(&qs, &[rows, d, dv]))?;
    let numer = q_row.matmul(s)?.reshape(&with_shape(&qs, &[rows, dv]))?;
    let denom = phi_q
        .mul(den)?
        .sum_axis(qs.len() - 1)?
        .add_scalar(EPS_DEN)?
        .reshape(&with_shape(&qs, &[rows, 1]))?
        .broadcast_to(&with_shape(&qs, &[rows, dv]))?;
    Ok(numer.div(denom)?)
}

/// Linear attention with ReLU feature map under an arbitrary binary mask
/// `(R, R)` shared by all leading slices. An all-ones mask takes the
/// shared-summation path of [`global_attention`].
pub fn linear_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    rows_and_width("linear_attention", &qs)?;
    check_qkv("linear_attention", &qs, &ks, &vs)?;
    let (rows, _) = rows_and_width("linear_attention", &qs)?;
    check_mask("linear_attention", mask, rows)?;
    if mask.data().iter().all(|&m| m == 1.0) {
        return global_attention(q, k, v);
    }
    let tape = q.tape();
    let (phi_q, phi_k) = (q.relu()?, k.relu()?);
    let dv = vs[vs.len() - 1];
    let mask_t = tape.constant(mask.clone()).transpose(0, 1)?;
    // M X applied along the row axis: (X^T M^T)^T.
    let apply = |x: Var<'t>| -> Result<Var<'t>> {
        let nd = x.shape().len();
        Ok(x.transpose(nd - 2, nd - 1)?
            .matmul(mask_t)?
            .transpose(nd - 2, nd - 1)?)
    };
    let num = apply(key_value_outer(phi_k, v)?)?;
    let den = apply(phi_k)?;
    read_rows(phi_q, num, den, dv)
}

/// Per-pair loop evaluation of masked linear attention on plain tensors.
pub fn naive_linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_qkv("naive_linear_attention", q.shape(), k.shape(), v.shape())?;
    let (rows, d) = rows_and_width("naive_linear_attention", q.shape())?;
    check_mask("naive_linear_attention", mask, rows)?;
    let dv = v.shape()[v.ndim() - 1];
    let slices = q.numel() / (rows * d).max(1);
    let relu = |x: f64| x.max(0.0);
    let mut out = vec![0.0; slices * rows * dv];
    for s in 0..slices {
        for n in 0..rows {
            let mut numer = vec![0.0; dv];
            let mut denom = 0.0;
            for m in 0..rows {
                if mask.get(&[n, m]) == 0.0 {
                    continue;
                }
                let w: f64 = (0..d)
                    .map(|j| {
                        relu(q.data()[(s * rows + n) * d + j]) * relu(k.data()[(s * rows + m) * d + j])
                    })
                    .sum();
                denom += w;
                for (c, acc) in numer.iter_mut().enumerate() {
                    *acc += w * v.data()[(s * rows + m) * dv + c];
                }
            }
            for c in 0..dv {
                out[(s * rows + n) * dv + c] = numer[c] / (denom + EPS_DEN);
            }
        }
    }
    Ok(Tensor::new(with_shape(v.shape(), &[rows, dv]), out)?)
}

/// Linear attention over all rows of each slice: the key/value summaries are
/// formed once per slice and shared by every query row.
pub fn global_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    rows_and_width("global_attention", &qs)?;
    check_qkv("global_attention", &qs, &ks, &vs)?;
    let nd = qs.len();
    let (rows, d) = (qs[nd - 2], qs[nd - 1]);
    let dv = vs[nd - 1];
    let (phi_q, phi_k) = (q.relu()?, k.relu()?);
    let kv = phi_k.transpose(nd - 2, nd - 1)?.matmul(v)?;
    let z = phi_k.sum_axis(nd - 2)?.reshape(&with_shape(&qs, &[d, 1]))?;
    let numer = phi_q.matmul(kv)?;
    let denom = phi_q
        .matmul(z)?
        .add_scalar(EPS_DEN)?
        .broadcast_to(&with_shape(&qs, &[rows, dv]))?;
    Ok(numer.div(denom)?)
}

/// Level outputs `H^0 .. H^K` of rooted sub-tree attention. Level 0 is `V`;
/// level `k` reads summaries propagated `k` times over the cross-time graph.
pub fn subtree_levels<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    adj: &CrossTimeAdjacency,
    levels: usize,
) -> Result<Vec<Var<'t>>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let (rows, _) = rows_and_width("subtree_local_attention", &qs)?;
    check_qkv("subtree_local_attention", &qs, &ks, &vs)?;
    if rows != adj.size() {
        return Err(Error::Graph(format!(
            "adjacency has {} rows but inputs have {rows}",
            adj.size()
        )));
    }
    let dv = vs[vs.len() - 1];
    let (phi_q, phi_k) = (q.relu()?, k.relu()?);
    let mut out = vec![v];
    let mut num = key_value_outer(phi_k, v)?;
    let mut den = phi_k;
    for _ in 0..levels {
        num = num.sparse_matmul(adj.pattern())?;
        den = den.sparse_matmul(adj.pattern())?;
        out.push(read_rows(phi_q, num, den, dv)?);
    }
    Ok(out)
}

/// `sum_k w_k H^k` over the sub-tree levels; `weights` has shape `(K + 1,)`.
pub fn subtree_local_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    adj: &CrossTimeAdjacency,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    let ws = weights.shape();
    if ws.len() != 1 || ws[0] == 0 {
        return Err(Error::Config(format!("level weights must be (K+1,), got {ws:?}")));
    }
    let levels = subtree_levels(q, k, v, adj, ws[0] - 1)?;
    let mut acc: Option<Var<'t>> = None;
    for (i, h) in levels.into_iter().enumerate() {
        let term = h.scale_by(weights.slice(0, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least level 0"))
}

/// `H_loc + w_glo * H_glo`.
pub fn fuse_local_global<'t>(h_loc: Var<'t>, h_glo: Var<'t>, w_glo: Var<'t>) -> Result<Var<'t>> {
    Ok(h_loc.add(h_glo.scale_by(w_glo)?)?)
}

/// Scaled dot-product softmax attention under a binary `(R, R)` mask.
pub fn dense_masked_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: &Tensor,
    mode: MaskMode,
) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    rows_and_width("dense_masked_attention", &qs)?;
    check_qkv("dense_masked_attention", &qs, &ks, &vs)?;
    let nd = qs.len();
    let (rows, d) = (qs[nd - 2], qs[nd - 1]);
    check_mask("dense_masked_attention", mask, rows)?;
    let scores = q
        .matmul(k.transpose(nd - 2, nd - 1)?)?
        .scale(1.0 / (d as f64).sqrt())?;
    let score_shape = scores.shape();
    let tape = q.tape();
    let weights = match mode {
        MaskMode::Additive => {
            let full = tape.constant(mask.clone()).broadcast_to(&score_shape)?;
            scores.masked_softmax(&full.value(), nd - 1)?
        }
        MaskMode::Product => {
            let full = tape.constant(mask.clone()).broadcast_to(&score_shape)?;
            scores.mul(full)?.softmax(nd - 1)?
        }
    };
    Ok(weights.matmul(v)?)
}

/// Lower-triangular `(T, T)` mask: step `t` sees steps `<= t`.
pub fn causal_mask(steps: usize) -> Tensor {
    let mut m = Tensor::zeros(&[steps, steps]);
    for t in 0..steps {
        for u in 0..=t {
            m.set(&[t, u], 1.0);
        }
    }
    m
}

/// Dense attention along a per-node time axis: inputs `(..., T, d)`.
pub fn temporal_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, causal: bool) -> Result<Var<'t>> {
    let qs = q.shape();
    let (steps, _) = rows_and_width("temporal_attention", &qs)?;
    if steps == 0 {
        return Err(Error::Config("temporal attention over zero steps".into()));
    }
    let mask = if causal {
        causal_mask(steps)
    } else {
        Tensor::ones(&[steps, steps])
    };
    dense_masked_attention(q, k, v, &mask, MaskMode::Additive)
}

/// Query, key and value maps from width `input` to width `width`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), input, width, rng),
            key: Linear::new(store, &format!("{name}.k"), input, width, rng),
            value: Linear::new(store, &format!("{name}.v"), input, width, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        Ok((
            self.query.forward(p, x)?,
            self.key.forward(p, x)?,
            self.value.forward(p, x)?,
        ))
    }
}

/// Learnable level weights `w_0..w_K` and the global weight `w_glo`.
#[derive(Clone, Copy, Debug)]
pub struct SubtreeWeights {
    pub levels: ParamId,
    pub global: ParamId,
    pub level_count: usize,
}

impl SubtreeWeights {
    /// Starts with equal level weights summing to one and `w_glo = 0.5`.
    pub fn new(store: &mut ParamStore, name: &str, level_count: usize) -> Self {
        let share = 1.0 / (level_count + 1) as f64;
        Self {
            levels: store.add(format!("{name}.w_levels"), Tensor::full(&[level_count + 1], share)),
            global: store.add(format!("{name}.w_glo"), Tensor::full(&[1], 0.5)),
            level_count,
        }
    }
}

/// Spatial layer: global plus rooted sub-tree local attention over the
/// cross-time graph spanning the whole window.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub proj: ProjectionHead,
    pub weights: SubtreeWeights,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, levels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: ProjectionHead::new(store, &format!("{name}.proj"), width, width, rng),
            weights: SubtreeWeights::new(store, name, levels),
        }
    }

    /// `h` is `(B, T, N, D)`; `adj` must span `T` steps over `N` nodes.
    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>, adj: &CrossTimeAdjacency) -> Result<Var<'t>> {
        let s = h.shape();
        let [b, t, n, d] = s[..] else {
            return Err(Error::Config(format!("spatial layer expects (B,T,N,D), got {s:?}")));
        };
        let (q, k, v) = self.proj.forward(p, h)?;
        let glo = global_attention(q, k, v)?;
        let flat = |x: Var<'t>| x.reshape(&[b, t * n, d]);
        let loc = subtree_local_attention(flat(q)?, flat(k)?, flat(v)?, adj, p.get(self.weights.levels))?
            .reshape(&[b, t, n, d])?;
        fuse_local_global(loc, glo, p.get(self.weights.global))
    }
}

/// Temporal layer: per-node dense attention over the window.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub proj: ProjectionHead,
    pub causal: bool,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, causal: bool, rng: &mut impl Rng) -> Self {
        Self {
            proj: ProjectionHead::new(store, &format!("{name}.proj"), width, width, rng),
            causal,
        }
    }

    /// `h` is `(B, T, N, D)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let by_node = h.permute(&[0, 2, 1, 3])?;
        let (q, k, v) = self.proj.forward(p, by_node)?;
        Ok(temporal_attention(q, k, v, self.causal)?.permute(&[0, 2, 1, 3])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_rct_adjacency, SensorGraph};
    use crate::ndtensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        crate::nn::uniform(shape, 1.0, rng)
    }

    #[test]
    fn single_row_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![3.0, -4.0, 5.0]]).unwrap());
        let h = linear_attention(q, k, v, &Tensor::ones(&[1, 1])).unwrap();
        assert!(h.value().max_abs_diff(&v.value()) < 1e-7);
        let g = global_attention(q, k, v).unwrap();
        assert!(g.value().max_abs_diff(&v.value()) < 1e-7);
    }

    #[test]
    fn negative_keys_give_near_zero_output() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::ones(&[3, 2]));
        let k = tape.constant(Tensor::full(&[3, 2], -1.0));
        let v = tape.constant(Tensor::ones(&[3, 2]));
        let mut mask = Tensor::ones(&[3, 3]);
        mask.set(&[0, 1], 0.0);
        let h = linear_attention(q, k, v, &mask).unwrap();
        assert!(h.value().data().iter().all(|x| x.abs() < 1e-12));
        let naive = naive_linear_attention(&q.value(), &k.value(), &v.value(), &Tensor::zeros(&[3, 3])).unwrap();
        assert!(naive.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn masked_linear_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let (q, k, v) = (
            rand_tensor(&[6, 4], &mut rng),
            rand_tensor(&[6, 4], &mut rng),
            rand_tensor(&[6, 4], &mut rng),
        );
        let mask = Tensor::new(vec![6, 6], (0..36).map(|_| f64::from(rng.random_range(0..2u8))).collect()).unwrap();
        let fast = linear_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask)
            .unwrap();
        let slow = naive_linear_attention(&q, &k, &v, &mask).unwrap();
        assert!(fast.value().max_abs_diff(&slow) < 1e-9);
    }

    #[test]
    fn subtree_level_zero_is_scaled_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = SensorGraph::path(3);
        let adj = build_rct_adjacency(&g, 2, 1).unwrap();
        let tape = Tape::new();
        let x = || tape.constant(rand_tensor(&[6, 4], &mut ChaCha8Rng::seed_from_u64(9)));
        let v = tape.constant(rand_tensor(&[6, 4], &mut rng));
        let w = tape.constant(Tensor::from_vec(vec![0.7]));
        let h = subtree_local_attention(x(), x(), v, &adj, w).unwrap();
        let expected = v.value().map(|a| 0.7 * a);
        assert!(h.value().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn edgeless_graph_collapses_higher_levels() {
        let g = SensorGraph::new(3, []).unwrap();
        let adj = build_rct_adjacency(&g, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let q = tape.constant(rand_tensor(&[3, 2], &mut rng));
        let k = tape.constant(rand_tensor(&[3, 2], &mut rng));
        let v = tape.constant(rand_tensor(&[3, 2], &mut rng));
        let w = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let h = subtree_local_attention(q, k, v, &adj, w).unwrap();
        assert!(h.value().max_abs_diff(&v.value()) < 1e-12);
    }

    #[test]
    fn adjacency_row_mismatch_rejected() {
        let adj = build_rct_adjacency(&SensorGraph::path(2), 2, 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 2]));
        assert!(subtree_levels(x, x, x, &adj, 1).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let a = tape.constant(rand_tensor(&[2, 3], &mut rng));
        let b = tape.constant(rand_tensor(&[2, 3], &mut rng));
        let zero = tape.constant(Tensor::from_vec(vec![0.0]));
        let one = tape.constant(Tensor::from_vec(vec![1.0]));
        assert_eq!(*fuse_local_global(a, b, zero).unwrap().value(), *a.value());
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(*fuse_local_global(z, b, one).unwrap().value(), *b.value());
        let w = tape.constant(Tensor::from_vec(vec![0.3]));
        let lhs = fuse_local_global(a.scale(2.5).unwrap(), b.scale(2.5).unwrap(), w).unwrap();
        let rhs = fuse_local_global(a, b, w).unwrap().scale(2.5).unwrap();
        assert!(lhs.value().max_abs_diff(&rhs.value()) < 1e-12);
    }

    #[test]
    fn dense_attention_examples() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![4.0, 2.0]]).unwrap());
        let h = dense_masked_attention(q, k, v, &Tensor::ones(&[2, 2]), MaskMode::Additive).unwrap();
        assert!(h.value().max_abs_diff(&Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0]]).unwrap()) < 1e-15);
        let mut mask = Tensor::ones(&[2, 2]);
        mask.set(&[0, 1], 0.0);
        let h = dense_masked_attention(q, k, v, &mask, MaskMode::Additive).unwrap();
        assert_eq!(&h.value().data()[..2], &[2.0, 0.0]);
        assert!(dense_masked_attention(q, k, v, &Tensor::zeros(&[2, 2]), MaskMode::Additive).is_err());
    }

    #[test]
    fn product_mask_still_weights_masked_entries() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let mut mask = Tensor::ones(&[2, 2]);
        mask.set(&[0, 1], 0.0);
        let h = dense_masked_attention(q, k, v, &mask, MaskMode::Product).unwrap();
        assert!(h.value().data()[0] > 0.0);
    }

    #[test]
    fn temporal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let one = |rng: &mut ChaCha8Rng| tape.constant(rand_tensor(&[3, 1, 2], rng));
        let (q, k, v) = (one(&mut rng), one(&mut rng), one(&mut rng));
        let h = temporal_attention(q, k, v, true).unwrap();
        assert!(h.value().max_abs_diff(&v.value()) < 1e-15);

        let q = tape.constant(rand_tensor(&[4, 2], &mut rng));
        let k = tape.constant(Tensor::ones(&[4, 2]));
        let vt = rand_tensor(&[4, 2], &mut rng);
        let h = temporal_attention(q, k, tape.constant(vt.clone()), false).unwrap();
        for row in 0..4 {
            for c in 0..2 {
                let mean = (0..4).map(|r| vt.get(&[r, c])).sum::<f64>() / 4.0;
                assert!((h.value().get(&[row, c]) - mean).abs() < 1e-12);
            }
        }
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(temporal_attention(empty, empty, empty, false).is_err());
    }

    #[test]
    fn causal_output_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = [rand_tensor(&[5, 3], &mut rng), rand_tensor(&[5, 3], &mut rng), rand_tensor(&[5, 3], &mut rng)];
        let mut changed = base.clone();
        for t in &mut changed {
            for c in 0..3 {
                t.set(&[4, c], 10.0);
                t.set(&[3, c], -7.0);
            }
        }
        let run = |x: &[Tensor; 3]| {
            let tape = Tape::new();
            let [q, k, v] = x.clone().map(|t| tape.constant(t));
            (*temporal_attention(q, k, v, true).unwrap().value()).clone()
        };
        let (a, b) = (run(&base), run(&changed));
        assert_eq!(&a.data()[..9], &b.data()[..9]);
    }
}
