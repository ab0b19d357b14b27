//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computation happens on a
//! [`Tape`] through [`Var`] handles. A tape is single-threaded; tensors are
//! plain data and can be shared freely once computed.

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, GradCheckReport};
pub use sparse::SparsePattern;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floor applied inside logarithms of probabilities.
pub const EPS_PROB: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("expected a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

/// One entry of the differentiable kernel catalogue.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub name: &'static str,
    pub shapes: &'static str,
}

const KERNELS: &[Kernel] = &[
    Kernel { name: "add", shapes: "x, y same shape" },
    Kernel { name: "sub", shapes: "x, y same shape" },
    Kernel { name: "mul", shapes: "x, y same shape" },
    Kernel { name: "div", shapes: "x, y same shape" },
    Kernel { name: "scale", shapes: "any x, constant c" },
    Kernel { name: "add_scalar", shapes: "any x, constant c" },
    Kernel { name: "relu", shapes: "any" },
    Kernel { name: "exp", shapes: "any" },
    Kernel { name: "log", shapes: "any, entries > 0" },
    Kernel { name: "sigmoid", shapes: "any" },
    Kernel { name: "abs", shapes: "any" },
    Kernel { name: "sqrt", shapes: "any, entries >= 0" },
    Kernel { name: "square", shapes: "any" },
    Kernel { name: "clamp_min", shapes: "any" },
    Kernel { name: "matmul", shapes: "(..,m,k) x (k,n) or (..,m,k) x (..,k,n)" },
    Kernel { name: "softmax", shapes: "any, axis < ndim" },
    Kernel { name: "masked_softmax", shapes: "x and mask same shape, no fully masked row" },
    Kernel { name: "sum", shapes: "axis < ndim, axis removed" },
    Kernel { name: "mean", shapes: "axis < ndim, axis removed" },
    Kernel { name: "sum_all", shapes: "any -> scalar" },
    Kernel { name: "mean_all", shapes: "any -> scalar" },
    Kernel { name: "max", shapes: "axis < ndim, axis removed, lowest index on ties" },
    Kernel { name: "l2_norm", shapes: "trailing k axes removed" },
    Kernel { name: "concat", shapes: "equal shapes except along axis" },
    Kernel { name: "slice", shapes: "start + len <= axis length" },
    Kernel { name: "reshape", shapes: "equal element count" },
    Kernel { name: "permute", shapes: "permutation of all axes" },
    Kernel { name: "index_select", shapes: "indices < axis length" },
    Kernel { name: "broadcast_to", shapes: "trailing-aligned, source axes equal or 1" },
    Kernel { name: "sparse_matmul", shapes: "(..,cols,F) -> (..,rows,F)" },
    Kernel { name: "softmax_kl", shapes: "(D,) or (B,D) logits, same shape -> (1,) or (B,)" },
];

/// The differentiable kernels available on a [`Tape`].
pub fn kernel_set() -> &'static [Kernel] {
    KERNELS
}

fn as_rows(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [d] => Some((1, *d)),
        [b, d] => Some((*b, *d)),
        _ => None,
    }
}

/// Mean over rows of `sum_j p_j * ln(p_j / q_j)`, with both arguments
/// floored at [`EPS_PROB`] inside the logarithm.
///
/// Inputs are `(D,)` or `(B, D)`; every row must be a probability vector.
pub fn kl_divergence<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>, TensorError> {
    let (pv, qv) = (p.value(), q.value());
    if pv.shape() != qv.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            lhs: pv.shape().to_vec(),
            rhs: qv.shape().to_vec(),
        });
    }
    let (rows, cols) = as_rows(pv.shape()).ok_or_else(|| {
        TensorError::InvalidArgument(format!(
            "kl_divergence: expected (D,) or (B, D), got {:?}",
            pv.shape()
        ))
    })?;
    for (name, t) in [("p", &pv), ("q", &qv)] {
        if let Some(v) = t.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "kl_divergence: negative entry {v} in {name}"
            )));
        }
        for r in 0..rows {
            let s: f64 = t.data()[r * cols..(r + 1) * cols].iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(TensorError::InvalidArgument(format!(
                    "kl_divergence: row {r} of {name} sums to {s}"
                )));
            }
        }
    }
    let log_ratio = p
        .clamp_min(EPS_PROB)?
        .ln()?
        .sub(q.clamp_min(EPS_PROB)?.ln()?)?;
    let per_entry = p.mul(log_ratio)?.reshape(&[rows, cols])?;
    per_entry.sum_axis(1)?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn vector<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.param(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let y = vector(&tape, &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::new();
        let y = vector(&tape, &[-1.0, 0.0, 2.0]).relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let m = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let i = tape.constant(Tensor::eye(2));
        let out = i.matmul(tape.constant(m.clone())).unwrap();
        assert_eq!(*out.value(), m);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = a.add(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_kernel() {
        let tape = Tape::new();
        let x = vector(&tape, &[0.0]);
        let err = x.ln().unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let p = vector(&tape, &[0.5, 0.5]);
        assert_eq!(kl_divergence(p, p).unwrap().item().unwrap(), 0.0);
        let q = vector(&tape, &[0.9, 0.1]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = kl_divergence(p, q).unwrap().item().unwrap();
        assert_close(kl, expected, 1e-15);
        assert_close(kl, 0.51083, 1e-5);
    }

    #[test]
    fn kl_batch_mean() {
        // Rows chosen so the per-row divergences are known in closed form.
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap());
        let q = tape.constant(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap());
        let r0 = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let r1 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let kl = kl_divergence(p, q).unwrap().item().unwrap();
        assert_close(kl, (r0 + r1) / 2.0, 1e-15);
    }

    #[test]
    fn kl_rejects_negative_entries() {
        let tape = Tape::new();
        let p = vector(&tape, &[1.5, -0.5]);
        let q = vector(&tape, &[0.5, 0.5]);
        assert!(kl_divergence(p, q).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = vector(&tape, &[1.0, 2.0, 3.0]);
        let grads = tape.backward(x.sum_all().unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_through_relu() {
        let tape = Tape::new();
        let x = vector(&tape, &[-1.0, 2.0]);
        let loss = x.relu().unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = vector(&tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar(_))
        ));
    }

    #[test]
    fn max_breaks_ties_to_lowest_index() {
        let tape = Tape::new();
        let x = vector(&tape, &[3.0, 1.0, 3.0]);
        let m = x.max_axis(0).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let tape = Tape::new();
        let x = vector(&tape, &[1.0, 2.0]);
        assert!(x.masked_softmax(&Tensor::zeros(&[2]), 0).is_err());
        let y = x.masked_softmax(&Tensor::from_vec(vec![1.0, 0.0]), 0).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn catalogue_names_are_unique() {
        let mut names: Vec<_> = kernel_set().iter().map(|k| k.name).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn softmax_kl_matches_probability_form() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.1, 0.4, -0.5], vec![0.0, 1e-3, 0.0]]).unwrap());
        let fused = a.softmax_kl(b).unwrap().value();
        for r in 0..2 {
            let (pa, pb) = (a.slice(0, r, 1).unwrap(), b.slice(0, r, 1).unwrap());
            let plain = kl_divergence(pa.softmax(1).unwrap(), pb.softmax(1).unwrap()).unwrap().item().unwrap();
            assert_close(fused.data()[r], plain, 1e-12);
        }
        assert_eq!(a.softmax_kl(a).unwrap().value().data(), &[0.0, 0.0]);
        let shifted = tape.constant(a.value().map(|x| x + 5.0));
        assert!(a.softmax_kl(shifted).unwrap().value().data().iter().all(|&k| k.abs() < 1e-15));
    }

    #[test]
    fn softmax_kl_small_divergence_keeps_precision() {
        // Exact value ~ 0.5 * var_p(d) for tiny d.
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let b = tape.constant(Tensor::from_vec(vec![1e-6, -1e-6]));
        let kl = a.softmax_kl(b).unwrap().item().unwrap();
        assert!((kl / 5e-13 - 1.0).abs() < 1e-9, "{kl}");
    }

    #[test]
    fn softmax_kl_gradients() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.5, 0.1, -0.4]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.1, 0.4, -0.5], vec![0.52, 0.08, -0.41]]).unwrap();
        let report = grad_check(|_, v| v[0].softmax_kl(v[1])?.sum_all(), &[x, y], 1e-5, 1e-6);
        assert!(report.passed, "{report:?}");
    }
}
