use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen per input.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Central-difference gradient of `f` with respect to input `which`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, h: f64) -> Result<Tensor, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let x0 = inputs[which].data()[i];
        work[which].data_mut()[i] = x0 + h;
        let up = eval(f, &work)?;
        work[which].data_mut()[i] = x0 - h;
        let down = eval(f, &work)?;
        work[which].data_mut()[i] = x0;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

fn check<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    vars.iter()
        .enumerate()
        .map(|(k, &v)| {
            let analytic = grads.get_or_zeros(v);
            let numeric = numeric_gradient(f, inputs, k, h)?;
            Ok(analytic
                .data()
                .iter()
                .zip(numeric.data())
                .map(|(&a, &n)| rel_error(a, n))
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Compares analytic and central-difference gradients of a scalar function.
/// Failures, including evaluation errors, are reported rather than raised.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    match check(&f, inputs, h) {
        Ok(errs) => GradCheckReport {
            passed: errs.iter().all(|&e| e < tol),
            max_rel_error: errs,
            tolerance: tol,
            error: None,
        },
        Err(e) => GradCheckReport {
            max_rel_error: Vec::new(),
            tolerance: tol,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}
