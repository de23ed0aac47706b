use super::graph::{Graph, Var};
use super::value::Tensor;
use super::TensorError;

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    match f(&mut g, &vars) {
        Ok(out) if g.shape(out) == (1, 1) => g.value(out).item(),
        _ => f64::NAN,
    }
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
pub fn finite_difference<V>(value: &V, inputs: &[Tensor], which: usize, idx: usize, h: f64) -> f64
where
    V: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let x0 = work[which].data()[idx];
    work[which].data_mut()[idx] = x0 + h;
    let fp = value(&work);
    work[which].data_mut()[idx] = x0 - h;
    let fm = value(&work);
    (fp - fm) / (2.0 * h)
}

/// Compares caller-supplied analytic gradients against central differences
/// of `value` on the listed coordinates (all coordinates when `coords` is
/// `None`).
pub fn compare_gradients<V>(
    analytic: &[Tensor],
    value: V,
    inputs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> GradCheckReport
where
    V: Fn(&[Tensor]) -> f64,
{
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for &(which, idx) in coords {
        let a = analytic[which].data()[idx];
        let n = finite_difference(&value, inputs, which, idx, h);
        let err = if a.is_finite() && n.is_finite() {
            (a - n).abs() / a.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((which, idx));
        }
    }
    report
}

/// Checks the graph gradient of a scalar-valued `f` with respect to every
/// entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_coords(f, inputs, h, None)
}

/// As [`grad_check`] but restricted to `coords` = (input, flat index) pairs.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("grad_check step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    Ok(compare_gradients(&analytic, |x| eval_scalar(&f, x), inputs, h, coords))
}
