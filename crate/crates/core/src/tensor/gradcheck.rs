//! Central finite-difference oracle for the tape.

use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor of [`relative_error`]. Below this magnitude a gradient
/// entry is compared in absolute terms, which keeps round-off in the
/// difference quotient from dominating entries that are (numerically) zero.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of every coordinate, in order.
    pub entries: Vec<(usize, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares backward gradients of a scalar function against central
/// differences at the listed `(input, flat index)` coordinates.
pub fn finite_diff_check_at<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("eps {eps} outside (0, 1e-2]"),
        });
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0, entries: Vec::new() };
    let mut probe = inputs.to_vec();
    for &(input, idx) in coords {
        if input >= inputs.len() || idx >= inputs[input].numel() {
            return Err(TensorError::InvalidArgument {
                op: "finite_diff_check",
                msg: format!("coordinate ({input}, {idx}) out of range"),
            });
        }
        let orig = inputs[input].data()[idx];
        probe[input].data_mut()[idx] = orig + eps;
        let plus = evaluate(&f, &probe)?;
        probe[input].data_mut()[idx] = orig - eps;
        let minus = evaluate(&f, &probe)?;
        probe[input].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[input].data()[idx];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        report.entries.push((input, idx, analytic, numeric));
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((input, idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Checks every coordinate of a single input; returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<_> = (0..x.numel()).map(|i| (0, i)).collect();
    let report = finite_diff_check_at(|g, vars| f(g, vars[0]), std::slice::from_ref(x), &coords, eps)?;
    Ok(report.max_relative_error)
}
