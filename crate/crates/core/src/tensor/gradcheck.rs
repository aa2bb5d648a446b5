use rayon::prelude::*;

use super::{Tape, Tensor, TensorError, Var};

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences, coordinate by coordinate, in double precision.
///
/// The error at each coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. Functions with
/// kinks (ReLU at 0, max-pool ties) report large errors at those points, so
/// callers should keep inputs at least `10 * eps` away from them.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError> + Sync,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + Sync,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();

    let results: Vec<Result<(f64, f64, f64), TensorError>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = inputs.to_vec();
            let orig = shifted[i].data()[j];
            shifted[i].data_mut()[j] = orig + eps;
            let plus = eval(&shifted)?;
            shifted[i].data_mut()[j] = orig - eps;
            let minus = eval(&shifted)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            Ok((err, a, numeric))
        })
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
    };
    for (&coord, r) in coords.iter().zip(results) {
        let (err, a, n) = r?;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = coord;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
