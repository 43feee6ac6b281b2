use crate::error::{GradError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest relative error between reverse-mode gradients of `graph` at
/// `point` and central differences with step `h`, over every coordinate.
///
/// `graph` receives a fresh tape and the leaf holding the input; it must
/// return a scalar node.
pub fn finite_difference_check<F>(point: &Tensor, h: f64, graph: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(GradError::Invalid(format!("step h must be positive, got {h}")));
    }
    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let out = graph(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(GradError::NonScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(point.clone());
    let out = graph(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let zeros = Tensor::zeros(point.shape());
    let analytic = grads.get(leaf).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
