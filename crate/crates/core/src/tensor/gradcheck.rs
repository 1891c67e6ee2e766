use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares d f / d point computed by the tape against central differences
/// `(f(x + h) - f(x - h)) / 2h`. `f` receives a fresh tape and the point as a
/// trainable leaf and must return a scalar; it must be deterministic.
pub fn check_gradients<T, F>(f: F, point: &Tensor<T>, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |p: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient-check objective".into()));
        }
        Ok(v.data()[0].as_f64())
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = grads.wrt(x).to_f64_vec();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("tape gradient".into()));
    }

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + step);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - step);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, analytic, numeric };
    for (i, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
