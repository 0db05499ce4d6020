//! Central finite differences, used as an independent oracle for the tape.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of ∇f at `x`: `(f(x+εe_i) − f(x−εe_i)) / 2ε`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Error of one coordinate relative to `scale`, the largest gradient entry of
/// its tensor. Coordinates with a near-zero derivative are then judged against
/// the tensor's scale instead of finite-difference roundoff.
pub fn normwise_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / scale.max(analytic.abs()).max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compares the tape gradient of `build(x)` against finite differences.
///
/// `build` receives a fresh tape and the leaf for `x` and must return a scalar.
/// When `coords` is given only those flat indices are probed.
pub fn check_gradient<F>(build: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true)?;
    let loss = build(&tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(t.clone(), false)?;
        Ok(build(&tape, leaf)?.item())
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::invalid("check_gradient", format!("coordinate {i} out of range")));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
