//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates the forward pass (on an inactive tape), so
//! it stays independent of every backward implementation it verifies.

use super::{Result, Tape, Tensor};
use crate::Real;

/// Relative error of the autograd gradient of each parameter against a
/// central finite difference of `f`.
#[derive(Debug)]
pub struct GradReport {
    /// One (‖autograd − fd‖ / max(‖fd‖, floor)) entry per checked parameter.
    pub rel_errors: Vec<Real>,
    /// ‖fd‖ per parameter, for diagnosing noise floors.
    pub fd_norms: Vec<Real>,
    /// ‖autograd − fd‖ per parameter.
    pub diff_norms: Vec<Real>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> Real {
        self.rel_errors.iter().cloned().fold(0.0, Real::max)
    }
}

/// Check autograd gradients of a scalar function against central finite
/// differences, parameter tensor by parameter tensor.
///
/// `f` must rebuild its graph from the given tape on every call and return a
/// scalar loss; it reads the current values of `params` each time.
pub fn check<F>(params: &[Tensor], f: F, step: Real) -> Result<GradReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let autograd: Vec<Vec<Real>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |params_owned: &[Tensor]| -> Result<Real> {
        let _ = params_owned;
        let tape = Tape::inactive();
        f(&tape)?.scalar()
    };

    let mut rel_errors = Vec::with_capacity(params.len());
    let mut fd_norms = Vec::with_capacity(params.len());
    let mut diff_norms = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let h = step * base[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[i] += h;
            p.set_data(plus)?;
            let f_plus = eval(params)?;
            let mut minus = base.clone();
            minus[i] -= h;
            p.set_data(minus)?;
            let f_minus = eval(params)?;
            fd[i] = (f_plus - f_minus) / (2.0 * h);
        }
        p.set_data(base)?;
        let diff_norm: Real = autograd[pi]
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt();
        let fd_norm: Real = fd.iter().map(|v| v * v).sum::<Real>().sqrt();
        rel_errors.push(diff_norm / fd_norm.max(1e-8));
        fd_norms.push(fd_norm);
        diff_norms.push(diff_norm);
    }
    for p in params {
        p.zero_grad();
    }
    Ok(GradReport {
        rel_errors,
        fd_norms,
        diff_norms,
    })
}
