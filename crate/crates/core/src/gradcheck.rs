//! Central finite differences, used as an oracle independent of the tape.
//!
//! The five-point stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` is used throughout: its
//! O(h⁴) truncation error stays well below the 1e-4 tolerance even where the
//! proposal window edges give the loss large third derivatives.

use alloc::string::String;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]. Below this magnitude the
/// central-difference estimate at `eps = 1e-5` is dominated by f64 roundoff.
pub const REL_ERR_FLOOR: f64 = 1e-5;

fn stencil(mut at: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let (p2, p1) = (at(x + 2.0 * h), at(x + h));
    let (m1, m2) = (at(x - h), at(x - 2.0 * h));
    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
}

/// Numeric gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        out.data_mut()[i] = stencil(
            |v| {
                probe.data_mut()[i] = v;
                f(&probe)
            },
            orig,
            eps,
        );
        probe.data_mut()[i] = orig;
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic)
        .max(libm::fabs(numeric))
        .max(REL_ERR_FLOOR);
    libm::fabs(analytic - numeric) / denom
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `loss_fn` against finite differences for
/// every scalar in `store`.
pub fn check_params(
    store: &ParamStore,
    eps: f64,
    loss_fn: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let l = loss_fn(s, &mut t)?;
        Ok(t.scalar_value(l))
    };
    for (id, name, value) in store.iter() {
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.len() {
            let orig = value.data()[i];
            let mut failure = None;
            let numeric = stencil(
                |v| {
                    probe.get_mut(id).data_mut()[i] = v;
                    eval(&probe).unwrap_or_else(|e| {
                        failure = Some(e);
                        f64::NAN
                    })
                },
                orig,
                eps,
            );
            probe.get_mut(id).data_mut()[i] = orig;
            if let Some(e) = failure {
                return Err(e);
            }
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = String::from(name);
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }
}
