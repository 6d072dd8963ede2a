//! Central finite-difference verification of tape gradients.
//!
//! The comparison metric is the hybrid relative error
//! `|g_a − g_n| / max(1, |g_a|, |g_n|)`, robust near zero.

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

#[inline]
pub fn hybrid_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// One offending parameter element.
#[derive(Clone, Debug)]
pub struct Violation {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_err: f64,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compare tape gradients of `build` against central finite differences.
///
/// `build` must construct the full forward graph from the given leaves and
/// return a scalar loss; it is invoked `2·numel + 1` times per parameter.
pub fn check<F>(params: &[(String, Tensor)], h: f64, tol: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();
    drop(tape);

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = hybrid_rel_err(analytic[pi][ei], numeric);
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
            }
            if err > tol {
                report.violations.push(Violation {
                    param: name.clone(),
                    index: ei,
                    analytic: analytic[pi][ei],
                    numeric,
                    err,
                });
            }
        }
    }
    Ok(report)
}

/// Same comparison, but against caller-supplied "analytic" gradients.
/// Lets tests confirm the checker flags a corrupted backward rule.
pub fn check_against<F>(
    params: &[(String, Tensor)],
    analytic: &[Vec<f64>],
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = hybrid_rel_err(analytic[pi][ei], numeric);
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
            }
            if err > tol {
                report.violations.push(Violation {
                    param: name.clone(),
                    index: ei,
                    analytic: analytic[pi][ei],
                    numeric,
                    err,
                });
            }
        }
    }
    Ok(report)
}
