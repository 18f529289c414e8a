use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]; below it the error is absolute
/// (scaled by the floor) so exactly-zero gradients do not divide by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Worst relative error between reverse-mode gradients of the scalar `f`
/// and central differences with step 1e-5, over every input coordinate.
pub fn gradcheck<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let wrt: Vec<bool> = inputs.iter().map(|_| true).collect();
    gradcheck_with(f, inputs, 1e-5, &wrt).map(|r| r.max_rel_error)
}

/// As [`gradcheck`], restricted to the inputs flagged in `wrt`; the others
/// enter the graph as constants.
pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], h: f64, wrt: &[bool]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(wrt)
            .map(|(t, &w)| if w { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| if w { g.param(t) } else { g.constant(t.clone()) })
        .collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, flag) in wrt.iter().enumerate() {
        if !flag {
            continue;
        }
        for k in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[k];
            work[which].data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work[which].data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work[which].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[which].data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { context: "gradcheck" });
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradcheckReport {
                    max_rel_error: err,
                    input: which,
                    index: k,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
