use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over every parameter element of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
    pub max_relative_error: f64,
    /// `(parameter index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` is re-run on a fresh tape for every perturbation; it must build the
/// same graph each time.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::Usage(format!("function must be scalar, got {:?}", v.shape())));
        }
        Ok(v.item().as_f64())
    };

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = T::from_f64_lossy(orig.as_f64() + eps);
            let plus = eval(&work)?;
            work[p].data_mut()[e] = T::from_f64_lossy(orig.as_f64() - eps);
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[e].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (p, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
