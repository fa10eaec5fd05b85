//! Central finite-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input tensor, per element.
    pub per_input: Vec<Vec<f64>>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tolerance: f64,
}

/// Compare backward() gradients of a scalar-valued function against central
/// finite differences with the given step. Relative error uses
/// |a - fd| / max(|a|, |fd|, 1).
pub fn grad_check<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| Tensor::param(shape.clone(), data.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |inputs_pert: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let consts: Vec<Tensor> = inputs_pert
            .iter()
            .map(|(shape, data)| Tensor::from_vec(shape.clone(), data.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&consts)?.item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_err: f64 = 0.0;
    for (ti, (_, data)) in inputs.iter().enumerate() {
        let mut errs = Vec::with_capacity(data.len());
        for ei in 0..data.len() {
            let mut plus = inputs.to_vec();
            plus[ti].1[ei] += step;
            let mut minus = inputs.to_vec();
            minus[ti].1[ei] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ti][ei];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel_err = max_rel_err.max(rel);
            errs.push(rel);
        }
        per_input.push(errs);
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        passed: max_rel_err < tolerance,
        tolerance,
    })
}
