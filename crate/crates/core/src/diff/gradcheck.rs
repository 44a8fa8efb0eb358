use super::{EngineError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients against central differences.
///
/// `f` returns the scalar value and the analytic gradient for every
/// parameter tensor. The relative error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`; the maximum is reported.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, EngineError>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), EngineError>,
{
    if !(eps > 0.0) {
        return Err(EngineError::Invalid(format!("eps must be > 0, got {eps}")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(EngineError::ParamShape { index: analytic.len() });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[ti].shape() {
            return Err(EngineError::ParamShape { index: ti });
        }
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let (plus, _) = f(&probe)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let (minus, _) = f(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(EngineError::NonFiniteInput(format!(
                    "loss at perturbed coordinate ({ti}, {ei})"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (ti, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
