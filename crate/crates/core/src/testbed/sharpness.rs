//! Largest Hessian eigenvalue by power iteration on finite-difference
//! Hessian-vector products.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::Split;
use super::trainee::{loss_and_grad, PARAM_COUNT};
use super::TestbedError;

/// Examples per sharpness measurement on the trainee.
pub const SHARPNESS_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    pub iters: usize,
    /// Stop once successive Rayleigh quotients differ by less than this
    /// fraction of the latest one.
    pub tol: f64,
    /// Seeds the random start vector.
    pub seed: u64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    pub lambda_max: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `Hv` vanished, so no direction of curvature was found.
    pub degenerate: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power iteration for the Hessian of the function whose gradient is
/// `grad`, evaluated at `theta`:
/// `Hv ~ (g(theta + eps v) - g(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 (1 + |theta|) / |v|`.
pub fn power_iteration<G>(theta: &[f64], mut grad: G, cfg: &SharpnessConfig) -> Result<SharpnessEstimate, TestbedError>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    if cfg.iters == 0 {
        return Err(TestbedError::Invalid("sharpness iters must be >= 1".into()));
    }
    if !(cfg.tol >= 0.0) {
        return Err(TestbedError::Invalid(format!("sharpness tol must be >= 0, got {}", cfg.tol)));
    }
    if theta.is_empty() {
        return Err(TestbedError::Invalid("cannot probe curvature of an empty parameter vector".into()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(TestbedError::NonFinite("parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let theta_norm = norm(theta);
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    let mut lambda = 0.0;
    for it in 1..=cfg.iters {
        // v has unit norm here.
        let eps = 1e-4 * (1.0 + theta_norm);
        for i in 0..theta.len() {
            plus[i] = theta[i] + eps * v[i];
            minus[i] = theta[i] - eps * v[i];
        }
        let gp = grad(&plus);
        let gm = grad(&minus);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(TestbedError::NonFinite("Hessian-vector product".into()));
        }
        let next: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let hv_norm = norm(&hv);
        if hv_norm <= 1e-12 {
            return Ok(SharpnessEstimate {
                lambda_max: 0.0,
                iterations: it,
                converged: false,
                degenerate: true,
            });
        }
        let settled = it > 1 && (next - lambda).abs() < cfg.tol * next.abs();
        lambda = next;
        if settled {
            return Ok(SharpnessEstimate {
                lambda_max: lambda,
                iterations: it,
                converged: true,
                degenerate: false,
            });
        }
        for (vi, h) in v.iter_mut().zip(&hv) {
            *vi = h / hv_norm;
        }
    }
    Ok(SharpnessEstimate {
        lambda_max: lambda,
        iterations: cfg.iters,
        converged: false,
        degenerate: false,
    })
}

/// Sharpness of the trainee loss on the first [`SHARPNESS_BATCH`] training
/// examples.
pub fn estimate_sharpness(theta: &[f64], train: &Split, cfg: &SharpnessConfig) -> Result<SharpnessEstimate, TestbedError> {
    if theta.len() != PARAM_COUNT {
        return Err(TestbedError::Invalid(format!(
            "expected {PARAM_COUNT} trainee parameters, got {}",
            theta.len()
        )));
    }
    let batch = train.head(SHARPNESS_BATCH);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut g = vec![0.0; PARAM_COUNT];
    power_iteration(
        theta,
        |p| {
            loss_and_grad(p, &batch, &idx, &mut g);
            g.clone()
        },
        cfg,
    )
}

/// `lr * lambda_max / 2`; above 1 the step exceeds the classical
/// edge-of-stability bound `2 / lambda_max`.
pub fn eos_ratio(lr: f64, lambda_max: f64) -> f64 {
    assert!(lambda_max >= 0.0, "lambda_max must be >= 0, got {lambda_max}");
    lr * lambda_max / 2.0
}
