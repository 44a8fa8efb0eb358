//! Classical fixed-step fourth-order Runge-Kutta over any [`Backend`].

use crate::diff::{Backend, EngineError};

/// Output of one RK4 step.
pub struct Rk4Step<V> {
    pub state: V,
    /// The first midpoint slope; the path-length penalty is measured here.
    pub mid_slope: V,
}

/// Advances `z` from `t = step * h` to `(step + 1) * h`.
///
/// Times are derived from the integer step index, so any partition of the
/// same grid visits bit-identical times.
pub fn rk4_step<B, F>(b: &mut B, field: &mut F, z: &B::Var, step: usize, h: f64) -> Result<Rk4Step<B::Var>, EngineError>
where
    B: Backend,
    F: FnMut(&mut B, &B::Var, f64) -> Result<B::Var, EngineError>,
{
    let t0 = step as f64 * h;
    let t_mid = t0 + 0.5 * h;
    let t1 = (step + 1) as f64 * h;

    let k1 = field(b, z, t0)?;
    let d = b.scale(&k1, 0.5 * h)?;
    let z2 = b.add(z, &d)?;
    let k2 = field(b, &z2, t_mid)?;
    let d = b.scale(&k2, 0.5 * h)?;
    let z3 = b.add(z, &d)?;
    let k3 = field(b, &z3, t_mid)?;
    let d = b.scale(&k3, h)?;
    let z4 = b.add(z, &d)?;
    let k4 = field(b, &z4, t1)?;

    let ends = b.add(&k1, &k4)?;
    let mids = b.add(&k2, &k3)?;
    let mids = b.scale(&mids, 2.0)?;
    let total = b.add(&ends, &mids)?;
    let incr = b.scale(&total, h / 6.0)?;
    let state = b.add(z, &incr)?;
    Ok(Rk4Step { state, mid_slope: k2 })
}

/// Runs `steps` RK4 steps from grid index `first_step`, returning every
/// intermediate state (the initial state excluded).
pub fn rk4_integrate<B, F>(
    b: &mut B,
    field: &mut F,
    z0: &B::Var,
    first_step: usize,
    steps: usize,
    h: f64,
) -> Result<Vec<B::Var>, (usize, EngineError)>
where
    B: Backend,
    F: FnMut(&mut B, &B::Var, f64) -> Result<B::Var, EngineError>,
{
    let mut out = Vec::with_capacity(steps);
    let mut z = z0.clone();
    for s in 0..steps {
        let step = rk4_step(b, field, &z, first_step + s, h).map_err(|e| (first_step + s, e))?;
        z = step.state;
        out.push(z.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Eager, Tensor};
    use std::rc::Rc;

    fn rotation(b: &mut Eager, z: &Rc<Tensor>, _t: f64) -> Result<Rc<Tensor>, EngineError> {
        // dz/dt = A z with A = [[0, 1], [-1, 0]]; row-vector form z * A^T
        let at = b.constant(Tensor::matrix(2, 2, vec![0.0, -1.0, 1.0, 0.0]));
        b.matmul(z, &at)
    }

    fn max_error(h: f64, t_end: f64) -> f64 {
        let mut b = Eager;
        let z0 = b.constant(Tensor::row(vec![1.0, 0.0]));
        let steps = (t_end / h).round() as usize;
        let states = rk4_integrate(&mut b, &mut rotation, &z0, 0, steps, h).unwrap();
        states
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let t = (i + 1) as f64 * h;
                let (c, s) = (t.cos(), -t.sin());
                ((z.data()[0] - c).powi(2) + (z.data()[1] - s).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn rotation_quarter_turn() {
        let h = 0.01;
        let steps = 157;
        let mut b = Eager;
        let z0 = b.constant(Tensor::row(vec![1.0, 0.0]));
        let states = rk4_integrate(&mut b, &mut rotation, &z0, 0, steps, h).unwrap();
        let t = steps as f64 * h;
        let z = states.last().unwrap();
        let err = ((z.data()[0] - t.cos()).powi(2) + (z.data()[1] + t.sin()).powi(2)).sqrt();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fourth_order_convergence() {
        let coarse = max_error(0.01, 1.6);
        let fine = max_error(0.005, 1.6);
        let ratio = coarse / fine;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }
}
