//! Fixed-step ODE integration, on the tape (differentiable) and on plain arrays.
//!
//! Integration runs forward or backward in time depending on the sign of
//! `t1 - t0`; reversing a spec retraces the same grid with negated steps.
//! Gradients flow through every unrolled step because the state updates are
//! ordinary tape operations.

use crate::tape::{Tape, TapeError, Var};
use ndarray::{Array, Dimension};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid integration spec: {0}")]
    BadSpec(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

/// Grid for one integration: `n_steps` uniform steps from `t0` to `t1`.
#[derive(Clone, Copy, Debug)]
pub struct IntegrationSpec {
    pub method: OdeMethod,
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl IntegrationSpec {
    pub fn new(method: OdeMethod, t0: f64, t1: f64, n_steps: usize) -> Result<Self, OdeError> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(OdeError::BadSpec(format!("non-finite endpoints [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(OdeError::BadSpec("n_steps must be at least 1".into()));
        }
        Ok(IntegrationSpec { method, t0, t1, n_steps })
    }

    /// Same grid traversed in the opposite direction.
    pub fn reversed(&self) -> Self {
        IntegrationSpec { method: self.method, t0: self.t1, t1: self.t0, n_steps: self.n_steps }
    }

    fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }
}

/// Integrate `dy/dt = f(y, t)` on the tape. `t0 == t1` returns `y0` untouched.
pub fn integrate<F>(tape: &mut Tape, f: &mut F, y0: Var, spec: &IntegrationSpec) -> Result<Var, OdeError>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var, TapeError>,
{
    let (y, _) = integrate_inner(tape, f, None, y0, None, spec)?;
    Ok(y)
}

/// Integrate the state together with a scalar quota `d ell/dt = trace_fn(y, t)`.
///
/// The flow layer passes the exact Jacobian trace here: in the sampling
/// direction (`s0 -> s1`) with `trace_fn = -Tr` the quota accumulates the
/// log-density change of the transported point, and running the same spec
/// reversed undoes both the state and the quota.
pub fn integrate_augmented<F, G>(
    tape: &mut Tape,
    f: &mut F,
    trace_fn: &mut G,
    y0: Var,
    ell0: Var,
    spec: &IntegrationSpec,
) -> Result<(Var, Var), OdeError>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var, TapeError>,
    G: FnMut(&mut Tape, Var, f64) -> Result<Var, TapeError>,
{
    let (y, ell) = integrate_inner(tape, f, Some(trace_fn), y0, Some(ell0), spec)?;
    Ok((y, ell.expect("augmented integration returns the quota")))
}

fn integrate_inner<F>(
    tape: &mut Tape,
    f: &mut F,
    mut trace_fn: Option<&mut dyn FnMut(&mut Tape, Var, f64) -> Result<Var, TapeError>>,
    y0: Var,
    ell0: Option<Var>,
    spec: &IntegrationSpec,
) -> Result<(Var, Option<Var>), OdeError>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var, TapeError>,
{
    if spec.t0 == spec.t1 {
        return Ok((y0, ell0));
    }
    let h = spec.step();
    let mut y = y0;
    let mut ell = ell0;

    for step in 0..spec.n_steps {
        let t = spec.t0 + h * step as f64;
        match spec.method {
            OdeMethod::Euler => {
                let k = f(tape, y, t)?;
                if let Some(trace) = trace_fn.as_deref_mut() {
                    let ke = trace(tape, y, t)?;
                    let ell_prev = ell.expect("quota initialised");
                    ell = Some(add_scaled(tape, ell_prev, ke, h)?);
                }
                let hk = tape.affine(k, h, 0.0)?;
                y = tape.add(y, hk)?;
            }
            OdeMethod::Rk4 => {
                let half = h / 2.0;
                let k1 = f(tape, y, t)?;
                let y2 = add_scaled(tape, y, k1, half)?;
                let k2 = f(tape, y2, t + half)?;
                let y3 = add_scaled(tape, y, k2, half)?;
                let k3 = f(tape, y3, t + half)?;
                let y4 = add_scaled(tape, y, k3, h)?;
                let k4 = f(tape, y4, t + h)?;
                y = rk4_combine(tape, y, k1, k2, k3, k4, h)?;
                if let Some(trace) = trace_fn.as_deref_mut() {
                    let e1 = trace(tape, y, t)?;
                    let e2 = trace(tape, y2, t + half)?;
                    let e3 = trace(tape, y3, t + half)?;
                    let e4 = trace(tape, y4, t + h)?;
                    let ell_prev = ell.expect("quota initialised");
                    ell = Some(rk4_combine(tape, ell_prev, e1, e2, e3, e4, h)?);
                }
            }
        }
        if !tape.value(y).all_finite() {
            return Err(OdeError::NonFinite { step });
        }
    }
    Ok((y, ell))
}

fn add_scaled(tape: &mut Tape, y: Var, k: Var, scale: f64) -> Result<Var, TapeError> {
    let sk = tape.affine(k, scale, 0.0)?;
    tape.add(y, sk)
}

fn rk4_combine(tape: &mut Tape, y: Var, k1: Var, k2: Var, k3: Var, k4: Var, h: f64) -> Result<Var, TapeError> {
    let k2x2 = tape.affine(k2, 2.0, 0.0)?;
    let k3x2 = tape.affine(k3, 2.0, 0.0)?;
    let s12 = tape.add(k1, k2x2)?;
    let s34 = tape.add(k3x2, k4)?;
    let s = tape.add(s12, s34)?;
    add_scaled(tape, y, s, h / 6.0)
}

/// Plain-array counterpart of [`integrate`], for sampling paths that never
/// need gradients. The grid and update rule match the tape version exactly.
pub fn integrate_values<D, F>(f: &mut F, y0: Array<f64, D>, spec: &IntegrationSpec) -> Result<Array<f64, D>, OdeError>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>, f64) -> Array<f64, D>,
{
    if spec.t0 == spec.t1 {
        return Ok(y0);
    }
    let h = spec.step();
    let mut y = y0;
    for step in 0..spec.n_steps {
        let t = spec.t0 + h * step as f64;
        match spec.method {
            OdeMethod::Euler => {
                let k = f(&y, t);
                y = y + k * h;
            }
            OdeMethod::Rk4 => {
                let half = h / 2.0;
                let k1 = f(&y, t);
                let k2 = f(&(&y + &(&k1 * half)), t + half);
                let k3 = f(&(&y + &(&k2 * half)), t + half);
                let k4 = f(&(&y + &(&k3 * h)), t + h);
                y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { step });
        }
    }
    Ok(y)
}
