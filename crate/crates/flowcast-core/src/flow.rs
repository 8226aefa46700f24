//! Conditional normalizing flow over a hidden-state-driven Gaussian base.
//!
//! A distribution head maps the pre-event hidden state to the parameters of a
//! Gaussian base — full covariance via a Cholesky factor when all variables
//! arrive together, independent per-variable means/variances otherwise. A
//! gated flow field `f(z, s, h) = (W_z z + W_h h + b_z) * sigmoid(w_s s + b_s)`
//! then transports base samples along flow time s from 0 to 1 into data space.
//!
//! Because the field is affine in z, the Jacobian trace is
//! `sigmoid(w_s s + b_s) * tr(W_z)` exactly — no stochastic trace estimation.
//! Log-likelihoods integrate the state and the accumulated trace jointly from
//! s = 1 back to 0 on the gradient tape. For partially observed events the
//! field rows of unobserved variables are zeroed, so those coordinates ride
//! along unchanged and contribute nothing to the log-determinant; their
//! density terms are masked out of the sum and the loss is exactly invariant
//! to whatever values sit in unobserved slots.
//!
//! Sampling runs the same arithmetic forward without a tape: draw from the
//! base, integrate s from 0 to 1 over an [n, D] batch of rows.

use crate::ode::{self, IntegrationSpec, OdeError, OdeMethod};
use crate::params::{BoundParams, ParamError, ParamSet};
use crate::tape::{self, Tape, TapeError, Var};
use crate::tensor::{Shape, Tensor};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.8378770664093453;
/// Additive floor on variances (and Cholesky diagonals), keeping every base
/// density finite and differentiable.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("parameter {name} has shape {got}, expected {want}")]
    ParamShape { name: String, got: Shape, want: Shape },
    #[error("mask must be 0/1 with at least one observation")]
    BadMask,
    #[error("operation requires an independent per-variable base")]
    NeedsDiagonal,
    #[error("config: {0}")]
    Config(String),
}

/// How the base covariance is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// Dense covariance through a lower-triangular Cholesky factor.
    Full,
    /// Independent per-variable variances.
    Diagonal,
}

/// Flow-time integration grid; flow time always runs over [0, 1].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FlowSpec {
    pub n_steps: usize,
    pub method: OdeMethod,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec { n_steps: 20, method: OdeMethod::Rk4 }
    }
}

impl FlowSpec {
    fn decode_spec(&self) -> Result<IntegrationSpec, OdeError> {
        IntegrationSpec::new(self.method, 0.0, 1.0, self.n_steps)
    }

    fn encode_spec(&self) -> Result<IntegrationSpec, OdeError> {
        Ok(self.decode_spec()?.reversed())
    }
}

// ---------------------------------------------------------------------------
// Distribution head.

#[derive(Debug)]
pub struct Head {
    cov: CovKind,
    data_dim: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn insert_matrix<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<usize, FlowError> {
    let a = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    params.insert(name, Tensor::from(Array2::from_shape_vec((rows, cols), data).expect("shape")))?;
    Ok(params.position(name)?)
}

fn insert_zeros(params: &mut ParamSet, name: &str, len: usize) -> Result<usize, FlowError> {
    params.insert(name, Tensor::zeros(Shape::Vector(len)))?;
    Ok(params.position(name)?)
}

fn expect(params: &ParamSet, name: &str, want: Shape) -> Result<usize, FlowError> {
    let i = params.position(name)?;
    let got = params.shape_at(i);
    if got != want {
        return Err(FlowError::ParamShape { name: name.into(), got, want });
    }
    Ok(i)
}

impl Head {
    fn out_dim(cov: CovKind, d: usize) -> usize {
        match cov {
            CovKind::Full => d + d * (d + 1) / 2,
            CovKind::Diagonal => 2 * d,
        }
    }

    pub fn init<R: Rng>(
        cov: CovKind,
        data_dim: usize,
        hidden_dim: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self, FlowError> {
        let out = Self::out_dim(cov, data_dim);
        Ok(Head {
            cov,
            data_dim,
            w1: insert_matrix(params, rng, "head.w1", hidden_dim, hidden_dim)?,
            b1: insert_zeros(params, "head.b1", hidden_dim)?,
            w2: insert_matrix(params, rng, "head.w2", out, hidden_dim)?,
            b2: insert_zeros(params, "head.b2", out)?,
        })
    }

    pub fn attach(
        cov: CovKind,
        data_dim: usize,
        hidden_dim: usize,
        params: &ParamSet,
    ) -> Result<Self, FlowError> {
        let out = Self::out_dim(cov, data_dim);
        Ok(Head {
            cov,
            data_dim,
            w1: expect(params, "head.w1", Shape::Matrix(hidden_dim, hidden_dim))?,
            b1: expect(params, "head.b1", Shape::Vector(hidden_dim))?,
            w2: expect(params, "head.w2", Shape::Matrix(out, hidden_dim))?,
            b2: expect(params, "head.b2", Shape::Vector(out))?,
        })
    }

    pub fn cov(&self) -> CovKind {
        self.cov
    }

    /// Base-distribution parameters for one conditioning state, on the tape.
    pub fn base(&self, tape: &mut Tape, bound: &BoundParams, h: Var) -> Result<GaussBase, FlowError> {
        let d = self.data_dim;
        let a = tape.matmul(bound.var_at(self.w1), h)?;
        let a = tape.add(a, bound.var_at(self.b1))?;
        let a = tape.tanh(a)?;
        let out = tape.matmul(bound.var_at(self.w2), a)?;
        let out = tape.add(out, bound.var_at(self.b2))?;
        let mean = tape.slice(out, 0, d)?;
        match self.cov {
            CovKind::Full => {
                let raw = tape.slice(out, d, d)?;
                let sp = tape.softplus(raw)?;
                let diag = tape.affine(sp, 1.0, VARIANCE_FLOOR)?;
                let log_diag = tape.log(diag)?;
                let off = tape.slice(out, 2 * d, d * (d - 1) / 2)?;
                let l = tape.lower_from_parts(diag, off)?;
                Ok(GaussBase::Full { mean, l, log_diag })
            }
            CovKind::Diagonal => {
                let raw = tape.slice(out, d, d)?;
                let sp = tape.softplus(raw)?;
                let var = tape.affine(sp, 1.0, VARIANCE_FLOOR)?;
                Ok(GaussBase::Diag { mean, var })
            }
        }
    }

    /// Same computation without a tape, for sampling.
    pub fn base_values(&self, params: &ParamSet, h: &Array1<f64>) -> BaseValues {
        let d = self.data_dim;
        let mat = |i: usize| params.value_at(i).matrix().expect("matrix").to_owned();
        let vec = |i: usize| params.value_at(i).vector().expect("vector").to_owned();
        let a = (mat(self.w1).dot(h) + vec(self.b1)).mapv(f64::tanh);
        let out = mat(self.w2).dot(&a) + vec(self.b2);
        let mean = out.slice(ndarray::s![0..d]).to_owned();
        match self.cov {
            CovKind::Full => {
                let diag = out.slice(ndarray::s![d..2 * d]).mapv(|v| tape::softplus(v) + VARIANCE_FLOOR);
                let off = out.slice(ndarray::s![2 * d..]).to_owned();
                let mut l = Array2::zeros((d, d));
                let mut k = 0;
                for r in 0..d {
                    for c in 0..r {
                        l[(r, c)] = off[k];
                        k += 1;
                    }
                    l[(r, r)] = diag[r];
                }
                BaseValues::Full { mean, l }
            }
            CovKind::Diagonal => {
                let var = out.slice(ndarray::s![d..]).mapv(|v| tape::softplus(v) + VARIANCE_FLOOR);
                BaseValues::Diag { mean, var }
            }
        }
    }
}

/// Base distribution on the tape.
pub enum GaussBase {
    Full { mean: Var, l: Var, log_diag: Var },
    Diag { mean: Var, var: Var },
}

impl GaussBase {
    /// Joint log-density of one point.
    pub fn log_density(&self, tape: &mut Tape, z: Var) -> Result<Var, FlowError> {
        match self {
            GaussBase::Full { mean, l, log_diag } => {
                let d = tape.shape(*mean).len() as f64;
                let diff = tape.sub(z, *mean)?;
                let y = tape.tri_solve_lower(*l, diff)?;
                let sq = tape.hadamard(y, y)?;
                let quad = tape.sum(sq)?;
                let half = tape.affine(quad, -0.5, -0.5 * d * LN_2PI)?;
                let logdet = tape.sum(*log_diag)?;
                Ok(tape.sub(half, logdet)?)
            }
            GaussBase::Diag { .. } => {
                let per_dim = self.log_density_per_dim(tape, z)?;
                Ok(tape.sum(per_dim)?)
            }
        }
    }

    /// Vector of per-variable log-densities (independent base only).
    pub fn log_density_per_dim(&self, tape: &mut Tape, z: Var) -> Result<Var, FlowError> {
        match self {
            GaussBase::Full { .. } => Err(FlowError::NeedsDiagonal),
            GaussBase::Diag { mean, var } => {
                let diff = tape.sub(z, *mean)?;
                let sq = tape.hadamard(diff, diff)?;
                let inv = tape.recip(*var)?;
                let quad = tape.hadamard(sq, inv)?;
                let logvar = tape.log(*var)?;
                let s = tape.add(logvar, quad)?;
                Ok(tape.affine(s, -0.5, -0.5 * LN_2PI)?)
            }
        }
    }
}

/// Base distribution as plain numbers, for sampling.
#[derive(Clone, Debug)]
pub enum BaseValues {
    Full { mean: Array1<f64>, l: Array2<f64> },
    Diag { mean: Array1<f64>, var: Array1<f64> },
}

impl BaseValues {
    pub fn dim(&self) -> usize {
        match self {
            BaseValues::Full { mean, .. } | BaseValues::Diag { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &Array1<f64> {
        match self {
            BaseValues::Full { mean, .. } | BaseValues::Diag { mean, .. } => mean,
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Array1<f64> {
        let d = self.dim();
        let eps = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        match self {
            BaseValues::Full { mean, l } => mean + l.dot(&eps),
            BaseValues::Diag { mean, var } => mean + var.mapv(f64::sqrt) * eps,
        }
    }
}

// ---------------------------------------------------------------------------
// Flow field.

#[derive(Debug)]
pub struct FlowField {
    data_dim: usize,
    w_z: usize,
    w_h: usize,
    b_z: usize,
    w_s: usize,
    b_s: usize,
}

/// Tape handles for the field parameters.
#[derive(Clone, Copy)]
pub struct FieldVars {
    pub w_z: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub w_s: Var,
    pub b_s: Var,
}

/// Field parameters as plain numbers, for sampling.
#[derive(Clone, Debug)]
pub struct FieldParams {
    pub w_z: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_s: f64,
    pub b_s: f64,
}

impl FlowField {
    /// Every field parameter starts at zero: the initial flow is the identity
    /// map (z = x, zero log-det), so a fresh model scores exactly like its
    /// Gaussian base until training bends the field away from zero.
    pub fn init(
        data_dim: usize,
        hidden_dim: usize,
        params: &mut ParamSet,
    ) -> Result<Self, FlowError> {
        let zeros = |params: &mut ParamSet, name: &str, r: usize, c: usize| {
            params.insert(name, Tensor::zeros(Shape::Matrix(r, c)))?;
            Ok::<usize, FlowError>(params.position(name)?)
        };
        Ok(FlowField {
            data_dim,
            w_z: zeros(params, "field.w_z", data_dim, data_dim)?,
            w_h: zeros(params, "field.w_h", data_dim, hidden_dim)?,
            b_z: insert_zeros(params, "field.b_z", data_dim)?,
            // Zero clock weights start the gate flat at 1/2.
            w_s: insert_zeros(params, "field.w_s", 1)?,
            b_s: insert_zeros(params, "field.b_s", 1)?,
        })
    }

    pub fn attach(data_dim: usize, hidden_dim: usize, params: &ParamSet) -> Result<Self, FlowError> {
        Ok(FlowField {
            data_dim,
            w_z: expect(params, "field.w_z", Shape::Matrix(data_dim, data_dim))?,
            w_h: expect(params, "field.w_h", Shape::Matrix(data_dim, hidden_dim))?,
            b_z: expect(params, "field.b_z", Shape::Vector(data_dim))?,
            w_s: expect(params, "field.w_s", Shape::Vector(1))?,
            b_s: expect(params, "field.b_s", Shape::Vector(1))?,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn bind(&self, bound: &BoundParams) -> FieldVars {
        FieldVars {
            w_z: bound.var_at(self.w_z),
            w_h: bound.var_at(self.w_h),
            b_z: bound.var_at(self.b_z),
            w_s: bound.var_at(self.w_s),
            b_s: bound.var_at(self.b_s),
        }
    }

    pub fn values(&self, params: &ParamSet) -> FieldParams {
        let mat = |i: usize| params.value_at(i).matrix().expect("matrix").to_owned();
        let vec = |i: usize| params.value_at(i).vector().expect("vector").to_owned();
        FieldParams {
            w_z: mat(self.w_z),
            w_h: mat(self.w_h),
            b_z: vec(self.b_z),
            w_s: vec(self.w_s)[0],
            b_s: vec(self.b_s)[0],
        }
    }
}

/// Per-event constant part of the field: c = W_h h + b_z. Computing it once
/// per event keeps it out of every integration stage.
pub fn event_shift(tape: &mut Tape, fv: &FieldVars, h: Var) -> Result<Var, TapeError> {
    let wh = tape.matmul(fv.w_h, h)?;
    tape.add(wh, fv.b_z)
}

fn gate_at(tape: &mut Tape, fv: &FieldVars, s: f64) -> Result<Var, TapeError> {
    let ws = tape.affine(fv.w_s, s, 0.0)?;
    let pre = tape.add(ws, fv.b_s)?;
    tape.sigmoid(pre)
}

fn check_mask(mask: &Array1<f64>, d: usize) -> Result<(), FlowError> {
    if mask.len() != d
        || mask.iter().any(|v| *v != 0.0 && *v != 1.0)
        || mask.iter().all(|v| *v == 0.0)
    {
        return Err(FlowError::BadMask);
    }
    Ok(())
}

/// Jacobian trace handle: sigmoid-gated tr(W_z), restricted to observed rows
/// when a mask is given. The field is affine in z, so this is exact.
fn trace_base(
    tape: &mut Tape,
    fv: &FieldVars,
    mask: Option<&Array1<f64>>,
) -> Result<Var, TapeError> {
    match mask {
        None => tape.trace(fv.w_z),
        Some(m) => {
            let d = m.len();
            let mut diag = Array2::zeros((d, d));
            for (i, v) in m.iter().enumerate() {
                diag[(i, i)] = *v;
            }
            let diag_leaf = tape.leaf(Tensor::from(diag));
            let masked = tape.hadamard(fv.w_z, diag_leaf)?;
            tape.trace(masked)
        }
    }
}

/// Transport a data point to base space (flow time 1 down to 0), returning
/// the base point and the log-density correction `delta_logdet` such that
/// log p(x | h) = log N(z; base) + delta_logdet.
///
/// With a mask, unobserved rows of the field are zeroed: those coordinates
/// come back bit-unchanged and add nothing to the correction.
pub fn encode(
    tape: &mut Tape,
    fv: &FieldVars,
    x: Var,
    shift: Var,
    mask: Option<&Array1<f64>>,
    spec: &FlowSpec,
) -> Result<(Var, Var), FlowError> {
    if let Some(m) = mask {
        check_mask(m, tape.shape(x).len())?;
    }
    let mask_leaf = mask.map(|m| tape.leaf(Tensor::from(m.clone())));
    let tr = trace_base(tape, fv, mask)?;
    let ell0 = tape.scalar(0.0);
    let enc = spec.encode_spec()?;
    let fv = *fv;
    let (z, delta) = ode::integrate_augmented(
        tape,
        &mut |tape, z, s| {
            let gate = gate_at(tape, &fv, s)?;
            let wz = tape.matmul(fv.w_z, z)?;
            let lin = tape.add(wz, shift)?;
            let f = tape.scale_by(lin, gate)?;
            match mask_leaf {
                Some(m) => tape.hadamard(f, m),
                None => Ok(f),
            }
        },
        &mut |tape, _z, s| {
            let gate = gate_at(tape, &fv, s)?;
            tape.scale_by(tr, gate)
        },
        x,
        ell0,
        &enc,
    )?;
    Ok((z, delta))
}

/// Log-likelihood of a fully observed event under the flow.
pub fn log_likelihood_syn(
    tape: &mut Tape,
    base: &GaussBase,
    fv: &FieldVars,
    x: Var,
    shift: Var,
    spec: &FlowSpec,
) -> Result<Var, FlowError> {
    let (z, delta) = encode(tape, fv, x, shift, None, spec)?;
    let logp = base.log_density(tape, z)?;
    Ok(tape.add(logp, delta)?)
}

/// Log-likelihood of a partially observed event: masked flow, masked sum of
/// per-variable base densities, plus the single masked-trace correction.
/// The input is zeroed at unobserved slots first, so the result (and every
/// gradient) is exactly independent of whatever values sit there.
pub fn log_likelihood_asyn(
    tape: &mut Tape,
    base: &GaussBase,
    fv: &FieldVars,
    x: Var,
    mask: &Array1<f64>,
    shift: Var,
    spec: &FlowSpec,
) -> Result<Var, FlowError> {
    check_mask(mask, tape.shape(x).len())?;
    let m_leaf = tape.leaf(Tensor::from(mask.clone()));
    let x_eff = tape.hadamard(x, m_leaf)?;
    let (z, delta) = encode(tape, fv, x_eff, shift, Some(mask), spec)?;
    let per_dim = base.log_density_per_dim(tape, z)?;
    let kept = tape.hadamard(per_dim, m_leaf)?;
    let logp = tape.sum(kept)?;
    Ok(tape.add(logp, delta)?)
}

/// Baseline without a flow: the base distribution is the data distribution.
/// With a mask, the masked sum of per-variable densities.
pub fn gaussian_log_likelihood(
    tape: &mut Tape,
    base: &GaussBase,
    x: Var,
    mask: Option<&Array1<f64>>,
) -> Result<Var, FlowError> {
    match mask {
        None => base.log_density(tape, x),
        Some(m) => {
            check_mask(m, tape.shape(x).len())?;
            let m_leaf = tape.leaf(Tensor::from(m.clone()));
            let x_eff = tape.hadamard(x, m_leaf)?;
            let per_dim = base.log_density_per_dim(tape, x_eff)?;
            let kept = tape.hadamard(per_dim, m_leaf)?;
            Ok(tape.sum(kept)?)
        }
    }
}

/// Transport base-space rows to data space (flow time 0 up to 1), without a
/// tape. `z` is [n, D], one sample per row. With a mask, rows of the field
/// for unobserved dimensions are zeroed, mirroring the masked encode: those
/// coordinates come back unchanged and feed nothing into observed ones.
pub fn decode_values(
    field: &FieldParams,
    h: &Array1<f64>,
    z: Array2<f64>,
    mask: Option<&Array1<f64>>,
    spec: &FlowSpec,
) -> Result<Array2<f64>, FlowError> {
    if let Some(m) = mask {
        check_mask(m, z.ncols())?;
    }
    let c = field.w_h.dot(h) + &field.b_z;
    let dec = spec.decode_spec()?;
    let out = ode::integrate_values(
        &mut |z: &Array2<f64>, s: f64| {
            let gate = tape::sigmoid(field.w_s * s + field.b_s);
            let raw = (z.dot(&field.w_z.t()) + &c) * gate;
            match mask {
                Some(m) => raw * &m.view().insert_axis(ndarray::Axis(0)),
                None => raw,
            }
        },
        z,
        &dec,
    )?;
    Ok(out)
}

/// Draw `n` joint samples: base draws pushed through the flow.
///
/// With a mask, sampling inverts the masked likelihood exactly: unobserved
/// coordinates start at the stored-zero value every encoded event carries and
/// stay there through the masked field, so the observed coordinates are drawn
/// from the same conditional density the loss trains and scores. Returned
/// rows keep zeros at unobserved slots, like every stored event.
pub fn sample<R: Rng>(
    base: &BaseValues,
    field: &FieldParams,
    h: &Array1<f64>,
    n: usize,
    mask: Option<&Array1<f64>>,
    spec: &FlowSpec,
    rng: &mut R,
) -> Result<Array2<f64>, FlowError> {
    let d = base.dim();
    let mut z = Array2::zeros((n, d));
    for i in 0..n {
        z.row_mut(i).assign(&base.draw(rng));
    }
    if let Some(m) = mask {
        check_mask(m, d)?;
        for (j, mj) in m.iter().enumerate() {
            if *mj == 0.0 {
                z.column_mut(j).fill(0.0);
            }
        }
    }
    decode_values(field, h, z, mask, spec)
}

/// Baseline sampler: base draws are the samples.
pub fn sample_gaussian<R: Rng>(base: &BaseValues, n: usize, rng: &mut R) -> Array2<f64> {
    let d = base.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        out.row_mut(i).assign(&base.draw(rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cov: CovKind, d: usize, h: usize, seed: u64) -> (Head, FlowField, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Head::init(cov, d, h, &mut params, &mut rng).unwrap();
        let field = FlowField::init(d, h, &mut params).unwrap();
        // Generic (non-identity) field values for the tests below that want
        // an arbitrary flow rather than the zero-initialized one.
        randomize_field(&mut params, d, h, &mut rng);
        (head, field, params)
    }

    fn randomize_field<R: Rng>(params: &mut ParamSet, d: usize, h: usize, rng: &mut R) {
        let mut fill = |name: &str, rows: usize, cols: usize| {
            let a = 1.0 / (cols as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            set(params, name, Tensor::from(Array2::from_shape_vec((rows, cols), data).unwrap()));
        };
        fill("field.w_z", d, d);
        fill("field.w_h", d, h);
    }

    fn set(params: &mut ParamSet, name: &str, t: Tensor) {
        params.set(name, t).unwrap();
    }

    fn zero_field(params: &mut ParamSet, d: usize, h: usize) {
        set(params, "field.w_z", Tensor::zeros(Shape::Matrix(d, d)));
        set(params, "field.w_h", Tensor::zeros(Shape::Matrix(d, h)));
        set(params, "field.b_z", Tensor::zeros(Shape::Vector(d)));
    }

    /// Force the clock gate to exactly 1 for every s in [0, 1].
    fn saturate_gate(params: &mut ParamSet) {
        set(params, "field.w_s", Tensor::from_vec(vec![0.0]));
        set(params, "field.b_s", Tensor::from_vec(vec![500.0]));
    }

    #[test]
    fn zero_weight_head_returns_biases() {
        let (head, _, mut params) = setup(CovKind::Full, 2, 3, 1);
        set(&mut params, "head.w1", Tensor::zeros(Shape::Matrix(3, 3)));
        set(&mut params, "head.w2", Tensor::zeros(Shape::Matrix(5, 3)));
        set(&mut params, "head.b2", Tensor::from_vec(vec![1.5, -0.5, 0.3, 0.0, 2.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let hv = tape.leaf(Tensor::from_vec(vec![9.0, -3.0, 4.0]));
        let base = head.base(&mut tape, &bound, hv).unwrap();
        match base {
            GaussBase::Full { mean, l, .. } => {
                assert_eq!(tape.value(mean).to_flat(), vec![1.5, -0.5]);
                let lm = tape.value(l).matrix().unwrap().to_owned();
                assert!((lm[(0, 0)] - (tape::softplus(0.3) + VARIANCE_FLOOR)).abs() < 1e-15);
                assert!((lm[(1, 1)] - (tape::softplus(0.0) + VARIANCE_FLOOR)).abs() < 1e-15);
                assert_eq!(lm[(1, 0)], 2.0);
                assert_eq!(lm[(0, 1)], 0.0);
            }
            _ => panic!("full head expected"),
        }
    }

    #[test]
    fn diagonal_head_floors_variances() {
        let (head, _, params) = setup(CovKind::Diagonal, 3, 4, 2);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let hv = tape.leaf(Tensor::from_vec(vec![0.2, -0.7, 1.0, 0.0]));
        match head.base(&mut tape, &bound, hv).unwrap() {
            GaussBase::Diag { mean, var } => {
                assert_eq!(tape.shape(mean), Shape::Vector(3));
                assert!(tape.value(var).iter().all(|v| v >= VARIANCE_FLOOR));
            }
            _ => panic!("diagonal head expected"),
        }
    }

    #[test]
    fn exact_trace_examples() {
        let (_, field, mut params) = setup(CovKind::Full, 2, 3, 3);
        set(&mut params, "field.w_z", Tensor::from(arr2(&[[1.0, 0.0], [0.0, 1.0]])));
        set(&mut params, "field.w_s", Tensor::from_vec(vec![0.0]));
        set(&mut params, "field.b_s", Tensor::from_vec(vec![0.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let tr = trace_base(&mut tape, &fv, None).unwrap();
        let gate = gate_at(&mut tape, &fv, 0.7).unwrap();
        let gated = tape.scale_by(tr, gate).unwrap();
        assert_eq!(tape.scalar_value(gated), Some(1.0), "sigmoid(0) * tr(I) = 0.5 * 2");

        set(&mut params, "field.w_z", Tensor::zeros(Shape::Matrix(2, 2)));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let tr = trace_base(&mut tape, &fv, None).unwrap();
        assert_eq!(tape.scalar_value(tr), Some(0.0), "shift-only flow has zero trace");
    }

    #[test]
    fn exact_trace_matches_brute_force_jacobian() {
        let (_, field, params) = setup(CovKind::Full, 3, 4, 4);
        let fp = field.values(&params);
        let h = arr1(&[0.3, -0.2, 0.8, 0.1]);
        let c = fp.w_h.dot(&h) + &fp.b_z;
        let s = 0.42;
        let f = |z: &Array1<f64>| -> Array1<f64> {
            (fp.w_z.dot(z) + &c) * tape::sigmoid(fp.w_s * s + fp.b_s)
        };
        let z0 = arr1(&[0.5, -1.0, 0.25]);
        let eps = 1e-6;
        let mut fd_trace = 0.0;
        for d in 0..3 {
            let mut zp = z0.clone();
            zp[d] += eps;
            let mut zm = z0.clone();
            zm[d] -= eps;
            fd_trace += (f(&zp)[d] - f(&zm)[d]) / (2.0 * eps);
        }
        let exact = fp.w_z.diag().sum() * tape::sigmoid(fp.w_s * s + fp.b_s);
        assert!((fd_trace - exact).abs() < 1e-6, "{fd_trace} vs {exact}");
    }

    #[test]
    fn zero_field_encode_is_identity_with_zero_correction() {
        let (_, field, mut params) = setup(CovKind::Full, 2, 3, 5);
        zero_field(&mut params, 2, 3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from_vec(vec![0.7, -1.3]));
        let (z, delta) = encode(&mut tape, &fv, x, shift, None, &FlowSpec::default()).unwrap();
        assert_eq!(tape.value(z).to_flat(), vec![0.7, -1.3]);
        assert_eq!(tape.scalar_value(delta), Some(0.0));
    }

    #[test]
    fn half_contraction_flow_matches_closed_form() {
        // f(z) = 0.5 z with the gate saturated at 1: encoding scales by
        // e^{-1/2} and the correction is the integral of -tr(0.5 I) = -1.
        let (_, field, mut params) = setup(CovKind::Full, 2, 3, 6);
        zero_field(&mut params, 2, 3);
        set(&mut params, "field.w_z", Tensor::from(arr2(&[[0.5, 0.0], [0.0, 0.5]])));
        saturate_gate(&mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::zeros(Shape::Vector(3)));
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -4.0]));
        let (z, delta) = encode(&mut tape, &fv, x, shift, None, &FlowSpec::default()).unwrap();
        let zf = tape.value(z).to_flat();
        let scale = (-0.5_f64).exp();
        assert!((zf[0] - 2.0 * scale).abs() < 1e-8, "{zf:?}");
        assert!((zf[1] + 4.0 * scale).abs() < 1e-8, "{zf:?}");
        assert!((tape.scalar_value(delta).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_shift_flow_moves_by_sigmoid_integral() {
        // W_z = 0, b_z = b: encode subtracts b times the exact integral of
        // the gate, computable from the softplus antiderivative.
        let (_, field, mut params) = setup(CovKind::Full, 2, 3, 7);
        zero_field(&mut params, 2, 3);
        set(&mut params, "field.b_z", Tensor::from_vec(vec![1.0, -2.0]));
        set(&mut params, "field.w_s", Tensor::from_vec(vec![2.0]));
        set(&mut params, "field.b_s", Tensor::from_vec(vec![-1.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::zeros(Shape::Vector(3)));
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, 0.9]));
        let spec = FlowSpec { n_steps: 50, method: OdeMethod::Rk4 };
        let (z, delta) = encode(&mut tape, &fv, x, shift, None, &spec).unwrap();
        let integral = (tape::softplus(2.0 - 1.0) - tape::softplus(-1.0)) / 2.0;
        let zf = tape.value(z).to_flat();
        assert!((zf[0] - (0.3 - 1.0 * integral)).abs() < 1e-9, "{zf:?}");
        assert!((zf[1] - (0.9 + 2.0 * integral)).abs() < 1e-9, "{zf:?}");
        assert_eq!(tape.scalar_value(delta), Some(0.0));
    }

    #[test]
    fn masked_encode_freezes_unobserved_dimension() {
        let (_, field, params) = setup(CovKind::Diagonal, 2, 3, 8);
        let fp = field.values(&params);
        let mask = arr1(&[1.0, 0.0]);
        let x_vals = [0.6, -2.2];

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::from_vec(vec![0.1, 0.2, -0.3]));
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from_vec(x_vals.to_vec()));
        let (z, delta) =
            encode(&mut tape, &fv, x, shift, Some(&mask), &FlowSpec::default()).unwrap();
        let zf = tape.value(z).to_flat();
        assert_eq!(zf[1].to_bits(), (-2.2_f64).to_bits(), "unobserved slot must ride along");

        // The observed coordinate evolves as a 1-D flow whose constant term
        // absorbs the frozen neighbour.
        let h = arr1(&[0.1, 0.2, -0.3]);
        let c_full = fp.w_h.dot(&h) + &fp.b_z;
        let c1 = c_full[0] + fp.w_z[(0, 1)] * x_vals[1];
        let spec = FlowSpec::default().encode_spec().unwrap();
        let z1 = ode::integrate_values(
            &mut |z: &Array1<f64>, s: f64| {
                let gate = tape::sigmoid(fp.w_s * s + fp.b_s);
                arr1(&[(fp.w_z[(0, 0)] * z[0] + c1) * gate])
            },
            arr1(&[x_vals[0]]),
            &spec,
        )
        .unwrap();
        assert!((zf[0] - z1[0]).abs() < 1e-9, "{} vs {}", zf[0], z1[0]);

        // Correction counts only the observed row.
        let spec_d = FlowSpec::default();
        let g_int = {
            // delta = -w00 * integral of gate; with flat gate it is exact.
            let mut tape2 = Tape::new();
            let bound2 = params.bind(&mut tape2);
            let fv2 = field.bind(&bound2);
            let tr = trace_base(&mut tape2, &fv2, Some(&mask)).unwrap();
            tape2.scalar_value(tr).unwrap()
        };
        assert!((g_int - fp.w_z[(0, 0)]).abs() < 1e-15);
        let _ = (delta, spec_d);
    }

    #[test]
    fn standard_normal_log_density_closed_forms() {
        // Zero flow, identity base: log N(0; 0, I_2) = -ln(2 pi).
        let (head, field, mut params) = setup(CovKind::Full, 2, 3, 9);
        zero_field(&mut params, 2, 3);
        set(&mut params, "head.w1", Tensor::zeros(Shape::Matrix(3, 3)));
        set(&mut params, "head.w2", Tensor::zeros(Shape::Matrix(5, 3)));
        // softplus(raw) + floor = 1 on the Cholesky diagonal.
        let raw = ((1.0 - VARIANCE_FLOOR) as f64).exp_m1().ln();
        set(&mut params, "head.b2", Tensor::from_vec(vec![0.0, 0.0, raw, raw, 0.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::zeros(Shape::Vector(3)));
        let base = head.base(&mut tape, &bound, hv).unwrap();
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::zeros(Shape::Vector(2)));
        let ll =
            log_likelihood_syn(&mut tape, &base, &fv, x, shift, &FlowSpec::default()).unwrap();
        assert!((tape.scalar_value(ll).unwrap() + LN_2PI).abs() < 1e-12);

        // One observed dimension, unit variance, at the mean: -ln(2 pi)/2.
        let (head, field, mut params) = setup(CovKind::Diagonal, 2, 3, 10);
        zero_field(&mut params, 2, 3);
        set(&mut params, "head.w1", Tensor::zeros(Shape::Matrix(3, 3)));
        set(&mut params, "head.w2", Tensor::zeros(Shape::Matrix(4, 3)));
        set(&mut params, "head.b2", Tensor::from_vec(vec![0.0, 0.0, raw, raw]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::zeros(Shape::Vector(3)));
        let base = head.base(&mut tape, &bound, hv).unwrap();
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 123.0]));
        let mask = arr1(&[1.0, 0.0]);
        let ll = log_likelihood_asyn(&mut tape, &base, &fv, x, &mask, shift, &FlowSpec::default())
            .unwrap();
        assert!((tape.scalar_value(ll).unwrap() + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn full_covariance_density_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let l_arr = arr2(&[[1.2, 0.0], [-0.4, 0.8]]);
        let mean_arr = arr1(&[0.3, -0.6]);
        let z_arr = arr1(&[1.0, 0.5]);
        let mean = tape.leaf(Tensor::from(mean_arr.clone()));
        let l = tape.leaf(Tensor::from(l_arr.clone()));
        let log_diag = tape.leaf(Tensor::from_vec(vec![1.2_f64.ln(), 0.8_f64.ln()]));
        let z = tape.leaf(Tensor::from(z_arr.clone()));
        let base = GaussBase::Full { mean, l, log_diag };
        let ll = base.log_density(&mut tape, z).unwrap();
        let got = tape.scalar_value(ll).unwrap();

        let sigma = l_arr.dot(&l_arr.t());
        let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
        let inv = arr2(&[
            [sigma[(1, 1)] / det, -sigma[(0, 1)] / det],
            [-sigma[(1, 0)] / det, sigma[(0, 0)] / det],
        ]);
        let diff = &z_arr - &mean_arr;
        let quad = diff.dot(&inv.dot(&diff));
        let want = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn log_likelihood_agrees_with_finite_difference_jacobian() {
        // Change of variables audited from outside: push x through the
        // encode map numerically, differentiate it by central differences,
        // and compare log N(z) + log|det dz/dx| with the tape's answer.
        let (head, field, params) = setup(CovKind::Full, 2, 3, 11);
        let spec = FlowSpec::default();
        let h = arr1(&[0.4, -0.15, 0.3]);
        let x0 = arr1(&[0.8, -0.3]);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fv = field.bind(&bound);
        let hv = tape.leaf(Tensor::from(h.clone()));
        let base = head.base(&mut tape, &bound, hv).unwrap();
        let shift = event_shift(&mut tape, &fv, hv).unwrap();
        let x = tape.leaf(Tensor::from(x0.clone()));
        let ll = log_likelihood_syn(&mut tape, &base, &fv, x, shift, &spec).unwrap();
        let got = tape.scalar_value(ll).unwrap();

        let fp = field.values(&params);
        let c = fp.w_h.dot(&h) + &fp.b_z;
        let enc = spec.encode_spec().unwrap();
        let encode_num = |x: &Array1<f64>| -> Array1<f64> {
            ode::integrate_values(
                &mut |z: &Array1<f64>, s: f64| {
                    (fp.w_z.dot(z) + &c) * tape::sigmoid(fp.w_s * s + fp.b_s)
                },
                x.clone(),
                &enc,
            )
            .unwrap()
        };
        let z0 = encode_num(&x0);
        let eps = 1e-5;
        let mut jac = Array2::zeros((2, 2));
        for j in 0..2 {
            let mut xp = x0.clone();
            xp[j] += eps;
            let mut xm = x0.clone();
            xm[j] -= eps;
            let (zp, zm) = (encode_num(&xp), encode_num(&xm));
            for i in 0..2 {
                jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * eps);
            }
        }
        let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];

        let bv = head.base_values(&params, &h);
        let (mean, l) = match &bv {
            BaseValues::Full { mean, l } => (mean.clone(), l.clone()),
            _ => unreachable!(),
        };
        let sigma = l.dot(&l.t());
        let sdet = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
        let inv = arr2(&[
            [sigma[(1, 1)] / sdet, -sigma[(0, 1)] / sdet],
            [-sigma[(1, 0)] / sdet, sigma[(0, 0)] / sdet],
        ]);
        let diff = &z0 - &mean;
        let logp_z = -LN_2PI - 0.5 * sdet.ln() - 0.5 * diff.dot(&inv.dot(&diff));
        let want = logp_z + det.abs().ln();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let (head, field, params) = setup(CovKind::Diagonal, 1, 3, 12);
        let spec = FlowSpec::default();
        let h = arr1(&[0.2, -0.4, 0.1]);
        let mask = arr1(&[1.0]);
        let density = |x_val: f64| -> f64 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let fv = field.bind(&bound);
            let hv = tape.leaf(Tensor::from(h.clone()));
            let base = head.base(&mut tape, &bound, hv).unwrap();
            let shift = event_shift(&mut tape, &fv, hv).unwrap();
            let x = tape.leaf(Tensor::from_vec(vec![x_val]));
            let ll =
                log_likelihood_asyn(&mut tape, &base, &fv, x, &mask, shift, &spec).unwrap();
            tape.scalar_value(ll).unwrap().exp()
        };
        // Simpson over a generous window around the init-scale density.
        let (lo, hi, n) = (-12.0, 12.0, 480);
        let w = (hi - lo) / n as f64;
        let mut total = density(lo) + density(hi);
        for i in 1..n {
            let x = lo + i as f64 * w;
            total += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total *= w / 3.0;
        assert!((total - 1.0).abs() < 1e-3, "integrated mass {total}");
    }

    #[test]
    fn encode_inverts_decode_on_samples() {
        let (head, field, params) = setup(CovKind::Full, 3, 4, 13);
        let spec = FlowSpec::default();
        let h = arr1(&[0.5, -0.2, 0.9, 0.05]);
        let bv = head.base_values(&params, &h);
        let fp = field.values(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut z0 = Array2::zeros((7, 3));
        for i in 0..7 {
            z0.row_mut(i).assign(&bv.draw(&mut rng));
        }
        let x = decode_values(&fp, &h, z0.clone(), None, &spec).unwrap();

        for i in 0..7 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let fv = field.bind(&bound);
            let hv = tape.leaf(Tensor::from(h.clone()));
            let shift = event_shift(&mut tape, &fv, hv).unwrap();
            let xi = tape.leaf(Tensor::from(x.row(i).to_owned()));
            let (z, _) = encode(&mut tape, &fv, xi, shift, None, &spec).unwrap();
            let zf = tape.value(z).to_flat();
            for d in 0..3 {
                assert!(
                    (zf[d] - z0[(i, d)]).abs() < 1e-5,
                    "row {i} dim {d}: {} vs {}",
                    zf[d],
                    z0[(i, d)]
                );
            }
        }
    }

    #[test]
    fn zero_flow_samples_are_base_draws_with_correct_mean() {
        let (head, field, mut params) = setup(CovKind::Diagonal, 2, 3, 14);
        zero_field(&mut params, 2, 3);
        let h = arr1(&[0.3, 0.3, -0.1]);
        let bv = head.base_values(&params, &h);
        let fp = field.values(&params);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = sample(&bv, &fp, &h, n, None, &FlowSpec::default(), &mut rng).unwrap();
        let (mean, var) = match &bv {
            BaseValues::Diag { mean, var } => (mean.clone(), var.clone()),
            _ => unreachable!(),
        };
        for d in 0..2 {
            let got = samples.column(d).mean().unwrap();
            let se = (var[d] / n as f64).sqrt();
            assert!((got - mean[d]).abs() < 3.0 * se, "dim {d}: {got} vs {}", mean[d]);
        }
    }

    #[test]
    fn half_expansion_scales_base_draws() {
        // Same seed with and without the contraction field: the decoded
        // samples must be exactly the base draws scaled by e^{1/2}.
        let (head, field, mut params) = setup(CovKind::Diagonal, 2, 3, 15);
        zero_field(&mut params, 2, 3);
        let h = arr1(&[0.1, 0.0, -0.2]);
        let bv = head.base_values(&params, &h);
        let spec = FlowSpec::default();

        let zero_fp = field.values(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plain = sample(&bv, &zero_fp, &h, 5, None, &spec, &mut rng).unwrap();

        set(&mut params, "field.w_z", Tensor::from(arr2(&[[0.5, 0.0], [0.0, 0.5]])));
        saturate_gate(&mut params);
        let fp = field.values(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scaled = sample(&bv, &fp, &h, 5, None, &spec, &mut rng).unwrap();

        let factor = 0.5_f64.exp();
        for (a, b) in plain.iter().zip(scaled.iter()) {
            assert!((b - a * factor).abs() < 1e-8, "{b} vs {}", a * factor);
        }
    }

    #[test]
    fn masked_slots_cannot_influence_loss_or_gradients() {
        let (head, field, params) = setup(CovKind::Diagonal, 3, 4, 16);
        let mask = arr1(&[1.0, 0.0, 1.0]);
        let run = |hidden_val: f64| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let fv = field.bind(&bound);
            let hv = tape.leaf(Tensor::from_vec(vec![0.2, -0.1, 0.4, 0.8]));
            let base = head.base(&mut tape, &bound, hv).unwrap();
            let shift = event_shift(&mut tape, &fv, hv).unwrap();
            let x = tape.leaf(Tensor::from_vec(vec![0.5, hidden_val, -0.7]));
            let ll =
                log_likelihood_asyn(&mut tape, &base, &fv, x, &mask, shift, &FlowSpec::default())
                    .unwrap();
            let grads = tape.backward(ll).unwrap();
            let gvals = bound
                .vars()
                .iter()
                .map(|v| grads.wrt_or_zero(*v, tape.shape(*v)).to_flat())
                .collect();
            (tape.scalar_value(ll).unwrap(), gvals)
        };
        let (ll_a, g_a) = run(4.25);
        let (ll_b, g_b) = run(-17.0);
        assert_eq!(ll_a.to_bits(), ll_b.to_bits(), "loss saw a masked value");
        for (ga, gb) in g_a.iter().zip(&g_b) {
            for (a, b) in ga.iter().zip(gb) {
                assert_eq!(a.to_bits(), b.to_bits(), "a gradient saw a masked value");
            }
        }
    }

    #[test]
    fn masked_sampling_inverts_masked_encode_on_observed_dims() {
        let (head, field, params) = setup(CovKind::Full, 3, 4, 19);
        let spec = FlowSpec::default();
        let h = arr1(&[0.4, -0.3, 0.7, 0.1]);
        let bv = head.base_values(&params, &h);
        let fp = field.values(&params);
        let mask = arr1(&[1.0, 0.0, 1.0]);

        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let xs = sample(&bv, &fp, &h, n, Some(&mask), &spec, &mut rng).unwrap();
        // Replay the generator: sampling consumes one full base row per draw.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut z0 = Array2::zeros((n, 3));
        for i in 0..n {
            z0.row_mut(i).assign(&bv.draw(&mut rng));
        }

        for i in 0..n {
            assert_eq!(xs[(i, 1)].to_bits(), 0.0_f64.to_bits(), "unobserved slot moved");
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let fv = field.bind(&bound);
            let hv = tape.leaf(Tensor::from(h.clone()));
            let shift = event_shift(&mut tape, &fv, hv).unwrap();
            let xi = tape.leaf(Tensor::from(xs.row(i).to_owned()));
            let (z, _) = encode(&mut tape, &fv, xi, shift, Some(&mask), &spec).unwrap();
            let zf = tape.value(z).to_flat();
            for d in [0usize, 2] {
                assert!(
                    (zf[d] - z0[(i, d)]).abs() < 1e-6,
                    "row {i} dim {d}: {} vs {}",
                    zf[d],
                    z0[(i, d)]
                );
            }
            assert!(zf[1].abs() < 1e-12, "masked latent drifted: {}", zf[1]);
        }
    }

    #[test]
    fn cross_coupling_from_masked_dims_is_inert_in_sampling() {
        // Field where dim 0's velocity reads only the (unobserved) dim 1.
        // Masked sampling must hold dim 1 at zero, so dim 0 never moves;
        // unmasked sampling from the same seed visibly does move it.
        let (head, field, mut params) = setup(CovKind::Diagonal, 2, 3, 20);
        zero_field(&mut params, 2, 3);
        set(&mut params, "field.w_z", Tensor::from(arr2(&[[0.0, 5.0], [0.0, 0.0]])));
        saturate_gate(&mut params);
        let h = arr1(&[0.2, -0.4, 0.6]);
        let bv = head.base_values(&params, &h);
        let fp = field.values(&params);
        let spec = FlowSpec::default();
        let mask = arr1(&[1.0, 0.0]);

        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let masked = sample(&bv, &fp, &h, n, Some(&mask), &spec, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let plain = sample(&bv, &fp, &h, n, None, &spec, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut z0 = Array2::zeros((n, 2));
        for i in 0..n {
            z0.row_mut(i).assign(&bv.draw(&mut rng));
        }

        for i in 0..n {
            assert_eq!(masked[(i, 0)].to_bits(), z0[(i, 0)].to_bits(), "coupling leaked");
            assert_eq!(masked[(i, 1)].to_bits(), 0.0_f64.to_bits());
            assert!(
                (plain[(i, 0)] - z0[(i, 0)]).abs() > 1e-3,
                "unmasked flow should move dim 0: {} vs {}",
                plain[(i, 0)],
                z0[(i, 0)]
            );
        }
    }

    #[test]
    fn distinct_conditioning_states_give_distinct_bases() {
        let (head, _, params) = setup(CovKind::Full, 2, 3, 17);
        let a = head.base_values(&params, &arr1(&[1.0, 0.0, 0.0]));
        let b = head.base_values(&params, &arr1(&[0.0, 1.0, -1.0]));
        assert_ne!(a.mean(), b.mean());
    }

    #[test]
    fn head_and_field_gradients_match_finite_differences() {
        for cov in [CovKind::Full, CovKind::Diagonal] {
            let (head, field, params) = setup(cov, 2, 3, 18);
            let tensors: Vec<Tensor> = params.iter().map(|(_, t, _)| t.clone()).collect();
            let mask = arr1(&[1.0, 1.0]);
            let spec = FlowSpec { n_steps: 8, method: OdeMethod::Rk4 };
            let max_err = finite_diff_check(
                |tape, vars| {
                    let bound = BoundParams::from_vars(vars.to_vec());
                    let fv = field.bind(&bound);
                    let hv = tape.leaf(Tensor::from_vec(vec![0.3, -0.5, 0.2]));
                    let err = |_: FlowError| TapeError::NonScalarRoot { got: Shape::Vector(0) };
                    let base = head.base(tape, &bound, hv).map_err(err)?;
                    let shift = event_shift(tape, &fv, hv)?;
                    let x = tape.leaf(Tensor::from_vec(vec![0.9, -0.4]));
                    match cov {
                        CovKind::Full => {
                            log_likelihood_syn(tape, &base, &fv, x, shift, &spec).map_err(err)
                        }
                        CovKind::Diagonal => {
                            log_likelihood_asyn(tape, &base, &fv, x, &mask, shift, &spec)
                                .map_err(err)
                        }
                    }
                },
                &tensors,
                1e-4,
            )
            .unwrap();
            assert!(max_err < 1e-5, "{cov:?}: max rel err {max_err}");
        }
    }
}
