//! Continuous-time recurrent cells over irregular event sequences.
//!
//! Every cell exposes the same two moves: `evolve` carries the hidden state
//! across an observation gap, `update` folds one event's (value, mask) pair
//! in. Four variants are provided:
//!
//! * gated decay toward a learned target between events plus a discrete gated
//!   update at events (two separate gate sets),
//! * identity evolution with trainable exponential input/hidden decay and
//!   mean imputation applied inside the update,
//! * a learned feed-forward field integrated between events with a gated
//!   update, and
//! * the same learned field paired with a long/short-term memory update.
//!
//! Evolution integrates on the gradient tape in fixed micro-steps, so
//! training differentiates through exactly the arithmetic used forward.

use crate::ode::{self, IntegrationSpec, OdeError, OdeMethod};
use crate::params::{BoundParams, ParamError, ParamSet};
use crate::series::Instance;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Shape, Tensor};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CellError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("parameter {name} has shape {got}, expected {want}")]
    ParamShape { name: String, got: Shape, want: Shape },
    #[error("evolve target {t_to} precedes start {t_from}")]
    TimeReversed { t_from: f64, t_to: f64 },
    #[error("update mask must contain only 0/1 with at least one observation")]
    BadMask,
    #[error("config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    GruOde,
    GruD,
    OdeRnn,
    OdeLstm,
}

/// What the continuous-regime gates see as input between events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolveInput {
    /// Autonomous evolution: the input term is dropped entirely.
    Zero,
    /// Feed the most recent observed value, held constant across the gap.
    HoldLast,
}

pub const DEFAULT_MICRO_STEP: f64 = 0.05;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Largest solver step; gaps are split into ceil(gap / micro_step) steps.
    #[serde(default = "default_micro_step")]
    pub micro_step: f64,
    #[serde(default = "default_method")]
    pub method: OdeMethod,
    #[serde(default = "default_evolve_input")]
    pub evolve_input: EvolveInput,
}

fn default_micro_step() -> f64 {
    DEFAULT_MICRO_STEP
}
fn default_method() -> OdeMethod {
    OdeMethod::Rk4
}
fn default_evolve_input() -> EvolveInput {
    EvolveInput::Zero
}

impl CellConfig {
    pub fn new(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        CellConfig {
            kind,
            input_dim,
            hidden_dim,
            micro_step: default_micro_step(),
            method: default_method(),
            evolve_input: default_evolve_input(),
        }
    }

    fn validate(&self) -> Result<(), CellError> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(CellError::Config("input and hidden dimensions must be positive".into()));
        }
        if !(self.micro_step > 0.0) || !self.micro_step.is_finite() {
            return Err(CellError::Config(format!("micro_step {} must be positive", self.micro_step)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter wiring. `wire` walks the same named layout for both fresh
// initialization and re-attachment to a loaded set, so checkpoints and new
// runs cannot drift apart.

enum VecInit {
    Zeros,
    Uniform(f64, f64),
    /// Registered non-trainable (filled from data, never stepped).
    FrozenZeros,
}

trait ParamSource {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize, CellError>;
    fn vector(&mut self, name: &str, len: usize, init: VecInit) -> Result<usize, CellError>;
}

struct InitSource<'a, R: Rng> {
    params: &'a mut ParamSet,
    rng: &'a mut R,
}

impl<R: Rng> ParamSource for InitSource<'_, R> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize, CellError> {
        let a = 1.0 / (cols as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        let t = Tensor::from(Array2::from_shape_vec((rows, cols), data).expect("shape"));
        self.params.insert(name, t)?;
        Ok(self.params.position(name)?)
    }

    fn vector(&mut self, name: &str, len: usize, init: VecInit) -> Result<usize, CellError> {
        let t = match init {
            VecInit::Zeros | VecInit::FrozenZeros => Tensor::zeros(Shape::Vector(len)),
            VecInit::Uniform(lo, hi) => {
                Tensor::from_vec((0..len).map(|_| self.rng.random_range(lo..hi)).collect())
            }
        };
        if matches!(init, VecInit::FrozenZeros) {
            self.params.insert_frozen(name, t)?;
        } else {
            self.params.insert(name, t)?;
        }
        Ok(self.params.position(name)?)
    }
}

struct AttachSource<'a> {
    params: &'a ParamSet,
}

impl AttachSource<'_> {
    fn expect(&self, name: &str, want: Shape) -> Result<usize, CellError> {
        let i = self.params.position(name)?;
        let got = self.params.shape_at(i);
        if got != want {
            return Err(CellError::ParamShape { name: name.into(), got, want });
        }
        Ok(i)
    }
}

impl ParamSource for AttachSource<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize, CellError> {
        self.expect(name, Shape::Matrix(rows, cols))
    }

    fn vector(&mut self, name: &str, len: usize, _init: VecInit) -> Result<usize, CellError> {
        self.expect(name, Shape::Vector(len))
    }
}

/// ParamSet indices for one gated update set (reset, update, candidate).
#[derive(Clone, Copy, Debug)]
struct GruGates {
    w_r: usize,
    u_r: usize,
    b_r: usize,
    w_z: usize,
    u_z: usize,
    b_z: usize,
    w_h: usize,
    u_h: usize,
    b_h: usize,
}

#[derive(Clone, Copy)]
struct GruVars {
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_h: Var,
    u_h: Var,
    b_h: Var,
}

impl GruGates {
    fn bind(&self, b: &BoundParams) -> GruVars {
        GruVars {
            w_r: b.var_at(self.w_r),
            u_r: b.var_at(self.u_r),
            b_r: b.var_at(self.b_r),
            w_z: b.var_at(self.w_z),
            u_z: b.var_at(self.u_z),
            b_z: b.var_at(self.b_z),
            w_h: b.var_at(self.w_h),
            u_h: b.var_at(self.u_h),
            b_h: b.var_at(self.b_h),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy)]
struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    fn bind(&self, b: &BoundParams) -> MlpVars {
        MlpVars {
            w1: b.var_at(self.w1),
            b1: b.var_at(self.b1),
            w2: b.var_at(self.w2),
            b2: b.var_at(self.b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmGates {
    w_f: usize,
    u_f: usize,
    b_f: usize,
    w_i: usize,
    u_i: usize,
    b_i: usize,
    w_o: usize,
    u_o: usize,
    b_o: usize,
    w_c: usize,
    u_c: usize,
    b_c: usize,
}

#[derive(Debug)]
enum Weights {
    GruOde {
        cont: GruGates,
        upd: GruGates,
    },
    GruD {
        upd: GruGates,
        v_r: usize,
        v_z: usize,
        v_h: usize,
        decay_x_w: usize,
        decay_x_b: usize,
        decay_h_w: usize,
        decay_h_b: usize,
        x_mean: usize,
    },
    OdeRnn {
        upd: GruGates,
        field: Mlp,
    },
    OdeLstm {
        upd: LstmGates,
        field: Mlp,
    },
}

fn wire_gru(src: &mut dyn ParamSource, prefix: &str, d: usize, h: usize) -> Result<GruGates, CellError> {
    Ok(GruGates {
        w_r: src.matrix(&format!("{prefix}.w_r"), h, d)?,
        u_r: src.matrix(&format!("{prefix}.u_r"), h, h)?,
        b_r: src.vector(&format!("{prefix}.b_r"), h, VecInit::Zeros)?,
        w_z: src.matrix(&format!("{prefix}.w_z"), h, d)?,
        u_z: src.matrix(&format!("{prefix}.u_z"), h, h)?,
        b_z: src.vector(&format!("{prefix}.b_z"), h, VecInit::Zeros)?,
        w_h: src.matrix(&format!("{prefix}.w_h"), h, d)?,
        u_h: src.matrix(&format!("{prefix}.u_h"), h, h)?,
        b_h: src.vector(&format!("{prefix}.b_h"), h, VecInit::Zeros)?,
    })
}

/// Field input is the hidden state with the clock appended.
fn wire_mlp(src: &mut dyn ParamSource, h: usize) -> Result<Mlp, CellError> {
    Ok(Mlp {
        w1: src.matrix("cell.field.w1", h, h + 1)?,
        b1: src.vector("cell.field.b1", h, VecInit::Zeros)?,
        w2: src.matrix("cell.field.w2", h, h)?,
        b2: src.vector("cell.field.b2", h, VecInit::Zeros)?,
    })
}

fn wire(config: &CellConfig, src: &mut dyn ParamSource) -> Result<Weights, CellError> {
    let (d, h) = (config.input_dim, config.hidden_dim);
    match config.kind {
        CellKind::GruOde => Ok(Weights::GruOde {
            cont: wire_gru(src, "cell.cont", d, h)?,
            upd: wire_gru(src, "cell.upd", d, h)?,
        }),
        CellKind::GruD => Ok(Weights::GruD {
            upd: wire_gru(src, "cell.upd", d, h)?,
            v_r: src.matrix("cell.upd.v_r", h, d)?,
            v_z: src.matrix("cell.upd.v_z", h, d)?,
            v_h: src.matrix("cell.upd.v_h", h, d)?,
            // Positive initial slopes keep the hinge in its active, smooth
            // region for any real gap.
            decay_x_w: src.vector("cell.decay_x.w", d, VecInit::Uniform(0.05, 0.15))?,
            decay_x_b: src.vector("cell.decay_x.b", d, VecInit::Zeros)?,
            decay_h_w: src.vector("cell.decay_h.w", h, VecInit::Uniform(0.05, 0.15))?,
            decay_h_b: src.vector("cell.decay_h.b", h, VecInit::Zeros)?,
            x_mean: src.vector("cell.x_mean", d, VecInit::FrozenZeros)?,
        }),
        CellKind::OdeRnn => Ok(Weights::OdeRnn {
            upd: wire_gru(src, "cell.upd", d, h)?,
            field: wire_mlp(src, h)?,
        }),
        CellKind::OdeLstm => Ok(Weights::OdeLstm {
            upd: LstmGates {
                w_f: src.matrix("cell.upd.w_f", h, d)?,
                u_f: src.matrix("cell.upd.u_f", h, h)?,
                b_f: src.vector("cell.upd.b_f", h, VecInit::Zeros)?,
                w_i: src.matrix("cell.upd.w_i", h, d)?,
                u_i: src.matrix("cell.upd.u_i", h, h)?,
                b_i: src.vector("cell.upd.b_i", h, VecInit::Zeros)?,
                w_o: src.matrix("cell.upd.w_o", h, d)?,
                u_o: src.matrix("cell.upd.u_o", h, h)?,
                b_o: src.vector("cell.upd.b_o", h, VecInit::Zeros)?,
                w_c: src.matrix("cell.upd.w_c", h, d)?,
                u_c: src.matrix("cell.upd.u_c", h, h)?,
                b_c: src.vector("cell.upd.b_c", h, VecInit::Zeros)?,
            },
            field: wire_mlp(src, h)?,
        }),
    }
}

// ---------------------------------------------------------------------------
// Runtime state and the cell itself.

/// Hidden state plus the bookkeeping a variant carries across events.
#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Var,
    /// Long-term memory (LSTM variant only); constant between events.
    pub c: Option<Var>,
    /// Last observed input, for held-input continuous gates.
    held_x: Option<Var>,
    grud: Option<GrudTrack>,
}

#[derive(Clone, Debug)]
struct GrudTrack {
    /// Most recent observed value per variable (starts at the empirical mean).
    last_value: Var,
    /// Per-variable time of last observation (starts at 0).
    last_obs_time: Vec<f64>,
    /// Time of the previous event, for the hidden-decay gap.
    prev_event_time: f64,
}

/// Pre-update (`pre[k]` = state at t_k before folding the event in) and
/// post-update states for every event of one instance.
pub struct SequenceStates {
    pub pre: Vec<CellState>,
    pub post: Vec<CellState>,
}

#[derive(Debug)]
pub struct Cell {
    config: CellConfig,
    weights: Weights,
}

impl Cell {
    /// Register freshly initialized parameters into `params`.
    pub fn init<R: Rng>(config: CellConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self, CellError> {
        config.validate()?;
        let mut src = InitSource { params, rng };
        let weights = wire(&config, &mut src)?;
        Ok(Cell { config, weights })
    }

    /// Re-attach to an existing parameter set (e.g. a loaded checkpoint),
    /// verifying names and shapes.
    pub fn attach(config: CellConfig, params: &ParamSet) -> Result<Self, CellError> {
        config.validate()?;
        let mut src = AttachSource { params };
        let weights = wire(&config, &mut src)?;
        Ok(Cell { config, weights })
    }

    pub fn config(&self) -> &CellConfig {
        &self.config
    }

    /// Overwrite the frozen per-variable empirical means used for imputation.
    /// No-op for variants without them.
    pub fn set_empirical_means(&self, params: &mut ParamSet, means: &[f64]) -> Result<(), CellError> {
        if let Weights::GruD { .. } = self.weights {
            if means.len() != self.config.input_dim {
                return Err(CellError::Config(format!(
                    "{} means for {} variables",
                    means.len(),
                    self.config.input_dim
                )));
            }
            params.set("cell.x_mean", Tensor::from_vec(means.to_vec()))?;
        }
        Ok(())
    }

    /// Zero hidden state at time 0.
    pub fn init_state(&self, tape: &mut Tape, bound: &BoundParams) -> CellState {
        let h = tape.leaf(Tensor::zeros(Shape::Vector(self.config.hidden_dim)));
        let c = matches!(self.config.kind, CellKind::OdeLstm)
            .then(|| tape.leaf(Tensor::zeros(Shape::Vector(self.config.hidden_dim))));
        let held_x = (matches!(self.config.kind, CellKind::GruOde)
            && self.config.evolve_input == EvolveInput::HoldLast)
            .then(|| tape.leaf(Tensor::zeros(Shape::Vector(self.config.input_dim))));
        let grud = match &self.weights {
            Weights::GruD { x_mean, .. } => Some(GrudTrack {
                last_value: bound.var_at(*x_mean),
                last_obs_time: vec![0.0; self.config.input_dim],
                prev_event_time: 0.0,
            }),
            _ => None,
        };
        CellState { h, c, held_x, grud }
    }

    /// Carry the state from `t_from` to `t_to` with no observations between.
    pub fn evolve(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: &CellState,
        t_from: f64,
        t_to: f64,
    ) -> Result<CellState, CellError> {
        if t_to < t_from {
            return Err(CellError::TimeReversed { t_from, t_to });
        }
        if t_to == t_from || matches!(self.weights, Weights::GruD { .. }) {
            return Ok(state.clone());
        }
        let n = ((t_to - t_from) / self.config.micro_step).ceil().max(1.0) as usize;
        let spec = IntegrationSpec::new(self.config.method, t_from, t_to, n)?;
        let h = match &self.weights {
            Weights::GruOde { cont, .. } => {
                let g = cont.bind(bound);
                let x = state.held_x;
                ode::integrate(tape, &mut |tape, h, _t| gru_field(tape, &g, x, h), state.h, &spec)?
            }
            Weights::OdeRnn { field, .. } | Weights::OdeLstm { field, .. } => {
                let f = field.bind(bound);
                ode::integrate(tape, &mut |tape, h, t| mlp_field(tape, &f, h, t), state.h, &spec)?
            }
            Weights::GruD { .. } => unreachable!("identity evolution handled above"),
        };
        Ok(CellState { h, ..state.clone() })
    }

    /// Fold the event (x, m) at time `t` into the state. `x` must already be
    /// zero wherever `m` is zero.
    pub fn update(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: &CellState,
        x: Var,
        m: Var,
        t: f64,
    ) -> Result<CellState, CellError> {
        let mask: Vec<f64> = tape.value(m).iter().collect();
        if mask.len() != self.config.input_dim
            || mask.iter().any(|v| *v != 0.0 && *v != 1.0)
            || mask.iter().all(|v| *v == 0.0)
        {
            return Err(CellError::BadMask);
        }

        match &self.weights {
            Weights::GruOde { upd, .. } => {
                let g = upd.bind(bound);
                let h = gru_update(tape, &g, Some(x), state.h, state.h, None)?;
                let held_x = match state.held_x {
                    Some(prev) => Some(hold_observed(tape, x, m, prev)?),
                    None => None,
                };
                Ok(CellState { h, held_x, ..state.clone() })
            }
            Weights::OdeRnn { upd, .. } => {
                let g = upd.bind(bound);
                let h = gru_update(tape, &g, Some(x), state.h, state.h, None)?;
                Ok(CellState { h, ..state.clone() })
            }
            Weights::GruD {
                upd,
                v_r,
                v_z,
                v_h,
                decay_x_w,
                decay_x_b,
                decay_h_w,
                decay_h_b,
                x_mean,
            } => {
                let track = state.grud.as_ref().expect("tracking state present");

                // Per-variable input decay from each variable's own gap.
                let gaps =
                    Tensor::from_vec(track.last_obs_time.iter().map(|t0| t - t0).collect());
                let gap_leaf = tape.leaf(gaps);
                let wg = tape.hadamard(bound.var_at(*decay_x_w), gap_leaf)?;
                let pre = tape.add(wg, bound.var_at(*decay_x_b))?;
                let gamma_x = decay_from(tape, pre)?;

                // Hidden decay from the gap since the previous event.
                let dh = t - track.prev_event_time;
                let wg_h = tape.affine(bound.var_at(*decay_h_w), dh, 0.0)?;
                let pre_h = tape.add(wg_h, bound.var_at(*decay_h_b))?;
                let gamma_h = decay_from(tape, pre_h)?;

                // Impute unobserved inputs toward the empirical mean.
                let decayed_last = tape.hadamard(gamma_x, track.last_value)?;
                let fade = tape.affine(gamma_x, -1.0, 1.0)?;
                let toward_mean = tape.hadamard(fade, bound.var_at(*x_mean))?;
                let filled = tape.add(decayed_last, toward_mean)?;
                let observed = tape.hadamard(m, x)?;
                let not_m = tape.affine(m, -1.0, 1.0)?;
                let imputed = tape.hadamard(not_m, filled)?;
                let xhat = tape.add(observed, imputed)?;

                // Gates see the decayed hidden state; the convex combination
                // mixes the undecayed one.
                let h_gates = tape.hadamard(gamma_h, state.h)?;
                let g = upd.bind(bound);
                let vm = Some((bound.var_at(*v_r), bound.var_at(*v_z), bound.var_at(*v_h), m));
                let h = gru_update(tape, &g, Some(xhat), h_gates, state.h, vm)?;

                let last_value = hold_observed(tape, x, m, track.last_value)?;
                let mut last_obs_time = track.last_obs_time.clone();
                for (d, held) in last_obs_time.iter_mut().enumerate() {
                    if mask[d] == 1.0 {
                        *held = t;
                    }
                }
                Ok(CellState {
                    h,
                    grud: Some(GrudTrack { last_value, last_obs_time, prev_event_time: t }),
                    ..state.clone()
                })
            }
            Weights::OdeLstm { upd, .. } => {
                let c_prev = state.c.expect("memory present");
                let f = lstm_gate(tape, bound, upd.w_f, upd.u_f, upd.b_f, x, state.h, true)?;
                let i = lstm_gate(tape, bound, upd.w_i, upd.u_i, upd.b_i, x, state.h, true)?;
                let o = lstm_gate(tape, bound, upd.w_o, upd.u_o, upd.b_o, x, state.h, true)?;
                let c_tilde = lstm_gate(tape, bound, upd.w_c, upd.u_c, upd.b_c, x, state.h, false)?;
                let keep = tape.hadamard(f, c_prev)?;
                let write = tape.hadamard(i, c_tilde)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                let h = tape.hadamard(o, tc)?;
                Ok(CellState { h, c: Some(c), ..state.clone() })
            }
        }
    }

    /// Alternate evolve/update over an instance from h(0) = 0, returning the
    /// state just before and just after every event. Pre-event states are the
    /// conditioning inputs for the distribution heads.
    pub fn run_sequence(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inst: &Instance,
    ) -> Result<SequenceStates, CellError> {
        let mut state = self.init_state(tape, bound);
        let mut t_prev = 0.0;
        let mut pre = Vec::with_capacity(inst.n_events());
        let mut post = Vec::with_capacity(inst.n_events());
        for k in 0..inst.n_events() {
            let t = inst.times[k];
            let s_pre = self.evolve(tape, bound, &state, t_prev, t)?;
            let x = tape.leaf(Tensor::from(inst.value_column(k)));
            let m = tape.leaf(Tensor::from(inst.mask_column(k)));
            // Masking here makes unobserved entries structurally inert.
            let x_eff = tape.hadamard(x, m)?;
            let s_post = self.update(tape, bound, &s_pre, x_eff, m, t)?;
            pre.push(s_pre);
            post.push(s_post.clone());
            state = s_post;
            t_prev = t;
        }
        Ok(SequenceStates { pre, post })
    }
}

// ---------------------------------------------------------------------------
// Shared gate arithmetic.

fn gate_preact(
    tape: &mut Tape,
    w: Var,
    u: Var,
    b: Var,
    x: Option<Var>,
    h: Var,
    vm: Option<(Var, Var)>,
) -> Result<Var, TapeError> {
    let mut acc = tape.matmul(u, h)?;
    if let Some(x) = x {
        let wx = tape.matmul(w, x)?;
        acc = tape.add(acc, wx)?;
    }
    if let Some((v, m)) = vm {
        let vmm = tape.matmul(v, m)?;
        acc = tape.add(acc, vmm)?;
    }
    tape.add(acc, b)
}

/// z ⊙ h_mix + (1 − z) ⊙ h̃, with gates read from `h_gates`.
fn gru_update(
    tape: &mut Tape,
    g: &GruVars,
    x: Option<Var>,
    h_gates: Var,
    h_mix: Var,
    vm: Option<(Var, Var, Var, Var)>,
) -> Result<Var, TapeError> {
    let split = |v: Option<(Var, Var, Var, Var)>, pick: usize| {
        v.map(|(r, z, h, m)| ([r, z, h][pick], m))
    };
    let pre_r = gate_preact(tape, g.w_r, g.u_r, g.b_r, x, h_gates, split(vm, 0))?;
    let r = tape.sigmoid(pre_r)?;
    let pre_z = gate_preact(tape, g.w_z, g.u_z, g.b_z, x, h_gates, split(vm, 1))?;
    let z = tape.sigmoid(pre_z)?;
    let rh = tape.hadamard(r, h_gates)?;
    let pre_h = gate_preact(tape, g.w_h, g.u_h, g.b_h, x, rh, split(vm, 2))?;
    let h_tilde = tape.tanh(pre_h)?;
    let zh = tape.hadamard(z, h_mix)?;
    let not_z = tape.affine(z, -1.0, 1.0)?;
    let nzh = tape.hadamard(not_z, h_tilde)?;
    tape.add(zh, nzh)
}

/// dh/dt = (1 − z) ⊙ (h̃ − h): relaxation toward the gated candidate.
fn gru_field(tape: &mut Tape, g: &GruVars, x: Option<Var>, h: Var) -> Result<Var, TapeError> {
    let pre_r = gate_preact(tape, g.w_r, g.u_r, g.b_r, x, h, None)?;
    let r = tape.sigmoid(pre_r)?;
    let pre_z = gate_preact(tape, g.w_z, g.u_z, g.b_z, x, h, None)?;
    let z = tape.sigmoid(pre_z)?;
    let rh = tape.hadamard(r, h)?;
    let pre_h = gate_preact(tape, g.w_h, g.u_h, g.b_h, x, rh, None)?;
    let h_tilde = tape.tanh(pre_h)?;
    let diff = tape.sub(h_tilde, h)?;
    let not_z = tape.affine(z, -1.0, 1.0)?;
    tape.hadamard(not_z, diff)
}

/// One-hidden-layer field on the state with the clock appended.
fn mlp_field(tape: &mut Tape, f: &MlpVars, h: Var, t: f64) -> Result<Var, TapeError> {
    let clock = tape.scalar(t);
    let ht = tape.concat(h, clock)?;
    let a1 = tape.matmul(f.w1, ht)?;
    let a1 = tape.add(a1, f.b1)?;
    let a1 = tape.tanh(a1)?;
    let a2 = tape.matmul(f.w2, a1)?;
    tape.add(a2, f.b2)
}

fn lstm_gate(
    tape: &mut Tape,
    bound: &BoundParams,
    w: usize,
    u: usize,
    b: usize,
    x: Var,
    h: Var,
    sigmoid: bool,
) -> Result<Var, TapeError> {
    let pre = gate_preact(tape, bound.var_at(w), bound.var_at(u), bound.var_at(b), Some(x), h, None)?;
    if sigmoid {
        tape.sigmoid(pre)
    } else {
        tape.tanh(pre)
    }
}

/// exp(−max(0, pre)): a decay in (0, 1] that equals 1 at zero gap.
fn decay_from(tape: &mut Tape, pre: Var) -> Result<Var, TapeError> {
    let hinge = tape.relu(pre)?;
    let neg = tape.affine(hinge, -1.0, 0.0)?;
    tape.exp(neg)
}

/// m ⊙ x + (1 − m) ⊙ prev: refresh held values where observed.
fn hold_observed(tape: &mut Tape, x: Var, m: Var, prev: Var) -> Result<Var, TapeError> {
    let mx = tape.hadamard(m, x)?;
    let not_m = tape.affine(m, -1.0, 1.0)?;
    let keep = tape.hadamard(not_m, prev)?;
    tape.add(mx, keep)
}
