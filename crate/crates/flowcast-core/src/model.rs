//! A trainable forecaster: recurrent marginal layer plus conditional joint
//! layer over one shared parameter set.
//!
//! Training losses are negative mean conditional log-likelihoods, built on a
//! fresh tape per instance. Synchronous instances score the joint density of
//! every event and average over the K events; asynchronous instances score
//! only observed variables and average over K times D, so the two losses sit
//! on the same per-entry scale. Forecasting replays the observed history up
//! to (strictly before) a target event, reads the hidden state off the tape,
//! and samples the joint layer numerically.

use crate::cells::{Cell, CellError};
use crate::config::{ConfigError, JointKind, RunConfig};
use crate::flow::{self, BaseValues, FlowError, FlowField, FlowSpec, Head};
use crate::ode::OdeError;
use crate::params::{BoundParams, ParamError, ParamSet};
use crate::series::{Dataset, Instance, Regularity};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("instance has {got} variables, model expects {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("event index {k} out of range for {n} events")]
    EventOutOfRange { k: usize, n: usize },
    #[error("synchronous loss needs a fully observed instance, `{id}` is not")]
    NotSynchronous { id: String },
}

pub struct Model {
    params: ParamSet,
    cell: Cell,
    head: Head,
    field: Option<FlowField>,
    flow: FlowSpec,
    mode: Regularity,
    joint: JointKind,
    dim: usize,
}

impl Model {
    /// Fresh parameters for the given data dimension.
    pub fn init<R: Rng>(cfg: &RunConfig, data_dim: usize, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let cell = Cell::init(cfg.cell_config(data_dim), &mut params, rng)?;
        let cov = cfg.resolved_covariance()?;
        let head = Head::init(cov, data_dim, cfg.hidden, &mut params, rng)?;
        let field = match cfg.joint {
            JointKind::Cnf => Some(FlowField::init(data_dim, cfg.hidden, &mut params)?),
            JointKind::Gaussian => None,
        };
        Ok(Model {
            params,
            cell,
            head,
            field,
            flow: cfg.flow_spec(),
            mode: cfg.mode,
            joint: cfg.joint,
            dim: data_dim,
        })
    }

    /// Rebuild the model around an existing parameter set (checkpoint load);
    /// names and shapes are validated.
    pub fn attach(cfg: &RunConfig, data_dim: usize, params: ParamSet) -> Result<Self, ModelError> {
        cfg.validate()?;
        let cell = Cell::attach(cfg.cell_config(data_dim), &params)?;
        let cov = cfg.resolved_covariance()?;
        let head = Head::attach(cov, data_dim, cfg.hidden, &params)?;
        let field = match cfg.joint {
            JointKind::Cnf => Some(FlowField::attach(data_dim, cfg.hidden, &params)?),
            JointKind::Gaussian => None,
        };
        Ok(Model {
            params,
            cell,
            head,
            field,
            flow: cfg.flow_spec(),
            mode: cfg.mode,
            joint: cfg.joint,
            dim: data_dim,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-variable means of the observed training entries, for
    /// decay-imputation starting points.
    pub fn set_empirical_means(&mut self, means: &[f64]) -> Result<(), ModelError> {
        self.cell.set_empirical_means(&mut self.params, means)?;
        Ok(())
    }

    /// Negative mean conditional log-likelihood of one instance.
    pub fn instance_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inst: &Instance,
    ) -> Result<Var, ModelError> {
        if inst.dim() != self.dim {
            return Err(ModelError::DimMismatch { got: inst.dim(), want: self.dim });
        }
        if self.mode == Regularity::Syn && inst.regularity() == Regularity::Asyn {
            return Err(ModelError::NotSynchronous { id: inst.id.clone() });
        }
        let states = self.cell.run_sequence(tape, bound, inst)?;
        let mut total: Option<Var> = None;
        for k in 0..inst.n_events() {
            let h = states.pre[k].h;
            let base = self.head.base(tape, bound, h)?;
            let x = tape.leaf(Tensor::from(inst.value_column(k)));
            let ll = match (self.joint, self.mode) {
                (JointKind::Cnf, Regularity::Syn) => {
                    let fv = self.field.as_ref().expect("cnf has a field").bind(bound);
                    let shift = flow::event_shift(tape, &fv, h)?;
                    flow::log_likelihood_syn(tape, &base, &fv, x, shift, &self.flow)?
                }
                (JointKind::Cnf, Regularity::Asyn) => {
                    let fv = self.field.as_ref().expect("cnf has a field").bind(bound);
                    let shift = flow::event_shift(tape, &fv, h)?;
                    let mask = inst.mask_column(k);
                    flow::log_likelihood_asyn(tape, &base, &fv, x, &mask, shift, &self.flow)?
                }
                (JointKind::Gaussian, Regularity::Syn) => {
                    flow::gaussian_log_likelihood(tape, &base, x, None)?
                }
                (JointKind::Gaussian, Regularity::Asyn) => {
                    let mask = inst.mask_column(k);
                    flow::gaussian_log_likelihood(tape, &base, x, Some(&mask))?
                }
            };
            total = Some(match total {
                Some(t) => tape.add(t, ll)?,
                None => ll,
            });
        }
        let total = total.expect("instances have at least one event");
        let norm = match self.mode {
            Regularity::Syn => inst.n_events() as f64,
            Regularity::Asyn => (inst.n_events() * self.dim) as f64,
        };
        Ok(tape.affine(total, -1.0 / norm, 0.0)?)
    }

    /// Hidden state at t_k, conditioned on observations strictly before it.
    fn hidden_before(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inst: &Instance,
        k: usize,
    ) -> Result<Var, ModelError> {
        let mut state = self.cell.init_state(tape, bound);
        let mut t_prev = 0.0;
        for j in 0..k {
            let t = inst.times[j];
            let evolved = self.cell.evolve(tape, bound, &state, t_prev, t)?;
            let x = tape.leaf(Tensor::from(inst.value_column(j)));
            let m = tape.leaf(Tensor::from(inst.mask_column(j)));
            let x_eff = tape.hadamard(x, m)?;
            state = self.cell.update(tape, bound, &evolved, x_eff, m, t)?;
            t_prev = t;
        }
        let pre = self.cell.evolve(tape, bound, &state, t_prev, inst.times[k])?;
        Ok(pre.h)
    }

    /// Base-distribution parameters at event `k`, conditioned on the history
    /// strictly before it.
    pub fn base_at(&self, inst: &Instance, k: usize) -> Result<BaseValues, ModelError> {
        if inst.dim() != self.dim {
            return Err(ModelError::DimMismatch { got: inst.dim(), want: self.dim });
        }
        if k >= inst.n_events() {
            return Err(ModelError::EventOutOfRange { k, n: inst.n_events() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h_var = self.hidden_before(&mut tape, &bound, inst, k)?;
        let h = tape.value(h_var).vector().expect("hidden state is a vector").to_owned();
        Ok(self.head.base_values(&self.params, &h))
    }

    /// Forecast ensemble at event `k`: `n_samples` joint draws, one per row.
    pub fn forecast<R: Rng>(
        &self,
        inst: &Instance,
        k: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>, ModelError> {
        if inst.dim() != self.dim {
            return Err(ModelError::DimMismatch { got: inst.dim(), want: self.dim });
        }
        if k >= inst.n_events() {
            return Err(ModelError::EventOutOfRange { k, n: inst.n_events() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h_var = self.hidden_before(&mut tape, &bound, inst, k)?;
        let h = tape.value(h_var).vector().expect("hidden state is a vector").to_owned();
        let base = self.head.base_values(&self.params, &h);
        match (&self.field, self.joint) {
            (Some(field), JointKind::Cnf) => {
                let fp = field.values(&self.params);
                // A partial mask at the target event restricts the flow the
                // same way it does in the likelihood, so draws come from the
                // density the model actually fits there.
                let col = inst.mask.column(k).to_owned();
                let mask = if col.iter().all(|m| *m == 1.0) { None } else { Some(&col) };
                Ok(flow::sample(&base, &fp, &h, n_samples, mask, &self.flow, rng)?)
            }
            _ => Ok(flow::sample_gaussian(&base, n_samples, rng)),
        }
    }
}

/// Per-variable means of observed entries across the given instances;
/// variables never observed there fall back to zero.
pub fn empirical_means(dataset: &Dataset, indices: &[usize]) -> Vec<f64> {
    let d = dataset.dim;
    let mut sums = vec![0.0; d];
    let mut counts = vec![0usize; d];
    for &i in indices {
        let inst = &dataset.instances[i];
        for k in 0..inst.n_events() {
            for dd in 0..d {
                if inst.mask[(dd, k)] == 1.0 {
                    sums[dd] += inst.values[(dd, k)];
                    counts[dd] += 1;
                }
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect()
}
