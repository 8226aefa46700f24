//! Run configuration shared by training, sampling, and evaluation.

use crate::cells::{CellConfig, CellKind};
use crate::flow::{CovKind, FlowSpec};
use crate::metrics;
use crate::ode::OdeMethod;
use crate::series::{Dataset, Regularity};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
}

/// Shape of the joint layer on top of the recurrent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    /// Flow-transported conditional density.
    Cnf,
    /// The conditional Gaussian itself, no flow (baseline).
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub cell: CellKind,
    pub joint: JointKind,
    pub mode: Regularity,
    /// Explicit base covariance; omitted means full for the synchronous flow
    /// and diagonal everywhere else.
    #[serde(default)]
    pub covariance: Option<CovKind>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    #[serde(default = "default_micro_step")]
    pub micro_step: f64,
    #[serde(default = "default_method")]
    pub method: OdeMethod,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Forecast ensemble size for evaluation.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Quantile levels for the calibration score.
    #[serde(default = "metrics::decile_levels")]
    pub cs_levels: Vec<f64>,
}

fn default_hidden() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_flow_steps() -> usize {
    20
}
fn default_micro_step() -> f64 {
    crate::cells::DEFAULT_MICRO_STEP
}
fn default_method() -> OdeMethod {
    OdeMethod::Rk4
}
fn default_grad_clip() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}
fn default_patience() -> usize {
    10
}
fn default_n_samples() -> usize {
    100
}

impl RunConfig {
    pub fn new(cell: CellKind, joint: JointKind, mode: Regularity) -> Self {
        RunConfig {
            cell,
            joint,
            mode,
            covariance: None,
            hidden: default_hidden(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            flow_steps: default_flow_steps(),
            micro_step: default_micro_step(),
            method: default_method(),
            grad_clip: default_grad_clip(),
            standardize: default_true(),
            patience: default_patience(),
            n_samples: default_n_samples(),
            cs_levels: metrics::decile_levels(),
        }
    }

    /// Base covariance after applying the defaults. The asynchronous loss
    /// needs per-variable densities, so it rejects a full-covariance base.
    pub fn resolved_covariance(&self) -> Result<CovKind, ConfigError> {
        match (self.covariance, self.joint, self.mode) {
            (Some(CovKind::Full), _, Regularity::Asyn) => Err(ConfigError::Invalid(
                "a full-covariance base cannot score per-variable observations; \
                 use diagonal covariance in asyn mode"
                    .into(),
            )),
            (Some(c), _, _) => Ok(c),
            (None, JointKind::Cnf, Regularity::Syn) => Ok(CovKind::Full),
            (None, _, _) => Ok(CovKind::Diagonal),
        }
    }

    pub fn flow_spec(&self) -> FlowSpec {
        FlowSpec { n_steps: self.flow_steps, method: self.method }
    }

    pub fn cell_config(&self, data_dim: usize) -> CellConfig {
        let mut c = CellConfig::new(self.cell, data_dim, self.hidden);
        c.micro_step = self.micro_step;
        c.method = self.method;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.epochs == 0 {
            return bad("need at least one epoch");
        }
        if self.flow_steps == 0 {
            return bad("need at least one flow step");
        }
        if !(self.micro_step > 0.0 && self.micro_step.is_finite()) {
            return bad("micro step must be positive and finite");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least one epoch");
        }
        if self.n_samples < 2 {
            return bad("need at least two forecast samples for CDF scores");
        }
        if self.cs_levels.is_empty() || self.cs_levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("calibration levels must lie strictly inside (0, 1)");
        }
        self.resolved_covariance()?;
        Ok(())
    }

    /// Config/dataset pairing rules: the synchronous objective is only
    /// defined when every event observes every variable.
    pub fn validate_for(&self, dataset: &Dataset) -> Result<(), ConfigError> {
        self.validate()?;
        if self.mode == Regularity::Syn && dataset.regularity() == Regularity::Asyn {
            return Err(ConfigError::Invalid(
                "syn mode requires a dataset where every event observes every variable".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn defaults_fill_in_from_minimal_json() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"cell":"gruode","joint":"cnf","mode":"syn"}"#).unwrap();
        assert_eq!(cfg.hidden, 64);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.flow_steps, 20);
        assert_eq!(cfg.grad_clip, 10.0);
        assert_eq!(cfg.n_samples, 100);
        assert_eq!(cfg.cs_levels.len(), 9);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.resolved_covariance().unwrap(), CovKind::Full);
    }

    #[test]
    fn covariance_defaults_depend_on_joint_and_mode() {
        let mut cfg = RunConfig::new(CellKind::GruOde, JointKind::Cnf, Regularity::Asyn);
        assert_eq!(cfg.resolved_covariance().unwrap(), CovKind::Diagonal);
        cfg.joint = JointKind::Gaussian;
        cfg.mode = Regularity::Syn;
        assert_eq!(cfg.resolved_covariance().unwrap(), CovKind::Diagonal);
        cfg.covariance = Some(CovKind::Full);
        assert_eq!(cfg.resolved_covariance().unwrap(), CovKind::Full);
        cfg.mode = Regularity::Asyn;
        assert!(cfg.resolved_covariance().is_err(), "full base cannot be scored per variable");
    }

    #[test]
    fn syn_mode_rejects_asynchronous_data() {
        let inst = crate::series::Instance::new(
            "a",
            vec![0.5],
            arr2(&[[1.0], [0.0]]),
            arr2(&[[1.0], [0.0]]),
        )
        .unwrap();
        let data = Dataset::new(2, 1.0, vec![inst]).unwrap();
        let cfg = RunConfig::new(CellKind::GruOde, JointKind::Cnf, Regularity::Syn);
        assert!(cfg.validate_for(&data).is_err());
        let cfg = RunConfig::new(CellKind::GruOde, JointKind::Cnf, Regularity::Asyn);
        assert!(cfg.validate_for(&data).is_ok());
    }

    #[test]
    fn nonsense_values_are_rejected() {
        let base = RunConfig::new(CellKind::OdeRnn, JointKind::Cnf, Regularity::Syn);
        for patch in [
            |c: &mut RunConfig| c.hidden = 0,
            |c: &mut RunConfig| c.learning_rate = 0.0,
            |c: &mut RunConfig| c.batch_size = 0,
            |c: &mut RunConfig| c.epochs = 0,
            |c: &mut RunConfig| c.flow_steps = 0,
            |c: &mut RunConfig| c.micro_step = -0.1,
            |c: &mut RunConfig| c.grad_clip = 0.0,
            |c: &mut RunConfig| c.patience = 0,
            |c: &mut RunConfig| c.n_samples = 1,
            |c: &mut RunConfig| c.cs_levels = vec![0.5, 1.0],
        ] {
            let mut cfg = base.clone();
            patch(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = RunConfig::new(CellKind::GruD, JointKind::Gaussian, Regularity::Asyn);
        cfg.seed = 7;
        cfg.hidden = 32;
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
