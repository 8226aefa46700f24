//! Seeded training loop: per-instance tapes, batch-averaged gradients in a
//! fixed order, early stopping on validation loss.
//!
//! All randomness is derived from the config seed through separate ChaCha
//! streams (initialization vs per-epoch shuffles), and every reduction runs
//! serially in instance order, so a config and dataset pin the entire run.

use crate::checkpoint::{Checkpoint, CheckpointError, RngRecord};
use crate::config::{ConfigError, RunConfig};
use crate::model::{empirical_means, Model, ModelError};
use crate::optim::{Adam, OptimError};
use crate::series::{DataError, Dataset};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// ChaCha stream offset for the per-epoch shuffle (stream 0 initializes
/// parameters).
const SHUFFLE_STREAM_BASE: u64 = 100;

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(Box<ModelError>),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("validation loss diverged (non-finite) at epoch {epoch}")]
    DivergedValidation { epoch: usize },
    #[error("training split is empty")]
    NoTraining,
    #[error("validation split is empty")]
    NoValidation,
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(Box::new(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Model with the best-validation parameters restored.
    pub model: Model,
    /// The split, standardized copy of the data the run actually used.
    pub dataset: Dataset,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

/// Split (if unsplit) and standardize (if requested) a working copy.
pub fn prepare_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<Dataset, TrainError> {
    let mut data = dataset.clone();
    if data.split.is_none() {
        data.assign_split(DEFAULT_SPLIT, cfg.seed)?;
    }
    let idx = data.split_indices()?;
    if idx.train.is_empty() {
        return Err(TrainError::NoTraining);
    }
    if idx.valid.is_empty() {
        return Err(TrainError::NoValidation);
    }
    if cfg.standardize && data.standardization.is_none() {
        let st = data.fit_standardization(&idx.train);
        data.standardize(st);
    }
    Ok(data)
}

/// Mean per-instance loss without touching gradients.
pub fn mean_loss(model: &Model, data: &Dataset, indices: &[usize]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for &i in indices {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let loss = model.instance_loss(&mut tape, &bound, &data.instances[i])?;
        total += tape.scalar_value(loss).expect("loss is scalar");
    }
    Ok(total / indices.len() as f64)
}

pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate_for(dataset)?;
    let data = prepare_dataset(cfg, dataset)?;
    let idx = data.split_indices()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg, data.dim, &mut init_rng)?;
    model.set_empirical_means(&empirical_means(&data, &idx.train))?;
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.grad_clip);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamSet)> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut epochs_completed = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order = idx.train.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut train_total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_acc: Vec<Tensor> = (0..model.params().len())
                .map(|i| Tensor::zeros(model.params().shape_at(i)))
                .collect();
            for &i in batch {
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let loss = model.instance_loss(&mut tape, &bound, &data.instances[i])?;
                let lv = tape.scalar_value(loss).expect("loss is scalar");
                if !lv.is_finite() {
                    return Err(TrainError::Diverged { epoch, batch: b });
                }
                train_total += lv;
                let grads = tape.backward(loss).map_err(ModelError::from)?;
                for (j, v) in bound.vars().iter().enumerate() {
                    if model.params().trainable_at(j) {
                        grad_acc[j].accumulate(&grads.wrt_or_zero(*v, tape.shape(*v)));
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                *g = g.map(|x| x * inv);
            }
            adam.step(model.params_mut(), &grad_acc)?;
        }

        let train_loss = train_total / idx.train.len() as f64;
        let valid_loss = mean_loss(&model, &data, &idx.valid)?;
        if !valid_loss.is_finite() {
            return Err(TrainError::DivergedValidation { epoch });
        }
        history.push(EpochStats { epoch, train_loss, valid_loss });
        epochs_completed = epoch;

        let improved = best.as_ref().is_none_or(|(b, _, _)| valid_loss < *b);
        if improved {
            best = Some((valid_loss, epoch, model.params().clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_loss, best_epoch, best_params) = best.expect("at least one epoch runs");
    *model.params_mut() = best_params;
    let checkpoint = Checkpoint::from_model(
        &model,
        cfg,
        best_epoch,
        best_loss,
        RngRecord { seed: cfg.seed, epochs_completed },
    );

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
        let mut csv = String::from("epoch,train_loss,valid_loss\n");
        for s in &history {
            writeln!(csv, "{},{},{}", s.epoch, s.train_loss, s.valid_loss)
                .expect("string writes cannot fail");
        }
        fs::write(dir.join("loss.csv"), csv)?;
    }

    Ok(TrainOutcome { checkpoint, model, dataset: data, history, stopped_early })
}
