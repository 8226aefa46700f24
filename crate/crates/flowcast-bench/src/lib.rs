//! Shared fixtures for the criterion benches: a small trained-shape model and
//! a synthetic instance, sized so one iteration stays in the microsecond-to-
//! millisecond range where criterion's statistics are meaningful.

use flowcast_core::cells::CellKind;
use flowcast_core::config::{JointKind, RunConfig};
use flowcast_core::series::{Instance, Regularity};
use flowcast_core::Model;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DATA_DIM: usize = 5;
pub const EVENTS: usize = 16;

pub fn bench_config(joint: JointKind) -> RunConfig {
    let mut cfg = RunConfig::new(CellKind::GruOde, joint, Regularity::Syn);
    cfg.hidden = 32;
    cfg.flow_steps = 8;
    cfg
}

pub fn bench_model(joint: JointKind) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Model::init(&bench_config(joint), DATA_DIM, &mut rng).expect("bench model")
}

pub fn bench_instance() -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let times: Vec<f64> = (0..EVENTS).map(|k| (k as f64 + 1.0) / EVENTS as f64).collect();
    let values = Array2::from_shape_fn((DATA_DIM, EVENTS), |_| rng.random_range(-1.5..1.5));
    let mask = Array2::ones((DATA_DIM, EVENTS));
    Instance::new("bench".to_string(), times, values, mask).expect("bench instance")
}
