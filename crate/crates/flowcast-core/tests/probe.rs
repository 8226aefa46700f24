//! Scratch probe (not part of the suite): asyn batch-size/epoch scan.

use flowcast_core::cells::CellKind;
use flowcast_core::config::{JointKind, RunConfig};
use flowcast_core::eval;
use flowcast_core::gbm::{self, GbmConfig};
use flowcast_core::series::Regularity;
use flowcast_core::train;
use std::time::Instant;

fn desk_config(
    joint: JointKind,
    mode: Regularity,
    seed: u64,
    epochs: usize,
    batch: usize,
) -> RunConfig {
    let mut cfg = RunConfig::new(CellKind::GruOde, joint, mode);
    cfg.hidden = 32;
    cfg.flow_steps = 8;
    cfg.epochs = epochs;
    cfg.patience = epochs;
    cfg.seed = seed;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = batch;
    cfg
}

#[test]
fn probe_asyn_batch() {
    let (full, _) = gbm::simulate(&GbmConfig { n_instances: 1000, ..GbmConfig::default() }).unwrap();
    let asyn = gbm::subsample_asyn(&full, 0.5, 0).unwrap();
    drop(full);

    for (batch, epochs) in [(4usize, 28usize)] {
        for joint in [JointKind::Cnf, JointKind::Gaussian] {
            let t0 = Instant::now();
            let cfg = desk_config(joint, Regularity::Asyn, 0, epochs, batch);
            let out = train::train(&cfg, &asyn, None).unwrap();
            let best = out
                .history
                .iter()
                .min_by(|a, b| a.valid_loss.partial_cmp(&b.valid_loss).unwrap())
                .unwrap();
            let idx = out.dataset.split_indices().unwrap();
            let rep = eval::evaluate(&out.model, &out.dataset, &idx.test, 100, 0, &cfg.cs_levels)
                .unwrap();
            println!(
                "asyn-{joint:?} b{batch} e{epochs}: {:?} | best valid {:.4} @ep{} | crps {:.4} crps_sum {:.4} cs {:.5}",
                t0.elapsed(),
                best.valid_loss,
                best.epoch,
                rep.crps,
                rep.crps_sum,
                rep.cs
            );
        }
    }
}
