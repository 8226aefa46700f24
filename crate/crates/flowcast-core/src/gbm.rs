//! Synthetic correlated geometric Brownian motion, the benchmark generator.
//!
//! Variables are grouped into blocks; each block shares one drift and one
//! volatility draw per instance, trending down in the first block and up in
//! the second by default. Instantaneous correlation is block-diagonal and
//! fades in over time as R(t) = sin(pi t / 2) * B with unit diagonal, so paths
//! start independent and end fully block-correlated at the horizon.
//!
//! Paths are sampled in log space, where the Euler-Maruyama step is the exact
//! transition of the process; discretization only pins correlation to the step
//! midpoint. Instance i draws from stream i of a counter-based generator, so
//! any prefix of instances is reproducible regardless of batch size.

use crate::series::{DataError, Dataset, Instance};
use ndarray::{Array1, Array2};
use rand::distr::Uniform;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("config: {0}")]
    Config(String),
    #[error("correlation matrix at t={t} is not positive definite")]
    NotPositiveDefinite { t: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Block-diagonal target correlation `B` and the fade-in schedule
/// `R(t) = sin(pi t / 2) * B` (diagonal restored to 1).
#[derive(Clone, Debug)]
pub struct CorrelationSchedule {
    target: Array2<f64>,
}

impl CorrelationSchedule {
    pub fn new(block_sizes: &[usize], block_rho: &[f64]) -> Result<Self, GbmError> {
        if block_sizes.is_empty() || block_sizes.len() != block_rho.len() {
            return Err(GbmError::Config(
                "block sizes and correlations must be non-empty and match".into(),
            ));
        }
        let dim: usize = block_sizes.iter().sum();
        let mut target = Array2::eye(dim);
        let mut offset = 0;
        for (size, rho) in block_sizes.iter().zip(block_rho) {
            for a in offset..offset + size {
                for b in offset..offset + size {
                    if a != b {
                        target[(a, b)] = *rho;
                    }
                }
            }
            offset += size;
        }
        Ok(CorrelationSchedule { target })
    }

    pub fn dim(&self) -> usize {
        self.target.nrows()
    }

    /// Full-strength block correlation reached at t = 1.
    pub fn target(&self) -> &Array2<f64> {
        &self.target
    }

    pub fn at(&self, t: f64) -> Array2<f64> {
        let s = (std::f64::consts::FRAC_PI_2 * t).sin();
        let mut r = &self.target * s;
        for d in 0..self.dim() {
            r[(d, d)] = 1.0;
        }
        r
    }

    /// Lower Cholesky factor of R(t), or an error naming the failing time.
    pub fn cholesky_at(&self, t: f64) -> Result<Array2<f64>, GbmError> {
        cholesky(&self.at(t)).ok_or(GbmError::NotPositiveDefinite { t })
    }
}

/// Plain lower-triangular Cholesky; None when a pivot is not positive.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GbmConfig {
    pub n_instances: usize,
    pub grid_points: usize,
    pub horizon: f64,
    pub x0: f64,
    /// Variables per block; drifts and volatilities are drawn once per block.
    pub block_sizes: Vec<usize>,
    /// Within-block instantaneous correlation at full strength.
    pub block_rho: Vec<f64>,
    /// Per-block uniform drift ranges.
    pub drift_ranges: Vec<(f64, f64)>,
    /// Shared uniform volatility range.
    pub vol_range: (f64, f64),
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            n_instances: 1000,
            grid_points: 101,
            horizon: 1.0,
            x0: 1.0,
            block_sizes: vec![2, 3],
            block_rho: vec![0.8, 0.6],
            drift_ranges: vec![(-0.2, -0.05), (0.05, 0.2)],
            vol_range: (0.15, 0.3),
            seed: 0,
        }
    }
}

/// Ground-truth per-variable parameters drawn for one instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GbmDraw {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GbmConfig {
    fn validate(&self) -> Result<(), GbmError> {
        if self.n_instances == 0 || self.grid_points < 2 {
            return Err(GbmError::Config("need instances and at least two grid points".into()));
        }
        if !(self.horizon > 0.0) || !(self.x0 > 0.0) {
            return Err(GbmError::Config("horizon and x0 must be positive".into()));
        }
        if self.drift_ranges.len() != self.block_sizes.len() {
            return Err(GbmError::Config("one drift range per block required".into()));
        }
        for &(lo, hi) in self.drift_ranges.iter().chain(std::iter::once(&self.vol_range)) {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(GbmError::Config(format!("bad range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.sample(Uniform::new(lo, hi).expect("validated range"))
    }
}

/// Simulate fully observed paths on the shared grid.
///
/// Returns the dataset plus each instance's true drift and volatility.
pub fn simulate(config: &GbmConfig) -> Result<(Dataset, Vec<GbmDraw>), GbmError> {
    config.validate()?;
    let schedule = CorrelationSchedule::new(&config.block_sizes, &config.block_rho)?;
    let dim = schedule.dim();
    let g = config.grid_points;
    let dt = config.horizon / (g - 1) as f64;
    let times: Vec<f64> = (0..g).map(|k| config.horizon * k as f64 / (g - 1) as f64).collect();

    // One factorization per step midpoint, shared by every instance.
    let chols: Vec<Array2<f64>> = (0..g - 1)
        .map(|k| schedule.cholesky_at(0.5 * (times[k] + times[k + 1])))
        .collect::<Result<_, _>>()?;

    let sqrt_dt = dt.sqrt();
    let mut instances = Vec::with_capacity(config.n_instances);
    let mut draws = Vec::with_capacity(config.n_instances);
    for i in 0..config.n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);

        let mut mu = Vec::with_capacity(dim);
        let mut sigma = Vec::with_capacity(dim);
        for (b, &size) in config.block_sizes.iter().enumerate() {
            let m = draw_range(&mut rng, config.drift_ranges[b]);
            let s = draw_range(&mut rng, config.vol_range);
            for _ in 0..size {
                mu.push(m);
                sigma.push(s);
            }
        }

        let mut log_x = vec![config.x0.ln(); dim];
        let mut values = Array2::zeros((dim, g));
        for d in 0..dim {
            values[(d, 0)] = config.x0;
        }
        for k in 0..g - 1 {
            let eps: Array1<f64> =
                Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let w = chols[k].dot(&eps);
            for d in 0..dim {
                log_x[d] += (mu[d] - 0.5 * sigma[d] * sigma[d]) * dt + sigma[d] * sqrt_dt * w[d];
                values[(d, k + 1)] = log_x[d].exp();
            }
        }

        let mask = Array2::ones((dim, g));
        instances.push(Instance::new(format!("gbm-{i}"), times.clone(), values, mask)?);
        draws.push(GbmDraw { mu, sigma });
    }
    Ok((Dataset::new(dim, config.horizon, instances)?, draws))
}

fn keep_count(total: usize, keep: f64) -> usize {
    ((total as f64 * keep).round() as usize).clamp(1, total)
}

/// Keep round(K * keep) whole event columns per instance; every kept event
/// stays fully observed, so the result remains synchronous.
pub fn subsample_syn(dataset: &Dataset, keep: f64, seed: u64) -> Result<Dataset, GbmError> {
    check_keep(keep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(dataset.instances.len());
    for inst in &dataset.instances {
        let k = inst.n_events();
        let mut cols: Vec<usize> = (0..k).collect();
        cols.shuffle(&mut rng);
        cols.truncate(keep_count(k, keep));
        cols.sort_unstable();
        instances.push(select_columns(inst, &cols)?);
    }
    Ok(Dataset::new(dataset.dim, dataset.horizon, instances)?)
}

/// Keep round(K * keep) entries per variable independently, then drop events
/// at which nothing remains observed. The result is asynchronous with the
/// per-variable observation budget held exactly.
pub fn subsample_asyn(dataset: &Dataset, keep: f64, seed: u64) -> Result<Dataset, GbmError> {
    check_keep(keep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(dataset.instances.len());
    for inst in &dataset.instances {
        let k = inst.n_events();
        let dim = inst.dim();
        let mut mask = Array2::zeros((dim, k));
        for d in 0..dim {
            let mut cols: Vec<usize> = (0..k).collect();
            cols.shuffle(&mut rng);
            for &c in cols.iter().take(keep_count(k, keep)) {
                mask[(d, c)] = inst.mask[(d, c)];
            }
        }
        let cols: Vec<usize> =
            (0..k).filter(|&c| (0..dim).any(|d| mask[(d, c)] == 1.0)).collect();
        let mut values = Array2::zeros((dim, cols.len()));
        let mut new_mask = Array2::zeros((dim, cols.len()));
        let times: Vec<f64> = cols.iter().map(|&c| inst.times[c]).collect();
        for (new_c, &c) in cols.iter().enumerate() {
            for d in 0..dim {
                if mask[(d, c)] == 1.0 {
                    values[(d, new_c)] = inst.values[(d, c)];
                    new_mask[(d, new_c)] = 1.0;
                }
            }
        }
        instances.push(Instance::new(inst.id.clone(), times, values, new_mask)?);
    }
    Ok(Dataset::new(dataset.dim, dataset.horizon, instances)?)
}

fn check_keep(keep: f64) -> Result<(), GbmError> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(GbmError::Config(format!("keep fraction {keep} must lie in (0, 1]")))
    }
}

fn select_columns(inst: &Instance, cols: &[usize]) -> Result<Instance, DataError> {
    let dim = inst.dim();
    let mut values = Array2::zeros((dim, cols.len()));
    let mut mask = Array2::zeros((dim, cols.len()));
    for (new_c, &c) in cols.iter().enumerate() {
        for d in 0..dim {
            values[(d, new_c)] = inst.values[(d, c)];
            mask[(d, new_c)] = inst.mask[(d, c)];
        }
    }
    let times = cols.iter().map(|&c| inst.times[c]).collect();
    Instance::new(inst.id.clone(), times, values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Regularity;

    fn small_config() -> GbmConfig {
        GbmConfig { n_instances: 8, grid_points: 21, ..GbmConfig::default() }
    }

    #[test]
    fn zero_volatility_path_is_exact_exponential() {
        let config = GbmConfig {
            n_instances: 2,
            grid_points: 11,
            drift_ranges: vec![(-0.1, -0.1), (0.2, 0.2)],
            vol_range: (0.0, 0.0),
            ..GbmConfig::default()
        };
        let (ds, draws) = simulate(&config).unwrap();
        for (inst, draw) in ds.instances.iter().zip(&draws) {
            for (k, &t) in inst.times.iter().enumerate() {
                for d in 0..ds.dim {
                    let expected = config.x0 * (draw.mu[d] * t).exp();
                    assert!(
                        (inst.values[(d, k)] - expected).abs() < 1e-12,
                        "dim {d} t {t}: {} vs {expected}",
                        inst.values[(d, k)]
                    );
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_in_seed() {
        let config = small_config();
        let (a, _) = simulate(&config).unwrap();
        let (b, _) = simulate(&config).unwrap();
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x, y);
        }
        let other = GbmConfig { seed: 1, ..small_config() };
        let (c, _) = simulate(&other).unwrap();
        assert_ne!(a.instances[0].values, c.instances[0].values);
    }

    #[test]
    fn instance_prefix_is_stable_under_batch_size() {
        let (small, _) = simulate(&GbmConfig { n_instances: 3, ..small_config() }).unwrap();
        let (large, _) = simulate(&GbmConfig { n_instances: 8, ..small_config() }).unwrap();
        for i in 0..3 {
            assert_eq!(small.instances[i], large.instances[i]);
        }
    }

    #[test]
    fn grid_endpoints_and_observability() {
        let (ds, draws) = simulate(&small_config()).unwrap();
        assert_eq!(ds.dim, 5);
        assert_eq!(ds.regularity(), Regularity::Syn);
        assert_eq!(draws.len(), ds.instances.len());
        for inst in &ds.instances {
            assert_eq!(inst.n_events(), 21);
            assert_eq!(inst.times[0], 0.0);
            assert_eq!(*inst.times.last().unwrap(), 1.0);
            assert!(inst.values.iter().all(|v| *v > 0.0));
            for d in 0..ds.dim {
                assert_eq!(inst.values[(d, 0)], 1.0);
            }
        }
        // Blocks share their draw; drift signs follow the block ranges.
        let draw = &draws[0];
        assert_eq!(draw.mu[0], draw.mu[1]);
        assert_eq!(draw.mu[2], draw.mu[3]);
        assert_eq!(draw.mu[3], draw.mu[4]);
        assert!(draw.mu[0] < 0.0 && draw.mu[2] > 0.0);
        assert!(draw.sigma.iter().all(|s| (0.15..=0.3).contains(s)));
    }

    #[test]
    fn invalid_block_correlation_reports_failing_time() {
        // rho = -0.9 on a size-3 block is not a valid correlation matrix once
        // the schedule fades in far enough.
        let config = GbmConfig {
            n_instances: 1,
            block_rho: vec![0.8, -0.9],
            ..GbmConfig::default()
        };
        let err = simulate(&config).unwrap_err();
        match err {
            GbmError::NotPositiveDefinite { t } => assert!((0.0..=1.0).contains(&t), "t={t}"),
            other => panic!("expected correlation failure, got {other}"),
        }
    }

    #[test]
    fn late_log_increments_recover_block_correlation() {
        // Near t = 1 the schedule has fully faded in, so cross-instance
        // correlation of the last log increment should match the target.
        let config = GbmConfig { n_instances: 4000, grid_points: 101, ..GbmConfig::default() };
        let (ds, draws) = simulate(&config).unwrap();
        let schedule =
            CorrelationSchedule::new(&config.block_sizes, &config.block_rho).unwrap();
        let n = ds.instances.len();
        let dim = ds.dim;
        let mut incr = Array2::zeros((n, dim));
        for (i, inst) in ds.instances.iter().enumerate() {
            let k = inst.n_events() - 1;
            for d in 0..dim {
                // Remove the per-instance drift so only the noise remains.
                let raw = inst.values[(d, k)].ln() - inst.values[(d, k - 1)].ln();
                let dt = inst.times[k] - inst.times[k - 1];
                let mu = draws[i].mu[d];
                let sg = draws[i].sigma[d];
                incr[(i, d)] = (raw - (mu - 0.5 * sg * sg) * dt) / sg;
            }
        }
        let mean: Vec<f64> = (0..dim).map(|d| incr.column(d).mean().unwrap()).collect();
        let sd: Vec<f64> = (0..dim)
            .map(|d| incr.column(d).mapv(|v| (v - mean[d]).powi(2)).mean().unwrap().sqrt())
            .collect();
        for a in 0..dim {
            for b in 0..dim {
                let mut c = 0.0;
                for i in 0..n {
                    c += (incr[(i, a)] - mean[a]) * (incr[(i, b)] - mean[b]);
                }
                c /= n as f64 * sd[a] * sd[b];
                let target = schedule.at(0.995)[(a, b)];
                assert!(
                    (c - target).abs() < 0.05,
                    "corr({a},{b}) = {c:.3}, expected {target:.3}"
                );
            }
        }
    }

    #[test]
    fn schedule_interpolates_between_identity_and_target() {
        let schedule = CorrelationSchedule::new(&[2, 3], &[0.8, 0.6]).unwrap();
        assert_eq!(schedule.at(0.0), Array2::<f64>::eye(5));
        let full = schedule.at(1.0);
        assert_eq!(full, *schedule.target());
        assert_eq!(full[(0, 1)], 0.8);
        assert_eq!(full[(2, 4)], 0.6);
        assert_eq!(full[(0, 2)], 0.0);
        let half = schedule.at(0.5);
        let s = (std::f64::consts::FRAC_PI_2 * 0.5).sin();
        assert!((half[(0, 1)] - 0.8 * s).abs() < 1e-15);
        assert_eq!(half[(1, 1)], 1.0);
    }

    #[test]
    fn syn_subsample_keeps_exact_count_and_full_columns() {
        let (ds, _) = simulate(&small_config()).unwrap();
        let sub = subsample_syn(&ds, 0.5, 7).unwrap();
        assert_eq!(sub.regularity(), Regularity::Syn);
        for (orig, inst) in ds.instances.iter().zip(&sub.instances) {
            assert_eq!(inst.n_events(), (orig.n_events() as f64 * 0.5).round() as usize);
            assert!(inst.times.windows(2).all(|w| w[0] < w[1]));
            assert!(inst.mask.iter().all(|m| *m == 1.0));
        }
        // Deterministic.
        let again = subsample_syn(&ds, 0.5, 7).unwrap();
        assert_eq!(sub.instances, again.instances);
    }

    #[test]
    fn asyn_subsample_budget_and_joint_observation_rate() {
        let (ds, _) = simulate(&GbmConfig { n_instances: 300, ..GbmConfig::default() }).unwrap();
        let keep = 0.5;
        let sub = subsample_asyn(&ds, keep, 11).unwrap();
        assert_eq!(sub.regularity(), Regularity::Asyn);

        let per_row = (101.0_f64 * keep).round();
        let mut all_ones_cols = 0usize;
        let mut original_cols = 0usize;
        for (orig, inst) in ds.instances.iter().zip(&sub.instances) {
            for d in 0..sub.dim {
                let count: f64 = inst.mask.row(d).sum();
                assert_eq!(count, per_row, "per-variable budget must hold exactly");
            }
            original_cols += orig.n_events();
            all_ones_cols +=
                (0..inst.n_events()).filter(|&c| inst.mask.column(c).sum() == 5.0).count();
        }
        // Rows choose independently, so a column survives in full with
        // probability (round(K*keep)/K)^D.
        let expected = (per_row / 101.0).powi(5);
        let got = all_ones_cols as f64 / original_cols as f64;
        assert!((got - expected).abs() < 0.01, "got {got:.4}, expected {expected:.4}");
    }

    #[test]
    fn moments_match_closed_form() {
        // In log space the step is the exact transition, so sample moments
        // must match the closed form up to Monte Carlo error.
        let config = GbmConfig {
            n_instances: 20_000,
            grid_points: 11,
            block_sizes: vec![5],
            block_rho: vec![0.0],
            drift_ranges: vec![(0.1, 0.1)],
            vol_range: (0.2, 0.2),
            ..GbmConfig::default()
        };
        let (ds, _) = simulate(&config).unwrap();
        let (mu, sigma, t) = (0.1_f64, 0.2_f64, 1.0_f64);
        let expected_mean = (mu * t).exp();
        let expected_var = (2.0 * mu * t).exp() * ((sigma * sigma * t).exp() - 1.0);

        let n = (ds.instances.len() * ds.dim) as f64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for inst in &ds.instances {
            for d in 0..ds.dim {
                let v = inst.values[(d, 10)];
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        let se_mean = expected_var.sqrt() / n.sqrt();
        assert!((mean - expected_mean).abs() < 3.0 * se_mean, "mean {mean} vs {expected_mean}");
        // Variance of the sample variance for lognormal tails is wide; allow 10%.
        assert!(
            (var - expected_var).abs() / expected_var < 0.1,
            "var {var} vs {expected_var}"
        );
    }
}
