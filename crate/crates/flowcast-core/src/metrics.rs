//! Proper scoring of forecast sample ensembles.
//!
//! All scores work on the empirical step CDF of a finite sample set, with
//! ties between samples and the observation counted as `<=` (right-continuous
//! convention F(z) = #{samples <= z} / n). CRPS is evaluated in closed form
//! through the energy identity `mean|S - x| - mean|S - S'| / 2` over all
//! ordered sample pairs; for a multivariate summary, observed variables are
//! summed per sample before scoring. Calibration is the mean squared gap
//! between nominal quantile levels and the empirical frequency of predictive
//! CDF values falling at or below them.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least one sample")]
    Empty,
    #[error("ensembles disagree on dimension: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("mask must be 0/1 and match the data dimension")]
    BadMask,
    #[error("no observed variables to score")]
    NoObserved,
    #[error("quantile levels must be nonempty and lie strictly inside (0, 1)")]
    BadLevels,
}

/// Samples, observability, and ground truth at one (instance, time) point.
#[derive(Clone, Debug)]
pub struct ForecastEnsemble {
    /// [n_samples, D], one joint draw per row.
    pub samples: Array2<f64>,
    /// 1.0 where the variable was actually observed at this time.
    pub mask: Array1<f64>,
    pub observation: Array1<f64>,
}

impl ForecastEnsemble {
    pub fn new(
        samples: Array2<f64>,
        mask: Array1<f64>,
        observation: Array1<f64>,
    ) -> Result<Self, MetricError> {
        if samples.nrows() == 0 {
            return Err(MetricError::Empty);
        }
        let d = samples.ncols();
        if mask.len() != d || observation.len() != d {
            return Err(MetricError::DimMismatch(mask.len(), d));
        }
        if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(MetricError::BadMask);
        }
        Ok(ForecastEnsemble { samples, mask, observation })
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn observed_dims(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i)
    }
}

/// Exact CRPS of an empirical forecast CDF against a scalar observation.
pub fn crps_empirical(samples: &[f64], x: f64) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = samples.len() as f64;
    let abs_err: f64 = samples.iter().map(|s| (s - x).abs()).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    // Sum of |s_i - s_j| over ordered pairs: each sorted s_k sits above k
    // entries and below n-1-k, so unordered pairs sum to sum_k s_k(2k-n+1).
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, s)| s * (2.0 * k as f64 - n + 1.0))
        .sum();
    Ok(abs_err - pair_sum / (n * n))
}

/// Fraction of samples at or below `x`.
pub fn empirical_cdf_at(samples: &[f64], x: f64) -> f64 {
    samples.iter().filter(|s| **s <= x).count() as f64 / samples.len() as f64
}

/// Mean CRPS over every observed (time, variable) pair.
pub fn crps_mean(ensembles: &[ForecastEnsemble]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in ensembles {
        for d in e.observed_dims() {
            let col = e.samples.column(d).to_vec();
            total += crps_empirical(&col, e.observation[d])?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NoObserved);
    }
    Ok(total / count as f64)
}

/// CRPS of the observed-variable sum, averaged over time points. Points with
/// nothing observed are excluded.
pub fn crps_sum(ensembles: &[ForecastEnsemble]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in ensembles {
        let dims: Vec<usize> = e.observed_dims().collect();
        if dims.is_empty() {
            continue;
        }
        let sums: Vec<f64> = e
            .samples
            .rows()
            .into_iter()
            .map(|row| dims.iter().map(|d| row[*d]).sum())
            .collect();
        let obs: f64 = dims.iter().map(|d| e.observation[*d]).sum();
        total += crps_empirical(&sums, obs)?;
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoObserved);
    }
    Ok(total / count as f64)
}

/// Decile levels 0.1..0.9, the default calibration grid.
pub fn decile_levels() -> Vec<f64> {
    (1..10).map(|k| k as f64 / 10.0).collect()
}

/// Calibration result; `excluded_dims` lists variables that were never
/// observed and therefore could not be scored.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub score: f64,
    pub excluded_dims: Vec<usize>,
}

/// Mean squared gap between nominal levels p_j and the empirical frequency
/// of predictive CDF values F_t^d(x_t^d) at or below p_j, averaged over
/// levels and scoreable variables.
pub fn confidence_score(
    ensembles: &[ForecastEnsemble],
    levels: &[f64],
) -> Result<CalibrationReport, MetricError> {
    if levels.is_empty() || levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(MetricError::BadLevels);
    }
    let d = ensembles.first().ok_or(MetricError::Empty)?.dim();
    let mut cdf_values: Vec<Vec<f64>> = vec![Vec::new(); d];
    for e in ensembles {
        if e.dim() != d {
            return Err(MetricError::DimMismatch(e.dim(), d));
        }
        for dd in e.observed_dims() {
            let col = e.samples.column(dd).to_vec();
            cdf_values[dd].push(empirical_cdf_at(&col, e.observation[dd]));
        }
    }
    let mut excluded_dims = Vec::new();
    let mut total = 0.0;
    let mut kept = 0usize;
    for (dd, values) in cdf_values.iter().enumerate() {
        if values.is_empty() {
            excluded_dims.push(dd);
            continue;
        }
        kept += 1;
        let n = values.len() as f64;
        for p in levels {
            let p_hat = values.iter().filter(|f| **f <= *p).count() as f64 / n;
            total += (p - p_hat) * (p - p_hat);
        }
    }
    if kept == 0 {
        return Err(MetricError::NoObserved);
    }
    Ok(CalibrationReport { score: total / (levels.len() * kept) as f64, excluded_dims })
}

/// Pearson correlation between the columns of an [n, D] sample matrix.
/// Degenerate (constant) columns correlate 0 with everything but themselves.
pub fn correlation_matrix(samples: &Array2<f64>) -> Array2<f64> {
    let (n, d) = samples.dim();
    let mut out = Array2::eye(d);
    if n < 2 {
        return out;
    }
    let means: Vec<f64> = (0..d).map(|j| samples.column(j).mean().unwrap()).collect();
    let stds: Vec<f64> = (0..d)
        .map(|j| {
            samples
                .column(j)
                .iter()
                .map(|v| (v - means[j]) * (v - means[j]))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    for i in 0..d {
        for j in i + 1..d {
            let cov: f64 = samples
                .rows()
                .into_iter()
                .map(|row| (row[i] - means[i]) * (row[j] - means[j]))
                .sum();
            let denom = stds[i] * stds[j];
            let r = if denom > 1e-300 { cov / denom } else { 0.0 };
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    out
}
