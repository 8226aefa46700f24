//! Irregular multivariate time-series containers and their on-disk formats.
//!
//! An instance is a strictly increasing event grid with a D x K value matrix
//! and a 0/1 observation mask. Values are stored as 0 wherever the mask is 0;
//! the loader enforces that convention and the model layers rely on it.
//!
//! Disk layout: one CSV (`instance_id,time,x_1..x_D,m_1..m_D`, one row per
//! event) plus a JSON manifest carrying dimension, horizon, optional
//! standardization constants, and the split assignment. Floats are written in
//! shortest round-trip form, so save/load reproduces every value bit for bit.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("csv row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("csv header: {0}")]
    Header(String),
    #[error("instance {id:?}: {msg}")]
    Instance { id: String, msg: String },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("{0}")]
    Invalid(String),
}

/// Whether every variable is observed at every event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularity {
    /// Shared event grid, no missing entries.
    Syn,
    /// At least one entry unobserved.
    Asyn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    /// Strictly increasing event times, length K.
    pub times: Vec<f64>,
    /// D x K values; zero wherever `mask` is zero.
    pub values: Array2<f64>,
    /// D x K observation indicators in {0, 1}; every column has at least one 1.
    pub mask: Array2<f64>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Array2<f64>,
        mask: Array2<f64>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let fail = |msg: String| DataError::Instance { id: id.clone(), msg };
        let k = times.len();
        if k == 0 {
            return Err(fail("no events".into()));
        }
        if values.dim() != mask.dim() || values.ncols() != k {
            return Err(fail(format!(
                "shape mismatch: {} times, values {:?}, mask {:?}",
                k,
                values.dim(),
                mask.dim()
            )));
        }
        for (i, t) in times.iter().enumerate() {
            if !t.is_finite() {
                return Err(fail(format!("non-finite time at event {i}")));
            }
            if i > 0 && times[i - 1] >= *t {
                return Err(fail(format!("times must be strictly increasing at event {i}")));
            }
        }
        for col in 0..k {
            let mut any = false;
            for row in 0..mask.nrows() {
                let m = mask[(row, col)];
                if m != 0.0 && m != 1.0 {
                    return Err(fail(format!("mask entry ({row}, {col}) not in {{0,1}}")));
                }
                if m == 1.0 {
                    any = true;
                    if !values[(row, col)].is_finite() {
                        return Err(fail(format!("non-finite observed value at ({row}, {col})")));
                    }
                } else if values[(row, col)] != 0.0 {
                    return Err(fail(format!(
                        "unobserved entry ({row}, {col}) must be stored as 0"
                    )));
                }
            }
            if !any {
                return Err(fail(format!("event column {col} has no observed variable")));
            }
        }
        Ok(Instance { id, times, values, mask })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_events(&self) -> usize {
        self.times.len()
    }

    pub fn regularity(&self) -> Regularity {
        if self.mask.iter().all(|&m| m == 1.0) {
            Regularity::Syn
        } else {
            Regularity::Asyn
        }
    }

    pub fn value_column(&self, k: usize) -> Array1<f64> {
        self.values.column(k).to_owned()
    }

    pub fn mask_column(&self, k: usize) -> Array1<f64> {
        self.mask.column(k).to_owned()
    }
}

/// Per-variable affine standardization constants, fitted on observed train
/// entries and stored so samples can be mapped back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Index view of a stored split.
#[derive(Clone, Debug)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dim: usize,
    pub horizon: f64,
    pub instances: Vec<Instance>,
    pub standardization: Option<Standardization>,
    pub split: Option<SplitAssignment>,
}

/// Counts of the loader's silent repairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadSummary {
    /// Rows merged into an earlier row with the same (instance, time).
    pub merged_rows: usize,
    /// Unobserved entries whose stored value was forced to 0.
    pub zeroed_entries: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dim: usize,
    horizon: f64,
    n_instances: usize,
    #[serde(default)]
    standardization: Option<Standardization>,
    #[serde(default)]
    split: Option<SplitAssignment>,
}

const MANIFEST_SCHEMA: u32 = 1;

impl Dataset {
    pub fn new(dim: usize, horizon: f64, instances: Vec<Instance>) -> Result<Self, DataError> {
        if dim == 0 || !horizon.is_finite() || horizon <= 0.0 {
            return Err(DataError::Invalid(format!(
                "dimension {dim} and horizon {horizon} must be positive"
            )));
        }
        for inst in &instances {
            if inst.dim() != dim {
                return Err(DataError::Instance {
                    id: inst.id.clone(),
                    msg: format!("dimension {} does not match dataset dimension {dim}", inst.dim()),
                });
            }
            if let Some(&last) = inst.times.last() {
                if last > horizon + 1e-12 || inst.times[0] < 0.0 {
                    return Err(DataError::Instance {
                        id: inst.id.clone(),
                        msg: format!("event times must lie in [0, {horizon}]"),
                    });
                }
            }
        }
        Ok(Dataset { dim, horizon, instances, standardization: None, split: None })
    }

    pub fn regularity(&self) -> Regularity {
        if self.instances.iter().all(|i| i.regularity() == Regularity::Syn) {
            Regularity::Syn
        } else {
            Regularity::Asyn
        }
    }

    /// Shuffle instances with `seed` and assign round(f*n) to train and valid,
    /// remainder to test.
    pub fn assign_split(&mut self, fractions: [f64; 3], seed: u64) -> Result<(), DataError> {
        if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadFractions(fractions));
        }
        let n = self.instances.len();
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_valid = (fractions[1] * n as f64).round() as usize;
        if n_train + n_valid > n {
            return Err(DataError::BadFractions(fractions));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let id = |i: &usize| self.instances[*i].id.clone();
        self.split = Some(SplitAssignment {
            seed,
            fractions,
            train: order[..n_train].iter().map(id).collect(),
            valid: order[n_train..n_train + n_valid].iter().map(id).collect(),
            test: order[n_train + n_valid..].iter().map(id).collect(),
        });
        Ok(())
    }

    /// Resolve the stored split back to instance indices.
    pub fn split_indices(&self) -> Result<SplitIndices, DataError> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| DataError::Invalid("dataset has no split assignment".into()))?;
        let mut by_id = HashMap::new();
        for (i, inst) in self.instances.iter().enumerate() {
            by_id.insert(inst.id.as_str(), i);
        }
        let resolve = |ids: &[String]| -> Result<Vec<usize>, DataError> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| {
                        DataError::Invalid(format!("split references unknown instance {id:?}"))
                    })
                })
                .collect()
        };
        Ok(SplitIndices {
            train: resolve(&split.train)?,
            valid: resolve(&split.valid)?,
            test: resolve(&split.test)?,
        })
    }

    /// Fit per-variable mean/std on the observed entries of `idx` instances.
    pub fn fit_standardization(&self, idx: &[usize]) -> Standardization {
        let d = self.dim;
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut count = vec![0usize; d];
        for &i in idx {
            let inst = &self.instances[i];
            for k in 0..inst.n_events() {
                for row in 0..d {
                    if inst.mask[(row, k)] == 1.0 {
                        let v = inst.values[(row, k)];
                        sum[row] += v;
                        sum_sq[row] += v * v;
                        count[row] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        for row in 0..d {
            if count[row] > 0 {
                mean[row] = sum[row] / count[row] as f64;
                let var = (sum_sq[row] / count[row] as f64 - mean[row] * mean[row]).max(0.0);
                if var.sqrt() > 1e-12 {
                    std[row] = var.sqrt();
                }
            }
        }
        Standardization { mean, std }
    }

    /// Apply standardization in place to observed entries and remember it.
    pub fn standardize(&mut self, st: Standardization) {
        for inst in &mut self.instances {
            for k in 0..inst.times.len() {
                for row in 0..inst.values.nrows() {
                    if inst.mask[(row, k)] == 1.0 {
                        inst.values[(row, k)] = (inst.values[(row, k)] - st.mean[row]) / st.std[row];
                    }
                }
            }
        }
        self.standardization = Some(st);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("instance_id,time");
        for d in 1..=self.dim {
            let _ = write!(out, ",x_{d}");
        }
        for d in 1..=self.dim {
            let _ = write!(out, ",m_{d}");
        }
        out.push('\n');
        for inst in &self.instances {
            for k in 0..inst.n_events() {
                let _ = write!(out, "{},{}", inst.id, inst.times[k]);
                for row in 0..self.dim {
                    let _ = write!(out, ",{}", inst.values[(row, k)]);
                }
                for row in 0..self.dim {
                    let _ = write!(out, ",{}", inst.mask[(row, k)]);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv_str(csv: &str, horizon: f64) -> Result<(Self, LoadSummary), DataError> {
        let mut lines = csv.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| DataError::Header("empty file".into()))?;
        let dim = parse_header(header)?;

        struct Builder {
            times: Vec<f64>,
            columns: Vec<(Vec<f64>, Vec<f64>)>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut builders: HashMap<String, Builder> = HashMap::new();
        let mut summary = LoadSummary::default();

        for (lineno, line) in lines {
            let row = lineno + 1; // 1-based, header is row 1
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + 2 * dim {
                return Err(DataError::Row {
                    row,
                    msg: format!("expected {} fields, got {}", 2 + 2 * dim, fields.len()),
                });
            }
            let id = fields[0].to_string();
            let time: f64 = fields[1]
                .parse()
                .map_err(|_| DataError::Row { row, msg: format!("bad time {:?}", fields[1]) })?;
            if !time.is_finite() {
                return Err(DataError::Row { row, msg: format!("non-finite time {time}") });
            }
            let mut values = Vec::with_capacity(dim);
            let mut mask = Vec::with_capacity(dim);
            for d in 0..dim {
                let m_raw = fields[2 + dim + d].trim();
                let m: f64 = m_raw
                    .parse()
                    .map_err(|_| DataError::Row { row, msg: format!("bad mask {m_raw:?}") })?;
                if m != 0.0 && m != 1.0 {
                    return Err(DataError::Row { row, msg: format!("mask {m} not in {{0,1}}") });
                }
                let v_raw = fields[2 + d].trim();
                let v: f64 = if v_raw.is_empty() {
                    f64::NAN
                } else {
                    v_raw
                        .parse()
                        .map_err(|_| DataError::Row { row, msg: format!("bad value {v_raw:?}") })?
                };
                if m == 1.0 && !v.is_finite() {
                    return Err(DataError::Row {
                        row,
                        msg: format!("variable {} observed but value is {v_raw:?}", d + 1),
                    });
                }
                let v = if m == 0.0 {
                    if !v_raw.is_empty() && v != 0.0 {
                        summary.zeroed_entries += 1;
                    }
                    0.0
                } else {
                    v
                };
                values.push(v);
                mask.push(m);
            }

            let builder = match builders.get_mut(&id) {
                Some(b) => b,
                None => {
                    order.push(id.clone());
                    builders.entry(id.clone()).or_insert(Builder {
                        times: Vec::new(),
                        columns: Vec::new(),
                    })
                }
            };
            match builder.times.last() {
                Some(&last) if time < last => {
                    return Err(DataError::Row {
                        row,
                        msg: format!("time {time} decreases below {last} within instance {id:?}"),
                    });
                }
                Some(&last) if time == last => {
                    // Same event reported twice: masks OR together, the later
                    // row wins wherever it observed something.
                    summary.merged_rows += 1;
                    let (prev_v, prev_m) = builder.columns.last_mut().unwrap();
                    for d in 0..dim {
                        if mask[d] == 1.0 {
                            prev_v[d] = values[d];
                            prev_m[d] = 1.0;
                        }
                    }
                }
                _ => {
                    builder.times.push(time);
                    builder.columns.push((values, mask));
                }
            }
        }

        let mut instances = Vec::with_capacity(order.len());
        for id in order {
            let b = builders.remove(&id).expect("builder exists");
            let k = b.times.len();
            let mut values = Array2::zeros((dim, k));
            let mut mask = Array2::zeros((dim, k));
            for (col, (v, m)) in b.columns.iter().enumerate() {
                for row in 0..dim {
                    values[(row, col)] = v[row];
                    mask[(row, col)] = m[row];
                }
            }
            instances.push(Instance::new(id, b.times, values, mask)?);
        }
        Ok((Dataset::new(dim, horizon, instances)?, summary))
    }

    /// Write `data.csv` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("data.csv"), self.to_csv_string())?;
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA,
            dim: self.dim,
            horizon: self.horizon,
            n_instances: self.instances.len(),
            standardization: self.standardization.clone(),
            split: self.split.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, LoadSummary), DataError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(DataError::Invalid(format!(
                "unsupported manifest schema {}",
                manifest.schema_version
            )));
        }
        let csv = std::fs::read_to_string(dir.join("data.csv"))?;
        let (mut ds, summary) = Dataset::from_csv_str(&csv, manifest.horizon)?;
        if ds.dim != manifest.dim {
            return Err(DataError::Invalid(format!(
                "csv dimension {} disagrees with manifest dimension {}",
                ds.dim, manifest.dim
            )));
        }
        if ds.instances.len() != manifest.n_instances {
            return Err(DataError::Invalid(format!(
                "csv holds {} instances, manifest says {}",
                ds.instances.len(),
                manifest.n_instances
            )));
        }
        ds.standardization = manifest.standardization;
        ds.split = manifest.split;
        Ok((ds, summary))
    }
}

fn parse_header(header: &str) -> Result<usize, DataError> {
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 4 || fields[0] != "instance_id" || fields[1] != "time" {
        return Err(DataError::Header(format!("unexpected header {header:?}")));
    }
    let rest = &fields[2..];
    if rest.len() % 2 != 0 {
        return Err(DataError::Header("unpaired value/mask columns".into()));
    }
    let dim = rest.len() / 2;
    for d in 0..dim {
        if rest[d] != format!("x_{}", d + 1) || rest[dim + d] != format!("m_{}", d + 1) {
            return Err(DataError::Header(format!(
                "expected columns x_1..x_{dim},m_1..m_{dim}, got {header:?}"
            )));
        }
    }
    Ok(dim)
}

/// Hex SHA-256 of a file, for run manifests.
pub fn file_sha256_hex(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}
