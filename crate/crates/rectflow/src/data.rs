//! Data plumbing: the von Mises circle benchmark, numeric CSV ingestion,
//! z-score standardization, and seeded train/validation/test splits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Angles drawn from a von Mises distribution by Best–Fisher rejection
/// sampling: wrapped, unimodal around `loc`, sharper as `concentration`
/// grows.
pub fn sample_von_mises_angles(
    n: usize,
    loc: f64,
    concentration: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(concentration > 0.0, "concentration must be positive");
    let kappa = concentration;
    let a = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let b = (a - (2.0 * a).sqrt()) / (2.0 * kappa);
    let r = (1.0 + b * b) / (2.0 * b);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (std::f64::consts::PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let angle = loc + (u3 - 0.5).signum() * f.clamp(-1.0, 1.0).acos();
            out.push(angle);
        }
    }
    out
}

/// The circle benchmark: angles from vonMises(loc, concentration) projected
/// onto the unit circle as (cos φ, sin φ) rows. Deterministic per seed.
pub fn sample_von_mises_circle(n: usize, loc: f64, concentration: f64, seed: u64) -> Tensor {
    assert!(n >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = sample_von_mises_angles(n, loc, concentration, &mut rng);
    let mut data = Vec::with_capacity(2 * n);
    for phi in angles {
        data.push(phi.cos());
        data.push(phi.sin());
    }
    Tensor::new(vec![n, 2], data)
}

/// Rectangular, headerless, comma-separated numeric matrix. Parse failures
/// carry 1-based row and column positions.
pub fn load_tabular_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (line_idx, line) in text.lines().enumerate() {
        let row = line_idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(width.max(1));
        for (col_idx, cell) in trimmed.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: col_idx + 1,
                message: format!("expected a number, found {:?}", cell.trim()),
            })?;
            values.push(v);
        }
        if width == 0 {
            width = values.len();
        } else if values.len() != width {
            return Err(Error::Parse {
                row,
                column: values.len(),
                message: format!("expected {width} columns, found {}", values.len()),
            });
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "file contains no data rows".to_string(),
        });
    }
    Ok(Tensor::from_rows(&rows))
}

/// Writes a matrix in the same headerless CSV dialect `load_tabular_csv`
/// reads; floats print in shortest round-trip form.
pub fn save_csv(path: impl AsRef<Path>, data: &Tensor) -> Result<()> {
    let mut text = String::new();
    for r in 0..data.rows() {
        let row = data.row(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            text.push_str(&format!("{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Per-column z-scoring record: which original columns survived and the
/// mean/std (divisor n − 1) used for each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Original indices of columns dropped for having no variation.
    pub dropped_columns: Vec<usize>,
}

/// Z-scores every column; columns with (numerically) zero variance carry no
/// information and are dropped, with their original indices recorded.
pub fn standardize(data: &Tensor) -> Result<(Tensor, Standardization)> {
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(Error::invalid("standardization needs at least two rows"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (j, v) in data.row(r).iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    let mut kept = Vec::new();
    let mut dropped_columns = Vec::new();
    let mut kept_mean = Vec::new();
    let mut kept_std = Vec::new();
    for j in 0..d {
        let std = (var[j] / (n - 1) as f64).sqrt();
        if std <= 1e-12 {
            dropped_columns.push(j);
        } else {
            kept.push(j);
            kept_mean.push(mean[j]);
            kept_std.push(std);
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("every column is constant; nothing to keep"));
    }
    let mut out = Vec::with_capacity(n * kept.len());
    for r in 0..n {
        let row = data.row(r);
        for (slot, &j) in kept.iter().enumerate() {
            out.push((row[j] - kept_mean[slot]) / kept_std[slot]);
        }
    }
    Ok((
        Tensor::new(vec![n, kept.len()], out),
        Standardization {
            mean: kept_mean,
            std: kept_std,
            dropped_columns,
        },
    ))
}

/// Z-scores fresh data with a previously computed record: drops the same
/// columns and reuses the stored mean/std, so held-out points land in the
/// same coordinates the model was trained in.
pub fn apply_standardization(data: &Tensor, stats: &Standardization) -> Result<Tensor> {
    let n = data.rows();
    let full = data.cols();
    let kept_count = stats.mean.len();
    let expected = kept_count + stats.dropped_columns.len();
    if full != expected {
        return Err(Error::invalid(format!(
            "standardization record covers {expected} columns, data has {full}"
        )));
    }
    let kept: Vec<usize> = (0..full)
        .filter(|j| !stats.dropped_columns.contains(j))
        .collect();
    let mut out = Vec::with_capacity(n * kept_count);
    for r in 0..n {
        let row = data.row(r);
        for (slot, &j) in kept.iter().enumerate() {
            out.push((row[j] - stats.mean[slot]) / stats.std[slot]);
        }
    }
    Ok(Tensor::new(vec![n, kept_count], out))
}

/// Undoes `standardize` on the retained columns.
pub fn unstandardize(data: &Tensor, stats: &Standardization) -> Tensor {
    let n = data.rows();
    let d = data.cols();
    assert_eq!(d, stats.mean.len(), "column count does not match the record");
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        for (j, v) in data.row(r).iter().enumerate() {
            out.push(v * stats.std[j] + stats.mean[j]);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Row indices for an 80/10/10 split drawn by seeded shuffle. Disjoint and
/// exhaustive by construction; small n short-changes test first, then val.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates via rand's shuffle for reproducibility across platforms.
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_train = (n as f64 * 0.8).floor() as usize;
    let n_val = (n as f64 * 0.1).floor() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Splits { train, val, test }
}

/// A ready-to-train dataset: the (possibly standardized) matrix, its split,
/// and where it came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: Tensor,
    pub splits: Splits,
    pub standardization: Option<Standardization>,
    pub provenance: String,
}

impl Dataset {
    /// The circle benchmark, split 80/10/10. Raw coordinates are already
    /// order-one, so no standardization is applied.
    pub fn circle(n: usize, loc: f64, concentration: f64, seed: u64) -> Self {
        let data = sample_von_mises_circle(n, loc, concentration, seed);
        let splits = split_indices(n, seed ^ 0x9e37_79b9_7f4a_7c15);
        Dataset {
            data,
            splits,
            standardization: None,
            provenance: format!("circle(n={n}, loc={loc:.6}, kappa={concentration}, seed={seed})"),
        }
    }

    /// CSV ingestion: parse, z-score (dropping constant columns), split.
    pub fn from_csv(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let name = path.as_ref().display().to_string();
        let raw = load_tabular_csv(&path)?;
        let (data, stats) = standardize(&raw)?;
        let splits = split_indices(data.rows(), seed);
        Ok(Dataset {
            data,
            splits,
            standardization: Some(stats),
            provenance: format!("csv({name}, seed={seed})"),
        })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn train(&self) -> Tensor {
        self.data.select_rows(&self.splits.train)
    }

    pub fn val(&self) -> Tensor {
        self.data.select_rows(&self.splits.val)
    }

    pub fn test(&self) -> Tensor {
        self.data.select_rows(&self.splits.test)
    }
}
