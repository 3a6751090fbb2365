//! Comparison methods: per-map mean and logsum aggregation, the inverse-size
//! heuristic, and MetaSeg-style linear/logistic models on four lesion
//! features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcnn::sigmoid;
use crate::lesion::Lesion;
use crate::maps::UncertaintyMaps;
use crate::volume::Volume;

/// Guard inside the logarithm of the logsum aggregation.
pub const LOGSUM_DELTA: f64 = 1e-12;
pub const OLS_RIDGE: f64 = 1e-8;
pub const LOGISTIC_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITERS: usize = 100_000;

fn check_lesion(voxels: &[usize], map: &Volume) -> Result<()> {
    if voxels.is_empty() {
        return Err(Error::Input("cannot aggregate over an empty lesion".into()));
    }
    if voxels.iter().any(|&v| v >= map.dims().len()) {
        return Err(Error::Input("lesion voxel outside the map".into()));
    }
    Ok(())
}

pub fn aggregate_mean(voxels: &[usize], map: &Volume) -> Result<f64> {
    check_lesion(voxels, map)?;
    Ok(voxels.iter().map(|&v| map.at(v)).sum::<f64>() / voxels.len() as f64)
}

/// `Σ ln(u + δ)`. Larger (less negative) totals rank as more uncertain.
pub fn aggregate_logsum(voxels: &[usize], map: &Volume) -> Result<f64> {
    check_lesion(voxels, map)?;
    Ok(voxels
        .iter()
        .map(|&v| (map.at(v) + LOGSUM_DELTA).ln())
        .sum())
}

pub fn size_uncertainty(size: usize) -> f64 {
    1.0 / size as f64
}

/// The six aggregation baselines and the size heuristic for one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub entropy_mean: f64,
    pub entropy_logsum: f64,
    pub variance_mean: f64,
    pub variance_logsum: f64,
    pub pcs_mean: f64,
    pub pcs_logsum: f64,
    pub size: f64,
}

pub fn aggregate_scores(lesion: &Lesion, maps: &UncertaintyMaps) -> Result<AggregateScores> {
    let v = &lesion.voxels;
    Ok(AggregateScores {
        entropy_mean: aggregate_mean(v, &maps.entropy)?,
        entropy_logsum: aggregate_logsum(v, &maps.entropy)?,
        variance_mean: aggregate_mean(v, &maps.variance)?,
        variance_logsum: aggregate_logsum(v, &maps.variance)?,
        pcs_mean: aggregate_mean(v, &maps.pcs_uncertainty)?,
        pcs_logsum: aggregate_logsum(v, &maps.pcs_uncertainty)?,
        size: size_uncertainty(lesion.size()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSegFeatures {
    pub mean_entropy: f64,
    pub mean_variance: f64,
    pub mean_pcs_uncertainty: f64,
    pub size: f64,
}

impl MetaSegFeatures {
    pub fn of(lesion: &Lesion, maps: &UncertaintyMaps) -> Result<Self> {
        Ok(MetaSegFeatures {
            mean_entropy: aggregate_mean(&lesion.voxels, &maps.entropy)?,
            mean_variance: aggregate_mean(&lesion.voxels, &maps.variance)?,
            mean_pcs_uncertainty: aggregate_mean(&lesion.voxels, &maps.pcs_uncertainty)?,
            size: lesion.size() as f64,
        })
    }

    pub fn to_array(self) -> [f64; 4] {
        [
            self.mean_entropy,
            self.mean_variance,
            self.mean_pcs_uncertainty,
            self.size,
        ]
    }
}

/// Solve `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Result<[f64; N]> {
    let scale = (0..N).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-14 * scale {
            return Err(Error::Fit("normal equations are singular".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

#[inline]
fn design(row: &[f64; 4]) -> [f64; 5] {
    [1.0, row[0], row[1], row[2], row[3]]
}

#[inline]
fn dot5(w: &[f64; 5], a: &[f64; 5]) -> f64 {
    w.iter().zip(a).map(|(x, y)| x * y).sum()
}

/// Ordinary least squares with a tiny ridge. Returns `[intercept, w1..w4]`.
pub fn linear_regression_fit(x: &[[f64; 4]], y: &[f64]) -> Result<[f64; 5]> {
    if x.len() != y.len() {
        return Err(Error::Fit("feature and target counts differ".into()));
    }
    if x.len() <= 5 {
        return Err(Error::Fit(format!(
            "need more than 5 samples, got {}",
            x.len()
        )));
    }
    let mut ata = [[0.0; 5]; 5];
    let mut aty = [0.0; 5];
    for (row, &t) in x.iter().zip(y) {
        let a = design(row);
        for i in 0..5 {
            aty[i] += a[i] * t;
            for j in 0..5 {
                ata[i][j] += a[i] * a[j];
            }
        }
    }
    for (i, r) in ata.iter_mut().enumerate() {
        r[i] += OLS_RIDGE;
    }
    solve_dense(ata, aty)
}

/// Logistic regression by full-batch gradient descent on the mean log-loss.
/// `positive[i]` is the class whose probability the model outputs.
pub fn logistic_regression_fit(x: &[[f64; 4]], positive: &[bool]) -> Result<[f64; 5]> {
    if x.len() != positive.len() {
        return Err(Error::Fit("feature and label counts differ".into()));
    }
    if x.len() <= 5 {
        return Err(Error::Fit(format!(
            "need more than 5 samples, got {}",
            x.len()
        )));
    }
    let m = x.len() as f64;
    let rows: Vec<[f64; 5]> = x.iter().map(design).collect();
    // trace(AᵀA)/M bounds the largest eigenvalue; the log-loss Hessian is at
    // most a quarter of it
    let trace: f64 = rows
        .iter()
        .map(|a| a.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / m;
    let step = 1.0 / (0.25 * trace);

    let mut w = [0.0; 5];
    for _ in 0..LOGISTIC_MAX_ITERS {
        let mut grad = [0.0; 5];
        for (a, &p) in rows.iter().zip(positive) {
            let err = sigmoid(dot5(&w, a)) - f64::from(u8::from(p));
            for k in 0..5 {
                grad[k] += err * a[k] / m;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Fit("logistic regression diverged".into()));
        }
        if norm < LOGISTIC_TOL {
            break;
        }
        for k in 0..5 {
            w[k] -= step * grad[k];
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaSegKind {
    Classification,
    Regression,
}

/// A fitted MetaSeg model with the z-scoring it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSegModel {
    pub kind: MetaSegKind,
    pub feature_mean: [f64; 4],
    pub feature_std: [f64; 4],
    /// `[intercept, mean_entropy, mean_variance, mean_pcs_uncertainty, size]`
    pub weights: [f64; 5],
}

impl MetaSegModel {
    /// Classification targets are FP (`iou_adj < ε`, i.e. `!tp`); regression
    /// targets are `iou_adj`.
    pub fn fit(
        features: &[MetaSegFeatures],
        iou_adj: &[f64],
        tp: &[bool],
        kind: MetaSegKind,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Fit("no lesions to fit".into()));
        }
        let raw: Vec<[f64; 4]> = features.iter().map(|f| f.to_array()).collect();
        let m = raw.len() as f64;
        let mut mean = [0.0; 4];
        for r in &raw {
            for k in 0..4 {
                mean[k] += r[k] / m;
            }
        }
        let mut std = [0.0; 4];
        for r in &raw {
            for k in 0..4 {
                std[k] += (r[k] - mean[k]).powi(2) / m;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let scaled: Vec<[f64; 4]> = raw
            .iter()
            .map(|r| std::array::from_fn(|k| (r[k] - mean[k]) / std[k]))
            .collect();
        let weights = match kind {
            MetaSegKind::Regression => linear_regression_fit(&scaled, iou_adj)?,
            MetaSegKind::Classification => {
                let fp: Vec<bool> = tp.iter().map(|t| !t).collect();
                logistic_regression_fit(&scaled, &fp)?
            }
        };
        Ok(MetaSegModel {
            kind,
            feature_mean: mean,
            feature_std: std,
            weights,
        })
    }

    fn raw_output(&self, f: &MetaSegFeatures) -> f64 {
        let r = f.to_array();
        let z: [f64; 4] =
            std::array::from_fn(|k| (r[k] - self.feature_mean[k]) / self.feature_std[k]);
        dot5(&self.weights, &design(&z))
    }

    /// Lesion uncertainty: P(FP) for classification, `clamp(1 - IoU_hat)`
    /// for regression.
    pub fn predict(&self, f: &MetaSegFeatures) -> f64 {
        metaseg_uncertainty(self.raw_output(f), self.kind)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = crate::graph::to_json_line(self);
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Map a model's linear output to an uncertainty in `[0, 1]`.
pub fn metaseg_uncertainty(linear_output: f64, kind: MetaSegKind) -> f64 {
    match kind {
        MetaSegKind::Classification => sigmoid(linear_output),
        MetaSegKind::Regression => (1.0 - linear_output).clamp(0.0, 1.0),
    }
}
