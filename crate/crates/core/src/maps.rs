//! Voxel-wise reductions of a Monte-Carlo ensemble.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, McEnsemble, Volume};

/// Mean foreground probability plus the three voxel-wise uncertainty maps.
#[derive(Debug, Clone)]
pub struct UncertaintyMaps {
    pub mean_prob: Volume,
    /// Binary entropy of the mean probability, in bits.
    pub entropy: Volume,
    /// Population variance of the T sample probabilities.
    pub variance: Volume,
    /// `1 - |2p - 1|`, one minus the gap between the two class probabilities.
    pub pcs_uncertainty: Volume,
}

impl UncertaintyMaps {
    pub fn dims(&self) -> crate::Dims {
        self.mean_prob.dims()
    }
}

/// Binary entropy in bits with `0 log 0 = 0`.
#[inline]
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

#[inline]
pub fn pcs_uncertainty(p: f64) -> f64 {
    1.0 - (2.0 * p - 1.0).abs()
}

pub fn compute_maps(ensemble: &McEnsemble) -> Result<UncertaintyMaps> {
    let dims = ensemble.dims();
    let n = dims.len();
    let t = ensemble.len() as f64;

    let mut mean = vec![0.0; n];
    for s in ensemble.samples() {
        for (m, p) in mean.iter_mut().zip(s.data()) {
            *m += p;
        }
    }
    for m in &mut mean {
        // clamp guards against 1.0000000000000002 from summation
        *m = (*m / t).clamp(0.0, 1.0);
    }

    // two-pass variance around the mean
    let mut var = vec![0.0; n];
    for s in ensemble.samples() {
        for ((v, p), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            let d = p - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= t;
    }

    let entropy = mean.iter().map(|&p| binary_entropy(p)).collect();
    let pcs = mean.iter().map(|&p| pcs_uncertainty(p)).collect();
    Ok(UncertaintyMaps {
        mean_prob: Volume::new(dims, mean)?,
        entropy: Volume::new(dims, entropy)?,
        variance: Volume::new(dims, var)?,
        pcs_uncertainty: Volume::new(dims, pcs)?,
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Foreground iff the mean probability is strictly above `threshold`.
pub fn binarize(mean_prob: &Volume, threshold: f64) -> Result<LabelVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Input(format!(
            "threshold {threshold} must lie in (0,1)"
        )));
    }
    let data = mean_prob
        .data()
        .iter()
        .map(|&p| u32::from(p > threshold))
        .collect();
    LabelVolume::new(mean_prob.dims(), data)
}
