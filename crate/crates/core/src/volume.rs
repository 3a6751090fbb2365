//! Dense 3D volumes.
//!
//! Storage is x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`, which is C order for an array of shape
//! `(nz, ny, nx)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::npy;

/// Largest extent accepted along any axis unless a caller raises the limit.
pub const DEFAULT_MAX_EXTENT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::with_limit(nx, ny, nz, DEFAULT_MAX_EXTENT)
    }

    pub fn with_limit(nx: usize, ny: usize, nz: usize, max_extent: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Shape(format!("empty volume {nx}x{ny}x{nz}")));
        }
        if nx > max_extent || ny > max_extent || nz > max_extent {
            return Err(Error::Shape(format!(
                "volume {nx}x{ny}x{nz} exceeds the per-axis limit {max_extent}"
            )));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn xyz(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.len());
        let x = idx % self.nx;
        let rest = idx / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    /// NPY shape `(nz, ny, nx)`.
    pub fn npy_shape(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    /// Linear indices of the 26-neighbours of `idx` that fall inside the volume.
    pub fn neighbors_26(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y, z) = self.xyz(idx);
        NEIGHBOR_OFFSETS_26.iter().filter_map(move |&(dx, dy, dz)| {
            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            self.contains(nx, ny, nz)
                .then(|| self.linear(nx as usize, ny as usize, nz as usize))
        })
    }
}

/// The 26 offsets of the 3x3x3 neighbourhood without its centre.
pub const NEIGHBOR_OFFSETS_26: [(i64, i64, i64); 26] = {
    let mut out = [(0i64, 0i64, 0i64); 26];
    let mut k = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[k] = (dx, dy, dz);
                    k += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// Real-valued volume: intensities, probabilities or uncertainty maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{}x{} volume",
                data.len(),
                dims.nx,
                dims.ny,
                dims.nz
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at linear index {i}")));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Volume {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.linear(x, y, z)]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        npy::load_volume(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        npy::save_volume(self, path)
    }
}

/// Integer label volume; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} labels for a {}x{}x{} volume",
                data.len(),
                dims.nx,
                dims.ny,
                dims.nz
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, idx: usize) -> u32 {
        self.data[idx]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        npy::load_labels(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        npy::save_labels(self, path)
    }
}

/// T aligned foreground-probability volumes from stochastic forward passes.
#[derive(Debug, Clone)]
pub struct McEnsemble {
    samples: Vec<Volume>,
}

impl McEnsemble {
    pub fn new(samples: Vec<Volume>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Input(format!(
                "an ensemble needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dims = samples[0].dims();
        for (t, s) in samples.iter().enumerate() {
            if s.dims() != dims {
                return Err(Error::Input(format!(
                    "sample {t} has dims {:?}, expected {:?}",
                    s.dims(),
                    dims
                )));
            }
            if let Some(i) = s.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Input(format!(
                    "sample {t} holds probability {} outside [0,1] at index {i}",
                    s.at(i)
                )));
            }
        }
        Ok(McEnsemble { samples })
    }

    pub fn dims(&self) -> Dims {
        self.samples[0].dims()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Volume] {
        &self.samples
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dims_guard() {
        assert!(Dims::new(0, 1, 1).is_err());
        assert!(Dims::new(513, 1, 1).is_err());
        assert!(Dims::with_limit(513, 1, 1, 1024).is_ok());
    }

    #[test]
    fn neighbor_offsets_are_distinct() {
        let mut v = NEIGHBOR_OFFSETS_26.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 26);
        assert!(!v.contains(&(0, 0, 0)));
    }

    #[test]
    fn corner_has_seven_neighbors() {
        let d = Dims::cube(3).unwrap();
        assert_eq!(d.neighbors_26(0).count(), 7);
        assert_eq!(d.neighbors_26(d.linear(1, 1, 1)).count(), 26);
    }

    #[test]
    fn volume_rejects_bad_payload() {
        let d = Dims::cube(2).unwrap();
        assert!(matches!(Volume::new(d, vec![0.0; 7]), Err(Error::Shape(_))));
        let mut data = vec![0.0; 8];
        data[3] = f64::NAN;
        assert!(matches!(Volume::new(d, data), Err(Error::Data(_))));
    }

    #[test]
    fn ensemble_validation() {
        let d = Dims::cube(2).unwrap();
        let v = Volume::filled(d, 0.5);
        assert!(McEnsemble::new(vec![v.clone()]).is_err());
        assert!(McEnsemble::new(vec![v.clone(), Volume::filled(d, 1.5)]).is_err());
        let other = Volume::filled(Dims::cube(3).unwrap(), 0.5);
        assert!(McEnsemble::new(vec![v.clone(), other]).is_err());
        assert_eq!(McEnsemble::new(vec![v.clone(), v]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn linear_index_is_a_bijection(nx in 1usize..20, ny in 1usize..20, nz in 1usize..20, seed in 0usize..10_000) {
            let d = Dims::new(nx, ny, nz).unwrap();
            let idx = seed % d.len();
            let (x, y, z) = d.xyz(idx);
            prop_assert_eq!(d.linear(x, y, z), idx);
            prop_assert!(x < nx && y < ny && z < nz);
        }
    }
}
