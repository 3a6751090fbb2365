//! Seeded synthetic scenes: ground-truth lesions, one intensity channel and
//! a simulated Monte-Carlo ensemble with planted true and false detections.
//!
//! Every lesion is an axis-aligned ellipsoid with integer centre. With `d`
//! the normalized ellipsoidal distance from the centre, the base logit is
//! `peak · (1 - d)` (floored at the background logit), so the detection
//! boundary sits at `d = 1`. Every sample perturbs a blob's logits with
//! spatially smooth noise (an offset plus a linear ramp) at a per-blob scale,
//! plus mild per-voxel noise. True lesions get sharper peaks, smaller noise
//! scales and a strong intensity signal; false blobs get near-threshold peaks,
//! larger noise scales and a weak intensity signal. The ranges overlap, and
//! both kinds draw radii from the same range.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcnn::sigmoid;
use crate::rng;
use crate::volume::{Dims, LabelVolume, McEnsemble, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    pub n_scenes: usize,
    pub n_true_lesions: usize,
    pub n_false_lesions: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Monte-Carlo samples per scene.
    pub t_samples: usize,
    /// Mean peak logit of true lesions; each lesion draws from 0.5x to 1.5x.
    pub detect_sharpness: f64,
    /// Mean smooth-noise scale of true lesions (each draws 0x to 2x).
    pub true_noise: f64,
    /// Mean smooth-noise scale of false blobs (each draws 0.5x to 1.5x).
    pub fp_noise: f64,
    /// Per-voxel iid logit noise.
    pub voxel_noise: f64,
    /// Peak logit range of false blobs.
    pub fp_peak_min: f64,
    pub fp_peak_max: f64,
    pub background_logit: f64,
    pub true_contrast: f64,
    pub false_contrast: f64,
    pub intensity_noise: f64,
    /// Free voxels kept between neighbouring lesions.
    pub margin: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [64, 64, 64],
            n_scenes: 20,
            n_true_lesions: 8,
            n_false_lesions: 6,
            radius_min: 1.5,
            radius_max: 4.0,
            t_samples: 20,
            detect_sharpness: 4.0,
            true_noise: 1.0,
            fp_noise: 1.5,
            voxel_noise: 0.3,
            fp_peak_min: 1.0,
            fp_peak_max: 6.0,
            background_logit: -8.0,
            true_contrast: 2.0,
            false_contrast: 0.5,
            intensity_noise: 0.5,
            margin: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
            .map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.t_samples < 2 {
            return bad("t_samples must be at least 2");
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return bad("radii must satisfy 1 <= radius_min <= radius_max");
        }
        if !(self.fp_noise > self.true_noise && self.true_noise >= 0.0) {
            return bad("fp_noise must exceed true_noise >= 0");
        }
        if !(self.fp_peak_max >= self.fp_peak_min) || !(self.detect_sharpness > 0.0) {
            return bad("peak logits are inconsistent");
        }
        if self.intensity_noise < 0.0 || self.voxel_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn volume_dims(&self) -> Result<Dims> {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    True,
    False,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub kind: BlobKind,
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub peak_logit: f64,
    pub noise_scale: f64,
    pub contrast: f64,
}

impl Blob {
    fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    fn distance(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a] as f64) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Offset from the centre in units of the radii.
    fn relative(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let p = [x, y, z];
        std::array::from_fn(|a| (p[a] as f64 - self.center[a] as f64) / self.radii[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scan_id: String,
    pub scene_index: u64,
    pub seed: u64,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub gt: LabelVolume,
    pub intensity: Volume,
    pub ensemble: McEnsemble,
    pub manifest: SceneManifest,
}

pub fn scan_id(scene_index: u64) -> String {
    format!("scene_{scene_index:04}")
}

const PLACEMENT_RETRIES: usize = 2000;

fn place_blobs(cfg: &SynthConfig, dims: Dims, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let kinds = std::iter::repeat_n(BlobKind::True, cfg.n_true_lesions)
        .chain(std::iter::repeat_n(BlobKind::False, cfg.n_false_lesions));
    let extent = [dims.nx, dims.ny, dims.nz];
    let mut blobs: Vec<Blob> = Vec::new();
    for kind in kinds {
        let r = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let radii: [f64; 3] = std::array::from_fn(|_| (r * rng.random_range(0.75..1.25)).max(1.0));
        let (peak_logit, noise_scale, contrast) = match kind {
            BlobKind::True => (
                cfg.detect_sharpness * rng.random_range(0.5..1.5),
                cfg.true_noise * rng.random_range(0.0..2.0),
                cfg.true_contrast * rng.random_range(0.75..1.25),
            ),
            BlobKind::False => (
                rng.random_range(cfg.fp_peak_min..=cfg.fp_peak_max),
                cfg.fp_noise * rng.random_range(0.5..1.5),
                cfg.false_contrast * rng.random_range(0.0..2.0),
            ),
        };
        let reach = radii.iter().copied().fold(0.0, f64::max).ceil() as usize + 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            if extent.iter().any(|&n| n < 2 * reach + 1) {
                break;
            }
            let center: [usize; 3] =
                std::array::from_fn(|a| rng.random_range(reach..extent[a] - reach));
            let candidate = Blob {
                kind,
                center,
                radii,
                peak_logit,
                noise_scale,
                contrast,
            };
            let clear = blobs.iter().all(|b| {
                let dist = (0..3)
                    .map(|a| (b.center[a] as f64 - center[a] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist > b.max_radius() + candidate.max_radius() + cfg.margin as f64
            });
            if clear {
                blobs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {} of {} within {PLACEMENT_RETRIES} attempts",
                blobs.len() + 1,
                cfg.n_true_lesions + cfg.n_false_lesions
            )));
        }
    }
    Ok(blobs)
}

/// Voxels near a blob whose logit differs from the background.
struct Footprint {
    voxel: usize,
    base_logit: f64,
    owner: usize,
    rel: [f64; 3],
}

fn footprints(cfg: &SynthConfig, dims: Dims, blobs: &[Blob]) -> Vec<Footprint> {
    let mut best: std::collections::BTreeMap<usize, Footprint> = Default::default();
    for (owner, b) in blobs.iter().enumerate() {
        // the logit reaches the background at d = 1 - bg/peak
        let reach_d = 1.0 - cfg.background_logit / b.peak_logit;
        let reach = (b.max_radius() * reach_d).ceil() as usize + 1;
        let lo: [usize; 3] = std::array::from_fn(|a| b.center[a].saturating_sub(reach));
        let hi = [
            (b.center[0] + reach).min(dims.nx - 1),
            (b.center[1] + reach).min(dims.ny - 1),
            (b.center[2] + reach).min(dims.nz - 1),
        ];
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let logit = b.peak_logit * (1.0 - b.distance(x, y, z));
                    if logit <= cfg.background_logit {
                        continue;
                    }
                    let v = dims.linear(x, y, z);
                    let replace = best.get(&v).is_none_or(|f| logit > f.base_logit);
                    if replace {
                        best.insert(
                            v,
                            Footprint {
                                voxel: v,
                                base_logit: logit,
                                owner,
                                rel: b.relative(x, y, z),
                            },
                        );
                    }
                }
            }
        }
    }
    best.into_values().collect()
}

/// Generate scene `scene_index`; fully determined by `(cfg, scene_index)`.
pub fn generate_scene(cfg: &SynthConfig, scene_index: u64) -> Result<Scene> {
    cfg.validate()?;
    let dims = cfg.volume_dims()?;
    let mut place_rng = rng::stream(cfg.seed, scene_index, "synth-placement");
    let blobs = place_blobs(cfg, dims, &mut place_rng)?;

    // ground truth: true ellipsoid interiors (d < 1)
    let mut gt = LabelVolume::zeros(dims);
    for b in blobs.iter().filter(|b| b.kind == BlobKind::True) {
        let r = b.max_radius().ceil() as usize;
        for z in b.center[2].saturating_sub(r)..=(b.center[2] + r).min(dims.nz - 1) {
            for y in b.center[1].saturating_sub(r)..=(b.center[1] + r).min(dims.ny - 1) {
                for x in b.center[0].saturating_sub(r)..=(b.center[0] + r).min(dims.nx - 1) {
                    if b.distance(x, y, z) < 1.0 {
                        gt.data_mut()[dims.linear(x, y, z)] = 1;
                    }
                }
            }
        }
    }

    // intensity: Gaussian bumps over white noise
    let mut int_rng = rng::stream(cfg.seed, scene_index, "synth-intensity");
    let mut intensity: Vec<f64> = (0..dims.len())
        .map(|_| cfg.intensity_noise * int_rng.sample::<f64, _>(StandardNormal))
        .collect();
    for b in &blobs {
        let r = (2.0 * b.max_radius()).ceil() as usize;
        for z in b.center[2].saturating_sub(r)..=(b.center[2] + r).min(dims.nz - 1) {
            for y in b.center[1].saturating_sub(r)..=(b.center[1] + r).min(dims.ny - 1) {
                for x in b.center[0].saturating_sub(r)..=(b.center[0] + r).min(dims.nx - 1) {
                    let d = b.distance(x, y, z);
                    intensity[dims.linear(x, y, z)] += b.contrast * (-2.0 * d * d).exp();
                }
            }
        }
    }

    // ensemble
    let fps = footprints(cfg, dims, &blobs);
    let background = sigmoid(cfg.background_logit);
    let mut noise_rng = rng::stream(cfg.seed, scene_index, "synth-ensemble");
    let mut samples = Vec::with_capacity(cfg.t_samples);
    for _ in 0..cfg.t_samples {
        // per-sample smooth noise for each blob: offset plus linear ramp
        let smooth: Vec<(f64, [f64; 3])> = blobs
            .iter()
            .map(|_| {
                let g: f64 = noise_rng.sample(StandardNormal);
                let ramp: [f64; 3] =
                    std::array::from_fn(|_| 0.5 * noise_rng.sample::<f64, _>(StandardNormal));
                (g, ramp)
            })
            .collect();
        let mut p = vec![background; dims.len()];
        for f in &fps {
            let b = &blobs[f.owner];
            let eps: f64 = noise_rng.sample(StandardNormal);
            let (g, ramp) = smooth[f.owner];
            let ramp_term: f64 = ramp.iter().zip(&f.rel).map(|(a, r)| a * r).sum();
            let noise = b.noise_scale * (g + ramp_term) + cfg.voxel_noise * eps;
            p[f.voxel] = sigmoid(f.base_logit + noise);
        }
        samples.push(Volume::new(dims, p)?);
    }

    Ok(Scene {
        gt,
        intensity: Volume::new(dims, intensity)?,
        ensemble: McEnsemble::new(samples)?,
        manifest: SceneManifest {
            scan_id: scan_id(scene_index),
            scene_index,
            seed: cfg.seed,
            blobs,
        },
    })
}

pub const GT_FILE: &str = "gt.npy";
pub const INTENSITY_FILE: &str = "intensity.npy";
pub const SAMPLES_DIR: &str = "samples";

pub fn sample_file(t: usize) -> String {
    format!("sample_{t:03}.npy")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scan_id: String,
    pub scene_index: u64,
    pub dir: PathBuf,
    pub gt: PathBuf,
    pub intensity: PathBuf,
    pub samples: Vec<PathBuf>,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write one scene under `dir` (paths in the entry are relative to the
/// dataset root `root`).
pub fn write_scene(scene: &Scene, root: &Path) -> Result<SceneEntry> {
    let rel_dir = PathBuf::from(&scene.manifest.scan_id);
    let dir = root.join(&rel_dir);
    let samples_dir = dir.join(SAMPLES_DIR);
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    scene.gt.save(dir.join(GT_FILE))?;
    scene.intensity.save(dir.join(INTENSITY_FILE))?;
    let mut samples = Vec::new();
    for (t, s) in scene.ensemble.samples().iter().enumerate() {
        let name = sample_file(t);
        s.save(samples_dir.join(&name))?;
        samples.push(rel_dir.join(SAMPLES_DIR).join(name));
    }
    Ok(SceneEntry {
        scan_id: scene.manifest.scan_id.clone(),
        scene_index: scene.manifest.scene_index,
        gt: rel_dir.join(GT_FILE),
        intensity: rel_dir.join(INTENSITY_FILE),
        dir: rel_dir,
        samples,
        blobs: scene.manifest.blobs.clone(),
    })
}

/// Generate `cfg.n_scenes` scenes into `out` and write `manifest.json`.
pub fn write_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes as u64 {
        let scene = generate_scene(cfg, i)?;
        scenes.push(write_scene(&scene, out)?);
        log::info!("synth: wrote {}", scan_id(i));
    }
    write_manifest(cfg, scenes, out)
}

pub fn write_manifest(
    cfg: &SynthConfig,
    scenes: Vec<SceneEntry>,
    out: &Path,
) -> Result<DatasetManifest> {
    let manifest = DatasetManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        scenes,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion::dice;
    use crate::maps::{binarize, compute_maps};

    fn small() -> SynthConfig {
        SynthConfig {
            dims: [32, 32, 32],
            n_true_lesions: 3,
            n_false_lesions: 2,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small(), 3).unwrap();
        let b = generate_scene(&small(), 3).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.intensity, b.intensity);
        for (x, y) in a.ensemble.samples().iter().zip(b.ensemble.samples()) {
            assert_eq!(x, y);
        }
        let c = generate_scene(&small(), 4).unwrap();
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn noiseless_limit_recovers_ground_truth() {
        let cfg = SynthConfig {
            n_false_lesions: 0,
            detect_sharpness: 1e9,
            ..small()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        let maps = compute_maps(&s.ensemble).unwrap();
        let mask = binarize(&maps.mean_prob, 0.5).unwrap();
        assert_eq!(dice(&mask, &s.gt).unwrap(), 1.0);
        assert!(s.gt.count_foreground() > 0);
    }

    #[test]
    fn probabilities_in_range() {
        let s = generate_scene(&small(), 1).unwrap();
        assert_eq!(s.ensemble.len(), 20);
        for v in s.ensemble.samples() {
            assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn default_scenes_have_both_lesion_kinds() {
        let cfg = SynthConfig::default();
        let (mut tp, mut fp) = (0, 0);
        let (mut u_tp, mut u_fp) = (Vec::new(), Vec::new());
        for i in 0..cfg.n_scenes as u64 {
            let s = generate_scene(&cfg, i).unwrap();
            let maps = compute_maps(&s.ensemble).unwrap();
            let mask = binarize(&maps.mean_prob, 0.5).unwrap();
            let (_, lesions) = crate::lesion::extract_lesions(&mask, &s.gt, 0.1).unwrap();
            for l in &lesions {
                let u = crate::baselines::aggregate_mean(&l.voxels, &maps.entropy).unwrap();
                if l.tp {
                    tp += 1;
                    u_tp.push(u);
                } else {
                    fp += 1;
                    u_fp.push(u);
                }
            }
        }
        assert!(tp >= 10 && fp >= 10, "tp {tp} fp {fp}");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&u_fp) > mean(&u_tp));
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = SynthConfig {
            dims: [12, 12, 12],
            n_true_lesions: 30,
            ..small()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = SynthConfig {
            fp_noise: 0.1,
            true_noise: 0.5,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = SynthConfig {
            t_samples: 1,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
