//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use lesionuq::gcnn::{
    forward, loss_and_gradients, sample_loss, GcnnParams, NormAdj, PreparedGraph, Variant,
};
use lesionuq::graph::LesionGraph;
use lesionuq::{Dims, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Central differences at this step carry ~1e-10 of absolute rounding noise,
/// so components below this magnitude are compared against the floor.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn random_graph(rng: &mut ChaCha8Rng, n_features: usize) -> PreparedGraph {
    let n = rng.random_range(1..=30);
    let mut edges = Vec::new();
    // random spanning tree plus extra edges
    for i in 1..n as u32 {
        edges.push([rng.random_range(0..i), i]);
    }
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            if rng.random_bool(0.1) && !edges.contains(&[i, j]) {
                edges.push([i, j]);
            }
        }
    }
    PreparedGraph {
        adj: NormAdj::from_edges(n, &edges),
        x: (0..n * n_features)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
        n_features,
        fp: rng.random_bool(0.5),
        iou_adj: rng.random(),
    }
}

/// Batch loss plus the ReLU activation pattern, evaluated without any
/// gradient code.
fn loss_and_pattern(
    batch: &[&PreparedGraph],
    params: &GcnnParams,
    variant: Variant,
) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for g in batch {
        let c = forward(g, params);
        total += sample_loss(&c, g, variant).0;
        pattern.extend(c.h1.iter().chain(&c.h2).map(|&v| v > 0.0));
    }
    (total / batch.len() as f64, pattern)
}

pub struct CheckStats {
    pub max_rel: f64,
    pub checked: usize,
    pub kinks: usize,
}

pub fn check(batch: &[&PreparedGraph], params: &GcnnParams, variant: Variant) -> CheckStats {
    let (_, grads) = loss_and_gradients(batch, params, variant);
    let (_, base_pattern) = loss_and_pattern(batch, params, variant);
    let mut stats = CheckStats {
        max_rel: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut p = params.clone();
    for i in 0..p.data.len() {
        let orig = p.data[i];
        p.data[i] = orig + STEP;
        let (lp, pat_p) = loss_and_pattern(batch, &p, variant);
        p.data[i] = orig - STEP;
        let (lm, pat_m) = loss_and_pattern(batch, &p, variant);
        p.data[i] = orig;
        if pat_p != base_pattern || pat_m != base_pattern {
            // the step crosses a ReLU kink: the loss is not differentiable here
            stats.kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let analytic = grads.data[i];
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        stats.max_rel = stats.max_rel.max(rel);
        stats.checked += 1;
    }
    stats
}

pub fn random_params(rng: &mut ChaCha8Rng, f: usize, h: usize, out: usize) -> GcnnParams {
    let mut p = GcnnParams::init(f, h, out, rng);
    // non-zero biases so every bias gradient is exercised
    let v = p.view_mut();
    for b in
        v.b1.iter_mut()
            .chain(v.b2.iter_mut())
            .chain(v.b3.iter_mut())
    {
        *b = rng.random_range(-0.1..0.1);
    }
    p
}

/// Gradient check of one variant on five random graphs and their batch.
/// Returns the worst relative error and whether the kink budget held.
pub fn gradient_oracle(variant: Variant, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 5;
    let graphs: Vec<PreparedGraph> = (0..5).map(|_| random_graph(&mut rng, f)).collect();
    let params = random_params(&mut rng, f, 64, variant.n_outputs());
    let mut worst = 0.0f64;
    let mut kinks_ok = true;
    for g in &graphs {
        let s = check(&[g], &params, variant);
        worst = worst.max(s.max_rel);
        kinks_ok &= s.kinks * 100 <= s.checked;
    }
    let batch: Vec<&PreparedGraph> = graphs.iter().collect();
    let s = check(&batch, &params, variant);
    (worst.max(s.max_rel), kinks_ok && s.kinks * 100 <= s.checked)
}

/// Connected random graph with `n` nodes: a random tree plus extra edges.
fn random_edges(rng: &mut ChaCha8Rng, n: usize) -> Vec<[u32; 2]> {
    let mut edges = Vec::new();
    for i in 1..n as u32 {
        edges.push([rng.random_range(0..i), i]);
    }
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            if rng.random_bool(0.15) && !edges.contains(&[i, j]) {
                edges.push([i, j]);
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Two-class toy set: FP graphs carry pcs_uncertainty 1 on every node, TP
/// graphs 0; all other features are noise.
pub fn toy_dataset(seed: u64, per_class: usize) -> Vec<LesionGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_features = 5;
    let mut out = Vec::new();
    for k in 0..2 * per_class {
        let fp = k % 2 == 1;
        let n = rng.random_range(3..=15);
        let mut features = Vec::with_capacity(n * n_features);
        for _ in 0..n {
            features.push(rng.sample::<f64, _>(StandardNormal));
            features.push(1.0);
            features.push(rng.random_range(0.0..1.0));
            features.push(rng.random_range(0.0..0.25));
            features.push(if fp { 1.0 } else { 0.0 });
        }
        out.push(LesionGraph {
            scan_id: "toy".into(),
            lesion_id: k as u32 + 1,
            n_features,
            features,
            edges: random_edges(&mut rng, n),
            iou_adj: if fp { 0.0 } else { 0.8 },
            tp: !fp,
        });
    }
    out
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, density: f64) -> LabelVolume {
    let data = (0..dims.len())
        .map(|_| u32::from(rng.random_bool(density)))
        .collect();
    LabelVolume::new(dims, data).unwrap()
}

/// Components of the foreground by breadth-first search over the 26
/// neighbours, as sorted voxel lists sorted by first voxel.
pub fn bfs_components(mask: &LabelVolume) -> Vec<Vec<usize>> {
    let dims = mask.dims();
    let (nx, ny, nz) = (dims.nx as i64, dims.ny as i64, dims.nz as i64);
    let mut seen = vec![false; dims.len()];
    let mut comps = Vec::new();
    for start in 0..dims.len() {
        if mask.at(start) == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let (x, y, z) = ((v as i64) % nx, (v as i64 / nx) % ny, v as i64 / (nx * ny));
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz {
                            continue;
                        }
                        let u = (a + nx * (b + ny * c)) as usize;
                        if mask.at(u) != 0 && !seen[u] {
                            seen[u] = true;
                            comp.push(u);
                            queue.push_back(u);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}
