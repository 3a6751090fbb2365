//! Lesion identification: 26-connected components, Adjusted IoU matching,
//! TP/FP labelling, Dice and 3x3x3 dilation.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume};

/// Default IoU_adj threshold separating true from false positive lesions.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Components numbered densely `1..=count`, in order of each component's
/// lowest linear index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub labels: LabelVolume,
    pub count: u32,
}

impl ComponentLabeling {
    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    /// Voxel lists per component, index `k - 1` for label `k`, each sorted.
    pub fn component_voxels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.data().iter().enumerate() {
            if l != 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

/// One predicted connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub id: u32,
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    pub iou_adj: f64,
    pub tp: bool,
}

impl Lesion {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // slot 0 is unused so that provisional labels start at 1
        DisjointSet { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// The 13 neighbour offsets that precede a voxel in x-fastest scan order.
const CAUSAL_OFFSETS: [(i64, i64, i64); 13] = [
    (-1, -1, -1),
    (0, -1, -1),
    (1, -1, -1),
    (-1, 0, -1),
    (0, 0, -1),
    (1, 0, -1),
    (-1, 1, -1),
    (0, 1, -1),
    (1, 1, -1),
    (-1, -1, 0),
    (0, -1, 0),
    (1, -1, 0),
    (-1, 0, 0),
];

/// Two-pass union-find labelling of a binary mask under 26-connectivity.
pub fn connected_components_26(mask: &LabelVolume) -> Result<ComponentLabeling> {
    if !mask.is_binary() {
        return Err(Error::Input(
            "connected-component analysis needs a binary mask".into(),
        ));
    }
    let dims = mask.dims();
    let mut provisional = vec![0u32; dims.len()];
    let mut sets = DisjointSet::new();

    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let idx = dims.linear(x, y, z);
                if mask.at(idx) == 0 {
                    continue;
                }
                let mut current = 0u32;
                for &(dx, dy, dz) in &CAUSAL_OFFSETS {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if !dims.contains(nx, ny, nz) {
                        continue;
                    }
                    let l = provisional[dims.linear(nx as usize, ny as usize, nz as usize)];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if l != current {
                        sets.union(current, l);
                    }
                }
                if current == 0 {
                    current = sets.make();
                }
                provisional[idx] = current;
            }
        }
    }

    // Renumber roots by first appearance in scan order.
    let mut final_of_root = vec![0u32; sets.parent.len()];
    let mut count = 0u32;
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = sets.find(*l) as usize;
        if final_of_root[root] == 0 {
            count += 1;
            final_of_root[root] = count;
        }
        *l = final_of_root[root];
    }

    Ok(ComponentLabeling {
        labels: LabelVolume::new(dims, provisional)?,
        count,
    })
}

/// One [`Lesion`] per component, with IoU_adj unset (0) and `tp = false`.
pub fn lesions_from_labeling(labeling: &ComponentLabeling) -> Vec<Lesion> {
    labeling
        .component_voxels()
        .into_iter()
        .enumerate()
        .map(|(k, voxels)| Lesion {
            id: k as u32 + 1,
            voxels,
            iou_adj: 0.0,
            tp: false,
        })
        .collect()
}

/// Precomputed ground-truth component voxel lists, so many predicted lesions
/// can be matched against one ground truth without rescanning the volume.
pub struct GtIndex<'a> {
    gt: &'a ComponentLabeling,
    voxels: Vec<Vec<usize>>,
}

impl<'a> GtIndex<'a> {
    pub fn new(gt: &'a ComponentLabeling) -> Self {
        GtIndex {
            gt,
            voxels: gt.component_voxels(),
        }
    }

    /// `|k ∩ G| / |k ∪ (G \ A)|` where `G` is the union of ground-truth
    /// components touching `k` and `A` the union of the other predicted
    /// components. Zero when `k` touches no ground truth.
    pub fn adjusted_iou(&self, k: &Lesion, pred: &ComponentLabeling) -> Result<f64> {
        if pred.dims() != self.gt.dims() {
            return Err(Error::Input(format!(
                "prediction dims {:?} differ from ground truth {:?}",
                pred.dims(),
                self.gt.dims()
            )));
        }
        let touched: BTreeSet<u32> = k
            .voxels
            .iter()
            .map(|&v| self.gt.labels.at(v))
            .filter(|&l| l != 0)
            .collect();
        if touched.is_empty() {
            return Ok(0.0);
        }
        let mut intersection = 0usize;
        let mut uncovered = 0usize;
        for &g in &touched {
            for &v in &self.voxels[g as usize - 1] {
                match pred.labels.at(v) {
                    0 => uncovered += 1,
                    l if l == k.id => intersection += 1,
                    _ => {}
                }
            }
        }
        Ok(intersection as f64 / (k.size() + uncovered) as f64)
    }
}

pub fn adjusted_iou(k: &Lesion, pred: &ComponentLabeling, gt: &ComponentLabeling) -> Result<f64> {
    GtIndex::new(gt).adjusted_iou(k, pred)
}

#[inline]
pub fn is_tp(iou_adj: f64, epsilon: f64) -> bool {
    iou_adj >= epsilon
}

/// Set `tp = iou_adj >= epsilon` on every lesion.
pub fn label_tp_fp(lesions: &mut [Lesion], epsilon: f64) {
    for l in lesions {
        l.tp = is_tp(l.iou_adj, epsilon);
    }
}

/// Label the predicted mask's components, match them to the ground-truth mask
/// and classify them as TP/FP.
pub fn extract_lesions(
    pred_mask: &LabelVolume,
    gt_mask: &LabelVolume,
    epsilon: f64,
) -> Result<(ComponentLabeling, Vec<Lesion>)> {
    if pred_mask.dims() != gt_mask.dims() {
        return Err(Error::Input(
            "prediction and ground-truth dims differ".into(),
        ));
    }
    let pred = connected_components_26(pred_mask)?;
    let gt_binary = binary_of(gt_mask);
    let gt = connected_components_26(&gt_binary)?;
    let index = GtIndex::new(&gt);
    let mut lesions = lesions_from_labeling(&pred);
    for l in &mut lesions {
        l.iou_adj = index.adjusted_iou(l, &pred)?;
    }
    label_tp_fp(&mut lesions, epsilon);
    Ok((pred, lesions))
}

fn binary_of(mask: &LabelVolume) -> LabelVolume {
    if mask.is_binary() {
        return mask.clone();
    }
    let data = mask.data().iter().map(|&l| u32::from(l != 0)).collect();
    LabelVolume::new(mask.dims(), data).expect("same dims")
}

/// `2|P∩G| / (|P| + |G|)` over non-zero voxels; 1 when both are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Input("dice: dims differ".into()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Binary dilation by the 3x3x3 cube, `iterations` times, clipped to the
/// volume. Returns sorted linear indices.
pub fn dilate_26(voxels: &[usize], dims: Dims, iterations: usize) -> Vec<usize> {
    if voxels.is_empty() {
        return Vec::new();
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &v in voxels {
        let (x, y, z) = dims.xyz(v);
        for (a, c) in [x, y, z].into_iter().enumerate() {
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    let extent = [dims.nx, dims.ny, dims.nz];
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(iterations);
        hi[a] = (hi[a] + iterations).min(extent[a] - 1);
    }
    let (bx, by, bz) = (hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
    let local = |x: usize, y: usize, z: usize| (x - lo[0]) + bx * ((y - lo[1]) + by * (z - lo[2]));

    let mut grid = vec![false; bx * by * bz];
    for &v in voxels {
        let (x, y, z) = dims.xyz(v);
        grid[local(x, y, z)] = true;
    }
    for _ in 0..iterations {
        let prev = grid.clone();
        for z in 0..bz {
            for y in 0..by {
                for x in 0..bx {
                    if !prev[x + bx * (y + by * z)] {
                        continue;
                    }
                    for zz in z.saturating_sub(1)..=(z + 1).min(bz - 1) {
                        for yy in y.saturating_sub(1)..=(y + 1).min(by - 1) {
                            for xx in x.saturating_sub(1)..=(x + 1).min(bx - 1) {
                                grid[xx + bx * (yy + by * zz)] = true;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    for z in 0..bz {
        for y in 0..by {
            for x in 0..bx {
                if grid[x + bx * (y + by * z)] {
                    out.push(dims.linear(x + lo[0], y + lo[1], z + lo[2]));
                }
            }
        }
    }
    out
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct LesionRow {
    id: u32,
    size: usize,
    iou_adj: f64,
    tp: u8,
}

/// Write the lesion table CSV: `id,size,iou_adj,tp`.
pub fn write_lesion_table(lesions: &[Lesion], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for l in lesions {
        w.serialize(LesionRow {
            id: l.id,
            size: l.size(),
            iou_adj: l.iou_adj,
            tp: l.tp as u8,
        })
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
