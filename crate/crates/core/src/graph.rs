//! Lesion graphs: one node per voxel of the dilated lesion, 26-neighbour
//! edges, `n + 4` node features.
//!
//! Feature columns, in order: `n` intensity channels, the binarized
//! segmentation label, entropy, variance and PCS uncertainty.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion::{dilate_26, Lesion};
use crate::maps::UncertaintyMaps;
use crate::volume::{LabelVolume, Volume};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DILATION_ITERS: usize = 1;

pub fn feature_names(n_channels: usize) -> Vec<String> {
    (0..n_channels)
        .map(|c| format!("intensity_{c}"))
        .chain(
            ["label", "entropy", "variance", "pcs_uncertainty"]
                .iter()
                .map(|s| s.to_string()),
        )
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionGraph {
    pub scan_id: String,
    pub lesion_id: u32,
    pub n_features: usize,
    /// Row-major `n_nodes x n_features`.
    pub features: Vec<f64>,
    /// Undirected edges `[i, j]` with `i < j`, sorted.
    pub edges: Vec<[u32; 2]>,
    pub iou_adj: f64,
    pub tp: bool,
}

impl LesionGraph {
    pub fn n_nodes(&self) -> usize {
        self.features.len() / self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Same graph with nodes reordered so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LesionGraph {
        let n = self.n_nodes();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0u32; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new as u32;
        }
        let features = perm
            .iter()
            .flat_map(|&old| self.row(old).iter().copied())
            .collect();
        let mut edges: Vec<[u32; 2]> = self
            .edges
            .iter()
            .map(|&[a, b]| {
                let (a, b) = (inverse[a as usize], inverse[b as usize]);
                [a.min(b), a.max(b)]
            })
            .collect();
        edges.sort_unstable();
        LesionGraph {
            features,
            edges,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_features < 5 {
            return Err(Error::Format(format!(
                "graphs need at least 5 feature columns, got {}",
                self.n_features
            )));
        }
        if self.features.is_empty() || self.features.len() % self.n_features != 0 {
            return Err(Error::Format(format!(
                "{} feature values do not form rows of width {}",
                self.features.len(),
                self.n_features
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite node feature".into()));
        }
        let n = self.n_nodes() as u32;
        for &[a, b] in &self.edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Format(format!(
                    "invalid edge [{a}, {b}] for {n} nodes"
                )));
            }
        }
        Ok(())
    }
}

/// Build the graph of one lesion after `dilation_iters` rounds of 3x3x3
/// dilation.
pub fn build_graph(
    scan_id: &str,
    lesion: &Lesion,
    intensity: &[Volume],
    seg: &LabelVolume,
    maps: &UncertaintyMaps,
    dilation_iters: usize,
) -> Result<LesionGraph> {
    let dims = seg.dims();
    if lesion.voxels.is_empty() {
        return Err(Error::Input(format!("lesion {} is empty", lesion.id)));
    }
    if intensity.iter().any(|v| v.dims() != dims) || maps.dims() != dims {
        return Err(Error::Input(
            "intensity, segmentation and uncertainty maps must share dims".into(),
        ));
    }
    let nodes = dilate_26(&lesion.voxels, dims, dilation_iters);
    let n_features = intensity.len() + 4;

    let mut features = Vec::with_capacity(nodes.len() * n_features);
    for &v in &nodes {
        features.extend(intensity.iter().map(|vol| vol.at(v)));
        features.push(if seg.at(v) != 0 { 1.0 } else { 0.0 });
        features.push(maps.entropy.at(v));
        features.push(maps.variance.at(v));
        features.push(maps.pcs_uncertainty.at(v));
    }

    let mut edges = Vec::new();
    for (i, &v) in nodes.iter().enumerate() {
        for u in dims.neighbors_26(v) {
            if u > v {
                // nodes are sorted, so the neighbour's node index is > i
                if let Ok(j) = nodes.binary_search(&u) {
                    edges.push([i as u32, j as u32]);
                }
            }
        }
    }
    edges.sort_unstable();

    Ok(LesionGraph {
        scan_id: scan_id.to_string(),
        lesion_id: lesion.id,
        n_features,
        features,
        edges,
        iou_adj: lesion.iou_adj,
        tp: lesion.tp,
    })
}

/// Per-column z-scoring statistics fitted on a training pool of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(graphs: &[LesionGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Input("cannot fit a scaler on zero graphs".into()))?;
        let f = first.n_features;
        if graphs.iter().any(|g| g.n_features != f) {
            return Err(Error::Input("graphs disagree on feature width".into()));
        }
        let mut count = 0usize;
        let mut mean = vec![0.0; f];
        for g in graphs {
            for row in g.features.chunks_exact(f) {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
                count += 1;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; f];
        for g in graphs {
            for row in g.features.chunks_exact(f) {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, g: &LesionGraph) -> Result<LesionGraph> {
        if g.n_features != self.width() {
            return Err(Error::Model(format!(
                "graph has {} features, scaler expects {}",
                g.n_features,
                self.width()
            )));
        }
        let mut out = g.clone();
        for row in out.features.chunks_exact_mut(g.n_features) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}

/// Graphs plus the feature layout they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub n_channels: usize,
    pub graphs: Vec<LesionGraph>,
}

impl GraphDataset {
    pub fn feature_names(&self) -> Vec<String> {
        feature_names(self.n_channels)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    n_channels: usize,
    feature_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scan_id: String,
    lesion_id: u32,
    n_nodes: usize,
    features: Vec<f64>,
    edges: Vec<[u32; 2]>,
    iou_adj: f64,
    tp: bool,
}

/// JSON formatter that writes every real with 17 significant digits.
pub(crate) struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// Write a JSON Lines dataset: a header line, then one graph per line.
pub fn write_graph_dataset(ds: &GraphDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        n_channels: ds.n_channels,
        feature_names: ds.feature_names(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(to_json_line(&header))?;
    for g in &ds.graphs {
        if g.n_features != ds.n_channels + 4 {
            return Err(Error::Input(format!(
                "graph {}/{} has {} features, dataset expects {}",
                g.scan_id,
                g.lesion_id,
                g.n_features,
                ds.n_channels + 4
            )));
        }
        emit(to_json_line(&Record {
            scan_id: g.scan_id.clone(),
            lesion_id: g.lesion_id,
            n_nodes: g.n_nodes(),
            features: g.features.clone(),
            edges: g.edges.clone(),
            iou_adj: g.iou_adj,
            tp: g.tp,
        }))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_graph_dataset(path: impl AsRef<Path>) -> Result<GraphDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let Some((_, first)) = lines.next() else {
        return Ok(GraphDataset {
            n_channels: 1,
            graphs: Vec::new(),
        });
    };
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}:1: bad header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported graph dataset version {}",
            header.format_version
        )));
    }
    if header.feature_names != feature_names(header.n_channels) {
        return Err(Error::Format("unexpected feature column layout".into()));
    }
    let width = header.n_channels + 4;
    let mut graphs = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{lineno}: {e}", path.display())))?;
        if rec.features.len() != rec.n_nodes * width {
            return Err(Error::Format(format!(
                "{}:{lineno}: {} features for {} nodes of width {width}",
                path.display(),
                rec.features.len(),
                rec.n_nodes
            )));
        }
        let g = LesionGraph {
            scan_id: rec.scan_id,
            lesion_id: rec.lesion_id,
            n_features: width,
            features: rec.features,
            edges: rec.edges,
            iou_adj: rec.iou_adj,
            tp: rec.tp,
        };
        g.validate()
            .map_err(|e| Error::Format(format!("{}:{lineno}: {e}", path.display())))?;
        graphs.push(g);
    }
    Ok(GraphDataset {
        n_channels: header.n_channels,
        graphs,
    })
}
