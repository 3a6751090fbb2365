use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{forward, GcnnParams, PreparedGraph, Variant};
use crate::error::{Error, Result};
use crate::graph::{feature_names, to_json_line, FeatureScaler, LesionGraph};

const MODEL_FORMAT: &str = "lesionuq-gcnn";
const MODEL_VERSION: u32 = 1;

/// Trained weights with the scaler and feature layout they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnnModel {
    pub variant: Variant,
    pub params: GcnnParams,
    pub scaler: FeatureScaler,
    pub n_channels: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    variant: Variant,
    n_features: usize,
    hidden: usize,
    n_outputs: usize,
    feature_names: Vec<String>,
    scaler: FeatureScaler,
    seed: u64,
    n_weights: usize,
    weight_order: Vec<String>,
}

impl GcnnModel {
    /// Scale `g` and run the network. Returns the FP probability
    /// (classification) or `1 - IoU_hat` (regression).
    pub fn predict_uncertainty(&self, g: &LesionGraph) -> Result<f64> {
        if g.n_features != self.params.n_features {
            return Err(Error::Model(format!(
                "graph has {} features, model expects {}",
                g.n_features, self.params.n_features
            )));
        }
        let scaled = self.scaler.apply(g)?;
        Ok(self.uncertainty_of(&PreparedGraph::new(&scaled)))
    }

    /// For graphs already scaled with this model's scaler.
    pub fn uncertainty_of(&self, g: &PreparedGraph) -> f64 {
        let cache = forward(g, &self.params);
        match self.variant {
            Variant::Classification => cache.class_probabilities()[1],
            Variant::Regression => 1.0 - cache.iou_hat(),
        }
    }

    /// Binary file: one JSON header line, then the weights as little-endian
    /// `f64` in `W1 b1 W2 b2 W3 b3` order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            variant: self.variant,
            n_features: self.params.n_features,
            hidden: self.params.hidden,
            n_outputs: self.params.n_out,
            feature_names: feature_names(self.n_channels),
            scaler: self.scaler.clone(),
            seed: self.seed,
            n_weights: self.params.data.len(),
            weight_order: ["W1", "b1", "W2", "b2", "W3", "b3"]
                .map(String::from)
                .to_vec(),
        };
        let mut bytes = to_json_line(&header).into_bytes();
        bytes.push(b'\n');
        for w in &self.params.data {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("model file has no header line".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format {} v{}",
                header.format, header.version
            )));
        }
        let expected = GcnnParams::param_count(header.n_features, header.hidden, header.n_outputs);
        let payload = &bytes[nl + 1..];
        if header.n_weights != expected || payload.len() != expected * 8 {
            return Err(Error::Format(format!(
                "model payload holds {} bytes, expected {} weights",
                payload.len(),
                expected
            )));
        }
        if header.n_features < 5
            || header.scaler.width() != header.n_features
            || header.n_outputs != header.variant.n_outputs()
        {
            return Err(Error::Format("inconsistent model shapes".into()));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(GcnnModel {
            variant: header.variant,
            params: GcnnParams {
                n_features: header.n_features,
                hidden: header.hidden,
                n_out: header.n_outputs,
                data,
            },
            scaler: header.scaler,
            n_channels: header.n_features - 4,
            seed: header.seed,
        })
    }
}
