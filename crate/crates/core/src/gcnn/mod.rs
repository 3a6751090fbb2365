//! Graph convolutional network for lesion-level uncertainty.
//!
//! Two symmetric-normalized graph convolutions with ReLU, mean pooling over
//! nodes, and a linear head:
//!
//! ```text
//! H1 = relu(Â X W1 + b1)
//! H2 = relu(Â H1 W2 + b2)
//! r  = mean_nodes(H2)
//! o  = r W3 + b3
//! ```
//!
//! with `Â = D^-1/2 (A + I) D^-1/2`. The classification variant reads `o` as
//! two logits (TP, FP); the regression variant squashes the single output
//! through a sigmoid to predict IoU_adj. Gradients are derived by hand.

mod adam;
mod adjacency;
mod model;
mod network;
mod train;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use adjacency::NormAdj;
pub use model::GcnnModel;
pub use network::{
    backward, forward, loss_and_gradients, relu_pattern, sample_loss, sigmoid, ForwardCache,
    PreparedGraph,
};
pub use train::{learning_rate, train, EpochLog, TrainConfig, TrainLog};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Classification,
    Regression,
}

impl Variant {
    pub fn n_outputs(self) -> usize {
        match self {
            Variant::Classification => 2,
            Variant::Regression => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "classif" => Ok(Variant::Classification),
            "regression" | "reg" => Ok(Variant::Regression),
            other => Err(Error::Config(format!("unknown GCNN variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Classification => "classification",
            Variant::Regression => "regression",
        })
    }
}

/// All weights in one flat buffer: `W1 (F×h) | b1 (h) | W2 (h×h) | b2 (h) |
/// W3 (h×out) | b3 (out)`, matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnnParams {
    pub n_features: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub data: Vec<f64>,
}

pub struct ParamsView<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub w3: &'a [f64],
    pub b3: &'a [f64],
}

pub struct ParamsViewMut<'a> {
    pub w1: &'a mut [f64],
    pub b1: &'a mut [f64],
    pub w2: &'a mut [f64],
    pub b2: &'a mut [f64],
    pub w3: &'a mut [f64],
    pub b3: &'a mut [f64],
}

impl GcnnParams {
    pub fn param_count(n_features: usize, hidden: usize, n_out: usize) -> usize {
        n_features * hidden + hidden + hidden * hidden + hidden + hidden * n_out + n_out
    }

    pub fn zeros(n_features: usize, hidden: usize, n_out: usize) -> Self {
        GcnnParams {
            n_features,
            hidden,
            n_out,
            data: vec![0.0; Self::param_count(n_features, hidden, n_out)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_features, self.hidden, self.n_out)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(n_features: usize, hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(n_features, hidden, n_out);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w {
                *x = rng.random_range(-a..a);
            }
        };
        let v = p.view_mut();
        fill(v.w1, n_features, hidden);
        fill(v.w2, hidden, hidden);
        fill(v.w3, hidden, n_out);
        p
    }

    fn offsets(&self) -> [usize; 7] {
        let (f, h, o) = (self.n_features, self.hidden, self.n_out);
        let sizes = [f * h, h, h * h, h, h * o, o];
        let mut out = [0; 7];
        for (i, s) in sizes.iter().enumerate() {
            out[i + 1] = out[i] + s;
        }
        out
    }

    pub fn view(&self) -> ParamsView<'_> {
        let o = self.offsets();
        let d = &self.data;
        ParamsView {
            w1: &d[o[0]..o[1]],
            b1: &d[o[1]..o[2]],
            w2: &d[o[2]..o[3]],
            b2: &d[o[3]..o[4]],
            w3: &d[o[4]..o[5]],
            b3: &d[o[5]..o[6]],
        }
    }

    pub fn view_mut(&mut self) -> ParamsViewMut<'_> {
        let o = self.offsets();
        let (w1, rest) = self.data.split_at_mut(o[1]);
        let (b1, rest) = rest.split_at_mut(o[2] - o[1]);
        let (w2, rest) = rest.split_at_mut(o[3] - o[2]);
        let (b2, rest) = rest.split_at_mut(o[4] - o[3]);
        let (w3, b3) = rest.split_at_mut(o[5] - o[4]);
        ParamsViewMut {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Training("non-finite GCNN parameter".into()))
        }
    }
}
