use super::{GcnnParams, NormAdj, Variant};
use crate::graph::LesionGraph;

/// A scaled graph with its propagation matrix, ready for repeated passes.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub adj: NormAdj,
    /// Row-major `n × n_features`, already standardized.
    pub x: Vec<f64>,
    pub n_features: usize,
    pub fp: bool,
    pub iou_adj: f64,
}

impl PreparedGraph {
    /// `g` must already be scaled.
    pub fn new(g: &LesionGraph) -> Self {
        PreparedGraph {
            adj: NormAdj::from_graph(g),
            x: g.features.clone(),
            n_features: g.n_features,
            fp: !g.tp,
            iou_adj: g.iou_adj,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.n()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Â X
    pub ax: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// mean-pooled H2
    pub readout: Vec<f64>,
    /// logits (classification) or pre-sigmoid output (regression)
    pub out: Vec<f64>,
}

impl ForwardCache {
    /// Softmax over the two logits, `[p_tp, p_fp]`.
    pub fn class_probabilities(&self) -> [f64; 2] {
        let m = self.out[0].max(self.out[1]);
        let e0 = (self.out[0] - m).exp();
        let e1 = (self.out[1] - m).exp();
        let s = e0 + e1;
        [e0 / s, e1 / s]
    }

    pub fn iou_hat(&self) -> f64 {
        sigmoid(self.out[0])
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[i,:] += a[i,:] · w` with `a` rows×inner and `w` inner×cols.
fn matmul_acc(a: &[f64], inner: usize, w: &[f64], cols: usize, out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, wv) in orow.iter_mut().zip(&w[k * cols..(k + 1) * cols]) {
                *o += av * wv;
            }
        }
    }
}

/// `out += scale · aᵀ b` with `a` rows×inner, `b` rows×cols, `out` inner×cols.
fn matmul_at_b_acc(a: &[f64], inner: usize, b: &[f64], cols: usize, scale: f64, out: &mut [f64]) {
    for (arow, brow) in a.chunks_exact(inner).zip(b.chunks_exact(cols)) {
        for (k, &av) in arow.iter().enumerate() {
            let s = scale * av;
            if s == 0.0 {
                continue;
            }
            for (o, bv) in out[k * cols..(k + 1) * cols].iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out = d · wᵀ` with `d` rows×cols and `w` inner×cols; `out` rows×inner.
fn matmul_b_t(d: &[f64], cols: usize, w: &[f64], inner: usize, out: &mut [f64]) {
    for (drow, orow) in d.chunks_exact(cols).zip(out.chunks_exact_mut(inner)) {
        for (k, o) in orow.iter_mut().enumerate() {
            *o = drow
                .iter()
                .zip(&w[k * cols..(k + 1) * cols])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
}

fn add_bias_relu(z: &mut [f64], bias: &[f64]) {
    for row in z.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = (*v + b).max(0.0);
        }
    }
}

pub fn forward(g: &PreparedGraph, params: &GcnnParams) -> ForwardCache {
    let p = params.view();
    let (n, f, h, o) = (g.n_nodes(), g.n_features, params.hidden, params.n_out);
    debug_assert_eq!(f, params.n_features);

    let mut ax = vec![0.0; n * f];
    g.adj.propagate(&g.x, f, &mut ax);

    let mut h1 = vec![0.0; n * h];
    matmul_acc(&ax, f, p.w1, h, &mut h1);
    add_bias_relu(&mut h1, p.b1);

    let mut hw = vec![0.0; n * h];
    matmul_acc(&h1, h, p.w2, h, &mut hw);
    let mut h2 = vec![0.0; n * h];
    g.adj.propagate(&hw, h, &mut h2);
    add_bias_relu(&mut h2, p.b2);

    let mut readout = vec![0.0; h];
    for row in h2.chunks_exact(h) {
        for (r, v) in readout.iter_mut().zip(row) {
            *r += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    for r in &mut readout {
        *r *= inv_n;
    }

    let mut out = p.b3.to_vec();
    matmul_acc(&readout, h, p.w3, o, &mut out);

    ForwardCache {
        ax,
        h1,
        h2,
        readout,
        out,
    }
}

/// Loss of one graph and its derivative with respect to the head output.
pub fn sample_loss(cache: &ForwardCache, g: &PreparedGraph, variant: Variant) -> (f64, Vec<f64>) {
    match variant {
        Variant::Classification => {
            let probs = cache.class_probabilities();
            let target = usize::from(g.fp);
            // log-softmax computed stably from the logits
            let m = cache.out[0].max(cache.out[1]);
            let lse = m + ((cache.out[0] - m).exp() + (cache.out[1] - m).exp()).ln();
            let loss = lse - cache.out[target];
            let mut d = probs.to_vec();
            d[target] -= 1.0;
            (loss, d)
        }
        Variant::Regression => {
            let s = cache.iou_hat();
            let err = s - g.iou_adj;
            (err * err, vec![2.0 * err * s * (1.0 - s)])
        }
    }
}

/// Accumulate `scale · ∂loss/∂θ` into `grads` given `d_out = ∂loss/∂o`.
pub fn backward(
    g: &PreparedGraph,
    params: &GcnnParams,
    cache: &ForwardCache,
    d_out: &[f64],
    scale: f64,
    grads: &mut GcnnParams,
) {
    let p = params.view();
    let gr = grads.view_mut();
    let (n, f, h, o) = (g.n_nodes(), g.n_features, params.hidden, params.n_out);

    // head
    matmul_at_b_acc(&cache.readout, h, d_out, o, scale, gr.w3);
    for (b, d) in gr.b3.iter_mut().zip(d_out) {
        *b += scale * d;
    }
    let mut d_readout = vec![0.0; h];
    matmul_b_t(d_out, o, p.w3, h, &mut d_readout);

    // mean pooling and second ReLU
    let inv_n = 1.0 / n as f64;
    let mut dz2 = vec![0.0; n * h];
    for (drow, hrow) in dz2.chunks_exact_mut(h).zip(cache.h2.chunks_exact(h)) {
        for ((d, &hv), &dr) in drow.iter_mut().zip(hrow).zip(&d_readout) {
            if hv > 0.0 {
                *d = dr * inv_n;
            }
        }
    }
    for row in dz2.chunks_exact(h) {
        for (b, d) in gr.b2.iter_mut().zip(row) {
            *b += scale * d;
        }
    }

    // second convolution: Z2 = Â (H1 W2) + b2, Â symmetric
    let mut d_hw = vec![0.0; n * h];
    g.adj.propagate(&dz2, h, &mut d_hw);
    matmul_at_b_acc(&cache.h1, h, &d_hw, h, scale, gr.w2);
    let mut dz1 = vec![0.0; n * h];
    matmul_b_t(&d_hw, h, p.w2, h, &mut dz1);
    for (d, &hv) in dz1.iter_mut().zip(&cache.h1) {
        if hv <= 0.0 {
            *d = 0.0;
        }
    }
    for row in dz1.chunks_exact(h) {
        for (b, d) in gr.b1.iter_mut().zip(row) {
            *b += scale * d;
        }
    }

    // first convolution: Z1 = (Â X) W1 + b1
    matmul_at_b_acc(&cache.ax, f, &dz1, h, scale, gr.w1);
}

/// Mean loss over `batch` and its exact gradient.
pub fn loss_and_gradients(
    batch: &[&PreparedGraph],
    params: &GcnnParams,
    variant: Variant,
) -> (f64, GcnnParams) {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for g in batch {
        let cache = forward(g, params);
        let (loss, d_out) = sample_loss(&cache, g, variant);
        total += loss;
        backward(g, params, &cache, &d_out, scale, &mut grads);
    }
    (total * scale, grads)
}

/// Which hidden units are active, used to detect ReLU kinks.
pub fn relu_pattern(g: &PreparedGraph, params: &GcnnParams) -> Vec<bool> {
    let c = forward(g, params);
    c.h1.iter().chain(&c.h2).map(|&v| v > 0.0).collect()
}
