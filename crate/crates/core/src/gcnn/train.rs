use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, forward, loss_and_gradients, sample_loss, AdamState, GcnnModel, GcnnParams,
    PreparedGraph, Variant, DEFAULT_HIDDEN,
};
use crate::error::{Error, Result};
use crate::graph::{FeatureScaler, LesionGraph};
use crate::lesion::{is_tp, DEFAULT_EPSILON};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Classification,
            lr_start: 1e-2,
            lr_end: 1e-5,
            epochs: 200,
            batch_size: 10,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            validation_fraction: 0.1,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "batch_size, epochs and hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0,1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Geometric decay hitting `lr_start` at epoch 0 and `lr_end` at the last epoch.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    if epoch + 1 == cfg.epochs {
        return cfg.lr_end;
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
}

fn mean_loss(graphs: &[PreparedGraph], params: &GcnnParams, variant: Variant) -> f64 {
    let total: f64 = graphs
        .iter()
        .map(|g| sample_loss(&forward(g, params), g, variant).0)
        .sum();
    total / graphs.len() as f64
}

/// Hold out `fraction` of the indices; for classification the split is
/// stratified and always leaves both classes in the training part.
fn split_indices(
    labels: &[bool],
    fraction: f64,
    stratify: bool,
    rng: &mut impl rand::Rng,
) -> (Vec<usize>, Vec<usize>) {
    let groups: Vec<Vec<usize>> = if stratify {
        [false, true]
            .iter()
            .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(rng);
        let n_val = ((g.len() as f64 * fraction).round() as usize).min(g.len().saturating_sub(1));
        val.extend_from_slice(&g[..n_val]);
        train.extend_from_slice(&g[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train(graphs: &[LesionGraph], cfg: &TrainConfig) -> Result<(GcnnModel, TrainLog)> {
    cfg.validate()?;
    let Some(first) = graphs.first() else {
        return Err(Error::Training("empty training set".into()));
    };
    let n_features = first.n_features;
    if graphs.iter().any(|g| g.n_features != n_features) {
        return Err(Error::Training("graphs disagree on feature width".into()));
    }
    let fp: Vec<bool> = graphs
        .iter()
        .map(|g| !is_tp(g.iou_adj, cfg.epsilon))
        .collect();
    match cfg.variant {
        Variant::Classification => {
            let n_fp = fp.iter().filter(|&&f| f).count();
            let n_tp = fp.len() - n_fp;
            if n_fp < 2 || n_tp < 2 {
                return Err(Error::Training(format!(
                    "classification needs at least 2 graphs per class (TP {n_tp}, FP {n_fp})"
                )));
            }
        }
        Variant::Regression => {
            if graphs.len() < 2 {
                return Err(Error::Training("regression needs at least 2 graphs".into()));
            }
        }
    }

    let mut rng = rng::stream(cfg.seed, 0, "gcnn-train");
    let (train_idx, val_idx) = split_indices(
        &fp,
        cfg.validation_fraction,
        cfg.variant == Variant::Classification,
        &mut rng,
    );
    let train_graphs: Vec<LesionGraph> = train_idx.iter().map(|&i| graphs[i].clone()).collect();
    let scaler = FeatureScaler::fit(&train_graphs)?;
    let prepare = |idx: &[usize]| -> Result<Vec<PreparedGraph>> {
        idx.iter()
            .map(|&i| {
                let mut p = PreparedGraph::new(&scaler.apply(&graphs[i])?);
                p.fp = fp[i];
                Ok(p)
            })
            .collect()
    };
    let train_set = prepare(&train_idx)?;
    let val_set = prepare(&val_idx)?;

    let mut params = GcnnParams::init(n_features, cfg.hidden, cfg.variant.n_outputs(), &mut rng);
    let mut adam = AdamState::new(params.data.len());
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        n_train: train_set.len(),
        n_val: val_set.len(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedGraph> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_gradients(&batch, &params, cfg.variant);
            epoch_loss += loss * batch.len() as f64;
            adam_step(&mut params.data, &grads.data, &mut adam, lr);
        }
        params.check_finite()?;
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = (!val_set.is_empty()).then(|| mean_loss(&val_set, &params, cfg.variant));
        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, params.clone(), epoch);
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
    }
    log.best_epoch = best.2;
    log::debug!(
        "trained {} GCNN on {} graphs ({} held out), best epoch {}",
        cfg.variant,
        log.n_train,
        log.n_val,
        log.best_epoch
    );

    let model = GcnnModel {
        variant: cfg.variant,
        params: best.1,
        scaler,
        n_channels: n_features - 4,
        seed: cfg.seed,
    };
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((learning_rate(&cfg, 0) - 1e-2).abs() < 1e-12);
        assert!((learning_rate(&cfg, cfg.epochs - 1) - 1e-5).abs() < 1e-12);
        let mid = learning_rate(&cfg, 1);
        assert!(mid < 1e-2 && mid > 1e-5);
        for e in 1..cfg.epochs {
            assert!(learning_rate(&cfg, e) < learning_rate(&cfg, e - 1));
        }
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let mut r = rng::stream(1, 0, "t");
        let (tr, va) = split_indices(&labels, 0.1, true, &mut r);
        assert_eq!(tr.len() + va.len(), 40);
        assert_eq!(va.iter().filter(|&&i| labels[i]).count(), 1);
        assert_eq!(va.iter().filter(|&&i| !labels[i]).count(), 3);
    }

    #[test]
    fn bad_configs() {
        let mut c = TrainConfig {
            lr_end: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
