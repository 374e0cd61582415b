//! SGD-with-momentum training for the tiny classifier.
//!
//! Deterministic given `rng_seed`: initialization is the caller's (seeded)
//! job, and batch shuffling derives from the seed per epoch. Optional early
//! stopping watches validation accuracy and restores the best snapshot.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, VitParams};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Stop after this many epochs without a validation-accuracy improvement.
    pub early_stop_patience: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale defaults: lr 0.03, momentum 0.9, small epoch cap.
    pub fn desk(rng_seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.03,
            momentum: 0.9,
            epochs: 12,
            batch_size: 64,
            rng_seed,
            early_stop_patience: Some(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Train(format!("learning_rate {} invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Train(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Train("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochMetrics>,
}

fn image_len(images: &Tensor<f32>) -> Result<(usize, usize)> {
    match images.shape() {
        [n, c, h, w] => Ok((*n, c * h * w)),
        other => Err(Error::Train(format!("expected [N,C,H,W] images, got {other:?}"))),
    }
}

fn gather_batch(images: &Tensor<f32>, per: usize, idx: &[usize], shape_tail: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(shape_tail);
    Tensor::from_vec(&shape, data).expect("consistent batch geometry")
}

pub(crate) fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose argmax logit matches the label.
pub fn accuracy(params: &VitParams<f32>, images: &Tensor<f32>, labels: &[usize], batch_size: usize) -> Result<f64> {
    let (n, per) = image_len(images)?;
    if n != labels.len() {
        return Err(Error::Train(format!("{n} images vs {} labels", labels.len())));
    }
    let classes = params.config.num_classes;
    let tail = images.shape()[1..].to_vec();
    let mut correct = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let batch = gather_batch(images, per, &idx, &tail);
        let logits = vit::forward_logits(params, &batch)?;
        for (b, &i) in idx.iter().enumerate() {
            if argmax_row(&logits.data()[b * classes..(b + 1) * classes]) == labels[i] {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Train in place; returns the per-epoch trace. With early stopping enabled
/// and validation data present, the best-validation snapshot is restored.
pub fn train(
    params: &mut VitParams<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    val: Option<(&Tensor<f32>, &[usize])>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let (n, per) = image_len(images)?;
    if n == 0 || labels.is_empty() {
        return Err(Error::Train("empty dataset".into()));
    }
    if n != labels.len() {
        return Err(Error::Train(format!("{n} images vs {} labels", labels.len())));
    }
    let classes = params.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Train(format!("label {bad} out of range 0..{classes}")));
    }
    let tail: Vec<usize> = images.shape()[1..].to_vec();

    let mut velocity = VitParams::<f32>::zeros(params.config)?;
    let lr = cfg.learning_rate as f32;
    let mom = cfg.momentum as f32;

    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, VitParams<f32>)> = None;
    let mut stale = 0usize;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::stream(rng::derive(cfg.rng_seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_batch(images, per, chunk, &tail);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = vit::forward(params, &batch)?;
            let loss = vit::cross_entropy(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
            for (b, &y) in batch_labels.iter().enumerate() {
                if argmax_row(&logits.data()[b * classes..(b + 1) * classes]) == y {
                    correct += 1;
                }
            }
            let (grads, _) = vit::backward(params, &batch, &batch_labels, &cache)?;

            // v = momentum * v + g ; p -= lr * v
            let mut gflat: Vec<f32> = Vec::new();
            grads.visit(&mut |_, s| gflat.extend_from_slice(s));
            let mut off = 0;
            velocity.visit_mut(&mut |_, v| {
                let len = v.len();
                for (vv, &g) in v.iter_mut().zip(&gflat[off..off + len]) {
                    *vv = mom * *vv + g;
                }
                off += len;
            });
            let mut vflat: Vec<f32> = Vec::new();
            velocity.visit(&mut |_, s| vflat.extend_from_slice(s));
            let mut off = 0;
            params.visit_mut(&mut |_, p| {
                let len = p.len();
                for (pv, &v) in p.iter_mut().zip(&vflat[off..off + len]) {
                    *pv -= lr * v;
                }
                off += len;
            });
        }

        let val_accuracy = match val {
            Some((vx, vy)) => Some(accuracy(params, vx, vy, cfg.batch_size)?),
            None => None,
        };
        trace.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_accuracy,
        });

        if let (Some(patience), Some(va)) = (cfg.early_stop_patience, val_accuracy) {
            let improved = best.as_ref().map_or(true, |(b, _)| va > *b);
            if improved {
                best = Some((va, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        *params = snapshot;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use rand::Rng;

    fn tiny_config() -> VitConfig {
        VitConfig {
            channels: 1,
            height: 4,
            width: 4,
            patch_size: 2,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_hidden: 16,
            num_classes: 2,
        }
    }

    /// Two separable classes: class = brightness of the image.
    fn toy_data(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
        let mut r = rng::stream(seed);
        let mut data = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let base = if y == 0 { 0.25 } else { 0.75 };
            for _ in 0..16 {
                data.push((base + r.random_range(-0.15..0.15f64)) as f32);
            }
            labels.push(y);
        }
        (Tensor::from_vec(&[n, 1, 4, 4], data).unwrap(), labels)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = tiny_config();
        let mut params = VitParams::<f32>::init(cfg, 1).unwrap();
        let before = params.clone();
        let (x, y) = toy_data(32, 2);
        let tc = TrainConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            epochs: 3,
            batch_size: 8,
            rng_seed: 5,
            early_stop_patience: None,
        };
        train(&mut params, &x, &y, None, &tc).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn same_seed_trains_identically() {
        let cfg = tiny_config();
        let (x, y) = toy_data(64, 7);
        let tc = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 4,
            batch_size: 16,
            rng_seed: 11,
            early_stop_patience: None,
        };
        let mut a = VitParams::<f32>::init(cfg, 3).unwrap();
        train(&mut a, &x, &y, None, &tc).unwrap();
        let mut b = VitParams::<f32>::init(cfg, 3).unwrap();
        train(&mut b, &x, &y, None, &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let cfg = tiny_config();
        let mut params = VitParams::<f32>::init(cfg, 9).unwrap();
        let (x, y) = toy_data(128, 13);
        let tc = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
            rng_seed: 17,
            early_stop_patience: None,
        };
        let trace = train(&mut params, &x, &y, None, &tc).unwrap();
        let final_acc = trace.epochs.last().unwrap().train_accuracy;
        assert!(final_acc >= 0.95, "train accuracy {final_acc}");
        assert_eq!(trace.epochs.len(), 20);
        for (i, e) in trace.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = tiny_config();
        let mut params = VitParams::<f32>::init(cfg, 1).unwrap();
        let x = Tensor::<f32>::from_vec(&[1, 1, 4, 4], vec![0.0; 16]).unwrap();
        let err = train(&mut params, &x, &[], None, &TrainConfig::desk(1)).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn early_stopping_restores_best_snapshot() {
        let cfg = tiny_config();
        let mut params = VitParams::<f32>::init(cfg, 21).unwrap();
        let (x, y) = toy_data(64, 23);
        let (vx, vy) = toy_data(32, 29);
        let tc = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            rng_seed: 31,
            early_stop_patience: Some(2),
        };
        let trace = train(&mut params, &x, &y, Some((&vx, &vy)), &tc).unwrap();
        assert!(!trace.epochs.is_empty());
        let best_val = trace
            .epochs
            .iter()
            .filter_map(|e| e.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let final_val = accuracy(&params, &vx, &vy, 16).unwrap();
        assert!((final_val - best_val).abs() < 1e-12, "restored {final_val}, best {best_val}");
    }
}
