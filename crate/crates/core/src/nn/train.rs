use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mini-batch SGD on softmax cross-entropy. Deterministic given `cfg.seed`.
///
/// A zero learning rate is accepted and leaves the parameters untouched.
pub fn train(net: &Network, images: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes: net.num_classes(),
        });
    }

    let mut net = net.clone();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[0x7a11, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Tensor> = net
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let cache = net.forward(&images[i])?;
                let p = cache.probabilities.data();
                batch_loss -= p[labels[i]].max(f64::MIN_POSITIVE).ln();
                let mut cot = cache.probabilities.clone();
                cot[labels[i]] -= 1.0;
                net.accumulate_param_grads(&cache, &cot, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            if cfg.learning_rate > 0.0 {
                let step = cfg.learning_rate / batch.len() as f64;
                for (name, g) in &grads {
                    let p = net.params_mut().get_mut(name).expect("same keys");
                    p.add_assign_scaled(g, -step)?;
                    if !p.is_finite() {
                        return Err(Error::Divergence {
                            epoch,
                            batch: b,
                            loss: f64::NAN,
                        });
                    }
                }
            }
        }
        loss_history.push(epoch_loss / images.len() as f64);
    }
    let train_accuracy = accuracy(&net, images, labels)?;
    Ok(TrainOutcome {
        network: net,
        loss_history,
        train_accuracy,
    })
}

pub fn accuracy(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut correct = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        if super::network::argmax(net.logits(x)?.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}
