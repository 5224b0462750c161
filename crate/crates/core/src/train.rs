//! Minibatch SGD with momentum on cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, softmax};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 0.02, batch_size: 32, momentum: 0.9, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Accuracy on the held-out 20%.
    pub accuracy: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Initialises `spec` from `cfg.seed`, trains on the first 80% of `data`
/// and reports accuracy on the remaining 20%. Single-threaded and
/// deterministic for a fixed seed.
pub fn train(spec: &ModelSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let (train_set, held_out) = data.split();
    if train_set.is_empty() {
        return Err(Error::Usage("training needs at least one training sample".into()));
    }
    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let mut velocity: Vec<Tensor> = model.graph.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Step decay: full rate, then a tenth for the last quarter.
        let lr = if epoch * 4 >= cfg.epochs * 3 { cfg.lr * 0.1 } else { cfg.lr };
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            let mut grads: Vec<Tensor> = velocity.iter().map(|v| Tensor::zeros(v.shape())).collect();
            let scale = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let graph = &model.graph;
                let (logits, tape) = graph.forward(&train_set.images[i]).map_err(|e| diverged(e, epoch))?;
                let label = train_set.labels[i];
                epoch_loss += cross_entropy(logits.data(), label);
                let mut seed = Tensor::vector(&softmax(logits.data()));
                seed.data_mut()[label] -= 1.0;
                for v in seed.data_mut() {
                    *v *= scale;
                }
                let g = tape.backward_with_params(&[(graph.logits_id(), &seed)])?;
                for (acc, pg) in grads.iter_mut().zip(g.params().expect("requested")) {
                    acc.add_assign(pg)?;
                }
            }
            if !epoch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            for ((p, v), g) in model.graph.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), &gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
        final_loss = epoch_loss / train_set.len() as f64;
        log::debug!("epoch {epoch}: loss {final_loss:.4}");
    }

    let report = TrainReport { accuracy: accuracy(&model, &held_out)?, final_loss, epochs: cfg.epochs };
    Ok((model, report))
}

fn diverged(e: Error, epoch: usize) -> Error {
    if e.is_numerical() {
        Error::Divergence { epoch }
    } else {
        e
    }
}
