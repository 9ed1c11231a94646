// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backward::Backward;
use super::forward::{Batch, Hooks};
use super::{argmax, ModelConfig, Params, Transformer};
use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Probability of silencing an FFN unit for a whole training sequence.
    /// Kept units are rescaled by `1 / (1 - p)`.
    #[serde(default)]
    pub ffn_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 1e-3, batch_size: 8, weight_decay: 0.0, ffn_dropout: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Top-1 accuracy on the batches as seen during the epoch, before updates.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Top-1 accuracy of the final model over the whole training set.
    pub final_accuracy: f64,
}

struct Adam<T> {
    m: Params<T>,
    v: Params<T>,
    step: i32,
    lr: f64,
    wd: f64,
}

impl<T: Scalar> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &Params<T>, lr: f64, wd: f64) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, lr, wd }
    }

    fn update(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.step += 1;
        let b1 = T::lit(Self::B1);
        let b2 = T::lit(Self::B2);
        let c1 = T::one() - T::lit(Self::B1.powi(self.step));
        let c2 = T::one() - T::lit(Self::B2.powi(self.step));
        let lr = T::lit(self.lr);
        let wd = T::lit(self.wd);
        let eps = T::lit(Self::EPS);
        let it =
            params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, g), m), v) in it {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}

/// One mask per layer; each sequence silences its own random units at every
/// position.
fn unit_dropout_masks<T: Scalar>(batch: &Batch, config: &ModelConfig, p: f64, rng: &mut impl Rng) -> Vec<Array2<T>> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..config.n_layers)
        .map(|_| {
            let mut m = Array2::zeros((batch.rows(), config.ffn_dim));
            for seg in &batch.segs {
                for u in 0..config.ffn_dim {
                    if rng.random::<f64>() >= p {
                        m.slice_mut(s![seg.start..seg.start + seg.len, u]).fill(keep);
                    }
                }
            }
            m
        })
        .collect()
}

/// Fraction of `queries` whose gold token is the model's top-1 prediction.
pub fn evaluate_top1<T: Scalar>(model: &Transformer<T>, queries: &[ClozeQuery]) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for q in queries {
        if model.top1(q, None)? == q.gold_token {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Trains a fresh model on the cloze objective (cross-entropy of the gold
/// token at each query's prediction position) with Adam.
pub fn train<T: Scalar>(
    corpus: &[ClozeQuery],
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<(Transformer<T>, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&train.ffn_dropout) {
        return Err(Error::Config(format!("ffn_dropout {} must lie in [0, 1)", train.ffn_dropout)));
    }
    let mut model = Transformer::<T>::init(config)?;
    for q in corpus {
        model.check_query(q)?;
    }

    let mut adam = Adam::new(&model.params, train.learning_rate, train.weight_decay);
    let mut rng = seeds::rng_for(train.seed, "train-order");
    let mut drop_rng = seeds::rng_for(train.seed, "ffn-dropout");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epochs = Vec::with_capacity(train.epochs);

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let batch = Batch::from_sequences(
                chunk.iter().map(|&i| (corpus[i].tokens.as_slice(), corpus[i].prediction_position())),
            );
            let gold: Vec<_> = chunk.iter().map(|&i| corpus[i].gold_token).collect();
            let hooks = Hooks {
                dropout: (train.ffn_dropout > 0.0)
                    .then(|| unit_dropout_masks(&batch, &model.config, train.ffn_dropout, &mut drop_rng)),
                ..Hooks::none()
            };
            let cache = model.forward(&batch, &hooks);
            for (s, &t) in gold.iter().enumerate() {
                let row = cache.probs.row(s);
                let p = row[t as usize].to_f64().unwrap_or(f64::NAN);
                loss_sum -= p.max(1e-300).ln();
                if argmax(row.as_slice().expect("contiguous")) == t as usize {
                    hits += 1;
                }
            }
            let grads = Backward::new(&model, &cache)
                .cross_entropy(&gold, 1.0 / chunk.len() as f64)
                .with_params()
                .run()
                .params
                .expect("parameter gradients requested");
            adam.update(&mut model.params, &grads);
        }
        let loss = loss_sum / corpus.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.4}, acc {:.3}", hits as f64 / corpus.len() as f64);
        epochs.push(EpochLog { epoch, loss, accuracy: hits as f64 / corpus.len() as f64 });
    }

    let final_accuracy = evaluate_top1(&model, corpus)?;
    Ok((model, TrainLog { epochs, final_accuracy }))
}
