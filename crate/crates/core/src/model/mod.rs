// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal pre-LN transformer with exposed FFN neurons.
//!
//! A "neuron" is one unit of an FFN intermediate activation (post-GELU,
//! before the down-projection). The model supports two kinds of hooks on
//! those units:
//!
//! - an [`Intervention`] rescales or overwrites the targeted units at every
//!   token position (used for editing and suppression);
//! - clamps overwrite units at the prediction position only (used on the
//!   attribution path, where gradients are taken with respect to the
//!   clamped value).
//!
//! Forward and backward passes run over packed batches: every position-wise
//! operation sees all sequences stacked row-wise, attention runs per
//! sequence.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod intervention;
mod params;
mod train;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeQuery, TokenId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, AnyTransformer, CheckpointHeader};
pub use config::ModelConfig;
pub use forward::gelu;
pub use intervention::{EditMode, Intervention, ENHANCE_FACTOR};
pub use params::Params;
pub use train::{evaluate_top1, train, EpochLog, TrainConfig, TrainLog};

pub(crate) use backward::Backward;
pub(crate) use forward::{Batch, Clamp, Hooks};

/// Coordinates of one FFN unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

/// FFN activations at one position, `n_layers x ffn_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot<T> {
    pub values: Array2<T>,
    pub prediction_position: usize,
}

impl<T: Scalar> ActivationSnapshot<T> {
    pub fn get(&self, id: NeuronId) -> T {
        self.values[[id.layer, id.unit]]
    }

    pub fn layer(&self, layer: usize) -> Vec<T> {
        self.values.row(layer).to_vec()
    }
}

/// Gold-answer probability and its gradient with respect to every neuron at
/// the prediction position.
#[derive(Debug, Clone)]
pub struct NeuronGradient<T> {
    pub prob: T,
    /// `n_layers x ffn_dim`
    pub grad: Array2<T>,
}

/// A trained (or freshly initialised) transformer. Immutable once built;
/// every inference carries its own hooks.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn ffn_dim(&self) -> usize {
        self.config.ffn_dim
    }

    pub fn check_neuron(&self, id: NeuronId) -> Result<()> {
        if id.layer >= self.config.n_layers || id.unit >= self.config.ffn_dim {
            return Err(Error::NeuronOutOfRange {
                layer: id.layer,
                unit: id.unit,
                layers: self.config.n_layers,
                units: self.config.ffn_dim,
            });
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId], pred: usize) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::Query(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if pred >= tokens.len() {
            return Err(Error::Query(format!("prediction position {pred} past sequence end")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Query(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    pub(crate) fn check_query(&self, query: &ClozeQuery) -> Result<()> {
        if query.architecture != self.config.architecture {
            return Err(Error::Query(format!(
                "query `{}` is {} but the model is {}",
                query.id, query.architecture, self.config.architecture
            )));
        }
        if query.gold_token as usize >= self.config.vocab_size {
            return Err(Error::Query(format!("gold token of `{}` outside vocabulary", query.id)));
        }
        self.check_tokens(&query.tokens, query.prediction_position())
    }

    fn check_intervention(&self, intervention: Option<&Intervention>) -> Result<()> {
        if let Some(iv) = intervention {
            for id in iv.targets() {
                self.check_neuron(id)?;
            }
        }
        Ok(())
    }

    /// Output distribution at the prediction position of `tokens`.
    pub fn predict_tokens(
        &self,
        tokens: &[TokenId],
        pred: usize,
        intervention: Option<&Intervention>,
    ) -> Result<Vec<T>> {
        self.check_tokens(tokens, pred)?;
        self.check_intervention(intervention)?;
        let batch = Batch::single(tokens, pred);
        let hooks = Hooks { intervention, clamps: Vec::new(), dropout: None };
        let out = self.forward(&batch, &hooks);
        Ok(out.probs.row(0).to_vec())
    }

    /// Distribution over the vocabulary at the query's prediction position.
    pub fn predict(&self, query: &ClozeQuery, intervention: Option<&Intervention>) -> Result<Vec<T>> {
        self.check_query(query)?;
        self.predict_tokens(&query.tokens, query.prediction_position(), intervention)
    }

    pub fn gold_prob(&self, query: &ClozeQuery, intervention: Option<&Intervention>) -> Result<T> {
        Ok(self.predict(query, intervention)?[query.gold_token as usize])
    }

    pub fn top1(&self, query: &ClozeQuery, intervention: Option<&Intervention>) -> Result<TokenId> {
        Ok(argmax(&self.predict(query, intervention)?) as TokenId)
    }

    /// FFN activations at position `pos` of `tokens`, without hooks.
    pub fn activations_at(&self, tokens: &[TokenId], pos: usize) -> Result<ActivationSnapshot<T>> {
        self.check_tokens(tokens, pos)?;
        let batch = Batch::single(tokens, pos);
        let out = self.forward(&batch, &Hooks::none());
        Ok(ActivationSnapshot { values: out.neurons_at_pred(0), prediction_position: pos })
    }

    /// FFN activations at the prediction position with `intervention` active.
    pub fn activations_with(&self, query: &ClozeQuery, intervention: &Intervention) -> Result<ActivationSnapshot<T>> {
        self.check_query(query)?;
        self.check_intervention(Some(intervention))?;
        let pred = query.prediction_position();
        let batch = Batch::single(&query.tokens, pred);
        let hooks = Hooks { intervention: Some(intervention), clamps: Vec::new(), dropout: None };
        let out = self.forward(&batch, &hooks);
        Ok(ActivationSnapshot { values: out.neurons_at_pred(0), prediction_position: pred })
    }

    pub fn record_activations(&self, query: &ClozeQuery) -> Result<ActivationSnapshot<T>> {
        self.check_query(query)?;
        self.activations_at(&query.tokens, query.prediction_position())
    }

    /// `d p(gold) / d activation` for every neuron at the prediction position,
    /// with the `clamped` neurons overwritten there during the forward pass.
    pub fn grad_answer_prob_wrt_neurons(
        &self,
        query: &ClozeQuery,
        clamped: &BTreeMap<NeuronId, T>,
    ) -> Result<NeuronGradient<T>> {
        self.check_query(query)?;
        let mut units = Vec::with_capacity(clamped.len());
        for (&id, &v) in clamped {
            self.check_neuron(id)?;
            if !v.is_finite() {
                return Err(Error::Query(format!("clamp value for {id} is not finite")));
            }
            units.push((id, v));
        }
        let batch = Batch::single(&query.tokens, query.prediction_position());
        let hooks = Hooks { intervention: None, clamps: vec![Some(Clamp::Units(units))], dropout: None };
        let cache = self.forward(&batch, &hooks);
        let prob = cache.probs[[0, query.gold_token as usize]];
        let grads = Backward::new(self, &cache).prob_of(&[query.gold_token]).stop_at(0).run();
        let mut grad = Array2::zeros((self.n_layers(), self.ffn_dim()));
        for l in 0..self.n_layers() {
            grad.row_mut(l).assign(&grads.neuron_grad(l, 0));
        }
        Ok(NeuronGradient { prob, grad })
    }

    /// Gold probability and layer-`layer` neuron gradient at each point, where
    /// point `s` clamps the whole layer at the prediction position to
    /// `points[s]`. Used by the layer-interpolation attribution path.
    pub fn layer_path_gradients(
        &self,
        query: &ClozeQuery,
        layer: usize,
        points: &[Vec<T>],
    ) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        self.check_query(query)?;
        if layer >= self.n_layers() {
            return Err(Error::NeuronOutOfRange { layer, unit: 0, layers: self.n_layers(), units: self.ffn_dim() });
        }
        let pred = query.prediction_position();
        let batch = Batch::repeated(&query.tokens, pred, points.len());
        let hooks = Hooks {
            intervention: None,
            clamps: points.iter().map(|p| Some(Clamp::Layer { layer, values: p.clone() })).collect(),
            dropout: None,
        };
        let cache = self.forward(&batch, &hooks);
        let gold = vec![query.gold_token; points.len()];
        let probs = (0..points.len()).map(|s| cache.probs[[s, query.gold_token as usize]]).collect();
        let grads = Backward::new(self, &cache).prob_of(&gold).stop_at(layer).run();
        let per_point = (0..points.len()).map(|s| grads.neuron_grad(layer, s).to_vec()).collect();
        Ok((probs, per_point))
    }

    /// For each `(unit, value)` in `clamps`: the derivative of the gold
    /// probability with respect to that single unit of `layer`, with only
    /// that unit clamped to `value` at the prediction position.
    pub fn unit_path_gradients(&self, query: &ClozeQuery, layer: usize, clamps: &[(usize, T)]) -> Result<Vec<T>> {
        self.check_query(query)?;
        const CHUNK: usize = 64;
        let pred = query.prediction_position();
        let mut out = Vec::with_capacity(clamps.len());
        for chunk in clamps.chunks(CHUNK) {
            let batch = Batch::repeated(&query.tokens, pred, chunk.len());
            let hooks = Hooks {
                intervention: None,
                clamps: chunk
                    .iter()
                    .map(|&(unit, v)| Some(Clamp::Units(vec![(NeuronId::new(layer, unit), v)])))
                    .collect(),
                dropout: None,
            };
            let cache = self.forward(&batch, &hooks);
            let gold = vec![query.gold_token; chunk.len()];
            let grads = Backward::new(self, &cache).prob_of(&gold).stop_at(layer).run();
            for (s, &(unit, _)) in chunk.iter().enumerate() {
                out.push(grads.neuron_grad(layer, s)[unit]);
            }
        }
        Ok(out)
    }

    /// Gold probability with the whole of `layer` clamped to `values` at the
    /// prediction position.
    pub fn prob_with_layer_clamped(&self, query: &ClozeQuery, layer: usize, values: &[T]) -> Result<T> {
        self.check_query(query)?;
        let batch = Batch::single(&query.tokens, query.prediction_position());
        let hooks = Hooks {
            intervention: None,
            clamps: vec![Some(Clamp::Layer { layer, values: values.to_vec() })],
            dropout: None,
        };
        let out = self.forward(&batch, &hooks);
        Ok(out.probs[[0, query.gold_token as usize]])
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
