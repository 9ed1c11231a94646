// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::scalar::Scalar;
use crate::seeds;

/// Weights of one transformer block. Biases and norm gains are `1 x k` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    pub wq: Array2<T>,
    pub bq: Array2<T>,
    pub wk: Array2<T>,
    pub bk: Array2<T>,
    pub wv: Array2<T>,
    pub bv: Array2<T>,
    pub wo: Array2<T>,
    pub bo: Array2<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    /// `model_dim x ffn_dim`
    pub w_up: Array2<T>,
    pub b_up: Array2<T>,
    /// `ffn_dim x model_dim`; row `j` is neuron `j`'s write-out direction.
    pub w_down: Array2<T>,
    pub b_down: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Array2<T>,
    pub lnf_b: Array2<T>,
    pub w_out: Array2<T>,
    pub b_out: Array2<T>,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w_up", "b_up", "w_down",
    "b_down",
];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Array2<T>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<T>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

impl<T: Scalar> Params<T> {
    /// Gaussian init (std 0.02, residual projections scaled by depth), unit
    /// norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = seeds::rng_for(config.seed, "init");
        let d = config.model_dim;
        let n = config.ffn_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(&mut rng)))
        };
        let ones = |k: usize| Array2::from_elem((1, k), T::one());
        let zeros = |k: usize| Array2::zeros((1, k));

        let tok_emb = normal(config.vocab_size, d, std);
        let pos_emb = normal(config.max_seq_len, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: normal(d, d, std),
                bq: zeros(d),
                wk: normal(d, d, std),
                bk: zeros(d),
                wv: normal(d, d, std),
                bv: zeros(d),
                wo: normal(d, d, resid_std),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w_up: normal(d, n, std),
                b_up: zeros(n),
                w_down: normal(n, d, resid_std),
                b_down: zeros(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            w_out: normal(d, config.vocab_size, std),
            b_out: zeros(config.vocab_size),
        }
    }

    /// All tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.extend([
            ("lnf_g".to_string(), &self.lnf_g),
            ("lnf_b".to_string(), &self.lnf_b),
            ("w_out".to_string(), &self.w_out),
            ("b_out".to_string(), &self.b_out),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|a| Array2::zeros(a.raw_dim()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        self.map(|a| a.mapv(|x| x.cast::<U>()))
    }

    fn map<U: Scalar>(&self, f: impl Fn(&Array2<T>) -> Array2<U>) -> Params<U> {
        Params {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: f(&l.ln1_g),
                    ln1_b: f(&l.ln1_b),
                    wq: f(&l.wq),
                    bq: f(&l.bq),
                    wk: f(&l.wk),
                    bk: f(&l.bk),
                    wv: f(&l.wv),
                    bv: f(&l.bv),
                    wo: f(&l.wo),
                    bo: f(&l.bo),
                    ln2_g: f(&l.ln2_g),
                    ln2_b: f(&l.ln2_b),
                    w_up: f(&l.w_up),
                    b_up: f(&l.b_up),
                    w_down: f(&l.w_down),
                    b_down: f(&l.b_down),
                })
                .collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
