// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array2, ArrayView1, Axis};

use super::{Intervention, NeuronId, Transformer};
use crate::corpus::TokenId;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// One sequence inside a packed batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
    /// Absolute row of the prediction position.
    pub pred: usize,
}

/// Sequences stacked row-wise.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segs: Vec<Segment>,
}

impl Batch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = (&'a [TokenId], usize)>) -> Self {
        let mut b = Self { tokens: Vec::new(), positions: Vec::new(), segs: Vec::new() };
        for (toks, pred) in seqs {
            let start = b.tokens.len();
            b.tokens.extend_from_slice(toks);
            b.positions.extend(0..toks.len());
            b.segs.push(Segment { start, len: toks.len(), pred: start + pred });
        }
        b
    }

    pub fn single(tokens: &[TokenId], pred: usize) -> Self {
        Self::from_sequences([(tokens, pred)])
    }

    pub fn repeated(tokens: &[TokenId], pred: usize, count: usize) -> Self {
        Self::from_sequences((0..count).map(|_| (tokens, pred)))
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

/// Prediction-position overwrite for one segment.
#[derive(Debug, Clone)]
pub(crate) enum Clamp<T> {
    /// Every unit of `layer` set to `values`.
    Layer { layer: usize, values: Vec<T> },
    /// Individual units set to values.
    Units(Vec<(NeuronId, T)>),
}

pub(crate) struct Hooks<'a, T> {
    pub intervention: Option<&'a Intervention>,
    /// Empty, or one entry per segment.
    pub clamps: Vec<Option<Clamp<T>>>,
    /// Training-time multiplicative masks on FFN activations, one
    /// `rows x ffn_dim` array per layer.
    pub dropout: Option<Vec<Array2<T>>>,
}

impl<T> Hooks<'_, T> {
    pub fn none() -> Self {
        Self { intervention: None, clamps: Vec::new(), dropout: None }
    }
}

pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Vec<T>,
}

pub(crate) struct LayerCache<T> {
    pub y1: Array2<T>,
    pub ln1: LnCache<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Attention weights per segment, per head.
    pub attn: Vec<Vec<Array2<T>>>,
    pub ctx: Array2<T>,
    pub y2: Array2<T>,
    pub ln2: LnCache<T>,
    pub pre: Array2<T>,
    /// Hooked activations: `gate * gelu(pre) + offset`.
    pub h: Array2<T>,
    /// `None` means an all-ones gate.
    pub gate: Option<Array2<T>>,
}

pub(crate) struct ForwardCache<T> {
    pub batch: Batch,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
    pub yf: Array2<T>,
    pub probs: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// `n_layers x ffn_dim` activations at segment `seg`'s prediction row.
    pub fn neurons_at_pred(&self, seg: usize) -> Array2<T> {
        let row = self.batch.segs[seg].pred;
        let n = self.layers[0].h.ncols();
        let mut out = Array2::zeros((self.layers.len(), n));
        for (l, lc) in self.layers.iter().enumerate() {
            out.row_mut(l).assign(&lc.h.row(row));
        }
        out
    }
}

pub(crate) fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array2<T>, b: &Array2<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let r = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<T>();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> Transformer<T> {
    pub(crate) fn forward(&self, batch: &Batch, hooks: &Hooks<'_, T>) -> ForwardCache<T> {
        let cfg = &self.config;
        let p = &self.params;
        let rows = batch.rows();
        let d = cfg.model_dim;
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();

        let mut x = Array2::zeros((rows, d));
        for (r, (&tok, &pos)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&p.tok_emb.row(tok as usize));
            row += &p.pos_emb.row(pos);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let (y1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = y1.dot(&lp.wq) + &lp.bq;
            let k = y1.dot(&lp.wk) + &lp.bk;
            let v = y1.dot(&lp.wv) + &lp.bv;

            let mut ctx = Array2::zeros((rows, d));
            let mut attn = Vec::with_capacity(batch.segs.len());
            for seg in &batch.segs {
                let r = seg.start..seg.start + seg.len;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let c = h * hd..(h + 1) * hd;
                    let qh = q.slice(s![r.clone(), c.clone()]);
                    let kh = k.slice(s![r.clone(), c.clone()]);
                    let vh = v.slice(s![r.clone(), c.clone()]);
                    let mut scores = qh.dot(&kh.t()) * scale;
                    if cfg.causal() {
                        for i in 0..seg.len {
                            for j in i + 1..seg.len {
                                scores[[i, j]] = T::neg_infinity();
                            }
                        }
                    }
                    softmax_rows(&mut scores);
                    ctx.slice_mut(s![r.clone(), c]).assign(&scores.dot(&vh));
                    heads.push(scores);
                }
                attn.push(heads);
            }
            let x_mid = &x + &(ctx.dot(&lp.wo) + &lp.bo);

            let (y2, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
            let pre = y2.dot(&lp.w_up) + &lp.b_up;
            let mut h = pre.mapv(gelu);
            let mut gate: Option<Array2<T>> = None;
            if let Some(masks) = &hooks.dropout {
                h *= &masks[l];
                gate = Some(masks[l].clone());
            }

            if let Some(iv) = hooks.intervention.filter(|iv| iv.touches_layer(l)) {
                let g = gate.get_or_insert_with(|| Array2::ones(h.raw_dim()));
                for (id, mode) in iv.edits().iter().filter(|(id, _)| id.layer == l) {
                    let (a, b) = mode.affine();
                    let (a, b) = (T::lit(a), T::lit(b));
                    for r in 0..rows {
                        h[[r, id.unit]] = a * h[[r, id.unit]] + b;
                        g[[r, id.unit]] = a;
                    }
                }
            }
            for (seg, clamp) in batch.segs.iter().zip(&hooks.clamps) {
                match clamp {
                    Some(Clamp::Layer { layer, values }) if *layer == l => {
                        let g = gate.get_or_insert_with(|| Array2::ones(h.raw_dim()));
                        h.row_mut(seg.pred).assign(&ArrayView1::from(values.as_slice()));
                        g.row_mut(seg.pred).fill(T::zero());
                    }
                    Some(Clamp::Units(units)) => {
                        for (id, val) in units.iter().filter(|(id, _)| id.layer == l) {
                            let g = gate.get_or_insert_with(|| Array2::ones(h.raw_dim()));
                            h[[seg.pred, id.unit]] = *val;
                            g[[seg.pred, id.unit]] = T::zero();
                        }
                    }
                    _ => {}
                }
            }

            x = &x_mid + &(h.dot(&lp.w_down) + &lp.b_down);
            layers.push(LayerCache { y1, ln1, q, k, v, attn, ctx, y2, ln2, pre, h, gate });
        }

        let pred_rows: Vec<usize> = batch.segs.iter().map(|s| s.pred).collect();
        let xp = x.select(Axis(0), &pred_rows);
        let (yf, lnf) = layer_norm(&xp, &p.lnf_g, &p.lnf_b);
        let mut probs = yf.dot(&p.w_out) + &p.b_out;
        softmax_rows(&mut probs);

        ForwardCache { batch: batch.clone(), layers, lnf, yf, probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut m = Array2::from_shape_vec((2, 3), vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
