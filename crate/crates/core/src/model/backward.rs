// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array2, ArrayView1, Axis};

use super::forward::{gelu_grad, ForwardCache, LnCache};
use super::{Params, Transformer};
use crate::corpus::TokenId;
use crate::scalar::Scalar;

enum Objective {
    /// Gradient of `p(target)` per segment.
    Prob(Vec<TokenId>),
    /// Gradient of `weight * sum_s -log p(target_s)`.
    CrossEntropy(Vec<TokenId>, f64),
}

/// Reverse pass over a [`ForwardCache`].
pub(crate) struct Backward<'a, T> {
    model: &'a Transformer<T>,
    cache: &'a ForwardCache<T>,
    objective: Option<Objective>,
    stop: usize,
    params: bool,
}

pub(crate) struct Grads<T> {
    rows: Vec<usize>,
    /// `dh` per layer (rows x ffn_dim); `None` below the stop layer.
    dh: Vec<Option<Array2<T>>>,
    pub params: Option<Params<T>>,
}

impl<T: Scalar> Grads<T> {
    /// Neuron gradient at segment `seg`'s prediction row.
    pub fn neuron_grad(&self, layer: usize, seg: usize) -> ArrayView1<'_, T> {
        self.dh[layer].as_ref().expect("layer below stop").row(self.rows[seg])
    }
}

fn ln_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array2<T>,
    pgrads: Option<(&mut Array2<T>, &mut Array2<T>)>,
) -> Array2<T> {
    if let Some((dg, db)) = pgrads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let d = T::lit(dy.ncols() as f64);
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (r, (dxh, xh)) in dxhat.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
        let m1 = dxh.sum() / d;
        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / d;
        let rstd = cache.rstd[r];
        for c in 0..dy.ncols() {
            dx[[r, c]] = rstd * (dxh[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

fn add_bias_grad<T: Scalar>(db: &mut Array2<T>, dy: &Array2<T>) {
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
}

impl<'a, T: Scalar> Backward<'a, T> {
    pub fn new(model: &'a Transformer<T>, cache: &'a ForwardCache<T>) -> Self {
        Self { model, cache, objective: None, stop: 0, params: false }
    }

    pub fn prob_of(mut self, targets: &[TokenId]) -> Self {
        self.objective = Some(Objective::Prob(targets.to_vec()));
        self
    }

    pub fn cross_entropy(mut self, targets: &[TokenId], weight: f64) -> Self {
        self.objective = Some(Objective::CrossEntropy(targets.to_vec(), weight));
        self
    }

    /// Lowest layer whose neuron gradient is needed.
    pub fn stop_at(mut self, layer: usize) -> Self {
        self.stop = layer;
        self
    }

    pub fn with_params(mut self) -> Self {
        self.params = true;
        self.stop = 0;
        self
    }

    pub fn run(self) -> Grads<T> {
        let cfg = &self.model.config;
        let p = &self.model.params;
        let c = self.cache;
        let batch = &c.batch;
        let n_segs = batch.segs.len();
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();

        let mut dlogits = c.probs.clone();
        match self.objective.as_ref().expect("objective not set") {
            Objective::Prob(t) => {
                for s in 0..n_segs {
                    let pt = c.probs[[s, t[s] as usize]];
                    let mut row = dlogits.row_mut(s);
                    row.mapv_inplace(|v| -pt * v);
                    row[t[s] as usize] += pt;
                }
            }
            Objective::CrossEntropy(t, w) => {
                let w = T::lit(*w);
                for s in 0..n_segs {
                    dlogits[[s, t[s] as usize]] -= T::one();
                }
                dlogits.mapv_inplace(|v| v * w);
            }
        }

        let mut g = if self.params { Some(p.zeros_like()) } else { None };

        if let Some(g) = g.as_mut() {
            g.w_out += &c.yf.t().dot(&dlogits);
            add_bias_grad(&mut g.b_out, &dlogits);
        }
        let dyf = dlogits.dot(&p.w_out.t());
        let dxp = ln_backward(&dyf, &c.lnf, &p.lnf_g, g.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)));
        let rows = batch.rows();
        let mut dx = Array2::<T>::zeros((rows, cfg.model_dim));
        for (s, seg) in batch.segs.iter().enumerate() {
            let mut r = dx.row_mut(seg.pred);
            r += &dxp.row(s);
        }

        let mut dh_out: Vec<Option<Array2<T>>> = vec![None; cfg.n_layers];
        for l in (self.stop..cfg.n_layers).rev() {
            let lp = &p.layers[l];
            let lc = &c.layers[l];
            let mut lg = g.as_mut().map(|g| &mut g.layers[l]);

            let dh = dx.dot(&lp.w_down.t());
            if let Some(lg) = lg.as_mut() {
                lg.w_down += &lc.h.t().dot(&dx);
                add_bias_grad(&mut lg.b_down, &dx);
            }
            if l == self.stop && !self.params {
                dh_out[l] = Some(dh);
                break;
            }

            let mut dpre = Array2::zeros(lc.pre.raw_dim());
            ndarray::Zip::from(&mut dpre).and(&dh).and(&lc.pre).for_each(|o, &d, &x| *o = d * gelu_grad(x));
            if let Some(gate) = &lc.gate {
                dpre *= gate;
            }
            dh_out[l] = Some(dh);
            if let Some(lg) = lg.as_mut() {
                lg.w_up += &lc.y2.t().dot(&dpre);
                add_bias_grad(&mut lg.b_up, &dpre);
            }
            let dy2 = dpre.dot(&lp.w_up.t());
            let dx_mid = &dx
                + &ln_backward(
                    &dy2,
                    &lc.ln2,
                    &lp.ln2_g,
                    lg.as_mut().map(|lg| {
                        let lg: &mut super::params::LayerParams<T> = lg;
                        (&mut lg.ln2_g, &mut lg.ln2_b)
                    }),
                );

            if let Some(lg) = lg.as_mut() {
                lg.wo += &lc.ctx.t().dot(&dx_mid);
                add_bias_grad(&mut lg.bo, &dx_mid);
            }
            let dctx = dx_mid.dot(&lp.wo.t());
            let mut dq = Array2::zeros((rows, cfg.model_dim));
            let mut dk = Array2::zeros((rows, cfg.model_dim));
            let mut dv = Array2::zeros((rows, cfg.model_dim));
            for (si, seg) in batch.segs.iter().enumerate() {
                let r = seg.start..seg.start + seg.len;
                for h in 0..cfg.n_heads {
                    let cols = h * hd..(h + 1) * hd;
                    let pm = &lc.attn[si][h];
                    let dctx_h = dctx.slice(s![r.clone(), cols.clone()]);
                    let qh = lc.q.slice(s![r.clone(), cols.clone()]);
                    let kh = lc.k.slice(s![r.clone(), cols.clone()]);
                    let vh = lc.v.slice(s![r.clone(), cols.clone()]);
                    let dp = dctx_h.dot(&vh.t());
                    dv.slice_mut(s![r.clone(), cols.clone()]).assign(&pm.t().dot(&dctx_h));
                    let mut ds = Array2::zeros(pm.raw_dim());
                    for i in 0..seg.len {
                        let dot: T = (0..seg.len).map(|j| dp[[i, j]] * pm[[i, j]]).sum();
                        for j in 0..seg.len {
                            ds[[i, j]] = pm[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(s![r.clone(), cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![r.clone(), cols]).assign(&ds.t().dot(&qh));
                }
            }
            if let Some(lg) = lg.as_mut() {
                lg.wq += &lc.y1.t().dot(&dq);
                lg.wk += &lc.y1.t().dot(&dk);
                lg.wv += &lc.y1.t().dot(&dv);
                add_bias_grad(&mut lg.bq, &dq);
                add_bias_grad(&mut lg.bk, &dk);
                add_bias_grad(&mut lg.bv, &dv);
            }
            let dy1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dx = &dx_mid + &ln_backward(&dy1, &lc.ln1, &lp.ln1_g, lg.map(|lg| (&mut lg.ln1_g, &mut lg.ln1_b)));
        }

        if let Some(g) = g.as_mut() {
            for (r, (&tok, &pos)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
                let mut te = g.tok_emb.row_mut(tok as usize);
                te += &dx.row(r);
                let mut pe = g.pos_emb.row_mut(pos);
                pe += &dx.row(r);
            }
        }

        Grads { rows: batch.segs.iter().map(|s| s.pred).collect(), dh: dh_out, params: g }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Architecture;
    use crate::model::forward::{Batch, Hooks};
    use crate::model::ModelConfig;

    fn loss(m: &Transformer<f64>, batch: &Batch, gold: &[TokenId]) -> f64 {
        let c = m.forward(batch, &Hooks::none());
        gold.iter().enumerate().map(|(s, &t)| -c.probs[[s, t as usize]].ln()).sum()
    }

    #[test]
    fn parameter_gradients_match_central_difference() {
        for arch in Architecture::ALL {
            let cfg = ModelConfig {
                architecture: arch,
                n_layers: 2,
                model_dim: 8,
                n_heads: 2,
                ffn_dim: 6,
                vocab_size: 11,
                max_seq_len: 6,
                seed: 5,
            };
            let mut m = Transformer::<f64>::init(cfg).unwrap();
            // Break the symmetric init so norm gains and biases get non-trivial gradients.
            for (i, t) in m.params.tensors_mut().into_iter().enumerate() {
                t.mapv_inplace(|v| v + 0.01 * ((i as f64) * 0.37).sin());
            }
            let seqs: [(&[TokenId], usize); 2] = [(&[3, 4, 5, 1], 3), (&[6, 1, 7], 1)];
            let batch = Batch::from_sequences(seqs);
            let gold = [8, 9];
            let cache = m.forward(&batch, &Hooks::none());
            let g = Backward::new(&m, &cache).cross_entropy(&gold, 1.0).with_params().run().params.unwrap();
            let n_tensors = m.params.tensors().len();
            for ti in 0..n_tensors {
                let len = m.params.tensors()[ti].len();
                for &k in &[0, len / 2, len - 1] {
                    let h = 1e-6;
                    let orig = m.params.tensors()[ti].as_slice().unwrap()[k];
                    m.params.tensors_mut()[ti].as_slice_mut().unwrap()[k] = orig + h;
                    let lp = loss(&m, &batch, &gold);
                    m.params.tensors_mut()[ti].as_slice_mut().unwrap()[k] = orig - h;
                    let lm = loss(&m, &batch, &gold);
                    m.params.tensors_mut()[ti].as_slice_mut().unwrap()[k] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g.tensors()[ti].as_slice().unwrap()[k];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{arch} tensor {} [{k}]: fd {fd} vs analytic {an}",
                        m.params.named()[ti].0
                    );
                }
            }
        }
    }
}
