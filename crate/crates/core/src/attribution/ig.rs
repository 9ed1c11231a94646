// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use rayon::prelude::*;

use super::{build_baseline, AttributionConfig, AttributionMap, BaselineMode, ClampMode, RiemannCoefficient};
use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::scalar::Scalar;

/// What integrated gradients needs from a model: activations at the
/// prediction position and gradients of the gold probability along a path of
/// clamped activations.
///
/// [`Transformer`] is the production implementation; tests plug in small
/// closed-form functions.
pub trait NeuronProbe<T: Scalar>: Sync {
    fn n_layers(&self) -> usize;

    fn ffn_dim(&self) -> usize;

    /// `L x n` activations at the query's prediction position.
    fn activations(&self, query: &ClozeQuery) -> Result<Array2<T>>;

    /// For every point, the gold probability and the gradient with respect
    /// to each unit of `layer`, with the whole layer clamped to that point.
    fn layer_path(&self, query: &ClozeQuery, layer: usize, points: &[Vec<T>]) -> Result<(Vec<T>, Vec<Vec<T>>)>;

    /// For every `(unit, value)`, the derivative of the gold probability
    /// with respect to that unit while only it is clamped to `value`.
    fn unit_path(&self, query: &ClozeQuery, layer: usize, clamps: &[(usize, T)]) -> Result<Vec<T>>;
}

impl<T: Scalar> NeuronProbe<T> for Transformer<T> {
    fn n_layers(&self) -> usize {
        Transformer::n_layers(self)
    }

    fn ffn_dim(&self) -> usize {
        Transformer::ffn_dim(self)
    }

    fn activations(&self, query: &ClozeQuery) -> Result<Array2<T>> {
        Ok(self.record_activations(query)?.values)
    }

    fn layer_path(&self, query: &ClozeQuery, layer: usize, points: &[Vec<T>]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        self.layer_path_gradients(query, layer, points)
    }

    fn unit_path(&self, query: &ClozeQuery, layer: usize, clamps: &[(usize, T)]) -> Result<Vec<T>> {
        self.unit_path_gradients(query, layer, clamps)
    }
}

fn point<T: Scalar>(from: T, to: T, k: usize, steps: usize) -> T {
    from + T::lit(k as f64 / steps as f64) * (to - from)
}

/// Right-Riemann integrated gradients from `w_prime` to `w_bar` for every
/// neuron of the probe.
pub fn integrated_gradients<T: Scalar, P: NeuronProbe<T> + ?Sized>(
    probe: &P,
    query: &ClozeQuery,
    w_bar: &Array2<T>,
    w_prime: &Array2<T>,
    steps: usize,
    coefficient: RiemannCoefficient,
    clamp_mode: ClampMode,
) -> Result<Array2<T>> {
    let shape = (probe.n_layers(), probe.ffn_dim());
    if w_bar.dim() != shape || w_prime.dim() != shape {
        return Err(Error::Attribution(format!(
            "activation shapes {:?}/{:?} do not match probe shape {shape:?}",
            w_bar.dim(),
            w_prime.dim()
        )));
    }
    if steps == 0 {
        return Err(Error::Attribution("riemann_steps must be at least 1".into()));
    }
    let (n_layers, n_units) = shape;
    let mut out = Array2::zeros(shape);
    for layer in 0..n_layers {
        let bar = w_bar.row(layer);
        let prime = w_prime.row(layer);
        let sums: Vec<T> = match clamp_mode {
            ClampMode::Layer => {
                let points: Vec<Vec<T>> =
                    (1..=steps).map(|k| (0..n_units).map(|j| point(prime[j], bar[j], k, steps)).collect()).collect();
                let (_, grads) = probe.layer_path(query, layer, &points)?;
                (0..n_units).map(|j| grads.iter().fold(T::zero(), |acc, g| acc + g[j])).collect()
            }
            ClampMode::Neuron => {
                let clamps: Vec<(usize, T)> = (0..n_units)
                    .flat_map(|j| (1..=steps).map(move |k| (j, k)))
                    .map(|(j, k)| (j, point(prime[j], bar[j], k, steps)))
                    .collect();
                let grads = probe.unit_path(query, layer, &clamps)?;
                grads.chunks(steps).map(|c| c.iter().fold(T::zero(), |acc, &g| acc + g)).collect()
            }
        };
        let n = T::lit(steps as f64);
        for j in 0..n_units {
            let span = match coefficient {
                RiemannCoefficient::Standard => bar[j] - prime[j],
                RiemannCoefficient::Paper => bar[j],
            };
            let v = span / n * sums[j];
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient { layer, unit: j });
            }
            out[[layer, j]] = v;
        }
    }
    Ok(out)
}

/// Per-word attribution map for word `word_index`: integrated gradients
/// from the activations of its baseline sentence to those of the query.
pub fn attribute_word<T: Scalar, P: NeuronProbe<T> + ?Sized>(
    probe: &P,
    query: &ClozeQuery,
    word_index: usize,
    config: &AttributionConfig,
) -> Result<Array2<T>> {
    let w_bar = probe.activations(query)?;
    word_map(probe, query, word_index, &w_bar, config)
}

fn word_map<T: Scalar, P: NeuronProbe<T> + ?Sized>(
    probe: &P,
    query: &ClozeQuery,
    word_index: usize,
    w_bar: &Array2<T>,
    config: &AttributionConfig,
) -> Result<Array2<T>> {
    let baseline = build_baseline(query, word_index)?;
    let w_prime = probe.activations(&baseline)?;
    integrated_gradients(probe, query, w_bar, &w_prime, config.riemann_steps, config.coefficient, config.clamp_mode)
}

/// Sums per-word maps and divides by the grand total.
pub fn aggregate_normalize<T: Scalar>(query: &ClozeQuery, per_word_maps: &[Array2<T>]) -> Result<AttributionMap<T>> {
    let first = per_word_maps
        .first()
        .ok_or_else(|| Error::Attribution(format!("no per-word maps for query `{}`", query.id)))?;
    let mut sum = Array2::<T>::zeros(first.dim());
    for m in per_word_maps {
        if m.dim() != first.dim() {
            return Err(Error::Attribution(format!("per-word map shape {:?} differs from {:?}", m.dim(), first.dim())));
        }
        sum += m;
    }
    let total = sum.iter().fold(T::zero(), |acc, &v| acc + v);
    if total == T::zero() || !total.is_finite() {
        return Err(Error::Attribution(format!(
            "attribution total for query `{}` is {total}, cannot normalize",
            query.id
        )));
    }
    sum.mapv_inplace(|v| v / total);
    Ok(AttributionMap::from_query(query, sum, true))
}

/// Full attribution of one query under `config`.
///
/// The adapted baseline runs one integrated-gradients pass per eligible word
/// and aggregates them; the zero baseline runs a single pass from all-zero
/// activations.
pub fn attribute_query<T: Scalar, P: NeuronProbe<T> + ?Sized>(
    probe: &P,
    query: &ClozeQuery,
    config: &AttributionConfig,
) -> Result<AttributionMap<T>> {
    let w_bar = probe.activations(query)?;
    let maps = match config.baseline_mode {
        BaselineMode::Adapted => query
            .word_positions()
            .into_par_iter()
            .map(|i| word_map(probe, query, i, &w_bar, config))
            .collect::<Result<Vec<_>>>()?,
        BaselineMode::Zero => {
            let zeros = Array2::zeros(w_bar.dim());
            vec![integrated_gradients(
                probe,
                query,
                &w_bar,
                &zeros,
                config.riemann_steps,
                config.coefficient,
                config.clamp_mode,
            )?]
        }
    };
    aggregate_normalize(query, &maps)
}

/// Outcome of the layer-interpolation completeness check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completeness {
    /// Sum of the layer's per-word attributions.
    pub attribution_sum: f64,
    /// `F(w̄) - F(w')` with the layer clamped jointly at each end.
    pub prob_delta: f64,
}

impl Completeness {
    pub fn relative_error(&self) -> f64 {
        ((self.attribution_sum - self.prob_delta) / self.prob_delta).abs()
    }
}

/// Interpolates every unit of `layer` jointly between the baseline of word
/// `word_index` and the query, and compares the summed attribution with the
/// change in gold probability between the two ends of the path.
pub fn layer_completeness<T: Scalar, P: NeuronProbe<T> + ?Sized>(
    probe: &P,
    query: &ClozeQuery,
    word_index: usize,
    layer: usize,
    steps: usize,
) -> Result<Completeness> {
    if steps == 0 {
        return Err(Error::Attribution("riemann_steps must be at least 1".into()));
    }
    let w_bar = probe.activations(query)?;
    let w_prime = probe.activations(&build_baseline(query, word_index)?)?;
    let n_units = probe.ffn_dim();
    let bar = w_bar.row(layer).to_vec();
    let prime = w_prime.row(layer).to_vec();
    let points: Vec<Vec<T>> =
        (1..=steps).map(|k| (0..n_units).map(|j| point(prime[j], bar[j], k, steps)).collect()).collect();
    let (probs, grads) = probe.layer_path(query, layer, &points)?;
    let (start, _) = probe.layer_path(query, layer, std::slice::from_ref(&prime))?;
    let n = T::lit(steps as f64);
    let mut total = T::zero();
    for j in 0..n_units {
        let s = grads.iter().fold(T::zero(), |acc, g| acc + g[j]);
        total += (bar[j] - prime[j]) / n * s;
    }
    let f_bar = probs[steps - 1];
    Ok(Completeness {
        attribution_sum: total.to_f64().unwrap_or(f64::NAN),
        prob_delta: (f_bar - start[0]).to_f64().unwrap_or(f64::NAN),
    })
}
