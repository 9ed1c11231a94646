// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;

use knlab::attribution::{
    aggregate_normalize, attribute_query, attribute_word, integrated_gradients, layer_completeness, select_with_tau,
    AttributionConfig, AttributionMap, BaselineMode, ClampMode, NeuronProbe, RiemannCoefficient,
};
use knlab::corpus::{generate_corpus, synthetic_languages, Architecture, ClozeQuery, CorpusParams, MASK};
use knlab::model::{train, ModelConfig, TrainConfig};
use knlab::{NeuronId, Result, Transformer64};

/// One neuron whose activation is `w_bar` on the query and `w_prime` once
/// any word is replaced by the baseline token; the gold probability is a
/// closed-form function of that neuron.
struct Unit {
    w_bar: f64,
    w_prime: f64,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
}

impl NeuronProbe<f64> for Unit {
    fn n_layers(&self) -> usize {
        1
    }

    fn ffn_dim(&self) -> usize {
        1
    }

    fn activations(&self, query: &ClozeQuery) -> Result<Array2<f64>> {
        let masked = query.word_positions().iter().any(|&i| query.tokens[i] == MASK);
        Ok(Array2::from_elem((1, 1), if masked { self.w_prime } else { self.w_bar }))
    }

    fn layer_path(&self, _: &ClozeQuery, _: usize, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        Ok(points.iter().map(|p| ((self.f)(p[0]), vec![(self.df)(p[0])])).unzip())
    }

    fn unit_path(&self, _: &ClozeQuery, _: usize, clamps: &[(usize, f64)]) -> Result<Vec<f64>> {
        Ok(clamps.iter().map(|&(_, v)| (self.df)(v)).collect())
    }
}

fn synthetic_query() -> ClozeQuery {
    ClozeQuery {
        id: "f/en/ae".into(),
        fact_id: "f".into(),
        lang_id: "en".into(),
        relation: "capital".into(),
        architecture: Architecture::AutoEncoding,
        tokens: vec![10, 11, MASK],
        blank_position: 2,
        gold_token: 12,
    }
}

fn config(steps: usize, clamp_mode: ClampMode) -> AttributionConfig {
    AttributionConfig { riemann_steps: steps, clamp_mode, ..AttributionConfig::with_languages(&["en"], 0.2) }
}

fn linear(w: f64) -> f64 {
    0.2 * w
}

fn linear_grad(_: f64) -> f64 {
    0.2
}

fn square(w: f64) -> f64 {
    w * w
}

fn square_grad(w: f64) -> f64 {
    2.0 * w
}

#[test]
fn linear_unit_is_exact_for_every_step_count() {
    let probe = Unit { w_bar: 2.0, w_prime: 0.0, f: linear, df: linear_grad };
    for mode in [ClampMode::Layer, ClampMode::Neuron] {
        for steps in [1, 2, 5, 20, 100] {
            let a = attribute_word(&probe, &synthetic_query(), 0, &config(steps, mode)).unwrap();
            assert_abs_diff_eq!(a[[0, 0]], 0.4, epsilon = 1e-12);
        }
    }
}

#[test]
fn quadratic_unit_matches_right_riemann_closed_form() {
    let probe = Unit { w_bar: 1.0, w_prime: 0.0, f: square, df: square_grad };
    for mode in [ClampMode::Layer, ClampMode::Neuron] {
        let a5 = attribute_word(&probe, &synthetic_query(), 0, &config(5, mode)).unwrap()[[0, 0]];
        let oracle: f64 = (1..=5).map(|k| 2.0 * k as f64 / 5.0).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(a5, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(a5, 1.2, epsilon = 1e-12);
        for steps in [100, 1000] {
            let a = attribute_word(&probe, &synthetic_query(), 0, &config(steps, mode)).unwrap()[[0, 0]];
            let bound = 1.0 / steps as f64;
            assert!((a - 1.0).abs() <= bound + 1e-12, "N={steps}: {a}");
        }
    }
}

#[test]
fn zero_path_length_gives_zero_attribution() {
    let probe = Unit { w_bar: 0.7, w_prime: 0.7, f: square, df: square_grad };
    for mode in [ClampMode::Layer, ClampMode::Neuron] {
        let a = attribute_word(&probe, &synthetic_query(), 1, &config(7, mode)).unwrap();
        assert_eq!(a[[0, 0]], 0.0);
    }
}

#[test]
fn paper_coefficient_differs_unless_baseline_is_zero() {
    let q = synthetic_query();
    let probe = Unit { w_bar: 1.0, w_prime: 0.5, f: square, df: square_grad };
    let w_bar = Array2::from_elem((1, 1), 1.0);
    let run = |w_prime: f64, coeff| {
        let wp = Array2::from_elem((1, 1), w_prime);
        integrated_gradients(&probe, &q, &w_bar, &wp, 10, coeff, ClampMode::Layer).unwrap()[[0, 0]]
    };
    assert!((run(0.5, RiemannCoefficient::Paper) - run(0.5, RiemannCoefficient::Standard)).abs() > 0.1);
    assert_eq!(run(0.0, RiemannCoefficient::Paper), run(0.0, RiemannCoefficient::Standard));
}

#[test]
fn baseline_word_at_blank_is_rejected() {
    let probe = Unit { w_bar: 1.0, w_prime: 0.0, f: square, df: square_grad };
    assert!(attribute_word(&probe, &synthetic_query(), 2, &config(5, ClampMode::Layer)).is_err());
}

#[test]
fn aggregation_sums_then_normalizes() {
    let q = synthetic_query();
    let w1 = Array2::from_shape_vec((1, 2), vec![0.2, 0.2]).unwrap();
    let w2 = Array2::from_shape_vec((1, 2), vec![0.4, 0.2]).unwrap();
    let m = aggregate_normalize(&q, &[w1, w2]).unwrap();
    assert!(m.normalized);
    assert_abs_diff_eq!(m.scores[[0, 0]], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(m.scores[[0, 1]], 0.4, epsilon = 1e-12);

    let single = aggregate_normalize(&q, &[Array2::from_elem((1, 1), 0.37)]).unwrap();
    assert_eq!(single.scores[[0, 0]], 1.0);

    let zeros = Array2::<f64>::zeros((2, 3));
    assert!(aggregate_normalize(&q, &[zeros.clone(), zeros]).is_err());
    assert!(aggregate_normalize::<f64>(&q, &[]).is_err());
}

fn trained(arch: Architecture) -> (Transformer64, Vec<ClozeQuery>) {
    let langs = synthetic_languages(&["en".into(), "zh".into()], 2, 5);
    let c = generate_corpus(&CorpusParams { n_relations: 2, n_facts_per_relation: 4, seed: 5 }, &langs).unwrap();
    let q = c.queries_for(arch);
    let cfg = ModelConfig {
        architecture: arch,
        n_layers: 2,
        model_dim: 16,
        n_heads: 2,
        ffn_dim: 12,
        vocab_size: c.facts.vocab.len(),
        max_seq_len: 8,
        seed: 5,
    };
    let tc =
        TrainConfig { epochs: 60, learning_rate: 1e-2, batch_size: 8, weight_decay: 0.0, ffn_dropout: 0.0, seed: 5 };
    let (m, _) = train::<f64>(&q, cfg, &tc).unwrap();
    (m, q)
}

#[test]
fn layer_interpolation_is_complete() {
    let mut checked = 0;
    for arch in Architecture::ALL {
        let (m, queries) = trained(arch);
        for q in queries.iter().take(4) {
            for layer in 0..m.n_layers() {
                let (i, c100) = q
                    .word_positions()
                    .into_iter()
                    .map(|i| (i, layer_completeness(&m, q, i, layer, 100).unwrap()))
                    .max_by(|a, b| a.1.prob_delta.abs().total_cmp(&b.1.prob_delta.abs()))
                    .unwrap();
                if c100.prob_delta.abs() < 1e-3 {
                    continue;
                }
                let c500 = layer_completeness(&m, q, i, layer, 500).unwrap();
                let c1000 = layer_completeness(&m, q, i, layer, 1000).unwrap();
                // A right Riemann sum converges at first order: five times the steps, a fifth of the error.
                let (e100, e500) = (c100.attribution_sum - c100.prob_delta, c500.attribution_sum - c500.prob_delta);
                assert!(
                    (e500 * 5.0 - e100).abs() <= 0.1 * e100.abs() + 1e-9,
                    "{arch} {} l{layer}: {e100} {e500}",
                    q.id
                );
                // Cancelling the first-order term leaves the exact integral.
                let extrapolated = 2.0 * c1000.attribution_sum - c500.attribution_sum;
                let rel = (extrapolated - c100.prob_delta).abs() / c100.prob_delta.abs();
                assert!(rel <= 1e-3, "{arch} {} l{layer}: extrapolated {extrapolated} vs {}", q.id, c100.prob_delta);
                checked += 1;
            }
        }
    }
    assert!(checked >= 8, "only {checked} paths had a measurable probability change");
}

#[test]
fn neuron_mode_is_complete_along_each_unit() {
    let (m, queries) = trained(Architecture::AutoRegressive);
    let q = &queries[0];
    let i = q.word_positions()[1];
    let cfg = config(200, ClampMode::Neuron);
    let per_word = attribute_word(&m, q, i, &cfg).unwrap();
    let w_bar = m.record_activations(q).unwrap().values;
    let base = knlab::attribution::build_baseline(q, i).unwrap();
    let w_prime = m.record_activations(&base).unwrap().values;
    let prob_clamped =
        |id: NeuronId, v: f64| m.grad_answer_prob_wrt_neurons(q, &BTreeMap::from([(id, v)])).unwrap().prob;
    for layer in 0..m.n_layers() {
        for unit in 0..m.ffn_dim() {
            let id = NeuronId::new(layer, unit);
            let delta = prob_clamped(id, w_bar[[layer, unit]]) - prob_clamped(id, w_prime[[layer, unit]]);
            let err = (per_word[[layer, unit]] - delta).abs();
            assert!(err <= 1e-2 * delta.abs().max(1e-6) + 1e-7, "{id}: attr {} vs {delta}", per_word[[layer, unit]]);
        }
    }
}

#[test]
fn full_query_attribution_is_normalized_in_both_modes() {
    for arch in Architecture::ALL {
        let (m, queries) = trained(arch);
        for baseline_mode in [BaselineMode::Adapted, BaselineMode::Zero] {
            let cfg = AttributionConfig { baseline_mode, ..config(10, ClampMode::Layer) };
            let map = attribute_query(&m, &queries[0], &cfg).unwrap();
            assert!(map.normalized);
            assert_abs_diff_eq!(map.total(), 1.0, epsilon = 1e-6);
            assert!(map.scores.iter().all(|v| v.is_finite()));
            let set = select_with_tau(&map, 0.2).unwrap();
            assert!(set.neurons.contains(&map.argmax().0));
        }
    }
}

#[test]
fn attribution_is_deterministic() {
    let (m, queries) = trained(Architecture::AutoEncoding);
    let cfg = config(10, ClampMode::Layer);
    let a = attribute_query(&m, &queries[1], &cfg).unwrap();
    let b = attribute_query(&m, &queries[1], &cfg).unwrap();
    assert_eq!(a, b);
}

fn random_map() -> impl Strategy<Value = AttributionMap<f64>> {
    (1usize..5, 1usize..40)
        .prop_flat_map(|(l, n)| proptest::collection::vec(-0.5f64..1.0, l * n).prop_map(move |v| (l, n, v)))
        .prop_filter("needs a positive score", |(_, _, v)| v.iter().any(|&x| x > 1e-3))
        .prop_map(|(l, n, v)| AttributionMap {
            query_id: "q".into(),
            fact_id: "f".into(),
            lang_id: "en".into(),
            scores: Array2::from_shape_vec((l, n), v).unwrap(),
            normalized: false,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn raising_tau_never_adds_neurons(map in random_map(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = select_with_tau(&map, hi).unwrap().neurons;
        let large = select_with_tau(&map, lo).unwrap().neurons;
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn selection_is_scale_covariant(map in random_map(), tau in 0.01f64..0.99, exp in -8i32..8) {
        let c = 2f64.powi(exp);
        let mut scaled = map.clone();
        scaled.scores.mapv_inplace(|v| v * c);
        prop_assert_eq!(
            select_with_tau(&map, tau).unwrap().neurons,
            select_with_tau(&scaled, tau).unwrap().neurons
        );
    }
}
