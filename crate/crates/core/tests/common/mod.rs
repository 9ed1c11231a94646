// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use knlab::corpus::{generate_corpus, synthetic_languages, Architecture, ClozeQuery, Corpus, CorpusParams};
use knlab::model::{train, ModelConfig, TrainConfig};
use knlab::Transformer64;

pub fn small_corpus(langs: &[&str], facts_per_relation: usize, seed: u64) -> Corpus {
    let ids: Vec<String> = langs.iter().map(|s| s.to_string()).collect();
    let specs = synthetic_languages(&ids, 2, seed);
    generate_corpus(&CorpusParams { n_relations: 2, n_facts_per_relation: facts_per_relation, seed }, &specs).unwrap()
}

/// A two-layer model trained to master `corpus` for `arch`.
pub fn small_model(corpus: &Corpus, arch: Architecture, seed: u64) -> (Transformer64, Vec<ClozeQuery>) {
    let queries = corpus.queries_for(arch);
    let cfg = ModelConfig {
        architecture: arch,
        n_layers: 2,
        model_dim: 16,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: corpus.facts.vocab.len(),
        max_seq_len: 8,
        seed,
    };
    let tc = TrainConfig { epochs: 80, learning_rate: 1e-2, batch_size: 8, weight_decay: 0.0, ffn_dropout: 0.0, seed };
    let (m, _) = train::<f64>(&queries, cfg, &tc).unwrap();
    (m, queries)
}
