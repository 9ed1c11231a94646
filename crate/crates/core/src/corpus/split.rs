// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::types::ClozeQuery;
use crate::error::{Error, Result};
use crate::seeds;

/// Splits each relation's queries into a mining part of `floor(ratio * n)`
/// (at least one) and a checking part holding the rest. Output order follows
/// the input order.
pub fn split_by_relation(queries: &[ClozeQuery], ratio: f64, seed: u64) -> Result<(Vec<ClozeQuery>, Vec<ClozeQuery>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut by_relation: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_relation.entry(q.relation.as_str()).or_default().push(i);
    }

    let mut mining = vec![false; queries.len()];
    for (relation, mut idx) in by_relation {
        let n = idx.len();
        if n < 2 {
            return Err(Error::Corpus(format!("relation `{relation}` has {n} queries; a split needs at least 2")));
        }
        let take = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
        idx.shuffle(&mut seeds::rng_for(seed, relation));
        for &i in &idx[..take] {
            mining[i] = true;
        }
    }

    let (m, c): (Vec<_>, Vec<_>) = queries.iter().zip(mining).partition(|(_, is_mining)| *is_mining);
    Ok((m.into_iter().map(|(q, _)| q.clone()).collect(), c.into_iter().map(|(q, _)| q.clone()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Architecture;
    use proptest::prelude::*;

    fn queries(per_relation: &[usize]) -> Vec<ClozeQuery> {
        let mut out = Vec::new();
        for (r, &n) in per_relation.iter().enumerate() {
            for i in 0..n {
                out.push(ClozeQuery {
                    id: format!("q{r}.{i}"),
                    fact_id: format!("f{r}.{i}"),
                    lang_id: "en".into(),
                    relation: format!("rel{r}"),
                    architecture: Architecture::AutoEncoding,
                    tokens: vec![3, 1],
                    blank_position: 1,
                    gold_token: 4,
                });
            }
        }
        out
    }

    #[test]
    fn even_split() {
        let (m, c) = split_by_relation(&queries(&[10]), 0.5, 1).unwrap();
        assert_eq!((m.len(), c.len()), (5, 5));
    }

    #[test]
    fn remainder_goes_to_checking() {
        let (m, c) = split_by_relation(&queries(&[3]), 0.5, 1).unwrap();
        assert_eq!((m.len(), c.len()), (1, 2));
    }

    #[test]
    fn same_seed_same_membership() {
        let q = queries(&[9, 7]);
        let a = split_by_relation(&q, 0.4, 11).unwrap();
        let b = split_by_relation(&q, 0.4, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_relation_is_named_in_error() {
        let err = split_by_relation(&queries(&[4, 1]), 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("rel1"), "{err}");
    }

    #[test]
    fn ratio_bounds() {
        assert!(split_by_relation(&queries(&[4]), 0.0, 0).is_err());
        assert!(split_by_relation(&queries(&[4]), 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_each_relation(sizes in proptest::collection::vec(2usize..30, 1..5), ratio in 0.05f64..0.95, seed: u64) {
            let q = queries(&sizes);
            let (m, c) = split_by_relation(&q, ratio, seed).unwrap();
            prop_assert_eq!(m.len() + c.len(), q.len());
            for (r, &n) in sizes.iter().enumerate() {
                let rel = format!("rel{r}");
                let mm = m.iter().filter(|x| x.relation == rel).count();
                let cc = c.iter().filter(|x| x.relation == rel).count();
                prop_assert_eq!(mm + cc, n);
                prop_assert_eq!(mm, ((ratio * n as f64).floor() as usize).clamp(1, n - 1));
            }
            let ids: std::collections::BTreeSet<_> = m.iter().chain(&c).map(|x| x.id.clone()).collect();
            prop_assert_eq!(ids.len(), q.len());
        }
    }
}
