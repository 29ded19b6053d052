//! What the nearest database instances have in common with the query.

use crate::corpus::{Instance, RelationSchema, TokenId};
use crate::error::Result;
use crate::pipeline::{embed_queries, DbIndex, Model};
use crate::retriever::{dist, hard_topk, soft_select, Database};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub label_match: f64,
    pub head_match: f64,
    pub tail_match: f64,
    /// Head or tail contained.
    pub entity_match: f64,
    /// Label matches or an entity is contained.
    pub related: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub k: usize,
    /// Averaged over every (query, retrieved) pair in the top k.
    pub pairs: Fractions,
    /// Per query, whether any of the top k satisfies the property.
    pub any: Fractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub levels: Vec<LevelStats>,
    pub n_queries: usize,
}

impl RetrievalStats {
    pub fn level(&self, k: usize) -> Option<&LevelStats> {
        self.levels.iter().find(|l| l.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,view,label,head,tail,entity,related\n");
        for l in &self.levels {
            for (view, f) in [("pairs", &l.pairs), ("any", &l.any)] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    l.k, view, f.label_match, f.head_match, f.tail_match, f.entity_match, f.related
                ));
            }
        }
        out
    }
}

pub fn contains_subsequence(hay: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Copy, Default)]
struct Flags {
    label: bool,
    head: bool,
    tail: bool,
}

impl Flags {
    fn entity(self) -> bool {
        self.head || self.tail
    }

    fn related(self) -> bool {
        self.label || self.entity()
    }
}

fn flags(query: &Instance, other: &Instance) -> Flags {
    Flags {
        label: query.relation == other.relation,
        head: contains_subsequence(&other.tokens, query.head_tokens()),
        tail: contains_subsequence(&other.tokens, query.tail_tokens()),
    }
}

/// Hard top-k neighbours of every query in the index's embedding space,
/// summarised at each level.
pub fn retrieval_stats(
    model: &Model,
    queries: &[Instance],
    db: &Database,
    index: &DbIndex,
    schema: &RelationSchema,
    levels: &[usize],
) -> Result<RetrievalStats> {
    let max_k = levels.iter().copied().max().unwrap_or(0).min(index.len());
    let refs: Vec<&Instance> = queries.iter().collect();
    let embs = embed_queries(model, &refs, schema, index.representation)?;
    let mut neighbours = Vec::with_capacity(queries.len());
    for e in &embs {
        neighbours.push(hard_topk(e, &index.embeddings, max_k)?.0);
    }
    Ok(stats_from_neighbours(queries, db, &neighbours, levels))
}

/// Same summary over precomputed neighbour lists (nearest first).
pub fn stats_from_neighbours(
    queries: &[Instance],
    db: &Database,
    neighbours: &[Vec<usize>],
    levels: &[usize],
) -> RetrievalStats {
    let n = queries.len();
    let mut out = Vec::with_capacity(levels.len());
    for &k in levels {
        let mut pairs = [0usize; 5];
        let mut any = [0usize; 5];
        let mut n_pairs = 0;
        for (q, nb) in queries.iter().zip(neighbours) {
            let mut seen = [false; 5];
            for &d in nb.iter().take(k) {
                let f = flags(q, &db.instances[d]);
                let bits = [f.label, f.head, f.tail, f.entity(), f.related()];
                for i in 0..5 {
                    pairs[i] += bits[i] as usize;
                    seen[i] |= bits[i];
                }
                n_pairs += 1;
            }
            for i in 0..5 {
                any[i] += seen[i] as usize;
            }
        }
        let frac = |c: [usize; 5], total: usize| {
            let r = |x: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
            Fractions {
                label_match: r(c[0]),
                head_match: r(c[1]),
                tail_match: r(c[2]),
                entity_match: r(c[3]),
                related: r(c[4]),
            }
        };
        out.push(LevelStats { k, pairs: frac(pairs, n_pairs), any: frac(any, n) });
    }
    RetrievalStats { levels: out, n_queries: n }
}

/// Mean per-query Jaccard overlap between the hard top-k set and the set of
/// row-wise argmaxes of the soft selection weights.
pub fn selection_overlap(
    model: &Model,
    queries: &[Instance],
    index: &DbIndex,
    schema: &RelationSchema,
    k: usize,
    tau: f64,
) -> Result<f64> {
    if queries.is_empty() || index.is_empty() {
        return Ok(0.0);
    }
    let k = k.min(index.len());
    let refs: Vec<&Instance> = queries.iter().collect();
    let embs = embed_queries(model, &refs, schema, index.representation)?;
    let mut total = 0.0;
    for e in &embs {
        let hard: BTreeSet<usize> = hard_topk(e, &index.embeddings, k)?.0.into_iter().collect();
        let d: Vec<f64> = index.embeddings.iter().map(|x| dist(e, x)).collect::<std::result::Result<_, _>>()?;
        let w = soft_select(&d, k, tau)?;
        let soft: BTreeSet<usize> = (0..w.rows())
            .map(|r| {
                let row = w.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect();
        let inter = hard.intersection(&soft).count() as f64;
        let union = hard.union(&soft).count() as f64;
        total += inter / union;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;

    fn inst(id: &str, tokens: Vec<TokenId>, rel: usize) -> Instance {
        Instance::new(id, tokens, Span::new(0, 1), Span::new(2, 3), rel)
    }

    #[test]
    fn subsequence_match() {
        assert!(contains_subsequence(&[5, 6, 7], &[6, 7]));
        assert!(!contains_subsequence(&[5, 6, 7], &[7, 6]));
        assert!(!contains_subsequence(&[5], &[]));
    }

    #[test]
    fn all_same_label_and_no_entities() {
        let q = inst("q", vec![50, 51, 52], 1);
        let db =
            Database { instances: (0..5).map(|i| inst(&format!("d{i}"), vec![60 + i, 70, 80], 1)).collect(), cap: 10 };
        let nb = vec![vec![0, 1, 2, 3, 4]];
        let s = stats_from_neighbours(&[q], &db, &nb, &[1, 3, 5]);
        for l in &s.levels {
            assert_eq!(l.pairs.label_match, 1.0);
            assert_eq!(l.pairs.entity_match, 0.0);
            assert_eq!(l.any.head_match, 0.0);
            assert_eq!(l.pairs.related, 1.0);
        }
    }

    #[test]
    fn union_view_is_monotone() {
        let q = inst("q", vec![50, 51, 52], 1);
        let db = Database {
            instances: vec![inst("a", vec![9, 9, 9], 2), inst("b", vec![9, 50, 9], 2), inst("c", vec![9, 9, 9], 1)],
            cap: 10,
        };
        let s = stats_from_neighbours(&[q], &db, &[vec![0, 1, 2]], &[1, 2, 3]);
        assert_eq!(s.level(1).unwrap().any.related, 0.0);
        assert_eq!(s.level(2).unwrap().any.head_match, 1.0);
        assert_eq!(s.level(2).unwrap().pairs.head_match, 0.5);
        assert_eq!(s.level(3).unwrap().any.label_match, 1.0);
        assert!((s.level(3).unwrap().pairs.related - 2.0 / 3.0).abs() < 1e-15);
    }
}
