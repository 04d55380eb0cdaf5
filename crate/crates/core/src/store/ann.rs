//! Randomized-projection forest for approximate nearest-neighbor search.
//!
//! Each tree splits on the perpendicular bisector of two random points.
//! Search walks all trees best-first by split margin until enough distinct
//! candidates are gathered, then ranks them exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::table::{rank_rows, EmbeddingTable, Metric, RankedList};
use crate::error::{RelicError, Result};
use crate::neural::{RngState, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub trees: usize,
    pub leaf_size: usize,
    /// Distinct candidates gathered per returned neighbor before exact
    /// re-ranking.
    pub candidates_per_result: usize,
    /// Minimum candidate pool regardless of k.
    pub min_candidates: usize,
    /// Tables smaller than this are searched exhaustively.
    pub exhaustive_below: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            trees: 48,
            leaf_size: 32,
            candidates_per_result: 64,
            min_candidates: 8192,
            exhaustive_below: 10_000,
            metric: Metric::Cosine,
            seed: 0,
        }
    }
}

impl AnnConfig {
    pub fn exhaustive(metric: Metric) -> Self {
        AnnConfig {
            exhaustive_below: usize::MAX,
            metric,
            ..AnnConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        normal: Vec<f32>,
        offset: f32,
        left: usize,
        right: usize,
    },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct AnnIndex {
    config: AnnConfig,
    version: (u64, u64),
    dim: usize,
    nodes: Vec<Node>,
    roots: Vec<usize>,
}

fn point(table: &EmbeddingTable, row: usize, metric: Metric) -> Vec<f32> {
    let v = table.row(row);
    if metric == Metric::Cosine {
        let n = super::table::norm64(v);
        if n > 0.0 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
    v.to_vec()
}

fn margin(normal: &[f32], offset: f32, x: &[f32]) -> f32 {
    normal.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() - offset
}

impl AnnIndex {
    pub fn build(table: &EmbeddingTable, config: &AnnConfig) -> Result<AnnIndex> {
        if config.leaf_size == 0 || config.trees == 0 {
            return Err(RelicError::InvalidArgument("ann trees and leaf_size must be positive".into()));
        }
        let mut index = AnnIndex {
            config: config.clone(),
            version: table.version(),
            dim: table.dim(),
            nodes: Vec::new(),
            roots: Vec::new(),
        };
        if table.len() < config.exhaustive_below {
            return Ok(index);
        }
        let points: Vec<Vec<f32>> = (0..table.len()).map(|r| point(table, r, config.metric)).collect();
        let base = RngState::new(config.seed);
        for t in 0..config.trees {
            let mut rng = base.derive(t as u64);
            let all: Vec<u32> = (0..table.len() as u32).collect();
            let root = index.grow(&points, all, &mut rng);
            index.roots.push(root);
        }
        Ok(index)
    }

    fn grow(&mut self, points: &[Vec<f32>], items: Vec<u32>, rng: &mut RngState) -> usize {
        if items.len() <= self.config.leaf_size {
            self.nodes.push(Node::Leaf(items));
            return self.nodes.len() - 1;
        }
        let mut split = None;
        for _ in 0..4 {
            let a = items[rng.below(items.len())] as usize;
            let b = items[rng.below(items.len())] as usize;
            let (pa, pb) = (&points[a], &points[b]);
            let normal: Vec<f32> = pa.iter().zip(pb).map(|(x, y)| x - y).collect();
            let mid: Vec<f32> = pa.iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect();
            let offset = normal.iter().zip(&mid).map(|(n, m)| n * m).sum::<f32>();
            let (l, r): (Vec<u32>, Vec<u32>) =
                items.iter().partition(|&&i| margin(&normal, offset, &points[i as usize]) <= 0.0);
            if !l.is_empty() && !r.is_empty() {
                split = Some((normal, offset, l, r));
                break;
            }
        }
        let (normal, offset, l, r) = split.unwrap_or_else(|| {
            // Duplicate points: halve arbitrarily; search descends both sides.
            let mut items = items;
            let r = items.split_off(items.len() / 2);
            (vec![0.0; self.dim], 0.0, items, r)
        });
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let left = self.grow(points, l, rng);
        let right = self.grow(points, r, rng);
        self.nodes[slot] = Node::Split {
            normal,
            offset,
            left,
            right,
        };
        slot
    }

    pub fn is_exhaustive(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.config.metric
    }

    pub fn check_fresh(&self, table: &EmbeddingTable) -> Result<()> {
        let (uid, generation) = table.version();
        if uid != self.version.0 {
            return Err(RelicError::InvalidArgument("index was built over a different table".into()));
        }
        if generation != self.version.1 {
            return Err(RelicError::StaleIndex {
                built: self.version.1,
                current: generation,
            });
        }
        Ok(())
    }

    /// Approximate top-k `(row, score)`; `k > N` returns all N rows.
    pub fn search_rows<Q: Scalar>(&self, table: &EmbeddingTable, query: &[Q], k: usize) -> Result<Vec<(usize, f64)>> {
        self.check_fresh(table)?;
        if self.is_exhaustive() {
            return rank_rows(table, query, k, self.config.metric, None);
        }
        if query.len() != self.dim {
            return Err(RelicError::shape("ann_search", format!("query of {} for d={}", query.len(), self.dim)));
        }
        let mut q: Vec<f32> = query.iter().map(|x| x.as_f64() as f32).collect();
        if self.config.metric == Metric::Cosine {
            let n = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(RelicError::ZeroNorm("query"));
            }
            q.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
        let want = (k.saturating_mul(self.config.candidates_per_result))
            .max(self.config.min_candidates)
            .min(table.len());
        let mut seen = vec![false; table.len()];
        let mut rows = Vec::with_capacity(want);
        let mut heap: BinaryHeap<Entry> = self.roots.iter().map(|&n| Entry(f32::INFINITY, n)).collect();
        while let Some(Entry(prio, n)) = heap.pop() {
            if rows.len() >= want {
                break;
            }
            match &self.nodes[n] {
                Node::Leaf(items) => {
                    for &i in items {
                        if !std::mem::replace(&mut seen[i as usize], true) {
                            rows.push(i as usize);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let m = margin(normal, *offset, &q);
                    heap.push(Entry(prio.min(m), *right));
                    heap.push(Entry(prio.min(-m), *left));
                }
            }
        }
        rows.sort_unstable();
        rank_rows(table, query, k, self.config.metric, Some(&rows))
    }

    pub fn search<Q: Scalar>(&self, table: &EmbeddingTable, query: &[Q], k: usize) -> Result<RankedList> {
        Ok(RankedList {
            entries: self
                .search_rows(table, query, k)?
                .into_iter()
                .map(|(r, s)| (table.id(r).to_string(), s))
                .collect(),
        })
    }
}

struct Entry(f32, usize);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;
    use crate::store::nn_search;

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = RngState::new(seed);
        let v: Vec<f32> = (0..n * d).map(|_| rng.standard_normal() as f32).collect();
        let ids = (0..n).map(|i| format!("e{i:06}")).collect();
        EmbeddingTable::from_parts(ids, Tensor::from_vec(&[n, d], v).unwrap()).unwrap()
    }

    #[test]
    fn exhaustive_mode_matches_exact() {
        let t = random_table(300, 8, 1);
        let idx = AnnIndex::build(&t, &AnnConfig::default()).unwrap();
        assert!(idx.is_exhaustive());
        let q = t.row(7).to_vec();
        assert_eq!(idx.search(&t, &q, 10).unwrap(), nn_search(&t, &q, 10, Metric::Cosine, None).unwrap());
        assert_eq!(idx.search(&t, &q, 1000).unwrap().len(), 300);
    }

    #[test]
    fn forest_mode_small_and_k_above_n() {
        let t = random_table(200, 4, 2);
        let cfg = AnnConfig {
            exhaustive_below: 0,
            leaf_size: 8,
            min_candidates: 16,
            ..AnnConfig::default()
        };
        let idx = AnnIndex::build(&t, &cfg).unwrap();
        assert!(!idx.is_exhaustive());
        let q = t.row(3).to_vec();
        let r = idx.search(&t, &q, 500).unwrap();
        assert_eq!(r.len(), 200);
        assert_eq!(r.top().unwrap().0, "e000003");
        let again = AnnIndex::build(&t, &cfg).unwrap();
        assert_eq!(again.search(&t, &q, 5).unwrap(), idx.search(&t, &q, 5).unwrap());
    }

    #[test]
    fn stale_index_is_rejected() {
        let mut t = random_table(50, 4, 3);
        let idx = AnnIndex::build(&t, &AnnConfig::default()).unwrap();
        t.row_mut(0)[0] += 1.0;
        assert!(matches!(idx.search(&t, &[1.0f32, 0., 0., 0.], 1), Err(RelicError::StaleIndex { .. })));
        let other = random_table(50, 4, 3);
        assert!(idx.search(&other, &[1.0f32, 0., 0., 0.], 1).is_err());
    }
}
