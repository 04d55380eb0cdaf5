use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{RelicError, Result};
use crate::neural::{init_trunc_normal, RngState, Scalar, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// One learned vector per entity. Vectors are stored unnormalized.
///
/// Every mutable access bumps a generation counter so indexes built over
/// an older state can detect that they are stale.
#[derive(Debug)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor<f32>,
    frequency: Option<Vec<u64>>,
    uid: u64,
    generation: u64,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        EmbeddingTable {
            ids: self.ids.clone(),
            index: self.index.clone(),
            vectors: self.vectors.clone(),
            frequency: self.frequency.clone(),
            uid: fresh_uid(),
            generation: 0,
        }
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.vectors.values() == other.vectors.values() && self.dim() == other.dim()
    }
}

/// Fresh table with rows drawn from a ±2σ truncated normal, σ = 0.02.
pub fn new_table(ids: Vec<String>, d: usize, rng: &mut RngState) -> Result<EmbeddingTable> {
    if d == 0 {
        return Err(RelicError::InvalidArgument("embedding dimension must be positive".into()));
    }
    let vectors = init_trunc_normal::<f32>(&[ids.len(), d], crate::encoder::INIT_STD, rng);
    EmbeddingTable::from_parts(ids, vectors)
}

impl EmbeddingTable {
    pub fn from_parts(ids: Vec<String>, vectors: Tensor<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(RelicError::Empty("entity table needs at least one id".into()));
        }
        if vectors.rank() != 2 || vectors.rows() != ids.len() {
            return Err(RelicError::shape(
                "EmbeddingTable",
                format!("{} ids but vectors have dims {:?}", ids.len(), vectors.dims()),
            ));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(RelicError::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingTable {
            ids,
            index,
            vectors,
            frequency: None,
            uid: fresh_uid(),
            generation: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| RelicError::UnknownEntity(id.to_string()))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor<f32> {
        self.generation += 1;
        &mut self.vectors
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        self.generation += 1;
        self.vectors.row_mut(i)
    }

    pub fn frequency(&self) -> Option<&[u64]> {
        self.frequency.as_deref()
    }

    pub fn set_frequency(&mut self, freq: Vec<u64>) -> Result<()> {
        if freq.len() != self.len() {
            return Err(RelicError::shape("set_frequency", format!("{} counts for {} rows", freq.len(), self.len())));
        }
        self.frequency = Some(freq);
        Ok(())
    }

    /// `(uid, generation)`; changes whenever the vectors may have changed.
    pub fn version(&self) -> (u64, u64) {
        (self.uid, self.generation)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| norm64(self.row(i))).collect()
    }
}

pub(crate) fn norm64(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot64<Q: Scalar>(q: &[Q], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(a, b)| a.as_f64() * *b as f64).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
}

impl FromStr for Metric {
    type Err = RelicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            other => Err(RelicError::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
        })
    }
}

/// `(id, score)` pairs ordered by score descending, then id ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&(String, f64)> {
        self.entries.first()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidateSet {
    ids: BTreeSet<String>,
}

impl CandidateSet {
    pub fn new<I: IntoIterator<Item = String>>(ids: I) -> Self {
        CandidateSet {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    /// Table rows for the candidates, sorted, plus the number of candidates
    /// that are not in the table.
    pub fn resolve(&self, table: &EmbeddingTable) -> (Vec<usize>, usize) {
        let mut rows = Vec::with_capacity(self.ids.len());
        let mut missing = 0;
        for id in &self.ids {
            match table.index_of(id) {
                Some(r) => rows.push(r),
                None => missing += 1,
            }
        }
        rows.sort_unstable();
        (rows, missing)
    }

    pub fn intersect(&self, other: &CandidateSet) -> CandidateSet {
        CandidateSet {
            ids: self.ids.intersection(&other.ids).cloned().collect(),
        }
    }
}

impl FromIterator<String> for CandidateSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        CandidateSet::new(iter)
    }
}

/// Exact top-k `(row, score)` over `rows` (all rows when `None`).
///
/// Scores are accumulated in f64. A zero-norm table row scores 0 under
/// cosine.
pub fn rank_rows<Q: Scalar>(
    table: &EmbeddingTable,
    query: &[Q],
    k: usize,
    metric: Metric,
    rows: Option<&[usize]>,
) -> Result<Vec<(usize, f64)>> {
    if query.len() != table.dim() {
        return Err(RelicError::shape("nn_search", format!("query of {} for d={}", query.len(), table.dim())));
    }
    if k == 0 {
        return Err(RelicError::InvalidArgument("k must be at least 1".into()));
    }
    let qnorm = query.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if metric == Metric::Cosine && qnorm == 0.0 {
        return Err(RelicError::ZeroNorm("query"));
    }
    let score = |r: usize| {
        let v = table.row(r);
        let s = dot64(query, v);
        match metric {
            Metric::Dot => s,
            Metric::Cosine => {
                let n = norm64(v);
                if n == 0.0 {
                    0.0
                } else {
                    s / (qnorm * n)
                }
            }
        }
    };
    let mut scored: Vec<(usize, f64)> = match rows {
        Some(rows) => rows.iter().map(|&r| (r, score(r))).collect(),
        None => (0..table.len()).map(|r| (r, score(r))).collect(),
    };
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.total_cmp(&a.1).then_with(|| table.id(a.0).cmp(table.id(b.0)))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored)
}

/// Exact top-k neighbors, optionally restricted to a candidate set. An
/// empty intersection yields an empty list.
pub fn nn_search<Q: Scalar>(
    table: &EmbeddingTable,
    query: &[Q],
    k: usize,
    metric: Metric,
    candidates: Option<&CandidateSet>,
) -> Result<RankedList> {
    let resolved = candidates.map(|c| c.resolve(table).0);
    if matches!(&resolved, Some(r) if r.is_empty()) {
        return Ok(RankedList::default());
    }
    let ranked = rank_rows(table, query, k, metric, resolved.as_deref())?;
    Ok(RankedList {
        entries: ranked.into_iter().map(|(r, s)| (table.id(r).to_string(), s)).collect(),
    })
}

/// Mean of the exemplar rows, each L2-normalized first when `normalize`.
pub fn centroid(table: &EmbeddingTable, ids: &[&str], normalize: bool) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(RelicError::Empty("centroid needs at least one exemplar".into()));
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| table.index_of(id).is_none())
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(RelicError::MissingIds(missing));
    }
    let mut out = vec![0.0f64; table.dim()];
    for id in ids {
        let v = table.vector(id).expect("checked above");
        let scale = if normalize {
            let n = norm64(v);
            if n == 0.0 {
                return Err(RelicError::ZeroNorm("centroid exemplar"));
            }
            1.0 / n
        } else {
            1.0
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += *x as f64 * scale;
        }
    }
    let n = ids.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i:04}")).collect()
    }

    fn table_from(rows: &[Vec<f32>]) -> EmbeddingTable {
        let t = Tensor::from_rows(rows).unwrap();
        EmbeddingTable::from_parts(ids(rows.len()), t).unwrap()
    }

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = RngState::new(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.standard_normal() as f32).collect())
            .collect();
        table_from(&rows)
    }

    /// Sort every row by the documented order and cut to k.
    fn brute_force(t: &EmbeddingTable, q: &[f32], k: usize, metric: Metric) -> Vec<(String, f64)> {
        let qn: f64 = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let mut all: Vec<(String, f64)> = (0..t.len())
            .map(|i| {
                let row = t.row(i);
                let mut s = 0.0;
                for j in 0..row.len() {
                    s += q[j] as f64 * row[j] as f64;
                }
                if metric == Metric::Cosine {
                    let rn: f64 = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    s /= qn * rn;
                }
                (t.id(i).to_string(), s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn new_table_shapes_and_errors() {
        let t = new_table(ids(3), 4, &mut RngState::new(1)).unwrap();
        assert_eq!((t.len(), t.dim()), (3, 4));
        let again = new_table(ids(3), 4, &mut RngState::new(1)).unwrap();
        assert_eq!(t, again);
        let dup = vec!["a".to_string(), "b".into(), "a".into()];
        assert!(matches!(new_table(dup, 4, &mut RngState::new(1)), Err(RelicError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn basis_search() {
        let rows: Vec<Vec<f32>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let t = table_from(&rows);
        let q = [0.0f32, 0.0, 1.0, 0.0];
        let r = nn_search(&t, &q, 1, Metric::Cosine, None).unwrap();
        assert_eq!(r.top().unwrap(), &("e0002".to_string(), 1.0));
        let cands = CandidateSet::new(["e0000".to_string(), "e0003".to_string()]);
        let r = nn_search(&t, &q, 1, Metric::Cosine, Some(&cands)).unwrap();
        assert_ne!(r.top().unwrap().0, "e0002");
        assert!(r.top().unwrap().1 < 1.0);
        // Equal scores break toward the smaller id.
        assert_eq!(r.top().unwrap().0, "e0000");
        let none = CandidateSet::new(["zzz".to_string()]);
        assert!(nn_search(&t, &q, 1, Metric::Cosine, Some(&none)).unwrap().is_empty());
        assert!(matches!(nn_search(&t, &[0.0f32; 4], 1, Metric::Cosine, None), Err(RelicError::ZeroNorm(_))));
    }

    #[test]
    fn matches_brute_force() {
        let t = random_table(100, 8, 3);
        let mut rng = RngState::new(4);
        for _ in 0..20 {
            let q: Vec<f32> = (0..8).map(|_| rng.standard_normal() as f32).collect();
            for k in [1, 5, 100, 150] {
                for m in [Metric::Cosine, Metric::Dot] {
                    let got = nn_search(&t, &q, k, m, None).unwrap();
                    let want = brute_force(&t, &q, k, m);
                    assert_eq!(got.entries.len(), want.len());
                    for (g, w) in got.entries.iter().zip(&want) {
                        assert_eq!(g.0, w.0);
                        assert!((g.1 - w.1).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn centroid_examples() {
        let t = table_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]);
        assert_eq!(centroid(&t, &["e0000", "e0001"], false).unwrap(), vec![0.5, 0.5]);
        assert_eq!(centroid(&t, &["e0002", "e0001"], true).unwrap(), vec![0.5, 0.5]);
        assert_eq!(centroid(&t, &["e0002"], true).unwrap(), vec![1.0, 0.0]);
        match centroid(&t, &["e0000", "nope"], true) {
            Err(RelicError::MissingIds(m)) => assert_eq!(m, vec!["nope".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mutation_bumps_version() {
        let mut t = random_table(3, 2, 0);
        let v0 = t.version();
        t.row_mut(1)[0] = 5.0;
        assert_ne!(t.version(), v0);
        assert_ne!(t.clone().version().0, t.version().0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cosine_invariant_under_row_rescaling(seed in 0u64..1000, scales in proptest::collection::vec(0.01f32..100.0, 50)) {
            let t = random_table(50, 6, seed);
            let mut scaled = t.clone();
            for (i, s) in scales.iter().enumerate() {
                scaled.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            let mut rng = RngState::new(seed + 1);
            let q: Vec<f32> = (0..6).map(|_| rng.standard_normal() as f32).collect();
            let a: Vec<String> = nn_search(&t, &q, 50, Metric::Cosine, None).unwrap().ids().map(String::from).collect();
            let b: Vec<String> = nn_search(&scaled, &q, 50, Metric::Cosine, None).unwrap().ids().map(String::from).collect();
            prop_assert_eq!(a, b);
        }
    }
}
