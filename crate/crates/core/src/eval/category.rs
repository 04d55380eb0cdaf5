use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use super::metrics::average_precision_flags;
use crate::corpus::CategoryRecord;
use crate::error::{RelicError, Result};
use crate::neural::RngState;
use crate::store::{centroid, rank_rows, EmbeddingTable, Metric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryConfig {
    pub n_exemplars: usize,
    pub trials: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        CategoryConfig {
            n_exemplars: 3,
            trials: 5,
            normalize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryResult {
    pub category: String,
    pub exemplars: Vec<String>,
    pub average_precision: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CategoryReport {
    pub results: Vec<CategoryResult>,
    /// Mean over categories of the per-category mean AP across trials.
    pub map: f64,
    pub skipped: Vec<String>,
    pub missing_members: usize,
}

/// Per trial, draw exemplars without replacement, rank every other table
/// entity by dot product with the exemplar centroid, and score the ranking
/// against the remaining members.
pub fn category_completion(
    table: &EmbeddingTable,
    categories: &[CategoryRecord],
    config: &CategoryConfig,
) -> Result<CategoryReport> {
    if config.n_exemplars == 0 || config.trials == 0 {
        return Err(RelicError::InvalidArgument("n_exemplars and trials must be positive".into()));
    }
    let mut report = CategoryReport::default();
    let mut per_category = Vec::new();
    let root = RngState::new(config.seed);
    for (ci, cat) in categories.iter().enumerate() {
        let mut seen = HashSet::new();
        let members: Vec<usize> = cat
            .members
            .iter()
            .filter_map(|m| table.index_of(m))
            .filter(|r| seen.insert(*r))
            .collect();
        report.missing_members += cat.members.iter().filter(|m| table.index_of(m).is_none()).count();
        if members.len() <= config.n_exemplars {
            warn!(
                "category `{}` has {} members in the table; needs more than {}",
                cat.category,
                members.len(),
                config.n_exemplars
            );
            report.skipped.push(cat.category.clone());
            continue;
        }
        let mut rng = root.derive(ci as u64);
        let mut ap_sum = 0.0;
        for _ in 0..config.trials {
            let picks = rand::seq::index::sample(&mut rng, members.len(), config.n_exemplars);
            let exemplars: Vec<usize> = picks.iter().map(|i| members[i]).collect();
            let ex_ids: Vec<&str> = exemplars.iter().map(|&r| table.id(r)).collect();
            let c = centroid(table, &ex_ids, config.normalize)?;
            let ex_set: HashSet<usize> = exemplars.iter().copied().collect();
            let pool: Vec<usize> = (0..table.len()).filter(|r| !ex_set.contains(r)).collect();
            let relevant: HashSet<usize> = members.iter().copied().filter(|r| !ex_set.contains(r)).collect();
            let ranked = rank_rows(table, &c, pool.len(), Metric::Dot, Some(&pool))?;
            let ap = average_precision_flags(ranked.iter().map(|(r, _)| relevant.contains(r)), relevant.len())?;
            ap_sum += ap;
            report.results.push(CategoryResult {
                category: cat.category.clone(),
                exemplars: ex_ids.iter().map(|s| s.to_string()).collect(),
                average_precision: ap,
            });
        }
        per_category.push(ap_sum / config.trials as f64);
    }
    if per_category.is_empty() {
        return Err(RelicError::Empty("no category has enough members in the table".into()));
    }
    report.map = per_category.iter().sum::<f64>() / per_category.len() as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    fn table(rows: Vec<Vec<f32>>) -> EmbeddingTable {
        let ids = (0..rows.len()).map(|i| format!("e{i:03}")).collect();
        EmbeddingTable::from_parts(ids, Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    fn cat(name: &str, members: &[usize]) -> CategoryRecord {
        CategoryRecord {
            category: name.into(),
            members: members.iter().map(|m| format!("e{m:03}")).collect(),
        }
    }

    #[test]
    fn perfect_cluster() {
        let mut rows = vec![vec![0.0, 1.0, 0.0]; 6];
        rows.extend(vec![vec![1.0, 0.0, 0.0]; 5]);
        rows.push(vec![0.0, 0.0, 1.0]);
        let t = table(rows);
        let r = category_completion(&t, &[cat("c", &[6, 7, 8, 9, 10])], &CategoryConfig::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.results.len(), 5);
        for res in &r.results {
            assert_eq!(res.exemplars.len(), 3);
        }
    }

    #[test]
    fn small_categories_skipped() {
        let t = table(vec![vec![1.0, 0.0]; 5]);
        let cats = [cat("tiny", &[0, 1, 2]), cat("ok", &[0, 1, 2, 3])];
        let r = category_completion(&t, &cats, &CategoryConfig::default()).unwrap();
        assert_eq!(r.skipped, vec!["tiny".to_string()]);
        assert!(category_completion(&t, &cats[..1], &CategoryConfig::default()).is_err());
    }

    #[test]
    fn random_table_near_chance() {
        // Expected AP of a random ranking: Monte-Carlo over permutations.
        let (n, m) = (200usize, 20usize);
        let mut rng = RngState::new(3);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..16).map(|_| rng.standard_normal() as f32).collect()).collect();
        let t = table(rows);
        let cats: Vec<CategoryRecord> = (0..10)
            .map(|c| cat(&format!("c{c}"), &rand::seq::index::sample(&mut rng, n, m).into_vec()))
            .collect();
        let cfg = CategoryConfig {
            trials: 4,
            ..CategoryConfig::default()
        };
        let r = category_completion(&t, &cats, &cfg).unwrap();
        let relevant = m - 3;
        let pool = n - 3;
        let mut samples = Vec::new();
        for _ in 0..4000 {
            let hits: HashSet<usize> = rand::seq::index::sample(&mut rng, pool, relevant).into_iter().collect();
            samples.push(average_precision_flags((0..pool).map(|i| hits.contains(&i)), relevant).unwrap());
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        let sd_of_map = (var / r.results.len() as f64).sqrt();
        assert!((r.map - mean).abs() < 3.0 * sd_of_map, "map {} vs chance {mean} ± {sd_of_map}", r.map);
    }
}
