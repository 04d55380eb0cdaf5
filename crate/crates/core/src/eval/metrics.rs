use std::collections::HashSet;

use serde::Serialize;

use crate::error::{RelicError, Result};

/// Average precision of a ranking given as relevance flags in rank order,
/// with `n_relevant` relevant items in total (relevant items that never
/// appear contribute zero).
pub fn average_precision_flags(flags: impl IntoIterator<Item = bool>, n_relevant: usize) -> Result<f64> {
    if n_relevant == 0 {
        return Err(RelicError::Empty("average precision needs a relevant item".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in flags.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / n_relevant as f64)
}

pub fn average_precision<'a>(ranking: impl IntoIterator<Item = &'a str>, relevant: &HashSet<&str>) -> Result<f64> {
    average_precision_flags(ranking.into_iter().map(|id| relevant.contains(id)), relevant.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TypingMetrics {
    pub p_at_1: f64,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub map: f64,
}

/// Type indices by probability descending, ties to the lower index.
fn ranked_types(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// A type is predicted when its probability is at least `threshold`.
/// Entities without gold types count toward accuracy and micro F1 only.
pub fn typing_metrics(predictions: &[Vec<f64>], gold: &[Vec<usize>], threshold: f64) -> Result<TypingMetrics> {
    if predictions.len() != gold.len() {
        return Err(RelicError::shape("typing_metrics", format!("{} rows vs {} gold", predictions.len(), gold.len())));
    }
    if predictions.is_empty() {
        return Err(RelicError::Empty("no entities to score".into()));
    }
    let (mut p1, mut ranked_n, mut exact, mut ap_sum) = (0usize, 0usize, 0usize, 0.0);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (probs, g) in predictions.iter().zip(gold) {
        let gset: HashSet<usize> = g.iter().copied().collect();
        if let Some(t) = gset.iter().find(|&&t| t >= probs.len()) {
            return Err(RelicError::InvalidArgument(format!("gold type {t} outside {} types", probs.len())));
        }
        let mut all_right = true;
        for (t, p) in probs.iter().enumerate() {
            match (*p >= threshold, gset.contains(&t)) {
                (true, true) => tp += 1,
                (true, false) => {
                    fp += 1;
                    all_right = false;
                }
                (false, true) => {
                    fn_ += 1;
                    all_right = false;
                }
                (false, false) => {}
            }
        }
        exact += usize::from(all_right);
        if !gset.is_empty() {
            ranked_n += 1;
            let order = ranked_types(probs);
            p1 += usize::from(gset.contains(&order[0]));
            ap_sum += average_precision_flags(order.iter().map(|t| gset.contains(t)), gset.len())?;
        }
    }
    let denom = 2 * tp + fp + fn_;
    let ranked = ranked_n.max(1) as f64;
    Ok(TypingMetrics {
        p_at_1: p1 as f64 / ranked,
        accuracy: exact as f64 / predictions.len() as f64,
        micro_f1: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
        map: ap_sum / ranked,
    })
}

/// MAP over types: each type ranks the entities by its probability
/// (ties to the lower entity index). Types without positives are skipped.
pub fn per_type_map(predictions: &[Vec<f64>], gold: &[Vec<usize>]) -> Result<f64> {
    let n_types = predictions.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..n_types {
        let relevant = gold.iter().filter(|g| g.contains(&t)).count();
        if relevant == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..predictions.len()).collect();
        order.sort_by(|&a, &b| predictions[b][t].total_cmp(&predictions[a][t]).then(a.cmp(&b)));
        sum += average_precision_flags(order.iter().map(|&e| gold[e].contains(&t)), relevant)?;
        n += 1;
    }
    if n == 0 {
        return Err(RelicError::Empty("no type has a positive entity".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        let rel: HashSet<&str> = ["a", "b"].into();
        assert_eq!(average_precision(["a", "b", "c"], &rel).unwrap(), 1.0);
        let ap = average_precision(["a", "x", "b", "y"], &rel).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
        let one: HashSet<&str> = ["z"].into();
        assert_eq!(average_precision(["a", "b", "c", "z", "d"], &one).unwrap(), 0.25);
        assert!(average_precision(["a"], &HashSet::new()).is_err());
    }

    #[test]
    fn typing_examples() {
        let perfect = typing_metrics(&[vec![0.9, 0.1, 0.8], vec![0.2, 0.7, 0.1]], &[vec![0, 2], vec![1]], 0.5).unwrap();
        assert_eq!(perfect, TypingMetrics { p_at_1: 1.0, accuracy: 1.0, micro_f1: 1.0, map: 1.0 });
        // Second entity gets one of its two types wrong.
        let m = typing_metrics(&[vec![0.9, 0.1, 0.1], vec![0.9, 0.1, 0.9]], &[vec![0], vec![0, 1]], 0.5).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // TP 2, FP 1, FN 1
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        let empty = typing_metrics(&[vec![0.1, 0.1], vec![0.9, 0.1]], &[vec![], vec![0]], 0.5).unwrap();
        assert_eq!(empty.accuracy, 1.0);
        assert_eq!(empty.p_at_1, 1.0);
    }

    #[test]
    fn per_type_map_example() {
        let preds = vec![vec![0.9, 0.2], vec![0.8, 0.9], vec![0.1, 0.5]];
        let gold = vec![vec![0], vec![1], vec![0, 1]];
        // type 0 ranks 0,1,2 → relevant at 1 and 3; type 1 ranks 1,2,0 → 1 and 2.
        let want = ((1.0 + 2.0 / 3.0) / 2.0 + 1.0) / 2.0;
        assert!((per_type_map(&preds, &gold).unwrap() - want).abs() < 1e-15);
    }
}
