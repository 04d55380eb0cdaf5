//! Compatibility scores between context encodings and entity vectors, and
//! the noise-contrastive loss over a row of candidates.
//!
//! The score is `a · cos(g, f)` (or `a · g·f` when dot-product scoring is
//! selected). Candidate sets are expressed as a score matrix with a mask:
//! masked cells take no part in the softmax.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{RelicError, Result};
use crate::neural::{axpy, dot, l2_norm, RngState, Scalar, Tensor};
use crate::store::{EmbeddingTable, Metric};

/// Stand-in for −∞ on masked cells.
pub const MASK_SCORE: f64 = -1e9;

pub fn score<F: Scalar>(g: &[F], e: &[F], a: F) -> Result<F> {
    if g.len() != e.len() {
        return Err(RelicError::shape("score", format!("{} vs {}", g.len(), e.len())));
    }
    let (ng, ne) = (l2_norm(g), l2_norm(e));
    if ng == F::zero() {
        return Err(RelicError::ZeroNorm("context vector"));
    }
    if ne == F::zero() {
        return Err(RelicError::ZeroNorm("entity vector"));
    }
    Ok(a * dot(g, e) / (ng * ne))
}

/// Probability of entity row `target` under a softmax over the whole table,
/// computed in f64.
pub fn full_softmax_prob<F: Scalar>(g: &[F], table: &EmbeddingTable, a: f64, target: usize) -> Result<f64> {
    if target >= table.len() {
        return Err(RelicError::InvalidArgument(format!("target row {target} of {}", table.len())));
    }
    let g: Vec<f64> = g.iter().map(|x| x.as_f64()).collect();
    let mut scores = Vec::with_capacity(table.len());
    for r in 0..table.len() {
        let e: Vec<f64> = table.row(r).iter().map(|x| *x as f64).collect();
        scores.push(score(&g, &e, a)?);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((scores[target] - max).exp() / z)
}

/// Scores for B context rows against C candidate columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<F: Scalar = f32> {
    scores: Tensor<F>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

impl<F: Scalar> ScoreMatrix<F> {
    /// `mask[i*C + j]` excludes cell (i, j); the target cell of a row may
    /// not be masked.
    pub fn new(scores: Tensor<F>, targets: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        let (rows, cols) = scores.matrix_dims();
        if targets.len() != rows || mask.len() != rows * cols {
            return Err(RelicError::shape(
                "ScoreMatrix",
                format!("{rows}x{cols} scores, {} targets, {} mask cells", targets.len(), mask.len()),
            ));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(RelicError::InvalidArgument(format!("row {i} target {t} outside {cols} columns")));
            }
            if mask[i * cols + t] {
                return Err(RelicError::InvalidArgument(format!("row {i} masks its own target")));
            }
        }
        Ok(ScoreMatrix { scores, targets, mask })
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn scores(&self) -> &Tensor<F> {
        &self.scores
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.scores.row(i)[j]
    }

    pub fn target(&self, i: usize) -> usize {
        self.targets[i]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.cols() + j]
    }

    /// Same targets and mask, new scores (used for finite differences).
    pub fn with_scores(&self, scores: Tensor<F>) -> Result<Self> {
        ScoreMatrix::new(scores, self.targets.clone(), self.mask.clone())
    }
}

/// Intermediates kept from scoring for the backward pass.
#[derive(Clone, Debug)]
pub struct ScoreCache<F: Scalar> {
    metric: Metric,
    a: F,
    g_unit: Tensor<F>,
    g_norm: Vec<F>,
    f_unit: Tensor<F>,
    f_norm: Vec<F>,
    raw: Tensor<F>,
}

/// Gradients of a loss with respect to the scoring inputs.
#[derive(Clone, Debug)]
pub struct ScoreGrads<F: Scalar> {
    pub d_g: Tensor<F>,
    pub d_f: Tensor<F>,
    pub d_a: F,
}

fn unit_rows<F: Scalar>(m: &Tensor<F>, what: &'static str, metric: Metric) -> Result<(Tensor<F>, Vec<F>)> {
    let mut out = m.clone();
    out.clear_grad();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        if metric == Metric::Cosine {
            if n == F::zero() {
                return Err(RelicError::ZeroNorm(what));
            }
            out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// `a · sim(G_i, F_j)` for every pair, with the cache for [`score_backward`].
pub fn pairwise_scores<F: Scalar>(
    g: &Tensor<F>,
    f: &Tensor<F>,
    a: F,
    metric: Metric,
) -> Result<(Tensor<F>, ScoreCache<F>)> {
    if g.cols() != f.cols() {
        return Err(RelicError::shape("pairwise_scores", format!("d {} vs {}", g.cols(), f.cols())));
    }
    let (g_unit, g_norm) = unit_rows(g, "context vector", metric)?;
    let (f_unit, f_norm) = unit_rows(f, "entity vector", metric)?;
    let (b, c) = (g.rows(), f.rows());
    let mut raw = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let gi = g_unit.row(i);
        let out = raw.row_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(gi, f_unit.row(j));
        }
    }
    let mut scores = raw.clone();
    scores.values_mut().iter_mut().for_each(|s| *s *= a);
    Ok((
        scores,
        ScoreCache {
            metric,
            a,
            g_unit,
            g_norm,
            f_unit,
            f_norm,
            raw,
        },
    ))
}

fn duplicate_mask(entities: &[usize]) -> Vec<bool> {
    let b = entities.len();
    let mut mask = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            mask[i * b + j] = i != j && entities[i] == entities[j];
        }
    }
    mask
}

/// In-batch scoring: row i's positive is column i, every other column is a
/// negative unless it carries the same entity as row i.
pub fn batch_score_matrix<F: Scalar>(
    g: &Tensor<F>,
    f: &Tensor<F>,
    a: F,
    entities: &[usize],
    metric: Metric,
) -> Result<(ScoreMatrix<F>, ScoreCache<F>)> {
    let b = g.rows();
    if f.rows() != b || entities.len() != b {
        return Err(RelicError::shape(
            "batch_score_matrix",
            format!("{b} contexts, {} entity rows, {} entity ids", f.rows(), entities.len()),
        ));
    }
    let (scores, cache) = pairwise_scores(g, f, a, metric)?;
    let sm = ScoreMatrix::new(scores, (0..b).collect(), duplicate_mask(entities))?;
    Ok((sm, cache))
}

/// Explicit candidates: `f` holds every distinct candidate vector once;
/// row i may only see the columns listed in `allowed[i]` plus its target.
pub fn candidate_score_matrix<F: Scalar>(
    g: &Tensor<F>,
    f: &Tensor<F>,
    a: F,
    targets: Vec<usize>,
    allowed: &[Vec<usize>],
    metric: Metric,
) -> Result<(ScoreMatrix<F>, ScoreCache<F>)> {
    let (b, c) = (g.rows(), f.rows());
    if allowed.len() != b {
        return Err(RelicError::shape("candidate_score_matrix", format!("{} lists for {b} rows", allowed.len())));
    }
    let mut mask = vec![true; b * c];
    for (i, cols) in allowed.iter().enumerate() {
        for &j in cols {
            if j >= c {
                return Err(RelicError::InvalidArgument(format!("candidate column {j} outside {c}")));
            }
            mask[i * c + j] = false;
        }
        if let Some(&t) = targets.get(i) {
            if t < c {
                mask[i * c + t] = false;
            }
        }
    }
    let (scores, cache) = pairwise_scores(g, f, a, metric)?;
    Ok((ScoreMatrix::new(scores, targets, mask)?, cache))
}

/// Back-propagate `d_scores` to the unnormalized inputs and the scale.
pub fn score_backward<F: Scalar>(cache: &ScoreCache<F>, d_scores: &Tensor<F>) -> Result<ScoreGrads<F>> {
    let (b, c) = cache.raw.matrix_dims();
    if d_scores.matrix_dims() != (b, c) {
        return Err(RelicError::shape("score_backward", format!("{:?} for {b}x{c}", d_scores.dims())));
    }
    let d = cache.g_unit.cols();
    let mut d_a = F::zero();
    for (ds, r) in d_scores.values().iter().zip(cache.raw.values()) {
        d_a += *ds * *r;
    }
    let mut d_gu = Tensor::zeros(&[b, d]);
    let mut d_fu = Tensor::zeros(&[c, d]);
    for i in 0..b {
        let row = d_scores.row(i);
        for (j, ds) in row.iter().enumerate() {
            if *ds == F::zero() {
                continue;
            }
            let w = cache.a * *ds;
            axpy(w, cache.f_unit.row(j), d_gu.row_mut(i));
            axpy(w, cache.g_unit.row(i), d_fu.row_mut(j));
        }
    }
    if cache.metric == Metric::Cosine {
        unit_backward(&mut d_gu, &cache.g_unit, &cache.g_norm);
        unit_backward(&mut d_fu, &cache.f_unit, &cache.f_norm);
    }
    Ok(ScoreGrads {
        d_g: d_gu,
        d_f: d_fu,
        d_a,
    })
}

/// Through `u = x/‖x‖`: `dx = (du − u (u·du)) / ‖x‖`, in place.
fn unit_backward<F: Scalar>(du: &mut Tensor<F>, unit: &Tensor<F>, norm: &[F]) {
    for (i, &n) in norm.iter().enumerate() {
        let u = unit.row(i);
        let proj = dot(u, du.row(i));
        for (g, ui) in du.row_mut(i).iter_mut().zip(u) {
            *g = (*g - *ui * proj) / n;
        }
    }
}

#[derive(Clone, Debug)]
pub struct NceOutput<F: Scalar> {
    /// Mean over rows of `−log softmax(row)[target]`.
    pub loss: F,
    pub row_losses: Vec<F>,
    /// Gradient of the mean loss: `(softmax − one_hot) / B`, zero on
    /// masked cells.
    pub grad: Tensor<F>,
}

pub fn nce_loss<F: Scalar>(sm: &ScoreMatrix<F>) -> NceOutput<F> {
    let (b, c) = (sm.rows(), sm.cols());
    let mask_score = F::of(MASK_SCORE);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut row_losses = Vec::with_capacity(b);
    let inv_b = F::one() / F::of(b.max(1) as f64);
    let mut buf = vec![F::zero(); c];
    for i in 0..b {
        for (j, v) in buf.iter_mut().enumerate() {
            *v = if sm.is_masked(i, j) { mask_score } else { sm.get(i, j) };
        }
        let max = buf.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in buf.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let t = sm.target(i);
        row_losses.push(z.ln() - (sm.get(i, t) - max));
        let gr = grad.row_mut(i);
        for (j, (g, e)) in gr.iter_mut().zip(&buf).enumerate() {
            if sm.is_masked(i, j) {
                continue;
            }
            let p = *e / z;
            *g = (if j == t { p - F::one() } else { p }) * inv_b;
        }
    }
    let loss = row_losses.iter().cloned().sum::<F>() * inv_b;
    NceOutput { loss, row_losses, grad }
}

/// Mean 1-based rank of the target among unmasked cells, and the fraction
/// of rows ranked first. A cell that ties the target outranks it only when
/// its column index is lower.
pub fn in_batch_metrics<F: Scalar>(sm: &ScoreMatrix<F>) -> (f64, f64) {
    let b = sm.rows();
    if b == 0 {
        return (0.0, 0.0);
    }
    let mut rank_sum = 0usize;
    let mut top = 0usize;
    for i in 0..b {
        let t = sm.target(i);
        let st = sm.get(i, t);
        let ahead = (0..sm.cols())
            .filter(|&j| !sm.is_masked(i, j) && j != t)
            .filter(|&j| {
                let s = sm.get(i, j);
                s > st || (s == st && j < t)
            })
            .count();
        rank_sum += ahead + 1;
        top += usize::from(ahead == 0);
    }
    (rank_sum as f64 / b as f64, top as f64 / b as f64)
}

/// `k` i.i.d. entity rows drawn with probability proportional to `freqs`.
pub fn sample_noise_negatives(freqs: &[f64], k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(RelicError::InvalidArgument("need at least one negative".into()));
    }
    let dist = WeightedIndex::new(freqs)
        .map_err(|e| RelicError::InvalidArgument(format!("noise distribution: {e}")))?;
    Ok((0..k).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use proptest::prelude::*;

    fn t64(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rows: usize, d: usize, rng: &mut RngState) -> Tensor<f64> {
        let v = (0..rows * d).map(|_| rng.standard_normal()).collect();
        Tensor::from_vec(&[rows, d], v).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0], 2.0).unwrap(), 2.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], 5.0).unwrap(), 0.0);
        let s: f64 = score(&[1.0, 1.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(score(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(RelicError::ZeroNorm(_))));
    }

    fn table(rows: &[Vec<f32>]) -> EmbeddingTable {
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        EmbeddingTable::from_parts(ids, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn full_softmax_examples() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        // query along e0 with a=2: scores [2, 0, 0]
        let p = full_softmax_prob(&[3.0f32, 0.0], &t, 2.0, 0).unwrap();
        let e2 = 2f64.exp();
        assert!((p - e2 / (e2 + 2.0)).abs() < 1e-12);
        assert!((p - 0.78699).abs() < 1e-5);
        let t = table(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![0.5, 0.0]]);
        for r in 0..4 {
            assert!((full_softmax_prob(&[1.0f32, 1.0], &t, 3.0, r).unwrap() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matrix_shapes_and_mask() {
        let g = t64(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let (sm, _) = batch_score_matrix(&g, &g, 1.0, &[0, 1, 2], Metric::Cosine).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(sm.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let (sm, _) = batch_score_matrix(&g, &g, 1.0, &[7, 1, 7], Metric::Cosine).unwrap();
        let masked: Vec<(usize, usize)> =
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).filter(|&(i, j)| sm.is_masked(i, j)).collect();
        assert_eq!(masked, vec![(0, 2), (2, 0)]);

        let one = t64(&[vec![0.3, 0.4]]);
        let (sm, _) = batch_score_matrix(&one, &one, 16.0, &[0], Metric::Cosine).unwrap();
        assert_eq!(nce_loss(&sm).loss, 0.0);
        let zero = t64(&[vec![0.0, 0.0]]);
        assert!(batch_score_matrix(&zero, &one, 1.0, &[0], Metric::Cosine).is_err());
    }

    fn matrix(scores: Vec<f64>, target: usize) -> ScoreMatrix<f64> {
        let n = scores.len();
        ScoreMatrix::new(Tensor::from_vec(&[1, n], scores).unwrap(), vec![target], vec![false; n]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let out = nce_loss(&matrix(vec![0.5; 4], 2));
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.38629).abs() < 1e-5);
        let out = nce_loss(&matrix(vec![2.0, 0.0, 0.0], 0));
        let e2 = 2f64.exp();
        assert!((out.loss + (e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
        assert!((out.loss - 0.23954).abs() < 1e-5);
        let g = out.grad.values();
        assert!((g[0] - (e2 / (e2 + 2.0) - 1.0)).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn masked_cells_drop_out() {
        let s = Tensor::from_vec(&[1, 3], vec![1.0, 50.0, 1.0]).unwrap();
        let sm = ScoreMatrix::new(s, vec![0], vec![false, true, false]).unwrap();
        let out = nce_loss(&sm);
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.grad.values()[1], 0.0);
        let s = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(ScoreMatrix::new(s, vec![0], vec![true, false]).is_err());
    }

    #[test]
    fn metrics_examples() {
        let eye = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let sm = ScoreMatrix::new(eye, (0..4).collect(), vec![false; 16]).unwrap();
        assert_eq!(in_batch_metrics::<f64>(&sm), (1.0, 1.0));
        assert_eq!(in_batch_metrics(&matrix(vec![0.0, 1.0, 2.0], 0)), (3.0, 0.0));
        let flat = Tensor::filled(&[3, 3], 0.5f64);
        let sm = ScoreMatrix::new(flat, vec![0, 0, 0], vec![false; 9]).unwrap();
        assert_eq!(in_batch_metrics(&sm), (1.0, 1.0));
        let flat = Tensor::filled(&[1, 3], 0.5f64);
        let sm = ScoreMatrix::new(flat, vec![2], vec![false, true, false]).unwrap();
        assert_eq!(in_batch_metrics(&sm), (2.0, 0.0));
    }

    #[test]
    fn noise_sampling() {
        let mut rng = RngState::new(5);
        let draws = sample_noise_negatives(&[1.0; 4], 10_000, &mut rng).unwrap();
        for e in 0..4 {
            let f = draws.iter().filter(|&&d| d == e).count() as f64 / 1e4;
            assert!((f - 0.25).abs() < 0.03, "{e}: {f}");
        }
        assert!(sample_noise_negatives(&[1.0, 0.0, 0.0], 100, &mut rng).unwrap().iter().all(|&d| d == 0));
        let a = sample_noise_negatives(&[3.0, 1.0, 2.0], 50, &mut RngState::new(9)).unwrap();
        let b = sample_noise_negatives(&[3.0, 1.0, 2.0], 50, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_noise_negatives(&[0.0, 0.0], 3, &mut rng).is_err());
    }

    #[test]
    fn full_set_negatives_match_full_softmax() {
        let mut rng = RngState::new(11);
        for n in [2usize, 17, 300, 1000] {
            let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| rng.standard_normal() as f32).collect()).collect();
            let t = table(&rows);
            let f: Tensor<f64> = t.vectors().cast();
            let g = random(3, 6, &mut rng);
            let targets: Vec<usize> = (0..3).map(|_| rng.below(n)).collect();
            let all: Vec<Vec<usize>> = vec![(0..n).collect(); 3];
            let (sm, _) = candidate_score_matrix(&g, &f, 4.5, targets.clone(), &all, Metric::Cosine).unwrap();
            let out = nce_loss(&sm);
            for (i, &tg) in targets.iter().enumerate() {
                let p = full_softmax_prob(g.row(i), &t, 4.5, tg).unwrap();
                assert!((out.row_losses[i] + p.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_through_scores() {
        let mut rng = RngState::new(3);
        for metric in [Metric::Cosine, Metric::Dot] {
            let mut params = vec![random(4, 5, &mut rng), random(4, 5, &mut rng), Tensor::scalar(2.5)];
            let ents = [0usize, 1, 0, 3];
            let (sm, cache) =
                batch_score_matrix(&params[0], &params[1], params[2].item(), &ents, metric).unwrap();
            let out = nce_loss(&sm);
            let grads = score_backward(&cache, &out.grad).unwrap();
            params[0].set_grad(grads.d_g.into_values()).unwrap();
            params[1].set_grad(grads.d_f.into_values()).unwrap();
            params[2].set_grad(vec![grads.d_a]).unwrap();
            let rep = grad_check(
                |p: &[Tensor<f64>]| {
                    let (sm, _) = batch_score_matrix(&p[0], &p[1], p[2].item(), &ents, metric).unwrap();
                    nce_loss(&sm).loss
                },
                &mut params,
                1e-6,
                100,
                &mut RngState::new(0),
            );
            assert!(rep.max_rel_error < 1e-6, "{metric}: {rep:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_nonnegative_and_shift_invariant(
            scores in proptest::collection::vec(-20.0f64..20.0, 2..12),
            shift in -100.0f64..100.0,
            pick in 0usize..100,
        ) {
            let t = pick % scores.len();
            let base = nce_loss(&matrix(scores.clone(), t)).loss;
            prop_assert!(base >= 0.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert!((nce_loss(&matrix(shifted, t)).loss - base).abs() < 1e-6);
        }

        #[test]
        fn entity_rescaling_leaves_loss(seed in 0u64..500, c in 0.01f64..100.0) {
            let mut rng = RngState::new(seed);
            let g = random(5, 4, &mut rng);
            let f = random(5, 4, &mut rng);
            let mut fc = f.clone();
            fc.values_mut().iter_mut().for_each(|x| *x *= c);
            let ents = [0, 1, 2, 3, 4];
            let (a, _) = batch_score_matrix(&g, &f, 7.0, &ents, Metric::Cosine).unwrap();
            let (b, _) = batch_score_matrix(&g, &fc, 7.0, &ents, Metric::Cosine).unwrap();
            prop_assert!((nce_loss(&a).loss - nce_loss(&b).loss).abs() < 1e-10);
            prop_assert_eq!(in_batch_metrics(&a), in_batch_metrics(&b));
        }
    }
}
