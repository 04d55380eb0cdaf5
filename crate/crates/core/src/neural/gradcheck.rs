use rand::seq::index;

use super::{RngState, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (tensor position, flat index, analytic, numeric) of the worst coordinate
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the gradients stored in `params[i].grad()` against central
/// differences of `f` on a random subsample of at least `samples`
/// coordinates (all of them when there are fewer). Every tensor contributes
/// at least a few coordinates. `f` must be deterministic.
pub fn grad_check<F: Scalar>(
    mut f: impl FnMut(&[Tensor<F>]) -> f64,
    params: &mut [Tensor<F>],
    eps: f64,
    samples: usize,
    rng: &mut RngState,
) -> GradCheckReport {
    assert!(eps > 0.0, "eps must be positive");
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for t in 0..params.len() {
        let len = params[t].len();
        if len == 0 {
            continue;
        }
        let want = if total <= samples {
            len
        } else {
            (samples * len).div_ceil(total).max(4).min(len)
        };
        let picks: Vec<usize> = if want == len {
            (0..len).collect()
        } else {
            index::sample(rng, len, want).into_vec()
        };
        for i in picks {
            let analytic = params[t].grad().map_or(0.0, |g| g[i].as_f64());
            let orig = params[t].values()[i];
            params[t].values_mut()[i] = orig + F::of(eps);
            let plus = f(params);
            params[t].values_mut()[i] = orig - F::of(eps);
            let minus = f(params);
            params[t].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, i, analytic, numeric));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut x = Tensor::<f64>::scalar(3.0);
        x.set_grad(vec![6.0]).unwrap();
        let mut params = vec![x];
        let rep = grad_check(
            |p: &[Tensor<f64>]| p[0].item() * p[0].item(),
            &mut params,
            1e-4,
            100,
            &mut RngState::new(0),
        );
        assert_eq!(rep.checked, 1);
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut x = Tensor::<f64>::scalar(3.0);
        x.set_grad(vec![5.0]).unwrap();
        let mut params = vec![x];
        let rep = grad_check(
            |p: &[Tensor<f64>]| p[0].item() * p[0].item(),
            &mut params,
            1e-4,
            100,
            &mut RngState::new(0),
        );
        assert!(rep.max_rel_error > 0.1);
    }

    #[test]
    fn subsamples_large_tensors() {
        let mut x = Tensor::<f64>::filled(&[1000], 1.0);
        x.set_grad(vec![2.0; 1000]).unwrap();
        let mut params = vec![x, Tensor::<f64>::filled(&[3], 0.0)];
        let rep = grad_check(
            |p: &[Tensor<f64>]| p[0].values().iter().map(|v| v * v).sum(),
            &mut params,
            1e-4,
            100,
            &mut RngState::new(0),
        );
        assert!(rep.checked >= 100 && rep.checked < 200, "{}", rep.checked);
        assert!(rep.max_rel_error < 1e-8);
    }
}
