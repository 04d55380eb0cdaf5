use super::ops::{linear, linear_backward, softmax_in_place};
use super::{axpy, dot, Scalar, Tensor};
use crate::error::{RelicError, Result};

/// Projection weights of one multi-head self-attention layer. Weights are
/// (out × in) like every other linear map in this crate. There is no key
/// bias: it shifts every score in a softmax row equally and has no effect.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F: Scalar> {
    pub q: Tensor<F>,
    pub q_bias: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub v_bias: Tensor<F>,
    pub o: Tensor<F>,
    pub o_bias: Tensor<F>,
}

pub struct AttentionCache<F: Scalar> {
    x_query: Tensor<F>,
    x_keys: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// per head, n_query × n_valid
    probs: Vec<Vec<F>>,
    ctx: Tensor<F>,
    heads: usize,
    seq_len: usize,
}

fn leading_rows<F: Scalar>(x: &Tensor<F>, n: usize) -> Tensor<F> {
    let c = x.cols();
    Tensor::from_vec(&[n, c], x.values()[..n * c].to_vec()).expect("row slice has consistent shape")
}

/// Self-attention over `x` (T×h) for the first `n_query` positions.
///
/// Only the first `n_valid` positions act as keys; later positions are
/// padding and receive exactly zero attention weight.
pub fn multi_head_attention<F: Scalar>(
    x: &Tensor<F>,
    p: &AttentionParams<F>,
    heads: usize,
    n_query: usize,
    n_valid: usize,
) -> Result<(Tensor<F>, AttentionCache<F>)> {
    let (seq_len, h) = x.matrix_dims();
    if heads == 0 || h % heads != 0 {
        return Err(RelicError::shape(
            "multi_head_attention",
            format!("{heads} heads do not divide hidden size {h}"),
        ));
    }
    if n_query == 0 || n_query > seq_len || n_valid == 0 || n_valid > seq_len {
        return Err(RelicError::shape(
            "multi_head_attention",
            format!("n_query {n_query}, n_valid {n_valid} for sequence of {seq_len}"),
        ));
    }
    let x_query = leading_rows(x, n_query);
    let x_keys = leading_rows(x, n_valid);
    let q = linear(&x_query, &p.q, Some(&p.q_bias))?;
    let k = linear(&x_keys, &p.k, None)?;
    let v = linear(&x_keys, &p.v, Some(&p.v_bias))?;
    let hd = h / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());

    let mut ctx = Tensor::zeros(&[n_query, h]);
    let mut probs = Vec::with_capacity(heads);
    let mut scores = vec![F::zero(); n_valid];
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        let mut ph = vec![F::zero(); n_query * n_valid];
        for i in 0..n_query {
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            let pi = &mut ph[i * n_valid..(i + 1) * n_valid];
            softmax_in_place(&scores, pi);
            let ci = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &pij) in pi.iter().enumerate() {
                axpy(pij, &v.row(j)[cols.clone()], ci);
            }
        }
        probs.push(ph);
    }
    let out = linear(&ctx, &p.o, Some(&p.o_bias))?;
    Ok((
        out,
        AttentionCache {
            x_query,
            x_keys,
            q,
            k,
            v,
            probs,
            ctx,
            heads,
            seq_len,
        },
    ))
}

/// Returns the gradient w.r.t. the full input `x` (T×h).
pub fn multi_head_attention_backward<F: Scalar>(
    cache: &AttentionCache<F>,
    p: &mut AttentionParams<F>,
    dout: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n_query, h) = cache.q.matrix_dims();
    let n_valid = cache.k.rows();
    if dout.matrix_dims() != (n_query, h) {
        return Err(RelicError::shape(
            "multi_head_attention_backward",
            format!("dout {:?}, expected {n_query}x{h}", dout.dims()),
        ));
    }
    let dctx = linear_backward(&cache.ctx, &mut p.o, Some(&mut p.o_bias), dout)?;
    let hd = h / cache.heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut dq = Tensor::zeros(&[n_query, h]);
    let mut dk = Tensor::zeros(&[n_valid, h]);
    let mut dv = Tensor::zeros(&[n_valid, h]);
    let mut dp = vec![F::zero(); n_valid];
    for head in 0..cache.heads {
        let cols = head * hd..(head + 1) * hd;
        let ph = &cache.probs[head];
        for i in 0..n_query {
            let dci = &dctx.row(i)[cols.clone()];
            let pi = &ph[i * n_valid..(i + 1) * n_valid];
            for j in 0..n_valid {
                dp[j] = dot(dci, &cache.v.row(j)[cols.clone()]);
                axpy(pi[j], dci, &mut dv.row_mut(j)[cols.clone()]);
            }
            let s = dot(pi, &dp);
            for j in 0..n_valid {
                let ds = pi[j] * (dp[j] - s) * scale;
                if ds == F::zero() {
                    continue;
                }
                axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    let dxq = linear_backward(&cache.x_query, &mut p.q, Some(&mut p.q_bias), &dq)?;
    let dxk = linear_backward(&cache.x_keys, &mut p.k, None, &dk)?;
    let dxv = linear_backward(&cache.x_keys, &mut p.v, Some(&mut p.v_bias), &dv)?;
    let mut dx = Tensor::zeros(&[cache.seq_len, h]);
    let dxs = dx.values_mut();
    for (d, s) in dxs.iter_mut().zip(dxq.values()) {
        *d += *s;
    }
    for ((d, a), b) in dxs.iter_mut().zip(dxk.values()).zip(dxv.values()) {
        *d += *a + *b;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{grad_check, init_trunc_normal, RngState};

    fn params(h: usize, seed: u64) -> AttentionParams<f64> {
        let mut rng = RngState::new(seed);
        let mut w = || init_trunc_normal::<f64>(&[h, h], 0.5, &mut rng);
        let (q, k, v, o) = (w(), w(), w(), w());
        let mut rng = RngState::new(seed + 1);
        let mut b = || init_trunc_normal::<f64>(&[h], 0.5, &mut rng);
        AttentionParams {
            q,
            q_bias: b(),
            k,
            v,
            v_bias: b(),
            o,
            o_bias: b(),
        }
    }

    fn flatten(p: &AttentionParams<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![
            x.clone(),
            p.q.clone(),
            p.q_bias.clone(),
            p.k.clone(),
            p.v.clone(),
            p.v_bias.clone(),
            p.o.clone(),
            p.o_bias.clone(),
        ]
    }

    fn unflatten(t: &[Tensor<f64>]) -> (Tensor<f64>, AttentionParams<f64>) {
        (
            t[0].clone(),
            AttentionParams {
                q: t[1].clone(),
                q_bias: t[2].clone(),
                k: t[3].clone(),
                v: t[4].clone(),
                v_bias: t[5].clone(),
                o: t[6].clone(),
                o_bias: t[7].clone(),
            },
        )
    }

    fn check(n_query: usize, n_valid: usize) {
        let (t, h, heads) = (5, 8, 2);
        let x: Tensor<f64> = init_trunc_normal(&[t, h], 0.8, &mut RngState::new(3));
        let mut p = params(h, 10);
        let (out, cache) = multi_head_attention(&x, &p, heads, n_query, n_valid).unwrap();
        let w: Tensor<f64> = init_trunc_normal(out.dims(), 1.0, &mut RngState::new(4));
        let dx = multi_head_attention_backward(&cache, &mut p, &w).unwrap();
        let mut xx = x.clone();
        xx.set_grad(dx.into_values()).unwrap();
        let mut flat = flatten(&p, &xx);
        let loss = |ts: &[Tensor<f64>]| {
            let (x, p) = unflatten(ts);
            let (o, _) = multi_head_attention(&x, &p, heads, n_query, n_valid).unwrap();
            o.values().iter().zip(w.values()).map(|(a, b)| a * b).sum::<f64>()
        };
        let rep = grad_check(loss, &mut flat, 1e-5, 200, &mut RngState::new(0));
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn gradients_full_sequence() {
        check(5, 5);
    }

    #[test]
    fn gradients_first_query_with_padding() {
        check(1, 3);
    }

    #[test]
    fn padding_does_not_change_outputs() {
        let h = 8;
        let p = params(h, 20);
        let x: Tensor<f64> = init_trunc_normal(&[3, h], 0.8, &mut RngState::new(5));
        let mut padded = Tensor::zeros(&[6, h]);
        padded.values_mut()[..3 * h].copy_from_slice(x.values());
        for v in &mut padded.values_mut()[3 * h..] {
            *v = 9.0;
        }
        let (a, _) = multi_head_attention(&x, &p, 4, 3, 3).unwrap();
        let (b, _) = multi_head_attention(&padded, &p, 4, 3, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let p = params(8, 1);
        let x: Tensor<f64> = Tensor::zeros(&[2, 8]);
        let err = multi_head_attention(&x, &p, 3, 2, 2).err().unwrap();
        assert!(err.to_string().contains("multi_head_attention"));
    }
}
