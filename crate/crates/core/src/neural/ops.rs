//! Forward/backward pairs for the layer primitives.
//!
//! Backward functions take the upstream gradient, return the gradient with
//! respect to the activation input, and accumulate parameter gradients into
//! the parameter tensors' grad buffers.

use super::{axpy, dot, Mode, RngState, Scalar, Tensor};
use crate::error::{RelicError, Result};

fn expect_cols<F: Scalar>(op: &'static str, t: &Tensor<F>, cols: usize) -> Result<()> {
    if t.cols() != cols {
        return Err(RelicError::shape(
            op,
            format!("expected {cols} columns, got tensor {:?}", t.dims()),
        ));
    }
    Ok(())
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.matrix_dims() != b.matrix_dims() {
        return Err(RelicError::shape(
            op,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `a (m×k) · b (k×n)`
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.matrix_dims();
    let (k2, n) = b.matrix_dims();
    if k != k2 {
        return Err(RelicError::shape(
            "matmul",
            format!("{:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, b.row(p), orow);
        }
    }
    Ok(out)
}

/// Returns `(da, db)` for `c = a · b`.
pub fn matmul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, k) = a.matrix_dims();
    let (_, n) = b.matrix_dims();
    if dc.matrix_dims() != (m, n) || b.rows() != k {
        return Err(RelicError::shape(
            "matmul_backward",
            format!("a {:?}, b {:?}, dc {:?}", a.dims(), b.dims(), dc.dims()),
        ));
    }
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let dcrow = dc.row(i);
        for p in 0..k {
            da.row_mut(i)[p] = dot(dcrow, b.row(p));
            axpy(a.row(i)[p], dcrow, db.row_mut(p));
        }
    }
    Ok((da, db))
}

/// `y = x · wᵀ + b` with `w` stored as (out × in).
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (rows, fan_in) = x.matrix_dims();
    let (fan_out, w_in) = w.matrix_dims();
    if fan_in != w_in {
        return Err(RelicError::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.dims(), w.dims()),
        ));
    }
    if let Some(b) = b {
        if b.len() != fan_out {
            return Err(RelicError::shape(
                "linear",
                format!("bias {:?} for {fan_out} outputs", b.dims()),
            ));
        }
    }
    let mut y = Tensor::zeros(&[rows, fan_out]);
    for t in 0..rows {
        let xr = x.row(t);
        let yr = y.row_mut(t);
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, w.row(o));
        }
        if let Some(b) = b {
            for (yo, bo) in yr.iter_mut().zip(b.values()) {
                *yo += *bo;
            }
        }
    }
    Ok(y)
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &mut Tensor<F>,
    b: Option<&mut Tensor<F>>,
    dy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (rows, fan_in) = x.matrix_dims();
    let fan_out = w.rows();
    if dy.matrix_dims() != (rows, fan_out) || w.cols() != fan_in {
        return Err(RelicError::shape(
            "linear_backward",
            format!("x {:?}, w {:?}, dy {:?}", x.dims(), w.dims(), dy.dims()),
        ));
    }
    let mut dx = Tensor::zeros(&[rows, fan_in]);
    {
        let (wv, wg) = w.values_and_grad_mut();
        for t in 0..rows {
            let dyr = dy.row(t);
            let xr = x.row(t);
            let dxr = dx.row_mut(t);
            for (o, &g) in dyr.iter().enumerate() {
                if g == F::zero() {
                    continue;
                }
                axpy(g, &wv[o * fan_in..(o + 1) * fan_in], dxr);
                axpy(g, xr, &mut wg[o * fan_in..(o + 1) * fan_in]);
            }
        }
    }
    if let Some(b) = b {
        let bg = b.grad_mut();
        for t in 0..rows {
            for (g, d) in bg.iter_mut().zip(dy.row(t)) {
                *g += *d;
            }
        }
    }
    Ok(dx)
}

pub fn add_bias<F: Scalar>(x: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    expect_cols("add_bias", x, b.len())?;
    let mut y = x.clone();
    y.clear_grad();
    let c = b.len();
    for row in y.values_mut().chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(b.values()) {
            *v += *bv;
        }
    }
    Ok(y)
}

pub fn add_bias_backward<F: Scalar>(b: &mut Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    expect_cols("add_bias_backward", dy, b.len())?;
    let c = b.len();
    let bg = b.grad_mut();
    for row in dy.values().chunks(c) {
        for (g, d) in bg.iter_mut().zip(row) {
            *g += *d;
        }
    }
    let mut dx = dy.clone();
    dx.clear_grad();
    Ok(dx)
}

fn map<F: Scalar>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    let mut y = Tensor::zeros(x.dims());
    for (o, i) in y.values_mut().iter_mut().zip(x.values()) {
        *o = f(*i);
    }
    y
}

fn zip_map<F: Scalar>(
    op: &'static str,
    x: &Tensor<F>,
    dy: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    same_shape(op, x, dy)?;
    let mut dx = Tensor::zeros(x.dims());
    for ((o, a), b) in dx.values_mut().iter_mut().zip(x.values()).zip(dy.values()) {
        *o = f(*a, *b);
    }
    Ok(dx)
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    map(x, |v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("relu_backward", x, dy, |v, g| if v > F::zero() { g } else { F::zero() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, k, half) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5));
    map(x, |v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, k, half, three) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5), F::of(3.0));
    zip_map("gelu_backward", x, dy, |v, g| {
        let u = c * (v + k * v * v * v);
        let th = u.tanh();
        let du = c * (F::one() + three * k * v * v);
        g * (half * (F::one() + th) + half * v * (F::one() - th * th) * du)
    })
}

const LN_EPS: f64 = 1e-12;

pub struct LayerNormCache<F: Scalar> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> LayerNormCache<F> {
    /// Normalized input before the affine scale/shift.
    pub fn normalized(&self) -> &Tensor<F> {
        &self.xhat
    }
}

/// Row-wise layer normalization; a zero-variance row normalizes to zeros.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let (rows, cols) = x.matrix_dims();
    if gamma.len() != cols || beta.len() != cols {
        return Err(RelicError::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.dims(), gamma.dims(), beta.dims()),
        ));
    }
    let n = F::of(cols as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Tensor::zeros(&[rows, cols]);
    let mut y = Tensor::zeros(&[rows, cols]);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let hr = xhat.row_mut(r);
        for (h, v) in hr.iter_mut().zip(xr) {
            *h = (*v - mean) * is;
        }
        let hr = xhat.row(r).to_vec();
        let yr = y.row_mut(r);
        for c in 0..cols {
            yr[c] = hr[c] * gamma.values()[c] + beta.values()[c];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: &mut Tensor<F>,
    beta: &mut Tensor<F>,
    dy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (rows, cols) = cache.xhat.matrix_dims();
    if dy.matrix_dims() != (rows, cols) {
        return Err(RelicError::shape(
            "layer_norm_backward",
            format!("dy {:?} vs {rows}x{cols}", dy.dims()),
        ));
    }
    let n = F::of(cols as f64);
    let mut dx = Tensor::zeros(&[rows, cols]);
    {
        let bg = beta.grad_mut();
        for r in 0..rows {
            for (g, d) in bg.iter_mut().zip(dy.row(r)) {
                *g += *d;
            }
        }
    }
    let (gv, gg) = gamma.values_and_grad_mut();
    let mut dxhat = vec![F::zero(); cols];
    for r in 0..rows {
        let hr = cache.xhat.row(r);
        let dyr = dy.row(r);
        for c in 0..cols {
            gg[c] += dyr[c] * hr[c];
            dxhat[c] = dyr[c] * gv[c];
        }
        let sum_d = dxhat.iter().copied().sum::<F>();
        let sum_dh = dot(&dxhat, hr);
        let is = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            dxr[c] = is * (dxhat[c] - sum_d / n - hr[c] * sum_dh / n);
        }
    }
    Ok(dx)
}

/// Row softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (rows, cols) = x.matrix_dims();
    let mut y = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        softmax_in_place(x.row(r), y.row_mut(r));
    }
    y
}

pub(crate) fn softmax_in_place<F: Scalar>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Backward through softmax given its output `y`.
pub fn softmax_rows_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("softmax_rows_backward", y, dy)?;
    let (rows, cols) = y.matrix_dims();
    let mut dx = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let s = dot(yr, dyr);
        for (o, (a, b)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(dyr)) {
            *o = *a * (*b - s);
        }
    }
    Ok(dx)
}

pub fn embedding_lookup<F: Scalar>(table: &Tensor<F>, ids: &[u32]) -> Result<Tensor<F>> {
    let (n, h) = table.matrix_dims();
    let mut out = Tensor::zeros(&[ids.len(), h]);
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= n {
            return Err(RelicError::shape(
                "embedding_lookup",
                format!("id {id} out of range for table {:?}", table.dims()),
            ));
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-add `dy` rows into the looked-up rows of `table.grad`.
pub fn embedding_backward<F: Scalar>(table: &mut Tensor<F>, ids: &[u32], dy: &Tensor<F>) -> Result<()> {
    let h = table.cols();
    if dy.matrix_dims() != (ids.len(), h) {
        return Err(RelicError::shape(
            "embedding_backward",
            format!("dy {:?} for {} ids of width {h}", dy.dims(), ids.len()),
        ));
    }
    let g = table.grad_mut();
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        for (gi, d) in g[id * h..(id + 1) * h].iter_mut().zip(dy.row(r)) {
            *gi += *d;
        }
    }
    Ok(())
}

/// Inverted-dropout mask: `None` when the layer is the identity.
pub struct DropoutMask<F: Scalar> {
    scale: Option<Vec<F>>,
}

pub fn dropout<F: Scalar>(
    x: &Tensor<F>,
    keep: f64,
    mode: Mode,
    rng: &mut RngState,
) -> (Tensor<F>, DropoutMask<F>) {
    if mode == Mode::Eval || keep >= 1.0 {
        let mut y = x.clone();
        y.clear_grad();
        return (y, DropoutMask { scale: None });
    }
    let inv = F::of(1.0 / keep);
    let scale: Vec<F> = (0..x.len())
        .map(|_| if rng.uniform() < keep { inv } else { F::zero() })
        .collect();
    let mut y = Tensor::zeros(x.dims());
    for ((o, v), s) in y.values_mut().iter_mut().zip(x.values()).zip(&scale) {
        *o = *v * *s;
    }
    (y, DropoutMask { scale: Some(scale) })
}

pub fn dropout_backward<F: Scalar>(mask: &DropoutMask<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    dx.clear_grad();
    if let Some(scale) = &mask.scale {
        for (v, s) in dx.values_mut().iter_mut().zip(scale) {
            *v *= *s;
        }
    }
    dx
}
