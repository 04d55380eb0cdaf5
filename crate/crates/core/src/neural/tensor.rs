use super::Scalar;
use crate::error::{RelicError, Result};

/// Row-major dense tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    dims: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: vec![F::zero(); n],
            grad: None,
        }
    }

    pub fn filled(dims: &[usize], value: F) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            dims: Vec::new(),
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], values: Vec<F>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(RelicError::shape(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(RelicError::shape(
                    "tensor",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            values.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), cols], values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Matrix view: rank 0 is 1×1, rank 1 is 1×n, higher ranks fold the
    /// leading dims into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            _ => {
                let cols = *self.dims.last().unwrap();
                (self.values.len() / cols.max(1), cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().0
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().1
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [F] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![F::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(RelicError::shape(
                "set_grad",
                format!("grad of {} for tensor {:?}", grad.len(), self.dims),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Split the value and gradient buffers for in-place updates.
    pub fn values_and_grad_mut(&mut self) -> (&mut [F], &mut [F]) {
        let n = self.values.len();
        let g = self.grad.get_or_insert_with(|| vec![F::zero(); n]);
        (&mut self.values, g)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| G::of(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| G::of(v.as_f64())).collect()),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.values.len() {
            return Err(RelicError::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
