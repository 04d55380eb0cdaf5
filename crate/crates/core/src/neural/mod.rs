//! Dense tensor primitives with hand-written backward passes.
//!
//! Everything here is generic over [`Scalar`] so the same layer code runs in
//! `f32` for training and in `f64` when a finite-difference oracle needs
//! headroom. Tensors are row-major; every primitive treats its operands as
//! matrices (rank-1 tensors are a single row).

mod attention;
mod container;
mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use attention::{multi_head_attention, multi_head_attention_backward, AttentionCache, AttentionParams};
pub use container::{read_container, write_container, NamedTensors, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use ops::*;
pub use rng::{init_trunc_normal, RngState};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating point type the numeric code is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Mode switch for layers whose behaviour differs between training and
/// inference (dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn l2_norm<F: Scalar>(v: &[F]) -> F {
    dot(v, v).sqrt()
}
