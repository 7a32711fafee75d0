//! Scalar abstraction shared by the embedding, scoring and training math.
//!
//! Everything numeric in the crate is written against [`Scalar`] so the same
//! code runs in `f32` or `f64`. Training and gradient checks use `f64`; the
//! phrase index always stores `f32` and accumulates inner products in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Scales `v` to unit length in place. A zero vector is left as zeros.
pub fn normalize_in_place<S: Scalar>(v: &mut [S]) {
    let n = l2_norm(v);
    if n > S::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

pub fn cast_vec<A: Scalar, B: Scalar>(v: &[A]) -> Vec<B> {
    v.iter()
        .map(|x| B::from_f64(x.to_f64_lossy()).unwrap_or_else(B::nan))
        .collect()
}

/// `log(sum(exp(z)))` with the max-shift identity.
pub fn log_sum_exp<S: Scalar>(z: &[S]) -> S {
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    if max == S::infinity() {
        return max;
    }
    let sum: S = z.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax probabilities of `z`, written into `out`, using the max-shift identity.
pub fn softmax_into<S: Scalar>(z: &[S], out: &mut Vec<S>) {
    let lse = log_sum_exp(z);
    out.clear();
    out.extend(z.iter().map(|&x| (x - lse).exp()));
}
