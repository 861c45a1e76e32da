//! Scalar abstraction so the same kernels run in `f32` (training) and `f64`
//! (gradient checking). Transcendentals come from `libm` so results do not
//! depend on the platform's libc.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn tanh(self) -> Self {
        libm::tanhf(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dot product with a fixed summation order (eight interleaved partial sums).
///
/// Every output element of every matrix product in the crate goes through
/// this function, so a value depends only on the two rows involved and never
/// on the shape of the surrounding matrices.
#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Real>(y: &mut [S], alpha: S, x: &[S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax<S: Real>(logits: &[S]) -> alloc::vec::Vec<S> {
    let mut out = alloc::vec::Vec::with_capacity(logits.len());
    softmax_into(logits, &mut out);
    out
}

pub fn softmax_into<S: Real>(logits: &[S], out: &mut alloc::vec::Vec<S>) {
    out.clear();
    if logits.is_empty() {
        return;
    }
    let m = logits.iter().copied().fold(logits[0], S::max);
    let mut sum = S::ZERO;
    for &l in logits {
        let e = (l - m).exp();
        out.push(e);
        sum += e;
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Real>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<S: Real>(x: S) -> S {
    if x > S::ZERO {
        x + (S::ONE + (-x).exp()).ln()
    } else {
        (S::ONE + x.exp()).ln()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU and its derivative.
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + S::from_f64(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: alloc::vec::Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: alloc::vec::Vec<f64> = (0..19).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0f64, 2.0, 3.0]);
        let b = softmax(&[101.0f64, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!(softplus(1000.0f64).is_finite());
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
    }
}
