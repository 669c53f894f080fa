//! The numeric element type shared by plain evaluation, forward-mode duals
//! and the reverse-mode tape.
//!
//! Model code is written once against [`Scalar`]; the concrete type picks the
//! evaluation strategy:
//!
//! * `f64` / `f32`: plain values,
//! * [`Dual<T>`](crate::Dual): value plus tangent (Jacobian-vector products),
//! * [`Var`](crate::Var): value recorded on a tape (gradients),
//!
//! and the wrappers compose, so `Dual<Var>` differentiates a linearized model.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub, Div};

use num_traits::Float;

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a constant; it carries no derivative information.
    fn constant(v: f64) -> Self;

    /// Primal value as `f64`.
    fn value(&self) -> f64;

    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Inner product of two equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(Self::zero(), |acc, (&x, &y)| acc + x * y)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::zero(), |acc, &x| acc + x)
    }

    /// Row-major `a[m×k] · b_t[n×k]ᵀ`. `b_t` is the right operand already
    /// transposed so that every output entry is a contiguous dot product.
    ///
    /// This is the kernel hook that [`Dual`](crate::Dual) overrides to
    /// split primal and tangent parts once per product.
    fn matmul_nt(a: &[Self], b_t: &[Self], m: usize, k: usize, n: usize) -> Vec<Self> {
        let mut out = Vec::with_capacity(m * n);
        for row in a.chunks_exact(k).take(m) {
            for col in b_t.chunks_exact(k).take(n) {
                out.push(Self::dot(row, col));
            }
        }
        out
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn constant(v: f64) -> Self {
                <$t as num_traits::NumCast>::from(v).expect("finite constant")
            }
            #[inline]
            fn value(&self) -> f64 {
                <$t as num_traits::ToPrimitive>::to_f64(self).unwrap_or(f64::NAN)
            }
            #[inline]
            fn tanh(self) -> Self {
                Float::tanh(self)
            }
            #[inline]
            fn exp(self) -> Self {
                Float::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                Float::ln(self)
            }
            #[inline]
            fn zero() -> Self {
                <$t as num_traits::Zero>::zero()
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);
