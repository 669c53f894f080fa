//! Forward-mode dual numbers.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;

/// A value paired with its directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let re = self.re / o.re;
        Dual::new(re, (self.eps - re * o.eps) / o.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

fn split<T: Scalar>(xs: &[Dual<T>]) -> (Vec<T>, Vec<T>) {
    xs.iter().map(|d| (d.re, d.eps)).unzip()
}

impl<T: Scalar> Scalar for Dual<T> {
    fn constant(v: f64) -> Self {
        Dual::new(T::constant(v), T::zero())
    }

    fn value(&self) -> f64 {
        self.re.value()
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (T::constant(1.0) - t * t))
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }

    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        let (ar, ae) = split(a);
        let (br, be) = split(b);
        Dual::new(T::dot(&ar, &br), T::dot(&ar, &be) + T::dot(&ae, &br))
    }

    fn matmul_nt(a: &[Self], b_t: &[Self], m: usize, k: usize, n: usize) -> Vec<Self> {
        let (ar, ae) = split(a);
        let (br, be) = split(b_t);
        let re = T::matmul_nt(&ar, &br, m, k, n);
        let left = T::matmul_nt(&ar, &be, m, k, n);
        let right = T::matmul_nt(&ae, &br, m, k, n);
        re.into_iter()
            .zip(left.into_iter().zip(right))
            .map(|(r, (l, rr))| Dual::new(r, l + rr))
            .collect()
    }
}
