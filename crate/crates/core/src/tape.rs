//! Reverse-mode differentiation on a flat Wengert list.
//!
//! Each recorded node stores the indices of its tape parents and the local
//! partial derivative with respect to each of them. Values that do not depend
//! on any leaf are constants and are never recorded.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Default)]
struct Nodes {
    spans: Vec<(u32, u32)>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Nodes>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an independent variable.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let index = self.push(std::iter::empty());
        Var { tape: Some(self), index, value }
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    fn push(&self, edges: impl IntoIterator<Item = (u32, f64)>) -> u32 {
        let mut n = self.nodes.borrow_mut();
        let start = n.parents.len() as u32;
        for (p, w) in edges {
            n.parents.push(p);
            n.partials.push(w);
        }
        let len = n.parents.len() as u32 - start;
        let index = n.spans.len() as u32;
        n.spans.push((start, len));
        index
    }

    /// Adjoint of every node with respect to `output`.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        self.adjoints_seeded(&[(output, 1.0)])
    }

    /// Adjoints for a weighted sum of outputs, i.e. a vector-Jacobian product.
    pub fn adjoints_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Vec<f64> {
        let n = self.nodes.borrow();
        let mut adj = vec![0.0; n.spans.len()];
        for (v, w) in seeds {
            if let Some(i) = v.tape_index() {
                adj[i] += w;
            }
        }
        for i in (0..n.spans.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (start, len) = n.spans[i];
            let range = start as usize..(start + len) as usize;
            for (&p, &w) in n.parents[range.clone()].iter().zip(&n.partials[range]) {
                adj[p as usize] += w * a;
            }
        }
        adj
    }
}

/// A scalar whose derivatives are recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape_index() {
            Some(i) => write!(f, "Var(#{i}, {})", self.value),
            None => write!(f, "Var(const {})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape_index(&self) -> Option<usize> {
        self.tape.map(|_| self.index as usize)
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(t) => Var { tape: Some(t), index: t.push([(self.index, partial)]), value },
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(value),
            (Some(t), None) => Var { tape: Some(t), index: t.push([(self.index, da)]), value },
            (None, Some(t)) => Var { tape: Some(t), index: t.push([(other.index, db)]), value },
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                index: t.push([(self.index, da), (other.index, db)]),
                value,
            },
        }
    }

    fn is_const_zero(&self) -> bool {
        self.tape.is_none() && self.value == 0.0
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.value + o.value, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.value - o.value, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let value = self.value * o.value;
        if self.is_const_zero() || o.is_const_zero() {
            return Var::constant(value);
        }
        self.binary(o, value, o.value, self.value)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let value = self.value / o.value;
        self.binary(o, value, 1.0 / o.value, -value / o.value)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl Scalar for Var<'_> {
    fn constant(v: f64) -> Self {
        Var { tape: None, index: u32::MAX, value: v }
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    /// Records a single n-ary node instead of a chain of binary ones.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut value = 0.0;
        let mut tape = None;
        for (x, y) in a.iter().zip(b) {
            value += x.value * y.value;
            tape = tape.or(x.tape).or(y.tape);
        }
        let Some(t) = tape else {
            return Var::constant(value);
        };
        let edges = a.iter().zip(b).flat_map(|(x, y)| {
            let ex = x.tape.map(|_| (x.index, y.value));
            let ey = y.tape.map(|_| (y.index, x.value));
            ex.into_iter().chain(ey)
        });
        Var { tape: Some(t), index: t.push(edges), value }
    }

    fn sum(xs: &[Self]) -> Self {
        let mut value = 0.0;
        let mut tape = None;
        for x in xs {
            value += x.value;
            tape = tape.or(x.tape);
        }
        let Some(t) = tape else {
            return Var::constant(value);
        };
        let edges = xs.iter().filter(|x| x.tape.is_some()).map(|x| (x.index, 1.0));
        Var { tape: Some(t), index: t.push(edges), value }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(3.0);
        let y = w * w;
        assert_eq!(tape.adjoints(y)[0], 6.0);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let _w = tape.leaf(1.0);
        let c = Var::constant(2.0) * Var::constant(4.0) + Var::constant(1.0);
        assert_eq!(c.value, 9.0);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn nary_dot_matches_chain() {
        let tape = Tape::new();
        let xs = tape.leaves(&[1.0, -2.0, 0.5]);
        let ys = [Var::constant(3.0), Var::constant(4.0), xs[0]];
        let d = Var::dot(&xs, &ys);
        // d = 3 x0 + 4 x1 + x2 x0
        assert_eq!(d.value, 3.0 - 8.0 + 0.5);
        let adj = tape.adjoints(d);
        assert_eq!(&adj[..3], &[3.0 + 0.5, 4.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(0.3);
        let t = x.tanh();
        let y = t * t + x.exp() / x;
        let g = tape.adjoints(y)[0];
        let th = 0.3f64.tanh();
        let expect = 2.0 * th * (1.0 - th * th) + 0.3f64.exp() / 0.3 - 0.3f64.exp() / 0.09;
        assert!((g - expect).abs() < 1e-12);
    }
}
