//! Gradients, Jacobian-vector products and first-order linearization of
//! functions of a flat parameter vector.

use crate::dual::Dual;
use crate::error::{contract, dimension, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// A deterministic map from a flat parameter vector to an output vector,
/// evaluable at any [`Scalar`] type.
pub trait ParamFunction {
    fn num_params(&self) -> usize;
    fn eval<S: Scalar>(&self, params: &[S]) -> Vec<S>;
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

pub fn eval<F: ParamFunction>(f: &F, p: &[f64]) -> Result<Vec<f64>> {
    check_len("parameter vector", p.len(), f.num_params())?;
    Ok(f.eval(p))
}

/// Gradient of a scalar-valued function by a single reverse sweep.
pub fn grad<F: ParamFunction>(f: &F, p: &[f64]) -> Result<Vec<f64>> {
    Ok(value_and_grad(f, p)?.1)
}

pub fn value_and_grad<F: ParamFunction>(f: &F, p: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("parameter vector", p.len(), f.num_params())?;
    let tape = Tape::new();
    let leaves = tape.leaves(p);
    let out = f.eval(&leaves);
    if out.len() != 1 {
        return Err(contract(format!("grad needs a scalar function, output has {} entries", out.len())));
    }
    let adj = tape.adjoints(out[0]);
    Ok((out[0].value(), adj[..p.len()].to_vec()))
}

/// Vector-Jacobian product `J(p)ᵀ · cotangent`.
pub fn vjp<F: ParamFunction>(f: &F, p: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
    check_len("parameter vector", p.len(), f.num_params())?;
    let tape = Tape::new();
    let leaves = tape.leaves(p);
    let out = f.eval(&leaves);
    check_len("cotangent", cotangent.len(), out.len())?;
    let seeds: Vec<_> = out.iter().copied().zip(cotangent.iter().copied()).collect();
    let adj = tape.adjoints_seeded(&seeds);
    Ok(adj[..p.len()].to_vec())
}

/// Dense Jacobian, one reverse sweep per output row. Row-major
/// `[outputs × params]`.
pub fn jacobian<F: ParamFunction>(f: &F, p: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_len("parameter vector", p.len(), f.num_params())?;
    let tape = Tape::new();
    let leaves = tape.leaves(p);
    let out = f.eval(&leaves);
    Ok(out
        .iter()
        .map(|&o| tape.adjoints(o)[..p.len()].to_vec())
        .collect())
}

/// Value and tangent `J(p0)·d` from one dual-number forward pass.
pub fn jvp<F: ParamFunction>(f: &F, p0: &[f64], d: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("base point", p0.len(), f.num_params())?;
    check_len("direction", d.len(), p0.len())?;
    let duals: Vec<Dual<f64>> = p0.iter().zip(d).map(|(&x, &t)| Dual::new(x, t)).collect();
    Ok(f.eval(&duals).into_iter().map(|o| (o.re, o.eps)).unzip())
}

/// First-order Taylor expansion of `f` around `p0`, evaluated at `p`:
/// `f(p0) + J(p0)·(p − p0)`.
///
/// `p` may itself be a differentiable scalar, which is how the tangent model
/// is trained: the expansion point is constant and only the displacement
/// carries derivatives.
pub fn linearized_eval<F: ParamFunction, S: Scalar>(f: &F, p0: &[f64], p: &[S]) -> Vec<S> {
    debug_assert_eq!(p0.len(), p.len());
    let duals: Vec<Dual<S>> = p0
        .iter()
        .zip(p)
        .map(|(&base, &x)| Dual::new(S::constant(base), x - S::constant(base)))
        .collect();
    f.eval(&duals).into_iter().map(|o| o.re + o.eps).collect()
}

pub fn linearize<F: ParamFunction>(f: &F, p0: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_len("base point", p0.len(), f.num_params())?;
    check_len("parameter vector", p.len(), p0.len())?;
    Ok(linearized_eval(f, p0, p))
}

/// Wraps a function as its tangent model around a fixed expansion point.
pub struct Linearized<'a, F> {
    pub inner: &'a F,
    pub base: &'a [f64],
}

impl<F: ParamFunction> ParamFunction for Linearized<'_, F> {
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn eval<S: Scalar>(&self, params: &[S]) -> Vec<S> {
        linearized_eval(self.inner, self.base, params)
    }
}
