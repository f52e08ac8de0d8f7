//! Scalar reverse-mode tape used to assemble losses from network jets.
//!
//! The network engine produces per-point values and derivatives; a loss is
//! an arbitrary scalar expression of those. Leaves are registered on a
//! [`Tape`], the expression is built with ordinary operators on [`Var`], and
//! [`Tape::gradient`] returns the adjoint of every node. The adjoints of the
//! jet leaves are then pushed back through the network to the parameters.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{HotaError, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
struct Node<S> {
    value: S,
    // (parent index, local partial); unused slots point at usize::MAX
    parents: [(usize, S); 2],
    op: &'static str,
}

pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, S: Real> {
    tape: &'t Tape<S>,
    idx: usize,
}

const NONE: usize = usize::MAX;

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: S, parents: [(usize, S); 2], op: &'static str) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, op });
        nodes.len() - 1
    }

    /// Registers an input whose adjoint will be read back.
    pub fn var(&self, value: S) -> Var<'_, S> {
        let idx = self.push(value, [(NONE, S::zero()); 2], "leaf");
        Var { tape: self, idx }
    }

    /// A node with no parents; its adjoint is computed but never propagated.
    pub fn constant(&self, value: S) -> Var<'_, S> {
        let idx = self.push(value, [(NONE, S::zero()); 2], "const");
        Var { tape: self, idx }
    }

    fn unary(&self, a: usize, value: S, da: S, op: &'static str) -> usize {
        self.push(value, [(a, da), (NONE, S::zero())], op)
    }

    fn binary(&self, a: usize, da: S, b: usize, db: S, value: S, op: &'static str) -> usize {
        self.push(value, [(a, da), (b, db)], op)
    }

    /// Adjoints of every node with respect to `output`.
    ///
    /// Fails on the first node (in recording order) whose value or local
    /// partial is not finite.
    pub fn gradient(&self, output: Var<'_, S>) -> Result<Adjoints<S>> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate().take(output.idx + 1) {
            let bad = !n.value.is_finite()
                || n
                    .parents
                    .iter()
                    .any(|&(p, d)| p != NONE && !d.is_finite());
            if bad {
                return Err(HotaError::NonFiniteNode { node: i, op: n.op });
            }
        }
        let mut adj = vec![S::zero(); nodes.len()];
        adj[output.idx] = S::one();
        for i in (0..=output.idx).rev() {
            let a = adj[i];
            if a == S::zero() {
                continue;
            }
            for &(p, d) in &nodes[i].parents {
                if p != NONE {
                    adj[p] += a * d;
                }
            }
        }
        Ok(Adjoints { adj })
    }
}

pub struct Adjoints<S> {
    adj: Vec<S>,
}

impl<S: Real> Adjoints<S> {
    pub fn of(&self, v: Var<'_, S>) -> S {
        self.adj.get(v.idx).copied().unwrap_or_else(S::zero)
    }
}

impl<'t, S: Real> Var<'t, S> {
    pub fn value(self) -> S {
        self.tape.nodes.borrow()[self.idx].value
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().sqrt();
        let d = S::lit(0.5) / v;
        self.wrap(self.tape.unary(self.idx, v, d, "sqrt"))
    }

    pub fn square(self) -> Self {
        let x = self.value();
        self.wrap(self.tape.unary(self.idx, x * x, x + x, "square"))
    }

    pub fn scale(self, c: S) -> Self {
        let x = self.value();
        self.wrap(self.tape.unary(self.idx, x * c, c, "scale"))
    }

    fn wrap(self, idx: usize) -> Self {
        Var {
            tape: self.tape,
            idx,
        }
    }
}

impl<'t, S: Real> Add for Var<'t, S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let v = self.value() + rhs.value();
        self.wrap(
            self.tape
                .binary(self.idx, S::one(), rhs.idx, S::one(), v, "add"),
        )
    }
}

impl<'t, S: Real> Sub for Var<'t, S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let v = self.value() - rhs.value();
        self.wrap(
            self.tape
                .binary(self.idx, S::one(), rhs.idx, -S::one(), v, "sub"),
        )
    }
}

impl<'t, S: Real> Mul for Var<'t, S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        self.wrap(self.tape.binary(self.idx, b, rhs.idx, a, a * b, "mul"))
    }
}

impl<'t, S: Real> Div for Var<'t, S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let q = a / b;
        self.wrap(
            self.tape
                .binary(self.idx, S::one() / b, rhs.idx, -q / b, q, "div"),
        )
    }
}

impl<'t, S: Real> Neg for Var<'t, S> {
    type Output = Self;
    fn neg(self) -> Self {
        let v = -self.value();
        self.wrap(self.tape.unary(self.idx, v, -S::one(), "neg"))
    }
}

impl<'t, S: Real> Add<S> for Var<'t, S> {
    type Output = Self;
    fn add(self, rhs: S) -> Self {
        let v = self.value() + rhs;
        self.wrap(self.tape.unary(self.idx, v, S::one(), "add_const"))
    }
}

impl<'t, S: Real> Sub<S> for Var<'t, S> {
    type Output = Self;
    fn sub(self, rhs: S) -> Self {
        let v = self.value() - rhs;
        self.wrap(self.tape.unary(self.idx, v, S::one(), "sub_const"))
    }
}

impl<'t, S: Real> Mul<S> for Var<'t, S> {
    type Output = Self;
    fn mul(self, rhs: S) -> Self {
        self.scale(rhs)
    }
}

/// Arithmetic shared by plain scalars and tape variables, so loss formulas
/// are written once and evaluated either way.
pub trait AdScalar<S: Real>:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<S, Output = Self>
    + Sub<S, Output = Self>
    + Mul<S, Output = Self>
{
    fn val(self) -> S;
    fn sqrt_(self) -> Self;
    /// A constant living in the same arithmetic as `self`.
    fn lift(self, c: S) -> Self;
}

impl<S: Real> AdScalar<S> for S {
    fn val(self) -> S {
        self
    }
    fn sqrt_(self) -> Self {
        self.sqrt()
    }
    fn lift(self, c: S) -> Self {
        c
    }
}

impl<'t, S: Real> AdScalar<S> for Var<'t, S> {
    fn val(self) -> S {
        self.value()
    }
    fn sqrt_(self) -> Self {
        self.sqrt()
    }
    fn lift(self, c: S) -> Self {
        self.tape.constant(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::<f64>::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let f = x * x * y + y.sqrt_unchecked_pos();
        let g = tape.gradient(f).unwrap();
        assert_eq!(g.of(x), 2.0 * 3.0 * -2.0);
        assert_eq!(g.of(y), 9.0 + 1.0);
    }

    impl<'t> Var<'t, f64> {
        // sqrt(y^2) = |y|, used to exercise composite chains
        fn sqrt_unchecked_pos(self) -> Self {
            (self * self).sqrt() * -1.0
        }
    }

    #[test]
    fn division_and_constants() {
        let tape = Tape::<f64>::new();
        let x = tape.var(2.0);
        let c = tape.constant(8.0);
        let f = c / x - 1.0;
        let g = tape.gradient(f).unwrap();
        assert_eq!(f.value(), 3.0);
        assert_eq!(g.of(x), -2.0);
    }

    #[test]
    fn reports_first_non_finite_node() {
        let tape = Tape::<f64>::new();
        let x = tape.var(0.0);
        let y = x.sqrt(); // value 0, partial inf
        let f = y + 1.0;
        match tape.gradient(f) {
            Err(HotaError::NonFiniteNode { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "sqrt");
            }
            other => panic!("expected NonFiniteNode, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn constant_output_has_zero_adjoint_on_leaves() {
        let tape = Tape::<f64>::new();
        let x = tape.var(5.0);
        let c = x.lift(4.0) * 2.0;
        let g = tape.gradient(c).unwrap();
        assert_eq!(g.of(x), 0.0);
    }
}
