//! Scalar reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to tape-connected [`Var`]s
//! together with its local partial derivatives. [`backward`] then makes one
//! reverse sweep and accumulates adjoints by summation over fan-out.
//!
//! The numeric code elsewhere in the crate is written against the [`Real`]
//! trait, so the same rollout runs on plain `f64` for evaluation and on `Var`
//! when a gradient is needed.
//!
//! Subgradient convention: `clip`, `min` and `max` take the interior branch at
//! an exact tie or boundary, so the derivative of `clip(x, lo, hi)` at `x == hi`
//! is 1.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

/// Primitive operation kinds that may appear on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    Clip,
    Min,
    Max,
    Square,
    Sqrt,
}

impl Op {
    /// Number of operands the primitive takes. `Clip` takes the value plus two
    /// bounds; the bounds are treated as constants.
    pub fn arity(self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Neg | Op::Sin | Op::Cos | Op::Tanh | Op::Exp | Op::Square | Op::Sqrt => 1,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => 2,
            Op::Clip => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Record {
    op: Op,
    inputs: [u32; 2],
    partials: [f64; 2],
}

/// Ordered list of primitive records. Inputs always precede the record that
/// consumes them, so a single reverse pass is a valid topological sweep.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    fault: Cell<Option<(u32, Op)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).field("fault", &self.fault.get()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { records: RefCell::new(Vec::with_capacity(n)), fault: Cell::new(None) }
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every record so the allocation can be reused. Requires exclusive
    /// access, which guarantees no `Var` still points into the tape.
    pub fn clear(&mut self) {
        self.records.get_mut().clear();
        self.fault.set(None);
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Record { op: Op::Leaf, inputs: [NONE; 2], partials: [0.0; 2] });
        Var { tape: Some(self), idx, value }
    }

    /// One leaf per value, in order.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// The first domain fault recorded by an operator, if any.
    pub fn fault(&self) -> Option<(u32, Op)> {
        self.fault.get()
    }

    /// Applies `op` to `inputs` and records it. Unlike the operator overloads,
    /// which defer domain faults to [`backward`], this reports them at once.
    pub fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if inputs.len() != op.arity() || op == Op::Leaf {
            return Err(Error::Usage(format!(
                "{op:?} takes {} inputs, got {}",
                op.arity(),
                inputs.len()
            )));
        }
        if inputs.iter().any(|v| v.tape.is_some_and(|t| !std::ptr::eq(t, self))) {
            return Err(Error::Usage("input belongs to a different tape".into()));
        }
        let out = match op {
            Op::Add => inputs[0] + inputs[1],
            Op::Sub => inputs[0] - inputs[1],
            Op::Mul => inputs[0] * inputs[1],
            Op::Div => inputs[0] / inputs[1],
            Op::Neg => -inputs[0],
            Op::Sin => inputs[0].sin(),
            Op::Cos => inputs[0].cos(),
            Op::Tanh => inputs[0].tanh(),
            Op::Exp => inputs[0].exp(),
            Op::Square => inputs[0].square(),
            Op::Sqrt => inputs[0].sqrt(),
            Op::Min => Real::min(inputs[0], inputs[1]),
            Op::Max => Real::max(inputs[0], inputs[1]),
            Op::Clip => inputs[0].clip(inputs[1].value, inputs[2].value),
            Op::Leaf => unreachable!(),
        };
        let domain_error = (op == Op::Div && inputs[1].value == 0.0)
            || (op == Op::Sqrt && inputs[0].value < 0.0);
        if domain_error {
            return Err(Error::Domain { node: out.idx, op });
        }
        Ok(out)
    }

    fn push(&self, r: Record) -> u32 {
        let mut records = self.records.borrow_mut();
        let idx = records.len();
        assert!(idx < NONE as usize, "tape exceeds u32 node capacity");
        records.push(r);
        idx as u32
    }

    fn note_fault(&self, node: u32, op: Op) {
        if self.fault.get().is_none() {
            self.fault.set(Some((node, op)));
        }
    }

    /// Adjoint of every node with respect to `loss`.
    fn adjoints(&self, loss: u32) -> Vec<f64> {
        let records = self.records.borrow();
        let n = loss as usize + 1;
        let mut adj = vec![0.0; n];
        adj[loss as usize] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let r = &records[i];
            for k in 0..2 {
                let j = r.inputs[k];
                if j != NONE {
                    adj[j as usize] += a * r.partials[k];
                }
            }
        }
        adj
    }
}

/// A value that may be connected to a tape. Constants carry no tape and
/// contribute nothing to gradients.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Some(n) => write!(f, "Var({} @{n})", self.value),
            None => write!(f, "Var({} const)", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var { tape: None, idx: NONE, value }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Tape node index, or `None` for a constant.
    pub fn node(&self) -> Option<u32> {
        self.tape.map(|_| self.idx)
    }

    fn unary(self, op: Op, value: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(t) => {
                let idx = t.push(Record { op, inputs: [self.idx, NONE], partials: [d, 0.0] });
                Var { tape: Some(t), idx, value }
            }
        }
    }

    fn binary(self, other: Self, op: Op, value: f64, da: f64, db: f64) -> Self {
        let tape = match (self.tape, other.tape) {
            (None, None) => return Var::constant(value),
            (Some(a), Some(b)) => {
                assert!(std::ptr::eq(a, b), "operands recorded on different tapes");
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
        };
        let ia = if self.tape.is_some() { self.idx } else { NONE };
        let ib = if other.tape.is_some() { other.idx } else { NONE };
        let idx = tape.push(Record { op, inputs: [ia, ib], partials: [da, db] });
        Var { tape: Some(tape), idx, value }
    }
}

/// Partial derivatives of a loss with respect to a parameter list, in the
/// order the parameters were passed to [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// One reverse sweep from `loss`, returning the gradient for each of `params`.
pub fn backward<'t>(tape: &'t Tape, loss: Var<'t>, params: &[Var<'t>]) -> Result<GradientVector> {
    if let Some((node, op)) = tape.fault() {
        return Err(Error::Domain { node, op });
    }
    let loss_idx = match loss.tape {
        Some(t) if std::ptr::eq(t, tape) => loss.idx,
        _ => return Err(Error::Usage("loss is not a node on this tape".into())),
    };
    let records = tape.len();
    for (k, p) in params.iter().enumerate() {
        match p.tape {
            Some(t) if std::ptr::eq(t, tape) && tape.records.borrow()[p.idx as usize].op == Op::Leaf => {}
            _ => return Err(Error::Usage(format!("parameter {k} is not a leaf on this tape"))),
        }
        debug_assert!((p.idx as usize) < records);
    }
    let adj = tape.adjoints(loss_idx);
    Ok(GradientVector(
        params.iter().map(|p| adj.get(p.idx as usize).copied().unwrap_or(0.0)).collect(),
    ))
}

/// Gradient with respect to the first `n` nodes of the tape, which must be the
/// leaves created before anything else. Avoids passing a large parameter list.
pub fn backward_prefix<'t>(tape: &'t Tape, loss: Var<'t>, n: usize) -> Result<GradientVector> {
    if let Some((node, op)) = tape.fault() {
        return Err(Error::Domain { node, op });
    }
    let loss_idx = match loss.tape {
        Some(t) if std::ptr::eq(t, tape) => loss.idx,
        _ => return Err(Error::Usage("loss is not a node on this tape".into())),
    };
    {
        let records = tape.records.borrow();
        if n > records.len() || records[..n].iter().any(|r| r.op != Op::Leaf) {
            return Err(Error::Usage(format!("the first {n} tape nodes are not all leaves")));
        }
    }
    let mut adj = tape.adjoints(loss_idx);
    adj.resize(n.max(adj.len()), 0.0);
    adj.truncate(n);
    Ok(GradientVector(adj))
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    fn clip(self, lo: f64, hi: f64) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    /// True when the value carries no derivative information.
    fn is_constant(self) -> bool;

    fn relu(self) -> Self {
        self.max(Self::cst(0.0))
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn is_constant(self) -> bool {
        true
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn clip(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn is_constant(self) -> bool {
        self.tape.is_none()
    }
    fn value(self) -> f64 {
        self.value
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin, self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, self.value.cos(), -self.value.sin())
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(Op::Tanh, t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }
    fn sqrt(self) -> Self {
        let x = self.value;
        if x < 0.0 {
            let out = self.unary(Op::Sqrt, f64::NAN, f64::NAN);
            if let Some(t) = out.tape {
                t.note_fault(out.idx, Op::Sqrt);
            }
            return out;
        }
        let s = x.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { f64::INFINITY };
        self.unary(Op::Sqrt, s, d)
    }
    fn square(self) -> Self {
        self.unary(Op::Square, self.value * self.value, 2.0 * self.value)
    }
    fn clip(self, lo: f64, hi: f64) -> Self {
        let x = self.value;
        if x < lo {
            self.unary(Op::Clip, lo, 0.0)
        } else if x > hi {
            self.unary(Op::Clip, hi, 0.0)
        } else {
            self.unary(Op::Clip, x, 1.0)
        }
    }
    fn min(self, other: Self) -> Self {
        if self.value <= other.value {
            self.binary(other, Op::Min, self.value, 1.0, 0.0)
        } else {
            self.binary(other, Op::Min, other.value, 0.0, 1.0)
        }
    }
    fn max(self, other: Self) -> Self {
        if self.value >= other.value {
            self.binary(other, Op::Max, self.value, 1.0, 0.0)
        } else {
            self.binary(other, Op::Max, other.value, 0.0, 1.0)
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let b = rhs.value;
        let out = self.binary(rhs, Op::Div, self.value / b, 1.0 / b, -self.value / (b * b));
        if b == 0.0 {
            if let Some(t) = out.tape {
                t.note_fault(out.idx, Op::Div);
            }
        }
        out
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self + Var::constant(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self - Var::constant(rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self * Var::constant(rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self / Var::constant(rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) + rhs
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) - rhs
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) * rhs
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) / rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partials(t: &Tape, v: Var) -> [f64; 2] {
        t.records.borrow()[v.idx as usize].partials
    }

    #[test]
    fn mul_records_product_rule_partials() {
        let t = Tape::new();
        let (a, b) = (t.var(2.0), t.var(3.0));
        let c = t.record(Op::Mul, &[a, b]).unwrap();
        assert_eq!(c.value(), 6.0);
        assert_eq!(partials(&t, c), [3.0, 2.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let t = Tape::new();
        let y = t.record(Op::Tanh, &[t.var(0.0)]).unwrap();
        assert_eq!(y.value(), 0.0);
        assert_eq!(partials(&t, y)[0], 1.0);
    }

    #[test]
    fn clip_saturated_and_boundary() {
        let t = Tape::new();
        let x = t.var(1.5);
        let y = t.record(Op::Clip, &[x, Var::constant(-1.0), Var::constant(1.0)]).unwrap();
        assert_eq!(y.value(), 1.0);
        assert_eq!(partials(&t, y)[0], 0.0);
        let edge = t.var(1.0).clip(-1.0, 1.0);
        assert_eq!(partials(&t, edge)[0], 1.0);
    }

    #[test]
    fn min_max_ties_take_first_branch() {
        let t = Tape::new();
        let (a, b) = (t.var(1.0), t.var(1.0));
        let g = backward(&t, Real::max(a, b), &[a, b]).unwrap();
        assert_eq!(g.0, vec![1.0, 0.0]);
        let r = t.var(0.0);
        assert_eq!(backward(&t, r.relu(), &[r]).unwrap().0, vec![1.0]);
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let p = t.var(3.0);
        let loss = p * p;
        assert_eq!(backward(&t, loss, &[p]).unwrap().0, vec![6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let t = Tape::new();
        let x = t.var(0.7);
        let y = x.sin() * x + x.exp() - 2.0 * x;
        let g = backward(&t, y, &[x]).unwrap().0[0];
        let expect = 0.7f64.cos() * 0.7 + 0.7f64.sin() + 0.7f64.exp() - 2.0;
        assert!((g - expect).abs() < 1e-14);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let t = Tape::new();
        let (a, b) = (t.var(1.0), t.var(0.0));
        match t.record(Op::Div, &[a, b]) {
            Err(Error::Domain { op: Op::Div, node }) => assert_eq!(node, 2),
            other => panic!("unexpected {other:?}"),
        }
        let t2 = Tape::new();
        let x = t2.var(1.0);
        let y = x / t2.var(0.0) + x;
        assert!(matches!(backward(&t2, y, &[x]), Err(Error::Domain { node: 2, op: Op::Div })));
    }

    #[test]
    fn sqrt_of_negative_is_reported() {
        let t = Tape::new();
        assert!(matches!(t.record(Op::Sqrt, &[t.var(-1.0)]), Err(Error::Domain { op: Op::Sqrt, .. })));
    }

    #[test]
    fn loss_not_on_tape() {
        let t = Tape::new();
        let other = Tape::new();
        let p = t.var(1.0);
        let q = other.var(2.0);
        assert!(matches!(backward(&t, q * q, &[p]), Err(Error::Usage(_))));
        assert!(matches!(backward(&t, Var::constant(1.0), &[p]), Err(Error::Usage(_))));
        let y = p * 2.0;
        assert!(matches!(backward(&t, y, &[y]), Err(Error::Usage(_))));
    }

    #[test]
    fn record_rejects_wrong_arity() {
        let t = Tape::new();
        assert!(t.record(Op::Add, &[t.var(1.0)]).is_err());
    }

    #[test]
    fn constants_stay_off_tape() {
        let t = Tape::new();
        let c = Var::constant(2.0) * Var::constant(3.0);
        assert_eq!(c.node(), None);
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn prefix_gradient_matches_explicit() {
        let t = Tape::new();
        let ps = t.vars(&[0.3, -1.2, 2.0]);
        let loss = (ps[0] * ps[1]).tanh() + ps[2].square() * ps[0];
        let a = backward(&t, loss, &ps).unwrap();
        let b = backward_prefix(&t, loss, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linearity_of_gradient() {
        fn f<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
            (x * y).sin() + x.square()
        }
        fn g<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
            (x - y).tanh() * y
        }
        let t = Tape::new();
        let (x, y) = (t.var(0.4), t.var(-0.9));
        let gf = backward(&t, f(x, y), &[x, y]).unwrap();
        let gg = backward(&t, g(x, y), &[x, y]).unwrap();
        let combo = backward(&t, f(x, y) * 2.5 - g(x, y) * 0.5, &[x, y]).unwrap();
        for k in 0..2 {
            let expect = 2.5 * gf.0[k] - 0.5 * gg.0[k];
            assert!((combo.0[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn inputs_precede_records() {
        let t = Tape::new();
        let x = t.var(1.0);
        let _ = (x * 2.0).exp().sin() + x;
        for (i, r) in t.records.borrow().iter().enumerate() {
            for &j in &r.inputs {
                assert!(j == NONE || (j as usize) < i);
            }
        }
    }
}
