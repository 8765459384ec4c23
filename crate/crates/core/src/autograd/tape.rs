use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{matmul_raw, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Single element applied everywhere.
    Scalar,
    /// `[n]` or `[1, n]` repeated over the rows of `[m, n]`.
    Row,
    /// `[m, 1]` repeated over the columns of `[m, n]`.
    Col,
}

impl Bcast {
    fn resolve(lhs: &[usize], rhs: &[usize]) -> Option<Bcast> {
        if lhs == rhs {
            return Some(Bcast::Same);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Some(Bcast::Scalar);
        }
        match (lhs, rhs) {
            ([_, n], [k]) | ([_, n], [1, k]) if n == k => Some(Bcast::Row),
            ([m, _], [k, 1]) if m == k => Some(Bcast::Col),
            _ => None,
        }
    }

    #[inline]
    fn index(self, flat: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => flat,
            Bcast::Scalar => 0,
            Bcast::Row => flat % cols,
            Bcast::Col => flat / cols,
        }
    }

    /// Sums a full-shaped gradient back down to the operand's shape.
    fn reduce<S: Scalar>(self, g: &[S], cols: usize, out_len: usize) -> Vec<S> {
        if self == Bcast::Same {
            return g.to_vec();
        }
        let mut acc = vec![0f64; out_len];
        for (flat, &x) in g.iter().enumerate() {
            acc[self.index(flat, cols)] += x.as_f64();
        }
        acc.into_iter().map(S::cast_from).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Binary(Binary, usize, usize, Bcast),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Expm1(usize),
    Log(usize),
    Pow(usize, S),
    Relu(usize),
    Softplus(usize),
    Scale(usize, S),
    AddScalar(usize, S),
    Clamp(usize, S, S),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Broadcast(usize, Bcast),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are only ever appended, so every node's inputs precede it and a
/// single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape<S: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
#[derive(Debug, Clone)]
pub struct Gradients<S = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let n = self.node(a)?;
        let value = n.value.map(f);
        let rg = n.requires_grad;
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (va, vb) = (&na.value, &nb.value);
        let bc = Bcast::resolve(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let cols = *va.shape().last().unwrap();
        let (da, db) = (va.data(), vb.data());
        if kind == Binary::Div && db.iter().any(|x| *x == S::zero()) {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        let out: Vec<S> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[bc.index(i, cols)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        Ok(self.push(value, Op::Binary(kind, a.index, b.index, bc), rg))
    }

    /// Elementwise sum; `b` may be a scalar, a row vector, or a column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() }),
        };
        let out = matmul_raw(na.value.data(), nb.value.data(), m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a.index, b.index), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        if n.value.rank() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: n.value.shape().to_vec(), rhs: vec![] });
        }
        let value = n.value.transpose();
        let rg = n.requires_grad;
        Ok(self.push(value, Op::Transpose(a.index), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.index), S::exp)
    }

    /// `e^x - 1`, accurate for small `x`.
    pub fn expm1(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Expm1(a.index), S::exp_m1)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.node(a)?.value.data().iter().find(|x| **x <= S::zero()) {
            return Err(Error::Domain { op: "log", detail: format!("argument {bad:?} is not positive") });
        }
        self.unary(a, Op::Log(a.index), S::ln)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        let ps = S::cast_from(p);
        let integral = p.fract() == 0.0;
        for &x in self.node(a)?.value.data() {
            if (x < S::zero() && !integral) || (x == S::zero() && p < 0.0) {
                return Err(Error::Domain { op: "pow_scalar", detail: format!("{x:?}^{p} is undefined") });
            }
        }
        self.unary(a, Op::Pow(a.index, ps), move |x| x.powf(ps))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.index), |x| if x > S::zero() { x } else { S::zero() })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a.index), softplus)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::cast_from(c);
        self.unary(a, Op::Scale(a.index, c), move |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::cast_from(c);
        self.unary(a, Op::AddScalar(a.index, c), move |x| x + c)
    }

    /// Limits values to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (S::cast_from(lo), S::cast_from(hi));
        self.unary(a, Op::Clamp(a.index, lo, hi), move |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let value = Tensor::scalar(S::cast_from(n.value.sum_f64()));
        let rg = n.requires_grad;
        Ok(self.push(value, Op::Sum(a.index), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let value = Tensor::scalar(S::cast_from(n.value.sum_f64() / n.value.numel() as f64));
        let rg = n.requires_grad;
        Ok(self.push(value, Op::Mean(a.index), rg))
    }

    /// Sums a matrix along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a)?;
        let (r, c) = match n.value.shape() {
            [r, c] if axis < 2 => (*r, *c),
            s => return Err(Error::ShapeMismatch { op: "sum_axis", lhs: s.to_vec(), rhs: vec![axis] }),
        };
        let d = n.value.data();
        let value = if axis == 0 {
            let mut acc = vec![0f64; c];
            for i in 0..r {
                for j in 0..c {
                    acc[j] += d[i * c + j].as_f64();
                }
            }
            Tensor::from_parts(vec![1, c], acc.into_iter().map(S::cast_from).collect())
        } else {
            let out = (0..r).map(|i| S::cast_from(d[i * c..(i + 1) * c].iter().map(|x| x.as_f64()).sum())).collect();
            Tensor::from_parts(vec![r, 1], out)
        };
        let rg = n.requires_grad;
        Ok(self.push(value, Op::SumAxis(a.index, axis), rg))
    }

    /// Expands a scalar, row vector or column vector to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a)?;
        let bc = Bcast::resolve(shape, n.value.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "broadcast",
            lhs: n.value.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let cols = *shape.last().unwrap();
        let total: usize = shape.iter().product();
        let src = n.value.data();
        let out = (0..total).map(|i| src[bc.index(i, cols)]).collect();
        let rg = n.requires_grad;
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(a.index, bc), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let cols = self.node(*first)?.value.dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let n = self.node(p)?;
            if n.value.rank() != 2 || n.value.dims2().1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.node(*first)?.value.shape().to_vec(),
                    rhs: n.value.shape().to_vec(),
                });
            }
            rows += n.value.dims2().0;
            data.extend_from_slice(n.value.data());
            rg |= n.requires_grad;
        }
        let idx = parts.iter().map(|p| p.index).collect();
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(idx), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.node(a)?;
        let (r, c) = n.value.dims2();
        if n.value.rank() != 2 || start >= end || end > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: n.value.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let value = Tensor::from_parts(vec![end - start, c], n.value.data()[start * c..end * c].to_vec());
        let rg = n.requires_grad;
        Ok(self.push(value, Op::SliceRows(a.index, start), rg))
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate additively over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![S::one()]);
        let mut leaves: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |to: usize, contrib: Vec<S>| {
                if !self.nodes[to].requires_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                    slot => *slot = Some(contrib),
                }
            };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Binary(kind, a, b, bc) => {
                    let va = self.nodes[*a].value.data();
                    let vb = &self.nodes[*b].value;
                    let cols = *node.value.shape().last().unwrap();
                    let db = vb.data();
                    let rhs = |i: usize| db[bc.index(i, cols)];
                    let ga: Vec<S> = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * rhs(i)).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, &gi)| gi / rhs(i)).collect(),
                    };
                    if self.nodes[*b].requires_grad {
                        let full: Vec<S> = match kind {
                            Binary::Add => g.clone(),
                            Binary::Sub => g.iter().map(|&x| -x).collect(),
                            Binary::Mul => g.iter().zip(va).map(|(&gi, &x)| gi * x).collect(),
                            Binary::Div => {
                                g.iter().enumerate().map(|(i, &gi)| -gi * va[i] / (rhs(i) * rhs(i))).collect()
                            }
                        };
                        send(*b, bc.reduce(&full, cols, vb.numel()));
                    }
                    send(*a, ga);
                }
                Op::Matmul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (m, k) = va.dims2();
                    let n = vb.dims2().1;
                    if self.nodes[*a].requires_grad {
                        let bt = vb.transpose();
                        send(*a, matmul_raw(&g, bt.data(), m, n, k));
                    }
                    if self.nodes[*b].requires_grad {
                        let at = va.transpose();
                        send(*b, matmul_raw(at.data(), &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = node.value.dims2();
                    let gt = Tensor::from_parts(vec![r, c], g).transpose();
                    send(*a, gt.into_data());
                }
                Op::Exp(a) => send(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
                Op::Expm1(a) => send(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * (yi + S::one())).collect()),
                Op::Log(a) => {
                    let x = self.nodes[*a].value.data();
                    send(*a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect())
                }
                Op::Pow(a, p) => {
                    let x = self.nodes[*a].value.data();
                    let pm1 = *p - S::one();
                    send(*a, g.iter().zip(x).map(|(&gi, &xi)| gi * *p * xi.powf(pm1)).collect())
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    send(*a, g.iter().zip(x).map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() }).collect())
                }
                Op::Softplus(a) => {
                    let x = self.nodes[*a].value.data();
                    send(*a, g.iter().zip(x).map(|(&gi, &xi)| gi * sigmoid(xi)).collect())
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|&gi| gi * *c).collect()),
                Op::AddScalar(a, _) => send(*a, g),
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[*a].value.data();
                    send(
                        *a,
                        g.iter().zip(x).map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { S::zero() }).collect(),
                    )
                }
                Op::Sum(a) => send(*a, vec![g[0]; self.nodes[*a].value.numel()]),
                Op::Mean(a) => {
                    let len = self.nodes[*a].value.numel();
                    send(*a, vec![g[0] / S::cast_from(len as f64); len])
                }
                Op::SumAxis(a, axis) => {
                    let (r, c) = self.nodes[*a].value.dims2();
                    let full = (0..r * c).map(|i| if *axis == 0 { g[i % c] } else { g[i / c] }).collect();
                    send(*a, full)
                }
                Op::Broadcast(a, bc) => {
                    let cols = *node.value.shape().last().unwrap();
                    send(*a, bc.reduce(&g, cols, self.nodes[*a].value.numel()))
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = &self.nodes[*a].value;
                    let c = src.dims2().1;
                    let mut full = vec![S::zero(); src.numel()];
                    full[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(*a, full)
                }
            }
        }
        Ok(Gradients { tape: self.id, grads: leaves })
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).unwrap(), tape.value(a).unwrap());
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros([3]));
        let y = tape.exp(z).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.value(s).unwrap().item(), Some(14.0));
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros([4]));
        assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros([2]));
        let o = tape.constant(Tensor::ones([2]));
        assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
        assert!(matches!(tape.div(o, z), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let mut other = Tape::<f32>::new();
        let y = other.leaf(Tensor::ones([1]));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn broadcast_row_and_col() {
        let mut tape = Tape::<f32>::new();
        let m = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let row = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let col = tape.leaf(t(&[2, 1], &[10.0, 20.0]));
        let a = tape.add(m, row).unwrap();
        let b = tape.add(a, col).unwrap();
        assert_eq!(tape.value(b).unwrap().data(), &[11., 12., 13., 21., 22., 23.]);
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(row).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(col).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[5.0, 6.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert!(softplus(-1000.0f32) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
