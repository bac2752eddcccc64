use std::sync::Arc;

use super::tensor::{dot_seq, sum_seq, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations recordable on a [`Graph`].
///
/// The set is closed under differentiation: the reverse pass of every
/// primitive is expressed with primitives from this same list, which is what
/// allows gradients of gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// `[scalar, x] -> scalar * x`
    ScalarMul,
    /// Multiplication by a recorded constant.
    Scale(f64),
    Square,
    Exp,
    Sin,
    Cos,
    Relu,
    /// Indicator `x > 0`. Piecewise constant, so no gradient flows through it.
    Step,
    Sum,
    Dot,
    /// `[m, n] x [n] -> [m]`
    MatVec,
    /// `[m] x [m, n] -> [n]`, i.e. the transposed product `W^T a`.
    VecMat,
    /// `[m] x [n] -> [m, n]`
    Outer,
    Concat,
    Slice { start: usize, len: usize },
    /// Embed a vector into zeros of length `total` at `start`.
    Pad { start: usize, total: usize },
    Gather(Arc<[usize]>),
    /// Accumulate `x[i]` into `out[index[i]]` over zeros of length `len`.
    Scatter { index: Arc<[usize]>, len: usize },
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::ScalarMul => "scalar-multiply",
            Primitive::Scale(_) => "scale",
            Primitive::Square => "square",
            Primitive::Exp => "exp",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Relu => "relu",
            Primitive::Step => "step",
            Primitive::Sum => "sum",
            Primitive::Dot => "dot",
            Primitive::MatVec => "matvec",
            Primitive::VecMat => "vecmat",
            Primitive::Outer => "outer",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Pad { .. } => "pad",
            Primitive::Gather(_) => "gather",
            Primitive::Scatter { .. } => "scatter",
            Primitive::Broadcast(_) => "broadcast",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    prim: Option<Primitive>,
    parents: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

impl Node {
    /// `None` for leaves (variables and constants).
    pub fn primitive(&self) -> Option<&Primitive> {
        self.prim.as_ref()
    }

    pub fn parents(&self) -> &[Var] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only tape of eagerly evaluated nodes.
///
/// Node ids are positions in the tape, so every parent id is smaller than
/// its child's id and the tape order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    variables: Vec<Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// All nodes in tape order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn variables(&self) -> &[Var] {
        &self.variables
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Requires-grad leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push_leaf(value, true);
        self.variables.push(v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Result<Var> {
        Ok(self.constant(Tensor::vector(data.to_vec())?))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            prim: None,
            parents: Vec::new(),
            value,
            requires_grad,
        });
        Var(id)
    }

    /// Record `prim` applied to `parents`, evaluating it immediately.
    pub fn apply(&mut self, prim: Primitive, parents: &[Var]) -> Result<Var> {
        for p in parents {
            if p.0 >= self.nodes.len() {
                return Err(Error::shape(prim.name(), format!("unknown node {}", p.0)));
            }
        }
        let value = self.evaluate(&prim, parents)?;
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("{} output component {i}", prim.name()),
            });
        }
        let requires_grad = !matches!(prim, Primitive::Step)
            && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            prim: Some(prim),
            parents: parents.to_vec(),
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn arity_error(&self, prim: &Primitive, parents: &[Var]) -> Error {
        Error::shape(prim.name(), self.describe(parents))
    }

    fn describe(&self, parents: &[Var]) -> String {
        let shapes: Vec<_> = parents.iter().map(|p| self.shape(*p).to_vec()).collect();
        format!("{shapes:?}")
    }

    fn evaluate(&self, prim: &Primitive, parents: &[Var]) -> Result<Tensor> {
        use Primitive as P;
        let val = |i: usize| &self.nodes[parents[i].0].value;
        let unary = matches!(
            prim,
            P::Scale(_)
                | P::Square
                | P::Exp
                | P::Sin
                | P::Cos
                | P::Relu
                | P::Step
                | P::Sum
                | P::Slice { .. }
                | P::Pad { .. }
                | P::Gather(_)
                | P::Scatter { .. }
                | P::Broadcast(_)
                | P::Reshape(_)
        );
        let expected = match prim {
            P::Concat => None,
            _ if unary => Some(1),
            _ => Some(2),
        };
        if expected.is_some_and(|n| n != parents.len()) || parents.is_empty() {
            return Err(self.arity_error(prim, parents));
        }
        let map = |x: &Tensor, f: fn(f64) -> f64| {
            Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
        };
        let zip = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
            let (a, b) = (val(0), val(1));
            if a.shape() != b.shape() {
                return Err(self.arity_error(prim, parents));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Ok(Tensor::from_raw(a.shape().to_vec(), data))
        };
        let out = match prim {
            P::Add => zip(|x, y| x + y)?,
            P::Sub => zip(|x, y| x - y)?,
            P::Mul => zip(|x, y| x * y)?,
            P::ScalarMul => {
                let (s, x) = (val(0), val(1));
                if !s.is_scalar() {
                    return Err(self.arity_error(prim, parents));
                }
                let s = s.data()[0];
                Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| s * v).collect())
            }
            P::Scale(c) => {
                let x = val(0);
                Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| c * v).collect())
            }
            P::Square => map(val(0), |v| v * v),
            P::Exp => map(val(0), f64::exp),
            P::Sin => map(val(0), f64::sin),
            P::Cos => map(val(0), f64::cos),
            P::Relu => map(val(0), |v| if v > 0.0 { v } else { 0.0 }),
            P::Step => map(val(0), |v| if v > 0.0 { 1.0 } else { 0.0 }),
            P::Sum => Tensor::from_raw(Vec::new(), vec![sum_seq(val(0).data())]),
            P::Dot => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(self.arity_error(prim, parents));
                }
                Tensor::from_raw(Vec::new(), vec![dot_seq(a.data(), b.data())])
            }
            P::MatVec => {
                let (w, x) = (val(0), val(1));
                let (m, n) = match w.shape() {
                    [m, n] if x.numel() == *n && x.shape().len() <= 1 => (*m, *n),
                    _ => return Err(self.arity_error(prim, parents)),
                };
                let data = (0..m)
                    .map(|r| dot_seq(&w.data()[r * n..(r + 1) * n], x.data()))
                    .collect();
                Tensor::from_raw(vec![m], data)
            }
            P::VecMat => {
                let (a, w) = (val(0), val(1));
                let (m, n) = match w.shape() {
                    [m, n] if a.numel() == *m && a.shape().len() <= 1 => (*m, *n),
                    _ => return Err(self.arity_error(prim, parents)),
                };
                let mut data = vec![0.0; n];
                for r in 0..m {
                    let ar = a.data()[r];
                    let row = &w.data()[r * n..(r + 1) * n];
                    for (o, wv) in data.iter_mut().zip(row) {
                        *o += ar * wv;
                    }
                }
                Tensor::from_raw(vec![n], data)
            }
            P::Outer => {
                let (a, b) = (val(0), val(1));
                if a.shape().len() > 1 || b.shape().len() > 1 {
                    return Err(self.arity_error(prim, parents));
                }
                let mut data = Vec::with_capacity(a.numel() * b.numel());
                for x in a.data() {
                    data.extend(b.data().iter().map(|y| x * y));
                }
                Tensor::from_raw(vec![a.numel(), b.numel()], data)
            }
            P::Concat => {
                let mut data = Vec::new();
                for p in parents {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                Tensor::from_raw(vec![data.len()], data)
            }
            P::Slice { start, len } => {
                let x = val(0);
                if start + len > x.numel() {
                    return Err(Error::shape(
                        "slice",
                        format!("[{start}, {}) of {:?}", start + len, x.shape()),
                    ));
                }
                Tensor::from_raw(vec![*len], x.data()[*start..start + len].to_vec())
            }
            P::Pad { start, total } => {
                let x = val(0);
                if start + x.numel() > *total {
                    return Err(Error::shape(
                        "pad",
                        format!("{:?} at {start} into {total}", x.shape()),
                    ));
                }
                let mut data = vec![0.0; *total];
                data[*start..start + x.numel()].copy_from_slice(x.data());
                Tensor::from_raw(vec![*total], data)
            }
            P::Gather(index) => {
                let x = val(0);
                if let Some(bad) = index.iter().find(|&&i| i >= x.numel()) {
                    return Err(Error::shape(
                        "gather",
                        format!("index {bad} into {:?}", x.shape()),
                    ));
                }
                let data = index.iter().map(|&i| x.data()[i]).collect();
                Tensor::from_raw(vec![index.len()], data)
            }
            P::Scatter { index, len } => {
                let x = val(0);
                if x.numel() != index.len() || index.iter().any(|&i| i >= *len) {
                    return Err(Error::shape(
                        "scatter",
                        format!("{:?} via {} indices into {len}", x.shape(), index.len()),
                    ));
                }
                let mut data = vec![0.0; *len];
                for (v, &i) in x.data().iter().zip(index.iter()) {
                    data[i] += v;
                }
                Tensor::from_raw(vec![*len], data)
            }
            P::Broadcast(shape) => {
                let x = val(0);
                if !x.is_scalar() {
                    return Err(self.arity_error(prim, parents));
                }
                let numel = shape.iter().product();
                Tensor::from_raw(shape.clone(), vec![x.data()[0]; numel])
            }
            P::Reshape(shape) => {
                let x = val(0);
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(Error::shape(
                        "reshape",
                        format!("{:?} to {shape:?}", x.shape()),
                    ));
                }
                Tensor::from_raw(shape.clone(), x.data().to_vec())
            }
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::ScalarMul, &[s, x])
    }

    pub fn scale(&mut self, c: f64, x: Var) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sin, &[x])
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Dot, &[a, b])
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::MatVec, &[w, x])
    }

    pub fn vecmat(&mut self, a: Var, w: Var) -> Result<Var> {
        self.apply(Primitive::VecMat, &[a, w])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, len }, &[x])
    }

    pub fn gather(&mut self, x: Var, index: impl Into<Arc<[usize]>>) -> Result<Var> {
        self.apply(Primitive::Gather(index.into()), &[x])
    }

    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Broadcast(shape.to_vec()), &[s])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `inputs`.
    ///
    /// The returned gradients are ordinary nodes of this graph, so they can
    /// themselves be differentiated. Inputs that `output` does not depend on
    /// receive a zero constant of the input's shape.
    pub fn gradient(&mut self, output: Var, inputs: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar { shape: out_shape });
        }
        let end = output.0 + 1;
        let mut on_path = vec![false; end];
        for x in inputs {
            if x.0 < end {
                on_path[x.0] = true;
            }
        }
        let first = inputs.iter().map(|x| x.0).min().unwrap_or(end);
        for i in first..end {
            if on_path[i] {
                continue;
            }
            let node = &self.nodes[i];
            on_path[i] = !matches!(node.prim, Some(Primitive::Step) | None)
                && node.parents.iter().any(|p| on_path[p.0]);
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if on_path[output.0] {
            adjoint[output.0] = Some(self.constant(Tensor::full(&out_shape, 1.0)));
        }
        for i in (first..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let Some(prim) = self.nodes[i].prim.clone() else {
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            for (slot, &p) in parents.iter().enumerate() {
                if !on_path[p.0] {
                    continue;
                }
                let contrib = self.backward(&prim, Var(i), &parents, slot, g)?;
                let contrib = self.fit_shape(contrib, p)?;
                adjoint[p.0] = Some(match adjoint[p.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        inputs
            .iter()
            .map(|x| match adjoint.get(x.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(*x).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn fit_shape(&mut self, v: Var, like: Var) -> Result<Var> {
        if self.shape(v) == self.shape(like) {
            Ok(v)
        } else {
            let shape = self.shape(like).to_vec();
            self.reshape(v, &shape)
        }
    }

    /// Vector-Jacobian product of `prim` for the parent in position `slot`,
    /// given the output's adjoint `g`.
    fn backward(
        &mut self,
        prim: &Primitive,
        out: Var,
        parents: &[Var],
        slot: usize,
        g: Var,
    ) -> Result<Var> {
        use Primitive as P;
        let other = |s: usize| parents[1 - s];
        let x = parents[0];
        match prim {
            P::Add => Ok(g),
            P::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.scale(-1.0, g)
                }
            }
            P::Mul => self.mul(g, other(slot)),
            P::ScalarMul => {
                if slot == 0 {
                    self.dot(g, parents[1])
                } else {
                    self.scalar_mul(parents[0], g)
                }
            }
            P::Scale(c) => self.scale(*c, g),
            P::Square => {
                let gx = self.mul(g, x)?;
                self.scale(2.0, gx)
            }
            P::Exp => self.mul(g, out),
            P::Sin => {
                let c = self.cos(x)?;
                self.mul(g, c)
            }
            P::Cos => {
                let s = self.sin(x)?;
                let gs = self.mul(g, s)?;
                self.scale(-1.0, gs)
            }
            P::Relu => {
                let mask = self.apply(P::Step, &[x])?;
                self.mul(g, mask)
            }
            P::Step => unreachable!("step nodes are never on a gradient path"),
            P::Sum => {
                let shape = self.shape(x).to_vec();
                self.broadcast(g, &shape)
            }
            P::Dot => self.scalar_mul(g, other(slot)),
            P::MatVec => {
                if slot == 0 {
                    self.apply(P::Outer, &[g, parents[1]])
                } else {
                    self.apply(P::VecMat, &[g, parents[0]])
                }
            }
            P::VecMat => {
                if slot == 0 {
                    self.apply(P::MatVec, &[parents[1], g])
                } else {
                    self.apply(P::Outer, &[parents[0], g])
                }
            }
            P::Outer => {
                if slot == 0 {
                    self.apply(P::MatVec, &[g, parents[1]])
                } else {
                    self.apply(P::VecMat, &[parents[0], g])
                }
            }
            P::Concat => {
                let start: usize = parents[..slot]
                    .iter()
                    .map(|p| self.value(*p).numel())
                    .sum();
                let len = self.value(parents[slot]).numel();
                self.slice(g, start, len)
            }
            P::Slice { start, .. } => {
                let total = self.value(x).numel();
                self.apply(
                    P::Pad {
                        start: *start,
                        total,
                    },
                    &[g],
                )
            }
            P::Pad { start, .. } => {
                let len = self.value(x).numel();
                self.slice(g, *start, len)
            }
            P::Gather(index) => {
                let len = self.value(x).numel();
                self.apply(
                    P::Scatter {
                        index: index.clone(),
                        len,
                    },
                    &[g],
                )
            }
            P::Scatter { index, .. } => self.gather(g, index.clone()),
            P::Broadcast(_) => self.sum(g),
            P::Reshape(_) => {
                let shape = self.shape(x).to_vec();
                self.reshape(g, &shape)
            }
        }
    }
}
