use super::{matmul_into, transpose, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        a: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Act {
        kind: Activation,
        a: Var,
    },
    Reduce {
        kind: Reduction,
        a: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    StopGrad,
    Reshape {
        a: Var,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough {
        pre: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution-ordered tape of tensor operations.
///
/// A graph supports exactly one backward pass; a second call returns
/// [`TensorError::StaleGraph`]. Build a fresh graph for each forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` when the node is
    /// unreachable from the loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let broadcast = if sa == sb {
            false
        } else if sa.len() >= 2 && sa[1..] == sb[..] {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: sa,
                right: sb,
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let inner = bv.len();
        let f = |x: T, y: T| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[if broadcast { i % inner } else { i }]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(sa, data)?,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Tanh => x.tanh(),
                Activation::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => sigmoid(x),
            })
            .collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::Act { kind, a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Empty("reduce"));
        }
        let mut s = T::zero();
        for &x in t.data() {
            s += x;
        }
        if kind == Reduction::Mean {
            s = s / T::of(t.len() as f64);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Reduce { kind, a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a)
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if ta.is_empty() {
            return Err(TensorError::Empty("mse"));
        }
        let mut s = T::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            s += d * d;
        }
        s = s / T::of(ta.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, rg))
    }

    /// Concatenates along the last axis. All parts must agree on every leading
    /// extent, so `[B, a]` and `[B, b]` give `[B, a + b]` and vectors simply
    /// join end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: s0,
                right: vec![],
            });
        }
        let lead = &s0[..s0.len() - 1];
        let outer: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: s0.clone(),
                    right: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward; contributes nothing to `a` on the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Selects rows of a `[K, d]` table; backward scatter-adds into the
    /// selected rows only.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(TensorError::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Straight-through estimator: the value is exactly `code`, the gradient
    /// flows unchanged to `pre` and never to `code`.
    pub fn straight_through(&mut self, pre: Var, code: Var) -> Result<Var> {
        let sp = self.value(pre).shape();
        let sc = self.value(code).shape();
        if sp != sc {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                left: sp.to_vec(),
                right: sc.to_vec(),
            });
        }
        let value = self.value(code).clone();
        let rg = self.rg(pre);
        Ok(self.push(value, Op::StraightThrough { pre }, rg))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate on every
    /// reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::StaleGraph);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let live = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let inner = bv.len();
                let bi = |i: usize| if *broadcast { i % inner } else { i };
                if live(*a) {
                    let ga: Vec<T> = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, &x)| x * bv[bi(i)]).collect(),
                    };
                    accumulate(grads, *a, &ga);
                }
                if live(*b) {
                    let mut gb = vec![T::zero(); inner];
                    for (i, &x) in g.iter().enumerate() {
                        gb[bi(i)] += match kind {
                            BinaryOp::Add => x,
                            BinaryOp::Sub => -x,
                            BinaryOp::Mul => x * av[i],
                        };
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale { a, factor } => {
                if live(*a) {
                    let ga: Vec<T> = g.iter().map(|&x| x * *factor).collect();
                    accumulate(grads, *a, &ga);
                }
            }
            Op::MatMul { a, b } => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if live(*a) {
                    let bt = transpose(tb.data(), k, n);
                    let mut ga = vec![T::zero(); m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if live(*b) {
                    let at = transpose(ta.data(), m, k);
                    let mut gb = vec![T::zero(); k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Act { kind, a } => {
                if live(*a) {
                    let x = nodes[a.0].value.data();
                    let y = node.value.data();
                    let ga: Vec<T> = match kind {
                        Activation::Tanh => g
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                            .collect(),
                        Activation::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                            .collect(),
                    };
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Reduce { kind, a } => {
                if live(*a) {
                    let n = nodes[a.0].value.len();
                    let v = match kind {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / T::of(n as f64),
                    };
                    accumulate(grads, *a, &vec![v; n]);
                }
            }
            Op::Mse { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let c = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                if live(*a) {
                    accumulate(grads, *a, &d);
                }
                if live(*b) {
                    let nd: Vec<T> = d.iter().map(|&x| -x).collect();
                    accumulate(grads, *b, &nd);
                }
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *nodes[p.0].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let outer = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if live(p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => {
                if live(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::GatherRows { table, indices } => {
                if live(*table) {
                    let t = &nodes[table.0].value;
                    let d = t.shape()[1];
                    let mut gt = vec![T::zero(); t.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                    accumulate(grads, *table, &gt);
                }
            }
            Op::StraightThrough { pre } => {
                if live(*pre) {
                    accumulate(grads, *pre, g);
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
