//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order and may only reference earlier
//! nodes, so the tape is acyclic by construction and reverse index order is a
//! valid reverse-topological order.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, BatchStats, Mode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Affine,
    MatMul,
    Relu,
    BatchNorm,
    LogSoftmax,
    Add,
    Mul,
    Exp,
    Scale,
    Sum,
    NllGather,
    ConcatRows,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine,
    MatMul,
    Relu,
    BatchNorm { xhat: Tensor, inv_std: Vec<f64>, mode: Mode },
    LogSoftmax,
    Add,
    Mul,
    Exp,
    Scale(f64),
    Sum,
    NllGather(Vec<usize>),
    ConcatRows,
    Reshape,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine => OpKind::Affine,
            Op::MatMul => OpKind::MatMul,
            Op::Relu => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LogSoftmax => OpKind::LogSoftmax,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Exp => OpKind::Exp,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::NllGather(_) => OpKind::NllGather,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::Reshape => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; nodes the root does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine, vec![x, w, b], y))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], y)
    }

    /// Batch norm; in train mode also returns the batch statistics so the
    /// caller can fold them into `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let out = ops::batch_norm(self.value(x), self.value(scale), self.value(shift), state, mode)?;
        let var = self.push(
            Op::BatchNorm {
                xhat: out.xhat,
                inv_std: out.inv_std,
                mode,
            },
            vec![x, scale, shift],
            out.y,
        );
        Ok((var, out.stats))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::log_softmax(self.value(x))?;
        Ok(self.push(Op::LogSoftmax, vec![x], y))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], y))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())
            .expect("same shape");
        self.push(Op::Exp, vec![x], y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(Op::Scale(factor), vec![x], y)
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], y)
    }

    /// Picks the label column of each row: `out[i] = x[i, labels[i]]`.
    pub fn nll_gather(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let y = ops::gather(self.value(x), labels)?;
        Ok(self.push(Op::NllGather(labels.to_vec()), vec![x], y))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    detail: format!("{} columns vs {cols}", t.cols()),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let y = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), y))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], y))
    }

    /// Accumulates gradients of the scalar `root` in reverse tape order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &gy)?;
            for (input, g) in node.inputs.iter().zip(contributions) {
                if let Some(g) = g {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    accumulate(&mut grads[input.0], g);
                }
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, gy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Affine | Op::MatMul => {
                let x = input(0);
                let w = input(1);
                let gx = wants(0).then(|| matmul_bt(gy, w));
                let gw = wants(1).then(|| matmul_at(x, gy));
                let mut out = vec![gx, gw];
                if matches!(node.op, Op::Affine) {
                    let gb = wants(2).then(|| {
                        let mut b = column_sums(gy);
                        b = Tensor::new(input(2).shape().to_vec(), b.into_data())
                            .expect("bias shape");
                        b
                    });
                    out.push(gb);
                }
                out
            }
            Op::Relu => {
                let x = input(0);
                let data = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                mode,
            } => {
                let scale = input(1).data();
                let (n, q) = (gy.rows(), gy.cols());
                let g = gy.data();
                let h = xhat.data();
                let mut dscale = vec![0.0; q];
                let mut dshift = vec![0.0; q];
                for i in 0..n {
                    for j in 0..q {
                        dscale[j] += g[i * q + j] * h[i * q + j];
                        dshift[j] += g[i * q + j];
                    }
                }
                let gx = wants(0).then(|| {
                    let mut dx = vec![0.0; n * q];
                    match mode {
                        Mode::Train => {
                            // Σ dxhat = scale·dshift, Σ dxhat·xhat = scale·dscale
                            let nf = n as f64;
                            for i in 0..n {
                                for j in 0..q {
                                    let k = i * q + j;
                                    let dh = g[k] * scale[j];
                                    dx[k] = inv_std[j] / nf
                                        * (nf * dh
                                            - scale[j] * dshift[j]
                                            - h[k] * scale[j] * dscale[j]);
                                }
                            }
                        }
                        Mode::Eval => {
                            for i in 0..n {
                                for j in 0..q {
                                    let k = i * q + j;
                                    dx[k] = g[k] * scale[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    Tensor::new(vec![n, q], dx).expect("shape")
                });
                vec![
                    gx,
                    Some(Tensor::new(input(1).shape().to_vec(), dscale)?),
                    Some(Tensor::new(input(2).shape().to_vec(), dshift)?),
                ]
            }
            Op::LogSoftmax => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = vec![0.0; y.len()];
                for ((grow, yrow), out) in gy
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let total: f64 = grow.iter().sum();
                    for k in 0..c {
                        out[k] = grow[k] - yrow[k].exp() * total;
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let ga = zip_map(gy, b, |g, v| g * v);
                let gb = zip_map(gy, a, |g, v| g * v);
                vec![Some(ga), Some(gb)]
            }
            Op::Exp => vec![Some(zip_map(gy, &node.value, |g, v| g * v))],
            Op::Scale(c) => {
                let c = *c;
                vec![Some(zip_map(gy, gy, |g, _| g * c))]
            }
            Op::Sum => vec![Some(Tensor::filled(input(0).shape(), gy.data()[0]))],
            Op::NllGather(labels) => {
                let x = input(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (i, &y) in labels.iter().enumerate() {
                    gx.data_mut()[i * c + y] = gy.data()[i];
                }
                vec![Some(gx)]
            }
            Op::ConcatRows => {
                let cols = gy.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let part = input(k);
                    let len = part.rows() * cols;
                    out.push(Some(Tensor::new(
                        part.shape().to_vec(),
                        gy.data()[offset..offset + len].to_vec(),
                    )?));
                    offset += len;
                }
                out
            }
            Op::Reshape => vec![Some(gy.reshaped(input(0).shape())?)],
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `a Bᵀ` for `a: n×q`, `b: p×q`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, q) = (a.rows(), a.cols());
    let p = b.rows();
    let out = ops::gemm(n, q, p, a.data(), (q, 1), b.data(), (1, q));
    Tensor::new(vec![n, p], out).expect("shape")
}

/// `Aᵀ b` for `a: n×p`, `b: n×q`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p) = (a.rows(), a.cols());
    let q = b.cols();
    let out = ops::gemm(p, n, q, a.data(), (1, p), b.data(), (q, 1));
    Tensor::new(vec![p, q], out).expect("shape")
}

fn column_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}
