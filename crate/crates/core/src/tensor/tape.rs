// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wengert-list reverse mode over [`Tensor`] values.
//!
//! Every operation appends one node holding its output value and whatever
//! its VJP needs. A node is *tracked* when it is a parameter leaf or any of
//! its inputs is tracked; untracked nodes (frozen weights, inputs, targets)
//! never receive gradients. Nodes only reference earlier nodes, so the list
//! is topologically ordered by construction.

use super::ops::{self, ColumnPermutation, ElementwiseKind, LayerNormCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Sub(Var, Var, bool),
    Mul(Var, Var, bool),
    Scale(Var, f64),
    Sum(Var),
    Affine {
        z: Var,
        omega: Var,
        bias: Var,
    },
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        cache: LayerNormCache,
    },
    SortColumns(Var, ColumnPermutation),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects any non-finite intermediate value.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn without_finite_check() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf; [`Tape::backward`] reports a gradient for it.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Sort permutation recorded by [`Tape::sort_columns`].
    pub fn permutation(&self, v: Var) -> Option<&ColumnPermutation> {
        match &self.nodes[v.0].op {
            Op::SortColumns(_, p) => Some(p),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if self.check_finite {
            value.ensure_finite(name)?;
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(value, op, tracked))
    }

    fn is_row_broadcast(&self, a: Var, b: Var) -> bool {
        self.value(a).shape() != self.value(b).shape()
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(w))?;
        self.record(out, Op::MatMul(a, w), &[a, w], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let bc = self.is_row_broadcast(a, b);
        self.record(out, Op::Add(a, b, bc), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let bc = self.is_row_broadcast(a, b);
        self.record(out, Op::Sub(a, b, bc), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let bc = self.is_row_broadcast(a, b);
        self.record(out, Op::Mul(a, b, bc), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), c);
        self.record(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = ops::sum(self.value(a));
        self.record(out, Op::Sum(a), &[a], "sum")
    }

    pub fn affine_scale_shift(&mut self, z: Var, omega: Var, bias: Var) -> Result<Var> {
        let out = ops::affine_scale_shift(self.value(z), self.value(omega), self.value(bias))?;
        self.record(
            out,
            Op::Affine { z, omega, bias },
            &[z, omega, bias],
            "affine_scale_shift",
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = ops::tanh(self.value(x));
        self.record(out, Op::Tanh(x), &[x], "tanh")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x));
        self.record(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.record(out, Op::Relu(x), &[x], "relu")
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::Usage(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        match kind {
            ElementwiseKind::Add => self.add(inputs[0], inputs[1]),
            ElementwiseKind::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseKind::AffineScaleShift => {
                self.affine_scale_shift(inputs[0], inputs[1], inputs[2])
            }
            ElementwiseKind::Tanh => self.tanh(inputs[0]),
            ElementwiseKind::Gelu => self.gelu(inputs[0]),
            ElementwiseKind::Relu => self.relu(inputs[0]),
        }
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            ops::layernorm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.record(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                cache,
            },
            &[x, gain, bias],
            "layernorm",
        )
    }

    /// Column-wise ascending sort. The permutation is frozen: gradients are
    /// scattered back through it and it receives none itself.
    pub fn sort_columns(&mut self, x: Var) -> Result<Var> {
        let (out, perm) = ops::sort_columns(self.value(x));
        self.record(out, Op::SortColumns(x, perm), &[x], "sort_columns")
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |x: &Var| &vals[x.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul(a, b) => ops::matmul(v(a), v(b))?,
                Op::Add(a, b, _) => ops::add(v(a), v(b))?,
                Op::Sub(a, b, _) => ops::sub(v(a), v(b))?,
                Op::Mul(a, b, _) => ops::mul(v(a), v(b))?,
                Op::Scale(a, c) => ops::scale(v(a), *c),
                Op::Sum(a) => ops::sum(v(a)),
                Op::Affine { z, omega, bias } => ops::affine_scale_shift(v(z), v(omega), v(bias))?,
                Op::Tanh(x) => ops::tanh(v(x)),
                Op::Gelu(x) => ops::gelu(v(x)),
                Op::Relu(x) => ops::relu(v(x)),
                Op::LayerNorm {
                    x, gain, bias, eps, ..
                } => ops::layernorm(v(x), v(gain), v(bias), *eps)?,
                Op::SortColumns(x, _) => ops::sort_columns(v(x)).0,
            };
            vals.push(out);
        }
        Ok(vals)
    }

    /// Reverse sweep from a 1x1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward from a {}x{} node; loss must be scalar",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            for (var, contrib) in contributions {
                if !self.nodes[var.0].tracked {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => *acc = ops::add(acc, &contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                let (r, c) = node.value.shape();
                grads[idx] = Some(Tensor::zeros(r, c));
            }
            if !node.tracked {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| self.value(*v);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.is_tracked(*a) {
                    out.push((*a, ops::matmul(g, &ops::transpose(val(b)))?));
                }
                if self.is_tracked(*b) {
                    out.push((*b, ops::matmul(&ops::transpose(val(a)), g)?));
                }
                out
            }
            Op::Add(a, b, bc) => vec![(*a, g.clone()), (*b, reduce_broadcast(g.clone(), *bc))],
            Op::Sub(a, b, bc) => vec![
                (*a, g.clone()),
                (*b, reduce_broadcast(ops::scale(g, -1.0), *bc)),
            ],
            Op::Mul(a, b, bc) => vec![
                (*a, ops::mul(g, val(b))?),
                (*b, reduce_broadcast(ops::mul(g, val(a))?, *bc)),
            ],
            Op::Scale(a, c) => vec![(*a, ops::scale(g, *c))],
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                vec![(*a, Tensor::filled(r, c, g.data()[0]))]
            }
            Op::Affine { z, omega, bias } => vec![
                (*z, ops::mul(g, val(omega))?),
                (*omega, ops::sum_rows(&ops::mul(g, val(z))?)),
                (*bias, ops::sum_rows(g)),
            ],
            Op::Tanh(x) => {
                let y = &node.value;
                let d = ops::map(y, |t| 1.0 - t * t);
                vec![(*x, ops::mul(g, &d)?)]
            }
            Op::Gelu(x) => vec![(*x, ops::mul(g, &ops::map(val(x), ops::gelu_derivative))?)],
            Op::Relu(x) => {
                let mask = ops::map(val(x), |v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(*x, ops::mul(g, &mask)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
                ..
            } => {
                let xhat = &cache.normalized;
                let dxhat = ops::mul(g, val(gain))?;
                let d = xhat.cols() as f64;
                let mut dx = Vec::with_capacity(g.data().len());
                for i in 0..xhat.rows() {
                    let dh = dxhat.row(i);
                    let h = xhat.row(i);
                    let mean_dh = dh.iter().sum::<f64>() / d;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d;
                    let r = cache.rstd[i];
                    dx.extend(
                        dh.iter()
                            .zip(h)
                            .map(|(a, b)| r * (a - mean_dh - b * mean_dh_h)),
                    );
                }
                vec![
                    (*x, Tensor::from_parts(xhat.rows(), xhat.cols(), dx)),
                    (*gain, ops::sum_rows(&ops::mul(g, xhat)?)),
                    (*bias, ops::sum_rows(g)),
                ]
            }
            Op::SortColumns(x, perm) => vec![(*x, perm.scatter(g))],
        };
        Ok(out)
    }
}

fn reduce_broadcast(g: Tensor, broadcast: bool) -> Tensor {
    if broadcast {
        ops::sum_rows(&g)
    } else {
        g
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. `None` for untracked nodes
    /// and for tracked intermediates the loss does not depend on; tracked
    /// leaves the loss ignores get zeros.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
