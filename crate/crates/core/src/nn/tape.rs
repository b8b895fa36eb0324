//! Reverse-mode differentiation over sequence matrices.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! output value. [`Tape::backward`] then walks the records in reverse,
//! pushing output gradients back to the inputs and accumulating parameter
//! gradients into the [`ParamSet`] the leaves were read from.
//!
//! Only the op set the encoder needs is supported: fused linear maps, a
//! residual add, the SiLU nonlinearity, a width-3 depth-wise temporal
//! convolution and row-wise (log-)softmax.

use super::matrix::{log_softmax_rows, softmax_rows};
use super::{Matrix, NnError, ParamId, ParamSet};

/// The nonlinearity used throughout the encoder: `x * sigmoid(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Silu(NodeId),
    TemporalConv3 {
        x: NodeId,
        kernel: NodeId,
    },
    LogSoftmax(NodeId),
    Softmax(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    scope: usize,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scopes: vec!["<root>".to_string()],
            current_scope: 0,
        }
    }

    /// Label subsequent nodes; the label shows up in numeric errors.
    pub fn set_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
        self.current_scope = self.scopes.len() - 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<NodeId, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(format!(
                "activation in {}",
                self.scopes[self.current_scope]
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            scope: self.current_scope,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(&self, what: &str) -> NnError {
        NnError::Shape(format!("{what} in {}", self.scopes[self.current_scope]))
    }

    pub fn input(&mut self, value: Matrix) -> Result<NodeId, NnError> {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId, NnError> {
        self.push(Op::Param(id), params.get(id).to_matrix())
    }

    /// `x * w + b` with `x: T x in`, `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NnError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(self.shape_err(&format!(
                "linear input width {} vs weight rows {}",
                xv.cols(),
                wv.rows()
            )));
        }
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, out.cols()) {
                return Err(self.shape_err("linear bias shape"));
            }
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                    *o += bb;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add operands differ in shape"));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let out = self.value(x).map(silu);
        self.push(Op::Silu(x), out)
    }

    /// Depth-wise convolution over time with a `3 x D` kernel and zero
    /// padding: `y[t] = k0 * x[t-1] + k1 * x[t] + k2 * x[t+1]`.
    pub fn temporal_conv3(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId, NnError> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.shape() != (3, xv.cols()) {
            return Err(self.shape_err("temporal kernel must be 3 x D"));
        }
        let (t_len, d) = xv.shape();
        let mut out = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            let o = out.row_mut(t);
            let cur = xv.row(t);
            let k1 = kv.row(1);
            for j in 0..d {
                o[j] = k1[j] * cur[j];
            }
            if t > 0 {
                let prev = xv.row(t - 1);
                let k0 = kv.row(0);
                for j in 0..d {
                    o[j] += k0[j] * prev[j];
                }
            }
            if t + 1 < t_len {
                let next = xv.row(t + 1);
                let k2 = kv.row(2);
                for j in 0..d {
                    o[j] += k2[j] * next[j];
                }
            }
        }
        self.push(Op::TemporalConv3 { x, kernel }, out)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let out = log_softmax_rows(self.value(x));
        self.push(Op::LogSoftmax(x), out)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let out = softmax_rows(self.value(x));
        self.push(Op::Softmax(x), out)
    }

    /// Propagate `seeds` (gradients of the objective with respect to some
    /// recorded nodes) back through the tape.
    ///
    /// Parameter gradients are added into `params`; the gradient of every
    /// node is returned for inspection.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        seeds: &[(NodeId, Matrix)],
    ) -> Result<Vec<Option<Matrix>>, NnError> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| NnError::Internal(format!("seed refers to missing node {}", id.0)))?;
            if node.value.shape() != g.shape() {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} does not match node {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads, *id, g.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    if pid.0 >= params.len() {
                        return Err(NnError::Internal(format!("missing parameter {}", pid.0)));
                    }
                    params.get_mut(pid).accumulate_grad(g.as_slice());
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    accumulate(&mut grads, x, g.matmul_transpose_rhs(wv));
                    accumulate(&mut grads, w, xv.transpose_matmul(&g));
                    if let Some(b) = b {
                        accumulate(&mut grads, b, g.column_sums());
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Silu(x) => {
                    let xv = self.value(x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *gi *= silu_grad(xi);
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::TemporalConv3 { x, kernel } => {
                    let (gx, gk) = conv3_backward(self.value(x), self.value(kernel), &g);
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, kernel, gk);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let total: f64 = gx.row(r).iter().sum();
                        let yr = y.row(r);
                        for (gi, &li) in gx.row_mut(r).iter_mut().zip(yr) {
                            *gi -= li.exp() * total;
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let pr = p.row(r);
                        let dot: f64 = gx.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (gi, &pi) in gx.row_mut(r).iter_mut().zip(pr) {
                            *gi = pi * (*gi - dot);
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
            }
            if let Some(gm) = &grads[idx] {
                if !gm.is_finite() {
                    return Err(NnError::NonFinite(format!(
                        "gradient in {}",
                        self.scopes[node.scope]
                    )));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv3_backward(x: &Matrix, k: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let (t_len, d) = x.shape();
    let mut gx = Matrix::zeros(t_len, d);
    let mut gk = Matrix::zeros(3, d);
    for t in 0..t_len {
        let gt = g.row(t);
        for j in 0..d {
            gk[(1, j)] += gt[j] * x[(t, j)];
            gx[(t, j)] += k[(1, j)] * gt[j];
        }
        if t > 0 {
            for j in 0..d {
                gk[(0, j)] += gt[j] * x[(t - 1, j)];
                gx[(t - 1, j)] += k[(0, j)] * gt[j];
            }
        }
        if t + 1 < t_len {
            for j in 0..d {
                gk[(2, j)] += gt[j] * x[(t + 1, j)];
                gx[(t + 1, j)] += k[(2, j)] * gt[j];
            }
        }
    }
    (gx, gk)
}
