// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recording tape for forward passes.
//!
//! Every primitive op executed through [`Tape::record`] appends one
//! [`GraphNode`] carrying its linearity class, its parents and the payload
//! the decomposition pass needs (weights, frozen LayerNorm statistics,
//! concatenation layout, the attention-weight snapshot). Nodes are stored in
//! execution order, so parents always precede their children.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Identifier of a node on a [`Tape`] (its index in tape order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Linearity classification of a recorded op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    /// Linear (affine) map of a single input that keeps the contribution count.
    LinearUnary,
    /// Linear op that removes a dimension; contributions are unbound along it.
    LinearReduction,
    /// Linear combination of two inputs.
    LinearBinary,
    /// Traversal stops here.
    Nonlinear,
    /// Input or parameter.
    Leaf,
    /// Gradient-stop boundary; traversal treats it as a leaf.
    Detach,
}

impl OpKind {
    /// Whether the decomposition may traverse through this node.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            Self::LinearUnary | Self::LinearReduction | Self::LinearBinary
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearUnary => "linear-unary",
            Self::LinearReduction => "linear-reduction",
            Self::LinearBinary => "linear-binary",
            Self::Nonlinear => "nonlinear",
            Self::Leaf => "leaf",
            Self::Detach => "detach",
        })
    }
}

/// Architectural region an op was recorded in. Contributions that stop at a
/// node inherit its scope as their component identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// Patch embedding, class token and position embedding.
    Embed,
    /// Multi-head attention of forward layer `layer`.
    Attention { layer: usize },
    /// MLP of forward layer `layer`.
    Mlp { layer: usize },
    /// Block that is not decomposed (e.g. a convolutional block).
    Opaque { layer: usize, kind: String },
    /// Pooling, merging and final normalization.
    Glue,
}

/// A nonlinear block evaluated as one opaque node.
pub trait OpaqueKernel: fmt::Debug + Send + Sync {
    /// Short name shown in dumps.
    fn name(&self) -> &str;
    /// Evaluate on `input`; must be deterministic.
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
}

/// Operation descriptor with its payload.
#[derive(Debug, Clone)]
pub enum Op {
    /// Model input.
    Input,
    /// Learned constant (class token and the like).
    Param,
    /// Numeric identity that stops traversal.
    Detach,
    /// `x + y`.
    Add,
    /// `a·x + b·y`.
    AddScaled { left: f32, right: f32 },
    /// `x W + b` applied per row; `W` is `in × out`.
    Linear {
        weight: Arc<Tensor>,
        bias: Option<Arc<Tensor>>,
    },
    /// `x + b` with `b` of the same shape as `x`.
    AddBias { bias: Arc<Tensor> },
    /// `s·x`.
    Scale(f32),
    /// Row-wise LayerNorm; statistics are frozen from the recorded pass.
    LayerNorm {
        gamma: Arc<Tensor>,
        beta: Arc<Tensor>,
        eps: f32,
    },
    /// Selects one row of a matrix, producing a vector.
    SelectRow(usize),
    /// Output row `i` is input row `rows[i]`.
    Gather { rows: Arc<Vec<usize>> },
    /// Mean over rows.
    MeanRows,
    /// Concatenation along `axis`. With `heads`, parent `h` is attention head `h`.
    Concat { axis: usize, heads: bool },
    /// Matrix product `A · B`.
    MatMul,
    /// Attention logits `scale · Q Kᵀ`.
    Scores { scale: f32 },
    /// Row softmax; masked entries get zero weight.
    Softmax { mask: Option<Arc<Vec<bool>>> },
    /// Elementwise GELU.
    Gelu,
    /// Opaque nonlinear block.
    Opaque(Arc<dyn OpaqueKernel>),
}

impl Op {
    /// Short op name.
    pub fn name(&self) -> &str {
        match self {
            Self::Input => "input",
            Self::Param => "param",
            Self::Detach => "detach",
            Self::Add => "add",
            Self::AddScaled { .. } => "add_scaled",
            Self::Linear { .. } => "linear",
            Self::AddBias { .. } => "add_bias",
            Self::Scale(_) => "scale",
            Self::LayerNorm { .. } => "layer_norm",
            Self::SelectRow(_) => "select_row",
            Self::Gather { .. } => "gather",
            Self::MeanRows => "mean_rows",
            Self::Concat { .. } => "concat",
            Self::MatMul => "matmul",
            Self::Scores { .. } => "scores",
            Self::Softmax { .. } => "softmax",
            Self::Gelu => "gelu",
            Self::Opaque(k) => k.name(),
        }
    }
}

/// Statistics observed by a LayerNorm during the recorded pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One recorded operation.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub out_shape: Vec<usize>,
    pub scope: Scope,
    /// Axis removed or unbound by a linear-reduction node.
    pub reduction_axis: Option<usize>,
    /// Frozen statistics for LayerNorm nodes.
    pub ln_stats: Option<LayerNormStats>,
    value: Vec<f32>,
}

impl GraphNode {
    /// The tensor this node produced.
    pub fn value(&self) -> &[f32] {
        &self.value
    }
}

/// LayerNorm with frozen per-position statistics, linear in its input.
///
/// Applied to one of `n` contributions `c` it yields
/// `γ ⊙ (c − μ/n) / σ + β/n`; summing over all `n` contributions of the
/// original input reproduces the recorded LayerNorm output.
#[derive(Debug, Clone)]
pub struct FrozenLayerNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub gamma: Arc<Tensor>,
    pub beta: Arc<Tensor>,
    pub cols: usize,
}

impl FrozenLayerNorm {
    /// Maps one of `n` contributions.
    pub fn apply(&self, c: &[f32], n: usize) -> Vec<f32> {
        let c: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        self.apply_f64(&c, n).into_iter().map(|v| v as f32).collect()
    }

    pub fn apply_f64(&self, c: &[f64], n: usize) -> Vec<f64> {
        let nf = n as f64;
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let mut out = vec![0.0; c.len()];
        for (r, (mu, sd)) in self.mean.iter().zip(&self.std).enumerate() {
            let shift = mu / nf;
            for k in 0..self.cols {
                let i = r * self.cols + k;
                out[i] = (c[i] - shift) / sd * gamma[k] as f64 + beta[k] as f64 / nf;
            }
        }
        out
    }
}

/// Ordered list of recorded nodes.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<GraphNode>,
    outputs: Vec<NodeId>,
    recording: bool,
    scope: Scope,
    n_layers: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New, empty tape with recording active.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            outputs: Vec::new(),
            recording: true,
            scope: Scope::Glue,
            n_layers: 0,
        }
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Scope attached to subsequently recorded nodes.
    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    /// Number of forward layers of the recorded model.
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn set_n_layers(&mut self, n: usize) {
        self.n_layers = n;
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Marks `t` as a model output.
    pub fn mark_output(&mut self, t: &Tensor) -> Result<()> {
        let id = t
            .node()
            .ok_or_else(|| Error::Invalid("output tensor was not recorded".into()))?;
        self.node(id)?;
        self.outputs.push(id);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    /// Records a model input as a leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Tensor> {
        self.push_leaf(Op::Input, t)
    }

    /// Records a learned constant as a leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Tensor> {
        self.push_leaf(Op::Param, t)
    }

    fn push_leaf(&mut self, op: Op, t: Tensor) -> Result<Tensor> {
        if !self.recording {
            return Err(Error::RecordingInactive);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            kind: OpKind::Leaf,
            op,
            parents: Vec::new(),
            out_shape: t.shape().to_vec(),
            scope: self.scope.clone(),
            reduction_axis: None,
            ln_stats: None,
            value: t.data().to_vec(),
        });
        Ok(Tensor::new(t.shape().to_vec(), t.into_data())?.with_node(id))
    }

    /// Detaches `t`: numerically the identity, but the decomposition pass
    /// treats the result as a leaf.
    pub fn detach(&mut self, t: &Tensor) -> Result<Tensor> {
        self.record(Op::Detach, &[t])
    }

    /// Executes `op` on `inputs` and appends the corresponding node.
    pub fn record(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        if !self.recording {
            return Err(Error::RecordingInactive);
        }
        if matches!(op, Op::Input | Op::Param) {
            return Err(Error::Invalid("leaves are recorded with input()/param()".into()));
        }
        let mut parents = Vec::with_capacity(inputs.len());
        for t in inputs {
            let id = t
                .node()
                .ok_or_else(|| Error::Invalid(format!("{} operand was not recorded", op.name())))?;
            self.node(id)?;
            parents.push(id);
        }
        let (out, ln_stats) = eval(&op, inputs)?;
        let (kind, reduction_axis) = self.kind_of(&op, &parents, inputs);
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            kind,
            op,
            parents,
            out_shape: out.shape().to_vec(),
            scope: self.scope.clone(),
            reduction_axis,
            ln_stats,
            value: out.data().to_vec(),
        });
        Ok(out.with_node(id))
    }

    fn kind_of(&self, op: &Op, parents: &[NodeId], inputs: &[&Tensor]) -> (OpKind, Option<usize>) {
        match op {
            Op::Input | Op::Param => (OpKind::Leaf, None),
            Op::Detach => (OpKind::Detach, None),
            Op::Add | Op::AddScaled { .. } => (OpKind::LinearBinary, None),
            Op::Linear { .. }
            | Op::AddBias { .. }
            | Op::Scale(_)
            | Op::LayerNorm { .. }
            | Op::SelectRow(_)
            | Op::Gather { .. } => (OpKind::LinearUnary, None),
            Op::MeanRows => (OpKind::LinearReduction, Some(0)),
            Op::Concat { axis, .. } => (OpKind::LinearReduction, Some(*axis)),
            Op::MatMul => {
                // linear in B only when A is a frozen (detached) snapshot
                let a_detached = self.nodes[parents[0].0].kind == OpKind::Detach;
                if a_detached {
                    (OpKind::LinearReduction, Some(inputs[0].shape().len() - 1))
                } else {
                    (OpKind::Nonlinear, None)
                }
            }
            Op::Scores { .. } | Op::Softmax { .. } | Op::Gelu | Op::Opaque(_) => {
                (OpKind::Nonlinear, None)
            }
        }
    }

    /// Linearity class of a node.
    pub fn classify(&self, id: NodeId) -> Result<OpKind> {
        Ok(self.node(id)?.kind)
    }

    /// Linearized descriptor of a LayerNorm node whose forward pass ran.
    pub fn freeze_layernorm(&self, id: NodeId) -> Result<FrozenLayerNorm> {
        let node = self.node(id)?;
        let Op::LayerNorm { gamma, beta, .. } = &node.op else {
            return Err(Error::WrongNodeKind {
                id: id.0,
                found: node.op.name().to_string(),
                expected: "layer_norm",
            });
        };
        let stats = node
            .ln_stats
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("layer_norm node {id} has no statistics")))?;
        Ok(FrozenLayerNorm {
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            gamma: Arc::clone(gamma),
            beta: Arc::clone(beta),
            cols: *node.out_shape.last().unwrap_or(&1),
        })
    }

    /// Line-oriented dump: `node <id> <kind> <op> parents=<ids> shape=<dims>`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let parents: Vec<String> = n.parents.iter().map(|p| p.0.to_string()).collect();
            let dims: Vec<String> = n.out_shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "node {} {} {} parents={} shape={}",
                n.id.0,
                n.kind,
                n.op.name(),
                parents.join(","),
                dims.join("x")
            );
        }
        s
    }

    /// Re-executes every node from its parents' recorded values and checks
    /// the results are bit-identical to what was recorded.
    pub fn replay_check(&self) -> Result<()> {
        for n in &self.nodes {
            if n.kind == OpKind::Leaf {
                continue;
            }
            let inputs: Vec<Tensor> = n
                .parents
                .iter()
                .map(|p| {
                    let pn = &self.nodes[p.0];
                    Tensor::new(pn.out_shape.clone(), pn.value.clone())
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let (out, _) = eval(&n.op, &refs)?;
            let same = out.data().len() == n.value.len()
                && out
                    .data()
                    .iter()
                    .zip(&n.value)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Invalid(format!(
                    "replay of node {} ({}) is not bit-identical",
                    n.id,
                    n.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Replaces the recorded value of a leaf or detach node. Used to probe
    /// what the decomposition reads from traversal boundaries.
    pub fn override_value(&mut self, id: NodeId, data: Vec<f32>) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
        if !matches!(node.kind, OpKind::Leaf | OpKind::Detach) {
            return Err(Error::WrongNodeKind {
                id: id.0,
                found: node.kind.to_string(),
                expected: "leaf or detach",
            });
        }
        if data.len() != node.value.len() {
            return Err(Error::shape("override_value", &[&node.out_shape, &[data.len()]]));
        }
        node.value = data;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels per op
// ---------------------------------------------------------------------------

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Invalid(format!(
            "{} expects {n} operands, got {}",
            op.name(),
            inputs.len()
        )));
    }
    Ok(())
}

/// Evaluates `op`; LayerNorm also returns the statistics it observed.
pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Option<LayerNormStats>)> {
    let out = match op {
        Op::Input | Op::Param | Op::Detach => {
            arity(op, inputs, 1)?;
            inputs[0].clone()
        }
        Op::Add => {
            arity(op, inputs, 2)?;
            same_shape("add", inputs[0], inputs[1])?;
            let data = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(inputs[0].shape().to_vec(), data)?
        }
        Op::AddScaled { left, right } => {
            arity(op, inputs, 2)?;
            same_shape("add_scaled", inputs[0], inputs[1])?;
            let data = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| left * a + right * b)
                .collect();
            Tensor::new(inputs[0].shape().to_vec(), data)?
        }
        Op::Linear { weight, bias } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (din, dout) = (weight.shape()[0], weight.shape()[1]);
            if x.cols() != din || bias.as_ref().is_some_and(|b| b.numel() != dout) {
                return Err(Error::shape("linear", &[x.shape(), weight.shape()]));
            }
            let mut data = tensor::matmul(x.data(), x.rows(), din, weight.data(), dout);
            if let Some(b) = bias {
                for row in data.chunks_mut(dout) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-scalar") = dout;
            Tensor::new(shape, data)?
        }
        Op::AddBias { bias } => {
            arity(op, inputs, 1)?;
            same_shape("add_bias", inputs[0], bias)?;
            let data = inputs[0]
                .data()
                .iter()
                .zip(bias.data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(inputs[0].shape().to_vec(), data)?
        }
        Op::Scale(s) => {
            arity(op, inputs, 1)?;
            let data = inputs[0].data().iter().map(|a| a * s).collect();
            Tensor::new(inputs[0].shape().to_vec(), data)?
        }
        Op::LayerNorm { gamma, beta, eps } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let cols = x.cols();
            if gamma.numel() != cols || beta.numel() != cols {
                return Err(Error::shape("layer_norm", &[x.shape(), gamma.shape()]));
            }
            let (mean, std) = tensor::row_stats_f64(x.data(), cols, *eps);
            let (m32, s32): (Vec<f32>, Vec<f32>) = (mean.iter().map(|&v| v as f32).collect(), std.iter().map(|&v| v as f32).collect());
            let data = tensor::layer_norm_with(x.data(), cols, &m32, &s32, gamma.data(), beta.data());
            return Ok((
                Tensor::new(x.shape().to_vec(), data)?,
                Some(LayerNormStats { mean, std }),
            ));
        }
        Op::SelectRow(r) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() != 2 || *r >= x.rows() {
                return Err(Error::shape("select_row", &[x.shape(), &[*r]]));
            }
            Tensor::vector(x.row(*r).to_vec())
        }
        Op::Gather { rows } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() != 2 || rows.iter().any(|&r| r >= x.rows()) {
                return Err(Error::shape("gather", &[x.shape(), &[rows.len()]]));
            }
            let mut data = Vec::with_capacity(rows.len() * x.cols());
            for &r in rows.iter() {
                data.extend_from_slice(x.row(r));
            }
            Tensor::matrix(rows.len(), x.cols(), data)?
        }
        Op::MeanRows => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(Error::shape("mean_rows", &[x.shape()]));
            }
            let (n, d) = (x.rows(), x.cols());
            let mut acc = vec![0.0f32; d];
            for r in 0..n {
                for (a, v) in acc.iter_mut().zip(x.row(r)) {
                    *a += v;
                }
            }
            Tensor::vector(acc.into_iter().map(|a| a / n as f32).collect())
        }
        Op::Concat { axis, .. } => concat(inputs, *axis)?,
        Op::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", &[a.shape(), b.shape()]));
            }
            let data = tensor::matmul(a.data(), a.rows(), a.cols(), b.data(), b.cols());
            Tensor::matrix(a.rows(), b.cols(), data)?
        }
        Op::Scores { scale } => {
            arity(op, inputs, 2)?;
            let (q, k) = (inputs[0], inputs[1]);
            if q.shape().len() != 2 || k.shape().len() != 2 || q.cols() != k.cols() {
                return Err(Error::shape("scores", &[q.shape(), k.shape()]));
            }
            let mut data = tensor::matmul_bt(q.data(), q.rows(), q.cols(), k.data(), k.rows());
            for v in &mut data {
                *v *= scale;
            }
            Tensor::matrix(q.rows(), k.rows(), data)?
        }
        Op::Softmax { mask } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if mask.as_ref().is_some_and(|m| m.len() != x.numel()) {
                return Err(Error::shape("softmax", &[x.shape()]));
            }
            let data = tensor::softmax_rows(x.data(), x.cols(), mask.as_ref().map(|m| m.as_slice()));
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Gelu => {
            arity(op, inputs, 1)?;
            let data = inputs[0].data().iter().map(|&v| tensor::gelu(v)).collect();
            Tensor::new(inputs[0].shape().to_vec(), data)?
        }
        Op::Opaque(kernel) => {
            arity(op, inputs, 1)?;
            let out = kernel.forward(inputs[0])?;
            Tensor::new(out.shape().to_vec(), out.into_data())?
        }
    };
    Ok((out, None))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    if inputs.is_empty() || axis > 1 || shapes.iter().any(|s| s.len() != 2) {
        return Err(Error::shape("concat", &shapes));
    }
    let other = 1 - axis;
    let keep = shapes[0][other];
    if shapes.iter().any(|s| s[other] != keep) {
        return Err(Error::shape("concat", &shapes));
    }
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    if axis == 0 {
        let mut data = Vec::with_capacity(total * keep);
        for t in inputs {
            data.extend_from_slice(t.data());
        }
        Tensor::matrix(total, keep, data)
    } else {
        let mut data = Vec::with_capacity(total * keep);
        for r in 0..keep {
            for t in inputs {
                data.extend_from_slice(t.row(r));
            }
        }
        Tensor::matrix(keep, total, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn add_is_linear_binary() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], |i| i as f32)).unwrap();
        let y = tape.input(t(&[2, 3], |i| 1.0 - i as f32)).unwrap();
        let z = tape.record(Op::Add, &[&x, &y]).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(tape.classify(z.node().unwrap()).unwrap(), OpKind::LinearBinary);
        assert!(z.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], |_| 0.0)).unwrap();
        let y = tape.input(t(&[3, 2], |_| 0.0)).unwrap();
        match tape.record(Op::Add, &[&x, &y]) {
            Err(Error::Shape { shapes, .. }) => assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recording_inactive_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], |_| 1.0)).unwrap();
        tape.set_recording(false);
        assert!(matches!(tape.record(Op::Gelu, &[&x]), Err(Error::RecordingInactive)));
    }

    #[test]
    fn gelu_and_softmax_are_nonlinear() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], |i| i as f32)).unwrap();
        let g = tape.record(Op::Gelu, &[&x]).unwrap();
        let s = tape.record(Op::Softmax { mask: None }, &[&x]).unwrap();
        assert_eq!(tape.classify(g.node().unwrap()).unwrap(), OpKind::Nonlinear);
        assert_eq!(tape.classify(s.node().unwrap()).unwrap(), OpKind::Nonlinear);
    }

    #[test]
    fn matmul_with_detached_weights_is_reduction() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[4, 5], |i| (i as f32).cos())).unwrap();
        let v = tape.input(t(&[5, 8], |i| (i as f32).sin())).unwrap();
        let live = tape.record(Op::MatMul, &[&a, &v]).unwrap();
        assert_eq!(tape.classify(live.node().unwrap()).unwrap(), OpKind::Nonlinear);
        let ad = tape.detach(&a).unwrap();
        let out = tape.record(Op::MatMul, &[&ad, &v]).unwrap();
        let node = tape.node(out.node().unwrap()).unwrap();
        assert_eq!(node.kind, OpKind::LinearReduction);
        assert_eq!(node.reduction_axis, Some(1));
        assert_eq!(out.shape(), &[4, 8]);
    }

    #[test]
    fn concat_over_heads_is_reduction() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[3, 2], |i| i as f32)).unwrap();
        let b = tape.input(t(&[3, 2], |i| -(i as f32))).unwrap();
        let c = tape
            .record(Op::Concat { axis: 1, heads: true }, &[&a, &b])
            .unwrap();
        assert_eq!(c.shape(), &[3, 4]);
        assert_eq!(c.row(1), &[2.0, 3.0, -2.0, -3.0]);
        assert_eq!(tape.classify(c.node().unwrap()).unwrap(), OpKind::LinearReduction);
    }

    #[test]
    fn detach_is_bitwise_identity() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3, 3], |i| (i as f32 * 0.37).tan())).unwrap();
        let d = tape.detach(&x).unwrap();
        assert_eq!(d.data(), x.data());
        assert_eq!(tape.classify(d.node().unwrap()).unwrap(), OpKind::Detach);
    }

    #[test]
    fn layer_norm_is_linear_unary_with_stats() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 4], |i| (i * i) as f32)).unwrap();
        let ln = tape
            .record(
                Op::LayerNorm {
                    gamma: Arc::new(Tensor::vector(vec![1.0; 4])),
                    beta: Arc::new(Tensor::vector(vec![0.0; 4])),
                    eps: 1e-5,
                },
                &[&x],
            )
            .unwrap();
        let id = ln.node().unwrap();
        assert_eq!(tape.classify(id).unwrap(), OpKind::LinearUnary);
        let frozen = tape.freeze_layernorm(id).unwrap();
        assert_eq!(frozen.mean.len(), 2);
        assert!(tape.freeze_layernorm(x.node().unwrap()).is_err());
    }

    #[test]
    fn unknown_node_is_rejected() {
        let tape = Tape::new();
        assert!(matches!(tape.classify(NodeId(3)), Err(Error::UnknownNode(3))));
    }

    #[test]
    fn dump_lists_every_node() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], |i| i as f32)).unwrap();
        let y = tape.record(Op::Scale(2.0), &[&x]).unwrap();
        tape.record(Op::Add, &[&x, &y]).unwrap();
        let dump = tape.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "node 0 leaf input parents= shape=2x3");
        assert_eq!(lines[1], "node 1 linear-unary scale parents=0 shape=2x3");
        assert_eq!(lines[2], "node 2 linear-binary add parents=0,1 shape=2x3");
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3, 4], |i| (i as f32 * 1.3).sin())).unwrap();
        let g = tape.record(Op::Gelu, &[&x]).unwrap();
        let s = tape.record(Op::Softmax { mask: None }, &[&g]).unwrap();
        let sd = tape.detach(&s).unwrap();
        tape.record(Op::Scores { scale: 0.5 }, &[&x, &x]).unwrap();
        let w = Arc::new(t(&[4, 3], |i| i as f32 * 0.1));
        let v = tape.record(Op::Linear { weight: w, bias: None }, &[&x]).unwrap();
        assert!(tape.record(Op::Gather { rows: Arc::new(vec![0, 1, 2, 3]) }, &[&sd]).is_err());
        let sd3 = tape.record(Op::Gather { rows: Arc::new(vec![2, 1, 0]) }, &[&sd]).unwrap();
        tape.record(Op::Concat { axis: 1, heads: false }, &[&sd3, &x]).unwrap();
        let a = tape.record(Op::Scores { scale: 1.0 }, &[&x, &x]).unwrap();
        let ad = tape.detach(&a).unwrap();
        tape.record(Op::MatMul, &[&ad, &v]).unwrap();
        tape.record(Op::MeanRows, &[&v]).unwrap();
        tape.replay_check().unwrap();
    }
}
