// SPDX-License-Identifier: MIT OR Apache-2.0

//! Automatic decomposition of a recorded representation into direct
//! per-component (and per-token) contributions.
//!
//! Traversal starts at the node that produced `z` and walks parents while
//! nodes are linear. Nonlinear, detach and leaf nodes end a branch and emit
//! their own value as one term. On the way back every linear node maps the
//! terms of its inputs so that, at every node, the terms sum to the value the
//! node produced:
//!
//! - linear-unary nodes map each of the `n` incoming terms by their linear
//!   part and add `shift / n` (bias, LayerNorm `β` and `μ` shares);
//! - linear-binary nodes forward both operand lists, scaled by their
//!   coefficients;
//! - linear-reduction nodes unbind each term along the reduced axis: heads at
//!   a concatenation, key tokens at an attention matmul, rows at a mean.
//!
//! Terms are always collected at token granularity; coarser granularities
//! are sums of the fine terms, so the share of every bias and LayerNorm mean
//! does not depend on the granularity requested.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphNode, NodeId, Op, OpKind, Scope, Tape};
use crate::tensor::{self, Tensor};

/// Default tolerance of the reconstruction identity (relative L2).
pub const RECONSTRUCTION_TOL: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Identities
// ---------------------------------------------------------------------------

/// Identity of a component. Layers count from the last layer (index 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentId {
    /// Everything not decomposed: embeddings and skipped layers.
    Init,
    /// MLP block.
    Mlp(usize),
    /// Attention head `(layer, head)`.
    Head(usize, usize),
    /// Block that is kept as a single nonlinear unit.
    Opaque(usize, String),
    /// All heads and MLP of one layer summed.
    Layer(usize),
    /// Every contribution summed.
    All,
}

impl ComponentId {
    /// Layer index counted from the last layer, if any.
    pub fn layer(&self) -> Option<usize> {
        match self {
            Self::Mlp(l) | Self::Head(l, _) | Self::Opaque(l, _) | Self::Layer(l) => Some(*l),
            Self::Init | Self::All => None,
        }
    }

    fn sort_key(&self) -> (u8, usize, usize, &str) {
        match self {
            Self::Init => (0, 0, 0, ""),
            Self::All => (0, 0, 1, ""),
            Self::Head(l, h) => (1, *l, *h, ""),
            Self::Layer(l) => (1, *l, 0, ""),
            Self::Mlp(l) => (1, *l, usize::MAX - 1, ""),
            Self::Opaque(l, k) => (1, *l, usize::MAX, k.as_str()),
        }
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Init => write!(f, "init"),
            Self::All => write!(f, "all"),
            Self::Mlp(l) => write!(f, "L{l:02}.mlp"),
            Self::Head(l, h) => write!(f, "L{l:02}.H{h}"),
            Self::Opaque(l, k) => write!(f, "L{l:02}.{k}"),
            Self::Layer(l) => write!(f, "L{l:02}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad component id {s:?}"));
        match s {
            "init" => return Ok(Self::Init),
            "all" => return Ok(Self::All),
            _ => {}
        }
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, tail) = match rest.split_once('.') {
            Some((l, t)) => (l, Some(t)),
            None => (rest, None),
        };
        let layer: usize = layer.parse().map_err(|_| bad())?;
        Ok(match tail {
            None => Self::Layer(layer),
            Some("mlp") => Self::Mlp(layer),
            Some(t) if t.starts_with('H') && t[1..].parse::<usize>().is_ok() => {
                Self::Head(layer, t[1..].parse().map_err(|_| bad())?)
            }
            Some(t) if !t.is_empty() => Self::Opaque(layer, t.to_string()),
            Some(_) => return Err(bad()),
        })
    }
}

/// Level of detail of a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    /// One contribution per component.
    Component,
    /// One contribution per (component, input token).
    ComponentToken,
    /// One contribution per layer (heads and MLP summed).
    Layer,
    /// A single contribution equal to `z`.
    Total,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Component => "component",
            Self::ComponentToken => "component-token",
            Self::Layer => "layer",
            Self::Total => "total",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(Self::Component),
            "component-token" => Ok(Self::ComponentToken),
            "layer" => Ok(Self::Layer),
            "total" => Ok(Self::Total),
            _ => Err(Error::Invalid(format!("unknown granularity {s:?}"))),
        }
    }
}

/// Direct contribution of one component (optionally through one token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub component: ComponentId,
    /// Token at the input of the component. Only attention heads carry one;
    /// MLP, opaque and init terms are not split by token.
    pub token: Option<usize>,
    pub vector: Vec<f32>,
}

/// Final representation written as a sum of contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub contributions: Vec<Contribution>,
    pub z: Vec<f32>,
    pub model_id: String,
    pub granularity: Granularity,
    pub n_layers_decomposed: usize,
}

impl Decomposition {
    /// Width of `z`.
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Elementwise sum of all contribution vectors (accumulated in `f64`).
    pub fn sum(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.z.len()];
        for c in &self.contributions {
            for (a, v) in acc.iter_mut().zip(&c.vector) {
                *a += *v as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Relative L2 error of the reconstruction identity.
    pub fn residual(&self) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut acc = vec![0.0f64; self.z.len()];
        for c in &self.contributions {
            for (a, v) in acc.iter_mut().zip(&c.vector) {
                *a += *v as f64;
            }
        }
        for (a, z) in acc.iter().zip(&self.z) {
            num += (a - *z as f64).powi(2);
            den += (*z as f64).powi(2);
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Distinct components in first-appearance order.
    pub fn components(&self) -> Vec<ComponentId> {
        let mut seen = Vec::new();
        for c in &self.contributions {
            if !seen.contains(&c.component) {
                seen.push(c.component.clone());
            }
        }
        seen
    }

    /// Summed vector of one component (over its tokens).
    pub fn component_vector(&self, id: &ComponentId) -> Option<Vec<f32>> {
        let mut out: Option<Vec<f32>> = None;
        for c in self.contributions.iter().filter(|c| &c.component == id) {
            let acc = out.get_or_insert_with(|| vec![0.0; c.vector.len()]);
            for (a, v) in acc.iter_mut().zip(&c.vector) {
                *a += v;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Terms in flight
// ---------------------------------------------------------------------------

/// Where a term entered the traversal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub scope: Scope,
    /// Set by a head concatenation.
    pub head: Option<usize>,
}

/// A partial contribution shaped like the node currently being decomposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub origin: Origin,
    pub token: Option<usize>,
    pub data: Vec<f32>,
}

impl Term {
    fn stop(node: &GraphNode) -> Self {
        Self {
            origin: Origin {
                scope: node.scope.clone(),
                head: None,
            },
            token: None,
            data: node.value().to_vec(),
        }
    }
}

fn sum_terms(terms: &[Term], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; len];
    for t in terms {
        for (a, v) in acc.iter_mut().zip(&t.data) {
            *a += *v as f64;
        }
    }
    acc
}

/// Maps terms through a linear-unary node; the node's constant shift is
/// split evenly as `shift / n` over the `n` terms.
pub fn push_linear(tape: &Tape, node: &GraphNode, terms: Vec<Term>) -> Result<Vec<Term>> {
    if node.kind != OpKind::LinearUnary {
        return Err(Error::WrongNodeKind {
            id: node.id.0,
            found: node.kind.to_string(),
            expected: "linear-unary",
        });
    }
    let n = terms.len();
    let nf = n as f32;
    let parent = tape.node(node.parents[0])?;
    let in_shape = &parent.out_shape;
    let map = |data: &[f32]| -> Result<Vec<f32>> {
        Ok(match &node.op {
            Op::Linear { weight, bias } => {
                let (din, dout) = (weight.shape()[0], weight.shape()[1]);
                let rows = data.len() / din;
                let mut out = tensor::matmul(data, rows, din, weight.data(), dout);
                if let Some(b) = bias {
                    for row in out.chunks_mut(dout) {
                        for (o, bv) in row.iter_mut().zip(b.data()) {
                            *o += bv / nf;
                        }
                    }
                }
                out
            }
            Op::AddBias { bias } => data
                .iter()
                .zip(bias.data())
                .map(|(x, b)| x + b / nf)
                .collect(),
            Op::Scale(s) => data.iter().map(|x| x * s).collect(),
            Op::LayerNorm { .. } => tape.freeze_layernorm(node.id)?.apply(data, n),
            Op::SelectRow(r) => {
                let cols = in_shape[1];
                data[r * cols..(r + 1) * cols].to_vec()
            }
            Op::Gather { rows } => {
                let cols = in_shape[1];
                let mut out = Vec::with_capacity(rows.len() * cols);
                for &r in rows.iter() {
                    out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
                }
                out
            }
            other => {
                return Err(Error::Unclassifiable {
                    id: node.id.0,
                    op: other.name().to_string(),
                })
            }
        })
    };
    terms
        .into_iter()
        .map(|t| {
            Ok(Term {
                data: map(&t.data)?,
                ..t
            })
        })
        .collect()
}

fn is_zero_leaf(node: &GraphNode) -> bool {
    node.kind == OpKind::Leaf && node.value().iter().all(|&v| v == 0.0)
}

/// Combines the term lists of a linear-binary node's two operands. An
/// operand that is an all-zero leaf contributes no terms.
pub fn decomp_binary(
    tape: &Tape,
    node: &GraphNode,
    left: Vec<Term>,
    right: Vec<Term>,
) -> Result<Vec<Term>> {
    let (a, b) = match node.op {
        Op::Add => (1.0f32, 1.0f32),
        Op::AddScaled { left, right } => (left, right),
        _ => {
            return Err(Error::WrongNodeKind {
                id: node.id.0,
                found: node.op.name().to_string(),
                expected: "linear-binary",
            })
        }
    };
    let scale = |terms: Vec<Term>, s: f32, parent: NodeId| -> Result<Vec<Term>> {
        if is_zero_leaf(tape.node(parent)?) {
            return Ok(Vec::new());
        }
        Ok(if s == 1.0 {
            terms
        } else {
            terms
                .into_iter()
                .map(|t| Term {
                    data: t.data.iter().map(|v| v * s).collect(),
                    ..t
                })
                .collect()
        })
    };
    let mut out = scale(left, a, node.parents[0])?;
    out.extend(scale(right, b, node.parents[1])?);
    Ok(out)
}

/// Unbinds the terms of a linear-reduction node along its reduction axis.
///
/// `parent_terms[k]` holds the terms of the node's `k`-th decomposed operand;
/// for an attention matmul only the value operand is decomposed and the
/// frozen weights are read from the tape.
pub fn decomp_reduction(
    tape: &Tape,
    node: &GraphNode,
    parent_terms: Vec<Vec<Term>>,
) -> Result<Vec<Term>> {
    let axis = node.reduction_axis.ok_or_else(|| {
        Error::Invalid(format!("reduction node {} has no reduction axis", node.id))
    })?;
    match &node.op {
        Op::Concat { heads, .. } => {
            let (rows, cols) = (node.out_shape[0], node.out_shape[1]);
            let mut offset = 0;
            let mut out = Vec::new();
            for (k, terms) in parent_terms.into_iter().enumerate() {
                let pshape = &tape.node(node.parents[k])?.out_shape;
                let (pr, pc) = (pshape[0], pshape[1]);
                for t in terms {
                    let mut data = vec![0.0f32; rows * cols];
                    for r in 0..pr {
                        for c in 0..pc {
                            let (orow, ocol) = if axis == 0 { (r + offset, c) } else { (r, c + offset) };
                            data[orow * cols + ocol] = t.data[r * pc + c];
                        }
                    }
                    let mut origin = t.origin;
                    if *heads {
                        origin.head = Some(k);
                    }
                    out.push(Term {
                        origin,
                        token: t.token,
                        data,
                    });
                }
                offset += if axis == 0 { pr } else { pc };
            }
            Ok(out)
        }
        Op::MatMul => {
            let weights = tape.node(node.parents[0])?;
            let (m, k) = (weights.out_shape[0], weights.out_shape[1]);
            let n = node.out_shape[1];
            let a = weights.value();
            let terms = parent_terms
                .into_iter()
                .nth(1)
                .ok_or_else(|| Error::Invalid("matmul without value terms".into()))?;
            let mut out = Vec::with_capacity(terms.len() * k);
            for t in terms {
                for tok in 0..k {
                    let v = &t.data[tok * n..(tok + 1) * n];
                    let mut data = vec![0.0f32; m * n];
                    for q in 0..m {
                        let w = a[q * k + tok];
                        if w == 0.0 {
                            continue;
                        }
                        for (o, x) in data[q * n..(q + 1) * n].iter_mut().zip(v) {
                            *o = w * x;
                        }
                    }
                    out.push(Term {
                        origin: t.origin.clone(),
                        token: t.token.or(Some(tok)),
                        data,
                    });
                }
            }
            Ok(out)
        }
        Op::MeanRows => {
            let pshape = &tape.node(node.parents[0])?.out_shape;
            let (rows, cols) = (pshape[0], pshape[1]);
            let inv = 1.0 / rows as f32;
            let terms = parent_terms.into_iter().next().unwrap_or_default();
            let mut out = Vec::with_capacity(terms.len() * rows);
            for t in terms {
                for r in 0..rows {
                    out.push(Term {
                        origin: t.origin.clone(),
                        token: t.token,
                        data: t.data[r * cols..(r + 1) * cols].iter().map(|v| v * inv).collect(),
                    });
                }
            }
            Ok(out)
        }
        other => Err(Error::Unclassifiable {
            id: node.id.0,
            op: other.name().to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Traversal
// ---------------------------------------------------------------------------

struct Walker<'a> {
    tape: &'a Tape,
    consumers: HashMap<NodeId, usize>,
    memo: HashMap<NodeId, Vec<Term>>,
    check: Option<Vec<(NodeId, f64)>>,
}

impl<'a> Walker<'a> {
    fn new(tape: &'a Tape, root: NodeId, diagnose: bool) -> Result<Self> {
        let mut consumers: HashMap<NodeId, usize> = HashMap::new();
        let mut stack = vec![root];
        let mut visited = std::collections::HashSet::new();
        while let Some(id) = stack.pop() {
            if !visited.insert(id) {
                continue;
            }
            let node = tape.node(id)?;
            if node.kind.is_linear() {
                for p in &node.parents {
                    *consumers.entry(*p).or_default() += 1;
                    stack.push(*p);
                }
            }
        }
        Ok(Self {
            tape,
            consumers,
            memo: HashMap::new(),
            check: diagnose.then(Vec::new),
        })
    }

    fn walk(&mut self, id: NodeId) -> Result<Vec<Term>> {
        if let Some(terms) = self.memo.get(&id) {
            return Ok(terms.clone());
        }
        let tape = self.tape;
        let node = tape.node(id)?;
        let terms = match node.kind {
            OpKind::Nonlinear | OpKind::Leaf | OpKind::Detach => vec![Term::stop(node)],
            OpKind::LinearUnary => {
                let inner = self.walk(node.parents[0])?;
                push_linear(tape, node, inner)?
            }
            OpKind::LinearBinary => {
                let left = self.walk(node.parents[0])?;
                let right = self.walk(node.parents[1])?;
                decomp_binary(tape, node, left, right)?
            }
            OpKind::LinearReduction => {
                let mut parts = Vec::with_capacity(node.parents.len());
                for (k, p) in node.parents.iter().enumerate() {
                    // frozen attention weights are not decomposed
                    if matches!(node.op, Op::MatMul) && k == 0 {
                        parts.push(Vec::new());
                    } else {
                        parts.push(self.walk(*p)?);
                    }
                }
                decomp_reduction(tape, node, parts)?
            }
        };
        if let Some(check) = self.check.as_mut() {
            let acc = sum_terms(&terms, node.value().len());
            let f: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
            check.push((id, tensor::rel_l2(&f, node.value())));
        }
        if self.consumers.get(&id).copied().unwrap_or(0) > 1 {
            self.memo.insert(id, terms.clone());
        }
        Ok(terms)
    }
}

/// Which layers to decompose, counted from the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    Last(usize),
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        s.parse()
            .map(Self::Last)
            .map_err(|_| Error::Invalid(format!("bad layer selection {s:?}")))
    }
}

/// Decomposes the value of `final_node` into direct contributions.
///
/// Components in layers `>= layers` (counted from the last) are folded into
/// the single [`ComponentId::Init`] contribution. Fails if the traversal
/// meets an op it cannot classify or if the reconstruction identity is off
/// by more than [`RECONSTRUCTION_TOL`].
pub fn rep_decompose(
    tape: &Tape,
    final_node: NodeId,
    granularity: Granularity,
    layers: LayerSelection,
    model_id: &str,
) -> Result<Decomposition> {
    rep_decompose_with_tol(tape, final_node, granularity, layers, model_id, RECONSTRUCTION_TOL)
}

/// [`rep_decompose`] with an explicit reconstruction tolerance.
pub fn rep_decompose_with_tol(
    tape: &Tape,
    final_node: NodeId,
    granularity: Granularity,
    layers: LayerSelection,
    model_id: &str,
    tol: f64,
) -> Result<Decomposition> {
    let n_layers = tape.n_layers();
    let keep = match layers {
        LayerSelection::All => n_layers,
        LayerSelection::Last(k) if k <= n_layers => k,
        LayerSelection::Last(k) => {
            return Err(Error::Invalid(format!(
                "cannot decompose {k} layers of a {n_layers}-layer model"
            )))
        }
    };
    let z = tape.node(final_node)?.value().to_vec();
    let terms = Walker::new(tape, final_node, false)?.walk(final_node)?;

    let mut merged: BTreeMap<(ComponentId, Option<usize>), Vec<f64>> = BTreeMap::new();
    for t in terms {
        let component = component_of(&t.origin, n_layers, t.token.is_some())?;
        let component = match component.layer() {
            Some(l) if l >= keep => ComponentId::Init,
            _ => component,
        };
        let token = match (&component, granularity) {
            (ComponentId::Init, _) => None,
            (_, Granularity::ComponentToken) => t.token,
            _ => None,
        };
        let (component, token) = match granularity {
            Granularity::Layer => (
                component.layer().map_or(ComponentId::Init, ComponentId::Layer),
                None,
            ),
            Granularity::Total => (ComponentId::All, None),
            _ => (component, token),
        };
        let acc = merged
            .entry((component, token))
            .or_insert_with(|| vec![0.0; z.len()]);
        for (a, v) in acc.iter_mut().zip(&t.data) {
            *a += *v as f64;
        }
    }
    if granularity != Granularity::Total {
        merged
            .entry((ComponentId::Init, None))
            .or_insert_with(|| vec![0.0; z.len()]);
    }
    let contributions = merged
        .into_iter()
        .map(|((component, token), acc)| Contribution {
            component,
            token,
            vector: acc.into_iter().map(|v| v as f32).collect(),
        })
        .collect();
    let dec = Decomposition {
        contributions,
        z,
        model_id: model_id.to_string(),
        granularity,
        n_layers_decomposed: keep,
    };
    let residual = dec.residual();
    if !(residual <= tol) {
        return Err(Error::Reconstruction {
            residual,
            tolerance: tol,
            report: residual_report(tape, final_node)?,
        });
    }
    Ok(dec)
}

fn component_of(origin: &Origin, n_layers: usize, _has_token: bool) -> Result<ComponentId> {
    let from_last = |l: usize| n_layers.saturating_sub(1).saturating_sub(l);
    Ok(match &origin.scope {
        Scope::Embed | Scope::Glue => ComponentId::Init,
        Scope::Mlp { layer } => ComponentId::Mlp(from_last(*layer)),
        Scope::Opaque { layer, kind } => ComponentId::Opaque(from_last(*layer), kind.clone()),
        Scope::Attention { layer } => match origin.head {
            Some(h) => ComponentId::Head(from_last(*layer), h),
            None => {
                return Err(Error::Invalid(format!(
                    "attention term of layer {layer} never passed a head concatenation"
                )))
            }
        },
    })
}

/// Per-node reconstruction residuals along the traversal, worst first.
pub fn residual_report(tape: &Tape, final_node: NodeId) -> Result<String> {
    let mut walker = Walker::new(tape, final_node, true)?;
    walker.walk(final_node)?;
    let mut rows = walker.check.unwrap_or_default();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let lines: Vec<String> = rows
        .iter()
        .take(8)
        .map(|(id, r)| {
            let op = tape.node(*id).map(|n| n.op.name().to_string()).unwrap_or_default();
            format!("node {id} {op}: {r:.3e}")
        })
        .collect();
    Ok(lines.join("; "))
}

/// What [`reduce_decomposition`] sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collapse {
    /// Drop token indices.
    Tokens,
    /// Sum heads and MLP of each layer.
    HeadsWithinLayer,
    /// Sum everything.
    Everything,
}

/// Sums contributions that share a coarser key.
pub fn reduce_decomposition(dec: &Decomposition, collapse: Collapse) -> Result<Decomposition> {
    let target = match (collapse, dec.granularity) {
        (Collapse::Tokens, Granularity::ComponentToken) => Granularity::Component,
        (Collapse::HeadsWithinLayer, Granularity::Component | Granularity::ComponentToken) => {
            Granularity::Layer
        }
        (Collapse::Everything, _) => Granularity::Total,
        (c, g) => {
            return Err(Error::Invalid(format!(
                "cannot collapse {c:?} at {g} granularity"
            )))
        }
    };
    let mut merged: BTreeMap<(ComponentId, Option<usize>), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(ComponentId, Option<usize>)> = Vec::new();
    for c in &dec.contributions {
        let key = match target {
            Granularity::Component => (c.component.clone(), None),
            Granularity::Layer => (
                c.component.layer().map_or(ComponentId::Init, ComponentId::Layer),
                None,
            ),
            _ => (ComponentId::All, None),
        };
        let acc = merged.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            vec![0.0; dec.z.len()]
        });
        for (a, v) in acc.iter_mut().zip(&c.vector) {
            *a += *v as f64;
        }
    }
    Ok(Decomposition {
        contributions: merged
            .into_iter()
            .map(|((component, token), acc)| Contribution {
                component,
                token,
                vector: acc.into_iter().map(|v| v as f32).collect(),
            })
            .collect(),
        z: dec.z.clone(),
        model_id: dec.model_id.clone(),
        granularity: target,
        n_layers_decomposed: dec.n_layers_decomposed,
    })
}

/// Checks the reconstruction identity of a loaded or computed decomposition.
pub fn verify(dec: &Decomposition, tol: f64) -> Result<f64> {
    let residual = dec.residual();
    if residual <= tol && dec.contributions.iter().all(|c| c.vector.len() == dec.z.len()) {
        Ok(residual)
    } else {
        Err(Error::Reconstruction {
            residual,
            tolerance: tol,
            report: "stored contributions".into(),
        })
    }
}

/// Convenience: the tensor a node produced.
pub fn node_tensor(tape: &Tape, id: NodeId) -> Result<Tensor> {
    let node = tape.node(id)?;
    Tensor::new(node.out_shape.clone(), node.value().to_vec())
}
