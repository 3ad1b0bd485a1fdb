// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameters and the recorded forward pass of the toy transformer zoo.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Op, OpaqueKernel, Scope, Tape};
use crate::tensor::{self, Tensor};

pub const LN_EPS: f32 = 1e-5;

/// RGB image stored height × width × channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Invalid(format!(
                "image of side {size} needs {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Flattens into `grid²` patches, row-major over the grid.
    pub fn patchify(&self, grid: usize) -> Result<Tensor> {
        if grid == 0 || self.size % grid != 0 {
            return Err(Error::Invalid(format!(
                "image side {} not divisible by grid {grid}",
                self.size
            )));
        }
        let p = self.size / grid;
        let mut data = Vec::with_capacity(self.data.len());
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..p {
                    for x in 0..p {
                        data.extend_from_slice(&self.pixel(gy * p + y, gx * p + x));
                    }
                }
            }
        }
        Tensor::matrix(grid * grid, p * p * 3, data)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Affine map `x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, din: usize, dout: usize, bias: bool) -> Self {
        let w = gaussian(rng, vec![din, dout], (1.0 / din as f32).sqrt());
        let b = bias.then(|| gaussian(rng, vec![dout], 0.02));
        Self { w, b }
    }

    pub fn din(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.w.shape()[1]
    }

    pub(crate) fn op(&self) -> Op {
        Op::Linear {
            weight: Arc::new(self.w.clone()),
            bias: self.b.clone().map(Arc::new),
        }
    }

    /// Applies the map to a row-major batch of rows.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let (din, dout) = (self.din(), self.dout());
        let mut out = tensor::matmul(x, x.len() / din, din, self.w.data(), dout);
        if let Some(b) = &self.b {
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        out
    }
}

/// LayerNorm affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut gamma = gaussian(rng, vec![d], 0.05);
        for g in gamma.data_mut() {
            *g += 1.0;
        }
        Self {
            gamma,
            beta: gaussian(rng, vec![d], 0.02),
        }
    }

    pub(crate) fn op(&self) -> Op {
        Op::LayerNorm {
            gamma: Arc::new(self.gamma.clone()),
            beta: Arc::new(self.beta.clone()),
            eps: LN_EPS,
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.gamma.numel();
        let (mean, std) = tensor::row_stats(x, d, LN_EPS);
        tensor::layer_norm_with(x, d, &mean, &std, self.gamma.data(), self.beta.data())
    }
}

/// Which tokens may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnPattern {
    /// Every token attends to every token.
    Global,
    /// Non-overlapping `window × window` windows, optionally shifted by half
    /// a window (tokens separated by the image border never mix).
    Window { grid: usize, window: usize, shifted: bool },
    /// Dilated grid: tokens sharing `(row mod s, col mod s)` with
    /// `s = grid / window`.
    Grid { grid: usize, window: usize },
}

impl AttnPattern {
    /// Row-major `n × n` mask of allowed pairs, `None` for global attention.
    pub fn mask(&self) -> Option<Vec<bool>> {
        let group = |grid: usize, f: &dyn Fn(usize, usize) -> (usize, usize)| {
            let n = grid * grid;
            let ids: Vec<(usize, usize)> = (0..n).map(|t| f(t / grid, t % grid)).collect();
            let mut m = vec![false; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = ids[i] == ids[j];
                }
            }
            m
        };
        match *self {
            Self::Global => None,
            Self::Window { grid, window, shifted } => {
                let off = if shifted { window - window / 2 } else { 0 };
                Some(group(grid, &|r, c| ((r + off) / window, (c + off) / window)))
            }
            Self::Grid { grid, window } => {
                let s = grid / window;
                Some(group(grid, &|r, c| (r % s, c % s)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub layer: usize,
    pub ln: Norm,
    pub heads: Vec<HeadParams>,
    pub out: Linear,
    pub pattern: AttnPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer: usize,
    pub ln: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// 2×2 patch merging: concatenate neighbours, normalize, project `4d → 2d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    pub grid_in: usize,
    pub ln: Norm,
    pub proj: Linear,
}

impl MergeParams {
    /// Source rows of the four strided sub-grids, in concatenation order.
    pub fn gathers(&self) -> [Vec<usize>; 4] {
        let g = self.grid_in;
        let h = g / 2;
        let pick = |dy: usize, dx: usize| -> Vec<usize> {
            (0..h * h)
                .map(|t| (2 * (t / h) + dy) * g + 2 * (t % h) + dx)
                .collect()
        };
        [pick(0, 0), pick(1, 0), pick(0, 1), pick(1, 1)]
    }
}

/// Depthwise 3×3 convolution, GELU, pointwise projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub layer: usize,
    pub grid: usize,
    /// `9 × d` depthwise taps, row-major over the 3×3 neighbourhood.
    pub dw: Tensor,
    pub dw_b: Tensor,
    pub pw: Linear,
}

impl ConvParams {
    /// Branch output (without the residual).
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let g = self.grid;
        let d = self.dw_b.numel();
        let mut h = vec![0.0f32; g * g * d];
        for r in 0..g {
            for c in 0..g {
                let o = (r * g + c) * d;
                h[o..o + d].copy_from_slice(self.dw_b.data());
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sr, sc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                        if sr < 0 || sc < 0 || sr >= g as isize || sc >= g as isize {
                            continue;
                        }
                        let s = (sr as usize * g + sc as usize) * d;
                        let tap = &self.dw.data()[(ky * 3 + kx) * d..(ky * 3 + kx + 1) * d];
                        for k in 0..d {
                            h[o + k] += tap[k] * x[s + k];
                        }
                    }
                }
            }
        }
        for v in &mut h {
            *v = tensor::gelu(*v);
        }
        self.pw.apply(&h)
    }
}

impl OpaqueKernel for ConvParams {
    fn name(&self) -> &str {
        "mbconv"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let d = self.dw_b.numel();
        if input.shape() != [self.grid * self.grid, d] {
            return Err(Error::shape("mbconv", &[input.shape(), &[self.grid * self.grid, d]]));
        }
        Tensor::matrix(self.grid * self.grid, d, self.apply(input.data()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Attention(AttnParams),
    Mlp(MlpParams),
    Merge(MergeParams),
    Conv(ConvParams),
}

/// A toy transformer with deterministic seeded weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: Linear,
    pub cls: Option<Tensor>,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: Norm,
    pub n_layers: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn attn(rng: &mut ChaCha8Rng, layer: usize, d: usize, heads: usize, pattern: AttnPattern) -> Block {
    let dh = d / heads;
    let ln = Norm::init(rng, d);
    let heads = (0..heads)
        .map(|_| HeadParams {
            q: Linear::init(rng, d, dh, true),
            k: Linear::init(rng, d, dh, true),
            v: Linear::init(rng, d, dh, true),
        })
        .collect();
    let out = Linear::init(rng, d, d, true);
    Block::Attention(AttnParams {
        layer,
        ln,
        heads,
        out,
        pattern,
    })
}

fn mlp(rng: &mut ChaCha8Rng, layer: usize, d: usize, ratio: usize) -> Block {
    Block::Mlp(MlpParams {
        layer,
        ln: Norm::init(rng, d),
        fc1: Linear::init(rng, d, d * ratio, true),
        fc2: Linear::init(rng, d * ratio, d, true),
    })
}

/// Builds a model with weights drawn from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let g = cfg.patch_grid;
    let patch = Linear::init(&mut rng, cfg.patch_dim(), d, true);
    let cls = (cfg.variant == Variant::VanillaCls).then(|| gaussian(&mut rng, vec![1, d], 0.5));
    let tokens = g * g + cls.is_some() as usize;
    let pos = gaussian(&mut rng, vec![tokens, d], 0.1);

    let mut blocks = Vec::new();
    let mut layer = 0;
    let mut width = d;
    match cfg.variant {
        Variant::VanillaCls | Variant::VanillaMeanpool => {
            for _ in 0..cfg.depth {
                blocks.push(attn(&mut rng, layer, d, cfg.heads, AttnPattern::Global));
                blocks.push(mlp(&mut rng, layer, d, cfg.mlp_ratio));
                layer += 1;
            }
        }
        Variant::Windowed => {
            let split = if cfg.merge { cfg.depth / 2 } else { cfg.depth };
            let mut grid = g;
            let mut heads = cfg.heads;
            for i in 0..cfg.depth {
                if i == split && cfg.merge {
                    blocks.push(Block::Merge(MergeParams {
                        grid_in: grid,
                        ln: Norm::init(&mut rng, 4 * width),
                        proj: Linear::init(&mut rng, 4 * width, 2 * width, false),
                    }));
                    grid /= 2;
                    width *= 2;
                    heads *= 2;
                }
                let local = if i >= split { i - split } else { i };
                let window = cfg.window.min(grid);
                let pattern = if window == grid && !cfg.shift {
                    AttnPattern::Window { grid, window, shifted: false }
                } else {
                    AttnPattern::Window {
                        grid,
                        window,
                        shifted: cfg.shift && local % 2 == 1 && window < grid,
                    }
                };
                blocks.push(attn(&mut rng, layer, width, heads, pattern));
                blocks.push(mlp(&mut rng, layer, width, cfg.mlp_ratio));
                layer += 1;
            }
        }
        Variant::GridBlock => {
            for i in 0..cfg.depth {
                if i % 2 == 0 {
                    blocks.push(Block::Conv(ConvParams {
                        layer,
                        grid: g,
                        dw: gaussian(&mut rng, vec![9, d], 1.0 / 3.0),
                        dw_b: gaussian(&mut rng, vec![d], 0.02),
                        pw: Linear::init(&mut rng, d, d, true),
                    }));
                    layer += 1;
                }
                let pattern = if i % 2 == 0 {
                    AttnPattern::Window { grid: g, window: cfg.window, shifted: false }
                } else {
                    AttnPattern::Grid { grid: g, window: cfg.window }
                };
                blocks.push(attn(&mut rng, layer, d, cfg.heads, pattern));
                blocks.push(mlp(&mut rng, layer, d, cfg.mlp_ratio));
                layer += 1;
            }
        }
    }
    let final_ln = Norm::init(&mut rng, width);
    Ok(Model {
        cfg: cfg.clone(),
        patch,
        cls,
        pos,
        blocks,
        final_ln,
        n_layers: layer,
    })
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub tape: Tape,
    pub z: NodeId,
}

impl Recorded {
    /// Final representation.
    pub fn z(&self) -> &[f32] {
        self.tape.node(self.z).expect("recorded output").value()
    }
}

impl Model {
    pub fn id(&self) -> String {
        self.cfg.model_id()
    }

    /// Width of the final representation.
    pub fn out_dim(&self) -> usize {
        self.final_ln.gamma.numel()
    }

    /// Spatial token grid seen by the attention layer at `back` layers from
    /// the end, and whether a class token precedes the patch tokens.
    pub fn token_grid(&self, back: usize) -> Option<(usize, bool)> {
        let fwd = self.n_layers.checked_sub(back + 1)?;
        self.blocks.iter().find_map(|b| match b {
            Block::Attention(a) if a.layer == fwd => Some(match a.pattern {
                AttnPattern::Global => (self.cfg.patch_grid, self.cls.is_some()),
                AttnPattern::Window { grid, .. } | AttnPattern::Grid { grid, .. } => (grid, false),
            }),
            _ => None,
        })
    }

    /// Attention heads per layer, indexed by forward layer.
    pub fn layer_heads(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Attention(a) => Some((a.layer, a.heads.len())),
                _ => None,
            })
            .collect()
    }

    /// Runs the forward pass on a fresh tape.
    pub fn record(&self, image: &Image) -> Result<Recorded> {
        let mut tape = Tape::new();
        let z = self.forward_taped(&mut tape, image)?;
        tape.mark_output(&z)?;
        let z = z.node().expect("recorded");
        Ok(Recorded { tape, z })
    }

    /// Records the forward pass on `tape` and returns the representation.
    ///
    /// Every attention and MLP block detaches its input, and attention
    /// weights are detached before they multiply the values.
    pub fn forward_taped(&self, tape: &mut Tape, image: &Image) -> Result<Tensor> {
        if image.size != self.cfg.image_size {
            return Err(Error::Invalid(format!(
                "model expects {}px images, got {}px",
                self.cfg.image_size, image.size
            )));
        }
        tape.set_n_layers(self.n_layers);
        tape.set_scope(Scope::Embed);
        let patches = tape.input(image.patchify(self.cfg.patch_grid)?)?;
        let mut x = tape.record(self.patch.op(), &[&patches])?;
        if let Some(cls) = &self.cls {
            let c = tape.param(cls.clone())?;
            x = tape.record(Op::Concat { axis: 0, heads: false }, &[&c, &x])?;
        }
        x = tape.record(Op::AddBias { bias: Arc::new(self.pos.clone()) }, &[&x])?;

        for block in &self.blocks {
            x = match block {
                Block::Attention(p) => {
                    tape.set_scope(Scope::Attention { layer: p.layer });
                    let xd = tape.detach(&x)?;
                    let h = tape.record(p.ln.op(), &[&xd])?;
                    let mask = p.pattern.mask().map(Arc::new);
                    let scale = 1.0 / ((p.out.din() / p.heads.len()) as f32).sqrt();
                    let mut outs = Vec::with_capacity(p.heads.len());
                    for head in &p.heads {
                        let q = tape.record(head.q.op(), &[&h])?;
                        let k = tape.record(head.k.op(), &[&h])?;
                        let v = tape.record(head.v.op(), &[&h])?;
                        let s = tape.record(Op::Scores { scale }, &[&q, &k])?;
                        let a = tape.record(Op::Softmax { mask: mask.clone() }, &[&s])?;
                        let a = tape.detach(&a)?;
                        outs.push(tape.record(Op::MatMul, &[&a, &v])?);
                    }
                    let refs: Vec<&Tensor> = outs.iter().collect();
                    let cat = tape.record(Op::Concat { axis: 1, heads: true }, &refs)?;
                    let o = tape.record(p.out.op(), &[&cat])?;
                    tape.set_scope(Scope::Glue);
                    tape.record(Op::Add, &[&x, &o])?
                }
                Block::Mlp(p) => {
                    tape.set_scope(Scope::Mlp { layer: p.layer });
                    let xd = tape.detach(&x)?;
                    let h = tape.record(p.ln.op(), &[&xd])?;
                    let u = tape.record(p.fc1.op(), &[&h])?;
                    let u = tape.record(Op::Gelu, &[&u])?;
                    let o = tape.record(p.fc2.op(), &[&u])?;
                    tape.set_scope(Scope::Glue);
                    tape.record(Op::Add, &[&x, &o])?
                }
                Block::Merge(p) => {
                    tape.set_scope(Scope::Glue);
                    let parts: Vec<Tensor> = p
                        .gathers()
                        .into_iter()
                        .map(|rows| tape.record(Op::Gather { rows: Arc::new(rows) }, &[&x]))
                        .collect::<Result<_>>()?;
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    let cat = tape.record(Op::Concat { axis: 1, heads: false }, &refs)?;
                    let h = tape.record(p.ln.op(), &[&cat])?;
                    tape.record(p.proj.op(), &[&h])?
                }
                Block::Conv(p) => {
                    tape.set_scope(Scope::Opaque {
                        layer: p.layer,
                        kind: "mbconv".into(),
                    });
                    let o = tape.record(Op::Opaque(Arc::new(p.clone())), &[&x])?;
                    tape.set_scope(Scope::Glue);
                    tape.record(Op::Add, &[&x, &o])?
                }
            };
        }
        tape.set_scope(Scope::Glue);
        let pooled = if self.cls.is_some() {
            tape.record(Op::SelectRow(0), &[&x])?
        } else {
            tape.record(Op::MeanRows, &[&x])?
        };
        let z = tape.record(self.final_ln.op(), &[&pooled])?;
        if !z.all_finite() {
            return Err(Error::NonFinite("forward pass produced non-finite output".into()));
        }
        Ok(z)
    }

    /// Visits every parameter buffer in a fixed order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        fn lin(l: &mut Linear, f: &mut dyn FnMut(&mut [f32])) {
            f(l.w.data_mut());
            if let Some(b) = &mut l.b {
                f(b.data_mut());
            }
        }
        fn norm(n: &mut Norm, f: &mut dyn FnMut(&mut [f32])) {
            f(n.gamma.data_mut());
            f(n.beta.data_mut());
        }
        lin(&mut self.patch, f);
        if let Some(c) = &mut self.cls {
            f(c.data_mut());
        }
        f(self.pos.data_mut());
        for b in &mut self.blocks {
            match b {
                Block::Attention(p) => {
                    norm(&mut p.ln, f);
                    for h in &mut p.heads {
                        lin(&mut h.q, f);
                        lin(&mut h.k, f);
                        lin(&mut h.v, f);
                    }
                    lin(&mut p.out, f);
                }
                Block::Mlp(p) => {
                    norm(&mut p.ln, f);
                    lin(&mut p.fc1, f);
                    lin(&mut p.fc2, f);
                }
                Block::Merge(p) => {
                    norm(&mut p.ln, f);
                    lin(&mut p.proj, f);
                }
                Block::Conv(p) => {
                    f(p.dw.data_mut());
                    f(p.dw_b.data_mut());
                    lin(&mut p.pw, f);
                }
            }
        }
        norm(&mut self.final_ln, f);
    }

    /// Copy with every parameter set to zero (gradient accumulator layout).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_params_mut(&mut |p| p.fill(0.0));
        z
    }
}
