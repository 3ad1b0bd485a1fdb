// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy trainer with hand-written gradients.
//!
//! Training never touches the tape: the global-attention variants have a
//! plain forward pass that caches activations and an explicit backward pass.
//! Per-image gradients are computed in parallel and summed in index order,
//! so a run is deterministic for a given seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::dataset::{SyntheticDataset, COLORS};
use super::vit::{Block, Image, Linear, Model, Norm, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor;

/// Linear classifier on the final representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `d × classes`.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            w: vec![0.0; dim * classes],
            b: vec![0.0; classes],
            dim,
            classes,
        }
    }

    pub fn logits(&self, z: &[f32]) -> Vec<f32> {
        let mut out = self.b.clone();
        for (i, &zi) in z.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.w[i * self.classes..(i + 1) * self.classes]) {
                *o += zi * w;
            }
        }
        out
    }

    /// Arg-max class; ties go to the lower index.
    pub fn predict(&self, z: &[f32]) -> usize {
        argmax(&self.logits(z))
    }

    pub fn accuracy(&self, zs: &[Vec<f32>], labels: &[usize]) -> f64 {
        if zs.is_empty() {
            return 0.0;
        }
        let hits = zs.iter().zip(labels).filter(|(z, &y)| self.predict(z) == y).count();
        hits as f64 / zs.len() as f64
    }

    fn flat_len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

const GRAD_CHUNK: usize = 8;

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy loss and its gradient with respect to the logits.
fn cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let p = tensor::softmax_rows(logits, logits.len(), None);
    let loss = -(p[label].max(1e-12)).ln();
    let mut g = p;
    g[label] -= 1.0;
    (loss, g)
}

/// Which label a training run fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Foreground,
    Background,
    /// Every (foreground, background, colour) combination is its own class.
    Joint,
}

impl Target {
    pub fn labels(self, ds: &SyntheticDataset) -> Vec<usize> {
        match self {
            Self::Foreground => ds.labels.clone(),
            Self::Background => ds.groups.clone(),
            Self::Joint => (0..ds.len())
                .map(|i| (ds.labels[i] * ds.n_groups() + ds.groups[i]) * COLORS.len() + ds.colors[i])
                .collect(),
        }
    }

    pub fn classes(self, ds: &SyntheticDataset) -> usize {
        match self {
            Self::Foreground => ds.n_classes(),
            Self::Background => ds.n_groups(),
            Self::Joint => ds.n_classes() * ds.n_groups() * COLORS.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
            target: Target::Foreground,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: Model,
    pub head: ClassifierHead,
    pub val_accuracy: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f32>,
}

// ---------------------------------------------------------------------------
// Plain forward with caches
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Vec<f32>,
    std: Vec<f32>,
}

fn ln_forward(norm: &Norm, x: &[f32], d: usize) -> (Vec<f32>, LnCache) {
    let (mean, std) = tensor::row_stats(x, d, LN_EPS);
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for r in 0..x.len() / d {
        for c in 0..d {
            let i = r * d + c;
            xhat[i] = (x[i] - mean[r]) / std[r];
            y[i] = xhat[i] * norm.gamma.data()[c] + norm.beta.data()[c];
        }
    }
    (y, LnCache { xhat, std })
}

fn ln_backward(norm: &Norm, g: &mut Norm, cache: &LnCache, dy: &[f32], d: usize) -> Vec<f32> {
    let gamma = norm.gamma.data();
    let mut dx = vec![0.0f32; dy.len()];
    for r in 0..dy.len() / d {
        let row = r * d..(r + 1) * d;
        let xh = &cache.xhat[row.clone()];
        let dyr = &dy[row.clone()];
        let mut m1 = 0.0f32;
        let mut m2 = 0.0f32;
        for c in 0..d {
            let dxh = dyr[c] * gamma[c];
            m1 += dxh;
            m2 += dxh * xh[c];
            g.gamma.data_mut()[c] += dyr[c] * xh[c];
            g.beta.data_mut()[c] += dyr[c];
        }
        m1 /= d as f32;
        m2 /= d as f32;
        for c in 0..d {
            let dxh = dyr[c] * gamma[c];
            dx[r * d + c] = (dxh - m1 - xh[c] * m2) / cache.std[r];
        }
    }
    dx
}

fn linear_backward(lin: &Linear, g: &mut Linear, x: &[f32], dy: &[f32]) -> Vec<f32> {
    let (din, dout) = (lin.din(), lin.dout());
    let rows = x.len() / din;
    let dw = tensor::matmul_at(x, rows, din, dy, dout);
    for (a, b) in g.w.data_mut().iter_mut().zip(&dw) {
        *a += b;
    }
    if let Some(gb) = &mut g.b {
        for row in dy.chunks(dout) {
            for (a, b) in gb.data_mut().iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    tensor::matmul_bt(dy, rows, dout, lin.w.data(), din)
}

struct HeadCache {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    a: Vec<f32>,
}

enum BlockCache {
    Attn {
        ln: LnCache,
        h: Vec<f32>,
        heads: Vec<HeadCache>,
        cat: Vec<f32>,
    },
    Mlp {
        ln: LnCache,
        h: Vec<f32>,
        u: Vec<f32>,
        gl: Vec<f32>,
    },
}

struct Cache {
    patches: Vec<f32>,
    blocks: Vec<BlockCache>,
    pooled_ln: LnCache,
    tokens: usize,
}

fn check_trainable(model: &Model) -> Result<()> {
    match model.cfg.variant {
        Variant::VanillaCls | Variant::VanillaMeanpool => Ok(()),
        v => Err(Error::Config(format!(
            "the toy trainer supports global-attention variants only, got {v}"
        ))),
    }
}

/// Plain forward pass; returns the representation and activation caches.
fn forward_cached(model: &Model, image: &Image) -> Result<(Vec<f32>, Cache)> {
    let d = model.cfg.dim;
    let patches = image.patchify(model.cfg.patch_grid)?.into_data();
    let emb = model.patch.apply(&patches);
    let mut x = match &model.cls {
        Some(c) => {
            let mut v = c.data().to_vec();
            v.extend_from_slice(&emb);
            v
        }
        None => emb,
    };
    for (xv, p) in x.iter_mut().zip(model.pos.data()) {
        *xv += p;
    }
    let n = x.len() / d;
    let mut caches = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        match block {
            Block::Attention(p) => {
                let (h, ln) = ln_forward(&p.ln, &x, d);
                let dh = d / p.heads.len();
                let scale = 1.0 / (dh as f32).sqrt();
                let mask = p.pattern.mask();
                let mut cat = vec![0.0f32; n * d];
                let mut heads = Vec::with_capacity(p.heads.len());
                for (hi, hp) in p.heads.iter().enumerate() {
                    let q = hp.q.apply(&h);
                    let k = hp.k.apply(&h);
                    let v = hp.v.apply(&h);
                    let mut s = tensor::matmul_bt(&q, n, dh, &k, n);
                    for e in &mut s {
                        *e *= scale;
                    }
                    let a = tensor::softmax_rows(&s, n, mask.as_deref());
                    let o = tensor::matmul(&a, n, n, &v, dh);
                    for t in 0..n {
                        cat[t * d + hi * dh..t * d + (hi + 1) * dh]
                            .copy_from_slice(&o[t * dh..(t + 1) * dh]);
                    }
                    heads.push(HeadCache { q, k, v, a });
                }
                let o = p.out.apply(&cat);
                for (xv, ov) in x.iter_mut().zip(&o) {
                    *xv += ov;
                }
                caches.push(BlockCache::Attn { ln, h, heads, cat });
            }
            Block::Mlp(p) => {
                let (h, ln) = ln_forward(&p.ln, &x, d);
                let u = p.fc1.apply(&h);
                let gl: Vec<f32> = u.iter().map(|&v| tensor::gelu(v)).collect();
                let o = p.fc2.apply(&gl);
                for (xv, ov) in x.iter_mut().zip(&o) {
                    *xv += ov;
                }
                caches.push(BlockCache::Mlp { ln, h, u, gl });
            }
            _ => return Err(Error::Config("block not supported by the toy trainer".into())),
        }
    }
    let pooled = if model.cls.is_some() {
        x[..d].to_vec()
    } else {
        let mut m = vec![0.0f32; d];
        for row in x.chunks(d) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f32);
        m
    };
    let (z, pooled_ln) = ln_forward(&model.final_ln, &pooled, d);
    Ok((
        z,
        Cache {
            patches,
            blocks: caches,
            pooled_ln,
            tokens: n,
        },
    ))
}

/// Representation from the plain forward pass (global-attention variants).
pub fn forward_plain(model: &Model, image: &Image) -> Result<Vec<f32>> {
    check_trainable(model)?;
    Ok(forward_cached(model, image)?.0)
}

/// Representation for any variant: plain pass when available, otherwise a
/// recorded pass.
pub fn represent(model: &Model, image: &Image) -> Result<Vec<f32>> {
    match model.cfg.variant {
        Variant::VanillaCls | Variant::VanillaMeanpool => forward_plain(model, image),
        _ => Ok(model.record(image)?.z().to_vec()),
    }
}

/// Representations of many images, computed in parallel.
pub fn represent_all(model: &Model, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    images.par_iter().map(|img| represent(model, img)).collect()
}

fn backward(model: &Model, g: &mut Model, cache: &Cache, dz: &[f32]) {
    let d = model.cfg.dim;
    let n = cache.tokens;
    let dpooled = ln_backward(&model.final_ln, &mut g.final_ln, &cache.pooled_ln, dz, d);
    let mut dx = vec![0.0f32; n * d];
    if model.cls.is_some() {
        dx[..d].copy_from_slice(&dpooled);
    } else {
        for row in dx.chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(&dpooled) {
                *a = b / n as f32;
            }
        }
    }
    for (bi, block) in model.blocks.iter().enumerate().rev() {
        match (block, &mut g.blocks[bi], &cache.blocks[bi]) {
            (Block::Attention(p), Block::Attention(gp), BlockCache::Attn { ln, h, heads, cat }) => {
                let dcat = linear_backward(&p.out, &mut gp.out, cat, &dx);
                let hn = p.heads.len();
                let dh = d / hn;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dh_total = vec![0.0f32; n * d];
                for hi in 0..hn {
                    let hc = &heads[hi];
                    let mut dout = vec![0.0f32; n * dh];
                    for t in 0..n {
                        dout[t * dh..(t + 1) * dh]
                            .copy_from_slice(&dcat[t * d + hi * dh..t * d + (hi + 1) * dh]);
                    }
                    // o = a v
                    let da = tensor::matmul_bt(&dout, n, dh, &hc.v, n);
                    let dv = tensor::matmul_at(&hc.a, n, n, &dout, dh);
                    // softmax
                    let mut ds = vec![0.0f32; n * n];
                    for r in 0..n {
                        let row = r * n..(r + 1) * n;
                        let dot: f32 = hc.a[row.clone()].iter().zip(&da[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in row {
                            ds[c] = hc.a[c] * (da[c] - dot) * scale;
                        }
                    }
                    let dq = tensor::matmul(&ds, n, n, &hc.k, dh);
                    let dk = tensor::matmul_at(&ds, n, n, &hc.q, dh);
                    let gh = &mut gp.heads[hi];
                    for (lin, glin, dy) in [
                        (&p.heads[hi].q, &mut gh.q, &dq),
                        (&p.heads[hi].k, &mut gh.k, &dk),
                        (&p.heads[hi].v, &mut gh.v, &dv),
                    ] {
                        let dhh = linear_backward(lin, glin, h, dy);
                        for (a, b) in dh_total.iter_mut().zip(&dhh) {
                            *a += b;
                        }
                    }
                }
                let dxin = ln_backward(&p.ln, &mut gp.ln, ln, &dh_total, d);
                for (a, b) in dx.iter_mut().zip(&dxin) {
                    *a += b;
                }
            }
            (Block::Mlp(p), Block::Mlp(gp), BlockCache::Mlp { ln, h, u, gl }) => {
                let dgl = linear_backward(&p.fc2, &mut gp.fc2, gl, &dx);
                let du: Vec<f32> = dgl.iter().zip(u).map(|(a, &b)| a * tensor::gelu_grad(b)).collect();
                let dh = linear_backward(&p.fc1, &mut gp.fc1, h, &du);
                let dxin = ln_backward(&p.ln, &mut gp.ln, ln, &dh, d);
                for (a, b) in dx.iter_mut().zip(&dxin) {
                    *a += b;
                }
            }
            _ => unreachable!("cache layout follows the block list"),
        }
    }
    // embedding
    for (a, b) in g.pos.data_mut().iter_mut().zip(&dx) {
        *a += b;
    }
    let demb = if let Some(gc) = &mut g.cls {
        for (a, b) in gc.data_mut().iter_mut().zip(&dx[..d]) {
            *a += b;
        }
        &dx[d..]
    } else {
        &dx[..]
    };
    linear_backward(&model.patch, &mut g.patch, &cache.patches, demb);
}

// ---------------------------------------------------------------------------
// Flat parameter views and Adam
// ---------------------------------------------------------------------------

/// Every trainable parameter of `model`, in a fixed visiting order.
pub fn flatten(model: &Model) -> Vec<f32> {
    let mut out = Vec::new();
    let mut m = model.clone();
    m.visit_params_mut(&mut |p| out.extend_from_slice(p));
    out
}

fn unflatten(model: &mut Model, flat: &[f32]) {
    let mut off = 0;
    model.visit_params_mut(&mut |p| {
        p.copy_from_slice(&flat[off..off + p.len()]);
        off += p.len();
    });
}

/// Inverse of [`flatten`]; fails if the length does not match.
pub fn load_params(model: &mut Model, flat: &[f32]) -> Result<()> {
    let n = flatten(model).len();
    if n != flat.len() {
        return Err(Error::Invalid(format!("expected {n} parameters, found {}", flat.len())));
    }
    unflatten(model, flat);
    Ok(())
}

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Adds one image's gradient into `g` and the head gradient buffers;
/// returns the loss.
fn accumulate_grad(
    model: &Model,
    head: &ClassifierHead,
    image: &Image,
    label: usize,
    g: &mut Model,
    ghead: &mut [f32],
) -> Result<f32> {
    let (z, cache) = forward_cached(model, image)?;
    let logits = head.logits(&z);
    let (loss, dlogits) = cross_entropy(&logits, label);
    let c = head.classes;
    let hw = head.w.len();
    let mut dz = vec![0.0f32; z.len()];
    for i in 0..z.len() {
        for k in 0..c {
            ghead[i * c + k] += z[i] * dlogits[k];
            dz[i] += head.w[i * c + k] * dlogits[k];
        }
    }
    for k in 0..c {
        ghead[hw + k] += dlogits[k];
    }
    backward(model, g, &cache, &dz);
    Ok(loss)
}

#[cfg(test)]
fn example_grad(model: &Model, head: &ClassifierHead, image: &Image, label: usize) -> Result<(f32, Vec<f32>)> {
    let mut g = model.zeros_like();
    let mut gh = vec![0.0f32; head.flat_len()];
    let loss = accumulate_grad(model, head, image, label, &mut g, &mut gh)?;
    let mut flat = flatten(&g);
    flat.extend_from_slice(&gh);
    Ok((loss, flat))
}

/// Trains `model` and a fresh linear head on the dataset's train split.
pub fn train_toy(model: &Model, ds: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_trainable(model)?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Config("dataset needs non-empty train and val splits".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let labels = cfg.target.labels(ds);
    let classes = cfg.target.classes(ds);
    let mut model = model.clone();
    let mut head = ClassifierHead::zeros(model.out_dim(), classes);
    let mut params = flatten(&model);
    let n_model = params.len();
    params.extend_from_slice(&head.w);
    params.extend_from_slice(&head.b);
    let mut adam = Adam::new(params.len(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = ds.train.clone();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            // fixed-size chunks summed in order keep the result independent
            // of the thread count
            let partials: Vec<(f32, Model, Vec<f32>)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = model.zeros_like();
                    let mut gh = vec![0.0f32; head.flat_len()];
                    let mut loss = 0.0f32;
                    for &i in chunk {
                        loss += accumulate_grad(&model, &head, &ds.images[i], labels[i], &mut g, &mut gh)?;
                    }
                    Ok((loss, g, gh))
                })
                .collect::<Result<_>>()?;
            let mut grad = Vec::with_capacity(params.len());
            let mut batch_loss = 0.0f32;
            for (k, (l, g, gh)) in partials.into_iter().enumerate() {
                batch_loss += l;
                let mut flat = flatten(&g);
                flat.extend_from_slice(&gh);
                if k == 0 {
                    grad = flat;
                } else {
                    for (a, b) in grad.iter_mut().zip(&flat) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, step {step}: loss {batch_loss}"
                )));
            }
            // cosine schedule with short warmup
            let warm = (total / 20).max(1);
            let frac = if step < warm {
                (step + 1) as f32 / warm as f32
            } else {
                0.5 * (1.0 + (std::f32::consts::PI * (step - warm) as f32 / (total - warm).max(1) as f32).cos())
            };
            adam.lr = cfg.lr * frac;
            adam.step(&mut params, &grad);
            unflatten(&mut model, &params[..n_model]);
            let hw = head.w.len();
            head.w.copy_from_slice(&params[n_model..n_model + hw]);
            head.b.copy_from_slice(&params[n_model + hw..]);
            epoch_loss += batch_loss as f64 * batch.len() as f64;
            step += 1;
        }
        curve.push((epoch_loss / order.len() as f64) as f32);
    }
    let val_imgs: Vec<&Image> = ds.val.iter().map(|&i| &ds.images[i]).collect();
    let zs = represent_all(&model, &val_imgs)?;
    let val_labels: Vec<usize> = ds.val.iter().map(|&i| labels[i]).collect();
    let val_accuracy = head.accuracy(&zs, &val_labels);
    Ok(TrainOutcome {
        model,
        head,
        val_accuracy,
        loss_curve: curve,
    })
}

/// Fits a linear head on frozen features by full-batch Adam on softmax
/// cross-entropy.
pub fn train_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    epochs: usize,
    lr: f32,
) -> Result<ClassifierHead> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.len() != labels.len() {
        return Err(Error::Invalid("probe needs matching non-empty features and labels".into()));
    }
    let mut head = ClassifierHead::zeros(dim, classes);
    let mut params = vec![0.0f32; head.flat_len()];
    let mut adam = Adam::new(params.len(), lr, 0.0);
    let hw = head.w.len();
    for _ in 0..epochs {
        let mut grad = vec![0.0f32; params.len()];
        for (z, &y) in features.iter().zip(labels) {
            let (_, dl) = cross_entropy(&head.logits(z), y);
            for i in 0..dim {
                for k in 0..classes {
                    grad[i * classes + k] += z[i] * dl[k];
                }
            }
            for k in 0..classes {
                grad[hw + k] += dl[k];
            }
        }
        let inv = 1.0 / features.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut params, &grad);
        head.w.copy_from_slice(&params[..hw]);
        head.b.copy_from_slice(&params[hw..]);
    }
    Ok(head)
}
