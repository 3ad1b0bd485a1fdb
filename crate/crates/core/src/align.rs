// SPDX-License-Identifier: MIT OR Apache-2.0

//! CompAlign: per-component linear maps into the teacher space.
//!
//! Each component `i` gets a map `f_i` (a `d_ref × d` matrix) trained so that
//! `Σ_i f_i(c_i)` points along the teacher representation `z_ref`. The loss
//! is `mean(1 − cos(Σ_i f_i c_i, z_ref)) + λ Σ_i ‖f_iᵀ f_i − I‖_F` and its
//! gradient is computed in closed form.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decompose::{ComponentId, Decomposition, Granularity};
use crate::error::{Error, Result};

/// Samples with `‖Σ f_i c_i‖` below this are skipped.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Dense row-major matrix in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// `self · x` for a vector `x` of length `cols`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// `selfᵀ · self` (`cols × cols`).
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = &self.data[r * n..(r + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    g.data[i * n + j] += row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Random matrix with orthonormal columns (or rows, if wider than tall),
    /// from modified Gram–Schmidt on a Gaussian draw.
    pub fn random_orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let tall = rows >= cols;
        let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
        // k vectors of length n
        let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
        while vs.len() < k {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for u in &vs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                vs.push(v);
            }
        }
        if tall {
            Self::from_fn(rows, cols, |r, c| vs[c][r])
        } else {
            Self::from_fn(rows, cols, |r, c| vs[r][c])
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Training set for the aligner: `n` samples of `n_comp` contributions of
/// width `d`, each paired with a reference vector of width `d_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignData {
    pub components: Vec<ComponentId>,
    pub n: usize,
    pub d: usize,
    pub d_ref: usize,
    /// `n × n_comp × d`.
    pub c: Vec<f64>,
    /// `n × d_ref`.
    pub z_ref: Vec<f64>,
}

impl AlignData {
    pub fn n_comp(&self) -> usize {
        self.components.len()
    }

    pub fn contribution(&self, sample: usize, comp: usize) -> &[f64] {
        let off = (sample * self.n_comp() + comp) * self.d;
        &self.c[off..off + self.d]
    }

    pub fn reference(&self, sample: usize) -> &[f64] {
        &self.z_ref[sample * self.d_ref..(sample + 1) * self.d_ref]
    }

    /// Builds the training set from component-granularity decompositions.
    pub fn from_decompositions(decs: &[Decomposition], z_ref: &[Vec<f32>]) -> Result<Self> {
        let first = decs
            .first()
            .ok_or_else(|| Error::Invalid("no decompositions to align".into()))?;
        if decs.len() != z_ref.len() {
            return Err(Error::Invalid(format!(
                "{} decompositions but {} reference vectors",
                decs.len(),
                z_ref.len()
            )));
        }
        let components = component_table(first)?;
        let d = first.dim();
        let d_ref = z_ref[0].len();
        let mut c = Vec::with_capacity(decs.len() * components.len() * d);
        for dec in decs {
            if component_table(dec)? != components {
                return Err(Error::Invalid(format!(
                    "decomposition of {} has a different component table",
                    dec.model_id
                )));
            }
            for id in &components {
                let v = dec.component_vector(id).expect("component present");
                c.extend(v.iter().map(|&x| x as f64));
            }
        }
        let mut z = Vec::with_capacity(decs.len() * d_ref);
        for r in z_ref {
            if r.len() != d_ref {
                return Err(Error::Invalid("reference vectors differ in width".into()));
            }
            z.extend(r.iter().map(|&x| x as f64));
        }
        Ok(Self {
            components,
            n: decs.len(),
            d,
            d_ref,
            c,
            z_ref: z,
        })
    }
}

/// Distinct components of a component-granularity decomposition, in order.
pub fn component_table(dec: &Decomposition) -> Result<Vec<ComponentId>> {
    match dec.granularity {
        Granularity::Component | Granularity::ComponentToken => Ok(dec.components()),
        g => Err(Error::Invalid(format!("alignment needs per-component contributions, got {g}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTrainConfig {
    pub learning_rate: f64,
    /// Regularizer weight; `None` means `1 / d_ref`.
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share one map across all components.
    pub tied: bool,
    /// Drop the regularizer entirely (loss trace has no penalty term).
    pub ignore_lambda: bool,
    /// Fraction of the epochs over which the regularizer weight ramps
    /// linearly from 0 up to `lambda`.
    #[serde(default)]
    pub lambda_warmup: f64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            lambda: None,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            tied: false,
            ignore_lambda: false,
            lambda_warmup: 0.5,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup) {
            return Err(Error::Config("lambda warm-up must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Regularizer weight used during `epoch`.
    pub fn lambda_at(&self, d_ref: usize, epoch: usize) -> f64 {
        let ramp = self.lambda_warmup * self.epochs as f64;
        let scale = if ramp > 0.0 { ((epoch + 1) as f64 / ramp).min(1.0) } else { 1.0 };
        self.effective_lambda(d_ref) * scale
    }

    pub fn effective_lambda(&self, d_ref: usize) -> f64 {
        if self.ignore_lambda {
            0.0
        } else {
            self.lambda.unwrap_or(1.0 / d_ref as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignLog {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Penalty term per epoch (empty when the regularizer is ignored).
    pub penalty_curve: Vec<f64>,
    pub final_cos_distance: Option<f64>,
    pub skipped: usize,
    /// Set when training stopped on a non-finite loss; the maps are the last
    /// good ones.
    pub aborted: Option<String>,
}

/// Trained per-component maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aligner {
    pub components: Vec<ComponentId>,
    pub d: usize,
    pub d_ref: usize,
    pub lambda: f64,
    pub tied: bool,
    pub seed: u64,
    /// One map per component, or a single shared map when tied.
    pub maps: Vec<Mat>,
    pub log: AlignLog,
}

impl Aligner {
    /// Aligner with the given maps and an empty log.
    pub fn from_maps(components: Vec<ComponentId>, maps: Vec<Mat>, lambda: f64) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Invalid("no maps".into()))?;
        let (d_ref, d) = (first.rows, first.cols);
        if maps.iter().any(|m| m.rows != d_ref || m.cols != d) {
            return Err(Error::Invalid("maps differ in shape".into()));
        }
        let tied = maps.len() == 1 && components.len() != 1;
        if !tied && maps.len() != components.len() {
            return Err(Error::Invalid(format!(
                "{} maps for {} components",
                maps.len(),
                components.len()
            )));
        }
        Ok(Self {
            components,
            d,
            d_ref,
            lambda,
            tied,
            seed: 0,
            maps,
            log: AlignLog {
                loss_curve: Vec::new(),
                penalty_curve: Vec::new(),
                final_cos_distance: None,
                skipped: 0,
                aborted: None,
            },
        })
    }

    pub fn map(&self, comp: usize) -> &Mat {
        if self.tied {
            &self.maps[0]
        } else {
            &self.maps[comp]
        }
    }

    pub fn index_of(&self, id: &ComponentId) -> Option<usize> {
        self.components.iter().position(|c| c == id)
    }

    /// `f_i(c)` in the teacher space.
    pub fn apply(&self, comp: usize, c: &[f32]) -> Vec<f32> {
        let x: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        self.map(comp).apply(&x).into_iter().map(|v| v as f32).collect()
    }

    /// `f_i(c)` for a component id.
    pub fn apply_id(&self, id: &ComponentId, c: &[f32]) -> Result<Vec<f32>> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Invalid(format!("aligner has no map for {id}")))?;
        Ok(self.apply(i, c))
    }

    /// Aligned contribution of every component of `dec`, in table order.
    pub fn align_decomposition(&self, dec: &Decomposition) -> Result<Vec<Vec<f32>>> {
        if component_table(dec)? != self.components {
            return Err(Error::Invalid(
                "decomposition does not match the aligner's component table".into(),
            ));
        }
        Ok(self
            .components
            .iter()
            .enumerate()
            .map(|(i, id)| self.apply(i, &dec.component_vector(id).expect("present")))
            .collect())
    }

    /// Checks the shape invariants after loading.
    pub fn validate(&self) -> Result<()> {
        let expected = if self.tied { 1 } else { self.components.len() };
        if self.maps.len() != expected {
            return Err(Error::Invalid(format!("expected {expected} maps, found {}", self.maps.len())));
        }
        for m in &self.maps {
            if m.rows != self.d_ref || m.cols != self.d || m.data.len() != m.rows * m.cols {
                return Err(Error::Invalid("map shape does not match d_ref × d".into()));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("aligner map has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Mean cosine distance between `Σ f_i c_i` and `z_ref` (degenerate
    /// samples skipped).
    pub fn cos_distance(&self, data: &AlignData) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in 0..data.n {
            let sum = self.summed(data, s);
            let (ns, nz) = (norm(&sum), norm(data.reference(s)));
            if ns < DEGENERATE_NORM || nz == 0.0 {
                continue;
            }
            total += 1.0 - dot(&sum, data.reference(s)) / (ns * nz);
            count += 1;
        }
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        }
    }

    fn summed(&self, data: &AlignData, s: usize) -> Vec<f64> {
        let mut sum = vec![0.0; self.d_ref];
        for i in 0..data.n_comp() {
            for (a, b) in sum.iter_mut().zip(self.map(i).apply(data.contribution(s, i))) {
                *a += b;
            }
        }
        sum
    }
}

/// `‖FᵀF − I‖_F`.
pub fn orthogonality_penalty(f: &Mat) -> f64 {
    let mut g = f.gram();
    for i in 0..g.rows {
        g.data[i * g.cols + i] -= 1.0;
    }
    g.frobenius()
}

/// Loss value, gradient per map, and number of skipped samples.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub penalty: f64,
    pub grads: Vec<Mat>,
    pub skipped: usize,
}

/// Loss and closed-form gradient over the samples in `batch`.
///
/// `maps` holds one matrix per component, or one shared matrix when `tied`.
pub fn loss_and_grad(maps: &[Mat], data: &AlignData, batch: &[usize], lambda: f64, tied: bool) -> LossEval {
    let pick = |i: usize| if tied { 0 } else { i };
    let mut grads: Vec<Mat> = maps.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &s in batch {
        let mut sum = vec![0.0; data.d_ref];
        for i in 0..data.n_comp() {
            for (a, b) in sum.iter_mut().zip(maps[pick(i)].apply(data.contribution(s, i))) {
                *a += b;
            }
        }
        let z = data.reference(s);
        let (ns, nz) = (norm(&sum), norm(z));
        if ns < DEGENERATE_NORM || nz == 0.0 {
            skipped += 1;
            continue;
        }
        let cos = dot(&sum, z) / (ns * nz);
        loss += 1.0 - cos;
        used += 1;
        // d(1 − cos)/d sum
        let g: Vec<f64> = sum
            .iter()
            .zip(z)
            .map(|(&sv, &zv)| -(zv / (ns * nz) - cos * sv / (ns * ns)))
            .collect();
        for i in 0..data.n_comp() {
            let c = data.contribution(s, i);
            let gm = &mut grads[pick(i)];
            for r in 0..data.d_ref {
                let row = &mut gm.data[r * data.d..(r + 1) * data.d];
                for (o, cv) in row.iter_mut().zip(c) {
                    *o += g[r] * cv;
                }
            }
        }
    }
    if used > 0 {
        loss /= used as f64;
        for gm in &mut grads {
            gm.data.iter_mut().for_each(|v| *v /= used as f64);
        }
    }
    let mut penalty = 0.0;
    if lambda > 0.0 {
        for (f, gm) in maps.iter().zip(&mut grads) {
            let mut m = f.gram();
            for i in 0..m.rows {
                m.data[i * m.cols + i] -= 1.0;
            }
            let p = m.frobenius();
            penalty += p;
            if p > 0.0 {
                // d‖FᵀF − I‖/dF = 2 F M / ‖M‖
                let n = f.cols;
                for r in 0..f.rows {
                    let frow = &f.data[r * n..(r + 1) * n];
                    for j in 0..n {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += frow[k] * m.data[k * n + j];
                        }
                        gm.data[r * n + j] += lambda * 2.0 * acc / p;
                    }
                }
            }
        }
    }
    LossEval {
        loss: loss + lambda * penalty,
        penalty,
        grads,
        skipped,
    }
}

/// Full-dataset loss of an aligner.
pub fn align_loss(aligner: &Aligner, data: &AlignData) -> Result<f64> {
    if data.components != aligner.components || data.d != aligner.d || data.d_ref != aligner.d_ref {
        return Err(Error::Invalid("batch does not match the aligner's component table".into()));
    }
    let all: Vec<usize> = (0..data.n).collect();
    Ok(loss_and_grad(&aligner.maps, data, &all, aligner.lambda, aligner.tied).loss)
}

struct Adam64 {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam64 {
    fn step(&mut self, maps: &mut [Mat], grads: &[Mat], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for (k, (f, g)) in maps.iter_mut().zip(grads).enumerate() {
            for i in 0..f.data.len() {
                let gi = g.data[i];
                self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * gi;
                self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * gi * gi;
                f.data[i] -= lr * (self.m[k][i] / bc1) / ((self.v[k][i] / bc2).sqrt() + 1e-8);
            }
        }
    }
}

/// Trains per-component maps (or one shared map when `cfg.tied`).
pub fn train_compalign(data: &AlignData, cfg: &AlignTrainConfig) -> Result<Aligner> {
    cfg.validate()?;
    if data.n == 0 || data.n_comp() == 0 {
        return Err(Error::Invalid("empty alignment data".into()));
    }
    let lambda = cfg.effective_lambda(data.d_ref);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_maps = if cfg.tied { 1 } else { data.n_comp() };
    let mut maps: Vec<Mat> = (0..n_maps)
        .map(|_| Mat::random_orthogonal(data.d_ref, data.d, &mut rng))
        .collect();
    let mut adam = Adam64 {
        m: maps.iter().map(|m| vec![0.0; m.data.len()]).collect(),
        v: maps.iter().map(|m| vec![0.0; m.data.len()]).collect(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut penalty_curve = Vec::new();
    let mut skipped = 0;
    let mut aborted = None;
    let mut last_good = maps.clone();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pen = 0.0;
        let mut batches = 0usize;
        skipped = 0;
        let lambda_now = cfg.lambda_at(data.d_ref, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let eval = loss_and_grad(&maps, data, batch, lambda_now, cfg.tied);
            if !eval.loss.is_finite() || eval.grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                aborted = Some(format!("non-finite loss at epoch {epoch}, batch {batches}"));
                maps = last_good.clone();
                break 'epochs;
            }
            last_good.clone_from(&maps);
            total += eval.loss;
            pen += eval.penalty;
            skipped += eval.skipped;
            batches += 1;
            adam.step(&mut maps, &eval.grads, cfg.learning_rate);
        }
        loss_curve.push(total / batches.max(1) as f64);
        if lambda > 0.0 {
            penalty_curve.push(pen / batches.max(1) as f64);
        }
    }
    let mut aligner = Aligner {
        components: data.components.clone(),
        d: data.d,
        d_ref: data.d_ref,
        lambda,
        tied: cfg.tied && data.n_comp() > 1,
        seed: cfg.seed,
        maps,
        log: AlignLog {
            loss_curve,
            penalty_curve,
            final_cos_distance: None,
            skipped,
            aborted,
        },
    };
    if cfg.tied && data.n_comp() == 1 {
        aligner.tied = false;
    }
    aligner.log.final_cos_distance = Some(aligner.cos_distance(data));
    Ok(aligner)
}

/// [`train_compalign`] with all maps tied to one.
pub fn single_map_baseline(data: &AlignData, cfg: &AlignTrainConfig) -> Result<Aligner> {
    train_compalign(data, &AlignTrainConfig { tied: true, ..cfg.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoRow {
    pub component: ComponentId,
    /// `‖FᵀF − I‖_F`.
    pub deviation: f64,
    /// Best scalar `k = trace(FᵀF) / d`.
    pub k: f64,
    /// `‖FᵀF − kI‖_F / ‖kI‖_F`.
    pub relative_deviation: f64,
}

/// Best-fit `k` and deviations of one map.
pub fn ortho_stats(f: &Mat) -> (f64, f64, f64) {
    let g = f.gram();
    let n = g.rows;
    let k = (0..n).map(|i| g.data[i * n + i]).sum::<f64>() / n as f64;
    let mut dev_i = 0.0;
    let mut dev_k = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = g.data[i * n + j];
            let id = if i == j { 1.0 } else { 0.0 };
            dev_i += (v - id).powi(2);
            dev_k += (v - k * id).powi(2);
        }
    }
    let rel = if k == 0.0 { f64::INFINITY } else { dev_k.sqrt() / (k.abs() * (n as f64).sqrt()) };
    (dev_i.sqrt(), k, rel)
}

pub fn orthogonality_report(aligner: &Aligner) -> Vec<OrthoRow> {
    aligner
        .components
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (deviation, k, relative_deviation) = ortho_stats(aligner.map(i));
            OrthoRow {
                component: id.clone(),
                deviation,
                k,
                relative_deviation,
            }
        })
        .collect()
}

fn random_pair(d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || {
        let scale: f64 = rng.random_range(0.1..3.0);
        (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()
    };
    (draw(), draw())
}

/// Intra-component rank-ordering violations of `f` over random pairs:
/// `‖u‖ ≤ ‖v‖` but `‖f(u)‖ > ‖f(v)‖ + tol`.
pub fn check_rank_ordering(f: &Mat, trials: usize, tol: f64, seed: u64) -> usize {
    check_rank_ordering_between(f, f, trials, tol, seed)
}

/// Inter-component variant: pairs are pushed through `f` and `g`
/// respectively, in both assignments.
pub fn check_rank_ordering_between(f: &Mat, g: &Mat, trials: usize, tol: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..trials {
        let (mut u, mut v) = random_pair(f.cols, &mut rng);
        if norm(&u) > norm(&v) {
            std::mem::swap(&mut u, &mut v);
        }
        let violates = |a: &Mat, b: &Mat| norm(&a.apply(&u)) > norm(&b.apply(&v)) + tol;
        if violates(f, g) || violates(g, f) {
            violations += 1;
        }
    }
    violations
}

/// Counts violations on explicitly given pairs.
pub fn count_violations(f: &Mat, pairs: &[(Vec<f64>, Vec<f64>)], tol: f64) -> usize {
    pairs
        .iter()
        .filter(|(u, v)| norm(u) <= norm(v) && norm(&f.apply(u)) > norm(&f.apply(v)) + tol)
        .count()
}

/// Cosine similarity in `f64`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_from(components: usize, d: usize, n: usize, maps: &[Mat], seed: u64) -> AlignData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Vec::new();
        let mut z = Vec::new();
        for _ in 0..n {
            let mut sum = vec![0.0; maps[0].rows];
            for i in 0..components {
                let ci: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                for (a, b) in sum.iter_mut().zip(maps[i.min(maps.len() - 1)].apply(&ci)) {
                    *a += b;
                }
                c.extend(ci);
            }
            z.extend(sum);
        }
        AlignData {
            components: (0..components).map(|h| ComponentId::Head(0, h)).collect(),
            n,
            d,
            d_ref: maps[0].rows,
            c,
            z_ref: z,
        }
    }

    #[test]
    fn identity_maps_on_exact_sum_give_zero_loss() {
        let d = 4;
        let maps = vec![Mat::identity(d); 3];
        let data = data_from(3, d, 20, &maps, 1);
        let eval = loss_and_grad(&maps, &data, &(0..20).collect::<Vec<_>>(), 0.0, false);
        assert!(eval.loss.abs() < 1e-12);
        let eval = loss_and_grad(&maps, &data, &(0..20).collect::<Vec<_>>(), 0.5, false);
        assert!(eval.penalty.abs() < 1e-12);
    }

    #[test]
    fn doubled_identity_penalty_is_three_root_d() {
        let d = 5;
        let f = Mat::identity(d).scaled(2.0);
        assert!((orthogonality_penalty(&f) - 3.0 * (d as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scaled_orthogonal_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Mat::random_orthogonal(6, 6, &mut rng);
        let (dev, k, rel) = ortho_stats(&q);
        assert!(dev < 1e-10 && (k - 1.0).abs() < 1e-10 && rel < 1e-10);
        let (dev, k, rel) = ortho_stats(&q.scaled(3.0));
        assert!((dev - 8.0 * 6f64.sqrt()).abs() < 1e-9);
        assert!((k - 9.0).abs() < 1e-9);
        assert!(rel < 1e-10);
        let g = Mat::from_fn(32, 32, |_, _| rng.sample(StandardNormal));
        assert!(ortho_stats(&g).0 > 0.0);
    }

    #[test]
    fn diagonal_counterexample_violates() {
        let f = Mat::from_fn(2, 2, |r, c| if r != c { 0.0 } else if r == 0 { 1.0 } else { 10.0 });
        let pairs = vec![(vec![0.0, 1.0], vec![1.01, 0.0])];
        assert_eq!(count_violations(&f, &pairs, 1e-6), 1);
        let pairs = vec![(vec![1.0, 0.0], vec![0.0, 1.01])];
        assert_eq!(count_violations(&f, &pairs, 1e-6), 0);
    }

    #[test]
    fn differently_scaled_maps_break_inter_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Mat::random_orthogonal(8, 8, &mut rng);
        let q2 = Mat::random_orthogonal(8, 8, &mut rng).scaled(2.0);
        assert_eq!(check_rank_ordering(&q.scaled(1.7), 2000, 1e-6, 0), 0);
        assert!(check_rank_ordering_between(&q, &q2, 2000, 1e-6, 0) > 0);
    }

    #[test]
    fn tying_is_vacuous_for_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Mat::random_orthogonal(6, 6, &mut rng);
        let data = data_from(1, 6, 200, &[r], 7);
        let cfg = AlignTrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let a = train_compalign(&data, &cfg).unwrap();
        let b = single_map_baseline(&data, &cfg).unwrap();
        assert_eq!(a.maps, b.maps);
        assert_eq!(a.log.loss_curve, b.log.loss_curve);
    }

    #[test]
    fn ignored_lambda_leaves_no_penalty_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<Mat> = (0..2).map(|_| Mat::random_orthogonal(4, 4, &mut rng)).collect();
        let data = data_from(2, 4, 50, &maps, 9);
        let cfg = AlignTrainConfig {
            epochs: 2,
            ignore_lambda: true,
            tied: true,
            ..Default::default()
        };
        let a = train_compalign(&data, &cfg).unwrap();
        assert!(a.log.penalty_curve.is_empty());
        assert_eq!(a.lambda, 0.0);
    }

    #[test]
    fn zero_sum_sample_is_skipped() {
        let d = 3;
        let maps = vec![Mat::identity(d); 2];
        let data = AlignData {
            components: vec![ComponentId::Init, ComponentId::Mlp(0)],
            n: 2,
            d,
            d_ref: d,
            c: vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0, 0.0],
            z_ref: vec![1.0, 0.0, 0.0, 1.0, 3.0, 0.0],
        };
        let eval = loss_and_grad(&maps, &data, &[0, 1], 0.0, false);
        assert_eq!(eval.skipped, 1);
        assert!(eval.loss.abs() < 1e-12);
    }

    #[test]
    fn bad_config_is_rejected() {
        let bad = AlignTrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignTrainConfig {
            lambda: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
