// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic foreground-on-background images.
//!
//! Each image pastes one foreground shape (the class label, drawn in one of
//! a few colours) onto one background texture (the group label). The
//! probability that a class appears on its associated background is the
//! correlation strength `ρ`; assignment is stratified per class so the
//! empirical frequency matches `ρ` up to rounding.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::vit::Image;
use crate::artifact;
use crate::error::{Error, Result};

/// Where the background texture is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Texture fills the image; the shape sits near the centre.
    Full,
    /// Texture fills the left half, the right half is neutral grey and holds
    /// the shape.
    LeftHalf,
}

pub const SHAPES: [&str; 6] = ["square", "ring", "cross", "triangle", "disc", "diamond"];
pub const BACKGROUNDS: [&str; 4] = ["water", "land", "sky", "sand"];
pub const COLORS: [&str; 3] = ["red", "yellow", "white"];
const PALETTE: [[f32; 3]; 3] = [[0.9, 0.15, 0.15], [0.95, 0.85, 0.2], [0.92, 0.92, 0.92]];

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub foregrounds: Vec<String>,
    pub backgrounds: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    /// Probability that a training image of class `c` sits on background
    /// `c mod n_backgrounds`.
    pub rho_train: f64,
    pub rho_val: f64,
    pub image_size: usize,
    pub layout: Layout,
    /// Per-pixel Gaussian noise.
    pub noise: f32,
}

impl DatasetSpec {
    /// `n_fg` shapes on `n_bg` backgrounds with the given correlations.
    pub fn new(n_fg: usize, n_bg: usize, rho_train: f64, rho_val: f64) -> Self {
        Self {
            foregrounds: SHAPES.iter().take(n_fg).map(|s| s.to_string()).collect(),
            backgrounds: BACKGROUNDS.iter().take(n_bg).map(|s| s.to_string()).collect(),
            n_train: 1600,
            n_val: 400,
            rho_train,
            rho_val,
            image_size: 32,
            layout: Layout::Full,
            noise: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.foregrounds.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config("empty class lists".into()));
        }
        for f in &self.foregrounds {
            if !SHAPES.contains(&f.as_str()) {
                return Err(Error::Config(format!("unknown foreground {f:?}")));
            }
        }
        for b in &self.backgrounds {
            if !BACKGROUNDS.contains(&b.as_str()) {
                return Err(Error::Config(format!("unknown background {b:?}")));
            }
        }
        for rho in [self.rho_train, self.rho_val] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("correlation {rho} outside [0, 1]")));
            }
        }
        if self.image_size < 16 {
            return Err(Error::Config("images must be at least 16px".into()));
        }
        Ok(())
    }
}

/// Generated images with labels, groups and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub images: Vec<Image>,
    /// Foreground class per image.
    pub labels: Vec<usize>,
    /// Background class per image.
    pub groups: Vec<usize>,
    /// Foreground colour per image.
    pub colors: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    seed: u64,
    n_images: usize,
    image_size: usize,
    labels: Vec<usize>,
    groups: Vec<usize>,
    colors: Vec<usize>,
    train: Vec<usize>,
    val: Vec<usize>,
}

/// Stratified class/background assignment for one split.
fn assign(n: usize, n_fg: usize, n_bg: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n);
    for c in 0..n_fg {
        let count = n / n_fg + usize::from(c < n % n_fg);
        let assoc = c % n_bg;
        let majority = if n_bg == 1 { count } else { (rho * count as f64).round() as usize };
        for i in 0..count {
            let b = if i < majority {
                assoc
            } else {
                let k = (i - majority) % (n_bg - 1);
                (assoc + 1 + k) % n_bg
            };
            out.push((c, b));
        }
    }
    out.shuffle(rng);
    out
}

/// Generates a dataset; identical `(spec, seed)` give identical datasets.
pub fn gen_synthetic(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_fg, n_bg) = (spec.foregrounds.len(), spec.backgrounds.len());
    let mut plan = assign(spec.n_train, n_fg, n_bg, spec.rho_train, &mut rng);
    plan.extend(assign(spec.n_val, n_fg, n_bg, spec.rho_val, &mut rng));

    let shape_ids: Vec<usize> = spec
        .foregrounds
        .iter()
        .map(|f| SHAPES.iter().position(|s| s == f).expect("validated"))
        .collect();
    let bg_ids: Vec<usize> = spec
        .backgrounds
        .iter()
        .map(|b| BACKGROUNDS.iter().position(|s| s == b).expect("validated"))
        .collect();

    let mut images = Vec::with_capacity(plan.len());
    let mut labels = Vec::with_capacity(plan.len());
    let mut groups = Vec::with_capacity(plan.len());
    let mut colors = Vec::with_capacity(plan.len());
    for &(c, b) in &plan {
        let color = rng.random_range(0..PALETTE.len());
        let img_seed: u64 = rng.random();
        let mut irng = ChaCha8Rng::seed_from_u64(img_seed);
        images.push(render(spec, shape_ids[c], bg_ids[b], color, &mut irng));
        labels.push(c);
        groups.push(b);
        colors.push(color);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        images,
        labels,
        groups,
        colors,
        train: (0..spec.n_train).collect(),
        val: (spec.n_train..spec.n_train + spec.n_val).collect(),
    })
}

fn background(kind: usize, y: f32, x: f32, phase: f32, blobs: &[(f32, f32, f32)]) -> [f32; 3] {
    match kind {
        // water: blue with horizontal waves
        0 => {
            let w = 0.12 * (2.0 * PI * y / 6.0 + phase + 0.6 * (x / 5.0).sin()).sin();
            [0.12 + w * 0.5, 0.32 + w, 0.72 + w]
        }
        // land: green with brown blotches
        1 => {
            let mut m = 0.0f32;
            for &(by, bx, r) in blobs {
                let d2 = (y - by).powi(2) + (x - bx).powi(2);
                m += (-d2 / (2.0 * r * r)).exp();
            }
            let m = m.min(1.0);
            [0.3 + 0.25 * m, 0.5 - 0.15 * m, 0.18 - 0.03 * m]
        }
        // sky: pale vertical gradient
        2 => {
            let t = y / 32.0;
            [0.6 + 0.2 * t, 0.72 + 0.15 * t, 0.95 - 0.05 * t]
        }
        // sand: yellow with sparse dots
        _ => {
            let dot = ((y * 0.9 + phase).sin() * (x * 1.1 + phase).sin()).max(0.0).powi(8);
            [0.85 - 0.3 * dot, 0.74 - 0.3 * dot, 0.45 - 0.2 * dot]
        }
    }
}

fn inside(shape: usize, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        0 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        1 => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= r && d >= r * 0.55
        }
        2 => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
        3 => {
            // apex up
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        4 => dy * dy + dx * dx <= r * r,
        _ => dy.abs() + dx.abs() <= r,
    }
}

fn render(spec: &DatasetSpec, shape: usize, bg: usize, color: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = spec.image_size;
    let sf = s as f32;
    let phase = rng.random_range(0.0..2.0 * PI);
    let blobs: Vec<(f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..sf),
                rng.random_range(0.0..sf),
                rng.random_range(2.5..5.0),
            )
        })
        .collect();
    let radius = sf * rng.random_range(0.24..0.32);
    let (cy, cx) = match spec.layout {
        Layout::Full => (
            sf / 2.0 + rng.random_range(-0.08..0.08) * sf,
            sf / 2.0 + rng.random_range(-0.08..0.08) * sf,
        ),
        Layout::LeftHalf => (sf / 2.0 + rng.random_range(-0.08..0.08) * sf, sf * 0.75),
    };
    let radius = match spec.layout {
        Layout::Full => radius,
        Layout::LeftHalf => radius.min(sf * 0.22),
    };
    let brightness = rng.random_range(0.9..1.1);
    let fg = PALETTE[color];
    let noise = Normal::new(0.0f32, spec.noise.max(1e-9)).expect("valid noise");
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut px = match spec.layout {
                Layout::LeftHalf if x >= s / 2 => [0.5, 0.5, 0.5],
                _ => background(bg, yf, xf, phase, &blobs).map(|v| v * brightness),
            };
            if inside(shape, yf - cy, xf - cx, radius) {
                px = fg;
            }
            for v in px {
                let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((v + n).clamp(0.0, 1.0));
            }
        }
    }
    Image { size: s, data }
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.foregrounds.len()
    }

    pub fn n_groups(&self) -> usize {
        self.spec.backgrounds.len()
    }

    /// Writes `images.f32` (little-endian) and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.len() * self.spec.image_size.pow(2) * 12);
        for img in &self.images {
            for v in &img.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        artifact::write_atomic(&dir.join("images.f32"), &blob)?;
        let manifest = Manifest {
            spec: self.spec.clone(),
            seed: self.seed,
            n_images: self.len(),
            image_size: self.spec.image_size,
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            colors: self.colors.clone(),
            train: self.train.clone(),
            val: self.val.clone(),
        };
        artifact::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads and validates a dataset written by [`SyntheticDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Artifact {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let blob = fs::read(dir.join("images.f32"))?;
        let per = manifest.image_size * manifest.image_size * 3;
        if blob.len() != manifest.n_images * per * 4 {
            return Err(bad(format!(
                "image blob has {} bytes, expected {}",
                blob.len(),
                manifest.n_images * per * 4
            )));
        }
        let n = manifest.n_images;
        if manifest.labels.len() != n || manifest.groups.len() != n || manifest.colors.len() != n {
            return Err(bad("label arrays do not match image count".into()));
        }
        if manifest.train.iter().chain(&manifest.val).any(|&i| i >= n) {
            return Err(bad("split index out of range".into()));
        }
        let floats = artifact::f32_from_le(&blob);
        let images = floats
            .chunks(per)
            .map(|c| Image::new(manifest.image_size, c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: manifest.spec,
            seed: manifest.seed,
            images,
            labels: manifest.labels,
            groups: manifest.groups,
            colors: manifest.colors,
            train: manifest.train,
            val: manifest.val,
        })
    }
}

/// Pearson chi-square test of independence between two label arrays.
/// Returns `(statistic, p_value)`.
pub fn chi_square_independence(a: &[usize], b: &[usize]) -> (f64, f64) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0f64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let n = a.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let e = rows[i] * cols[j] / n;
            if e > 0.0 {
                stat += (table[i][j] - e).powi(2) / e;
            }
        }
    }
    let dof = ((ka.max(2) - 1) * (kb.max(2) - 1)) as f64;
    let p = 1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat);
    (stat, p)
}
