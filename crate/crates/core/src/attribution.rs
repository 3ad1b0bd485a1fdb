// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component–feature scores, orderings and score-gap selection.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::decompose::ComponentId;
use crate::error::{Error, Result};
use crate::models::TeacherEncoder;

/// Rows whose Gram–Schmidt residual falls below this are dropped.
pub const RANK_TOL: f64 = 1e-6;

/// Projections whose spread is below this fraction of the data scale count
/// as zero-variance.
const DEGENERATE_REL: f64 = 1e-6;

/// A feature and its instantiation embeddings in the teacher space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// One row per instantiation, width `d_ref`.
    pub b: Vec<Vec<f32>>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, labels: Vec<String>, b: Vec<Vec<f32>>) -> Result<Self> {
        let name = name.into();
        if b.is_empty() || labels.len() != b.len() {
            return Err(Error::Invalid(format!(
                "feature {name:?} needs one label per instantiation and at least one"
            )));
        }
        if b.iter().any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Invalid(format!("feature {name:?} has a zero row")));
        }
        Ok(Self { name, labels, b })
    }

    /// Feature built from the teacher's prototypes.
    pub fn from_teacher(teacher: &TeacherEncoder, feature: &str) -> Result<Self> {
        let protos = teacher.feature_prototypes(feature);
        Self::new(
            feature,
            protos.iter().map(|p| p.value.clone()).collect(),
            protos.iter().map(|p| p.vector.clone()).collect(),
        )
    }
}

/// Gram–Schmidt in row order; near-dependent rows are dropped.
pub fn orthogonalize(b: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(b.len());
    for row in b {
        let mut v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n >= RANK_TOL {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("every feature row is degenerate".into()));
    }
    Ok(out)
}

/// Result of one component–feature score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub score: f64,
    /// Columns that had zero variance and contributed 0.
    pub degenerate_columns: usize,
    pub columns: usize,
}

impl Attribution {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_columns == self.columns
    }
}

fn project(rows: &[Vec<f32>], basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            basis
                .iter()
                .map(|b| r.iter().zip(b).map(|(&x, y)| x as f64 * y).sum())
                .collect()
        })
        .collect()
}

fn rms(rows: &[Vec<f32>]) -> f64 {
    let s: f64 = rows.iter().flat_map(|r| r.iter()).map(|&v| (v as f64).powi(2)).sum();
    (s / rows.len().max(1) as f64).sqrt()
}

/// Pearson correlation; `None` if either side has (near) zero spread.
fn pearson(a: &[f64], b: &[f64], scale_a: f64, scale_b: f64) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let (sa, sb) = ((saa / n).sqrt(), (sbb / n).sqrt());
    if sa <= DEGENERATE_REL * scale_a || sb <= DEGENERATE_REL * scale_b || sa == 0.0 || sb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean over basis directions of the Pearson correlation, across images,
/// between the component's and the full representation's projections.
pub fn comp_attribute(c: &[Vec<f32>], z: &[Vec<f32>], basis: &[Vec<f64>]) -> Result<Attribution> {
    if c.len() != z.len() {
        return Err(Error::Invalid("C and Z cover different image sets".into()));
    }
    if c.len() < 3 {
        return Err(Error::Invalid(format!("need at least 3 images, got {}", c.len())));
    }
    let sc = project(c, basis);
    let sz = project(z, basis);
    let (scale_c, scale_z) = (rms(c), rms(z));
    let mut total = 0.0;
    let mut degenerate = 0;
    for k in 0..basis.len() {
        let a: Vec<f64> = sz.iter().map(|r| r[k]).collect();
        let b: Vec<f64> = sc.iter().map(|r| r[k]).collect();
        match pearson(&a, &b, scale_z, scale_c) {
            Some(r) => total += r,
            None => degenerate += 1,
        }
    }
    Ok(Attribution {
        score: total / basis.len() as f64,
        degenerate_columns: degenerate,
        columns: basis.len(),
    })
}

/// Scores of every component for every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub components: Vec<ComponentId>,
    pub features: Vec<String>,
    /// Row-major `components × features`.
    pub scores: Vec<f64>,
    /// Entries whose every column was zero-variance (scored 0).
    pub degenerate: Vec<bool>,
    pub aligner_id: String,
    pub dataset_id: String,
    pub n_images: usize,
}

impl ScoreMatrix {
    pub fn get(&self, comp: usize, feature: usize) -> f64 {
        self.scores[comp * self.features.len() + feature]
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Invalid(format!("unknown feature {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.components.len() * self.features.len();
        if self.scores.len() != n || self.degenerate.len() != n {
            return Err(Error::Invalid("score matrix shape mismatch".into()));
        }
        if self.scores.iter().any(|s| !s.is_finite() || s.abs() > 1.0 + 1e-9) {
            return Err(Error::Invalid("score outside [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }
}

/// Fills the score matrix from aligned contributions.
///
/// `aligned[img][comp]` is `f_comp(c_comp)` for one image; `Z` is their sum.
pub fn score_matrix(
    components: &[ComponentId],
    aligned: &[Vec<Vec<f32>>],
    features: &[FeatureSpec],
) -> Result<ScoreMatrix> {
    if aligned.iter().any(|a| a.len() != components.len()) {
        return Err(Error::Invalid("aligned contributions do not match the component table".into()));
    }
    let d_ref = aligned.first().and_then(|a| a.first()).map_or(0, Vec::len);
    let z: Vec<Vec<f32>> = aligned
        .iter()
        .map(|comps| {
            let mut acc = vec![0.0f64; d_ref];
            for c in comps {
                acc.iter_mut().zip(c).for_each(|(a, &v)| *a += v as f64);
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    let bases: Vec<Vec<Vec<f64>>> = features.iter().map(|f| orthogonalize(&f.b)).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..components.len())
        .flat_map(|i| (0..features.len()).map(move |p| (i, p)))
        .collect();
    let results: Vec<Attribution> = pairs
        .par_iter()
        .map(|&(i, p)| {
            let c: Vec<Vec<f32>> = aligned.iter().map(|a| a[i].clone()).collect();
            comp_attribute(&c, &z, &bases[p])
        })
        .collect::<Result<_>>()?;
    Ok(ScoreMatrix {
        components: components.to_vec(),
        features: features.iter().map(|f| f.name.clone()).collect(),
        scores: results.iter().map(|r| r.score).collect(),
        degenerate: results.iter().map(|r| r.is_degenerate()).collect(),
        aligner_id: String::new(),
        dataset_id: String::new(),
        n_images: aligned.len(),
    })
}

/// Indices sorted by descending value; ties keep ascending index.
fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Components by descending score for one feature.
pub fn component_ordering(s: &ScoreMatrix, feature: usize) -> Vec<usize> {
    let col: Vec<f64> = (0..s.components.len()).map(|i| s.get(i, feature)).collect();
    rank_desc(&col)
}

/// Features by descending score for one component.
pub fn feature_ordering(s: &ScoreMatrix, comp: usize) -> Vec<usize> {
    let row: Vec<f64> = (0..s.features.len()).map(|p| s.get(comp, p)).collect();
    rank_desc(&row)
}

/// Gap of every component for feature `p`: `min_{p' ≠ p} s_ip − s_ip'`,
/// or the gap to a single contrast feature.
pub fn gaps(s: &ScoreMatrix, feature: usize, contrast: Option<usize>) -> Result<Vec<f64>> {
    if s.features.len() < 2 {
        return Err(Error::Invalid("gap selection needs at least two features".into()));
    }
    if contrast == Some(feature) {
        return Err(Error::Invalid("contrast feature equals the target feature".into()));
    }
    Ok((0..s.components.len())
        .map(|i| {
            let own = s.get(i, feature);
            (0..s.features.len())
                .filter(|&p| p != feature && contrast.is_none_or(|c| c == p))
                .map(|p| own - s.get(i, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Top-`k` components by score gap.
pub fn select_by_gap(s: &ScoreMatrix, feature: usize, k: usize, contrast: Option<usize>) -> Result<Vec<usize>> {
    if k > s.components.len() {
        return Err(Error::Invalid(format!(
            "k = {k} exceeds the {} components",
            s.components.len()
        )));
    }
    let g = gaps(s, feature, contrast)?;
    Ok(rank_desc(&g).into_iter().take(k).collect())
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between two value vectors over the same items.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid("rankings differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("spearman needs at least two items".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let scale = 1.0;
    Ok(pearson(&ra, &rb, scale, scale).unwrap_or(0.0))
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += (x as f64).powi(2);
        bb += (y as f64).powi(2);
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Cosine-correlation proxy: for each instantiation `y`, the correlation
/// over images of `cos(f_i(c_i), y)` with `cos(z_ref, y)`, averaged over
/// instantiations.
pub fn cosine_proxy(component: &[Vec<f32>], z_ref: &[Vec<f32>], feature: &FeatureSpec) -> f64 {
    let mut total = 0.0;
    for y in &feature.b {
        let a: Vec<f64> = component.iter().map(|c| cos(c, y)).collect();
        let b: Vec<f64> = z_ref.iter().map(|z| cos(z, y)).collect();
        total += pearson(&a, &b, 1.0, 1.0).unwrap_or(0.0);
    }
    total / feature.b.len() as f64
}
