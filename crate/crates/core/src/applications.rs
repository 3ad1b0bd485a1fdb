// SPDX-License-Identifier: MIT OR Apache-2.0

//! Downstream uses of decomposed representations: feature-vector and
//! reference-image retrieval, token heatmaps, mean ablation, ablation
//! curves and spurious-feature mitigation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::Aligner;
use crate::artifact::write_atomic;
use crate::attribution::{select_by_gap, ScoreMatrix};
use crate::decompose::{ComponentId, Decomposition};
use crate::error::{Error, Result};
use crate::models::{ClassifierHead, Model};

/// Similarities below this are treated as zero when deciding whether a
/// ranking carries any information.
pub const UNINFORMATIVE: f64 = 1e-6;

/// Ranked images for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    /// `(image, similarity)` sorted by descending similarity.
    pub ranked: Vec<(usize, f64)>,
    pub components: Vec<ComponentId>,
    /// Images whose summed contribution had zero norm.
    pub excluded: Vec<usize>,
    /// Every similarity is numerically zero.
    pub uninformative: bool,
}

impl RetrievalResult {
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.ranked.iter().take(k).map(|&(i, _)| i).collect()
    }
}

/// Per-image component vectors `[image][component]`, in `components` order.
pub fn component_matrix(decs: &[Decomposition], components: &[ComponentId]) -> Result<Vec<Vec<Vec<f32>>>> {
    decs.iter()
        .map(|dec| {
            components
                .iter()
                .map(|id| {
                    dec.component_vector(id)
                        .ok_or_else(|| Error::Invalid(format!("decomposition has no component {id}")))
                })
                .collect()
        })
        .collect()
}

fn sum_selected(vectors: &[Vec<f32>], selected: &[usize]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; d];
    for &i in selected {
        for (a, &v) in acc.iter_mut().zip(&vectors[i]) {
            *a += v as f64;
        }
    }
    acc
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_selection(selected: &[usize], n: usize) -> Result<()> {
    if selected.is_empty() {
        return Err(Error::Invalid("no components selected".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("component index {bad} out of range ({n} components)")));
    }
    Ok(())
}

fn rank(query: String, components: Vec<ComponentId>, sims: Vec<(usize, f64)>, excluded: Vec<usize>, k: usize) -> RetrievalResult {
    let mut ranked = sims;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let uninformative = ranked.iter().all(|(_, s)| s.abs() < UNINFORMATIVE);
    ranked.truncate(k);
    RetrievalResult {
        query,
        ranked,
        components,
        excluded,
        uninformative,
    }
}

/// Ranks images by `cos(Σ_{i∈selected} f_i(c_i), u)`.
///
/// `aligned[img][comp]` holds aligned contributions in teacher space.
pub fn retrieve_text(
    aligned: &[Vec<Vec<f32>>],
    components: &[ComponentId],
    selected: &[usize],
    u: &[f32],
    k_img: usize,
    query: &str,
) -> Result<RetrievalResult> {
    check_selection(selected, components.len())?;
    let u64: Vec<f64> = u.iter().map(|&v| v as f64).collect();
    let nu = norm(&u64);
    if nu == 0.0 {
        return Err(Error::Invalid("query vector has zero norm".into()));
    }
    let mut sims = Vec::new();
    let mut excluded = Vec::new();
    for (img, comps) in aligned.iter().enumerate() {
        if comps.len() != components.len() || comps.iter().any(|c| c.len() != u.len()) {
            return Err(Error::Invalid(format!("image {img}: contributions do not match the query width")));
        }
        let s = sum_selected(comps, selected);
        let ns = norm(&s);
        if ns < crate::align::DEGENERATE_NORM {
            excluded.push(img);
            continue;
        }
        let dot: f64 = s.iter().zip(&u64).map(|(a, b)| a * b).sum();
        sims.push((img, dot / (ns * nu)));
    }
    let comps = selected.iter().map(|&i| components[i].clone()).collect();
    Ok(rank(query.to_string(), comps, sims, excluded, k_img))
}

/// Ranks images by `cos(z_p', z_p)` with `z_p = Σ_{i∈selected} c_i` in the
/// model's own space. The reference image itself is left out.
pub fn retrieve_image(
    contribs: &[Vec<Vec<f32>>],
    components: &[ComponentId],
    selected: &[usize],
    reference: usize,
    k_img: usize,
    query: &str,
) -> Result<RetrievalResult> {
    check_selection(selected, components.len())?;
    let refv = contribs
        .get(reference)
        .ok_or_else(|| Error::Invalid(format!("reference image {reference} out of range")))?;
    let r = sum_selected(refv, selected);
    let nr = norm(&r);
    if nr < crate::align::DEGENERATE_NORM {
        return Err(Error::Invalid("reference image has a zero selected contribution".into()));
    }
    let mut sims = Vec::new();
    let mut excluded = Vec::new();
    for (img, comps) in contribs.iter().enumerate() {
        if img == reference {
            continue;
        }
        let s = sum_selected(comps, selected);
        let ns = norm(&s);
        if ns < crate::align::DEGENERATE_NORM {
            excluded.push(img);
            continue;
        }
        let dot: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
        sims.push((img, dot / (ns * nr)));
    }
    let comps = selected.iter().map(|&i| components[i].clone()).collect();
    Ok(rank(query.to_string(), comps, sims, excluded, k_img))
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Signed per-token scores on the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapImage {
    /// Cells per side.
    pub grid: usize,
    /// Row-major `grid × grid` scores.
    pub cells: Vec<f64>,
    /// Score routed through the class token.
    pub cls: f64,
    /// Score of selected components that carry no token (MLP, opaque, init).
    pub untokened: f64,
    /// Colour limit: the scale spans `[-vmax, vmax]`.
    pub vmax: f64,
    pub components: Vec<ComponentId>,
}

impl HeatmapImage {
    /// Σ over tokens, class token included.
    pub fn token_sum(&self) -> f64 {
        self.cells.iter().sum::<f64>() + self.cls
    }

    /// Σ over every selected contribution.
    pub fn total(&self) -> f64 {
        self.token_sum() + self.untokened
    }

    /// Share of the positive mass lying in the left half of the grid.
    pub fn left_positive_share(&self) -> f64 {
        let (mut left, mut all) = (0.0, 0.0);
        for (i, &v) in self.cells.iter().enumerate() {
            if v > 0.0 {
                all += v;
                if i % self.grid < self.grid / 2 {
                    left += v;
                }
            }
        }
        if all == 0.0 {
            0.0
        } else {
            left / all
        }
    }

    /// RGB pixels, `scale` pixels per cell, blue (negative) through white to
    /// red (positive).
    pub fn render(&self, scale: usize) -> Vec<u8> {
        let side = self.grid * scale;
        let mut out = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let v = self.cells[(y / scale) * self.grid + x / scale];
                out.extend(diverging(v, self.vmax));
            }
        }
        out
    }

    /// Writes `<stem>.png` and the raw values as `<stem>.json`.
    pub fn save(&self, stem: &Path, scale: usize) -> Result<()> {
        let side = (self.grid * scale) as u32;
        let mut png_bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut png_bytes, side, side);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Invalid(format!("png: {e}")))?;
            w.write_image_data(&self.render(scale))
                .map_err(|e| Error::Invalid(format!("png: {e}")))?;
        }
        write_atomic(&stem.with_extension("png"), &png_bytes)?;
        write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(self)?)
    }
}

fn diverging(v: f64, vmax: f64) -> [u8; 3] {
    let t = if vmax > 0.0 { (v / vmax).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

/// Per-token score `Σ_{i∈set} uᵀ f_i(c_{i,t})` laid out on the patch grid.
///
/// Tokens of coarser stages (after patch merging) spread their score evenly
/// over the finest-grid cells they cover.
pub fn token_heatmap(
    dec: &Decomposition,
    aligner: &Aligner,
    model: &Model,
    u: &[f32],
    set: &[ComponentId],
) -> Result<HeatmapImage> {
    if u.len() != aligner.d_ref {
        return Err(Error::Invalid("query width differs from the aligner's output".into()));
    }
    let fine = model.cfg.patch_grid;
    let mut cells = vec![0.0f64; fine * fine];
    let (mut cls, mut untokened) = (0.0, 0.0);
    for id in set {
        let map = aligner
            .index_of(id)
            .ok_or_else(|| Error::Invalid(format!("aligner has no map for {id}")))?;
        let mut found = false;
        for c in dec.contributions.iter().filter(|c| &c.component == id) {
            found = true;
            let score: f64 = aligner
                .apply(map, &c.vector)
                .iter()
                .zip(u)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let Some(t) = c.token else {
                untokened += score;
                continue;
            };
            let layer = id.layer().unwrap_or(0);
            let (grid, has_cls) = model
                .token_grid(layer)
                .ok_or_else(|| Error::Invalid(format!("{id} has no token layout")))?;
            if has_cls && t == 0 {
                cls += score;
                continue;
            }
            let t = t - has_cls as usize;
            if t >= grid * grid || fine % grid != 0 {
                return Err(Error::Invalid(format!("token {t} of {id} does not map onto the patch grid")));
            }
            let f = fine / grid;
            let (r, col) = (t / grid, t % grid);
            let share = score / (f * f) as f64;
            for dy in 0..f {
                for dx in 0..f {
                    cells[(r * f + dy) * fine + col * f + dx] += share;
                }
            }
        }
        if !found {
            return Err(Error::Invalid(format!("decomposition has no component {id}")));
        }
    }
    let vmax = cells.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(HeatmapImage {
        grid: fine,
        cells,
        cls,
        untokened,
        vmax,
        components: set.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Dataset-wide mean contribution of every component.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAblation {
    pub components: Vec<ComponentId>,
    pub means: Vec<Vec<f64>>,
}

impl MeanAblation {
    /// Means over `decs`, which must share one component table.
    pub fn fit(decs: &[Decomposition]) -> Result<Self> {
        let first = decs
            .first()
            .ok_or_else(|| Error::Invalid("mean ablation needs at least one decomposition".into()))?;
        let components = first.components();
        let d = first.dim();
        let mut means = vec![vec![0.0f64; d]; components.len()];
        for dec in decs {
            for (id, m) in components.iter().zip(means.iter_mut()) {
                let v = dec
                    .component_vector(id)
                    .ok_or_else(|| Error::Invalid(format!("decomposition has no component {id}")))?;
                m.iter_mut().zip(&v).for_each(|(a, &b)| *a += b as f64);
            }
        }
        let n = decs.len() as f64;
        means.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(Self { components, means })
    }

    fn index(&self, id: &ComponentId) -> Result<usize> {
        self.components
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::Invalid(format!("unknown component {id}")))
    }

    /// `z − Σ_{i∈A} c_i + Σ_{i∈A} c̄_i` for one image.
    pub fn apply(&self, dec: &Decomposition, set: &[ComponentId]) -> Result<Vec<f32>> {
        let mut z: Vec<f64> = dec.z.iter().map(|&v| v as f64).collect();
        let mut seen: Vec<&ComponentId> = Vec::new();
        for id in set {
            if seen.contains(&id) {
                continue;
            }
            seen.push(id);
            let m = &self.means[self.index(id)?];
            let c = dec
                .component_vector(id)
                .ok_or_else(|| Error::Invalid(format!("decomposition has no component {id}")))?;
            for ((a, &ci), &mi) in z.iter_mut().zip(&c).zip(m) {
                *a += mi - ci as f64;
            }
        }
        Ok(z.into_iter().map(|v| v as f32).collect())
    }

    pub fn apply_all(&self, decs: &[Decomposition], set: &[ComponentId]) -> Result<Vec<Vec<f32>>> {
        decs.iter().map(|d| self.apply(d, set)).collect()
    }
}

/// Mean-ablates `set` with means taken over `decs` itself.
pub fn mean_ablate(decs: &[Decomposition], set: &[ComponentId]) -> Result<Vec<Vec<f32>>> {
    MeanAblation::fit(decs)?.apply_all(decs, set)
}

/// One point of an ablation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    /// Layers ablated so far, counted from the last.
    pub layers_ablated: usize,
    /// What was added in this step.
    pub label: String,
    pub accuracy: f64,
    /// Step ends at a stage boundary (patch merge or the embedding).
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub steps: Vec<AblationStep>,
    /// Ablation order, one entry per step after the first.
    pub order: Vec<String>,
    pub dataset_id: String,
}

impl AblationCurve {
    /// Area under the accuracy curve over the layer steps, with accuracy
    /// rescaled so the unablated model is 1 and `chance` is 0.
    pub fn normalized_auc(&self, chance: f64) -> f64 {
        let base = self.steps[0].accuracy;
        let layers: Vec<&AblationStep> = self.steps.iter().filter(|s| s.label != "init").collect();
        if layers.len() < 2 || base <= chance {
            return 0.0;
        }
        let vals: Vec<f64> = layers.iter().map(|s| (s.accuracy - chance) / (base - chance)).collect();
        let mut area = 0.0;
        for w in vals.windows(2) {
            area += 0.5 * (w[0] + w[1]);
        }
        area / (vals.len() - 1) as f64
    }
}

/// Accuracy as layers are cumulatively mean-ablated from the last layer
/// back to the first, finishing with the embedding (`init`).
///
/// `decs` must cover every layer. `merge_after` lists counts of ablated
/// layers that sit on a stage boundary.
pub fn ablation_curve(
    decs: &[Decomposition],
    head: &ClassifierHead,
    labels: &[usize],
    merge_after: &[usize],
    dataset_id: &str,
) -> Result<AblationCurve> {
    if decs.len() != labels.len() {
        return Err(Error::Invalid("labels do not match the decompositions".into()));
    }
    let means = MeanAblation::fit(decs)?;
    let n_layers = decs[0].n_layers_decomposed;
    let mut set: Vec<ComponentId> = Vec::new();
    let accuracy = |set: &[ComponentId]| -> Result<f64> {
        let zs = means.apply_all(decs, set)?;
        Ok(head.accuracy(&zs, labels))
    };
    let mut steps = vec![AblationStep {
        layers_ablated: 0,
        label: "none".into(),
        accuracy: head.accuracy(&decs.iter().map(|d| d.z.clone()).collect::<Vec<_>>(), labels),
        boundary: false,
    }];
    let mut order = Vec::new();
    for back in 0..n_layers {
        let group: Vec<ComponentId> = means
            .components
            .iter()
            .filter(|c| c.layer() == Some(back))
            .cloned()
            .collect();
        set.extend(group);
        let label = format!("L{back:02}");
        steps.push(AblationStep {
            layers_ablated: back + 1,
            label: label.clone(),
            accuracy: accuracy(&set)?,
            boundary: merge_after.contains(&(back + 1)),
        });
        order.push(label);
    }
    set.push(ComponentId::Init);
    steps.push(AblationStep {
        layers_ablated: n_layers,
        label: "init".into(),
        accuracy: accuracy(&set)?,
        boundary: true,
    });
    order.push("init".into());
    Ok(AblationCurve {
        steps,
        order,
        dataset_id: dataset_id.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Group robustness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub label: usize,
    pub group: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy per (class, spurious attribute) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub cells: Vec<GroupCell>,
    pub worst: f64,
    pub average: f64,
    pub best: f64,
}

impl GroupAccuracy {
    pub fn compute(predictions: &[usize], labels: &[usize], groups: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() || labels.len() != groups.len() {
            return Err(Error::Invalid("predictions, labels and groups differ in length".into()));
        }
        let mut tally: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
            let e = tally.entry((y, g)).or_default();
            e.0 += (p == y) as usize;
            e.1 += 1;
        }
        if tally.is_empty() {
            return Err(Error::Invalid("no groups present".into()));
        }
        let cells: Vec<GroupCell> = tally
            .into_iter()
            .map(|((label, group), (ok, n))| GroupCell {
                label,
                group,
                n,
                accuracy: ok as f64 / n as f64,
            })
            .collect();
        let acc = cells.iter().map(|c| c.accuracy);
        Ok(Self {
            worst: acc.clone().fold(f64::INFINITY, f64::min),
            average: acc.clone().sum::<f64>() / cells.len() as f64,
            best: acc.fold(f64::NEG_INFINITY, f64::max),
            cells,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub selected: Vec<ComponentId>,
    pub before: GroupAccuracy,
    pub after: GroupAccuracy,
}

/// Default number of ablated components for a model with `n` components.
pub fn default_mitigation_k(n: usize) -> usize {
    if n >= 30 {
        10
    } else {
        (n / 6).max(2)
    }
}

/// Mean-ablates the `k` components most specific to `spurious` and reports
/// group accuracy of the frozen `head` before and after.
///
/// Gaps are taken against every other feature, or against `core` only when
/// `contrast_core_only` is set. Means come from `fit`.
#[allow(clippy::too_many_arguments)]
pub fn mitigate_spurious(
    fit: &[Decomposition],
    eval: &[Decomposition],
    scores: &ScoreMatrix,
    spurious: &str,
    core: &str,
    contrast_core_only: bool,
    k: usize,
    head: &ClassifierHead,
    labels: &[usize],
    groups: &[usize],
) -> Result<MitigationReport> {
    if eval.len() != labels.len() || eval.len() != groups.len() {
        return Err(Error::Invalid("groups or labels missing for some images".into()));
    }
    let p = scores.feature_index(spurious)?;
    let c = scores.feature_index(core)?;
    let idx = if k == 0 {
        Vec::new()
    } else {
        select_by_gap(scores, p, k, contrast_core_only.then_some(c))?
    };
    let selected: Vec<ComponentId> = idx.iter().map(|&i| scores.components[i].clone()).collect();
    let means = MeanAblation::fit(fit)?;
    let before_z: Vec<Vec<f32>> = eval.iter().map(|d| d.z.clone()).collect();
    let after_z = if selected.is_empty() {
        before_z.clone()
    } else {
        means.apply_all(eval, &selected)?
    };
    let predict = |zs: &[Vec<f32>]| zs.iter().map(|z| head.predict(z)).collect::<Vec<_>>();
    Ok(MitigationReport {
        before: GroupAccuracy::compute(&predict(&before_z), labels, groups)?,
        after: GroupAccuracy::compute(&predict(&after_z), labels, groups)?,
        selected,
    })
}
