// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use vitdecomp::align::{orthogonality_report, single_map_baseline, train_compalign, AlignData, AlignTrainConfig, Aligner};
use vitdecomp::applications::{
    ablation_curve, component_matrix, default_mitigation_k, mitigate_spurious, retrieve_image, retrieve_text,
    token_heatmap, RetrievalResult,
};
use vitdecomp::artifact::{write_atomic, Artifact};
use vitdecomp::attribution::{score_matrix, select_by_gap, FeatureSpec, ScoreMatrix};
use vitdecomp::decompose::{rep_decompose, ComponentId, Granularity, LayerSelection};
use vitdecomp::models::dataset::{gen_synthetic, Layout};
use vitdecomp::models::train::{represent_all, train_probe, train_toy, Target};
use vitdecomp::models::{build_model, DatasetSpec, Image, ModelConfig, SyntheticDataset, TeacherEncoder, TrainConfig, Variant};
use vitdecomp::store::{
    aligner_from_artifact, aligner_to_artifact, teacher_from_artifact, teacher_to_artifact, DecompositionSet,
    StoredModel, ALIGNER_KIND, DECOMPOSITION_KIND, MODEL_KIND, TEACHER_KIND,
};

use crate::config::config_hash;
use crate::{
    AblateArgs, AlignArgs, Cmd, DatasetArgs, DecomposeArgs, HeatmapArgs, LayoutArg, MitigateArgs, RetrieveCmd,
    RetrieveImageArgs, RetrieveTextArgs, ScoreArgs, Selection, SplitArg, TargetArg, TrainArgs,
};

/// Paths of every artifact kind below the root.
struct Store {
    root: PathBuf,
}

impl Store {
    fn dataset(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(id)
    }
    fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.art"))
    }
    fn teacher(&self, id: &str) -> PathBuf {
        self.root.join("teachers").join(format!("{id}.art"))
    }
    fn decomp(&self, id: &str) -> PathBuf {
        self.root.join("decomps").join(format!("{id}.art"))
    }
    fn aligner(&self, id: &str) -> PathBuf {
        self.root.join("aligners").join(format!("{id}.art"))
    }
    fn scores(&self, id: &str) -> PathBuf {
        self.root.join("scores").join(format!("{id}.json"))
    }
    fn result(&self, kind: &str, id: &str) -> PathBuf {
        self.root.join("results").join(format!("{kind}_{id}.json"))
    }
    fn heatmap(&self, id: &str) -> PathBuf {
        self.root.join("heatmaps").join(id)
    }

    fn load_dataset(&self, id: &str) -> Result<SyntheticDataset> {
        SyntheticDataset::load(&self.dataset(id)).with_context(|| format!("loading dataset {id:?}"))
    }
    fn load_model(&self, id: &str) -> Result<StoredModel> {
        let a = Artifact::load(&self.model(id), MODEL_KIND).with_context(|| format!("loading model {id:?}"))?;
        StoredModel::from_artifact(&a).with_context(|| format!("model {id:?}"))
    }
    fn load_teacher(&self, id: &str) -> Result<TeacherEncoder> {
        let a = Artifact::load(&self.teacher(id), TEACHER_KIND).with_context(|| format!("loading teacher {id:?}"))?;
        teacher_from_artifact(&a).with_context(|| format!("teacher {id:?}"))
    }
    fn load_decomp(&self, id: &str) -> Result<DecompositionSet> {
        let a = Artifact::load(&self.decomp(id), DECOMPOSITION_KIND)
            .with_context(|| format!("loading decomposition {id:?}"))?;
        DecompositionSet::from_artifact(&a).with_context(|| format!("decomposition {id:?}"))
    }
    fn load_aligner(&self, id: &str) -> Result<Aligner> {
        let a = Artifact::load(&self.aligner(id), ALIGNER_KIND).with_context(|| format!("loading aligner {id:?}"))?;
        aligner_from_artifact(&a).with_context(|| format!("aligner {id:?}"))
    }
    fn load_scores(&self, id: &str) -> Result<ScoreMatrix> {
        ScoreMatrix::load(&self.scores(id)).with_context(|| format!("loading scores {id:?}"))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn target_of(t: TargetArg) -> Target {
    match t {
        TargetArg::Foreground => Target::Foreground,
        TargetArg::Background => Target::Background,
        TargetArg::Joint => Target::Joint,
    }
}

fn model_target(m: &StoredModel) -> Result<Target> {
    let t = m.info.get("target").cloned().ok_or_else(|| anyhow!("model records no training target"))?;
    Ok(serde_json::from_value(t)?)
}

fn images<'a>(ds: &'a SyntheticDataset, idx: &[usize]) -> Vec<&'a Image> {
    idx.iter().map(|&i| &ds.images[i]).collect()
}

fn parse_components(list: &str) -> Result<Vec<ComponentId>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<ComponentId>().map_err(|e| anyhow!("component {s:?}: {e}")))
        .collect()
}

fn indices_of(available: &[ComponentId], wanted: &[ComponentId]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            available
                .iter()
                .position(|a| a == w)
                .ok_or_else(|| anyhow!("component {w} is not in the decomposition"))
        })
        .collect()
}

pub fn run(root: &Path, cmd: Cmd) -> Result<String> {
    let store = Store { root: root.to_path_buf() };
    match cmd {
        Cmd::Dataset(a) => dataset(&store, &a),
        Cmd::Train(a) => train(&store, &a),
        Cmd::Decompose(a) => decompose(&store, &a),
        Cmd::Align(a) if a.compare.is_some() => align_compare(&store, &a),
        Cmd::Align(a) => align(&store, &a),
        Cmd::Score(a) => score(&store, &a),
        Cmd::Retrieve(RetrieveCmd::Text(a)) => retrieve_text_cmd(&store, &a),
        Cmd::Retrieve(RetrieveCmd::Image(a)) => retrieve_image_cmd(&store, &a),
        Cmd::Heatmap(a) => heatmap(&store, &a),
        Cmd::Ablate(a) => ablate(&store, &a),
        Cmd::Mitigate(a) => mitigate(&store, &a),
    }
}

fn dataset(store: &Store, a: &DatasetArgs) -> Result<String> {
    let hash = config_hash("dataset", a)?;
    let mut spec = DatasetSpec::new(a.fg, a.bg, a.rho, a.rho_val);
    ensure!(spec.foregrounds.len() == a.fg, "at most 6 shapes");
    ensure!(spec.backgrounds.len() == a.bg, "at most 4 backgrounds");
    spec.n_train = a.n_train;
    spec.n_val = a.n_val;
    spec.noise = a.noise;
    spec.layout = match a.layout {
        LayoutArg::Full => Layout::Full,
        LayoutArg::LeftHalf => Layout::LeftHalf,
    };
    let ds = gen_synthetic(&spec, a.seed)?;
    let dir = store.dataset(&a.id);
    ds.save(&dir)?;
    write_json(&dir.join("run.json"), &json!({ "config_hash": hash, "config": a }))?;
    Ok(format!("dataset {}: {} images ({} train) -> {}", a.id, ds.len(), ds.train.len(), dir.display()))
}

fn train(store: &Store, a: &TrainArgs) -> Result<String> {
    let hash = config_hash("train", a)?;
    let ds = store.load_dataset(&a.dataset)?;
    let target = target_of(a.target);
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        target,
    };
    if let Some(backbone) = &a.backbone {
        let base = store.load_model(backbone)?;
        let feats = represent_all(&base.model, &images(&ds, &ds.train))?;
        let labels = target.labels(&ds);
        let train_labels: Vec<usize> = ds.train.iter().map(|&i| labels[i]).collect();
        let head = train_probe(&feats, &train_labels, target.classes(&ds), a.probe_epochs, a.probe_lr)?;
        let val = represent_all(&base.model, &images(&ds, &ds.val))?;
        let val_labels: Vec<usize> = ds.val.iter().map(|&i| labels[i]).collect();
        let acc = head.accuracy(&val, &val_labels);
        let stored = StoredModel {
            model: base.model,
            head,
            info: json!({ "dataset": a.dataset, "target": target, "val_accuracy": acc, "backbone": backbone, "config": a }),
        };
        let path = store.model(&a.id);
        stored.to_artifact(&hash).save(&path)?;
        return Ok(format!("probe {}: val accuracy {acc:.4} -> {}", a.id, path.display()));
    }
    let variant: Variant = a.variant.parse()?;
    let mut mcfg = if a.teacher { TeacherEncoder::config(a.d_ref, a.seed) } else { ModelConfig::new(variant, a.seed) };
    if let Some(d) = a.depth {
        mcfg.depth = d;
    }
    if let Some(h) = a.heads {
        mcfg.heads = h;
    }
    if let Some(d) = a.dim {
        ensure!(!a.teacher, "set the teacher width with --d-ref");
        mcfg.dim = d;
    }
    mcfg.image_size = ds.spec.image_size;
    if a.teacher {
        let teacher = TeacherEncoder::train(&ds, a.d_ref, &tcfg)?;
        let path = store.teacher(&a.id);
        teacher_to_artifact(&teacher, &hash).save(&path)?;
        return Ok(format!("teacher {}: val accuracy {:.4} -> {}", a.id, teacher.val_accuracy, path.display()));
    }
    let model = build_model(&mcfg)?;
    let out = train_toy(&model, &ds, &tcfg)?;
    let stored = StoredModel {
        model: out.model,
        head: out.head,
        info: json!({
            "dataset": a.dataset,
            "target": target,
            "val_accuracy": out.val_accuracy,
            "loss_curve": out.loss_curve,
            "config": a,
        }),
    };
    let path = store.model(&a.id);
    stored.to_artifact(&hash).save(&path)?;
    Ok(format!("model {}: val accuracy {:.4} -> {}", a.id, out.val_accuracy, path.display()))
}

fn decompose(store: &Store, a: &DecomposeArgs) -> Result<String> {
    let hash = config_hash("decompose", a)?;
    let m = store.load_model(&a.model)?;
    let ds_id = match &a.dataset {
        Some(d) => d.clone(),
        None => m.info.get("dataset").and_then(Value::as_str).ok_or_else(|| anyhow!("model records no dataset; pass --dataset"))?.to_string(),
    };
    let ds = store.load_dataset(&ds_id)?;
    let granularity: Granularity = a.granularity.parse()?;
    let layers: LayerSelection = a.layers.parse()?;
    let mut idx = match a.split {
        SplitArg::Train => ds.train.clone(),
        SplitArg::Val => ds.val.clone(),
        SplitArg::All => (0..ds.len()).collect(),
    };
    if let Some(n) = a.limit {
        idx.truncate(n);
    }
    ensure!(!idx.is_empty(), "no images to decompose");
    let decs = idx
        .iter()
        .map(|&i| {
            let rec = m.model.record(&ds.images[i])?;
            rep_decompose(&rec.tape, rec.z, granularity, layers, &a.model).with_context(|| format!("image {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let set = DecompositionSet { dataset: ds_id, images: idx, decs };
    let residual = set.max_residual();
    let path = store.decomp(&a.id);
    set.to_artifact(&hash)?.save(&path)?;
    Ok(format!(
        "decomposition {}: {} images, {} terms, max residual {residual:.2e} -> {}",
        a.id,
        set.images.len(),
        set.decs[0].contributions.len(),
        path.display()
    ))
}

/// Teacher codes of the images in a decomposition set.
fn reference_codes(store: &Store, set: &DecompositionSet, teacher: &TeacherEncoder) -> Result<Vec<Vec<f32>>> {
    let ds = store.load_dataset(&set.dataset)?;
    ensure!(set.images.iter().all(|&i| i < ds.len()), "decomposition refers to images outside dataset {:?}", set.dataset);
    Ok(teacher.encode_all(&images(&ds, &set.images))?)
}

fn align(store: &Store, a: &AlignArgs) -> Result<String> {
    let id = a.id.as_deref().ok_or_else(|| anyhow!("--id is required"))?;
    let hash = config_hash("align", a)?;
    let set = store.load_decomp(&a.decomp)?;
    let teacher = store.load_teacher(&a.teacher)?;
    let zr = reference_codes(store, &set, &teacher)?;
    let data = AlignData::from_decompositions(&set.decs, &zr)?;
    let cfg = AlignTrainConfig {
        learning_rate: a.lr,
        lambda: a.lambda,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        tied: false,
        ignore_lambda: a.no_reg,
        lambda_warmup: a.lambda_warmup,
    };
    let aligner = if a.tied { single_map_baseline(&data, &cfg)? } else { train_compalign(&data, &cfg)? };
    let cos = aligner.cos_distance(&data);
    let path = store.aligner(id);
    aligner_to_artifact(&aligner, &hash, json!({ "decomp": a.decomp, "teacher": a.teacher })).save(&path)?;
    write_json(
        &store.result("align", id),
        &json!({
            "config_hash": hash,
            "config": a,
            "cos_distance": cos,
            "lambda": aligner.lambda,
            "orthogonality": orthogonality_report(&aligner),
            "loss_curve": aligner.log.loss_curve,
        }),
    )?;
    Ok(format!("aligner {id}: cos distance {cos:.4} -> {}", path.display()))
}

fn align_compare(store: &Store, a: &AlignArgs) -> Result<String> {
    let hash = config_hash("align-compare", a)?;
    let set = store.load_decomp(&a.decomp)?;
    let teacher = store.load_teacher(&a.teacher)?;
    let zr = reference_codes(store, &set, &teacher)?;
    let data = AlignData::from_decompositions(&set.decs, &zr)?;
    let ids: Vec<&str> = a.compare.as_deref().unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    ensure!(!ids.is_empty(), "--compare needs at least one aligner");
    let mut rows = Vec::new();
    for id in &ids {
        let al = store.load_aligner(id)?;
        ensure!(al.components == data.components, "aligner {id:?} was fitted on a different component table");
        rows.push(json!({ "aligner": id, "lambda": al.lambda, "tied": al.tied, "cos_distance": al.cos_distance(&data) }));
    }
    let name = ids.join("-vs-");
    let path = store.result("align_compare", &format!("{name}_{}", a.decomp));
    write_json(&path, &json!({ "config_hash": hash, "config": a, "rows": rows }))?;
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r["aligner"].as_str().unwrap_or(""), r["cos_distance"].as_f64().unwrap_or(f64::NAN))).collect();
    Ok(format!("cos distance: {} -> {}", summary.join(", "), path.display()))
}

fn aligned_set(al: &Aligner, set: &DecompositionSet) -> Result<Vec<Vec<Vec<f32>>>> {
    Ok(set.decs.iter().map(|d| al.align_decomposition(d)).collect::<vitdecomp::Result<_>>()?)
}

fn score(store: &Store, a: &ScoreArgs) -> Result<String> {
    let al = store.load_aligner(&a.aligner)?;
    let set = store.load_decomp(&a.decomp)?;
    let teacher = store.load_teacher(&a.teacher)?;
    let features = a
        .features
        .split(',')
        .map(|f| FeatureSpec::from_teacher(&teacher, f.trim()))
        .collect::<vitdecomp::Result<Vec<_>>>()?;
    let aligned = aligned_set(&al, &set)?;
    let mut sm = score_matrix(&al.components, &aligned, &features)?;
    sm.aligner_id = a.aligner.clone();
    sm.dataset_id = set.dataset.clone();
    let path = store.scores(&a.id);
    sm.save(&path)?;
    let hash = config_hash("score", a)?;
    write_json(&store.result("score", &a.id), &json!({ "config_hash": hash, "config": a, "scores": a.id }))?;
    let best: Vec<String> = (0..sm.features.len())
        .map(|p| {
            let top = vitdecomp::attribution::component_ordering(&sm, p)[0];
            format!("{}: {} ({:.3})", sm.features[p], sm.components[top], sm.get(top, p))
        })
        .collect();
    Ok(format!("scores {}: top {} -> {}", a.id, best.join(", "), path.display()))
}

fn select(store: &Store, sel: &Selection, available: &[ComponentId]) -> Result<Vec<usize>> {
    if let Some(list) = &sel.components {
        return indices_of(available, &parse_components(list)?);
    }
    if let Some(scores) = &sel.scores {
        let sm = store.load_scores(scores)?;
        let feature = sel.select_feature.as_deref().ok_or_else(|| anyhow!("--select-feature is required with --scores"))?;
        let p = sm.feature_index(feature)?;
        let picked: Vec<ComponentId> = select_by_gap(&sm, p, sel.top, None)?.into_iter().map(|i| sm.components[i].clone()).collect();
        return indices_of(available, &picked);
    }
    Ok((0..available.len()).collect())
}

fn retrieval_json(hash: &str, config: &impl Serialize, set: &DecompositionSet, r: &RetrievalResult) -> Value {
    let ranked: Vec<Value> = r
        .ranked
        .iter()
        .map(|&(pos, sim)| json!({ "position": pos, "image": set.images[pos], "similarity": sim }))
        .collect();
    json!({
        "config_hash": hash,
        "config": config,
        "dataset": set.dataset,
        "query": r.query,
        "components": r.components.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "ranked": ranked,
        "excluded": r.excluded,
        "uninformative": r.uninformative,
    })
}

fn retrieve_text_cmd(store: &Store, a: &RetrieveTextArgs) -> Result<String> {
    let hash = config_hash("retrieve-text", a)?;
    let al = store.load_aligner(&a.aligner)?;
    let set = store.load_decomp(&a.decomp)?;
    let teacher = store.load_teacher(&a.teacher)?;
    let u = teacher.prototype(&a.feature, &a.value)?.vector.clone();
    let selected = select(store, &a.selection, &al.components)?;
    let aligned = aligned_set(&al, &set)?;
    let query = format!("{}={}", a.feature, a.value);
    let r = retrieve_text(&aligned, &al.components, &selected, &u, a.k, &query)?;
    let path = store.result("retrieve", &a.id);
    write_json(&path, &retrieval_json(&hash, a, &set, &r))?;
    let top = r.ranked.first().map_or("none".to_string(), |&(p, s)| format!("image {} ({s:.3})", set.images[p]));
    Ok(format!("retrieve {}: {query} top {top} -> {}", a.id, path.display()))
}

fn retrieve_image_cmd(store: &Store, a: &RetrieveImageArgs) -> Result<String> {
    let hash = config_hash("retrieve-image", a)?;
    let set = store.load_decomp(&a.decomp)?;
    let components = set.decs[0].components();
    let selected = select(store, &a.selection, &components)?;
    let contribs = component_matrix(&set.decs, &components)?;
    let query = format!("image {}", set.images.get(a.reference).ok_or_else(|| anyhow!("reference {} outside the set", a.reference))?);
    let r = retrieve_image(&contribs, &components, &selected, a.reference, a.k, &query)?;
    let path = store.result("retrieve", &a.id);
    write_json(&path, &retrieval_json(&hash, a, &set, &r))?;
    let top = r.ranked.first().map_or("none".to_string(), |&(p, s)| format!("image {} ({s:.3})", set.images[p]));
    Ok(format!("retrieve {}: {query} top {top} -> {}", a.id, path.display()))
}

fn heatmap(store: &Store, a: &HeatmapArgs) -> Result<String> {
    let hash = config_hash("heatmap", a)?;
    let m = store.load_model(&a.model)?;
    let al = store.load_aligner(&a.aligner)?;
    let set = store.load_decomp(&a.decomp)?;
    let teacher = store.load_teacher(&a.teacher)?;
    let dec = set.decs.get(a.image).ok_or_else(|| anyhow!("image {} outside the set", a.image))?;
    let mut u = teacher.prototype(&a.feature, &a.value)?.vector.clone();
    if a.negate {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    let comps = match &a.components {
        Some(list) => parse_components(list)?,
        None => al.components.clone(),
    };
    let h = token_heatmap(dec, &al, &m.model, &u, &comps)?;
    let stem = store.heatmap(&a.id);
    h.save(&stem, a.scale)?;
    write_json(
        &store.result("heatmap", &a.id),
        &json!({
            "config_hash": hash,
            "config": a,
            "image": set.images[a.image],
            "token_sum": h.token_sum(),
            "total": h.total(),
        }),
    )?;
    Ok(format!("heatmap {}: token sum {:.4}, total {:.4} -> {}.png", a.id, h.token_sum(), h.total(), stem.display()))
}

fn ablate(store: &Store, a: &AblateArgs) -> Result<String> {
    let hash = config_hash("ablate", a)?;
    let m = store.load_model(&a.model)?;
    let set = store.load_decomp(&a.decomp)?;
    ensure!(set.decs[0].granularity == Granularity::Component, "ablation needs a component-granularity decomposition");
    ensure!(
        set.decs[0].n_layers_decomposed == m.model.n_layers,
        "ablation needs every layer decomposed ({} of {})",
        set.decs[0].n_layers_decomposed,
        m.model.n_layers
    );
    let ds = store.load_dataset(&set.dataset)?;
    let target = model_target(&m)?;
    let labels_all = target.labels(&ds);
    let labels: Vec<usize> = set.images.iter().map(|&i| labels_all[i]).collect();
    let cfg = &m.model.cfg;
    let merge_after = if cfg.variant == Variant::Windowed && cfg.merge { vec![cfg.depth - cfg.depth / 2] } else { Vec::new() };
    let curve = ablation_curve(&set.decs, &m.head, &labels, &merge_after, &set.dataset)?;
    let chance = 1.0 / target.classes(&ds) as f64;
    let auc = curve.normalized_auc(chance);
    let path = store.result("ablate", &a.id);
    write_json(&path, &json!({ "config_hash": hash, "config": a, "chance": chance, "normalized_auc": auc, "curve": curve }))?;
    let first = curve.steps.first().map_or(f64::NAN, |s| s.accuracy);
    let last = curve.steps.last().map_or(f64::NAN, |s| s.accuracy);
    Ok(format!("ablate {}: accuracy {first:.4} -> {last:.4}, normalized auc {auc:.4} -> {}", a.id, path.display()))
}

fn mitigate(store: &Store, a: &MitigateArgs) -> Result<String> {
    let hash = config_hash("mitigate", a)?;
    let m = store.load_model(&a.model)?;
    let fit = store.load_decomp(&a.fit)?;
    let eval = store.load_decomp(&a.decomp)?;
    let sm = store.load_scores(&a.scores)?;
    let ds = store.load_dataset(&eval.dataset)?;
    let labels_all = model_target(&m)?.labels(&ds);
    let labels: Vec<usize> = eval.images.iter().map(|&i| labels_all[i]).collect();
    let groups: Vec<usize> = eval.images.iter().map(|&i| ds.groups[i]).collect();
    let k = a.k.unwrap_or_else(|| default_mitigation_k(sm.components.len()));
    if k > sm.components.len() {
        bail!("k = {k} exceeds the {} scored components", sm.components.len());
    }
    let rep = mitigate_spurious(&fit.decs, &eval.decs, &sm, &a.spurious, &a.core, a.contrast_core_only, k, &m.head, &labels, &groups)?;
    let path = store.result("mitigate", &a.id);
    write_json(&path, &json!({ "config_hash": hash, "config": a, "k": k, "report": rep }))?;
    Ok(format!(
        "mitigate {}: worst group {:.4} -> {:.4}, average {:.4} -> {:.4} -> {}",
        a.id,
        rep.before.worst,
        rep.after.worst,
        rep.before.average,
        rep.after.average,
        path.display()
    ))
}
