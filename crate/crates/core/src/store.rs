// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact encodings of trained models, teachers, aligners and
//! per-dataset decomposition sets. Every loader re-checks the invariants of
//! what it reads before handing it out.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{AlignLog, Aligner, Mat};
use crate::artifact::{Array, Artifact};
use crate::decompose::{verify, ComponentId, Contribution, Decomposition, Granularity, RECONSTRUCTION_TOL};
use crate::error::{Error, Result};
use crate::models::teacher::Prototype;
use crate::models::train::{flatten, load_params};
use crate::models::{build_model, ClassifierHead, Model, ModelConfig, TeacherEncoder};

pub const MODEL_KIND: &str = "model";
pub const TEACHER_KIND: &str = "teacher";
pub const ALIGNER_KIND: &str = "aligner";
pub const DECOMPOSITION_KIND: &str = "decomposition";

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Invalid(format!("artifact header lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn rebuild(cfg: &ModelConfig, params: &[f32]) -> Result<Model> {
    let mut model = build_model(cfg)?;
    load_params(&mut model, params)?;
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model parameters".into()));
    }
    Ok(model)
}

/// A trained backbone with its linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub model: Model,
    pub head: ClassifierHead,
    /// Free-form provenance (dataset, target, accuracy).
    pub info: serde_json::Value,
}

impl StoredModel {
    pub fn to_artifact(&self, config_hash: &str) -> Artifact {
        let meta = json!({
            "config": self.model.cfg,
            "model_id": self.model.id(),
            "classes": self.head.classes,
            "info": self.info,
        });
        let mut a = Artifact::new(MODEL_KIND, config_hash, meta);
        let params = flatten(&self.model);
        a.push(Array::new("params", vec![params.len()], params));
        a.push(Array::new("head_w", vec![self.head.dim, self.head.classes], self.head.w.clone()));
        a.push(Array::new("head_b", vec![self.head.classes], self.head.b.clone()));
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let cfg: ModelConfig = meta_field(&a.meta, "config")?;
        let classes: usize = meta_field(&a.meta, "classes")?;
        let model = rebuild(&cfg, &a.array("params")?.data)?;
        let w = a.array("head_w")?;
        if w.shape != [model.out_dim(), classes] {
            return Err(Error::Invalid("head shape does not match the model".into()));
        }
        let mut head = ClassifierHead::zeros(model.out_dim(), classes);
        head.w.copy_from_slice(&w.data);
        head.b.copy_from_slice(&a.array("head_b")?.data);
        Ok(Self {
            model,
            head,
            info: a.meta.get("info").cloned().unwrap_or_default(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProtoKey {
    feature: String,
    value: String,
}

pub fn teacher_to_artifact(t: &TeacherEncoder, config_hash: &str) -> Artifact {
    let keys: Vec<ProtoKey> = t
        .prototypes
        .iter()
        .map(|p| ProtoKey {
            feature: p.feature.clone(),
            value: p.value.clone(),
        })
        .collect();
    let meta = json!({
        "config": t.model.cfg,
        "prototypes": keys,
        "val_accuracy": t.val_accuracy,
    });
    let mut a = Artifact::new(TEACHER_KIND, config_hash, meta);
    let params = flatten(&t.model);
    a.push(Array::new("params", vec![params.len()], params));
    a.push(Array::new("center", vec![t.center.len()], t.center.clone()));
    let d = t.d_ref();
    a.push(Array::new(
        "prototypes",
        vec![t.prototypes.len(), d],
        t.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect(),
    ));
    a
}

pub fn teacher_from_artifact(a: &Artifact) -> Result<TeacherEncoder> {
    let cfg: ModelConfig = meta_field(&a.meta, "config")?;
    let keys: Vec<ProtoKey> = meta_field(&a.meta, "prototypes")?;
    let model = rebuild(&cfg, &a.array("params")?.data)?;
    let d = model.out_dim();
    let center = a.array("center")?.data.clone();
    let protos = a.array("prototypes")?;
    if center.len() != d || protos.shape != [keys.len(), d] {
        return Err(Error::Invalid("teacher arrays do not match its width".into()));
    }
    let prototypes: Vec<Prototype> = keys
        .into_iter()
        .zip(protos.data.chunks(d.max(1)))
        .map(|(k, v)| Prototype {
            feature: k.feature,
            value: k.value,
            vector: v.to_vec(),
        })
        .collect();
    for p in &prototypes {
        let n = p.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!("prototype {}={} is not unit norm", p.feature, p.value)));
        }
    }
    Ok(TeacherEncoder {
        model,
        center,
        prototypes,
        val_accuracy: meta_field(&a.meta, "val_accuracy")?,
    })
}

pub fn aligner_to_artifact(al: &Aligner, config_hash: &str, extra: serde_json::Value) -> Artifact {
    let meta = json!({
        "components": al.components.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "d": al.d,
        "d_ref": al.d_ref,
        "lambda": al.lambda,
        "tied": al.tied,
        "seed": al.seed,
        "log": al.log,
        "extra": extra,
    });
    let mut a = Artifact::new(ALIGNER_KIND, config_hash, meta);
    a.push(Array::new(
        "maps",
        vec![al.maps.len(), al.d_ref, al.d],
        al.maps.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect(),
    ));
    a
}

pub fn aligner_from_artifact(a: &Artifact) -> Result<Aligner> {
    let names: Vec<String> = meta_field(&a.meta, "components")?;
    let components = names.iter().map(|s| s.parse()).collect::<Result<Vec<ComponentId>>>()?;
    let (d, d_ref): (usize, usize) = (meta_field(&a.meta, "d")?, meta_field(&a.meta, "d_ref")?);
    let maps_arr = a.array("maps")?;
    if maps_arr.shape.len() != 3 || maps_arr.shape[1] != d_ref || maps_arr.shape[2] != d {
        return Err(Error::Invalid("map blob does not match d_ref × d".into()));
    }
    let maps: Vec<Mat> = maps_arr
        .data
        .chunks(d * d_ref)
        .map(|c| Mat::from_fn(d_ref, d, |r, k| c[r * d + k] as f64))
        .collect();
    let al = Aligner {
        components,
        d,
        d_ref,
        lambda: meta_field(&a.meta, "lambda")?,
        tied: meta_field(&a.meta, "tied")?,
        seed: meta_field(&a.meta, "seed")?,
        maps,
        log: meta_field::<AlignLog>(&a.meta, "log")?,
    };
    al.validate()?;
    Ok(al)
}

/// Decompositions of many images under one model, sharing a term table.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSet {
    pub dataset: String,
    /// Dataset indices of the decomposed images, in order.
    pub images: Vec<usize>,
    pub decs: Vec<Decomposition>,
}

#[derive(Serialize, Deserialize)]
struct TermKey {
    component: String,
    token: Option<usize>,
}

impl DecompositionSet {
    pub fn max_residual(&self) -> f64 {
        self.decs.iter().map(Decomposition::residual).fold(0.0, f64::max)
    }

    pub fn to_artifact(&self, config_hash: &str) -> Result<Artifact> {
        let first = self
            .decs
            .first()
            .ok_or_else(|| Error::Invalid("empty decomposition set".into()))?;
        let table: Vec<TermKey> = first
            .contributions
            .iter()
            .map(|c| TermKey {
                component: c.component.to_string(),
                token: c.token,
            })
            .collect();
        let d = first.dim();
        let mut contribs = Vec::with_capacity(self.decs.len() * table.len() * d);
        let mut z = Vec::with_capacity(self.decs.len() * d);
        for dec in &self.decs {
            let same = dec.contributions.len() == first.contributions.len()
                && dec
                    .contributions
                    .iter()
                    .zip(&first.contributions)
                    .all(|(a, b)| a.component == b.component && a.token == b.token);
            if !same || dec.model_id != first.model_id || dec.granularity != first.granularity {
                return Err(Error::Invalid("decompositions do not share one term table".into()));
            }
            for c in &dec.contributions {
                contribs.extend_from_slice(&c.vector);
            }
            z.extend_from_slice(&dec.z);
        }
        let meta = json!({
            "dataset": self.dataset,
            "images": self.images,
            "model_id": first.model_id,
            "granularity": first.granularity.to_string(),
            "n_layers_decomposed": first.n_layers_decomposed,
            "d": d,
            "table": table,
            "max_residual": self.max_residual(),
            "tolerance": RECONSTRUCTION_TOL,
        });
        let mut a = Artifact::new(DECOMPOSITION_KIND, config_hash, meta);
        a.push(Array::new("contributions", vec![self.decs.len(), table.len(), d], contribs));
        a.push(Array::new("z", vec![self.decs.len(), d], z));
        Ok(a)
    }

    /// Rebuilds the set and re-verifies every reconstruction identity.
    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let table: Vec<TermKey> = meta_field(&a.meta, "table")?;
        let d: usize = meta_field(&a.meta, "d")?;
        let images: Vec<usize> = meta_field(&a.meta, "images")?;
        let granularity: Granularity = meta_field::<String>(&a.meta, "granularity")?.parse()?;
        let model_id: String = meta_field(&a.meta, "model_id")?;
        let n_layers: usize = meta_field(&a.meta, "n_layers_decomposed")?;
        let ids = table
            .iter()
            .map(|t| t.component.parse::<ComponentId>())
            .collect::<Result<Vec<_>>>()?;
        let contribs = a.array("contributions")?;
        let z = a.array("z")?;
        let n = images.len();
        if contribs.shape != [n, table.len(), d] || z.shape != [n, d] {
            return Err(Error::Invalid("decomposition arrays do not match the term table".into()));
        }
        let per_img = table.len() * d;
        let mut decs = Vec::with_capacity(n);
        for i in 0..n {
            let block = &contribs.data[i * per_img..(i + 1) * per_img];
            let dec = Decomposition {
                contributions: ids
                    .iter()
                    .zip(&table)
                    .zip(block.chunks(d.max(1)))
                    .map(|((id, t), v)| Contribution {
                        component: id.clone(),
                        token: t.token,
                        vector: v.to_vec(),
                    })
                    .collect(),
                z: z.data[i * d..(i + 1) * d].to_vec(),
                model_id: model_id.clone(),
                granularity,
                n_layers_decomposed: n_layers,
            };
            verify(&dec, RECONSTRUCTION_TOL)?;
            decs.push(dec);
        }
        Ok(Self {
            dataset: meta_field(&a.meta, "dataset")?,
            images,
            decs,
        })
    }
}
