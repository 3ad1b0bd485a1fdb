// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen reference encoder and its prototype table.
//!
//! The teacher is a mean-pooled toy encoder trained to tell every
//! (shape, background, colour) combination apart. Its centred output is the
//! reference representation `z_ref`; each feature instantiation gets a
//! unit-norm prototype equal to the normalized mean `z_ref` of the images
//! that carry it.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::dataset::{SyntheticDataset, COLORS};
use super::train::{represent_all, train_toy, Target, TrainConfig};
use super::vit::{build_model, Image, Model};
use crate::error::{Error, Result};

/// Feature kinds carried by every synthetic image.
pub const FEATURES: [&str; 3] = ["shape", "background", "color"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub feature: String,
    pub value: String,
    /// Unit-norm vector of width `d_ref`.
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEncoder {
    pub model: Model,
    /// Subtracted from every raw output.
    pub center: Vec<f32>,
    pub prototypes: Vec<Prototype>,
    pub val_accuracy: f64,
}

/// Feature value of image `i` for a feature kind.
pub fn feature_value(ds: &SyntheticDataset, feature: &str, i: usize) -> Option<String> {
    match feature {
        "shape" => Some(ds.spec.foregrounds[ds.labels[i]].clone()),
        "background" => Some(ds.spec.backgrounds[ds.groups[i]].clone()),
        "color" => Some(COLORS[ds.colors[i]].to_string()),
        _ => None,
    }
}

/// Every instantiation of a feature present in the dataset spec.
pub fn feature_values(ds: &SyntheticDataset, feature: &str) -> Vec<String> {
    match feature {
        "shape" => ds.spec.foregrounds.clone(),
        "background" => ds.spec.backgrounds.clone(),
        "color" => COLORS.iter().map(|c| c.to_string()).collect(),
        _ => Vec::new(),
    }
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl TeacherEncoder {
    /// Default teacher architecture: mean-pooled, width `d_ref`.
    pub fn config(d_ref: usize, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(Variant::VanillaMeanpool, seed);
        cfg.dim = d_ref;
        cfg
    }

    /// Trains the teacher on the joint label of `ds` and freezes it.
    pub fn train(ds: &SyntheticDataset, d_ref: usize, cfg: &TrainConfig) -> Result<Self> {
        let model = build_model(&Self::config(d_ref, cfg.seed))?;
        let cfg = TrainConfig {
            target: Target::Joint,
            ..cfg.clone()
        };
        let outcome = train_toy(&model, ds, &cfg)?;
        let mut teacher = Self {
            model: outcome.model,
            center: vec![0.0; d_ref],
            prototypes: Vec::new(),
            val_accuracy: outcome.val_accuracy,
        };
        let train_imgs: Vec<&Image> = ds.train.iter().map(|&i| &ds.images[i]).collect();
        let raw = represent_all(&teacher.model, &train_imgs)?;
        let mut center = vec![0.0f32; d_ref];
        for z in &raw {
            for (c, v) in center.iter_mut().zip(z) {
                *c += v / raw.len() as f32;
            }
        }
        teacher.center = center;
        let zs: Vec<Vec<f32>> = raw.into_iter().map(|z| teacher.centred(z)).collect();
        for feature in FEATURES {
            for value in feature_values(ds, feature) {
                let mut mean = vec![0.0f32; d_ref];
                let mut count = 0usize;
                for (k, &i) in ds.train.iter().enumerate() {
                    if feature_value(ds, feature, i).as_deref() == Some(value.as_str()) {
                        for (m, v) in mean.iter_mut().zip(&zs[k]) {
                            *m += v;
                        }
                        count += 1;
                    }
                }
                if count == 0 {
                    continue;
                }
                normalize(&mut mean);
                teacher.prototypes.push(Prototype {
                    feature: feature.to_string(),
                    value,
                    vector: mean,
                });
            }
        }
        Ok(teacher)
    }

    fn centred(&self, mut z: Vec<f32>) -> Vec<f32> {
        for (v, c) in z.iter_mut().zip(&self.center) {
            *v -= c;
        }
        z
    }

    pub fn d_ref(&self) -> usize {
        self.center.len()
    }

    /// Reference representation `z_ref` of one image.
    pub fn encode(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.centred(super::train::represent(&self.model, image)?))
    }

    pub fn encode_all(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        Ok(represent_all(&self.model, images)?
            .into_iter()
            .map(|z| self.centred(z))
            .collect())
    }

    pub fn prototype(&self, feature: &str, value: &str) -> Result<&Prototype> {
        self.prototypes
            .iter()
            .find(|p| p.feature == feature && p.value == value)
            .ok_or_else(|| Error::Invalid(format!("no prototype for {feature}={value}")))
    }

    /// Prototypes of one feature kind, in table order.
    pub fn feature_prototypes(&self, feature: &str) -> Vec<&Prototype> {
        self.prototypes.iter().filter(|p| p.feature == feature).collect()
    }
}
