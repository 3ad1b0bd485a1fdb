// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vitdecomp::models::dataset::{chi_square_independence, gen_synthetic};
use vitdecomp::models::train::{represent_all, train_toy, Target};
use vitdecomp::models::{
    build_model, ClassifierHead, DatasetSpec, Image, ModelConfig, TeacherEncoder, TrainConfig, Variant,
};

fn val_images(ds: &vitdecomp::models::SyntheticDataset) -> (Vec<&Image>, Vec<usize>) {
    (
        ds.val.iter().map(|&i| &ds.images[i]).collect(),
        ds.val.iter().map(|&i| ds.labels[i]).collect(),
    )
}

#[test]
fn skewed_split_follows_rho() {
    let ds = gen_synthetic(&DatasetSpec::new(4, 2, 0.95, 0.5), 3).unwrap();
    let class0: Vec<usize> = ds.train.iter().copied().filter(|&i| ds.labels[i] == 0).collect();
    let on_bg0 = class0.iter().filter(|&&i| ds.groups[i] == 0).count();
    assert!(on_bg0 as f64 / class0.len() as f64 >= 0.93);
}

#[test]
fn balanced_split_is_independent() {
    let ds = gen_synthetic(&DatasetSpec::new(4, 2, 0.5, 0.5), 4).unwrap();
    let (_, p) = chi_square_independence(&ds.labels, &ds.groups);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn generation_is_deterministic() {
    let spec = DatasetSpec::new(2, 2, 0.9, 0.5);
    let a = gen_synthetic(&spec, 9).unwrap();
    let b = gen_synthetic(&spec, 9).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.train, b.train);
}

#[test]
fn build_vanilla_cls_records_four_blocks() {
    let model = build_model(&ModelConfig::new(Variant::VanillaCls, 0)).unwrap();
    let img = Image::new(32, vec![0.5; 32 * 32 * 3]).unwrap();
    let rec = model.record(&img).unwrap();
    assert_eq!(rec.z().len(), 32);
    let dump = rec.tape.dump();
    assert_eq!(dump.lines().filter(|l| l.contains(" gelu ")).count(), 4);
    assert_eq!(dump.lines().filter(|l| l.contains(" softmax ")).count(), 16);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::new(Variant::VanillaCls, 0);
    cfg.heads = 5;
    assert!(build_model(&cfg).is_err());
    let mut cfg = ModelConfig::new(Variant::Windowed, 0);
    cfg.window = 3;
    assert!(build_model(&cfg).is_err());
}

#[test]
fn untrained_model_is_at_chance() {
    let ds = gen_synthetic(&DatasetSpec::new(4, 2, 0.5, 0.5), 5).unwrap();
    let model = build_model(&ModelConfig::new(Variant::VanillaCls, 5)).unwrap();
    let (imgs, labels) = val_images(&ds);
    let zs = represent_all(&model, &imgs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut head = ClassifierHead::zeros(32, 4);
    head.w.iter_mut().for_each(|w| *w = rng.sample::<f32, _>(StandardNormal) * 0.1);
    let acc = head.accuracy(&zs, &labels);
    assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn trained_vanilla_cls_reaches_ninety_percent() {
    let ds = gen_synthetic(&DatasetSpec::new(4, 2, 0.5, 0.5), 1).unwrap();
    let model = build_model(&ModelConfig::new(Variant::VanillaCls, 1)).unwrap();
    let out = train_toy(&model, &ds, &TrainConfig { epochs: 20, seed: 1, ..Default::default() }).unwrap();
    assert!(out.val_accuracy >= 0.90, "{}", out.val_accuracy);
    assert!(out.loss_curve.first() > out.loss_curve.last());
}

#[test]
fn teacher_prototypes_match_class_means() {
    let mut spec = DatasetSpec::new(2, 2, 0.5, 0.5);
    spec.n_train = 400;
    spec.n_val = 100;
    let ds = gen_synthetic(&spec, 2).unwrap();
    let teacher = TeacherEncoder::train(&ds, 16, &TrainConfig { epochs: 4, seed: 2, target: Target::Joint, ..Default::default() }).unwrap();
    let imgs: Vec<&Image> = ds.train.iter().map(|&i| &ds.images[i]).collect();
    let z = teacher.encode_all(&imgs).unwrap();
    for shape in 0..2 {
        let mut mean = vec![0.0f64; 16];
        for (k, &i) in ds.train.iter().enumerate() {
            if ds.labels[i] == shape {
                mean.iter_mut().zip(&z[k]).for_each(|(m, v)| *m += *v as f64);
            }
        }
        let proto = &teacher.prototype("shape", &ds.spec.foregrounds[shape]).unwrap().vector;
        let norm_p = proto.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm_p - 1.0).abs() < 1e-5);
        let norm_m = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = proto.iter().zip(&mean).map(|(p, m)| *p as f64 * m).sum::<f64>() / norm_m;
        assert!(cos >= 0.9, "cos {cos}");
    }
}
