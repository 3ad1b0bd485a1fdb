// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy transformer zoo, synthetic datasets, the toy trainer and the frozen
//! teacher encoder.

pub mod config;
pub mod dataset;
pub mod teacher;
pub mod train;
pub mod vit;

pub use config::{ModelConfig, Variant};
pub use dataset::{DatasetSpec, SyntheticDataset};
pub use teacher::TeacherEncoder;
pub use train::{ClassifierHead, TrainConfig, TrainOutcome};
pub use vit::{build_model, Image, Model, Recorded};
