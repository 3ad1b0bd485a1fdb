// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component-level decomposition and interpretation of toy vision
//! transformers.
//!
//! A forward pass is recorded on a [`graph::Tape`]; [`decompose`] rewrites
//! the final representation as a sum of direct contributions of attention
//! heads, MLPs and tokens; [`align`] maps those contributions into a frozen
//! teacher's space; [`attribution`] scores components per feature; and
//! [`applications`] builds retrieval, heatmaps and ablations on top.

pub mod align;
pub mod applications;
pub mod artifact;
pub mod attribution;
pub mod decompose;
pub mod error;
pub mod graph;
pub mod models;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
