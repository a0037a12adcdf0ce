//! Triple disentangled representation learning for multimodal affective analysis.
//!
//! Each modality's features are encoded, split into a modality-invariant part
//! (`r*`), an effective modality-specific part (`r∩u`) and an ineffective
//! modality-specific part (`u*`). Only `r*` and `r∩u` are fused for the
//! prediction; `u*` is kept label-independent by the regularizers in
//! [`losses`].
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the command
//! line live in the companion `tridira` crate.

#![no_std]

extern crate alloc;

pub mod config;
pub mod data;
pub mod disentangler;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod projection;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Matrix;

/// The three modalities, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// The modality pairs compared by the similarity and inter-independence terms.
pub const MODALITY_PAIRS: [(Modality, Modality); 3] =
    [(Modality::Text, Modality::Audio), (Modality::Text, Modality::Visual), (Modality::Audio, Modality::Visual)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl Task {
    /// Width of the prediction head.
    pub fn output_width(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { num_classes } => num_classes,
        }
    }
}
