//! Desk-scale modality-invariant representation learning: a small reverse-mode
//! autodiff engine, paired-modality encoders, a gated cross-attention
//! generator, a modality discriminator, a contrastive alignment loss, and the
//! two-phase trainer that ties them together.

pub mod adversary;
pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod mim;
pub mod mirgen;
pub mod model;
pub mod nn;
pub mod params;
pub mod recognition;
pub mod synthdata;
pub mod towers;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{AblationMode, Model, ModelConfig};
pub use recognition::ModalityMode;
