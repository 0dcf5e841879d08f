//! LoDa: local-distortion features from a frozen CNN injected into a frozen
//! ViT through gated cross-attention, for no-reference image quality
//! assessment.
//!
//! The crate covers the model ([`backbones`], [`adaptation`]), the loss and
//! evaluation statistics ([`metrics`]), the Fourier feature analysis
//! ([`spectrum`]), training and split evaluation ([`train`]), and the
//! synthetic data, file formats and CLI plumbing ([`data`], [`cli`]).

pub mod adaptation;
pub mod backbones;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod spectrum;
pub mod train;

pub use adaptation::{Forward, LodaModel};
pub use config::{AdapterConfig, CnnConfig, Config, DataConfig, Mode, TrainConfig, VitConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
