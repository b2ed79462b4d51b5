//! Pixelated semantic colorization: an autoregressive chroma generator in
//! Lab space, conditioned on a gray-scale embedding and jointly trained with
//! a semantic-segmentation branch.

pub mod backbone;
pub mod colorspace;
pub mod config;
pub mod conv;
pub mod data;
pub mod dmol;
pub mod error;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod real;
pub mod tensor;
pub mod training;

pub use backbone::{Backbone, ModelConfig};
pub use colorspace::{ChromaMap, GrayImage, LabImage, QuantizedChroma, RgbImage};
pub use dmol::{DmolConfig, DmolParams};
pub use error::{Error, Result};
pub use generator::{FusionMode, SampleOptions};
pub use model::ColorizationModel;
pub use params::ParamStore;
pub use tensor::Tensor;
pub use training::{Checkpoint, Regime, TrainConfig, Trainer};
