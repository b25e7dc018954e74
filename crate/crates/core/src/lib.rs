//! Sketch colorization and label-to-photo translation with adversarial
//! segmentation consistency losses.

pub mod ablation;
pub mod archive;
pub mod autodiff;
pub mod config;
pub mod datapipe;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod segbackend;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type SegBackend32 = segbackend::SegBackend<f32>;
pub type SegBackend64 = segbackend::SegBackend<f64>;
