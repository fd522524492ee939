//! Voice analysis and synthesis: self-supervised decomposition of audio into
//! pitch, amplitude, linguistic and timbre features, excitation-driven
//! resynthesis, zero-shot voice conversion, and flow-based voice design.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` in production,
//! `f64` for gradient checking); concrete aliases live at the crate root.

pub mod audio;
pub mod dsp;
pub mod excitation;
pub mod flows;
pub mod grad;
pub mod nets;
pub mod objectives;
pub mod perturb;
pub mod pipeline;
pub mod scalar;

pub use scalar::Scalar;

/// Production-precision tensor.
pub type Tensor32 = grad::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = grad::Tensor<f64>;
/// Production-precision audio.
pub type Audio32 = audio::AudioBuffer<f32>;
pub type Audio64 = audio::AudioBuffer<f64>;
/// Production-precision backbone and training state.
pub type Backbone32 = pipeline::Backbone<f32>;
pub type TrainState32 = pipeline::TrainState<f32>;
/// Production-precision flow stack.
pub type FlowStack32 = flows::FlowStack<f32>;
