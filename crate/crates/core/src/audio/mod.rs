//! Audio I/O: 16-bit PCM WAV, windowed-sinc resampling, and the `NFF1`
//! container for feature maps and checkpoints.

mod features;
mod resample;
mod wav;

pub use features::{load_features, save_features, FeatureMap, NFF_MAGIC};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Mono audio: samples in `[-1, 1]` at an integer sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let e: T = self.samples.iter().map(|&s| s * s).sum();
        (e / T::of(self.samples.len() as f64)).sqrt()
    }

    /// Clamp samples into `[-1, 1]`.
    pub fn clipped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.min(T::one()).max(-T::one());
        }
        self
    }

    pub fn cast<U: Scalar>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self.samples.iter().map(|s| U::of(s.to_f64c())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}
