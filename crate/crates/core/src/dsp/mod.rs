//! Deterministic spectral transforms: magnitude STFT, log-mel spectrogram,
//! constant-Q transform, and the random frequency crop pair that drives the
//! relative-pitch objective.

mod cqt;
mod mel;
mod stft;

pub use cqt::{cqt, cqt_crop_pair, fixed_crop, CqtCropPair, CqtMatrix, CqtPlan, CQT_BASE_OFFSET,
    CQT_BINS, CQT_BINS_PER_OCTAVE, CQT_F_MAX, CQT_F_MIN, CQT_SCOPE, CQT_SHIFT_MAX};
pub use mel::{mel_filterbank, mel_spectrogram, MEL_LOG_FLOOR};
pub use stft::{frame_count, stft_mag};

use crate::grad::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one window of {win}")]
    TooShort { len: usize, win: usize },
    #[error("invalid window/hop: win {win}, hop {hop}")]
    BadWindow { win: usize, hop: usize },
    #[error("sample rate {sr} Hz is below the Nyquist requirement {required} Hz")]
    SampleRateTooLow { sr: u32, required: u32 },
    #[error("{0}")]
    Invalid(String),
}

/// Frequency scale of a spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Mel,
}

/// Time x bin magnitude (or log-magnitude) matrix.
#[derive(Clone, Debug)]
pub struct Spectrogram<T> {
    pub mags: Tensor<T>,
    pub hop: usize,
    pub win: usize,
    pub scale: Scale,
}

impl<T: crate::scalar::Scalar> Spectrogram<T> {
    pub fn frames(&self) -> usize {
        self.mags.dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.mags.dims()[1]
    }
}
