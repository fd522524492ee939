//! Magnitude STFT frontend.

use super::{DspError, Scale, Spectrogram};
use crate::audio::AudioBuffer;
use crate::grad;
use crate::scalar::Scalar;

/// Frames of an unpadded sliding window: `1 + floor((len - win) / hop)`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    grad::stft_frames(len, win, hop)
}

/// Hann-windowed magnitude STFT without centering; frames lie fully inside
/// the signal.
pub fn stft_mag<T: Scalar>(
    buf: &AudioBuffer<T>,
    win: usize,
    hop: usize,
) -> Result<Spectrogram<T>, DspError> {
    if hop == 0 || win < hop {
        return Err(DspError::BadWindow { win, hop });
    }
    if buf.len() < win {
        return Err(DspError::TooShort { len: buf.len(), win });
    }
    let (mags, _) = grad::stft_mag_forward(&buf.samples, win, hop, false)
        .map_err(|e| DspError::Invalid(e.to_string()))?;
    Ok(Spectrogram { mags, hop, win, scale: Scale::Linear })
}
