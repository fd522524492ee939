//! Log-mel spectrogram with an HTK-style triangular filterbank.

use super::{stft, DspError, Scale, Spectrogram};
use crate::audio::AudioBuffer;
use crate::grad::Tensor;
use crate::scalar::Scalar;

/// Additive floor inside the log.
pub const MEL_LOG_FLOOR: f64 = 1e-5;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank `[bins, n_mels]` spanning 0..Nyquist, HTK mel scale,
/// unnormalized triangles.
pub fn mel_filterbank<T: Scalar>(sample_rate: u32, win: usize, n_mels: usize) -> Tensor<T> {
    let bins = win / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> =
        (0..n_mels + 2).map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = Tensor::zeros(&[bins, n_mels]);
    for b in 0..bins {
        let f = b as f64 * sample_rate as f64 / win as f64;
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb.data_mut()[b * n_mels + m] = T::of(w);
        }
    }
    fb
}

/// Log-mel spectrogram: triangular mel filterbank over linear magnitudes,
/// then `ln(x + 1e-5)`.
pub fn mel_spectrogram<T: Scalar>(
    buf: &AudioBuffer<T>,
    n_mels: usize,
    win: usize,
    hop: usize,
) -> Result<Spectrogram<T>, DspError> {
    if n_mels < 1 {
        return Err(DspError::Invalid("n_mels must be >= 1".into()));
    }
    let lin = stft::stft_mag(buf, win, hop)?;
    let fb = mel_filterbank::<T>(buf.sample_rate, win, n_mels);
    let mel = crate::grad::matmul(&lin.mags, &fb).expect("filterbank shape");
    let floor = T::of(MEL_LOG_FLOOR);
    let mags = mel.map(|v| (v + floor).ln());
    Ok(Spectrogram { mags, hop, win, scale: Scale::Mel })
}
