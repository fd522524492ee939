//! Windowed-sinc resampling: 64 taps per phase at the output grid
//! (stretched by the decimation factor when downsampling), Kaiser window
//! with beta = 8.6, cutoff at 0.95 x Nyquist of the lower rate.

use super::{AudioBuffer, AudioError};
use crate::scalar::Scalar;

const HALF_TAPS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
const CUTOFF: f64 = 0.95;

/// Resample to `target_rate`; output length is `round(len * target / src)`.
pub fn resample<T: Scalar>(buf: &AudioBuffer<T>, target_rate: u32) -> Result<AudioBuffer<T>, AudioError> {
    if target_rate == 0 || buf.sample_rate == 0 {
        return Err(AudioError::Invalid("sample rates must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = buf.sample_rate as f64;
    let tgt = target_rate as f64;
    let out_len = (buf.samples.len() as f64 * tgt / src).round() as usize;
    // Kernel stretch keeps the passband below the lower of the two Nyquists.
    let stretch = (src / tgt).max(1.0);
    let half_width = HALF_TAPS * stretch;
    let fc = CUTOFF * 0.5 / stretch;

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 * src / tgt;
        let k_lo = (center - half_width).ceil() as isize;
        let k_hi = (center + half_width).floor() as isize;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for k in k_lo..=k_hi {
            let u = k as f64 - center;
            let w = sinc(2.0 * fc * u) * kaiser(u / half_width);
            norm += w;
            if k >= 0 && (k as usize) < buf.samples.len() {
                acc += buf.samples[k as usize].to_f64c() * w;
            }
        }
        out.push(T::of(if norm != 0.0 { acc / norm } else { 0.0 }));
    }
    Ok(AudioBuffer::new(out, target_rate))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kaiser(x: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..32 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-16 {
            break;
        }
    }
    sum
}
