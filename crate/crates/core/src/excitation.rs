//! Excitation synthesis: frame-level pitch/amplitude tracks become a
//! sample-level sum of a cumulative-phase sinusoid and amplitude-shaped
//! uniform noise. The training path rebuilds the same arithmetic on the
//! gradient tape; these functions are the plain inference route.

use rand::Rng;
use thiserror::Error;

use crate::grad::{upsample_linear_forward, Tensor};
use crate::scalar::Scalar;

/// Pitch encoder range; `f0 = 0` is the unvoiced sentinel.
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum ExcitationError {
    #[error("pitch track is empty")]
    Empty,
    #[error("output length must be >= 1")]
    BadLength,
    #[error("track lengths differ: f0 {f0}, a_p {a_p}, a_ap {a_ap}")]
    Mismatched { f0: usize, a_p: usize, a_ap: usize },
    #[error("f0[{idx}] = {value} outside 0 or [{lo}, {hi}]", lo = F0_MIN, hi = F0_MAX)]
    F0OutOfRange { idx: usize, value: f64 },
}

/// Per-frame fundamental frequency and periodic/aperiodic amplitudes.
#[derive(Clone, Debug)]
pub struct PitchTrack<T> {
    /// Hz; 0 marks unvoiced frames, voiced values lie in `[50, 1000]`.
    pub f0: Vec<T>,
    pub a_p: Vec<T>,
    pub a_ap: Vec<T>,
    pub hop: usize,
}

impl<T: Scalar> PitchTrack<T> {
    pub fn validate(&self) -> Result<(), ExcitationError> {
        if self.f0.is_empty() {
            return Err(ExcitationError::Empty);
        }
        if self.f0.len() != self.a_p.len() || self.f0.len() != self.a_ap.len() {
            return Err(ExcitationError::Mismatched {
                f0: self.f0.len(),
                a_p: self.a_p.len(),
                a_ap: self.a_ap.len(),
            });
        }
        for (i, &f) in self.f0.iter().enumerate() {
            let v = f.to_f64c();
            if v != 0.0 && !(F0_MIN..=F0_MAX).contains(&v) {
                return Err(ExcitationError::F0OutOfRange { idx: i, value: v });
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.f0.len()
    }
}

/// Excitation signal `z = x + y`, with the sinusoidal and noise components
/// kept for inspection.
#[derive(Clone, Debug)]
pub struct ExcitationSignal<T> {
    pub z: Vec<T>,
    pub sinusoid: Vec<T>,
    pub noise: Vec<T>,
}

/// Frame-to-sample linear interpolation; frame `n` is anchored at sample
/// `n * hop` and the last frame value is held to `out_len`.
pub fn upsample_linear<T: Scalar>(
    track: &[T],
    hop: usize,
    out_len: usize,
) -> Result<Vec<T>, ExcitationError> {
    if track.is_empty() {
        return Err(ExcitationError::Empty);
    }
    if out_len < 1 || hop == 0 {
        return Err(ExcitationError::BadLength);
    }
    let t = Tensor::from_slice(&[track.len()], track).expect("track dims");
    Ok(upsample_linear_forward(&t, hop, out_len).expect("upsample args").into_data())
}

/// Cumulative-phase sinusoid `x[t] = a_p[t] * sin(sum_{k=1..t} 2π f0[k]/sr)`.
/// Unvoiced samples (`f0 = 0`) accumulate no phase; the phase is wrapped
/// modulo 2π each step so long signals do not lose precision.
pub fn sinusoid<T: Scalar>(f0_samples: &[T], a_p_samples: &[T], sample_rate: u32) -> Vec<T> {
    debug_assert_eq!(f0_samples.len(), a_p_samples.len());
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let inv_sr = T::of(1.0 / sample_rate as f64);
    let mut phase = T::zero();
    let mut out = Vec::with_capacity(f0_samples.len());
    for (t, (&f, &a)) in f0_samples.iter().zip(a_p_samples).enumerate() {
        if t > 0 {
            phase = phase + two_pi * f * inv_sr;
            if phase > two_pi {
                phase = phase - two_pi;
            }
        }
        out.push(a * phase.sin());
    }
    out
}

/// Shaped noise `y[t] = a_ap[t] * n[t]`, `n ~ U[-1, 1]`.
pub fn shaped_noise<T: Scalar, R: Rng + ?Sized>(a_ap_samples: &[T], rng: &mut R) -> Vec<T> {
    a_ap_samples.iter().map(|&a| a * T::uniform(rng, -T::one(), T::one())).collect()
}

/// Compose upsampling, sinusoid and shaped noise into the excitation signal.
pub fn make_excitation<T: Scalar, R: Rng + ?Sized>(
    track: &PitchTrack<T>,
    out_len: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Result<ExcitationSignal<T>, ExcitationError> {
    track.validate()?;
    let f0 = upsample_linear(&track.f0, track.hop, out_len)?;
    let a_p = upsample_linear(&track.a_p, track.hop, out_len)?;
    let a_ap = upsample_linear(&track.a_ap, track.hop, out_len)?;
    let sinusoid = sinusoid(&f0, &a_p, sample_rate);
    let noise = shaped_noise(&a_ap, rng);
    let z = sinusoid.iter().zip(&noise).map(|(&x, &y)| x + y).collect();
    Ok(ExcitationSignal { z, sinusoid, noise })
}
