//! Information perturbation: formant shift, pitch randomization, parametric
//! EQ, breathiness and additive noise. Two independently perturbed views of
//! an utterance feed the contrastive linguistic objective; every function
//! preserves duration exactly.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{read_wav, AudioBuffer, AudioError};
use crate::grad::hann;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("signal is silent; SNR undefined")]
    SilentSignal,
    #[error("noise has zero energy")]
    SilentNoise,
    #[error("noise bank is empty")]
    EmptyNoiseBank,
    #[error("{0}")]
    Audio(#[from] AudioError),
    #[error("{0}")]
    Invalid(String),
}

/// Ranges for the random perturbation chain.
#[derive(Clone, Debug)]
pub struct PerturbConfig {
    /// Formant warp ratio drawn from this range, inverted with probability 0.5.
    pub formant_ratio: (f64, f64),
    /// Pitch shift in semitones, uniform in `[-lo, hi]`.
    pub pitch_semitones: (f64, f64),
    /// Per-band EQ gain range in dB.
    pub eq_gain_db: (f64, f64),
    /// Relative breathiness gain range.
    pub breathiness: (f64, f64),
    /// SNR range for additive noise in dB.
    pub noise_snr_db: (f64, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            formant_ratio: (1.0, 1.4),
            pitch_semitones: (-12.0, 12.0),
            eq_gain_db: (-12.0, 12.0),
            breathiness: (0.0, 0.1),
            noise_snr_db: (5.0, 25.0),
        }
    }
}

/// Noise recordings for additive-noise perturbation.
#[derive(Clone, Debug, Default)]
pub struct NoiseBank<T> {
    pub buffers: Vec<AudioBuffer<T>>,
}

impl<T: Scalar> NoiseBank<T> {
    pub fn from_buffers(buffers: Vec<AudioBuffer<T>>) -> Self {
        Self { buffers }
    }

    /// Load every `.wav` in a directory, resampled to `sample_rate`.
    pub fn from_dir(dir: impl AsRef<std::path::Path>, sample_rate: u32) -> Result<Self, PerturbError> {
        let mut buffers = Vec::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(AudioError::Io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        paths.sort();
        for p in paths {
            let buf = read_wav::<T>(&p)?;
            buffers.push(crate::audio::resample(&buf, sample_rate)?);
        }
        Ok(Self { buffers })
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

const ENV_WIN: usize = 1024;
const ENV_HOP: usize = 256;
/// Cepstral lifter order for envelope estimation at 16 kHz.
const LIFTER_ORDER: usize = 30;
const ENV_LOG_FLOOR: f64 = 1e-10;

/// Overlap-add reprocessing: each Hann-windowed frame's spectrum is handed
/// to `proc`, the edited frame is windowed again and accumulated, and the
/// result is normalized by the window-square overlap. With an identity
/// `proc` the signal is reconstructed exactly.
fn ola_process<T: Scalar>(
    x: &[T],
    mut proc: impl FnMut(usize, &mut [Complex<f64>]),
) -> Vec<T> {
    let win = ENV_WIN;
    let hop = ENV_HOP;
    let len = x.len();
    let window = hann::<f64>(win);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let ifft = planner.plan_fft_inverse(win);
    let n_frames = len.div_ceil(hop) + win / hop;
    let mut acc = vec![0.0f64; len];
    let mut den = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for n in 0..n_frames {
        let start = n as isize * hop as isize - (win / 2) as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let t = start + i as isize;
            let v = if t >= 0 && (t as usize) < len { x[t as usize].to_f64c() } else { 0.0 };
            *b = Complex::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        proc(n, &mut buf);
        ifft.process(&mut buf);
        let inv_win = 1.0 / win as f64;
        for i in 0..win {
            let t = start + i as isize;
            if t >= 0 && (t as usize) < len {
                acc[t as usize] += buf[i].re * inv_win * window[i];
                den[t as usize] += window[i] * window[i];
            }
        }
    }
    (0..len).map(|t| T::of(acc[t] / den[t].max(1e-8))).collect()
}

/// Log spectral envelope of one frame via cepstral liftering: keep the first
/// `LIFTER_ORDER` quefrency coefficients of `log|X|` and transform back.
fn log_envelope(spectrum: &[Complex<f64>], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let win = spectrum.len();
    let mut ceps: Vec<Complex<f64>> =
        spectrum.iter().map(|c| Complex::new((c.norm() + ENV_LOG_FLOOR).ln(), 0.0)).collect();
    planner.plan_fft_inverse(win).process(&mut ceps);
    let inv = 1.0 / win as f64;
    for (q, c) in ceps.iter_mut().enumerate() {
        let keep = q <= LIFTER_ORDER || q >= win - LIFTER_ORDER;
        *c = if keep { *c * inv } else { Complex::new(0.0, 0.0) };
    }
    planner.plan_fft_forward(win).process(&mut ceps);
    ceps.iter().map(|c| c.re).collect()
}

/// Warp the spectral envelope along frequency by `ratio`, preserving the
/// excitation residual; duration and RMS are preserved.
pub fn formant_shift<T: Scalar>(buf: &AudioBuffer<T>, ratio: f64) -> Result<AudioBuffer<T>, PerturbError> {
    if ratio <= 0.0 {
        return Err(PerturbError::Invalid(format!("formant ratio {ratio} must be positive")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let out = ola_process(&buf.samples, |_, spec| {
        let win = spec.len();
        let half = win / 2;
        let log_env = log_envelope(spec, &mut planner);
        // residual = X / E; new spectrum = residual * E(f / ratio)
        let mut edited = vec![Complex::new(0.0, 0.0); win];
        for k in 0..=half {
            let src = (k as f64 / ratio).min(half as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(half);
            let frac = src - i0 as f64;
            let warped = log_env[i0] * (1.0 - frac) + log_env[i1] * frac;
            let gain = (warped - log_env[k]).exp();
            edited[k] = spec[k] * gain;
            if k > 0 && k < half {
                edited[win - k] = edited[k].conj();
            }
        }
        spec.copy_from_slice(&edited);
    });
    let mut out = AudioBuffer::new(out, buf.sample_rate);
    let (r_in, r_out) = (buf.rms().to_f64c(), out.rms().to_f64c());
    if r_in > 1e-8 && r_out > 1e-8 {
        let s = T::of(r_in / r_out);
        for v in &mut out.samples {
            *v *= s;
        }
    }
    Ok(out)
}

/// Pitch shift without duration change: resample by `2^(s/12)`, then
/// time-stretch back with waveform-similarity overlap-add. Grain positions
/// are refined by cross-correlation against the natural continuation of the
/// previous grain, so periodic content stays phase-coherent.
pub fn pitch_randomize<T: Scalar>(
    buf: &AudioBuffer<T>,
    semitones: f64,
) -> Result<AudioBuffer<T>, PerturbError> {
    if semitones.abs() > 12.0 {
        return Err(PerturbError::Invalid(format!("|{semitones}| semitones exceeds 12")));
    }
    if semitones == 0.0 {
        return Ok(buf.clone());
    }
    let r = 2f64.powf(semitones / 12.0);
    let tmp_rate = (buf.sample_rate as f64 / r).round() as u32;
    // Reinterpreting the squeezed samples at the original rate scales every
    // frequency by r; WSOLA below restores the original duration.
    let short: Vec<f64> =
        crate::audio::resample(buf, tmp_rate)?.samples.iter().map(|s| s.to_f64c()).collect();
    let len = buf.len();
    let src_len = short.len();
    let win = 1024.min(src_len.max(2) & !1);
    let hop = win / 2;
    let search = 300isize.min(src_len as isize / 4);
    let window = hann::<f64>(win);
    let mut acc = vec![0.0f64; len];
    let mut den = vec![0.0f64; len];
    let scale = src_len as f64 / len as f64;
    let max_start = src_len.saturating_sub(win) as isize;
    let clamp = |p: isize| p.clamp(0, max_start) as usize;
    let mut prev_chosen: isize = 0;
    let n_frames = len.div_ceil(hop);
    for n in 0..n_frames {
        let out_start = n * hop;
        let nominal = ((out_start as f64) * scale).round() as isize;
        let chosen = if n == 0 {
            clamp(nominal)
        } else {
            // most similar segment to where the previous grain would continue
            let target = clamp(prev_chosen + hop as isize);
            let cont = &short[target..target + win];
            let mut best = (clamp(nominal), f64::MIN);
            for delta in -search..=search {
                let cand = clamp(nominal + delta);
                let seg = &short[cand..cand + win];
                let score: f64 = seg.iter().zip(cont).map(|(a, b)| a * b).sum();
                if score > best.1 {
                    best = (cand, score);
                }
            }
            best.0
        };
        prev_chosen = chosen as isize;
        for i in 0..win {
            let t_out = out_start + i;
            if t_out >= len {
                break;
            }
            acc[t_out] += short[chosen + i] * window[i];
            den[t_out] += window[i];
        }
    }
    let samples = (0..len).map(|t| T::of(acc[t] / den[t].max(1e-8))).collect();
    Ok(AudioBuffer::new(samples, buf.sample_rate))
}

/// One RBJ peaking biquad, direct form I.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn peaking(freq: f64, sample_rate: f64, q: f64, gain_db: f64) -> Self {
        let a_lin = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * freq / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let b0 = 1.0 + alpha * a_lin;
        let b1 = -2.0 * w0.cos();
        let b2 = 1.0 - alpha * a_lin;
        let a0 = 1.0 + alpha / a_lin;
        let a1 = b1;
        let a2 = 1.0 - alpha / a_lin;
        Self { b: [b0 / a0, b1 / a0, b2 / a0], a: [a1 / a0, a2 / a0] }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

pub const EQ_BANDS: usize = 8;

/// Center frequencies of the EQ bands: log-spaced 60 Hz .. 0.9 x Nyquist.
pub fn eq_band_frequencies(sample_rate: u32) -> [f64; EQ_BANDS] {
    let lo = 60.0f64;
    let hi = 0.9 * sample_rate as f64 / 2.0;
    let mut out = [0.0; EQ_BANDS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = lo * (hi / lo).powf(i as f64 / (EQ_BANDS - 1) as f64);
    }
    out
}

/// Cascade of 8 peaking biquads with Q = 1.
pub fn parametric_eq<T: Scalar>(
    buf: &AudioBuffer<T>,
    gains_db: &[f64; EQ_BANDS],
) -> Result<AudioBuffer<T>, PerturbError> {
    let freqs = eq_band_frequencies(buf.sample_rate);
    let mut x: Vec<f64> = buf.samples.iter().map(|s| s.to_f64c()).collect();
    for (f, g) in freqs.iter().zip(gains_db) {
        Biquad::peaking(*f, buf.sample_rate as f64, 1.0, *g).run(&mut x);
    }
    Ok(AudioBuffer::new(x.into_iter().map(T::of).collect(), buf.sample_rate))
}

/// Add spectral-envelope-shaped noise at a relative gain; `gain` scales
/// shaped noise normalized to the signal's RMS, so `gain = 0.1` lands near
/// 20 dB SNR.
pub fn breathiness<T: Scalar, R: Rng + ?Sized>(
    buf: &AudioBuffer<T>,
    gain: f64,
    rng: &mut R,
) -> Result<AudioBuffer<T>, PerturbError> {
    if gain < 0.0 {
        return Err(PerturbError::Invalid(format!("breathiness gain {gain} must be >= 0")));
    }
    if gain == 0.0 {
        return Ok(buf.clone());
    }
    let len = buf.len();
    let white: Vec<T> = (0..len).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    // Shape white noise by the signal's per-frame envelope: both signals are
    // framed in lockstep; the noise frame spectrum is multiplied by the
    // signal frame's envelope.
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(ENV_WIN);
    let signal = &buf.samples;
    let window = hann::<f64>(ENV_WIN);
    let mut sig_frame = vec![Complex::new(0.0, 0.0); ENV_WIN];
    let shaped = ola_process(&white, |n, spec| {
        let start = n as isize * ENV_HOP as isize - (ENV_WIN / 2) as isize;
        for (i, b) in sig_frame.iter_mut().enumerate() {
            let t = start + i as isize;
            let v = if t >= 0 && (t as usize) < signal.len() { signal[t as usize].to_f64c() } else { 0.0 };
            *b = Complex::new(v * window[i], 0.0);
        }
        fft.process(&mut sig_frame);
        // log_envelope is symmetric in k, so scaling all bins keeps the
        // spectrum conjugate-symmetric.
        let env = log_envelope(&sig_frame, &mut planner);
        for (s, e) in spec.iter_mut().zip(&env) {
            *s *= e.exp();
        }
    });
    let shaped = AudioBuffer::new(shaped, buf.sample_rate);
    let (r_sig, r_noise) = (buf.rms().to_f64c(), shaped.rms().to_f64c());
    if r_sig <= 1e-8 {
        return Ok(buf.clone());
    }
    if r_noise <= 1e-12 {
        return Err(PerturbError::SilentNoise);
    }
    let s = T::of(gain * r_sig / r_noise);
    let samples = buf.samples.iter().zip(&shaped.samples).map(|(&x, &n)| x + n * s).collect();
    Ok(AudioBuffer::new(samples, buf.sample_rate).clipped())
}

/// Mix in noise scaled to the requested SNR; the noise is looped or cropped
/// to the signal length and the sum is clipped to `[-1, 1]`.
pub fn additive_noise<T: Scalar>(
    buf: &AudioBuffer<T>,
    noise: &AudioBuffer<T>,
    snr_db: f64,
) -> Result<AudioBuffer<T>, PerturbError> {
    let r_sig = buf.rms().to_f64c();
    if r_sig <= 1e-8 {
        return Err(PerturbError::SilentSignal);
    }
    let looped: Vec<T> = (0..buf.len()).map(|i| noise.samples[i % noise.len().max(1)]).collect();
    let e: f64 = looped.iter().map(|&v| v.to_f64c() * v.to_f64c()).sum();
    let r_noise = (e / looped.len() as f64).sqrt();
    if noise.is_empty() || r_noise <= 1e-12 {
        return Err(PerturbError::SilentNoise);
    }
    let scale = T::of(r_sig / (r_noise * 10f64.powf(snr_db / 20.0)));
    let samples = buf.samples.iter().zip(&looped).map(|(&x, &n)| x + n * scale).collect();
    Ok(AudioBuffer::new(samples, buf.sample_rate).clipped())
}

/// Parameters drawn for one perturbed view, kept for reproducibility.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbParams {
    pub formant_ratio: f64,
    pub pitch_semitones: f64,
    pub eq_gains_db: [f64; EQ_BANDS],
    pub breathiness_gain: f64,
    /// (noise bank index, snr dB) when a noise bank is available.
    pub noise: Option<(usize, f64)>,
}

impl PerturbParams {
    pub fn draw<R: Rng + ?Sized>(cfg: &PerturbConfig, bank_len: usize, rng: &mut R) -> Self {
        let mut ratio = rng.gen_range(cfg.formant_ratio.0..=cfg.formant_ratio.1);
        if rng.gen::<bool>() {
            ratio = 1.0 / ratio;
        }
        let pitch = rng.gen_range(cfg.pitch_semitones.0..=cfg.pitch_semitones.1);
        let mut eq = [0.0; EQ_BANDS];
        for g in &mut eq {
            *g = rng.gen_range(cfg.eq_gain_db.0..=cfg.eq_gain_db.1);
        }
        let breath = rng.gen_range(cfg.breathiness.0..=cfg.breathiness.1);
        let noise = if bank_len > 0 {
            Some((rng.gen_range(0..bank_len), rng.gen_range(cfg.noise_snr_db.0..=cfg.noise_snr_db.1)))
        } else {
            None
        };
        Self {
            formant_ratio: ratio,
            pitch_semitones: pitch,
            eq_gains_db: eq,
            breathiness_gain: breath,
            noise,
        }
    }
}

/// Apply one drawn parameter set: formant shift, pitch randomization,
/// parametric EQ, breathiness, then additive noise.
pub fn apply_perturbation<T: Scalar, R: Rng + ?Sized>(
    buf: &AudioBuffer<T>,
    params: &PerturbParams,
    bank: &NoiseBank<T>,
    rng: &mut R,
) -> Result<AudioBuffer<T>, PerturbError> {
    let mut out = formant_shift(buf, params.formant_ratio)?;
    out = pitch_randomize(&out, params.pitch_semitones)?;
    out = parametric_eq(&out, &params.eq_gains_db)?;
    out = breathiness(&out, params.breathiness_gain, rng)?;
    if let Some((idx, snr)) = params.noise {
        match additive_noise(&out, &bank.buffers[idx], snr) {
            Ok(mixed) => out = mixed,
            // A silent crop stays silent rather than failing the chain.
            Err(PerturbError::SilentSignal) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out.clipped())
}

/// Two independently perturbed views of the same utterance.
pub fn perturbation_chain<T: Scalar, R: Rng + ?Sized>(
    buf: &AudioBuffer<T>,
    cfg: &PerturbConfig,
    bank: &NoiseBank<T>,
    rng: &mut R,
) -> Result<(AudioBuffer<T>, AudioBuffer<T>, [PerturbParams; 2]), PerturbError> {
    let p1 = PerturbParams::draw(cfg, bank.buffers.len(), rng);
    let p2 = PerturbParams::draw(cfg, bank.buffers.len(), rng);
    let v1 = apply_perturbation(buf, &p1, bank, rng)?;
    let v2 = apply_perturbation(buf, &p2, bank, rng)?;
    Ok((v1, v2, [p1, p2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Harmonic tone shaped by Gaussian formant bumps.
    fn vowel(f0: f64, sr: u32, secs: f64, formants: &[(f64, f64)]) -> AudioBuffer<f64> {
        let len = (sr as f64 * secs) as usize;
        let mut samples = vec![0.0f64; len];
        let mut k = 1;
        while k as f64 * f0 < 0.45 * sr as f64 {
            let f = k as f64 * f0;
            let amp: f64 = formants
                .iter()
                .map(|&(c, w)| (-0.5 * ((f - c) / w).powi(2)).exp())
                .sum::<f64>()
                + 0.02;
            for (t, s) in samples.iter_mut().enumerate() {
                *s += amp * (2.0 * std::f64::consts::PI * f * t as f64 / sr as f64 + k as f64).sin();
            }
            k += 1;
        }
        let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for s in &mut samples {
            *s *= 0.7 / peak;
        }
        AudioBuffer::new(samples, sr)
    }

    fn mel_distance(a: &AudioBuffer<f64>, b: &AudioBuffer<f64>) -> f64 {
        let ma = crate::dsp::mel_spectrogram(a, 80, 1024, 256).unwrap();
        let mb = crate::dsp::mel_spectrogram(b, 80, 1024, 256).unwrap();
        let n = ma.mags.len();
        ma.mags.data().iter().zip(mb.mags.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
    }

    /// Location of the strongest spectral-envelope peak, via the same
    /// cepstral smoother, averaged over frames.
    fn envelope_peak_hz(buf: &AudioBuffer<f64>, lo: f64, hi: f64) -> f64 {
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(ENV_WIN);
        let window = hann::<f64>(ENV_WIN);
        let hop = ENV_HOP;
        let frames = (buf.len() - ENV_WIN) / hop;
        let mut env_sum = vec![0.0f64; ENV_WIN];
        for n in 0..frames {
            let mut frame: Vec<Complex<f64>> = (0..ENV_WIN)
                .map(|i| Complex::new(buf.samples[n * hop + i] * window[i], 0.0))
                .collect();
            fft.process(&mut frame);
            for (acc, e) in env_sum.iter_mut().zip(log_envelope(&frame, &mut planner)) {
                *acc += e;
            }
        }
        let bin_hz = buf.sample_rate as f64 / ENV_WIN as f64;
        let (k_lo, k_hi) = ((lo / bin_hz) as usize, (hi / bin_hz) as usize);
        let k = (k_lo..k_hi)
            .max_by(|&a, &b| env_sum[a].partial_cmp(&env_sum[b]).unwrap())
            .unwrap();
        k as f64 * bin_hz
    }

    #[test]
    fn formant_shift_identity_at_unit_ratio() {
        let v = vowel(150.0, 16000, 0.5, &[(700.0, 120.0), (1800.0, 200.0)]);
        let out = formant_shift(&v, 1.0).unwrap();
        assert_eq!(out.len(), v.len());
        assert!(mel_distance(&v, &out) < 0.05);
    }

    #[test]
    fn formant_shift_moves_envelope_peak() {
        let v = vowel(130.0, 16000, 0.6, &[(700.0, 110.0)]);
        let before = envelope_peak_hz(&v, 300.0, 3200.0);
        let out = formant_shift(&v, 1.2).unwrap();
        let after = envelope_peak_hz(&out, 300.0, 3200.0);
        let ratio = after / before;
        assert!((ratio - 1.2).abs() < 0.06, "peak {before} -> {after} (ratio {ratio})");
    }

    #[test]
    fn formant_shift_preserves_rms_within_3db() {
        let v = vowel(180.0, 16000, 0.4, &[(600.0, 100.0), (1500.0, 180.0)]);
        for ratio in [0.75, 1.0, 1.4] {
            let out = formant_shift(&v, ratio).unwrap();
            let db = 20.0 * (out.rms() / v.rms()).log10();
            assert!(db.abs() < 3.0, "ratio {ratio}: {db} dB");
        }
    }

    #[test]
    fn pitch_randomize_zero_is_identity() {
        let v = vowel(200.0, 16000, 0.4, &[(800.0, 150.0)]);
        let out = pitch_randomize(&v, 0.0).unwrap();
        let corr = pearson(&v.samples, &out.samples);
        assert!(corr > 0.99, "corr {corr}");
        assert_eq!(out.len(), v.len());
    }

    #[test]
    fn pitch_randomize_octave_up_doubles_the_tone() {
        let sr = 16000;
        let len = 8192;
        let tone: Vec<f64> = (0..len)
            .map(|t| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * t as f64 / sr as f64).sin())
            .collect();
        let buf = AudioBuffer::new(tone, sr);
        let out = pitch_randomize(&buf, 12.0).unwrap();
        assert_eq!(out.len(), buf.len());
        let spec = crate::dsp::stft_mag(&out, 4096, 4096).unwrap();
        let row = spec.mags.row(0);
        let argmax = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        let hz = argmax as f64 * sr as f64 / 4096.0;
        assert!((hz - 440.0).abs() / 440.0 < 0.02, "dominant {hz} Hz");
    }

    #[test]
    fn eq_zero_gain_is_identity() {
        let v = vowel(160.0, 16000, 0.3, &[(900.0, 140.0)]);
        let out = parametric_eq(&v, &[0.0; EQ_BANDS]).unwrap();
        for (a, b) in v.samples.iter().zip(&out.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eq_band_boost_gains_12db_at_center() {
        let sr = 16000;
        let freqs = eq_band_frequencies(sr);
        let band = 4;
        let f = freqs[band];
        let len = 16000;
        let tone: Vec<f64> = (0..len)
            .map(|t| 0.05 * (2.0 * std::f64::consts::PI * f * t as f64 / sr as f64).sin())
            .collect();
        let buf = AudioBuffer::new(tone, sr);
        let mut gains = [0.0; EQ_BANDS];
        gains[band] = 12.0;
        let out = parametric_eq(&buf, &gains).unwrap();
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let db = 20.0 * (rms(&out.samples[2000..]) / rms(&buf.samples[2000..])).log10();
        assert!((db - 12.0).abs() < 0.5, "measured {db} dB at {f:.0} Hz");
    }

    #[test]
    fn eq_output_stays_finite_for_extreme_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let buf = AudioBuffer::new(samples, 16000);
        let gains = [12.0, -12.0, 12.0, -12.0, 12.0, -12.0, 12.0, -12.0];
        let out = parametric_eq(&buf, &gains).unwrap();
        assert!(out.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn breathiness_lands_near_20db_snr_and_is_seeded() {
        let v = vowel(170.0, 16000, 0.5, &[(700.0, 120.0), (2000.0, 250.0)]);
        let out = breathiness(&v, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let noise: Vec<f64> = out.samples.iter().zip(&v.samples).map(|(a, b)| a - b).collect();
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let snr = 20.0 * (v.rms() / rms(&noise)).log10();
        assert!((snr - 20.0).abs() < 2.0, "snr {snr}");
        let again = breathiness(&v, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.samples, again.samples);
        let identity = breathiness(&v, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(identity.samples, v.samples);
    }

    #[test]
    fn additive_noise_hits_requested_snr() {
        let v = vowel(140.0, 16000, 0.5, &[(600.0, 100.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = AudioBuffer::new((0..4000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000);
        let out = additive_noise(&v, &noise, 5.0).unwrap();
        let mixed: Vec<f64> = out.samples.iter().zip(&v.samples).map(|(a, b)| a - b).collect();
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let snr = 20.0 * (v.rms() / rms(&mixed)).log10();
        assert!((snr - 5.0).abs() < 0.5, "snr {snr}");

        let quiet = additive_noise(&v, &noise, 60.0).unwrap();
        assert!(pearson(&v.samples, &quiet.samples) > 0.999);

        let silent = AudioBuffer::new(vec![0.0f64; 100], 16000);
        assert!(matches!(additive_noise(&v, &silent, 5.0), Err(PerturbError::SilentNoise)));
    }

    #[test]
    fn chain_is_seeded_and_duration_preserving() {
        let v = vowel(190.0, 16000, 0.4, &[(750.0, 130.0)]);
        let cfg = PerturbConfig::default();
        let bank = NoiseBank::from_buffers(vec![AudioBuffer::new(
            (0..6000).map(|i| 0.3 * ((i as f64) * 0.71).sin()).collect(),
            16000,
        )]);
        let (a1, b1, p1) = perturbation_chain(&v, &cfg, &bank, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (a2, b2, p2) = perturbation_chain(&v, &cfg, &bank, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(a1.samples, a2.samples);
        assert_eq!(b1.samples, b2.samples);
        assert_eq!(a1.len(), v.len());
        assert_eq!(b1.len(), v.len());
        assert!(a1.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn views_differ_from_the_input() {
        let v = vowel(210.0, 16000, 0.4, &[(850.0, 140.0)]);
        let cfg = PerturbConfig::default();
        let bank = NoiseBank::default();
        for seed in 0..20 {
            let (a, b, _) =
                perturbation_chain(&v, &cfg, &bank, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(mel_distance(&v, &a) > 0.0);
            assert!(mel_distance(&v, &b) > 0.0);
        }
    }

    #[test]
    fn frame_energy_contour_survives_perturbation() {
        // Intelligibility proxy: the temporal modulation pattern correlates
        // with the input's after perturbation.
        let sr = 16000;
        let mut v = vowel(150.0, sr, 1.0, &[(700.0, 120.0), (1800.0, 200.0)]);
        for (t, s) in v.samples.iter_mut().enumerate() {
            // syllable-rate amplitude modulation
            let m = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.0 * t as f64 / sr as f64).sin();
            *s *= m;
        }
        let cfg = PerturbConfig::default();
        let bank = NoiseBank::default();
        let contour = |b: &AudioBuffer<f64>| -> Vec<f64> {
            b.samples.chunks(256).map(|c| (c.iter().map(|v| v * v).sum::<f64>()).sqrt()).collect()
        };
        let base = contour(&v);
        for seed in 0..5 {
            let (a, _, _) =
                perturbation_chain(&v, &cfg, &bank, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
            let r = pearson(&base, &contour(&a));
            assert!(r > 0.8, "seed {seed}: contour correlation {r}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt()).max(1e-12)
    }
}
