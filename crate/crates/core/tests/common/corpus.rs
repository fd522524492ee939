//! Synthetic single-voice corpus with known per-frame F0: sawtooth-flavored
//! harmonic segments shaped by a fixed formant envelope, separated by pauses,
//! with optional noise-mixed copies. Ground truth comes from the generator's
//! own f0 contour.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vasyn::audio::AudioBuffer;
use vasyn::perturb::{additive_noise, NoiseBank};

pub const SR: u32 = 16000;
pub const HOP: usize = 256;

/// One generated clip and its per-frame ground truth (0 = unvoiced).
pub struct CorpusClip {
    pub audio: AudioBuffer<f32>,
    pub f0_frames: Vec<f32>,
}

/// Fixed "vocal tract" of the synthetic voice.
fn formant_gain(f: f64) -> f64 {
    const FORMANTS: [(f64, f64); 4] = [(550.0, 90.0), (1150.0, 140.0), (2450.0, 220.0), (3500.0, 300.0)];
    0.05 + FORMANTS.iter().map(|&(c, w)| (-0.5 * ((f - c) / w).powi(2)).exp()).sum::<f64>()
}

/// Generate one clip: voiced segments of 0.3..0.6 s with glides and vibrato
/// around a per-clip base F0 in [90, 360] Hz, separated by 80..180 ms gaps.
pub fn voice_clip(seed: u64, secs: f64) -> CorpusClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let len = (SR as f64 * secs) as usize;
    let base_f0 = 90.0 * (360.0f64 / 90.0).powf(rng.gen_range(0.0..1.0));
    let mut samples = vec![0.0f64; len];
    let mut f0_per_sample = vec![0.0f64; len];

    let mut t = (SR as f64 * rng.gen_range(0.02..0.08)) as usize;
    while t + SR as usize / 8 < len {
        let seg_len = (SR as f64 * rng.gen_range(0.3..0.6)) as usize;
        let seg_end = (t + seg_len).min(len);
        let n = seg_end - t;
        let st_a: f64 = rng.gen_range(-1.5..1.5);
        let st_b: f64 = rng.gen_range(-1.5..1.5);
        let sustain: f64 = rng.gen_range(0.3..0.55);
        let vib_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let fade = (SR as usize * 25 / 1000).min(n / 3);

        // phase-accumulated harmonics keep the contour glitch-free
        let mut phases = [0.0f64; 24];
        for i in 0..n {
            let frac = i as f64 / n as f64;
            let st = st_a + (st_b - st_a) * frac
                + 0.25 * (std::f64::consts::TAU * 5.5 * i as f64 / SR as f64 + vib_phase).sin();
            let f0 = base_f0 * 2f64.powf(st / 12.0);
            f0_per_sample[t + i] = f0;
            let env_edge = if i < fade {
                0.5 - 0.5 * (std::f64::consts::PI * (1.0 - i as f64 / fade as f64)).cos()
            } else if i + fade > n {
                0.5 - 0.5 * (std::f64::consts::PI * ((n - i) as f64 / fade as f64)).cos()
            } else {
                1.0
            };
            let am = 1.0 - 0.15 * (std::f64::consts::TAU * 2.5 * i as f64 / SR as f64).sin();
            let env = sustain * env_edge * am;
            let k_max = ((7200.0 / f0) as usize).clamp(1, 24);
            let mut v = 0.0;
            for (k, ph) in phases.iter_mut().enumerate().take(k_max) {
                let kf = (k + 1) as f64;
                *ph += std::f64::consts::TAU * kf * f0 / SR as f64;
                let boost = if k == 0 { 1.6 } else { 1.0 };
                v += boost * kf.powf(-0.8) * formant_gain(kf * f0) * ph.sin();
            }
            // light breathiness keeps the aperiodic head honest
            let breath = 0.02 * rng.gen_range(-1.0..1.0);
            samples[t + i] = env * (0.28 * v + breath);
        }
        // edge frames of a segment count as unvoiced ground truth
        for i in 0..fade.min(n) {
            f0_per_sample[t + i] = 0.0;
            f0_per_sample[seg_end - 1 - i] = 0.0;
        }
        t = seg_end + (SR as f64 * rng.gen_range(0.08..0.18)) as usize;
    }
    for s in samples.iter_mut() {
        *s += 0.004 * rng.gen_range(-1.0..1.0);
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.95 {
        let k = 0.95 / peak;
        for s in samples.iter_mut() {
            *s *= k;
        }
    }

    let frames = 1 + (len - HOP) / HOP;
    let f0_frames = (0..frames)
        .map(|n| {
            let c = n * HOP + HOP / 2;
            f0_per_sample[c] as f32
        })
        .collect();
    CorpusClip {
        audio: AudioBuffer::new(samples.into_iter().map(|v| v as f32).collect(), SR),
        f0_frames,
    }
}

/// Synthetic noise recordings: white, pink-ish, and hum-plus-hiss.
pub fn noise_buffers() -> Vec<AudioBuffer<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbadc0de);
    let len = 5 * SR as usize;
    let white: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let mut pink = vec![0.0f32; len];
    let mut state = 0.0f32;
    for (p, _) in pink.iter_mut().zip(0..) {
        state = 0.97 * state + 0.03 * rng.gen_range(-1.0f32..1.0);
        *p = 8.0 * state;
    }
    let hum: Vec<f32> = (0..len)
        .map(|t| {
            let h = (std::f32::consts::TAU * 120.0 * t as f32 / SR as f32).sin();
            0.3 * h + rng.gen_range(-0.2f32..0.2)
        })
        .collect();
    vec![
        AudioBuffer::new(white, SR),
        AudioBuffer::new(pink, SR),
        AudioBuffer::new(hum, SR),
    ]
}

/// Training corpus: `n` clips of `secs` seconds; every fourth clip is mixed
/// with bank noise at a random SNR in [5, 25] dB (its frame truth is the
/// clean contour).
pub fn training_corpus(
    n: usize,
    secs: f64,
    base_seed: u64,
) -> (Vec<AudioBuffer<f32>>, Vec<CorpusClip>, NoiseBank<f32>) {
    let bank = NoiseBank::from_buffers(noise_buffers());
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0x5eed5);
    let clips: Vec<CorpusClip> = (0..n).map(|i| voice_clip(base_seed + i as u64, secs)).collect();
    let buffers = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i % 4 == 0 {
                let noise = &bank.buffers[rng.gen_range(0..bank.buffers.len())];
                let snr = rng.gen_range(5.0..25.0);
                additive_noise(&c.audio, noise, snr).expect("noise mix")
            } else {
                c.audio.clone()
            }
        })
        .collect();
    (buffers, clips, bank)
}

/// Mean absolute F0 error in semitones over truth-voiced interior frames.
pub fn f0_mae_semitones(estimated_raw: &[f32], truth: &[f32]) -> f64 {
    let n = estimated_raw.len().min(truth.len());
    let mut errs = Vec::new();
    for i in 2..n.saturating_sub(2) {
        if truth[i] > 0.0 {
            let e = 12.0 * (estimated_raw[i] as f64 / truth[i] as f64).log2();
            errs.push(e.abs());
        }
    }
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}
