//! End-to-end orchestration: analysis into pitch/linguistic/timbre features,
//! excitation-driven resynthesis, backbone training, and zero-shot voice
//! conversion by timbre swapping with F0-statistics matching.

mod checkpoint;
mod data;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_wav_dir, Dataset, PreparedUtterance};
pub use train::{train_backbone, train_steps, TrainConfig, TrainState};

use rand::Rng;
use thiserror::Error;

use crate::audio::{resample, AudioBuffer, AudioError};
use crate::dsp::{self, DspError};
use crate::excitation::{make_excitation, ExcitationError, PitchTrack, F0_MAX, F0_MIN};
use crate::grad::{Ctx, Graph, GradError, Params, Tensor, Var};
use crate::nets::{self, NetsConfig};
use crate::objectives::{ContrastiveConfig, MssConfig};
use crate::perturb::{PerturbConfig, PerturbError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Excitation(#[from] ExcitationError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("non-finite loss at step {step}: {component}")]
    NonFiniteLoss { step: u64, component: String },
    #[error("{0}")]
    Invalid(String),
}

/// Everything the backbone needs besides its weights.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Analysis and synthesis rate (single-rate by default).
    pub sample_rate: u32,
    /// Frame hop in samples; every frame-level feature shares it.
    pub hop: usize,
    pub mel_bands: usize,
    pub mel_win: usize,
    pub nets: NetsConfig,
    pub mss: MssConfig,
    pub contrastive: ContrastiveConfig,
    pub perturb: PerturbConfig,
    pub lambda_pitch: f64,
    /// Frames with `a_p/(a_p + a_ap)` at or below this are unvoiced.
    pub voicing_threshold: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            hop: 256,
            mel_bands: 80,
            mel_win: 1024,
            nets: NetsConfig::default(),
            mss: MssConfig::default(),
            contrastive: ContrastiveConfig::default(),
            perturb: PerturbConfig::default(),
            lambda_pitch: 1.0,
            voicing_threshold: 0.5,
        }
    }
}

impl BackboneConfig {
    /// Small widths for CPU-scale training runs.
    pub fn toy() -> Self {
        Self { nets: NetsConfig::toy(), ..Self::default() }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// The four-way decomposition of one utterance. All frame-level features
/// share the frame count.
#[derive(Clone, Debug)]
pub struct AnalysisFeatures<T> {
    pub pitch: PitchTrack<T>,
    /// Encoder F0 before the voicing gate, for evaluation and statistics.
    pub raw_f0: Vec<T>,
    /// `[N, C_L]` unit-norm linguistic rows.
    pub linguistic: Tensor<T>,
    /// `[C_T]` global timbre embedding.
    pub global: Tensor<T>,
    /// `[50, C_T]` timbre tokens.
    pub tokens: Tensor<T>,
    pub frame_rate: f64,
}

impl<T: Scalar> AnalysisFeatures<T> {
    pub fn frames(&self) -> usize {
        self.pitch.frames()
    }

    fn check_consistent(&self) -> Result<(), PipelineError> {
        let n = self.frames();
        if self.linguistic.dims()[0] != n {
            return Err(PipelineError::Invalid(format!(
                "linguistic frames {} != pitch frames {}",
                self.linguistic.dims()[0],
                n
            )));
        }
        Ok(())
    }
}

/// Source of the linguistic-encoder input features.
pub enum Frontend<'a, T> {
    /// Log-mel computed from the audio (the default).
    Mel,
    /// Externally computed `[N, frontend_dim]` features (e.g. loaded from an
    /// NFF1 file) substituting for the spectral frontend.
    Provided(&'a Tensor<T>),
}

/// Trained (or freshly initialized) analysis/synthesis networks.
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(cfg: BackboneConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        cfg.nets.init_all(&mut params, &mut rng);
        Self { cfg, params }
    }

    /// Log-mel features aligned with the CQT frame grid: the buffer is
    /// padded by `(win - hop)/2` on both sides so frame `n` is centered at
    /// `n*hop + hop/2` and the frame count matches `frame_count(len, hop)`.
    pub fn aligned_log_mel(&self, samples: &[T]) -> Result<Tensor<T>, PipelineError> {
        let cfg = &self.cfg;
        let pad = (cfg.mel_win - cfg.hop) / 2;
        let mut padded = vec![T::zero(); samples.len() + 2 * pad];
        padded[pad..pad + samples.len()].copy_from_slice(samples);
        let buf = AudioBuffer::new(padded, cfg.sample_rate);
        let spec = dsp::mel_spectrogram(&buf, cfg.mel_bands, cfg.mel_win, cfg.hop)?;
        Ok(spec.mags)
    }

    /// Decompose audio into pitch, linguistic and timbre features.
    pub fn analyze(&self, buf: &AudioBuffer<T>) -> Result<AnalysisFeatures<T>, PipelineError> {
        self.analyze_with_frontend(buf, Frontend::Mel)
    }

    pub fn analyze_with_frontend(
        &self,
        buf: &AudioBuffer<T>,
        frontend: Frontend<'_, T>,
    ) -> Result<AnalysisFeatures<T>, PipelineError> {
        let cfg = &self.cfg;
        let buf = if buf.sample_rate == cfg.sample_rate {
            buf.clone()
        } else {
            resample(buf, cfg.sample_rate)?
        };
        let n = dsp::frame_count(buf.len(), cfg.hop, cfg.hop).ok_or_else(|| {
            PipelineError::Invalid(format!("audio of {} samples is shorter than one frame", buf.len()))
        })?;
        if n < 2 {
            return Err(PipelineError::Invalid("audio shorter than two frames".into()));
        }
        let cqt = dsp::cqt(&buf, cfg.hop)?;
        let crop = dsp::fixed_crop(&cqt)?;
        let mel = self.aligned_log_mel(&buf.samples)?;
        debug_assert_eq!(mel.dims()[0], n);

        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.params);
        let pitch = nets::pitch_encoder_forward(&mut ctx, &cfg.nets, &crop)?;
        let ling_feats = match frontend {
            Frontend::Mel => &mel,
            Frontend::Provided(f) => {
                if f.dims() != [n, cfg.nets.frontend_dim] {
                    return Err(PipelineError::Invalid(format!(
                        "provided frontend features {:?} != [{n}, {}]",
                        f.dims(),
                        cfg.nets.frontend_dim
                    )));
                }
                f
            }
        };
        let linguistic = nets::linguistic_encoder_forward(&mut ctx, &cfg.nets, ling_feats)?;
        let timbre = nets::timbre_encoder_forward(&mut ctx, &cfg.nets, &mel)?;

        let thr = T::of(cfg.voicing_threshold);
        let mut f0 = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut a_p = Vec::with_capacity(n);
        let mut a_ap = Vec::with_capacity(n);
        for i in 0..n {
            let raw_f0 = g.value(pitch.f0).data()[i];
            let p = g.value(pitch.a_p).data()[i];
            let ap = g.value(pitch.a_ap).data()[i];
            let voiced = p / (p + ap) > thr;
            raw.push(raw_f0);
            f0.push(if voiced { raw_f0.min(T::of(F0_MAX)).max(T::of(F0_MIN)) } else { T::zero() });
            a_p.push(p);
            a_ap.push(ap);
        }
        let feats = AnalysisFeatures {
            pitch: PitchTrack { f0, a_p, a_ap, hop: cfg.hop },
            raw_f0: raw,
            linguistic: g.value(linguistic).clone(),
            global: g.value(timbre.global).clone().reshaped(vec![cfg.nets.timbre_dim])?,
            tokens: g.value(timbre.tokens).clone(),
            frame_rate: cfg.frame_rate(),
        };
        feats.check_consistent()?;
        Ok(feats)
    }

    /// Reconstruct a waveform from analysis features; the output length is
    /// `frames * hop`.
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        feats: &AnalysisFeatures<T>,
        rng: &mut R,
    ) -> Result<AudioBuffer<T>, PipelineError> {
        feats.check_consistent()?;
        feats.pitch.validate()?;
        let cfg = &self.cfg;
        let n = feats.frames();
        let out_len = n * cfg.hop;
        let exc = make_excitation(&feats.pitch, out_len, cfg.sample_rate, rng)?;

        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.params);
        let f0 = ctx.g.leaf(Tensor::from_slice(&[n, 1], &feats.pitch.f0)?);
        let a_p = ctx.g.leaf(Tensor::from_slice(&[n, 1], &feats.pitch.a_p)?);
        let a_ap = ctx.g.leaf(Tensor::from_slice(&[n, 1], &feats.pitch.a_ap)?);
        let linguistic = ctx.g.leaf(feats.linguistic.clone());
        let tokens = ctx.g.leaf(feats.tokens.clone());
        let global =
            ctx.g.leaf(feats.global.clone().reshaped(vec![1, cfg.nets.timbre_dim])?);
        let excitation = ctx.g.leaf(Tensor::new(vec![out_len], exc.z)?);
        let wave = synthesis_graph(
            &mut ctx,
            cfg,
            &SynthInputs { f0, a_p, a_ap, linguistic, tokens, global, excitation },
        )?;
        Ok(AudioBuffer::new(g.value(wave).data().to_vec(), cfg.sample_rate))
    }

    /// Zero-shot voice conversion: keep the source linguistic content and
    /// amplitudes, swap in the target's timbre features, and remap voiced
    /// log-F0 so the source statistics match the target's.
    pub fn voice_convert<R: Rng + ?Sized>(
        &self,
        source: &AudioBuffer<T>,
        target_ref: &AudioBuffer<T>,
        rng: &mut R,
    ) -> Result<AudioBuffer<T>, PipelineError> {
        if target_ref.duration_secs() < 0.5 {
            return Err(PipelineError::Invalid(format!(
                "target reference of {:.2} s is shorter than 0.5 s",
                target_ref.duration_secs()
            )));
        }
        let src = self.analyze(source)?;
        let tgt = self.analyze(target_ref)?;
        let converted = convert_features(&src, &tgt)?;
        self.synthesize(&converted, rng)
    }
}

/// Median and population standard deviation of voiced log-F0.
pub fn voiced_log_f0_stats<T: Scalar>(track: &PitchTrack<T>) -> Result<(f64, f64), PipelineError> {
    let mut voiced: Vec<f64> =
        track.f0.iter().filter(|f| **f > T::zero()).map(|f| f.to_f64c().ln()).collect();
    if voiced.is_empty() {
        return Err(PipelineError::Invalid("no voiced frames for F0 statistics".into()));
    }
    voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = voiced.len() / 2;
    let median =
        if voiced.len() % 2 == 1 { voiced[m] } else { 0.5 * (voiced[m - 1] + voiced[m]) };
    let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
    let var = voiced.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / voiced.len() as f64;
    Ok((median, var.sqrt()))
}

/// Swap timbre features and remap the voiced F0 track:
/// `f0' = exp(μ_tgt + (ln f0 - μ_src) σ_tgt/σ_src)` with unvoiced sentinels
/// preserved. Degenerate source spread keeps the scale at 1.
pub fn convert_features<T: Scalar>(
    src: &AnalysisFeatures<T>,
    tgt: &AnalysisFeatures<T>,
) -> Result<AnalysisFeatures<T>, PipelineError> {
    let (mu_s, sigma_s) = voiced_log_f0_stats(&src.pitch)?;
    let (mu_t, sigma_t) = voiced_log_f0_stats(&tgt.pitch)?;
    let scale = if sigma_s < 1e-6 { 1.0 } else { sigma_t / sigma_s };
    let f0 = src
        .pitch
        .f0
        .iter()
        .map(|&f| {
            if f <= T::zero() {
                T::zero()
            } else {
                let mapped = (mu_t + (f.to_f64c().ln() - mu_s) * scale).exp();
                T::of(mapped.clamp(F0_MIN, F0_MAX))
            }
        })
        .collect();
    Ok(AnalysisFeatures {
        pitch: PitchTrack {
            f0,
            a_p: src.pitch.a_p.clone(),
            a_ap: src.pitch.a_ap.clone(),
            hop: src.pitch.hop,
        },
        raw_f0: src.raw_f0.clone(),
        linguistic: src.linguistic.clone(),
        global: tgt.global.clone(),
        tokens: tgt.tokens.clone(),
        frame_rate: src.frame_rate,
    })
}

pub(crate) struct SynthInputs {
    pub f0: Var,
    pub a_p: Var,
    pub a_ap: Var,
    pub linguistic: Var,
    pub tokens: Var,
    pub global: Var,
    pub excitation: Var,
}

/// Shared synthesis tail: content query -> time-varying timbre -> frame
/// condition -> sample-level synthesis of the excitation.
pub(crate) fn synthesis_graph<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &BackboneConfig,
    inp: &SynthInputs,
) -> Result<Var, PipelineError> {
    let n = ctx.g.value(inp.f0).dims()[0];
    let f0_scaled = ctx.g.affine(inp.f0, T::of(1e-3), T::zero());
    let ones = ctx.g.leaf(Tensor::full(&[n, 1], T::one()));
    let g_rows = ctx.g.matmul(ones, inp.global)?;
    let query =
        ctx.g.concat(&[f0_scaled, inp.a_p, inp.a_ap, inp.linguistic, g_rows], 1)?;
    let tv = nets::time_varying_timbre(ctx, &cfg.nets, query, inp.tokens, inp.global)?;
    let cond = nets::frame_synth_forward(ctx, &cfg.nets, inp.linguistic, tv)?;
    let wave = nets::sample_synth_forward(ctx, &cfg.nets, inp.excitation, cond, cfg.hop)?;
    Ok(wave)
}

/// Differentiable excitation for training crops: linear upsampling, an
/// unwrapped cumulative-phase sinusoid (bounded crops keep the phase well
/// within precision), and shaped uniform noise.
pub(crate) fn excitation_graph<T: Scalar, R: Rng + ?Sized>(
    ctx: &mut Ctx<T>,
    f0: Var,
    a_p: Var,
    a_ap: Var,
    hop: usize,
    out_len: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Var, PipelineError> {
    let up = |ctx: &mut Ctx<T>, v: Var| -> Result<Var, GradError> {
        let s = ctx.g.upsample_linear(v, hop, out_len)?;
        ctx.g.reshape(s, &[out_len])
    };
    let f0_s = up(ctx, f0)?;
    let a_p_s = up(ctx, a_p)?;
    let a_ap_s = up(ctx, a_ap)?;
    // phase accumulates f0[k] for k = 1..t: zero the first increment
    let w = ctx.g.affine(f0_s, T::of(2.0 * std::f64::consts::PI / sample_rate as f64), T::zero());
    let zero = ctx.g.leaf(Tensor::zeros(&[1]));
    let w_tail = ctx.g.slice(w, 0, 1, out_len)?;
    let w_shifted = ctx.g.concat(&[zero, w_tail], 0)?;
    let phase = ctx.g.cumsum(w_shifted)?;
    let sin = ctx.g.sin(phase);
    let x = ctx.g.mul(a_p_s, sin)?;
    let noise = ctx.g.leaf(Tensor::uniform(&[out_len], -T::one(), T::one(), rng));
    let y = ctx.g.mul(a_ap_s, noise)?;
    Ok(ctx.g.add(x, y)?)
}
