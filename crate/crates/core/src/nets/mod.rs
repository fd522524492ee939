//! Neural blocks: pitch encoder, linguistic encoder, timbre encoder with
//! tokens, time-varying timbre attention, and the frame/sample synthesizers.
//! All parameters live in one named [`Params`] store; forward passes build
//! onto a caller-owned tape.

mod linguistic;
mod pitch;
mod synth;
mod timbre;

pub use linguistic::{init_linguistic_encoder, linguistic_encoder_forward};
pub use pitch::{f0_bin_centers_log, init_pitch_encoder, pitch_encoder_forward, PitchEncoderOut,
    F0_BINS};
pub use synth::{frame_synth_forward, init_frame_synth, init_sample_synth, sample_synth_forward};
pub use timbre::{init_timbre_encoder, init_time_varying, time_varying_timbre, timbre_encoder_forward,
    TimbreOut, TIMBRE_TOKENS};

use rand::Rng;

pub use crate::grad::Ctx;
use crate::grad::{GradError, Pad, Params, Tensor, Var};
use crate::scalar::Scalar;

/// Channel widths and block counts for every network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetsConfig {
    /// Linguistic frontend feature size (mel bands by default).
    pub frontend_dim: usize,
    /// C_L: linguistic feature channels.
    pub linguistic_dim: usize,
    /// ConvGLU blocks in the linguistic encoder; block j dilates by 3^j.
    pub linguistic_blocks: usize,
    /// C_T: timbre embedding channels.
    pub timbre_dim: usize,
    /// Timbre trunk width.
    pub timbre_width: usize,
    /// Attention key/query width.
    pub attn_dim: usize,
    /// Frequency-axis conv channels of the pitch encoder, one per stage.
    pub pitch_channels: [usize; 4],
    /// Per-direction GRU state size.
    pub gru_hidden: usize,
    /// C_F: frame-level condition channels.
    pub frame_channels: usize,
    pub frame_blocks: usize,
    /// Residual channels of the sample-level synthesizer.
    pub synth_channels: usize,
    pub synth_blocks: usize,
    pub synth_dilations: Vec<usize>,
    pub dropout: f64,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            frontend_dim: 80,
            linguistic_dim: 128,
            linguistic_blocks: 4,
            timbre_dim: 192,
            timbre_width: 128,
            attn_dim: 64,
            pitch_channels: [16, 32, 64, 64],
            gru_hidden: 64,
            frame_channels: 64,
            frame_blocks: 3,
            synth_channels: 64,
            synth_blocks: 2,
            synth_dilations: vec![1, 2, 4, 8],
            dropout: 0.05,
        }
    }
}

impl NetsConfig {
    /// Small widths for CPU training runs and tests.
    pub fn toy() -> Self {
        Self {
            frontend_dim: 80,
            linguistic_dim: 64,
            linguistic_blocks: 3,
            timbre_dim: 64,
            timbre_width: 48,
            attn_dim: 32,
            pitch_channels: [8, 16, 32, 32],
            gru_hidden: 32,
            frame_channels: 32,
            frame_blocks: 2,
            synth_channels: 32,
            synth_blocks: 2,
            synth_dilations: vec![1, 2, 4, 8],
            dropout: 0.05,
        }
    }

    /// Query width of the time-varying timbre attention:
    /// `[f0, a_p, a_ap] ⊕ L ⊕ g`.
    pub fn content_query_dim(&self) -> usize {
        3 + self.linguistic_dim + self.timbre_dim
    }

    /// Initialize every network's parameters.
    pub fn init_all<T: Scalar, R: Rng + ?Sized>(&self, params: &mut Params<T>, rng: &mut R) {
        init_pitch_encoder(self, params, rng);
        init_linguistic_encoder(self, params, rng);
        init_timbre_encoder(self, params, rng);
        init_time_varying(self, params, rng);
        init_frame_synth(self, params, rng);
        init_sample_synth(self, params, rng);
    }
}

pub(crate) fn init_linear<T: Scalar, R: Rng + ?Sized>(
    params: &mut Params<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    params.init_fan_in(format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng);
    params.init_zeros(format!("{prefix}.b"), &[fan_out]);
}

pub(crate) fn linear<T: Scalar>(ctx: &mut Ctx<T>, x: Var, prefix: &str) -> Result<Var, GradError> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.g.matmul(x, w)?;
    ctx.g.add(y, b)
}

pub(crate) fn init_conv<T: Scalar, R: Rng + ?Sized>(
    params: &mut Params<T>,
    prefix: &str,
    c_out: usize,
    k: usize,
    c_in: usize,
    rng: &mut R,
) {
    params.init_fan_in(format!("{prefix}.w"), &[c_out, k, c_in], k * c_in, rng);
    params.init_zeros(format!("{prefix}.b"), &[c_out]);
}

pub(crate) fn conv<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: Var,
    prefix: &str,
    stride: usize,
    dilation: usize,
    pad: Pad,
) -> Result<Var, GradError> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.g.conv1d(x, w, stride, dilation, pad)?;
    ctx.g.add(y, b)
}

/// Spherical linear interpolation between unit vectors. For nearly parallel
/// or antipodal inputs the chord interpolation is used as the limit.
pub fn slerp<T: Scalar>(a: &[T], b: &[T], t: f64) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let cos = dot.to_f64c().clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta.sin().abs() < 1e-6 {
        let out: Vec<T> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| x * T::of(1.0 - t) + y * T::of(t))
            .collect();
        let n: T = out.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
        return out.into_iter().map(|v| v / n).collect();
    }
    let (wa, wb) = (((1.0 - t) * theta).sin() / theta.sin(), (t * theta).sin() / theta.sin());
    a.iter().zip(b).map(|(&x, &y)| x * T::of(wa) + y * T::of(wb)).collect()
}

/// Map raw CQT magnitudes to a bounded log-compressed range that preserves
/// absolute level: `ln(1 + x/1e-5) / ln(1e5)`.
pub fn compress_cqt<T: Scalar>(mags: &Tensor<T>) -> Tensor<T> {
    let inv_floor = T::of(1e5);
    let inv_ln = T::of(1.0 / (1e5f64).ln());
    mags.map(|v| (T::one() + v * inv_floor).ln() * inv_ln)
}

/// Shift and scale log-mel features into a roughly unit range.
pub fn normalize_log_mel<T: Scalar>(mel: &Tensor<T>) -> Tensor<T> {
    mel.map(|v| (v + T::of(5.0)) * T::of(0.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = vec![1.0f64, 0.0];
        let b = vec![0.0f64, 1.0];
        assert_eq!(slerp(&a, &b, 0.0), a);
        let mid = slerp(&a, &b, 0.5);
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((mid[0] - inv_sqrt2).abs() < 1e-12 && (mid[1] - inv_sqrt2).abs() < 1e-12);
        let same = slerp(&a, &a, 0.5);
        assert!((same[0] - 1.0).abs() < 1e-9 && same[1].abs() < 1e-9);
    }

    #[test]
    fn slerp_output_is_unit_norm() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let norm = |v: Vec<f64>| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let a = norm(Tensor::<f64>::uniform(&[8], -1.0, 1.0, &mut rng).into_data());
            let b = norm(Tensor::<f64>::uniform(&[8], -1.0, 1.0, &mut rng).into_data());
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let s = slerp(&a, &b, t);
                let n: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "norm {n} at t {t}");
            }
        }
    }
}
