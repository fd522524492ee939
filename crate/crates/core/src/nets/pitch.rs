//! Pitch encoder: frequency-axis conv stages over a 160-bin CQT crop, a
//! bidirectional GRU over time, a 64-bin softmax pitch head and two
//! exponential-sigmoid amplitude heads.

use rand::Rng;

use super::{compress_cqt, conv, init_conv, init_linear, linear, Ctx, NetsConfig};
use crate::excitation::{F0_MAX, F0_MIN};
use crate::grad::{GradError, Pad, Params, Tensor, Var};
use crate::scalar::Scalar;

/// Probability bins of the pitch head, log-spaced over 50..1000 Hz.
pub const F0_BINS: usize = 64;
/// Frequency width of the CQT crop the encoder consumes.
const CROP_BINS: usize = crate::dsp::CQT_SCOPE;
/// Total frequency downsampling of the four stride-2 stages.
const DOWN: usize = 16;

/// Natural-log bin centers `ln(50 · 20^(b/63))` as a `[64, 1]` tensor.
pub fn f0_bin_centers_log<T: Scalar>() -> Tensor<T> {
    let data: Vec<T> = (0..F0_BINS)
        .map(|b| T::of(F0_MIN.ln() + (F0_MAX / F0_MIN).ln() * b as f64 / (F0_BINS - 1) as f64))
        .collect();
    Tensor::new(vec![F0_BINS, 1], data).expect("bin centers")
}

pub struct PitchEncoderOut {
    /// `[N, 64]` row-stochastic pitch distribution.
    pub probs: Var,
    /// `[N, 1]` Hz, the log-domain weighted average of the bin centers.
    pub f0: Var,
    /// `[N, 1]` periodic amplitude.
    pub a_p: Var,
    /// `[N, 1]` aperiodic amplitude.
    pub a_ap: Var,
}

pub fn init_pitch_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    let c = cfg.pitch_channels;
    init_conv(params, "pitch.stem", c[0], 5, 1, rng);
    let mut prev = c[0];
    for (i, &ch) in c.iter().enumerate() {
        init_conv(params, &format!("pitch.res{i}"), prev, 3, prev, rng);
        init_conv(params, &format!("pitch.down{i}"), ch, 3, prev, rng);
        prev = ch;
    }
    let flat = CROP_BINS / DOWN * c[3]; // 10 frequency positions x channels
    init_linear(params, "pitch.proj", flat, cfg.gru_hidden, rng);
    for dir in ["fwd", "bwd"] {
        init_linear(params, &format!("pitch.gru_{dir}.x"), cfg.gru_hidden, 3 * cfg.gru_hidden, rng);
        params.init_fan_in(
            format!("pitch.gru_{dir}.u"),
            &[cfg.gru_hidden, 3 * cfg.gru_hidden],
            cfg.gru_hidden,
            rng,
        );
        params.init_zeros(format!("pitch.gru_{dir}.b"), &[3 * cfg.gru_hidden]);
    }
    init_linear(params, "pitch.head_pitch", 2 * cfg.gru_hidden, F0_BINS, rng);
    init_linear(params, "pitch.head_amp", 2 * cfg.gru_hidden, 2, rng);
}

/// Run one direction of the GRU over `[N, h]` projected features and return
/// the per-frame states `[N, h]`.
fn gru_direction<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: Var,
    prefix: &str,
    hidden: usize,
    reverse: bool,
) -> Result<Var, GradError> {
    let n = ctx.g.value(x).dims()[0];
    let xg_all = linear(ctx, x, &format!("{prefix}.x"))?;
    let u = ctx.p(&format!("{prefix}.u"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let mut h = ctx.g.leaf(Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xg = ctx.g.slice(xg_all, 0, t, t + 1)?;
        h = ctx.g.gru_cell(xg, h, u, b)?;
        states[t] = h;
    }
    ctx.g.concat(&states, 0)
}

/// Forward pass over one CQT crop `[N, 160]` of raw magnitudes.
pub fn pitch_encoder_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    crop: &Tensor<T>,
) -> Result<PitchEncoderOut, GradError> {
    if crop.rank() != 2 || crop.dims()[1] != CROP_BINS {
        return Err(GradError::Invalid {
            op: "pitch_encoder",
            msg: format!("expected [N, {CROP_BINS}] crop, got {:?}", crop.dims()),
        });
    }
    let n = crop.dims()[0];
    let x = ctx.g.leaf(compress_cqt(crop));
    // Frequency-axis convolutions treat frames as the batch: [N, 160, 1].
    let mut h = ctx.g.reshape(x, &[n, CROP_BINS, 1])?;
    h = conv(ctx, h, "pitch.stem", 1, 1, Pad::Same)?;
    h = ctx.g.leaky_relu(h);
    for i in 0..cfg.pitch_channels.len() {
        let r = conv(ctx, h, &format!("pitch.res{i}"), 1, 1, Pad::Same)?;
        let r = ctx.g.leaky_relu(r);
        h = ctx.g.add(h, r)?;
        h = conv(ctx, h, &format!("pitch.down{i}"), 2, 1, Pad::Same)?;
        h = ctx.g.leaky_relu(h);
    }
    let flat = CROP_BINS / DOWN * cfg.pitch_channels[3];
    let h = ctx.g.reshape(h, &[n, flat])?;
    let h = linear(ctx, h, "pitch.proj")?;
    let h = ctx.g.leaky_relu(h);
    let fwd = gru_direction(ctx, h, "pitch.gru_fwd", cfg.gru_hidden, false)?;
    let bwd = gru_direction(ctx, h, "pitch.gru_bwd", cfg.gru_hidden, true)?;
    let feat = ctx.g.concat(&[fwd, bwd], 1)?;

    let logits = linear(ctx, feat, "pitch.head_pitch")?;
    let probs = ctx.g.softmax(logits, 1)?;
    let centers = ctx.g.leaf(f0_bin_centers_log::<T>());
    let log_f0 = ctx.g.matmul(probs, centers)?;
    let f0 = ctx.g.exp(log_f0);

    let amps = linear(ctx, feat, "pitch.head_amp")?;
    let amps = ctx.g.exp_sigmoid(amps);
    let a_p = ctx.g.slice(amps, 1, 0, 1)?;
    let a_ap = ctx.g.slice(amps, 1, 1, 2)?;
    Ok(PitchEncoderOut { probs, f0, a_p, a_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bin_centers_hit_spec_endpoints() {
        let c = f0_bin_centers_log::<f64>();
        assert!((c.data()[0].exp() - 50.0).abs() < 1e-9);
        assert!((c.data()[63].exp() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_probabilities_give_endpoint_frequencies() {
        // The f0 head reduces to the bin center under a one-hot distribution.
        let centers = f0_bin_centers_log::<f64>();
        for (bin, expect) in [(0usize, 50.0f64), (63, 1000.0)] {
            let mut probs = Tensor::zeros(&[1, F0_BINS]);
            probs.data_mut()[bin] = 1.0;
            let f0 = crate::grad::matmul(&probs, &centers).unwrap().item().exp();
            assert!((f0 - expect).abs() < 1e-9, "bin {bin}: {f0}");
        }
    }

    #[test]
    fn uniform_probabilities_give_geometric_mean() {
        let centers = f0_bin_centers_log::<f64>();
        let probs = Tensor::full(&[1, F0_BINS], 1.0 / F0_BINS as f64);
        let f0 = crate::grad::matmul(&probs, &centers).unwrap().item().exp();
        let expect = (50.0f64 * 1000.0).sqrt();
        assert!((f0 - expect).abs() < 0.2, "{f0} vs {expect}");
    }

    #[test]
    fn f0_is_monotone_under_mass_shift() {
        // Moving probability mass from bin b to bin b+1 strictly increases f0.
        let centers = f0_bin_centers_log::<f64>();
        let probs = Tensor::full(&[1, F0_BINS], 1.0 / F0_BINS as f64);
        let base = crate::grad::matmul(&probs, &centers).unwrap().item().exp();
        for b in [0usize, 20, 40, 62] {
            let mut p = probs.clone();
            let eps = 0.005;
            p.data_mut()[b] -= eps;
            p.data_mut()[b + 1] += eps;
            let f0 = crate::grad::matmul(&p, &centers).unwrap().item().exp();
            assert!(f0 > base, "bin {b}");
        }
    }

    #[test]
    fn forward_shapes_probabilities_and_ranges() {
        let cfg = NetsConfig::toy();
        let mut params = crate::grad::Params::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_pitch_encoder(&cfg, &mut params, &mut rng);
        let crop = Tensor::uniform(&[7, CROP_BINS], 0.0f32, 0.3, &mut rng);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let out = pitch_encoder_forward(&mut ctx, &cfg, &crop).unwrap();
        assert_eq!(g.value(out.probs).dims(), &[7, F0_BINS]);
        for i in 0..7 {
            let row_sum: f32 = g.value(out.probs).row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-5);
            let f0 = g.value(out.f0).data()[i];
            assert!((50.0..=1000.0).contains(&f0), "f0 {f0}");
            assert!(g.value(out.a_p).data()[i] > 0.0);
            assert!(g.value(out.a_ap).data()[i] > 0.0);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetsConfig::toy();
        let mut params = crate::grad::Params::<f32>::new();
        init_pitch_encoder(&cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(2));
        let crop = Tensor::uniform(&[5, CROP_BINS], 0.0f32, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let run = || {
            let mut g = Graph::new();
            let mut ctx = Ctx::eval(&mut g, &params);
            let out = pitch_encoder_forward(&mut ctx, &cfg, &crop).unwrap();
            g.value(out.f0).clone()
        };
        assert_eq!(run(), run());
    }
}
