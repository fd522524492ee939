//! Frame-level synthesizer (conv stack with conditional layer norm) and
//! sample-level synthesizer (dilated residual stack with gated activations
//! over the excitation signal).

use rand::Rng;

use super::{conv, init_conv, init_linear, linear, Ctx, NetsConfig};
use crate::grad::{GradError, Pad, Params, Var};
use crate::scalar::Scalar;

pub fn init_frame_synth<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    let cf = cfg.frame_channels;
    init_conv(params, "fsynth.pre", cf, 1, cfg.linguistic_dim, rng);
    for i in 0..cfg.frame_blocks {
        init_conv(params, &format!("fsynth.conv{i}"), cf, 3, cf, rng);
        // conditional layer norm: scale/shift are affine in the timbre
        // embedding; zero-init keeps the block a plain layer norm at start
        params.init_zeros(format!("fsynth.cln{i}.scale.w"), &[cfg.timbre_dim, cf]);
        params.init_zeros(format!("fsynth.cln{i}.scale.b"), &[cf]);
        params.init_zeros(format!("fsynth.cln{i}.shift.w"), &[cfg.timbre_dim, cf]);
        params.init_zeros(format!("fsynth.cln{i}.shift.b"), &[cf]);
    }
    init_conv(params, "fsynth.post", cf, 1, cf, rng);
}

/// Conditional layer norm: `LN(x) ⊙ (1 + s(e)) + t(e)` with `s`, `t` affine
/// in the conditioning embedding `e`.
fn cond_layer_norm<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: Var,
    embed: Var,
    prefix: &str,
) -> Result<Var, GradError> {
    let normed = ctx.g.layer_norm(x);
    let scale = linear(ctx, embed, &format!("{prefix}.scale"))?;
    let shift = linear(ctx, embed, &format!("{prefix}.shift"))?;
    let scale = ctx.g.affine(scale, T::one(), T::one());
    let scaled = ctx.g.mul(normed, scale)?;
    ctx.g.add(scaled, shift)
}

/// Linguistic rows `[N, C_L]` and per-frame timbre embeddings `[N, C_T]` to
/// the frame-level condition `[N, C_F]`.
pub fn frame_synth_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    linguistic: Var,
    tv_timbre: Var,
) -> Result<Var, GradError> {
    let (ld, td) = (ctx.g.value(linguistic).dims().to_vec(), ctx.g.value(tv_timbre).dims().to_vec());
    if ld.len() != 2 || td.len() != 2 || ld[0] != td[0] || td[1] != cfg.timbre_dim {
        return Err(GradError::Shape { op: "frame_synth", lhs: ld, rhs: td });
    }
    let mut h = conv(ctx, linguistic, "fsynth.pre", 1, 1, Pad::Same)?;
    h = ctx.g.leaky_relu(h);
    for i in 0..cfg.frame_blocks {
        let y = conv(ctx, h, &format!("fsynth.conv{i}"), 1, 1, Pad::Same)?;
        let y = cond_layer_norm(ctx, y, tv_timbre, &format!("fsynth.cln{i}"))?;
        let y = ctx.g.leaky_relu(y);
        h = ctx.g.add(h, y)?;
    }
    conv(ctx, h, "fsynth.post", 1, 1, Pad::Same)
}

pub fn init_sample_synth<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    let c = cfg.synth_channels;
    init_conv(params, "ssynth.in", c, 1, 1, rng);
    for b in 0..cfg.synth_blocks {
        for (l, _) in cfg.synth_dilations.iter().enumerate() {
            let p = format!("ssynth.b{b}l{l}");
            init_conv(params, &format!("{p}.gate"), 2 * c, 3, c, rng);
            init_linear(params, &format!("{p}.cond"), cfg.frame_channels, 2 * c, rng);
            init_linear(params, &format!("{p}.res"), c, c, rng);
            init_linear(params, &format!("{p}.skip"), c, c, rng);
        }
    }
    init_linear(params, "ssynth.post1", c, c, rng);
    init_linear(params, "ssynth.post2", c, 1, rng);
}

/// Excitation `[T]` plus frame condition `[N, C_F]` (upsampled internally to
/// `N * samples_per_frame = T`) to a waveform `[T]` bounded by tanh.
pub fn sample_synth_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    excitation: Var,
    frame_cond: Var,
    samples_per_frame: usize,
) -> Result<Var, GradError> {
    let t_len = ctx.g.value(excitation).len();
    let n = ctx.g.value(frame_cond).dims()[0];
    if t_len != n * samples_per_frame {
        return Err(GradError::Invalid {
            op: "sample_synth",
            msg: format!(
                "excitation length {} != {} frames x {} samples",
                t_len, n, samples_per_frame
            ),
        });
    }
    let cond = ctx.g.upsample_linear(frame_cond, samples_per_frame, t_len)?;
    let z = ctx.g.reshape(excitation, &[t_len, 1])?;
    let mut x = conv(ctx, z, "ssynth.in", 1, 1, Pad::Same)?;
    let mut skip_sum: Option<Var> = None;
    for b in 0..cfg.synth_blocks {
        for (l, &dil) in cfg.synth_dilations.iter().enumerate() {
            let p = format!("ssynth.b{b}l{l}");
            let gate = conv(ctx, x, &format!("{p}.gate"), 1, dil, Pad::Same)?;
            let cond_proj = linear(ctx, cond, &format!("{p}.cond"))?;
            let gated = ctx.g.add(gate, cond_proj)?;
            let h = ctx.g.glu(gated)?;
            let res = linear(ctx, h, &format!("{p}.res"))?;
            x = ctx.g.add(x, res)?;
            let skip = linear(ctx, h, &format!("{p}.skip"))?;
            skip_sum = Some(match skip_sum {
                Some(s) => ctx.g.add(s, skip)?,
                None => skip,
            });
        }
    }
    let s = skip_sum.expect("at least one synth layer");
    let s = ctx.g.leaky_relu(s);
    let s = linear(ctx, s, "ssynth.post1")?;
    let s = ctx.g.leaky_relu(s);
    let out = linear(ctx, s, "ssynth.post2")?;
    let out = ctx.g.tanh(out);
    ctx.g.reshape(out, &[t_len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Graph, Params, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (NetsConfig, Params<f32>) {
        let cfg = NetsConfig::toy();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        init_frame_synth(&cfg, &mut params, &mut rng);
        init_sample_synth(&cfg, &mut params, &mut rng);
        (cfg, params)
    }

    #[test]
    fn frame_synth_output_shape() {
        let (cfg, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let l = ctx.g.leaf(Tensor::uniform(&[9, cfg.linguistic_dim], -1.0f32, 1.0, &mut rng));
        let tv = ctx.g.leaf(Tensor::uniform(&[9, cfg.timbre_dim], -1.0f32, 1.0, &mut rng));
        let out = frame_synth_forward(&mut ctx, &cfg, l, tv).unwrap();
        assert_eq!(g.value(out).dims(), &[9, cfg.frame_channels]);
    }

    #[test]
    fn zero_timbre_embedding_degenerates_to_plain_layer_norm() {
        // With freshly initialized (zero) cLN maps, a zero embedding makes the
        // conditional layer norm equal layer norm plus a zero bias.
        let (cfg, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::uniform(&[5, cfg.frame_channels], -1.0f32, 1.0, &mut rng);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &params, false, 0);
        let xv = ctx.g.leaf(x.clone());
        let zero_e = ctx.g.leaf(Tensor::zeros(&[5, cfg.timbre_dim]));
        let got = cond_layer_norm(&mut ctx, xv, zero_e, "fsynth.cln0").unwrap();
        let plain = ctx.g.layer_norm(xv);
        for (a, b) in g.value(got).data().iter().zip(g.value(plain).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_synth_length_and_bounds() {
        let (cfg, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (frames, spf) = (6usize, 64usize);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let z = ctx.g.leaf(Tensor::uniform(&[frames * spf], -1.0f32, 1.0, &mut rng));
        let cond = ctx.g.leaf(Tensor::uniform(&[frames, cfg.frame_channels], -1.0f32, 1.0, &mut rng));
        let out = sample_synth_forward(&mut ctx, &cfg, z, cond, spf).unwrap();
        assert_eq!(g.value(out).dims(), &[frames * spf]);
        assert!(g.value(out).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zeroed_final_projection_gives_silence() {
        let (cfg, mut params) = setup();
        let dims = params.get("ssynth.post2.w").unwrap().dims().to_vec();
        params.insert("ssynth.post2.w", Tensor::zeros(&dims));
        params.insert("ssynth.post2.b", Tensor::zeros(&[1]));
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let z = ctx.g.leaf(Tensor::uniform(&[128], -1.0f32, 1.0, &mut rng));
        let cond = ctx.g.leaf(Tensor::uniform(&[2, cfg.frame_channels], -1.0f32, 1.0, &mut rng));
        let out = sample_synth_forward(&mut ctx, &cfg, z, cond, 64).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (cfg, params) = setup();
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let z = ctx.g.leaf(Tensor::zeros(&[100]));
        let cond = ctx.g.leaf(Tensor::zeros(&[2, cfg.frame_channels]));
        assert!(sample_synth_forward(&mut ctx, &cfg, z, cond, 64).is_err());
    }
}
