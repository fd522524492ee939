//! Timbre encoder: a dilated conv trunk with multilayer feature aggregation,
//! a global embedding from attentive statistical pooling, timbre tokens via
//! cross-attention with trainable latent queries, and the content-conditioned
//! time-varying timbre attention.

use rand::Rng;

use super::{conv, init_conv, init_linear, linear, normalize_log_mel, Ctx, NetsConfig};
use crate::grad::{GradError, Pad, Params, Tensor, Var};
use crate::scalar::Scalar;

/// Number of trainable timbre tokens.
pub const TIMBRE_TOKENS: usize = 50;

pub struct TimbreOut {
    /// `[1, C_T]` unit-norm global timbre embedding.
    pub global: Var,
    /// `[50, C_T]` unit-norm timbre tokens.
    pub tokens: Var,
    /// `[N, 1]` pooling attention over time, for inspection.
    pub asp_attn: Var,
    /// `[50, N]` token cross-attention, for inspection.
    pub token_attn: Var,
}

pub fn init_timbre_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    let w = cfg.timbre_width;
    init_conv(params, "timbre.stem", w, 5, cfg.frontend_dim, rng);
    for (i, _) in [1usize, 2, 3].iter().enumerate() {
        init_conv(params, &format!("timbre.block{i}"), w, 3, w, rng);
    }
    init_conv(params, "timbre.mfa", cfg.timbre_dim, 1, 3 * w, rng);
    // attentive statistical pooling
    init_linear(params, "timbre.asp.h", cfg.timbre_dim, cfg.attn_dim, rng);
    init_linear(params, "timbre.asp.s", cfg.attn_dim, 1, rng);
    init_linear(params, "timbre.gproj", 2 * cfg.timbre_dim, cfg.timbre_dim, rng);
    // token cross-attention with trainable latent queries
    params.init_fan_in("timbre.queries", &[TIMBRE_TOKENS, cfg.attn_dim], cfg.attn_dim, rng);
    init_linear(params, "timbre.key", cfg.timbre_dim, cfg.attn_dim, rng);
    init_linear(params, "timbre.value", cfg.timbre_dim, cfg.timbre_dim, rng);
    init_linear(params, "timbre.tokproj", cfg.timbre_dim, cfg.timbre_dim, rng);
}

/// Mel input `[N, frontend_dim]`, `N >= 2`, to the global embedding and the
/// timbre tokens.
pub fn timbre_encoder_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    mel: &Tensor<T>,
) -> Result<TimbreOut, GradError> {
    if mel.rank() != 2 || mel.dims()[1] != cfg.frontend_dim {
        return Err(GradError::Invalid {
            op: "timbre_encoder",
            msg: format!("expected [N, {}], got {:?}", cfg.frontend_dim, mel.dims()),
        });
    }
    if mel.dims()[0] < 2 {
        return Err(GradError::Invalid {
            op: "timbre_encoder",
            msg: format!("needs at least 2 frames for pooled statistics, got {}", mel.dims()[0]),
        });
    }
    let x = ctx.g.leaf(normalize_log_mel(mel));
    let mut h = conv(ctx, x, "timbre.stem", 1, 1, Pad::Same)?;
    h = ctx.g.leaky_relu(h);
    let mut taps = Vec::new();
    for (i, dil) in [1usize, 2, 3].into_iter().enumerate() {
        let y = conv(ctx, h, &format!("timbre.block{i}"), 1, dil, Pad::Same)?;
        let y = ctx.g.leaky_relu(y);
        h = ctx.g.add(h, y)?;
        taps.push(h);
    }
    let mfa_in = ctx.g.concat(&taps, 1)?;
    let mfa = conv(ctx, mfa_in, "timbre.mfa", 1, 1, Pad::Same)?;
    let mfa = ctx.g.leaky_relu(mfa);

    // Attentive statistical pooling over time: softmax weights, weighted
    // mean and standard deviation, projected and normalized.
    let a = linear(ctx, mfa, "timbre.asp.h")?;
    let a = ctx.g.tanh(a);
    let scores = linear(ctx, a, "timbre.asp.s")?;
    let asp_attn = ctx.g.softmax(scores, 0)?;
    let attn_t = ctx.g.transpose(asp_attn)?;
    let mean = ctx.g.matmul(attn_t, mfa)?;
    let sq = ctx.g.mul(mfa, mfa)?;
    let second = ctx.g.matmul(attn_t, sq)?;
    let mean_sq = ctx.g.mul(mean, mean)?;
    let var = ctx.g.sub(second, mean_sq)?;
    let var = ctx.g.affine(var, T::one(), T::of(1e-5));
    let std = ctx.g.sqrt(var);
    let stats = ctx.g.concat(&[mean, std], 1)?;
    let gproj = linear(ctx, stats, "timbre.gproj")?;
    let global = ctx.g.l2_normalize_rows(gproj);

    // Token extraction: trainable latents query the trunk features.
    let queries = ctx.p("timbre.queries")?;
    let keys = linear(ctx, mfa, "timbre.key")?;
    let values = linear(ctx, mfa, "timbre.value")?;
    let keys_t = ctx.g.transpose(keys)?;
    let scores = ctx.g.matmul(queries, keys_t)?;
    let scores = ctx.g.affine(scores, T::of(1.0 / (cfg.attn_dim as f64).sqrt()), T::zero());
    let attn = ctx.g.softmax(scores, 1)?;
    let tok = ctx.g.matmul(attn, values)?;
    let tok = linear(ctx, tok, "timbre.tokproj")?;
    let tokens = ctx.g.l2_normalize_rows(tok);
    Ok(TimbreOut { global, tokens, asp_attn, token_attn: attn })
}

pub fn init_time_varying<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    init_linear(params, "tv.query", cfg.content_query_dim(), cfg.attn_dim, rng);
    params.init_fan_in("tv.keys", &[TIMBRE_TOKENS, cfg.attn_dim], cfg.attn_dim, rng);
}

/// Content query `[N, 3 + C_L + C_T]` against trainable keys with the timbre
/// tokens `[50, C_T]` as values; the attention readout is pulled halfway
/// along the great circle toward the global embedding `[1, C_T]` (slerp at
/// t = 0.5, computed as the normalized chord midpoint).
pub fn time_varying_timbre<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    content_query: Var,
    tokens: Var,
    global: Var,
) -> Result<Var, GradError> {
    let qd = ctx.g.value(content_query).dims().to_vec();
    if qd.len() != 2 || qd[1] != cfg.content_query_dim() {
        return Err(GradError::Invalid {
            op: "time_varying_timbre",
            msg: format!("expected [N, {}] query, got {:?}", cfg.content_query_dim(), qd),
        });
    }
    let q = linear(ctx, content_query, "tv.query")?;
    let keys = ctx.p("tv.keys")?;
    let keys_t = ctx.g.transpose(keys)?;
    let scores = ctx.g.matmul(q, keys_t)?;
    let scores = ctx.g.affine(scores, T::of(1.0 / (cfg.attn_dim as f64).sqrt()), T::zero());
    let attn = ctx.g.softmax(scores, 1)?;
    let c = ctx.g.matmul(attn, tokens)?;
    let c = ctx.g.l2_normalize_rows(c);
    let g_row = ctx.g.reshape(global, &[cfg.timbre_dim])?;
    let sum = ctx.g.add(c, g_row)?;
    Ok(ctx.g.l2_normalize_rows(sum))
}
