//! One conditional flow network: stacked layers of activation normalization,
//! half-channel shuffle, and a conditional affine coupling. Forward passes
//! run on the gradient tape; the inverse is a plain tensor evaluation.

use rand::Rng;

use crate::grad::{matmul, Ctx, GradError, Params, Tensor, Var};
use crate::scalar::Scalar;

use super::FlowError;

/// Scale clamp of the coupling: `alpha = exp(3 tanh(s))`.
const SCALE_CLAMP: f64 = 3.0;

/// Shape of one flow network.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl FlowNetConfig {
    fn half(&self) -> usize {
        self.dim / 2
    }
}

/// Initialize one network; the coupling head starts at zero so every layer
/// begins as actnorm + shuffle with unit Jacobian from the coupling.
pub fn init_flow<T: Scalar, R: Rng + ?Sized>(
    params: &mut Params<T>,
    net: &str,
    cfg: &FlowNetConfig,
    rng: &mut R,
) -> Result<(), FlowError> {
    if cfg.dim % 2 != 0 || cfg.dim == 0 {
        return Err(FlowError::OddChannels(cfg.dim));
    }
    let mlp_in = cfg.half() + cfg.cond_dim;
    for i in 0..cfg.layers {
        let p = format!("{net}.l{i}");
        params.init_zeros(format!("{p}.beta"), &[cfg.dim]);
        params.init_full(format!("{p}.gamma"), &[cfg.dim], T::one());
        params.init_fan_in(format!("{p}.mlp0.w"), &[mlp_in, cfg.hidden], mlp_in, rng);
        params.init_zeros(format!("{p}.mlp0.b"), &[cfg.hidden]);
        params.init_fan_in(format!("{p}.mlp1.w"), &[cfg.hidden, cfg.hidden], cfg.hidden, rng);
        params.init_zeros(format!("{p}.mlp1.b"), &[cfg.hidden]);
        params.init_zeros(format!("{p}.mlp2.w"), &[cfg.hidden, cfg.dim]);
        params.init_zeros(format!("{p}.mlp2.b"), &[cfg.dim]);
    }
    Ok(())
}

/// Conditioner on the tape: `(s, omega) = MLP(x_b ⊕ cond)` with the scale
/// logits squashed to `[-3, 3]`.
fn cond_mlp_graph<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    xb: Var,
    cond: Var,
    cfg: &FlowNetConfig,
) -> Result<(Var, Var), GradError> {
    let input = ctx.g.concat(&[xb, cond], 1)?;
    let h = crate::nets::linear(ctx, input, &format!("{prefix}.mlp0"))?;
    let h = ctx.g.leaky_relu(h);
    let h = crate::nets::linear(ctx, h, &format!("{prefix}.mlp1"))?;
    let h = ctx.g.leaky_relu(h);
    let out = crate::nets::linear(ctx, h, &format!("{prefix}.mlp2"))?;
    let half = cfg.half();
    let s_raw = ctx.g.slice(out, 1, 0, half)?;
    let omega = ctx.g.slice(out, 1, half, cfg.dim)?;
    let s = ctx.g.tanh(s_raw);
    let s = ctx.g.affine(s, T::of(SCALE_CLAMP), T::zero());
    Ok((s, omega))
}

/// Plain-tensor twin of [`cond_mlp_graph`]; must stay formula-identical.
fn cond_mlp_plain<T: Scalar>(
    params: &Params<T>,
    prefix: &str,
    xb: &Tensor<T>,
    cond: &Tensor<T>,
    cfg: &FlowNetConfig,
) -> Result<(Tensor<T>, Tensor<T>), GradError> {
    let b = xb.dims()[0];
    let mut input = Tensor::zeros(&[b, cfg.half() + cfg.cond_dim]);
    for r in 0..b {
        input.row_mut(r)[..cfg.half()].copy_from_slice(xb.row(r));
        input.row_mut(r)[cfg.half()..].copy_from_slice(cond.row(r));
    }
    let leaky = |t: Tensor<T>| {
        t.map(|v| if v > T::zero() { v } else { T::of(crate::grad::LEAKY_SLOPE) * v })
    };
    let lin = |x: &Tensor<T>, name: &str| -> Result<Tensor<T>, GradError> {
        let mut y = matmul(x, params.get(&format!("{name}.w"))?)?;
        let bias = params.get(&format!("{name}.b"))?;
        for r in 0..y.dims()[0] {
            for (v, bv) in y.row_mut(r).iter_mut().zip(bias.data()) {
                *v += *bv;
            }
        }
        Ok(y)
    };
    let h = leaky(lin(&input, &format!("{prefix}.mlp0"))?);
    let h = leaky(lin(&h, &format!("{prefix}.mlp1"))?);
    let out = lin(&h, &format!("{prefix}.mlp2"))?;
    let half = cfg.half();
    let mut s = Tensor::zeros(&[b, half]);
    let mut omega = Tensor::zeros(&[b, half]);
    for r in 0..b {
        for c in 0..half {
            s.data_mut()[r * half + c] =
                out.at2(r, c).tanh() * T::of(SCALE_CLAMP);
            omega.data_mut()[r * half + c] = out.at2(r, half + c);
        }
    }
    Ok((s, omega))
}

fn swap_halves_graph<T: Scalar>(ctx: &mut Ctx<T>, x: Var, dim: usize) -> Result<Var, GradError> {
    let half = dim / 2;
    let lo = ctx.g.slice(x, 1, 0, half)?;
    let hi = ctx.g.slice(x, 1, half, dim)?;
    ctx.g.concat(&[hi, lo], 1)
}

/// actnorm -> shuffle -> coupling over a batch `[B, dim]`; returns the
/// transformed batch and the per-sample log-determinant
/// `-Σ log|γ| + Σ s` as a `[B]` tensor.
pub fn layer_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    cfg: &FlowNetConfig,
    x: Var,
    cond: Var,
) -> Result<(Var, Var), GradError> {
    let batch = ctx.g.value(x).dims()[0];
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let centered = ctx.g.sub(x, beta)?;
    let inv_gamma = ctx.g.recip(gamma);
    let y = ctx.g.mul(centered, inv_gamma)?;
    let abs_gamma = ctx.g.abs(gamma);
    let log_gamma = ctx.g.log(abs_gamma);
    let an_ld = ctx.g.sum(log_gamma);
    let an_ld = ctx.g.affine(an_ld, -T::one(), T::zero());

    let shuffled = swap_halves_graph(ctx, y, cfg.dim)?;
    let half = cfg.half();
    let xa = ctx.g.slice(shuffled, 1, 0, half)?;
    let xb = ctx.g.slice(shuffled, 1, half, cfg.dim)?;
    let (s, omega) = cond_mlp_graph(ctx, prefix, xb, cond, cfg)?;
    let alpha = ctx.g.exp(s);
    let scaled = ctx.g.mul(xa, alpha)?;
    let ya = ctx.g.add(scaled, omega)?;
    let z = ctx.g.concat(&[ya, xb], 1)?;

    let coupling_ld = ctx.g.sum_axis(s, 1)?;
    // broadcast the scalar actnorm term over the batch
    let ones = ctx.g.leaf(Tensor::full(&[batch, 1], T::one()));
    let an_col = ctx.g.reshape(an_ld, &[1, 1])?;
    let an_rows = ctx.g.matmul(ones, an_col)?;
    let an_rows = ctx.g.reshape(an_rows, &[batch])?;
    let logdet = ctx.g.add(coupling_ld, an_rows)?;
    Ok((z, logdet))
}

/// Exact inverse of [`layer_forward`]: inverse coupling, unshuffle, inverse
/// actnorm (`x = γ y + β`).
pub fn layer_inverse<T: Scalar>(
    params: &Params<T>,
    prefix: &str,
    cfg: &FlowNetConfig,
    z: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<Tensor<T>, GradError> {
    let b = z.dims()[0];
    let half = cfg.half();
    let mut ya = Tensor::zeros(&[b, half]);
    let mut xb = Tensor::zeros(&[b, half]);
    for r in 0..b {
        ya.row_mut(r).copy_from_slice(&z.row(r)[..half]);
        xb.row_mut(r).copy_from_slice(&z.row(r)[half..]);
    }
    let (s, omega) = cond_mlp_plain(params, prefix, &xb, cond, cfg)?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let mut x = Tensor::zeros(&[b, cfg.dim]);
    for r in 0..b {
        for c in 0..half {
            let xa = (ya.at2(r, c) - omega.at2(r, c)) / s.at2(r, c).exp();
            // unshuffle: [xa | xb] came from swapping the halves of y
            x.data_mut()[r * cfg.dim + half + c] = xa;
            x.data_mut()[r * cfg.dim + c] = xb.at2(r, c);
        }
        for c in 0..cfg.dim {
            let v = x.at2(r, c);
            x.data_mut()[r * cfg.dim + c] = gamma.data()[c] * v + beta.data()[c];
        }
    }
    Ok(x)
}

/// Full-network forward: returns `z` and the accumulated per-sample logdet.
pub fn flow_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    net: &str,
    cfg: &FlowNetConfig,
    x: Var,
    cond: Var,
) -> Result<(Var, Var), GradError> {
    let mut cur = x;
    let mut logdet: Option<Var> = None;
    for i in 0..cfg.layers {
        let (z, ld) = layer_forward(ctx, &format!("{net}.l{i}"), cfg, cur, cond)?;
        cur = z;
        logdet = Some(match logdet {
            Some(acc) => ctx.g.add(acc, ld)?,
            None => ld,
        });
    }
    Ok((cur, logdet.expect("at least one layer")))
}

pub fn flow_inverse<T: Scalar>(
    params: &Params<T>,
    net: &str,
    cfg: &FlowNetConfig,
    z: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<Tensor<T>, GradError> {
    let mut cur = z.clone();
    for i in (0..cfg.layers).rev() {
        cur = layer_inverse(params, &format!("{net}.l{i}"), cfg, &cur, cond)?;
    }
    Ok(cur)
}

/// Mean negative log-likelihood under the standard-normal base:
/// `mean_b(0.5 Σ z² - logdet) + (dim/2) ln 2π`.
pub fn flow_nll<T: Scalar>(
    ctx: &mut Ctx<T>,
    net: &str,
    cfg: &FlowNetConfig,
    x: Var,
    cond: Var,
) -> Result<Var, GradError> {
    let (z, logdet) = flow_forward(ctx, net, cfg, x, cond)?;
    let z_sq = ctx.g.mul(z, z)?;
    let sumsq = ctx.g.sum_axis(z_sq, 1)?;
    let half_sumsq = ctx.g.affine(sumsq, T::of(0.5), T::zero());
    let per_sample = ctx.g.sub(half_sumsq, logdet)?;
    let mean = ctx.g.mean(per_sample);
    let norm_const = cfg.dim as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
    Ok(ctx.g.affine(mean, T::one(), T::of(norm_const)))
}

/// Data-dependent actnorm initialization: layer by layer, β and γ become the
/// batch mean and population standard deviation of that layer's input, then
/// the batch is pushed through the full layer to initialize the next one.
pub fn actnorm_init<T: Scalar>(
    params: &mut Params<T>,
    net: &str,
    cfg: &FlowNetConfig,
    batch: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<(), FlowError> {
    let b = batch.dims()[0];
    if b < 2 {
        return Err(FlowError::Invalid(format!("actnorm init needs >= 2 rows, got {b}")));
    }
    let mut cur = batch.clone();
    for i in 0..cfg.layers {
        let prefix = format!("{net}.l{i}");
        let bn = T::of(b as f64);
        let mut beta = Tensor::zeros(&[cfg.dim]);
        let mut gamma = Tensor::zeros(&[cfg.dim]);
        for c in 0..cfg.dim {
            let mut mean = T::zero();
            for r in 0..b {
                mean += cur.at2(r, c);
            }
            mean /= bn;
            let mut var = T::zero();
            for r in 0..b {
                let d = cur.at2(r, c) - mean;
                var += d * d;
            }
            var /= bn;
            if var.to_f64c() < 1e-12 {
                return Err(FlowError::ZeroVariance(c));
            }
            beta.data_mut()[c] = mean;
            gamma.data_mut()[c] = var.sqrt();
        }
        params.insert(format!("{prefix}.beta"), beta);
        params.insert(format!("{prefix}.gamma"), gamma);
        // push the batch through the freshly initialized layer
        let mut g = crate::grad::Graph::new();
        let mut ctx = Ctx::eval(&mut g, params);
        let x = ctx.g.leaf(cur.clone());
        let cv = ctx.g.leaf(cond.clone());
        let (z, _) = layer_forward(&mut ctx, &prefix, cfg, x, cv)
            .map_err(FlowError::Grad)?;
        cur = g.value(z).clone();
    }
    Ok(())
}
