//! Maximum-likelihood training of the flow stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grad::{Ctx, Graph, OptKind, Optimizer, Tensor, Var};
use crate::nets::TIMBRE_TOKENS;
use crate::scalar::Scalar;

use super::layer::{actnorm_init, flow_nll};
use super::{AttrStats, FlowError, FlowStack, VoiceAttributes, VoiceFeatures};

#[derive(Clone, Debug)]
pub struct VodTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for VodTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 64, lr: 2e-4, weight_decay: 0.0, seed: 0 }
    }
}

pub(super) struct StackBatchNll {
    pub nll_f0: Var,
    pub nll_g: Var,
    pub nll_tok_mean: Var,
    /// `nll_f0 + nll_g + 50 * nll_tok_mean`, the mean per-utterance loss.
    pub total: Var,
}

/// Build the batched NLL graph over a slice of (features, attributes).
pub(super) fn build_stack_batch<T: Scalar>(
    stack: &FlowStack<T>,
    ctx: &mut Ctx<T>,
    data: &[(VoiceFeatures<T>, VoiceAttributes)],
) -> Result<StackBatchNll, FlowError> {
    let b = data.len();
    if b == 0 {
        return Err(FlowError::Invalid("empty batch".into()));
    }
    let dim = stack.cfg.timbre_dim;
    let mut f0 = Tensor::zeros(&[b, 2]);
    let mut f0_cond = Tensor::zeros(&[b, 2]);
    let mut g_mat = Tensor::zeros(&[b, dim]);
    let mut g_cond = Tensor::zeros(&[b, 4]);
    let mut tokens = Tensor::zeros(&[b * TIMBRE_TOKENS, dim]);
    let base = 4 + dim;
    let mut tok_cond_fixed = Tensor::zeros(&[b * TIMBRE_TOKENS, base]);
    let mut idx = Vec::with_capacity(b * TIMBRE_TOKENS);
    for (u, (feats, attrs)) in data.iter().enumerate() {
        attrs.validate()?;
        let std = stack.attr_stats.standardize(attrs);
        f0.row_mut(u).copy_from_slice(&feats.f0_stats);
        f0_cond.row_mut(u).copy_from_slice(&[T::of(std[0]), T::of(std[1])]);
        g_mat.row_mut(u).copy_from_slice(feats.global.data());
        g_cond.row_mut(u).copy_from_slice(&[
            T::of(std[0]),
            T::of(std[1]),
            feats.f0_stats[0],
            feats.f0_stats[1],
        ]);
        for i in 0..TIMBRE_TOKENS {
            let r = u * TIMBRE_TOKENS + i;
            tokens.row_mut(r).copy_from_slice(feats.tokens.row(i));
            let row = tok_cond_fixed.row_mut(r);
            row[0] = T::of(std[0]);
            row[1] = T::of(std[1]);
            row[2] = feats.f0_stats[0];
            row[3] = feats.f0_stats[1];
            row[4..].copy_from_slice(feats.global.data());
            idx.push(i);
        }
    }
    let f0_x = ctx.g.leaf(f0);
    let f0_c = ctx.g.leaf(f0_cond);
    let nll_f0 = flow_nll(ctx, "f0", &stack.cfg.f0_net(), f0_x, f0_c)?;
    let g_x = ctx.g.leaf(g_mat);
    let g_c = ctx.g.leaf(g_cond);
    let nll_g = flow_nll(ctx, "g", &stack.cfg.timbre_net(), g_x, g_c)?;
    let t_x = ctx.g.leaf(tokens);
    let fixed = ctx.g.leaf(tok_cond_fixed);
    let emb_table = ctx.p("tok.idx_emb")?;
    let emb = ctx.g.embedding(emb_table, &idx)?;
    let t_c = ctx.g.concat(&[fixed, emb], 1)?;
    let nll_tok_mean = flow_nll(ctx, "tok", &stack.cfg.tokens_net(), t_x, t_c)?;
    let tok_total = ctx.g.affine(nll_tok_mean, T::of(TIMBRE_TOKENS as f64), T::zero());
    let a = ctx.g.add(nll_f0, nll_g)?;
    let total = ctx.g.add(a, tok_total)?;
    Ok(StackBatchNll { nll_f0, nll_g, nll_tok_mean, total })
}

/// Fit the stack: estimate attribute standardization, run the data-dependent
/// actnorm initialization on the first batch, then AdamW on the summed NLL.
/// Returns the per-step loss history.
pub fn train_flow_stack<T: Scalar>(
    stack: &mut FlowStack<T>,
    data: &[(VoiceFeatures<T>, VoiceAttributes)],
    cfg: &VodTrainConfig,
) -> Result<Vec<T>, FlowError> {
    if data.len() < 2 {
        return Err(FlowError::Invalid("need at least 2 training utterances".into()));
    }
    stack.attr_stats = AttrStats::from_attrs(data.iter().map(|(_, a)| *a));

    // actnorm init on an initial batch
    let init_n = data.len().min(cfg.batch.max(16));
    let dim = stack.cfg.timbre_dim;
    let mut f0 = Tensor::zeros(&[init_n, 2]);
    let mut f0_cond = Tensor::zeros(&[init_n, 2]);
    let mut g_mat = Tensor::zeros(&[init_n, dim]);
    let mut g_cond = Tensor::zeros(&[init_n, 4]);
    let mut tokens = Tensor::zeros(&[init_n * TIMBRE_TOKENS, dim]);
    let mut tok_cond = Tensor::zeros(&[init_n * TIMBRE_TOKENS, 4 + dim + super::TOKEN_INDEX_DIM]);
    let emb = stack.params.get("tok.idx_emb")?.clone();
    for (u, (feats, attrs)) in data.iter().take(init_n).enumerate() {
        let std = stack.attr_stats.standardize(attrs);
        f0.row_mut(u).copy_from_slice(&feats.f0_stats);
        f0_cond.row_mut(u).copy_from_slice(&[T::of(std[0]), T::of(std[1])]);
        g_mat.row_mut(u).copy_from_slice(feats.global.data());
        g_cond.row_mut(u).copy_from_slice(&[
            T::of(std[0]),
            T::of(std[1]),
            feats.f0_stats[0],
            feats.f0_stats[1],
        ]);
        for i in 0..TIMBRE_TOKENS {
            let r = u * TIMBRE_TOKENS + i;
            tokens.row_mut(r).copy_from_slice(feats.tokens.row(i));
            let row = tok_cond.row_mut(r);
            row[0] = T::of(std[0]);
            row[1] = T::of(std[1]);
            row[2] = feats.f0_stats[0];
            row[3] = feats.f0_stats[1];
            row[4..4 + dim].copy_from_slice(feats.global.data());
            row[4 + dim..].copy_from_slice(emb.row(i));
        }
    }
    actnorm_init(&mut stack.params, "f0", &stack.cfg.f0_net(), &f0, &f0_cond)?;
    actnorm_init(&mut stack.params, "g", &stack.cfg.timbre_net(), &g_mat, &g_cond)?;
    actnorm_init(&mut stack.params, "tok", &stack.cfg.tokens_net(), &tokens, &tok_cond)?;
    stack.initialized = true;

    let mut opt = Optimizer::new(OptKind::AdamW, T::of(cfg.lr), T::of(cfg.weight_decay));
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step.wrapping_mul(0x9e3779b97f4a7c15)));
        let batch: Vec<&(VoiceFeatures<T>, VoiceAttributes)> =
            (0..cfg.batch.min(data.len())).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let owned: Vec<(VoiceFeatures<T>, VoiceAttributes)> =
            batch.into_iter().cloned().collect();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &stack.params, true, cfg.seed ^ step);
        let built = build_stack_batch(stack, &mut ctx, &owned)?;
        let loss = g.item(built.total);
        if !loss.is_finite() {
            return Err(FlowError::Invalid(format!("non-finite flow loss at step {step}")));
        }
        let mut grads = g.backward(built.total)?;
        let named = g.param_grads(&mut grads);
        opt.step(&mut stack.params, &named)?;
        history.push(loss);
    }
    Ok(history)
}
