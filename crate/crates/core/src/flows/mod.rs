//! Voice-design flows: three chained conditional normalizing flows over F0
//! statistics, the global timbre embedding, and the timbre tokens, plus
//! attribute editing, identity sampling, and the speaker-diversity metric.

mod layer;
mod train;

pub use layer::{actnorm_init, flow_forward, flow_inverse, flow_nll, init_flow, layer_forward,
    layer_inverse, FlowNetConfig};
pub use train::{train_flow_stack, VodTrainConfig};

use rand::Rng;
use thiserror::Error;

use crate::grad::{Ctx, Graph, GradError, Params, Tensor};
use crate::nets::TIMBRE_TOKENS;
use crate::scalar::Scalar;

pub const F0_FLOW_LAYERS: usize = 8;
pub const TIMBRE_FLOW_LAYERS: usize = 12;
pub const TOKENS_FLOW_LAYERS: usize = 16;
/// Width of the learned token-index embedding conditioning the tokens flow.
pub const TOKEN_INDEX_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow dimension {0} must be even and positive")]
    OddChannels(usize),
    #[error("zero variance in channel {0} during actnorm initialization")]
    ZeroVariance(usize),
    #[error("stack must be trained (or actnorm-initialized) first")]
    Untrained,
    #[error("speaker diversity needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("age must be positive, got {0}")]
    BadAge(f64),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Continuous voice attributes: gender on a continuous scale (negative
/// toward masculine by convention) and age in years.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoiceAttributes {
    pub gender: f64,
    pub age: f64,
}

impl VoiceAttributes {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.age <= 0.0 {
            return Err(FlowError::BadAge(self.age));
        }
        Ok(())
    }
}

/// The per-utterance features the stack models.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiceFeatures<T> {
    /// `(median, variance)` of voiced log-F0.
    pub f0_stats: [T; 2],
    /// `[C_T]` global timbre embedding.
    pub global: Tensor<T>,
    /// `[50, C_T]` timbre tokens.
    pub tokens: Tensor<T>,
}

/// Standardization of the conditioning attributes, estimated from the
/// training set.
#[derive(Clone, Copy, Debug)]
pub struct AttrStats {
    pub gender_mean: f64,
    pub gender_std: f64,
    pub age_mean: f64,
    pub age_std: f64,
}

impl Default for AttrStats {
    fn default() -> Self {
        Self { gender_mean: 0.0, gender_std: 1.0, age_mean: 0.0, age_std: 1.0 }
    }
}

impl AttrStats {
    pub fn from_attrs(attrs: impl Iterator<Item = VoiceAttributes> + Clone) -> Self {
        let n = attrs.clone().count().max(1) as f64;
        let (gm, am) = attrs
            .clone()
            .fold((0.0, 0.0), |(g, a), v| (g + v.gender / n, a + v.age / n));
        let (gv, av) = attrs.fold((0.0, 0.0), |(g, a), v| {
            (g + (v.gender - gm).powi(2) / n, a + (v.age - am).powi(2) / n)
        });
        Self {
            gender_mean: gm,
            gender_std: gv.sqrt().max(1e-6),
            age_mean: am,
            age_std: av.sqrt().max(1e-6),
        }
    }

    /// `[standardized gender, standardized age]`.
    pub fn standardize(&self, a: &VoiceAttributes) -> [f64; 2] {
        [(a.gender - self.gender_mean) / self.gender_std, (a.age - self.age_mean) / self.age_std]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStackConfig {
    /// C_T of the modeled embeddings/tokens; must be even.
    pub timbre_dim: usize,
    /// Conditioner MLP width.
    pub hidden: usize,
}

impl Default for FlowStackConfig {
    fn default() -> Self {
        Self { timbre_dim: 192, hidden: 64 }
    }
}

impl FlowStackConfig {
    pub fn f0_net(&self) -> FlowNetConfig {
        FlowNetConfig { dim: 2, cond_dim: 2, layers: F0_FLOW_LAYERS, hidden: self.hidden }
    }

    /// Conditioned on (gender, age, F0 stats).
    pub fn timbre_net(&self) -> FlowNetConfig {
        FlowNetConfig {
            dim: self.timbre_dim,
            cond_dim: 4,
            layers: TIMBRE_FLOW_LAYERS,
            hidden: self.hidden,
        }
    }

    /// Conditioned on (gender, age, F0 stats, global embedding, token index).
    pub fn tokens_net(&self) -> FlowNetConfig {
        FlowNetConfig {
            dim: self.timbre_dim,
            cond_dim: 4 + self.timbre_dim + TOKEN_INDEX_DIM,
            layers: TOKENS_FLOW_LAYERS,
            hidden: self.hidden,
        }
    }
}

/// Three chained conditional flows with shared attribute standardization.
pub struct FlowStack<T> {
    pub cfg: FlowStackConfig,
    pub params: Params<T>,
    pub attr_stats: AttrStats,
    pub initialized: bool,
}

impl<T: Scalar> FlowStack<T> {
    pub fn new<R: Rng + ?Sized>(cfg: FlowStackConfig, rng: &mut R) -> Result<Self, FlowError> {
        let mut params = Params::new();
        layer::init_flow(&mut params, "f0", &cfg.f0_net(), rng)?;
        layer::init_flow(&mut params, "g", &cfg.timbre_net(), rng)?;
        layer::init_flow(&mut params, "tok", &cfg.tokens_net(), rng)?;
        params.init_fan_in("tok.idx_emb", &[TIMBRE_TOKENS, TOKEN_INDEX_DIM], TOKEN_INDEX_DIM, rng);
        Ok(Self { cfg, params, attr_stats: AttrStats::default(), initialized: false })
    }

    fn require_initialized(&self) -> Result<(), FlowError> {
        if self.initialized {
            Ok(())
        } else {
            Err(FlowError::Untrained)
        }
    }

    /// Conditioning rows for the three networks on one utterance.
    fn conds(
        &self,
        attrs: &VoiceAttributes,
        f0_stats: &[T; 2],
        global: Option<&Tensor<T>>,
    ) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
        let std = self.attr_stats.standardize(attrs);
        let f0_cond = Tensor::new(vec![1, 2], vec![T::of(std[0]), T::of(std[1])]).unwrap();
        let g_cond = Tensor::new(
            vec![1, 4],
            vec![T::of(std[0]), T::of(std[1]), f0_stats[0], f0_stats[1]],
        )
        .unwrap();
        let tok_cond = global.map(|g| {
            // per-token rows: [attrs, f0 stats, g, idx embedding]
            let base = 4 + self.cfg.timbre_dim;
            let emb = self.params.get("tok.idx_emb").expect("token index embedding");
            let mut rows = Tensor::zeros(&[TIMBRE_TOKENS, base + TOKEN_INDEX_DIM]);
            for i in 0..TIMBRE_TOKENS {
                let row = rows.row_mut(i);
                row[0] = T::of(std[0]);
                row[1] = T::of(std[1]);
                row[2] = f0_stats[0];
                row[3] = f0_stats[1];
                row[4..4 + self.cfg.timbre_dim].copy_from_slice(g.data());
                row[base..].copy_from_slice(emb.row(i));
            }
            rows
        });
        (f0_cond, g_cond, tok_cond)
    }

    /// Total negative log-likelihood of one utterance's features:
    /// `nll(F0 stats) + nll(g) + Σ_i nll(token_i)`.
    pub fn stack_nll(&self, feats: &VoiceFeatures<T>, attrs: &VoiceAttributes) -> Result<T, FlowError> {
        attrs.validate()?;
        let (f0_cond, g_cond, tok_cond) = self.conds(attrs, &feats.f0_stats, Some(&feats.global));
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.params);
        let f0_x = ctx.g.leaf(Tensor::new(vec![1, 2], feats.f0_stats.to_vec()).unwrap());
        let f0_c = ctx.g.leaf(f0_cond);
        let nll_f0 = flow_nll(&mut ctx, "f0", &self.cfg.f0_net(), f0_x, f0_c)?;

        let g_x = ctx.g.leaf(feats.global.clone().reshaped(vec![1, self.cfg.timbre_dim])?);
        let g_c = ctx.g.leaf(g_cond);
        let nll_g = flow_nll(&mut ctx, "g", &self.cfg.timbre_net(), g_x, g_c)?;

        let t_x = ctx.g.leaf(feats.tokens.clone());
        let t_c = ctx.g.leaf(tok_cond.expect("token conditioning"));
        let nll_tok_mean = flow_nll(&mut ctx, "tok", &self.cfg.tokens_net(), t_x, t_c)?;

        let total = g.item(nll_f0)
            + g.item(nll_g)
            + g.item(nll_tok_mean) * T::of(TIMBRE_TOKENS as f64);
        if !total.is_finite() {
            return Err(FlowError::Invalid("non-finite stack NLL".into()));
        }
        Ok(total)
    }

    /// Mean NLL of each network over a feature batch (evaluation only).
    pub fn nll_components(
        &self,
        data: &[(VoiceFeatures<T>, VoiceAttributes)],
    ) -> Result<[T; 3], FlowError> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.params);
        let built = train::build_stack_batch(self, &mut ctx, data)?;
        Ok([g.item(built.nll_f0), g.item(built.nll_g), g.item(built.nll_tok_mean)])
    }

    /// Forward every feature to its latent under source conditioning.
    fn to_latents(
        &self,
        feats: &VoiceFeatures<T>,
        attrs: &VoiceAttributes,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), FlowError> {
        let (f0_cond, g_cond, tok_cond) = self.conds(attrs, &feats.f0_stats, Some(&feats.global));
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.params);
        let f0_x = ctx.g.leaf(Tensor::new(vec![1, 2], feats.f0_stats.to_vec()).unwrap());
        let f0_c = ctx.g.leaf(f0_cond);
        let (zf, _) = flow_forward(&mut ctx, "f0", &self.cfg.f0_net(), f0_x, f0_c)?;
        let g_x = ctx.g.leaf(feats.global.clone().reshaped(vec![1, self.cfg.timbre_dim])?);
        let g_c = ctx.g.leaf(g_cond);
        let (zg, _) = flow_forward(&mut ctx, "g", &self.cfg.timbre_net(), g_x, g_c)?;
        let t_x = ctx.g.leaf(feats.tokens.clone());
        let t_c = ctx.g.leaf(tok_cond.expect("token conditioning"));
        let (zt, _) = flow_forward(&mut ctx, "tok", &self.cfg.tokens_net(), t_x, t_c)?;
        Ok((g.value(zf).clone(), g.value(zg).clone(), g.value(zt).clone()))
    }

    /// Inverse pass through the chain: F0 stats first, then the global
    /// embedding conditioned on them, then the tokens.
    fn from_latents(
        &self,
        zf: &Tensor<T>,
        zg: &Tensor<T>,
        zt: &Tensor<T>,
        attrs: &VoiceAttributes,
    ) -> Result<VoiceFeatures<T>, FlowError> {
        let (f0_cond, _, _) = self.conds(attrs, &[T::zero(); 2], None);
        let f0 = flow_inverse(&self.params, "f0", &self.cfg.f0_net(), zf, &f0_cond)?;
        let f0_stats = [f0.at2(0, 0), f0.at2(0, 1)];
        let (_, g_cond, _) = self.conds(attrs, &f0_stats, None);
        let global = flow_inverse(&self.params, "g", &self.cfg.timbre_net(), zg, &g_cond)?;
        let global = global.reshaped(vec![self.cfg.timbre_dim])?;
        let (_, _, tok_cond) = self.conds(attrs, &f0_stats, Some(&global));
        let tokens =
            flow_inverse(&self.params, "tok", &self.cfg.tokens_net(), zt, &tok_cond.unwrap())?;
        Ok(VoiceFeatures { f0_stats, global, tokens })
    }

    /// Edit voice attributes: forward under the source attributes, inverse
    /// under the target attributes, applying the age-crossing gender rule.
    pub fn edit_attributes(
        &self,
        feats: &VoiceFeatures<T>,
        src: &VoiceAttributes,
        tgt: &VoiceAttributes,
    ) -> Result<VoiceFeatures<T>, FlowError> {
        self.require_initialized()?;
        src.validate()?;
        tgt.validate()?;
        let (zf, zg, zt) = self.to_latents(feats, src)?;
        let tgt = VoiceAttributes { gender: effective_target_gender(src, tgt), age: tgt.age };
        self.from_latents(&zf, &zg, &zt, &tgt)
    }

    /// Sample a new identity from standard-normal latents under the target
    /// attributes.
    pub fn sample_identity<R: Rng + ?Sized>(
        &self,
        attrs: &VoiceAttributes,
        rng: &mut R,
    ) -> Result<VoiceFeatures<T>, FlowError> {
        self.require_initialized()?;
        attrs.validate()?;
        let zf = Tensor::randn(&[1, 2], T::one(), rng);
        let zg = Tensor::randn(&[1, self.cfg.timbre_dim], T::one(), rng);
        let zt = Tensor::randn(&[TIMBRE_TOKENS, self.cfg.timbre_dim], T::one(), rng);
        self.from_latents(&zf, &zg, &zt, attrs)
    }
}

/// Gender adjustment when an edit crosses age 10: moving from a child voice
/// to a mature voice multiplies the gender value by 8, the reverse divides
/// it by 8 (applied on the raw attribute scale, before standardization).
pub fn effective_target_gender(src: &VoiceAttributes, tgt: &VoiceAttributes) -> f64 {
    let (child_src, child_tgt) = (src.age < 10.0, tgt.age < 10.0);
    if child_src && !child_tgt {
        tgt.gender * 8.0
    } else if !child_src && child_tgt {
        tgt.gender / 8.0
    } else {
        tgt.gender
    }
}

/// Speaker-diversity metric: the exact median over vectors of the
/// nearest-neighbor cosine distance `1 - cos(v_i, v_j)`. For an even count
/// the median is the mean of the two central order statistics.
pub fn speaker_diversity<T: Scalar>(vectors: &Tensor<T>) -> Result<f64, FlowError> {
    if vectors.rank() != 2 {
        return Err(FlowError::Invalid(format!("expected [n, d] matrix, got {:?}", vectors.dims())));
    }
    let n = vectors.dims()[0];
    if n < 2 {
        return Err(FlowError::TooFewVectors(n));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| vectors.row(i).iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut nearest = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 =
                vectors.row(i).iter().zip(vectors.row(j)).map(|(a, b)| a.to_f64c() * b.to_f64c()).sum();
            let d = 1.0 - dot / (norms[i] * norms[j]);
            best = best.min(d);
        }
        nearest.push(best);
    }
    nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = n / 2;
    Ok(if n % 2 == 1 { nearest[m] } else { 0.5 * (nearest[m - 1] + nearest[m]) })
}
