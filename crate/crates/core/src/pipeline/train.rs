//! Backbone training: per step, every batch shard samples a crop, builds the
//! full analysis/synthesis graph with its losses on its own tape, and the
//! shard gradients are reduced in a fixed order before one optimizer update.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::Dataset;
use super::{excitation_graph, synthesis_graph, Backbone, BackboneConfig, PipelineError, SynthInputs};
use crate::audio::AudioBuffer;
use crate::dsp::{cqt_crop_pair, CqtMatrix};
use crate::grad::{Ctx, Graph, OptKind, Optimizer, Tensor};
use crate::nets;
use crate::objectives::{self, LossBreakdown};
use crate::perturb::{perturbation_chain, NoiseBank};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Total step count the run trains to.
    pub steps: u64,
    /// Horizon of the contrastive coefficient schedule; 0 means "same as
    /// `steps`". Stored in checkpoints so resumed runs keep the schedule.
    pub schedule_steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptKind,
    /// Crop length in frames (about 1 s at the default rates).
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule_steps: 0,
            batch: 4,
            lr: 1e-4,
            weight_decay: 0.0,
            optimizer: OptKind::Adam,
            crop_frames: 62,
            seed: 0,
        }
    }
}

/// Everything a training run carries: model, optimizer state, step counter,
/// base seed and the loss history.
pub struct TrainState<T> {
    pub backbone: Backbone<T>,
    pub optimizer: Optimizer<T>,
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub batch: usize,
    pub crop_frames: usize,
    pub history: Vec<LossBreakdown<T>>,
}

fn shard_seed(seed: u64, step: u64, item: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9e3779b97f4a7c15) ^ (item as u64).wrapping_mul(0xd1b54a32d192ed03)
}

/// One shard: sample a crop, run both CQT views through the pitch encoder,
/// both perturbed views through the linguistic encoder, the clean mel
/// through the timbre encoder, synthesize, and differentiate the combined
/// loss.
#[allow(clippy::too_many_arguments)]
fn shard_pass<T: Scalar>(
    backbone: &Backbone<T>,
    dataset: &Dataset<T>,
    bank: &NoiseBank<T>,
    crop_frames: usize,
    step: u64,
    total_steps: u64,
    seed: u64,
    item: usize,
) -> Result<(IndexMap<String, Tensor<T>>, LossBreakdown<T>), PipelineError> {
    let cfg = &backbone.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(shard_seed(seed, step, item));
    let utt = &dataset.utterances[rng.gen_range(0..dataset.utterances.len())];
    let max_off = utt.cqt.frames() - crop_frames;
    let off = rng.gen_range(0..=max_off);
    let samples = &utt.samples[off * cfg.hop..(off + crop_frames) * cfg.hop];
    let bins = utt.cqt.bins();
    let mut crop_cqt = Tensor::zeros(&[crop_frames, bins]);
    for r in 0..crop_frames {
        crop_cqt.row_mut(r).copy_from_slice(utt.cqt.mags.row(off + r));
    }
    let crop_cqt =
        CqtMatrix { mags: crop_cqt, hop: cfg.hop, sample_rate: dataset.sample_rate };
    let pair = cqt_crop_pair(&crop_cqt, &mut rng)?;

    let crop_buf = AudioBuffer::new(samples.to_vec(), dataset.sample_rate);
    let (view1, view2, _) = perturbation_chain(&crop_buf, &cfg.perturb, bank, &mut rng)?;
    let mel1 = backbone.aligned_log_mel(&view1.samples)?;
    let mel2 = backbone.aligned_log_mel(&view2.samples)?;
    let clean_mel = backbone.aligned_log_mel(samples)?;

    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &backbone.params, true, shard_seed(seed, step, item) ^ 0x5d);
    let pitch1 = nets::pitch_encoder_forward(&mut ctx, &cfg.nets, &pair.crop1)?;
    let pitch2 = nets::pitch_encoder_forward(&mut ctx, &cfg.nets, &pair.crop2)?;
    let pitch_loss =
        objectives::pitch_consistency_loss(ctx.g, pitch1.f0, pitch2.f0, pair.shift_d)?;

    let l1 = nets::linguistic_encoder_forward(&mut ctx, &cfg.nets, &mel1)?;
    let l2 = nets::linguistic_encoder_forward(&mut ctx, &cfg.nets, &mel2)?;
    let contrastive = objectives::contrastive_loss(ctx.g, l1, l2, &cfg.contrastive, &mut rng)?;

    let timbre = nets::timbre_encoder_forward(&mut ctx, &cfg.nets, &clean_mel)?;

    let out_len = crop_frames * cfg.hop;
    let excitation = excitation_graph(
        &mut ctx,
        pitch1.f0,
        pitch1.a_p,
        pitch1.a_ap,
        cfg.hop,
        out_len,
        cfg.sample_rate,
        &mut rng,
    )?;
    let wave = synthesis_graph(
        &mut ctx,
        cfg,
        &SynthInputs {
            f0: pitch1.f0,
            a_p: pitch1.a_p,
            a_ap: pitch1.a_ap,
            linguistic: l1,
            tokens: timbre.tokens,
            global: timbre.global,
            excitation,
        },
    )?;
    let target = g.leaf(Tensor::from_slice(&[out_len], samples)?);
    let mss = objectives::mss_loss(&mut g, wave, target, &cfg.mss)?;
    let mel = objectives::mel_loss(
        &mut g,
        wave,
        target,
        cfg.sample_rate,
        cfg.mel_bands,
        cfg.mel_win,
        cfg.hop,
    )?;
    let (total, breakdown) = objectives::total_backbone_loss(
        &mut g,
        mss,
        mel,
        pitch_loss,
        contrastive,
        cfg.lambda_pitch,
        &cfg.contrastive,
        step,
        total_steps,
    )
    .map_err(|e| PipelineError::NonFiniteLoss { step, component: e.to_string() })?;
    let mut grads = g.backward(total)?;
    Ok((g.param_grads(&mut grads), breakdown))
}

/// Run `additional` training steps on an existing state.
pub fn train_steps<T: Scalar>(
    state: &mut TrainState<T>,
    dataset: &Dataset<T>,
    bank: &NoiseBank<T>,
    additional: u64,
) -> Result<(), PipelineError> {
    let crop = state.crop_frames;
    for u in &dataset.utterances {
        if u.cqt.frames() < crop {
            return Err(PipelineError::Invalid(format!(
                "utterance with {} frames is shorter than the {}-frame crop",
                u.cqt.frames(),
                crop
            )));
        }
    }
    for _ in 0..additional {
        let step = state.step;
        let shards: Vec<(IndexMap<String, Tensor<T>>, LossBreakdown<T>)> = (0..state.batch)
            .into_par_iter()
            .map(|item| {
                shard_pass(
                    &state.backbone,
                    dataset,
                    bank,
                    crop,
                    step,
                    state.total_steps,
                    state.seed,
                    item,
                )
            })
            .collect::<Result<_, _>>()?;
        // fixed-order reduction keeps training bitwise deterministic
        let inv_batch = T::of(1.0 / state.batch as f64);
        let mut summed: IndexMap<String, Tensor<T>> = IndexMap::new();
        for (grads, _) in &shards {
            for (name, g) in grads {
                match summed.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        summed.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for g in summed.values_mut() {
            g.scale(inv_batch);
        }
        let mean = |f: fn(&LossBreakdown<T>) -> T| {
            shards.iter().map(|(_, b)| f(b)).sum::<T>() * inv_batch
        };
        let breakdown = LossBreakdown {
            total: mean(|b| b.total),
            mss: mean(|b| b.mss),
            mel: mean(|b| b.mel),
            pitch: mean(|b| b.pitch),
            contrastive: mean(|b| b.contrastive),
            coeff: shards[0].1.coeff,
        };
        if !breakdown.total.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step, component: "total".into() });
        }
        state.optimizer.step(&mut state.backbone.params, &summed)?;
        state.history.push(breakdown);
        state.step += 1;
    }
    Ok(())
}

/// Train a fresh backbone on raw utterances.
pub fn train_backbone<T: Scalar>(
    buffers: &[AudioBuffer<T>],
    bank: &NoiseBank<T>,
    cfg: BackboneConfig,
    tcfg: &TrainConfig,
) -> Result<TrainState<T>, PipelineError> {
    let excl = cfg.contrastive.exclusion_radius;
    if tcfg.crop_frames <= 2 * excl + 1 {
        return Err(PipelineError::Invalid(format!(
            "crop of {} frames is too short for contrastive negatives outside ±{excl}",
            tcfg.crop_frames
        )));
    }
    let min_samples = (tcfg.crop_frames * cfg.hop + cfg.hop).max(cfg.sample_rate as usize);
    let dataset = Dataset::prepare(buffers, &cfg, min_samples)?;
    let backbone = Backbone::init(cfg, tcfg.seed);
    let optimizer = Optimizer::new(tcfg.optimizer, T::of(tcfg.lr), T::of(tcfg.weight_decay));
    let total_steps = if tcfg.schedule_steps > 0 { tcfg.schedule_steps } else { tcfg.steps };
    let mut state = TrainState {
        backbone,
        optimizer,
        step: 0,
        total_steps,
        seed: tcfg.seed,
        batch: tcfg.batch,
        crop_frames: tcfg.crop_frames,
        history: Vec::new(),
    };
    train_steps(&mut state, &dataset, bank, tcfg.steps)?;
    Ok(state)
}
