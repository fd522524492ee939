//! Checkpoints in the NFF1 container: parameters, optimizer moments, loss
//! history and the full configuration, keyed by entry-name prefixes.
//! Round-tripping a checkpoint reproduces a bitwise-identical next step.

use std::path::Path;

use indexmap::IndexMap;

use super::train::{TrainState};
use super::{Backbone, BackboneConfig, PipelineError};
use crate::audio::{load_features, save_features, FeatureMap};
use crate::grad::{OptKind, Optimizer, Params, Tensor};
use crate::nets::NetsConfig;
use crate::objectives::LossBreakdown;

const VERSION: f32 = 1.0;

fn scalar_entry(map: &mut FeatureMap, name: &str, v: f64) {
    map.insert(name.to_string(), Tensor::scalar(v as f32));
}

fn vec_entry(map: &mut FeatureMap, name: &str, vs: &[f64]) {
    map.insert(
        name.to_string(),
        Tensor::new(vec![vs.len()], vs.iter().map(|&v| v as f32).collect()).expect("vec entry"),
    );
}

fn get_scalar(map: &FeatureMap, name: &str) -> Result<f64, PipelineError> {
    map.get(name)
        .map(|t| t.data()[0] as f64)
        .ok_or_else(|| PipelineError::Invalid(format!("checkpoint missing `{name}`")))
}

fn get_vec(map: &FeatureMap, name: &str) -> Result<Vec<f64>, PipelineError> {
    map.get(name)
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .ok_or_else(|| PipelineError::Invalid(format!("checkpoint missing `{name}`")))
}

/// u64 split into four exact 16-bit limbs.
fn seed_entry(map: &mut FeatureMap, name: &str, seed: u64) {
    let limbs: Vec<f32> = (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect();
    map.insert(name.to_string(), Tensor::new(vec![4], limbs).expect("seed limbs"));
}

fn get_seed(map: &FeatureMap, name: &str) -> Result<u64, PipelineError> {
    let limbs = get_vec(map, name)?;
    Ok(limbs.iter().enumerate().fold(0u64, |acc, (i, &l)| acc | ((l as u64) << (16 * i))))
}

/// f64 stored through its exact bit pattern so resumed runs see identical
/// hyperparameters.
fn f64_entry(map: &mut FeatureMap, name: &str, v: f64) {
    seed_entry(map, name, v.to_bits());
}

fn get_f64(map: &FeatureMap, name: &str) -> Result<f64, PipelineError> {
    Ok(f64::from_bits(get_seed(map, name)?))
}

fn f64_pair_entry(map: &mut FeatureMap, name: &str, v: (f64, f64)) {
    f64_entry(map, &format!("{name}/lo"), v.0);
    f64_entry(map, &format!("{name}/hi"), v.1);
}

fn get_f64_pair(map: &FeatureMap, name: &str) -> Result<(f64, f64), PipelineError> {
    Ok((get_f64(map, &format!("{name}/lo"))?, get_f64(map, &format!("{name}/hi"))?))
}

fn config_entries(map: &mut FeatureMap, cfg: &BackboneConfig) {
    scalar_entry(map, "cfg/sample_rate", cfg.sample_rate as f64);
    scalar_entry(map, "cfg/hop", cfg.hop as f64);
    scalar_entry(map, "cfg/mel_bands", cfg.mel_bands as f64);
    scalar_entry(map, "cfg/mel_win", cfg.mel_win as f64);
    f64_entry(map, "cfg/lambda_pitch", cfg.lambda_pitch);
    f64_entry(map, "cfg/voicing_threshold", cfg.voicing_threshold);
    let n = &cfg.nets;
    scalar_entry(map, "cfg/nets/frontend_dim", n.frontend_dim as f64);
    scalar_entry(map, "cfg/nets/linguistic_dim", n.linguistic_dim as f64);
    scalar_entry(map, "cfg/nets/linguistic_blocks", n.linguistic_blocks as f64);
    scalar_entry(map, "cfg/nets/timbre_dim", n.timbre_dim as f64);
    scalar_entry(map, "cfg/nets/timbre_width", n.timbre_width as f64);
    scalar_entry(map, "cfg/nets/attn_dim", n.attn_dim as f64);
    vec_entry(map, "cfg/nets/pitch_channels", &n.pitch_channels.map(|c| c as f64));
    scalar_entry(map, "cfg/nets/gru_hidden", n.gru_hidden as f64);
    scalar_entry(map, "cfg/nets/frame_channels", n.frame_channels as f64);
    scalar_entry(map, "cfg/nets/frame_blocks", n.frame_blocks as f64);
    scalar_entry(map, "cfg/nets/synth_channels", n.synth_channels as f64);
    scalar_entry(map, "cfg/nets/synth_blocks", n.synth_blocks as f64);
    vec_entry(
        map,
        "cfg/nets/synth_dilations",
        &n.synth_dilations.iter().map(|&d| d as f64).collect::<Vec<_>>(),
    );
    f64_entry(map, "cfg/nets/dropout", n.dropout);
    vec_entry(
        map,
        "cfg/mss/fft_sizes",
        &cfg.mss.fft_sizes.iter().map(|&f| f as f64).collect::<Vec<_>>(),
    );
    let c = &cfg.contrastive;
    f64_entry(map, "cfg/contrastive/temperature", c.temperature);
    scalar_entry(map, "cfg/contrastive/exclusion_radius", c.exclusion_radius as f64);
    scalar_entry(map, "cfg/contrastive/n_negatives", c.n_negatives as f64);
    f64_entry(map, "cfg/contrastive/coeff_start", c.coeff_start);
    f64_entry(map, "cfg/contrastive/coeff_end", c.coeff_end);
    let p = &cfg.perturb;
    f64_pair_entry(map, "cfg/perturb/formant_ratio", p.formant_ratio);
    f64_pair_entry(map, "cfg/perturb/pitch_semitones", p.pitch_semitones);
    f64_pair_entry(map, "cfg/perturb/eq_gain_db", p.eq_gain_db);
    f64_pair_entry(map, "cfg/perturb/breathiness", p.breathiness);
    f64_pair_entry(map, "cfg/perturb/noise_snr_db", p.noise_snr_db);
}

fn config_from_entries(map: &FeatureMap) -> Result<BackboneConfig, PipelineError> {
    let pc = get_vec(map, "cfg/nets/pitch_channels")?;
    Ok(BackboneConfig {
        sample_rate: get_scalar(map, "cfg/sample_rate")? as u32,
        hop: get_scalar(map, "cfg/hop")? as usize,
        mel_bands: get_scalar(map, "cfg/mel_bands")? as usize,
        mel_win: get_scalar(map, "cfg/mel_win")? as usize,
        nets: NetsConfig {
            frontend_dim: get_scalar(map, "cfg/nets/frontend_dim")? as usize,
            linguistic_dim: get_scalar(map, "cfg/nets/linguistic_dim")? as usize,
            linguistic_blocks: get_scalar(map, "cfg/nets/linguistic_blocks")? as usize,
            timbre_dim: get_scalar(map, "cfg/nets/timbre_dim")? as usize,
            timbre_width: get_scalar(map, "cfg/nets/timbre_width")? as usize,
            attn_dim: get_scalar(map, "cfg/nets/attn_dim")? as usize,
            pitch_channels: [pc[0] as usize, pc[1] as usize, pc[2] as usize, pc[3] as usize],
            gru_hidden: get_scalar(map, "cfg/nets/gru_hidden")? as usize,
            frame_channels: get_scalar(map, "cfg/nets/frame_channels")? as usize,
            frame_blocks: get_scalar(map, "cfg/nets/frame_blocks")? as usize,
            synth_channels: get_scalar(map, "cfg/nets/synth_channels")? as usize,
            synth_blocks: get_scalar(map, "cfg/nets/synth_blocks")? as usize,
            synth_dilations: get_vec(map, "cfg/nets/synth_dilations")?
                .into_iter()
                .map(|d| d as usize)
                .collect(),
            dropout: get_f64(map, "cfg/nets/dropout")?,
        },
        mss: crate::objectives::MssConfig {
            fft_sizes: get_vec(map, "cfg/mss/fft_sizes")?.into_iter().map(|f| f as usize).collect(),
        },
        contrastive: crate::objectives::ContrastiveConfig {
            temperature: get_f64(map, "cfg/contrastive/temperature")?,
            exclusion_radius: get_scalar(map, "cfg/contrastive/exclusion_radius")? as usize,
            n_negatives: get_scalar(map, "cfg/contrastive/n_negatives")? as usize,
            coeff_start: get_f64(map, "cfg/contrastive/coeff_start")?,
            coeff_end: get_f64(map, "cfg/contrastive/coeff_end")?,
        },
        perturb: crate::perturb::PerturbConfig {
            formant_ratio: get_f64_pair(map, "cfg/perturb/formant_ratio")?,
            pitch_semitones: get_f64_pair(map, "cfg/perturb/pitch_semitones")?,
            eq_gain_db: get_f64_pair(map, "cfg/perturb/eq_gain_db")?,
            breathiness: get_f64_pair(map, "cfg/perturb/breathiness")?,
            noise_snr_db: get_f64_pair(map, "cfg/perturb/noise_snr_db")?,
        },
        lambda_pitch: get_f64(map, "cfg/lambda_pitch")?,
        voicing_threshold: get_f64(map, "cfg/voicing_threshold")?,
    })
}

/// Serialize a training state. Checkpoints store `f32` tensors, matching
/// the production scalar type bit for bit.
pub fn save_checkpoint(state: &TrainState<f32>, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut map = FeatureMap::new();
    map.insert("meta/version".into(), Tensor::scalar(VERSION));
    scalar_entry(&mut map, "meta/step", state.step as f64);
    scalar_entry(&mut map, "meta/total_steps", state.total_steps as f64);
    seed_entry(&mut map, "meta/seed", state.seed);
    scalar_entry(&mut map, "meta/batch", state.batch as f64);
    scalar_entry(&mut map, "meta/crop_frames", state.crop_frames as f64);
    scalar_entry(
        &mut map,
        "meta/opt_kind",
        match state.optimizer.kind {
            OptKind::Adam => 0.0,
            OptKind::AdamW => 1.0,
        },
    );
    map.insert("meta/lr".into(), Tensor::scalar(state.optimizer.lr));
    map.insert("meta/weight_decay".into(), Tensor::scalar(state.optimizer.weight_decay));
    scalar_entry(&mut map, "meta/opt_step", state.optimizer.step_count() as f64);
    let h = &state.history;
    let mut hist = Tensor::zeros(&[h.len(), 6]);
    for (i, b) in h.iter().enumerate() {
        hist.row_mut(i).copy_from_slice(&[b.total, b.mss, b.mel, b.pitch, b.contrastive, b.coeff]);
    }
    map.insert("meta/history".into(), hist);
    config_entries(&mut map, &state.backbone.cfg);
    for (name, t) in state.backbone.params.iter() {
        map.insert(format!("param/{name}"), t.clone());
    }
    let (m, v) = state.optimizer.state();
    for (name, t) in m {
        map.insert(format!("opt/m/{name}"), t.clone());
    }
    for (name, t) in v {
        map.insert(format!("opt/v/{name}"), t.clone());
    }
    save_features(&map, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState<f32>, PipelineError> {
    let map = load_features(path)?;
    let version = get_scalar(&map, "meta/version")?;
    if version != VERSION as f64 {
        return Err(PipelineError::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let cfg = config_from_entries(&map)?;
    let mut params = Params::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for (name, t) in map.iter() {
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p, t.clone());
        } else if let Some(p) = name.strip_prefix("opt/m/") {
            m.insert(p.to_string(), t.clone());
        } else if let Some(p) = name.strip_prefix("opt/v/") {
            v.insert(p.to_string(), t.clone());
        }
    }
    let kind = if get_scalar(&map, "meta/opt_kind")? == 1.0 { OptKind::AdamW } else { OptKind::Adam };
    let lr = map.get("meta/lr").map(|t| t.data()[0]).unwrap_or(1e-4);
    let wd = map.get("meta/weight_decay").map(|t| t.data()[0]).unwrap_or(0.0);
    let mut optimizer = Optimizer::new(kind, lr, wd);
    optimizer.restore(get_scalar(&map, "meta/opt_step")? as u64, m, v);
    let hist_t = map
        .get("meta/history")
        .ok_or_else(|| PipelineError::Invalid("checkpoint missing history".into()))?;
    let history = (0..hist_t.dims()[0])
        .map(|i| {
            let r = hist_t.row(i);
            LossBreakdown {
                total: r[0],
                mss: r[1],
                mel: r[2],
                pitch: r[3],
                contrastive: r[4],
                coeff: r[5],
            }
        })
        .collect();
    Ok(TrainState {
        backbone: Backbone { cfg, params },
        optimizer,
        step: get_scalar(&map, "meta/step")? as u64,
        total_steps: get_scalar(&map, "meta/total_steps")? as u64,
        seed: get_seed(&map, "meta/seed")?,
        batch: get_scalar(&map, "meta/batch")? as usize,
        crop_frames: get_scalar(&map, "meta/crop_frames")? as usize,
        history,
    })
}
