//! Dataset preparation: loading, resampling, and per-utterance CQT caching.

use rayon::prelude::*;
use std::path::{Path, PathBuf};

use super::{BackboneConfig, PipelineError};
use crate::audio::{read_wav, resample, AudioBuffer};
use crate::dsp::{CqtMatrix, CqtPlan};
use crate::scalar::Scalar;

/// One training utterance with its cached full-band CQT.
pub struct PreparedUtterance<T> {
    pub samples: Vec<T>,
    pub cqt: CqtMatrix<T>,
}

/// Prepared training corpus at the analysis rate.
pub struct Dataset<T> {
    pub utterances: Vec<PreparedUtterance<T>>,
    pub sample_rate: u32,
}

impl<T: Scalar> Dataset<T> {
    /// Resample every utterance to the configured rate and precompute its
    /// CQT. Utterances shorter than `min_samples` are rejected.
    pub fn prepare(
        buffers: &[AudioBuffer<T>],
        cfg: &BackboneConfig,
        min_samples: usize,
    ) -> Result<Self, PipelineError> {
        if buffers.is_empty() {
            return Err(PipelineError::Invalid("dataset is empty".into()));
        }
        let resampled: Vec<AudioBuffer<T>> = buffers
            .iter()
            .map(|b| {
                if b.sample_rate == cfg.sample_rate {
                    Ok(b.clone())
                } else {
                    resample(b, cfg.sample_rate).map_err(PipelineError::Audio)
                }
            })
            .collect::<Result<_, _>>()?;
        for (i, b) in resampled.iter().enumerate() {
            if b.len() < min_samples {
                return Err(PipelineError::Invalid(format!(
                    "utterance {} has {} samples, need at least {}",
                    i,
                    b.len(),
                    min_samples
                )));
            }
        }
        let plan = CqtPlan::new(cfg.sample_rate, cfg.hop)?;
        let utterances: Vec<PreparedUtterance<T>> = resampled
            .into_par_iter()
            .map(|b| {
                let cqt = plan.transform(&b.samples)?;
                Ok(PreparedUtterance { samples: b.samples, cqt })
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(Self { utterances, sample_rate: cfg.sample_rate })
    }
}

/// Load every WAV in a directory, sorted by filename. When `manifest.csv`
/// exists, its first column selects and orders the files instead.
pub fn load_wav_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<AudioBuffer<T>>, PipelineError> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.csv");
    let paths: Vec<PathBuf> = if manifest.exists() {
        let body = std::fs::read_to_string(&manifest)
            .map_err(|e| PipelineError::Invalid(format!("manifest: {e}")))?;
        body.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .filter(|l| !l.starts_with("filename"))
            .map(|l| dir.join(l.split(',').next().unwrap_or(l).trim()))
            .collect()
    } else {
        let mut ps: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| PipelineError::Invalid(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        ps.sort();
        ps
    };
    if paths.is_empty() {
        return Err(PipelineError::Invalid(format!("no WAV files under {}", dir.display())));
    }
    paths.iter().map(|p| read_wav(p).map_err(PipelineError::Audio)).collect()
}
