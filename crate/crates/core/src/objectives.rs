//! Training losses: relative-pitch consistency, frame-contrastive loss,
//! multi-scale spectrogram loss on linear magnitudes, mel loss, and the
//! scheduled combination. Every loss builds onto the tape and is
//! differentiable end to end.

use rand::Rng;

use crate::dsp::mel_filterbank;
use crate::grad::{Graph, GradError, Var};
use crate::scalar::Scalar;

/// Contrastive-loss hyperparameters.
#[derive(Clone, Debug)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Frames within this distance of the anchor are never negatives.
    pub exclusion_radius: usize,
    pub n_negatives: usize,
    /// Loss coefficient schedule, linear from `coeff_start` at step 0 to
    /// `coeff_end` at the final step.
    pub coeff_start: f64,
    pub coeff_end: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.1, exclusion_radius: 10, n_negatives: 16, coeff_start: 1e-5, coeff_end: 10.0 }
    }
}

impl ContrastiveConfig {
    /// Linearly scheduled coefficient at `step` of `total_steps`.
    pub fn coefficient(&self, step: u64, total_steps: u64) -> f64 {
        let frac = if total_steps == 0 { 1.0 } else { (step as f64 / total_steps as f64).min(1.0) };
        self.coeff_start + (self.coeff_end - self.coeff_start) * frac
    }
}

/// Multi-scale spectrogram loss configuration; window = FFT size, hop = FFT/4.
#[derive(Clone, Debug)]
pub struct MssConfig {
    pub fft_sizes: Vec<usize>,
}

impl Default for MssConfig {
    fn default() -> Self {
        Self { fft_sizes: vec![512, 1024, 2048] }
    }
}

/// Pure Huber norm: `0.5 a²` for `|a| <= delta`, else `delta(|a| - delta/2)`.
pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

/// Relative-pitch consistency in semitone units:
/// `mean_n huber(|12 log2(f0_1/f0_2) - 0.5 d|)` with the crop shift `d` in
/// CQT bins (half a semitone per bin).
pub fn pitch_consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    f0_view1: Var,
    f0_view2: Var,
    shift_d: i32,
) -> Result<Var, GradError> {
    for v in [f0_view1, f0_view2] {
        if g.value(v).data().iter().any(|x| *x <= T::zero()) {
            return Err(GradError::Invalid {
                op: "pitch_consistency_loss",
                msg: "f0 must be strictly positive".into(),
            });
        }
    }
    let l1 = g.log(f0_view1);
    let l2 = g.log(f0_view2);
    let diff = g.sub(l1, l2)?;
    let semitones = g.affine(diff, T::of(12.0 / std::f64::consts::LN_2), T::of(-0.5 * shift_d as f64));
    let h = g.huber(semitones, T::one());
    Ok(g.mean(h))
}

/// Negative frame indices for every anchor, drawn uniformly (with
/// replacement) outside the exclusion window. Shared by the tape loss and
/// the brute-force oracle so both see identical draws.
pub fn sample_negatives<R: Rng + ?Sized>(
    frames: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, GradError> {
    let r = cfg.exclusion_radius;
    if frames <= 2 * r + 1 {
        return Err(GradError::Invalid {
            op: "contrastive_loss",
            msg: format!("{frames} frames cannot provide negatives outside a ±{r} window"),
        });
    }
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        let allowed: Vec<usize> =
            (0..frames).filter(|&v| v + r < n || v > n + r).collect();
        out.push((0..cfg.n_negatives).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect());
    }
    Ok(out)
}

/// Frame-contrastive loss over two views `[N, C]`: for each view `i` and
/// frame `n`, the cross-view positive is scored against within-view
/// negatives,
/// `-log(exp(d(L1_n, L2_n)/k) / (exp(d(L1_n, L2_n)/k) + Σ_ν exp(d(L_n^i, L_ν^i)/k)))`,
/// summed over the two views and averaged over frames. `d` is cosine
/// similarity; rows are normalized internally.
pub fn contrastive_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    view1: Var,
    view2: Var,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Var, GradError> {
    let d1 = g.value(view1).dims().to_vec();
    let d2 = g.value(view2).dims().to_vec();
    if d1 != d2 || d1.len() != 2 {
        return Err(GradError::Shape { op: "contrastive_loss", lhs: d1, rhs: d2 });
    }
    let n = d1[0];
    let negatives = sample_negatives(n, cfg, rng)?;
    let inv_k = T::of(1.0 / cfg.temperature);

    let l1 = g.l2_normalize_rows(view1);
    let l2 = g.l2_normalize_rows(view2);
    let prod = g.mul(l1, l2)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.affine(pos, inv_k, T::zero());
    let pos_col = g.reshape(pos, &[n, 1])?;

    let mut view_losses = Vec::new();
    for view in [l1, l2] {
        let view_t = g.transpose(view)?;
        let sim = g.matmul(view, view_t)?;
        let sim = g.affine(sim, inv_k, T::zero());
        let sim_flat = g.reshape(sim, &[n * n, 1])?;
        let flat_idx: Vec<usize> = negatives
            .iter()
            .enumerate()
            .flat_map(|(anchor, negs)| negs.iter().map(move |&v| anchor * n + v))
            .collect();
        let neg = g.embedding(sim_flat, &flat_idx)?;
        let neg = g.reshape(neg, &[n, cfg.n_negatives])?;
        let scores = g.concat(&[pos_col, neg], 1)?;
        let exp = g.exp(scores);
        let denom = g.sum_axis(exp, 1)?;
        let log_denom = g.log(denom);
        let term = g.sub(log_denom, pos)?;
        view_losses.push(g.mean(term));
    }
    g.add(view_losses[0], view_losses[1])
}

/// Multi-scale spectrogram loss on linear magnitudes: per scale, a Frobenius
/// spectral-convergence term `‖|A|-|B|‖_F / ‖|A|‖_F` plus an L1 log-magnitude
/// term, summed over scales.
pub fn mss_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    cfg: &MssConfig,
) -> Result<Var, GradError> {
    let (lp, lt) = (g.value(pred).len(), g.value(target).len());
    if lp != lt {
        return Err(GradError::Invalid {
            op: "mss_loss",
            msg: format!("length mismatch: {lp} vs {lt}"),
        });
    }
    let mut total: Option<Var> = None;
    for &fft in &cfg.fft_sizes {
        let hop = fft / 4;
        let a = g.stft_mag(target, fft, hop)?;
        let b = g.stft_mag(pred, fft, hop)?;
        let diff = g.sub(a, b)?;
        let diff_sq = g.mul(diff, diff)?;
        let num_sq = g.sum(diff_sq);
        let num = g.sqrt(num_sq);
        let a_sq = g.mul(a, a)?;
        let den_sq = g.sum(a_sq);
        let den_sq = g.affine(den_sq, T::one(), T::of(1e-12));
        let den = g.sqrt(den_sq);
        let inv_den = g.recip(den);
        let sc = g.mul(num, inv_den)?;

        let la = g.affine(a, T::one(), T::of(1e-5));
        let la = g.log(la);
        let lb = g.affine(b, T::one(), T::of(1e-5));
        let lb = g.log(lb);
        let ld = g.sub(la, lb)?;
        let ld = g.abs(ld);
        let l1 = g.mean(ld);

        let scale_loss = g.add(sc, l1)?;
        total = Some(match total {
            Some(t) => g.add(t, scale_loss)?,
            None => scale_loss,
        });
    }
    total.ok_or(GradError::Invalid { op: "mss_loss", msg: "no scales configured".into() })
}

/// L1 distance between log-mel spectrograms.
pub fn mel_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    sample_rate: u32,
    n_mels: usize,
    win: usize,
    hop: usize,
) -> Result<Var, GradError> {
    let (lp, lt) = (g.value(pred).len(), g.value(target).len());
    if lp != lt {
        return Err(GradError::Invalid {
            op: "mel_loss",
            msg: format!("length mismatch: {lp} vs {lt}"),
        });
    }
    let fb = g.leaf(mel_filterbank::<T>(sample_rate, win, n_mels));
    let logmel = |x: Var, g: &mut Graph<T>| -> Result<Var, GradError> {
        let m = g.stft_mag(x, win, hop)?;
        let m = g.matmul(m, fb)?;
        let m = g.affine(m, T::one(), T::of(crate::dsp::MEL_LOG_FLOOR));
        Ok(g.log(m))
    };
    let la = logmel(target, g)?;
    let lb = logmel(pred, g)?;
    let d = g.sub(la, lb)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Individually reported backbone loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub mss: T,
    pub mel: T,
    pub pitch: T,
    pub contrastive: T,
    /// Contrastive coefficient used at this step.
    pub coeff: T,
}

/// Combine the component losses:
/// `mss + mel + λ_pitch · pitch + c(step) · contrastive`.
/// A non-finite component is an error naming the component.
#[allow(clippy::too_many_arguments)]
pub fn total_backbone_loss<T: Scalar>(
    g: &mut Graph<T>,
    mss: Var,
    mel: Var,
    pitch: Var,
    contrastive: Var,
    lambda_pitch: f64,
    cfg: &ContrastiveConfig,
    step: u64,
    total_steps: u64,
) -> Result<(Var, LossBreakdown<T>), GradError> {
    for (name, v) in [("mss", mss), ("mel", mel), ("pitch", pitch), ("contrastive", contrastive)] {
        if !g.value(v).all_finite() {
            return Err(GradError::Invalid {
                op: "total_backbone_loss",
                msg: format!("non-finite {name} component"),
            });
        }
    }
    let coeff = cfg.coefficient(step, total_steps);
    let pitch_term = g.affine(pitch, T::of(lambda_pitch), T::zero());
    let contr_term = g.affine(contrastive, T::of(coeff), T::zero());
    let a = g.add(mss, mel)?;
    let b = g.add(a, pitch_term)?;
    let total = g.add(b, contr_term)?;
    let breakdown = LossBreakdown {
        total: g.item(total),
        mss: g.item(mss),
        mel: g.item(mel),
        pitch: g.item(pitch),
        contrastive: g.item(contrastive),
        coeff: T::of(coeff),
    };
    Ok((total, breakdown))
}
