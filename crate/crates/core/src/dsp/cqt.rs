//! Constant-Q transform with 24 bins per octave over 32.7 Hz..8 kHz, and the
//! random frequency crop pair for relative-pitch training.

use rand::Rng;
use rayon::prelude::*;

use super::{stft::frame_count, DspError};
use crate::audio::AudioBuffer;
use crate::grad::{dot, hann, Tensor};
use crate::scalar::Scalar;

pub const CQT_BINS_PER_OCTAVE: usize = 24;
pub const CQT_F_MIN: f64 = 32.7;
pub const CQT_F_MAX: f64 = 8000.0;
/// Bins k with f_min * 2^(k/24) <= f_max.
pub const CQT_BINS: usize = 191;
/// Width of the cropped view fed to the pitch encoder.
pub const CQT_SCOPE: usize = 160;
/// Largest random crop shift in bins (half a semitone per bin).
pub const CQT_SHIFT_MAX: i32 = 12;
/// Fixed base column of the reference crop, chosen so any shift in
/// [-12, 12] stays inside the full matrix.
pub const CQT_BASE_OFFSET: usize = 12;

/// Time x frequency constant-Q magnitudes.
#[derive(Clone, Debug)]
pub struct CqtMatrix<T> {
    /// `[frames, CQT_BINS]`
    pub mags: Tensor<T>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl<T: Scalar> CqtMatrix<T> {
    pub fn frames(&self) -> usize {
        self.mags.dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.mags.dims()[1]
    }
}

/// Center frequency of bin `k`.
pub fn bin_frequency(k: usize) -> f64 {
    CQT_F_MIN * 2f64.powf(k as f64 / CQT_BINS_PER_OCTAVE as f64)
}

struct BinKernel<T> {
    len: usize,
    wcos: Vec<T>,
    wsin: Vec<T>,
    inv_wsum: T,
}

/// Precomputed windowed complex exponentials, one per bin. Building the plan
/// is the expensive part; reuse it across utterances.
pub struct CqtPlan<T> {
    pub sample_rate: u32,
    pub hop: usize,
    kernels: Vec<BinKernel<T>>,
}

impl<T: Scalar> CqtPlan<T> {
    pub fn new(sample_rate: u32, hop: usize) -> Result<Self, DspError> {
        if (sample_rate as f64) < 2.0 * CQT_F_MAX {
            return Err(DspError::SampleRateTooLow {
                sr: sample_rate,
                required: (2.0 * CQT_F_MAX) as u32,
            });
        }
        if hop == 0 {
            return Err(DspError::BadWindow { win: 0, hop });
        }
        let q = 1.0 / (2f64.powf(1.0 / CQT_BINS_PER_OCTAVE as f64) - 1.0);
        let kernels = (0..CQT_BINS)
            .map(|k| {
                let f = bin_frequency(k);
                let len = (q * sample_rate as f64 / f).ceil() as usize;
                let w = hann::<T>(len);
                let center = (len as f64 - 1.0) / 2.0;
                let omega = 2.0 * std::f64::consts::PI * f / sample_rate as f64;
                let mut wcos = Vec::with_capacity(len);
                let mut wsin = Vec::with_capacity(len);
                for (i, &wi) in w.iter().enumerate() {
                    let ph = omega * (i as f64 - center);
                    wcos.push(wi * T::of(ph.cos()));
                    wsin.push(wi * T::of(ph.sin()));
                }
                let wsum: T = w.iter().copied().sum();
                BinKernel { len, wcos, wsin, inv_wsum: wsum.recip() }
            })
            .collect();
        Ok(Self { sample_rate, hop, kernels })
    }

    /// Frames are centered at `n*hop + hop/2`; windows extending past the
    /// signal see zeros. A unit-amplitude tone at a bin center yields
    /// magnitude about 0.5 in that bin.
    pub fn transform(&self, samples: &[T]) -> Result<CqtMatrix<T>, DspError> {
        let frames = frame_count(samples.len(), self.hop, self.hop)
            .ok_or(DspError::TooShort { len: samples.len(), win: self.hop })?;
        let rows: Vec<Vec<T>> = (0..frames)
            .into_par_iter()
            .map(|n| {
                let center = (n * self.hop + self.hop / 2) as isize;
                let mut row = vec![T::zero(); CQT_BINS];
                for (k, kern) in self.kernels.iter().enumerate() {
                    let start = center - (kern.len / 2) as isize;
                    let lo = (-start).max(0) as usize;
                    let hi = kern.len.min((samples.len() as isize - start).max(0) as usize);
                    if lo >= hi {
                        continue;
                    }
                    let seg = &samples[(start + lo as isize) as usize..(start + hi as isize) as usize];
                    let re = dot(seg, &kern.wcos[lo..hi]);
                    let im = dot(seg, &kern.wsin[lo..hi]);
                    row[k] = (re * re + im * im).sqrt() * kern.inv_wsum;
                }
                row
            })
            .collect();
        let mut mags = Tensor::zeros(&[frames, CQT_BINS]);
        for (n, row) in rows.iter().enumerate() {
            mags.row_mut(n).copy_from_slice(row);
        }
        Ok(CqtMatrix { mags, hop: self.hop, sample_rate: self.sample_rate })
    }
}

/// One-shot constant-Q transform; builds a throwaway plan.
pub fn cqt<T: Scalar>(buf: &AudioBuffer<T>, hop: usize) -> Result<CqtMatrix<T>, DspError> {
    CqtPlan::new(buf.sample_rate, hop)?.transform(&buf.samples)
}

/// Two same-size frequency crops of one CQT: the reference view at the fixed
/// base offset and a second view shifted by `shift_d` bins.
#[derive(Clone, Debug)]
pub struct CqtCropPair<T> {
    /// `[frames, CQT_SCOPE]` at the base offset.
    pub crop1: Tensor<T>,
    /// `[frames, CQT_SCOPE]` at `base + shift_d`.
    pub crop2: Tensor<T>,
    pub shift_d: i32,
}

fn crop_columns<T: Scalar>(x: &CqtMatrix<T>, start: usize) -> Tensor<T> {
    let n = x.frames();
    let bins = x.bins();
    let mut out = Tensor::zeros(&[n, CQT_SCOPE]);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(&x.mags.data()[r * bins + start..r * bins + start + CQT_SCOPE]);
    }
    out
}

/// The reference crop spanning bins `[base, base + scope)`; this is the view
/// the pitch encoder consumes outside training.
pub fn fixed_crop<T: Scalar>(x: &CqtMatrix<T>) -> Result<Tensor<T>, DspError> {
    check_crop_width(x)?;
    Ok(crop_columns(x, CQT_BASE_OFFSET))
}

/// Draw `d` uniformly from `[-12, 12]` and crop both views.
pub fn cqt_crop_pair<T: Scalar, R: Rng + ?Sized>(
    x: &CqtMatrix<T>,
    rng: &mut R,
) -> Result<CqtCropPair<T>, DspError> {
    check_crop_width(x)?;
    let d = rng.gen_range(-CQT_SHIFT_MAX..=CQT_SHIFT_MAX);
    Ok(CqtCropPair {
        crop1: crop_columns(x, CQT_BASE_OFFSET),
        crop2: crop_columns(x, (CQT_BASE_OFFSET as i32 + d) as usize),
        shift_d: d,
    })
}

fn check_crop_width<T: Scalar>(x: &CqtMatrix<T>) -> Result<(), DspError> {
    let need = CQT_SCOPE + 2 * CQT_SHIFT_MAX as usize;
    if x.bins() < need {
        return Err(DspError::Invalid(format!(
            "CQT with {} bins is too narrow for {}-bin crops shifted by ±{}",
            x.bins(),
            CQT_SCOPE,
            CQT_SHIFT_MAX
        )));
    }
    Ok(())
}
