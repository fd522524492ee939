//! Shape-checked numeric kernels behind the tape ops. Forward functions are
//! also used directly by the non-differentiable inference paths so both
//! routes share one implementation.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::tensor::{axpy, Tensor};
use super::GradError;
use crate::scalar::Scalar;

/// Padding mode for 1-d convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// Symmetric zero padding; output length `ceil(T / stride)`.
    Same,
    /// Left-only zero padding.
    Causal,
}

/// Periodic Hann window of length `n`.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::of(0.5) * (T::one() - (T::of(2.0) * T::PI() * T::of(i as f64) / T::of(n as f64)).cos()))
        .collect()
}

pub(crate) struct ConvShape {
    pub batch: usize,
    pub t_in: usize,
    pub c_in: usize,
    pub t_out: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad_left: isize,
}

pub(crate) fn conv1d_shape<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
    pad: Pad,
) -> Result<ConvShape, GradError> {
    let (batch, t_in, c_in) = match x.dims() {
        [t, c] => (1, *t, *c),
        [b, t, c] => (*b, *t, *c),
        _ => {
            return Err(GradError::Invalid {
                op: "conv1d",
                msg: format!("input must be rank 2 or 3, got {:?}", x.dims()),
            })
        }
    };
    let [c_out, k, wc_in] = match w.dims() {
        [a, b, c] => [*a, *b, *c],
        _ => {
            return Err(GradError::Invalid {
                op: "conv1d",
                msg: format!("weight must be [c_out, k, c_in], got {:?}", w.dims()),
            })
        }
    };
    if wc_in != c_in {
        return Err(GradError::Shape { op: "conv1d", lhs: x.dims().to_vec(), rhs: w.dims().to_vec() });
    }
    if stride == 0 || dilation == 0 {
        return Err(GradError::Invalid { op: "conv1d", msg: "stride and dilation must be >= 1".into() });
    }
    let eff_k = (k - 1) * dilation + 1;
    let pad_left = match pad {
        Pad::Same => ((eff_k - 1) / 2) as isize,
        Pad::Causal => (eff_k - 1) as isize,
    };
    // Total padding eff_k - 1 in both modes: t_out = ceil(t_in / stride).
    let t_out = (t_in - 1) / stride + 1;
    Ok(ConvShape { batch, t_in, c_in, t_out, c_out, k, pad_left })
}

/// Patch matrix `[t_out, k*c_in]` of one batch item; taps outside the
/// signal stay zero.
fn im2col<T: Scalar>(xb: &[T], s: &ConvShape, stride: usize, dilation: usize) -> Vec<T> {
    let kc = s.k * s.c_in;
    let mut patches = vec![T::zero(); s.t_out * kc];
    for j in 0..s.k {
        let off = j as isize * dilation as isize - s.pad_left;
        for to in 0..s.t_out {
            let ti = (to * stride) as isize + off;
            if ti < 0 || ti >= s.t_in as isize {
                continue;
            }
            let src = ti as usize * s.c_in;
            let dst = to * kc + j * s.c_in;
            patches[dst..dst + s.c_in].copy_from_slice(&xb[src..src + s.c_in]);
        }
    }
    patches
}

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    s: &ConvShape,
    stride: usize,
    dilation: usize,
) -> Tensor<T> {
    let out_dims: Vec<usize> = if x.rank() == 2 {
        vec![s.t_out, s.c_out]
    } else {
        vec![s.batch, s.t_out, s.c_out]
    };
    let mut out = Tensor::zeros(&out_dims);
    let kc = s.k * s.c_in;
    // weight transposed to [k*c_in, c_out] so the patch matmul runs down
    // contiguous output rows
    let mut wt = vec![T::zero(); kc * s.c_out];
    for co in 0..s.c_out {
        for p in 0..kc {
            wt[p * s.c_out + co] = w.data()[co * kc + p];
        }
    }
    for b in 0..s.batch {
        let xb = &x.data()[b * s.t_in * s.c_in..(b + 1) * s.t_in * s.c_in];
        let patches = im2col(xb, s, stride, dilation);
        let ob = &mut out.data_mut()[b * s.t_out * s.c_out..(b + 1) * s.t_out * s.c_out];
        super::tensor::matmul_acc(&patches, &wt, ob, s.t_out, kc, s.c_out, false);
    }
    out
}

pub(crate) fn conv1d_backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    s: &ConvShape,
    stride: usize,
    dilation: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.dims()));
    let kc = s.k * s.c_in;
    let mut dpatches = vec![T::zero(); s.t_out * kc];
    for b in 0..s.batch {
        let xb = &x.data()[b * s.t_in * s.c_in..(b + 1) * s.t_in * s.c_in];
        let gb = &gy.data()[b * s.t_out * s.c_out..(b + 1) * s.t_out * s.c_out];
        if let Some(dw) = dw.as_mut() {
            // dw = gyᵀ × patches
            let patches = im2col(xb, s, stride, dilation);
            super::tensor::matmul_acc(gb, &patches, dw.data_mut(), s.c_out, s.t_out, kc, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dpatches = gy × w_flat, then col2im scatter
            for v in dpatches.iter_mut() {
                *v = T::zero();
            }
            super::tensor::matmul_acc(gb, w.data(), &mut dpatches, s.t_out, s.c_out, kc, false);
            let dxb = &mut dx.data_mut()[b * s.t_in * s.c_in..(b + 1) * s.t_in * s.c_in];
            for j in 0..s.k {
                let off = j as isize * dilation as isize - s.pad_left;
                for to in 0..s.t_out {
                    let ti = (to * stride) as isize + off;
                    if ti < 0 || ti >= s.t_in as isize {
                        continue;
                    }
                    let dst = ti as usize * s.c_in;
                    let src = to * kc + j * s.c_in;
                    axpy(T::one(), &dpatches[src..src + s.c_in], &mut dxb[dst..dst + s.c_in]);
                }
            }
        }
    }
    (dx, dw)
}

/// Frame count of an unpadded sliding window: `1 + (len - win) / hop`.
pub fn stft_frames(len: usize, win: usize, hop: usize) -> Option<usize> {
    if len < win || hop == 0 {
        None
    } else {
        Some(1 + (len - win) / hop)
    }
}

/// Magnitude STFT of a 1-d signal with a periodic Hann window and no
/// centering: `[frames, win/2 + 1]`. Also returns the unit-phase spectrum
/// needed by the backward pass when requested.
pub(crate) fn stft_mag_forward<T: Scalar>(
    x: &[T],
    win: usize,
    hop: usize,
    keep_phase: bool,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>), GradError> {
    let frames = stft_frames(x.len(), win, hop).ok_or_else(|| GradError::Invalid {
        op: "stft",
        msg: format!("signal of {} samples shorter than window {}", x.len(), win),
    })?;
    let bins = win / 2 + 1;
    let window = hann::<T>(win);
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(win);
    let mut mags = Tensor::zeros(&[frames, bins]);
    let mut phase = keep_phase.then(|| (Tensor::zeros(&[frames, bins]), Tensor::zeros(&[frames, bins])));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); win];
    let tiny = T::of(1e-30);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[start + i] * window[i], T::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let m = (buf[k].re * buf[k].re + buf[k].im * buf[k].im).sqrt();
            mags.data_mut()[f * bins + k] = m;
            if let Some((pre, pim)) = phase.as_mut() {
                let denom = if m > tiny { m } else { T::one() };
                pre.data_mut()[f * bins + k] = buf[k].re / denom;
                pim.data_mut()[f * bins + k] = buf[k].im / denom;
            }
        }
    }
    Ok((mags, phase))
}

/// Gradient of the magnitude STFT with respect to the input signal.
pub(crate) fn stft_mag_backward<T: Scalar>(
    gy: &Tensor<T>,
    phase: &(Tensor<T>, Tensor<T>),
    len: usize,
    win: usize,
    hop: usize,
) -> Tensor<T> {
    let frames = gy.dims()[0];
    let bins = gy.dims()[1];
    let window = hann::<T>(win);
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(win);
    let mut dx = Tensor::zeros(&[len]);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); win];
    let (pre, pim) = phase;
    for f in 0..frames {
        // dL/dx_t = w_t * Re(sum_k g_k conj(u_k) e^{-2pi i k t / win}); the sum
        // over output bins equals a forward FFT of the half-spectrum g*conj(u).
        for b in buf.iter_mut() {
            *b = Complex::new(T::zero(), T::zero());
        }
        for k in 0..bins {
            let g = gy.data()[f * bins + k];
            buf[k] = Complex::new(g * pre.data()[f * bins + k], -g * pim.data()[f * bins + k]);
        }
        fft.process(&mut buf);
        let start = f * hop;
        for t in 0..win {
            dx.data_mut()[start + t] += window[t] * buf[t].re;
        }
    }
    dx
}

/// GRU cell forward. `xg` is the precomputed input projection `[1, 3h]`
/// (reset | update | candidate), `h` the previous state `[1, h]`, `u` the
/// recurrent weights `[h, 3h]`, `b` the recurrent bias `[3h]`.
pub(crate) fn gru_cell_forward<T: Scalar>(
    xg: &Tensor<T>,
    h: &Tensor<T>,
    u: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, [Tensor<T>; 4]) {
    let hd = h.dims()[1];
    let mut gates_h = vec![T::zero(); 3 * hd];
    super::tensor::matmul_acc(h.data(), u.data(), &mut gates_h, 1, hd, 3 * hd, false);
    let sig = |v: T| T::one() / (T::one() + (-v).exp());
    let mut r = Tensor::zeros(&[1, hd]);
    let mut z = Tensor::zeros(&[1, hd]);
    let mut c = Tensor::zeros(&[1, hd]);
    let mut n = Tensor::zeros(&[1, hd]);
    let mut out = Tensor::zeros(&[1, hd]);
    for i in 0..hd {
        let rv = sig(xg.data()[i] + gates_h[i] + b.data()[i]);
        let zv = sig(xg.data()[hd + i] + gates_h[hd + i] + b.data()[hd + i]);
        let cv = gates_h[2 * hd + i] + b.data()[2 * hd + i];
        let nv = (xg.data()[2 * hd + i] + rv * cv).tanh();
        r.data_mut()[i] = rv;
        z.data_mut()[i] = zv;
        c.data_mut()[i] = cv;
        n.data_mut()[i] = nv;
        out.data_mut()[i] = (T::one() - zv) * nv + zv * h.data()[i];
    }
    (out, [r, z, c, n])
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_cell_backward<T: Scalar>(
    gy: &Tensor<T>,
    h: &Tensor<T>,
    u: &Tensor<T>,
    saved: &[Tensor<T>],
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let hd = h.dims()[1];
    let (r, z, c, n) = (&saved[0], &saved[1], &saved[2], &saved[3]);
    let mut dxg = Tensor::zeros(&[1, 3 * hd]);
    let mut dgates_h = vec![T::zero(); 3 * hd];
    let mut dh = Tensor::zeros(&[1, hd]);
    for i in 0..hd {
        let g = gy.data()[i];
        let (rv, zv, cv, nv) = (r.data()[i], z.data()[i], c.data()[i], n.data()[i]);
        let dn = g * (T::one() - zv);
        let dz = g * (h.data()[i] - nv);
        let da_n = dn * (T::one() - nv * nv);
        let da_z = dz * zv * (T::one() - zv);
        let dc = da_n * rv;
        let dr = da_n * cv;
        let da_r = dr * rv * (T::one() - rv);
        dxg.data_mut()[i] = da_r;
        dxg.data_mut()[hd + i] = da_z;
        dxg.data_mut()[2 * hd + i] = da_n;
        dgates_h[i] = da_r;
        dgates_h[hd + i] = da_z;
        dgates_h[2 * hd + i] = dc;
        dh.data_mut()[i] = g * zv;
    }
    // dh += dgates_h · uᵀ
    super::tensor::matmul_bt_acc(&dgates_h, u.data(), dh.data_mut(), 1, 3 * hd, hd);
    // du = hᵀ · dgates_h
    let mut du = Tensor::zeros(&[hd, 3 * hd]);
    super::tensor::matmul_acc(h.data(), &dgates_h, du.data_mut(), hd, 1, 3 * hd, true);
    let db = Tensor::new(vec![3 * hd], dgates_h).expect("db dims");
    (dxg, dh, du, db)
}

/// Lane iterator data for softmax / layer-norm style ops over an axis of a
/// rank-1 or rank-2 tensor: (lane count, lane length, stride between
/// elements, stride between lanes).
pub(crate) fn lanes<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize, usize), GradError> {
    match (x.dims(), axis) {
        ([n], 0) => Ok((1, *n, 1, 0)),
        ([r, c], 0) => Ok((*c, *r, *c, 1)),
        ([r, c], 1) => Ok((*r, *c, 1, *c)),
        _ => Err(GradError::Invalid {
            op: "axis",
            msg: format!("axis {} invalid for dims {:?}", axis, x.dims()),
        }),
    }
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, GradError> {
    let (nl, ll, es, ls) = lanes(x, axis)?;
    let mut y = Tensor::zeros(x.dims());
    for l in 0..nl {
        let base = l * ls;
        let mut mx = T::neg_infinity();
        for i in 0..ll {
            mx = mx.max(x.data()[base + i * es]);
        }
        let mut sum = T::zero();
        for i in 0..ll {
            let e = (x.data()[base + i * es] - mx).exp();
            y.data_mut()[base + i * es] = e;
            sum += e;
        }
        for i in 0..ll {
            y.data_mut()[base + i * es] /= sum;
        }
    }
    Ok(y)
}

pub(crate) fn softmax_backward<T: Scalar>(gy: &Tensor<T>, y: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (nl, ll, es, ls) = lanes(y, axis).expect("softmax lanes");
    let mut dx = Tensor::zeros(y.dims());
    for l in 0..nl {
        let base = l * ls;
        let mut s = T::zero();
        for i in 0..ll {
            s += gy.data()[base + i * es] * y.data()[base + i * es];
        }
        for i in 0..ll {
            let idx = base + i * es;
            dx.data_mut()[idx] = y.data()[idx] * (gy.data()[idx] - s);
        }
    }
    dx
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis, no affine part. Returns (y, inv_std per lane).
pub(crate) fn layer_norm_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = *x.dims().last().expect("layer_norm rank >= 1");
    let rows = x.len() / c;
    let mut y = Tensor::zeros(x.dims());
    let mut inv_std = Tensor::zeros(&[rows]);
    let cn = T::of(c as f64);
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let mean = xs.iter().copied().sum::<T>() / cn;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let is = (var + T::of(LN_EPS)).sqrt().recip();
        inv_std.data_mut()[r] = is;
        for i in 0..c {
            y.data_mut()[r * c + i] = (xs[i] - mean) * is;
        }
    }
    (y, inv_std)
}

pub(crate) fn layer_norm_backward<T: Scalar>(gy: &Tensor<T>, y: &Tensor<T>, inv_std: &Tensor<T>) -> Tensor<T> {
    let c = *y.dims().last().expect("layer_norm rank >= 1");
    let rows = y.len() / c;
    let mut dx = Tensor::zeros(y.dims());
    let cn = T::of(c as f64);
    for r in 0..rows {
        let gs = &gy.data()[r * c..(r + 1) * c];
        let ys = &y.data()[r * c..(r + 1) * c];
        let gm = gs.iter().copied().sum::<T>() / cn;
        let gym = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() / cn;
        let is = inv_std.data()[r];
        for i in 0..c {
            dx.data_mut()[r * c + i] = (gs[i] - gm - ys[i] * gym) * is;
        }
    }
    dx
}

/// Linear upsampling of per-frame values to per-sample values: frame `n` is
/// anchored at sample `n*hop`, values between anchors interpolate linearly,
/// and the last frame is held to `out_len`.
pub fn upsample_linear_forward<T: Scalar>(x: &Tensor<T>, hop: usize, out_len: usize) -> Result<Tensor<T>, GradError> {
    if out_len < 1 || hop == 0 {
        return Err(GradError::Invalid { op: "upsample_linear", msg: "out_len and hop must be >= 1".into() });
    }
    let (n, c) = match x.dims() {
        [n] => (*n, 1),
        [n, c] => (*n, *c),
        _ => {
            return Err(GradError::Invalid {
                op: "upsample_linear",
                msg: format!("rank must be 1 or 2, got {:?}", x.dims()),
            })
        }
    };
    if n == 0 {
        return Err(GradError::Invalid { op: "upsample_linear", msg: "needs at least one frame".into() });
    }
    let out_dims: Vec<usize> = if x.rank() == 1 { vec![out_len] } else { vec![out_len, c] };
    let mut y = Tensor::zeros(&out_dims);
    for s in 0..out_len {
        let (i0, i1, w1) = upsample_weights::<T>(s, hop, n);
        for ch in 0..c {
            let v = x.data()[i0 * c + ch] * (T::one() - w1) + x.data()[i1 * c + ch] * w1;
            y.data_mut()[s * c + ch] = v;
        }
    }
    Ok(y)
}

pub(crate) fn upsample_weights<T: Scalar>(s: usize, hop: usize, n: usize) -> (usize, usize, T) {
    let i = s / hop;
    if i >= n - 1 {
        (n - 1, n - 1, T::zero())
    } else {
        let frac = T::of((s - i * hop) as f64) / T::of(hop as f64);
        (i, i + 1, frac)
    }
}

pub(crate) fn upsample_linear_backward<T: Scalar>(gy: &Tensor<T>, in_dims: &[usize], hop: usize) -> Tensor<T> {
    let (n, c) = match in_dims {
        [n] => (*n, 1),
        [n, c] => (*n, *c),
        _ => unreachable!(),
    };
    let out_len = gy.dims()[0];
    let mut dx = Tensor::zeros(in_dims);
    for s in 0..out_len {
        let (i0, i1, w1) = upsample_weights::<T>(s, hop, n);
        for ch in 0..c {
            let g = gy.data()[s * c + ch];
            dx.data_mut()[i0 * c + ch] += g * (T::one() - w1);
            if i1 != i0 {
                dx.data_mut()[i1 * c + ch] += g * w1;
            }
        }
    }
    dx
}
