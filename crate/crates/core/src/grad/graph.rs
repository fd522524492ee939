//! Reverse-mode tape over dense tensors. Operations execute eagerly and
//! append one node each; `backward` walks the tape once in reverse append
//! order and accumulates exact analytic gradients.

use rand::Rng;

use super::kernels::{self, Pad};
use super::tensor::{self, Tensor};
use super::GradError;
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Leaky ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Exponent of the exponential sigmoid, `ln 10`.
pub const EXP_SIGMOID_POWER: f64 = std::f64::consts::LN_10;
/// Additive floor of the exponential sigmoid.
pub const EXP_SIGMOID_FLOOR: f64 = 1e-7;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b` with constant coefficients.
    AffineConst(Var, T, T),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Sin(Var),
    Cumsum(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var),
    ExpSigmoid(Var),
    Huber(Var, T),
    Glu(Var),
    LayerNorm(Var),
    L2NormalizeRows(Var),
    Embedding { table: Var, idx: Vec<usize> },
    GruCell { xg: Var, h: Var, u: Var, b: Var },
    Dropout(Var),
    Conv1d { x: Var, w: Var, stride: usize, dilation: usize, pad: Pad },
    UpsampleLinear { x: Var, hop: usize },
    StftMag { x: Var, win: usize, hop: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    saved: Vec<Tensor<T>>,
}

/// Append-only tape. Building an op computes its value immediately; the
/// node order is the topological order used by `backward`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Gradients by tape node, produced by [`Graph::backward`].
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1]` node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Untracked input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, vec![])
    }

    /// Tracked input that receives a gradient.
    pub fn leaf_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, vec![])
    }

    /// Tracked named parameter; the name keys the gradient map returned by
    /// [`Grads`] via [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true, vec![]);
        self.params.push((name.to_string(), v));
        v
    }

    /// Named parameter gradients in registration order.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> indexmap::IndexMap<String, Tensor<T>> {
        let mut out = indexmap::IndexMap::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, saved: Vec<Tensor<T>>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise binary ----------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        let ok = db.len() <= da.len() && da[da.len() - db.len()..] == *db;
        if ok {
            Ok(())
        } else {
            Err(GradError::Shape { op, lhs: da.to_vec(), rhs: db.to_vec() })
        }
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let mut out = av.clone();
        // suffix broadcast guarantees the length divides evenly
        for chunk in out.data_mut().chunks_exact_mut(bl) {
            for (o, bb) in chunk.iter_mut().zip(bv.data()) {
                *o = f(*o, *bb);
            }
        }
        out
    }

    /// `a + b`; `b` may have the trailing shape of `a` (row broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_broadcast("add", a, b)?;
        let value = self.broadcast_zip(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng, vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_broadcast("sub", a, b)?;
        let value = self.broadcast_zip(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng, vec![]))
    }

    /// Elementwise product with trailing broadcast on `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_broadcast("mul", a, b)?;
        let value = self.broadcast_zip(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng, vec![]))
    }

    /// `scale * x + shift` with constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(value, Op::AffineConst(x, scale, shift), ng, vec![])
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng, vec![]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, GradError> {
        let value = tensor::transpose2(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), ng, vec![]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, GradError> {
        let value = self.value(x).clone().reshaped(dims.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng, vec![]))
    }

    /// Concatenate along `axis` (0 or 1); all inputs rank 1 or rank 2.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.value(xs[0]).dims().to_vec();
        if axis >= first.len().max(1) || first.len() > 2 {
            return Err(GradError::Invalid {
                op: "concat",
                msg: format!("axis {} for dims {:?}", axis, first),
            });
        }
        let mut out_dims = first.clone();
        out_dims[axis] = 0;
        for &x in xs {
            let d = self.value(x).dims();
            if d.len() != first.len() || (0..d.len()).any(|i| i != axis && d[i] != first[i]) {
                return Err(GradError::Shape { op: "concat", lhs: first, rhs: d.to_vec() });
            }
            out_dims[axis] += d[axis];
        }
        let mut value = Tensor::zeros(&out_dims);
        if axis == 0 || out_dims.len() == 1 {
            let mut off = 0;
            for &x in xs {
                let v = self.value(x);
                value.data_mut()[off..off + v.len()].copy_from_slice(v.data());
                off += v.len();
            }
        } else {
            let rows = out_dims[0];
            let total_c = out_dims[1];
            let mut col = 0;
            for &x in xs {
                let v = self.value(x);
                let c = v.dims()[1];
                for r in 0..rows {
                    value.data_mut()[r * total_c + col..r * total_c + col + c]
                        .copy_from_slice(v.row(r));
                }
                col += c;
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), ng, vec![]))
    }

    /// Contiguous slice `[start, end)` along `axis` of a rank-1/2/3 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, GradError> {
        let dims = self.value(x).dims().to_vec();
        if axis >= dims.len() || end > dims[axis] || start >= end {
            return Err(GradError::Invalid {
                op: "slice",
                msg: format!("range {}..{} on axis {} of {:?}", start, end, axis, dims),
            });
        }
        let mut out_dims = dims.clone();
        out_dims[axis] = end - start;
        let mut value = Tensor::zeros(&out_dims);
        copy_slice(self.value(x).data(), &dims, axis, start, value.data_mut(), false);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng, vec![]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum::<T>());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng, vec![])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64));
        let ng = self.needs(x);
        self.push(v, Op::Mean(x), ng, vec![])
    }

    /// Sum a rank-2 tensor along `axis`, producing rank 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let d = self.value(x).dims().to_vec();
        if d.len() != 2 || axis > 1 {
            return Err(GradError::Invalid {
                op: "sum_axis",
                msg: format!("axis {} for dims {:?}", axis, d),
            });
        }
        let (r, c) = (d[0], d[1]);
        let xs = self.value(x).data();
        let value = if axis == 1 {
            let mut out = Tensor::zeros(&[r]);
            for i in 0..r {
                out.data_mut()[i] = xs[i * c..(i + 1) * c].iter().copied().sum();
            }
            out
        } else {
            let mut out = Tensor::zeros(&[c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] += xs[i * c + j];
                }
            }
            out
        };
        let ng = self.needs(x);
        Ok(self.push(value, Op::SumAxis(x, axis), ng, vec![]))
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let value = kernels::softmax_forward(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax(x, axis), ng, vec![]))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| v.recip())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let s = T::of(LEAKY_SLOPE);
        self.unary(x, Op::LeakyRelu(x), move |v| if v > T::zero() { v } else { s * v })
    }

    /// `2·sigmoid(x)^ln10 + 1e-7`: strictly positive amplitude nonlinearity.
    pub fn exp_sigmoid(&mut self, x: Var) -> Var {
        let p = T::of(EXP_SIGMOID_POWER);
        let f = T::of(EXP_SIGMOID_FLOOR);
        self.unary(x, Op::ExpSigmoid(x), move |v| {
            let s = T::one() / (T::one() + (-v).exp());
            T::of(2.0) * s.powf(p) + f
        })
    }

    /// Elementwise Huber norm: `0.5 a²` for `|a| <= delta`, else
    /// `delta (|a| - 0.5 delta)`.
    pub fn huber(&mut self, x: Var, delta: T) -> Var {
        self.unary(x, Op::Huber(x, delta), move |a| {
            if a.abs() <= delta {
                T::of(0.5) * a * a
            } else {
                delta * (a.abs() - T::of(0.5) * delta)
            }
        })
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng, vec![])
    }

    /// Cumulative sum of a rank-1 tensor.
    pub fn cumsum(&mut self, x: Var) -> Result<Var, GradError> {
        if self.value(x).rank() != 1 {
            return Err(GradError::Invalid { op: "cumsum", msg: "rank-1 input required".into() });
        }
        let mut value = self.value(x).clone();
        let mut acc = T::zero();
        for v in value.data_mut() {
            acc += *v;
            *v = acc;
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::Cumsum(x), ng, vec![]))
    }

    /// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` for `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var, GradError> {
        let dims = self.value(x).dims().to_vec();
        let c = *dims.last().ok_or(GradError::Invalid { op: "glu", msg: "rank 0".into() })?;
        if c % 2 != 0 {
            return Err(GradError::Invalid { op: "glu", msg: format!("odd channel count {}", c) });
        }
        let half = c / 2;
        let rows = self.value(x).len() / c;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = half;
        let mut value = Tensor::zeros(&out_dims);
        let mut gate = Tensor::zeros(&out_dims);
        for r in 0..rows {
            for i in 0..half {
                let a = self.value(x).data()[r * c + i];
                let b = self.value(x).data()[r * c + half + i];
                let s = T::one() / (T::one() + (-b).exp());
                gate.data_mut()[r * half + i] = s;
                value.data_mut()[r * half + i] = a * s;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::Glu(x), ng, vec![gate]))
    }

    /// Layer normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (value, inv_std) = kernels::layer_norm_forward(self.value(x));
        let ng = self.needs(x);
        let y = value.clone();
        self.push(value, Op::LayerNorm(x), ng, vec![y, inv_std])
    }

    /// Rows scaled to unit L2 norm (with a small epsilon inside the norm).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let c = *self.value(x).dims().last().expect("rank >= 1");
        let rows = self.value(x).len() / c;
        let mut value = Tensor::zeros(self.value(x).dims());
        let mut inv_norm = Tensor::zeros(&[rows]);
        for r in 0..rows {
            let xs = &self.value(x).data()[r * c..(r + 1) * c];
            let n = (tensor::dot(xs, xs) + T::of(1e-12)).sqrt().recip();
            inv_norm.data_mut()[r] = n;
            for i in 0..c {
                value.data_mut()[r * c + i] = xs[i] * n;
            }
        }
        let ng = self.needs(x);
        let y = value.clone();
        self.push(value, Op::L2NormalizeRows(x), ng, vec![y, inv_norm])
    }

    /// Row gather: `out[i, :] = table[idx[i], :]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var, GradError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(GradError::Invalid { op: "embedding", msg: "table must be rank 2".into() });
        }
        let (v, c) = (t.dims()[0], t.dims()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(GradError::Invalid {
                op: "embedding",
                msg: format!("index {} out of range for table with {} rows", bad, v),
            });
        }
        let mut value = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(value, Op::Embedding { table, idx: idx.to_vec() }, ng, vec![]))
    }

    /// Single GRU step; `xg` is the input projection `[1, 3h]`, `u`/`b` the
    /// recurrent weights `[h, 3h]` and bias `[3h]`.
    pub fn gru_cell(&mut self, xg: Var, h: Var, u: Var, b: Var) -> Result<Var, GradError> {
        let hd = match self.value(h).dims() {
            [1, hd] => *hd,
            d => {
                return Err(GradError::Invalid { op: "gru_cell", msg: format!("state dims {:?}", d) })
            }
        };
        let ok = self.value(xg).dims() == [1, 3 * hd]
            && self.value(u).dims() == [hd, 3 * hd]
            && self.value(b).dims() == [3 * hd];
        if !ok {
            return Err(GradError::Shape {
                op: "gru_cell",
                lhs: self.value(xg).dims().to_vec(),
                rhs: self.value(u).dims().to_vec(),
            });
        }
        let (value, saved) =
            kernels::gru_cell_forward(self.value(xg), self.value(h), self.value(u), self.value(b));
        let ng = self.needs(xg) || self.needs(h) || self.needs(u) || self.needs(b);
        Ok(self.push(value, Op::GruCell { xg, h, u, b }, ng, saved.into()))
    }

    /// Inverted dropout; identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 - p);
        let scale = keep.recip();
        let mask = Tensor::new(
            self.value(x).dims().to_vec(),
            (0..self.value(x).len())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
                .collect(),
        )
        .expect("mask dims");
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(mask.data()) {
            *v *= *m;
        }
        let ng = self.needs(x);
        self.push(value, Op::Dropout(x), ng, vec![mask])
    }

    /// 1-d convolution over time; `x` is `[t, c_in]` or `[batch, t, c_in]`,
    /// `w` is `[c_out, k, c_in]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad: Pad,
    ) -> Result<Var, GradError> {
        let shape = kernels::conv1d_shape(self.value(x), self.value(w), stride, dilation, pad)?;
        let value = kernels::conv1d_forward(self.value(x), self.value(w), &shape, stride, dilation);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv1d { x, w, stride, dilation, pad }, ng, vec![]))
    }

    /// Frame-to-sample linear interpolation (frame `n` anchored at `n*hop`).
    pub fn upsample_linear(&mut self, x: Var, hop: usize, out_len: usize) -> Result<Var, GradError> {
        let value = kernels::upsample_linear_forward(self.value(x), hop, out_len)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::UpsampleLinear { x, hop }, ng, vec![]))
    }

    /// Magnitude STFT (Hann window, no centering) of a rank-1 signal.
    pub fn stft_mag(&mut self, x: Var, win: usize, hop: usize) -> Result<Var, GradError> {
        let ng = self.needs(x);
        let (value, phase) = kernels::stft_mag_forward(self.value(x).data(), win, hop, ng)?;
        let saved = match phase {
            Some((re, im)) => vec![re, im],
            None => vec![],
        };
        Ok(self.push(value, Op::StftMag { x, win, hop }, ng, saved))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits nodes in reverse append order
    /// exactly once.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, GradError> {
        if self.value(loss).len() != 1 {
            return Err(GradError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.value(loss).dims()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            // Leaf gradients are the caller-visible results.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Gradient of a broadcast operand: sum `delta` over leading axes down to
    /// the operand's shape.
    fn accum_broadcast(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: &Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let target = self.value(v).dims().to_vec();
        let tl: usize = target.iter().product();
        if tl == delta.len() {
            self.accum(grads, v, delta.clone().reshaped(target).expect("broadcast dims"));
            return;
        }
        let mut out = Tensor::zeros(&target);
        for chunk in delta.data().chunks_exact(tl) {
            axpy(T::one(), chunk, out.data_mut());
        }
        self.accum(grads, v, out);
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum_broadcast(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let neg = g.map(|v| -v);
                self.accum_broadcast(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let bl = bv.len();
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_exact_mut(bl) {
                        for (v, bb) in chunk.iter_mut().zip(bv.data()) {
                            *v *= *bb;
                        }
                    }
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let mut db = g.clone();
                    for (i, v) in db.data_mut().iter_mut().enumerate() {
                        *v *= av.data()[i];
                    }
                    self.accum_broadcast(grads, *b, &db);
                }
            }
            Op::AffineConst(x, a, _) => {
                let a = *a;
                self.accum(grads, *x, g.map(|v| v * a));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = bv.dims()[1];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.dims());
                    tensor::matmul_bt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.dims());
                    tensor::matmul_acc(av.data(), g.data(), db.data_mut(), k, m, n, true);
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                self.accum(grads, *x, tensor::transpose2(g).expect("transpose grad"));
            }
            Op::Reshape(x) => {
                let dims = self.value(*x).dims().to_vec();
                self.accum(grads, *x, g.clone().reshaped(dims).expect("reshape grad"));
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                if axis == 0 || g.rank() == 1 {
                    let mut off = 0;
                    for &x in xs {
                        let len = self.value(x).len();
                        let part = Tensor::new(
                            self.value(x).dims().to_vec(),
                            g.data()[off..off + len].to_vec(),
                        )
                        .expect("concat grad dims");
                        off += len;
                        self.accum(grads, x, part);
                    }
                } else {
                    let rows = g.dims()[0];
                    let total_c = g.dims()[1];
                    let mut col = 0;
                    for &x in xs {
                        let c = self.value(x).dims()[1];
                        let mut part = Tensor::zeros(&[rows, c]);
                        for r in 0..rows {
                            part.row_mut(r)
                                .copy_from_slice(&g.data()[r * total_c + col..r * total_c + col + c]);
                        }
                        col += c;
                        self.accum(grads, x, part);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let dims = self.value(*x).dims().to_vec();
                let mut dx = Tensor::zeros(&dims);
                copy_slice(g.data(), &dims, *axis, *start, dx.data_mut(), true);
                self.accum(grads, *x, dx);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accum(grads, *x, Tensor::full(self.value(*x).dims(), s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g.item() / T::of(n as f64);
                self.accum(grads, *x, Tensor::full(self.value(*x).dims(), s));
            }
            Op::SumAxis(x, axis) => {
                let d = self.value(*x).dims().to_vec();
                let (r, c) = (d[0], d[1]);
                let mut dx = Tensor::zeros(&d);
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = if *axis == 1 { g.data()[i] } else { g.data()[j] };
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                self.accum(grads, *x, kernels::softmax_backward(g, y, *axis));
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, x) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v /= *x;
                }
                self.accum(grads, *x, dx);
            }
            Op::Exp(x) => {
                let mut dx = g.clone();
                for (v, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= *y;
                }
                self.accum(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                let mut dx = g.clone();
                let half = T::of(0.5);
                for (v, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= half / *y;
                }
                self.accum(grads, *x, dx);
            }
            Op::Recip(x) => {
                let mut dx = g.clone();
                for (v, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *v = -*v * *y * *y;
                }
                self.accum(grads, *x, dx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, x) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v = *v * x.signum() * if *x == T::zero() { T::zero() } else { T::one() };
                }
                self.accum(grads, *x, dx);
            }
            Op::Sin(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, x) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v *= x.cos();
                }
                self.accum(grads, *x, dx);
            }
            Op::Cumsum(x) => {
                let mut dx = g.clone();
                let mut acc = T::zero();
                for v in dx.data_mut().iter_mut().rev() {
                    acc += *v;
                    *v = acc;
                }
                self.accum(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (v, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= T::one() - *y * *y;
                }
                self.accum(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (v, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= *y * (T::one() - *y);
                }
                self.accum(grads, *x, dx);
            }
            Op::LeakyRelu(x) => {
                let xv = self.value(*x);
                let s = T::of(LEAKY_SLOPE);
                let mut dx = g.clone();
                for (v, x) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v = *v * if *x > T::zero() { T::one() } else { s };
                }
                self.accum(grads, *x, dx);
            }
            Op::ExpSigmoid(x) => {
                let xv = self.value(*x);
                let p = T::of(EXP_SIGMOID_POWER);
                let two = T::of(2.0);
                let mut dx = g.clone();
                for (v, x) in dx.data_mut().iter_mut().zip(xv.data()) {
                    let s = T::one() / (T::one() + (-*x).exp());
                    *v = *v * two * p * s.powf(p) * (T::one() - s);
                }
                self.accum(grads, *x, dx);
            }
            Op::Huber(x, delta) => {
                let xv = self.value(*x);
                let d = *delta;
                let mut dx = g.clone();
                for (v, a) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v = *v * if a.abs() <= d { *a } else { d * a.signum() };
                }
                self.accum(grads, *x, dx);
            }
            Op::Glu(x) => {
                let gate = &node.saved[0];
                let xv = self.value(*x);
                let c = *xv.dims().last().unwrap();
                let half = c / 2;
                let rows = xv.len() / c;
                let mut dx = Tensor::zeros(xv.dims());
                for r in 0..rows {
                    for i in 0..half {
                        let gv = g.data()[r * half + i];
                        let s = gate.data()[r * half + i];
                        let a = xv.data()[r * c + i];
                        dx.data_mut()[r * c + i] = gv * s;
                        dx.data_mut()[r * c + half + i] = gv * a * s * (T::one() - s);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::LayerNorm(x) => {
                let dx = kernels::layer_norm_backward(g, &node.saved[0], &node.saved[1]);
                self.accum(grads, *x, dx);
            }
            Op::L2NormalizeRows(x) => {
                let (y, inv_norm) = (&node.saved[0], &node.saved[1]);
                let c = *y.dims().last().unwrap();
                let rows = y.len() / c;
                let mut dx = Tensor::zeros(y.dims());
                for r in 0..rows {
                    let gs = &g.data()[r * c..(r + 1) * c];
                    let ys = &y.data()[r * c..(r + 1) * c];
                    let proj = tensor::dot(gs, ys);
                    let inv = inv_norm.data()[r];
                    for i in 0..c {
                        dx.data_mut()[r * c + i] = (gs[i] - ys[i] * proj) * inv;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Embedding { table, idx } => {
                let t = self.value(*table);
                let c = t.dims()[1];
                let mut dt = Tensor::zeros(t.dims());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(T::one(), &g.data()[r * c..(r + 1) * c], dt.row_mut(i));
                }
                self.accum(grads, *table, dt);
            }
            Op::GruCell { xg, h, u, b } => {
                let (dxg, dh, du, db) =
                    kernels::gru_cell_backward(g, self.value(*h), self.value(*u), &node.saved);
                self.accum(grads, *xg, dxg);
                self.accum(grads, *h, dh);
                self.accum(grads, *u, du);
                self.accum(grads, *b, db);
            }
            Op::Dropout(x) => {
                let mask = &node.saved[0];
                let mut dx = g.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *v *= *m;
                }
                self.accum(grads, *x, dx);
            }
            Op::Conv1d { x, w, stride, dilation, pad } => {
                let shape = kernels::conv1d_shape(self.value(*x), self.value(*w), *stride, *dilation, *pad)
                    .expect("conv1d grad shape");
                let (dx, dw) = kernels::conv1d_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    &shape,
                    *stride,
                    *dilation,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
            }
            Op::UpsampleLinear { x, hop } => {
                let dx = kernels::upsample_linear_backward(g, self.value(*x).dims(), *hop);
                self.accum(grads, *x, dx);
            }
            Op::StftMag { x, win, hop } => {
                let phase = (node.saved[0].clone(), node.saved[1].clone());
                let dx = kernels::stft_mag_backward(g, &phase, self.value(*x).len(), *win, *hop);
                self.accum(grads, *x, dx);
            }
        }
    }
}

use super::tensor::axpy;

/// Copy between a tensor and a contiguous slice of it along `axis`.
/// With `scatter` false the slice is read out of the full tensor (`src`
/// full, `dst` slice); with `scatter` true the slice is written back into
/// the full tensor (`src` slice, `dst` full).
fn copy_slice<T: Scalar>(
    src: &[T],
    full_dims: &[usize],
    axis: usize,
    start: usize,
    dst: &mut [T],
    scatter: bool,
) {
    let outer: usize = full_dims[..axis].iter().product();
    let axis_len = full_dims[axis];
    let inner: usize = full_dims[axis + 1..].iter().product();
    let part = if scatter { src.len() } else { dst.len() };
    let slice_len = part / (outer * inner).max(1);
    for o in 0..outer {
        for a in 0..slice_len {
            let full_off = (o * axis_len + start + a) * inner;
            let part_off = (o * slice_len + a) * inner;
            if scatter {
                dst[full_off..full_off + inner].copy_from_slice(&src[part_off..part_off + inner]);
            } else {
                dst[part_off..part_off + inner].copy_from_slice(&src[full_off..full_off + inner]);
            }
        }
    }
}
