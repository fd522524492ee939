//! Dense row-major n-dimensional tensors.

use crate::scalar::Scalar;
use rand::Rng;

use super::GradError;

/// Dense tensor with row-major layout. `data.len() == product(dims)` always
/// holds; constructors enforce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, GradError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(GradError::Invalid {
                op: "tensor",
                msg: format!("dims {:?} require {} elements, got {}", dims, n, data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { dims: vec![1], data: vec![v] }
    }

    pub fn from_slice(dims: &[usize], data: &[T]) -> Result<Self, GradError> {
        Self::new(dims.to_vec(), data.to_vec())
    }

    /// Uniform init in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: T, hi: T, rng: &mut R) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(|_| T::uniform(rng, lo, hi)).collect() }
    }

    /// Standard-normal init scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: T, rng: &mut R) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(|_| T::std_normal(rng) * std).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, GradError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(GradError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.dims, dims),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other` for identically shaped tensors.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Convert element type, used when moving between compute and
    /// gradient-check precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|x| U::of(x.to_f64c())).collect() }
    }
}

/// `c = a × b` for rank-2 operands, `[m,k]·[k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, GradError> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(GradError::Shape {
            op: "matmul",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n, false);
    Ok(out)
}

/// Accumulating matmul kernel over raw row-major slices.
/// With `transpose_a`, computes `aᵀ × b` for `a` of shape `[k,m]`.
pub fn matmul_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if transpose_a { a[p * m + i] } else { a[i * k + p] };
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// `out += a × bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, GradError> {
    if a.rank() != 2 {
        return Err(GradError::Invalid { op: "transpose", msg: format!("rank {} tensor", a.rank()) });
    }
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += s * x`.
pub fn axpy<T: Scalar>(s: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * *xi;
    }
}
