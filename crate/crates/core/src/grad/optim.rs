//! Parameter store and Adam/AdamW updates.

use indexmap::IndexMap;
use rand::Rng;

use super::tensor::Tensor;
use super::GradError;
use crate::scalar::Scalar;

/// Named parameter tensors in insertion order; the order fixes the gradient
/// reduction and checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct Params<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, GradError> {
        self.map.get(name).ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, GradError> {
        self.map.get_mut(name).ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Kaiming-style uniform init for a linear / conv weight with the given
    /// fan-in: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_fan_in<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = T::of(1.0 / (fan_in as f64).sqrt());
        self.insert(name, Tensor::uniform(dims, -bound, bound, rng));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, dims: &[usize]) {
        self.insert(name, Tensor::zeros(dims));
    }

    pub fn init_full(&mut self, name: impl Into<String>, dims: &[usize], v: T) {
        self.insert(name, Tensor::full(dims, v));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    AdamW,
}

/// Adam / AdamW with bias correction; AdamW applies decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptKind, lr: T, weight_decay: T) -> Self {
        Self {
            kind,
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter present in `grads`. Rejects
    /// non-finite gradients, naming the offending parameter.
    pub fn step(
        &mut self,
        params: &mut Params<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<(), GradError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(GradError::NonFiniteGrad(name.clone()));
            }
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(GradError::Shape {
                    op: "optimizer_step",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
            let decay_mul = T::one() - self.lr * self.weight_decay;
            for i in 0..g.len() {
                let mut gi = g.data()[i];
                if self.kind == OptKind::Adam && self.weight_decay > T::zero() {
                    gi += self.weight_decay * p.data()[i];
                }
                let mi = self.beta1 * m.data()[i] + (T::one() - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (T::one() - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pd = p.data_mut();
                if self.kind == OptKind::AdamW {
                    pd[i] = pd[i] * decay_mul - update;
                } else {
                    pd[i] -= update;
                }
            }
        }
        Ok(())
    }

    /// Raw moment state, exposed for checkpointing.
    pub fn state(&self) -> (&IndexMap<String, Tensor<T>>, &IndexMap<String, Tensor<T>>) {
        (&self.m, &self.v)
    }

    /// Restore moment state and step counter from a checkpoint.
    pub fn restore(
        &mut self,
        step: u64,
        m: IndexMap<String, Tensor<T>>,
        v: IndexMap<String, Tensor<T>>,
    ) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = Params::<f64>::new();
        params.insert("w", Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap());
        let mut opt = Optimizer::new(OptKind::Adam, 0.1, 0.0);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With grad 1 at step 1, bias-corrected m̂ = 1 and v̂ = 1, so the update
        // is lr / (1 + eps) ≈ lr.
        let mut params = Params::<f64>::new();
        params.insert("w", Tensor::scalar(0.5));
        let mut opt = Optimizer::new(OptKind::Adam, 0.1, 0.0);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt.step(&mut params, &grads).unwrap();
        let got = params.get("w").unwrap().item();
        assert!((got - 0.4).abs() < 1e-6, "{got}");
    }

    #[test]
    fn adamw_decouples_decay() {
        let lr = 0.1;
        let wd = 0.2;
        let mut plain = Params::<f64>::new();
        plain.insert("w", Tensor::scalar(2.0));
        let mut opt0 = Optimizer::new(OptKind::AdamW, lr, 0.0);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt0.step(&mut plain, &grads).unwrap();

        let mut decayed = Params::<f64>::new();
        decayed.insert("w", Tensor::scalar(2.0));
        let mut opt1 = Optimizer::new(OptKind::AdamW, lr, wd);
        opt1.step(&mut decayed, &grads).unwrap();

        // Decay multiplies the parameter by (1 - lr*wd) on top of the plain update.
        let expected = plain.get("w").unwrap().item() - 2.0 * lr * wd;
        let got = decayed.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = Params::<f32>::new();
        params.insert("pitch.head.w", Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptKind::Adam, 0.1, 0.0);
        let mut grads = IndexMap::new();
        grads.insert("pitch.head.w".to_string(), Tensor::scalar(f32::NAN));
        let err = opt.step(&mut params, &grads).unwrap_err().to_string();
        assert!(err.contains("pitch.head.w"), "{err}");
    }
}
