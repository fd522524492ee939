//! Scalar abstraction: every numeric kernel in this crate is generic over
//! `Scalar`, instantiated as `f32` for production compute and `f64` for
//! gradient checking. Concrete aliases live at the crate root.

use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar usable by tensors, transforms and networks.
pub trait Scalar:
    rustfft::FftNum
    + num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + SampleUniform
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Constant conversion from `f64`; panics only on values outside the
    /// target type's range, which never occur for literal constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant out of range")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }

    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}
