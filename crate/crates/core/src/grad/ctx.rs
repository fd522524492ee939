//! Forward-pass context shared by the network modules: a tape, a parameter
//! store, and a deterministic rng for dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::optim::Params;
use super::GradError;
use crate::scalar::Scalar;

/// Per-forward context: the tape, the parameter store, and a deterministic
/// rng for dropout. Parameters are registered on the tape at most once.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    params: &'a Params<T>,
    registered: indexmap::IndexMap<String, Var>,
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a Params<T>, train: bool, seed: u64) -> Self {
        Self { g, params, registered: indexmap::IndexMap::new(), train, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Inference context (no dropout).
    pub fn eval(g: &'a mut Graph<T>, params: &'a Params<T>) -> Self {
        Self::new(g, params, false, 0)
    }

    /// Fetch a named parameter as a tape variable, registering it once.
    pub fn p(&mut self, name: &str) -> Result<Var, GradError> {
        if let Some(v) = self.registered.get(name) {
            return Ok(*v);
        }
        let v = self.g.param(name, self.params.get(name)?.clone());
        self.registered.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let train = self.train;
        self.g.dropout(x, p, train, &mut self.rng)
    }
}

