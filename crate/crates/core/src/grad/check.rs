//! Finite-difference gradient checking, always in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::kernels::Pad;
use super::tensor::Tensor;
use super::GradError;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-4;
/// Relative error bound every differentiable op must satisfy.
pub const FD_TOL: f64 = 1e-4;

/// Central-difference check of a scalar-valued graph against its reverse-mode
/// gradients. `build` must construct the same loss from the given leaf
/// variables on every call. Returns the maximum relative error over all
/// input elements.
pub fn finite_difference<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64, GradError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf_grad(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.item(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_grad(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).dims())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[ti].data_mut()[i] = x0 + FD_EPS;
            let hi = eval(&work)?;
            work[ti].data_mut()[i] = x0 - FD_EPS;
            let lo = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            let fd = (hi - lo) / (2.0 * FD_EPS);
            let an = analytic[ti].data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights so
/// every output element participates in the loss.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, salt: u64) -> Result<Var, GradError> {
    let dims = g.value(out).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    let w = g.leaf(Tensor::uniform(&dims, 0.25, 1.0, &mut rng));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn smooth(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(dims, -1.5, 1.5, rng)
}

/// Samples bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(dims);
    for v in t.data_mut() {
        let mag = rng.gen_range(0.1..1.5);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        *v = sign * mag;
    }
    t
}

fn positive(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(dims, 0.2, 2.0, rng)
}

/// One named finite-difference check.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Run the full per-op finite-difference suite over `seeds` random seeds.
/// Every differentiable tape op is covered, plus a three-op composite chain.
pub fn run_op_checks(seeds: u64) -> Result<Vec<OpCheck>, GradError> {
    let mut results: Vec<OpCheck> = Vec::new();
    let record = |name: &'static str, err: f64, results: &mut Vec<OpCheck>| {
        match results.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_rel_err = c.max_rel_err.max(err),
            None => results.push(OpCheck { name, max_rel_err: err }),
        }
    };

    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = &mut rng;

        let checks: Vec<(&'static str, Vec<Tensor<f64>>, BuildFn)> = vec![
            (
                "add_broadcast",
                vec![smooth(&[3, 4], r), smooth(&[4], r)],
                Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.add(v[0], v[1])?;
                    weighted_sum(g, y, 1)
                }),
            ),
            (
                "sub",
                vec![smooth(&[3, 4], r), smooth(&[3, 4], r)],
                Box::new(|g, v| {
                    let y = g.sub(v[0], v[1])?;
                    weighted_sum(g, y, 2)
                }),
            ),
            (
                "mul_broadcast",
                vec![smooth(&[3, 4], r), smooth(&[4], r)],
                Box::new(|g, v| {
                    let y = g.mul(v[0], v[1])?;
                    weighted_sum(g, y, 3)
                }),
            ),
            (
                "affine_const",
                vec![smooth(&[5], r)],
                Box::new(|g, v| {
                    let y = g.affine(v[0], -1.75, 0.5);
                    weighted_sum(g, y, 4)
                }),
            ),
            (
                "matmul",
                vec![smooth(&[4, 5], r), smooth(&[5, 3], r)],
                Box::new(|g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_sum(g, y, 5)
                }),
            ),
            (
                "transpose",
                vec![smooth(&[3, 4], r)],
                Box::new(|g, v| {
                    let y = g.transpose(v[0])?;
                    weighted_sum(g, y, 6)
                }),
            ),
            (
                "reshape",
                vec![smooth(&[3, 4], r)],
                Box::new(|g, v| {
                    let y = g.reshape(v[0], &[2, 6])?;
                    weighted_sum(g, y, 7)
                }),
            ),
            (
                "concat",
                vec![smooth(&[2, 3], r), smooth(&[2, 2], r)],
                Box::new(|g, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    let z = g.concat(&[y, y], 0)?;
                    weighted_sum(g, z, 8)
                }),
            ),
            (
                "slice",
                vec![smooth(&[4, 5], r)],
                Box::new(|g, v| {
                    let y = g.slice(v[0], 1, 1, 4)?;
                    let z = g.slice(y, 0, 0, 2)?;
                    weighted_sum(g, z, 9)
                }),
            ),
            (
                "sum_mean",
                vec![smooth(&[3, 4], r)],
                Box::new(|g, v| {
                    let s = g.sum(v[0]);
                    let m = g.mean(v[0]);
                    g.add(s, m)
                }),
            ),
            (
                "sum_axis",
                vec![smooth(&[3, 4], r)],
                Box::new(|g, v| {
                    let a = g.sum_axis(v[0], 0)?;
                    let b = g.sum_axis(v[0], 1)?;
                    let sa = weighted_sum(g, a, 10)?;
                    let sb = weighted_sum(g, b, 11)?;
                    g.add(sa, sb)
                }),
            ),
            (
                "softmax",
                vec![smooth(&[3, 5], r)],
                Box::new(|g, v| {
                    let a = g.softmax(v[0], 1)?;
                    let b = g.softmax(v[0], 0)?;
                    let sa = weighted_sum(g, a, 12)?;
                    let sb = weighted_sum(g, b, 13)?;
                    g.add(sa, sb)
                }),
            ),
            (
                "log",
                vec![positive(&[6], r)],
                Box::new(|g, v| {
                    let y = g.log(v[0]);
                    weighted_sum(g, y, 14)
                }),
            ),
            (
                "exp",
                vec![smooth(&[6], r)],
                Box::new(|g, v| {
                    let y = g.exp(v[0]);
                    weighted_sum(g, y, 15)
                }),
            ),
            (
                "sqrt",
                vec![positive(&[6], r)],
                Box::new(|g, v| {
                    let y = g.sqrt(v[0]);
                    weighted_sum(g, y, 16)
                }),
            ),
            (
                "recip",
                vec![away_from_zero(&[6], r)],
                Box::new(|g, v| {
                    let y = g.recip(v[0]);
                    weighted_sum(g, y, 17)
                }),
            ),
            (
                "abs",
                vec![away_from_zero(&[6], r)],
                Box::new(|g, v| {
                    let y = g.abs(v[0]);
                    weighted_sum(g, y, 18)
                }),
            ),
            (
                "sin_cumsum",
                vec![smooth(&[8], r)],
                Box::new(|g, v| {
                    let c = g.cumsum(v[0])?;
                    let y = g.sin(c);
                    weighted_sum(g, y, 19)
                }),
            ),
            (
                "tanh",
                vec![smooth(&[6], r)],
                Box::new(|g, v| {
                    let y = g.tanh(v[0]);
                    weighted_sum(g, y, 20)
                }),
            ),
            (
                "sigmoid",
                vec![smooth(&[6], r)],
                Box::new(|g, v| {
                    let y = g.sigmoid(v[0]);
                    weighted_sum(g, y, 21)
                }),
            ),
            (
                "leaky_relu",
                vec![away_from_zero(&[6], r)],
                Box::new(|g, v| {
                    let y = g.leaky_relu(v[0]);
                    weighted_sum(g, y, 22)
                }),
            ),
            (
                "exp_sigmoid",
                vec![smooth(&[6], r)],
                Box::new(|g, v| {
                    let y = g.exp_sigmoid(v[0]);
                    weighted_sum(g, y, 23)
                }),
            ),
            (
                "huber",
                vec![{
                    // keep |x| away from the quadratic/linear switch at delta=1
                    let mut t = away_from_zero(&[8], r);
                    for v in t.data_mut() {
                        if (v.abs() - 1.0).abs() < 0.05 {
                            *v *= 1.2;
                        }
                    }
                    t
                }],
                Box::new(|g, v| {
                    let y = g.huber(v[0], 1.0);
                    weighted_sum(g, y, 24)
                }),
            ),
            (
                "glu",
                vec![smooth(&[3, 8], r)],
                Box::new(|g, v| {
                    let y = g.glu(v[0])?;
                    weighted_sum(g, y, 25)
                }),
            ),
            (
                "layer_norm",
                vec![smooth(&[3, 6], r)],
                Box::new(|g, v| {
                    let y = g.layer_norm(v[0]);
                    weighted_sum(g, y, 26)
                }),
            ),
            (
                "l2_normalize_rows",
                vec![away_from_zero(&[3, 6], r)],
                Box::new(|g, v| {
                    let y = g.l2_normalize_rows(v[0]);
                    weighted_sum(g, y, 27)
                }),
            ),
            (
                "embedding",
                vec![smooth(&[5, 4], r)],
                Box::new(|g, v| {
                    let y = g.embedding(v[0], &[3, 0, 3, 1])?;
                    weighted_sum(g, y, 28)
                }),
            ),
            (
                "gru_cell",
                vec![smooth(&[1, 9], r), smooth(&[1, 3], r), smooth(&[3, 9], r), smooth(&[9], r)],
                Box::new(|g, v| {
                    let y = g.gru_cell(v[0], v[1], v[2], v[3])?;
                    weighted_sum(g, y, 29)
                }),
            ),
            (
                "dropout",
                vec![smooth(&[4, 4], r)],
                Box::new(|g, v| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
                    let y = g.dropout(v[0], 0.4, true, &mut mask_rng);
                    weighted_sum(g, y, 30)
                }),
            ),
            (
                "conv1d_same",
                vec![smooth(&[7, 3], r), smooth(&[4, 3, 3], r)],
                Box::new(|g, v| {
                    let y = g.conv1d(v[0], v[1], 1, 2, Pad::Same)?;
                    weighted_sum(g, y, 31)
                }),
            ),
            (
                "conv1d_causal_strided",
                vec![smooth(&[2, 8, 3], r), smooth(&[4, 3, 3], r)],
                Box::new(|g, v| {
                    let y = g.conv1d(v[0], v[1], 2, 1, Pad::Causal)?;
                    weighted_sum(g, y, 32)
                }),
            ),
            (
                "upsample_linear",
                vec![smooth(&[4, 2], r)],
                Box::new(|g, v| {
                    let y = g.upsample_linear(v[0], 3, 14)?;
                    weighted_sum(g, y, 33)
                }),
            ),
            (
                "stft_mag",
                vec![stft_input(r)],
                Box::new(|g, v| {
                    let y = g.stft_mag(v[0], 16, 8)?;
                    weighted_sum(g, y, 34)
                }),
            ),
            (
                "chain3",
                vec![smooth(&[3, 4], r), smooth(&[4, 4], r)],
                Box::new(|g, v| {
                    let a = g.matmul(v[0], v[1])?;
                    let b = g.tanh(a);
                    let c = g.layer_norm(b);
                    weighted_sum(g, c, 35)
                }),
            ),
        ];

        for (name, inputs, build) in checks {
            let err = finite_difference(|g, v| build(g, v), &inputs)?;
            record(name, err, &mut results);
        }
    }
    Ok(results)
}

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>>;

/// A signal whose spectrum stays bounded away from zero so the magnitude
/// derivative is well conditioned for finite differences.
fn stft_input(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let t = Tensor::uniform(&[40], -1.0, 1.0, rng);
        if let Ok((mags, _)) = super::kernels::stft_mag_forward(t.data(), 16, 8, false) {
            if mags.data().iter().all(|&m| m > 0.05) {
                return t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_matches_hand_value() {
        // d/dx (x*x) at x = 3 is 6.
        let mut g = Graph::<f64>::new();
        let x = g.leaf_grad(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let mut grads = g.backward(y).unwrap();
        assert_eq!(grads.take(x).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let err = finite_difference(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 99)
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < FD_TOL, "max rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::uniform(&[6, 9], -4.0, 4.0, &mut rng));
        let y = g.softmax(x, 1).unwrap();
        for i in 0..6 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
