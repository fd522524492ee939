//! Linguistic encoder: a 1x1 pre-convolution followed by residual ConvGLU
//! blocks with dilations 3^j, ending in a unit-norm projection.

use rand::Rng;

use super::{conv, init_conv, normalize_log_mel, Ctx, NetsConfig};
use crate::grad::{GradError, Pad, Params, Tensor, Var};
use crate::scalar::Scalar;

pub fn init_linguistic_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetsConfig,
    params: &mut Params<T>,
    rng: &mut R,
) {
    let w = cfg.linguistic_dim;
    init_conv(params, "ling.pre", w, 1, cfg.frontend_dim, rng);
    for j in 0..cfg.linguistic_blocks {
        init_conv(params, &format!("ling.glu{j}"), 2 * w, 3, w, rng);
    }
    init_conv(params, "ling.post", w, 1, w, rng);
}

/// Frontend features `[N, frontend_dim]` (log-mel by default) to unit-norm
/// linguistic rows `[N, C_L]`.
pub fn linguistic_encoder_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &NetsConfig,
    feats: &Tensor<T>,
) -> Result<Var, GradError> {
    if feats.rank() != 2 || feats.dims()[1] != cfg.frontend_dim {
        return Err(GradError::Invalid {
            op: "linguistic_encoder",
            msg: format!("expected [N, {}], got {:?}", cfg.frontend_dim, feats.dims()),
        });
    }
    let x = ctx.g.leaf(normalize_log_mel(feats));
    let mut h = conv(ctx, x, "ling.pre", 1, 1, Pad::Same)?;
    h = ctx.g.leaky_relu(h);
    for j in 0..cfg.linguistic_blocks {
        let d = ctx.dropout(h, cfg.dropout);
        let y = conv(ctx, d, &format!("ling.glu{j}"), 1, 3usize.pow(j as u32), Pad::Same)?;
        let y = ctx.g.glu(y)?;
        h = ctx.g.add(h, y)?;
    }
    let h = conv(ctx, h, "ling.post", 1, 1, Pad::Same)?;
    Ok(ctx.g.l2_normalize_rows(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (NetsConfig, Params<f32>) {
        let cfg = NetsConfig::toy();
        let mut params = Params::new();
        init_linguistic_encoder(&cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(4));
        (cfg, params)
    }

    #[test]
    fn output_shape_and_unit_rows() {
        let (cfg, params) = setup();
        for n in [1usize, 3, 17] {
            let feats =
                Tensor::uniform(&[n, cfg.frontend_dim], -11.0f32, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
            let mut g = Graph::new();
            let mut ctx = Ctx::eval(&mut g, &params);
            let out = linguistic_encoder_forward(&mut ctx, &cfg, &feats).unwrap();
            assert_eq!(g.value(out).dims(), &[n, cfg.linguistic_dim]);
            for i in 0..n {
                let norm: f32 = g.value(out).row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
            }
        }
    }

    #[test]
    fn constant_input_rows_map_to_identical_interior_rows() {
        // Away from boundary padding the conv stack is time-shift equivariant,
        // so identical input frames produce identical output rows.
        let (cfg, params) = setup();
        let n = 60;
        let mut feats = Tensor::zeros(&[n, cfg.frontend_dim]);
        for r in 0..n {
            for c in 0..cfg.frontend_dim {
                feats.data_mut()[r * cfg.frontend_dim + c] = -4.0 + 0.01 * c as f32;
            }
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let out = linguistic_encoder_forward(&mut ctx, &cfg, &feats).unwrap();
        // Interior rows: receptive field half-width is sum(3^j) ≈ 13 frames.
        let (i, j) = (25usize, 30usize);
        for c in 0..cfg.linguistic_dim {
            let a = g.value(out).at2(i, c);
            let b = g.value(out).at2(j, c);
            assert!((a - b).abs() < 1e-5, "col {c}: {a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (cfg, params) = setup();
        let feats = Tensor::zeros(&[4, cfg.frontend_dim + 1]);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        assert!(linguistic_encoder_forward(&mut ctx, &cfg, &feats).is_err());
    }
}
