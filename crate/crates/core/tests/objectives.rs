//! Loss-function contracts: hand-evaluated values, closed forms, the
//! brute-force contrastive oracle, and finite-difference gradients.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vasyn::grad::check::{finite_difference, FD_TOL};
use vasyn::grad::{Graph, Tensor};
use vasyn::objectives::*;

#[test]
fn huber_hand_values() {
    assert_eq!(huber(0.0, 1.0), 0.0);
    assert_eq!(huber(1.0, 1.0), 0.5);
    assert_eq!(huber(3.0, 1.0), 2.5);
    assert_eq!(huber(-3.0, 1.0), 2.5);
}

fn f0_col(vals: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(&[vals.len(), 1], vals).unwrap()
}

#[test]
fn pitch_loss_zero_set() {
    let mut g = Graph::new();
    let a = g.leaf(f0_col(&[150.0, 220.0, 330.0]));
    let b = g.leaf(f0_col(&[150.0, 220.0, 330.0]));
    let loss = pitch_consistency_loss(&mut g, a, b, 0).unwrap();
    assert!(g.item(loss).abs() < 1e-12);

    // f0_1 = f0_2 * 2^(0.5 d / 12) zeroes the loss for any d.
    for d in [-12i32, -5, 1, 7, 12] {
        let mut g = Graph::new();
        let base = [100.0, 200.0, 400.0, 800.0];
        let shifted: Vec<f64> =
            base.iter().map(|f| f * 2f64.powf(0.5 * d as f64 / 12.0)).collect();
        let v1 = g.leaf(f0_col(&shifted));
        let v2 = g.leaf(f0_col(&base));
        let loss = pitch_consistency_loss(&mut g, v1, v2, d).unwrap();
        assert!(g.item(loss).abs() < 1e-9, "d = {d}: {}", g.item(loss));
    }
}

#[test]
fn pitch_loss_hand_value() {
    // Equal 200 Hz tracks with d = 2: huber(|0 - 1|) = 0.5.
    let mut g = Graph::new();
    let a = g.leaf(f0_col(&[200.0, 200.0]));
    let b = g.leaf(f0_col(&[200.0, 200.0]));
    let loss = pitch_consistency_loss(&mut g, a, b, 2).unwrap();
    assert!((g.item(loss) - 0.5).abs() < 1e-12);
}

#[test]
fn pitch_loss_swap_antisymmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [-9i32, -2, 0, 3, 11] {
        let a = Tensor::uniform(&[6, 1], 60.0, 900.0, &mut rng);
        let b = Tensor::uniform(&[6, 1], 60.0, 900.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let fwd = pitch_consistency_loss(&mut g, va, vb, d).unwrap();
        let mut g2 = Graph::new();
        let (vb2, va2) = (g2.leaf(b), g2.leaf(a));
        let bwd = pitch_consistency_loss(&mut g2, vb2, va2, -d).unwrap();
        let delta: f64 = g.item(fwd) - g2.item(bwd);
        assert!(delta.abs() < 1e-12);
    }
}

#[test]
fn pitch_loss_rejects_nonpositive_f0() {
    let mut g = Graph::new();
    let a = g.leaf(f0_col(&[200.0, 0.0]));
    let b = g.leaf(f0_col(&[200.0, 100.0]));
    assert!(pitch_consistency_loss(&mut g, a, b, 0).is_err());
}

#[test]
fn pitch_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::uniform(&[5, 1], 100.0, 800.0, &mut rng);
    let b = Tensor::uniform(&[5, 1], 100.0, 800.0, &mut rng);
    let err = finite_difference(|g, v| pitch_consistency_loss(g, v[0], v[1], 4), &[a, b]).unwrap();
    assert!(err < FD_TOL, "max rel err {err}");
}

/// anchor rows with the positive view equal and all negatives orthogonal:
/// per-view per-frame term is -log(e^{1/k} / (e^{1/k} + m)).
#[test]
fn contrastive_closed_form_identical_views_orthogonal_negatives() {
    let n = 24usize;
    let c = 30usize;
    let cfg = ContrastiveConfig { n_negatives: 4, ..Default::default() };
    // Orthogonal unit rows: row i is one-hot at column i (c >= n), so any
    // within-view negative similarity is exactly zero.
    let mut rows = Tensor::zeros(&[n, c]);
    for i in 0..n {
        rows.data_mut()[i * c + i] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let v1 = g.leaf(rows.clone());
    let v2 = g.leaf(rows);
    let loss = contrastive_loss(&mut g, v1, v2, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let k = cfg.temperature;
    let expect_per_view_frame = -((1f64 / k).exp() / ((1f64 / k).exp() + 4.0)).ln();
    assert!((expect_per_view_frame - 1.815e-4).abs() < 1e-6, "sanity: {expect_per_view_frame}");
    let expect = 2.0 * expect_per_view_frame;
    let got = g.item(loss);
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

/// Positive orthogonal while one negative equals the anchor: the per-frame
/// term approaches -log(e^0 / (e^0 + e^{1/k})) ≈ 10 for k = 0.1.
#[test]
fn contrastive_closed_form_hard_negative() {
    let expect = -(1f64 / (1.0 + (10f64).exp())).ln();
    assert!((expect - 10.0).abs() < 1e-4, "{expect}");
    // Cross-check with the brute-force oracle on an explicit construction:
    // two frames with orthogonal views, each anchor's single negative being
    // a frame identical to the anchor.
    let v1 = Tensor::from_slice(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let v2 = Tensor::from_slice(&[2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
    let negatives = vec![vec![1], vec![0]];
    let got = common::brute_force_contrastive(&v1, &v2, &negatives, 0.1);
    // both views and both frames hit the same term
    assert!((got - 2.0 * expect).abs() < 1e-9, "{got} vs {}", 2.0 * expect);
}

#[test]
fn contrastive_matches_brute_force_on_random_instances() {
    let cfg = ContrastiveConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v1 = Tensor::uniform(&[32, 8], -1.0, 1.0, &mut rng);
        let v2 = Tensor::uniform(&[32, 8], -1.0, 1.0, &mut rng);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let negatives = sample_negatives(32, &cfg, &mut sample_rng).unwrap();
        let oracle = common::brute_force_contrastive(&v1, &v2, &negatives, cfg.temperature);
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.leaf(v1), g.leaf(v2));
        let mut loss_rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let loss = contrastive_loss(&mut g, a, b, &cfg, &mut loss_rng).unwrap();
        let got = g.item(loss);
        assert!((got - oracle).abs() < 1e-6, "seed {seed}: {got} vs {oracle}");
    }
}

#[test]
fn contrastive_needs_room_for_negatives() {
    let cfg = ContrastiveConfig::default();
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::zeros(&[21, 4]));
    let w = g.leaf(Tensor::zeros(&[21, 4]));
    assert!(contrastive_loss(&mut g, v, w, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn contrastive_gradient_check() {
    let cfg = ContrastiveConfig { exclusion_radius: 2, n_negatives: 3, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v1 = Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng);
    let v2 = Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng);
    let err = finite_difference(
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            contrastive_loss(g, v[0], v[1], &cfg, &mut rng)
        },
        &[v1, v2],
    )
    .unwrap();
    assert!(err < FD_TOL, "max rel err {err}");
}

#[test]
fn mss_zero_for_identical_signals() {
    let cfg = MssConfig { fft_sizes: vec![64, 128] };
    let x = Tensor::from_slice(&[512], &common::tone(440.0, 16000, 512, 0.5)).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.leaf(x.clone()), g.leaf(x));
    let loss = mss_loss(&mut g, a, b, &cfg).unwrap();
    assert!(g.item(loss).abs() < 1e-9);
}

#[test]
fn mss_zero_prediction_has_unit_spectral_convergence() {
    // With pred = 0 the spectral-convergence term is exactly 1 per scale;
    // the log-magnitude term is computed independently and subtracted out.
    let cfg = MssConfig { fft_sizes: vec![128] };
    let x = common::tone(300.0, 16000, 512, 0.4);
    let xt = Tensor::from_slice(&[512], &x).unwrap();
    let mut g = Graph::new();
    let a = g.leaf(xt.clone());
    let b = g.leaf(Tensor::zeros(&[512]));
    let loss = mss_loss(&mut g, b, a, &cfg).unwrap();

    let buf = vasyn::audio::AudioBuffer::new(x, 16000);
    let mags = vasyn::dsp::stft_mag(&buf, 128, 32).unwrap().mags;
    let l1_hand: f64 = mags
        .data()
        .iter()
        .map(|m| ((m + 1e-5).ln() - (1e-5f64).ln()).abs())
        .sum::<f64>()
        / mags.len() as f64;
    let sc = g.item(loss) - l1_hand;
    assert!((sc - 1.0).abs() < 1e-6, "spectral convergence {sc}");
}

#[test]
fn mss_decreases_along_interpolation_toward_target() {
    let cfg = MssConfig { fft_sizes: vec![64, 256] };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::uniform(&[1024], -0.8, 0.8, &mut rng);
    let b = Tensor::uniform(&[1024], -0.8, 0.8, &mut rng);
    let mut last = f64::INFINITY;
    for i in 0..5 {
        let t = i as f64 / 4.0;
        let mixed = Tensor::new(
            vec![1024],
            a.data().iter().zip(b.data()).map(|(x, y)| y + t * (x - y)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let (av, mv) = (g.leaf(a.clone()), g.leaf(mixed));
        let loss_var = mss_loss(&mut g, mv, av, &cfg).unwrap();
        let loss = g.item(loss_var);
        assert!(loss < last + 1e-9, "t={t}: {loss} !< {last}");
        last = loss;
    }
}

#[test]
fn mss_gradient_check() {
    let cfg = MssConfig { fft_sizes: vec![32] };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = Tensor::uniform(&[96], -1.0, 1.0, &mut rng);
    let pred = Tensor::uniform(&[96], -1.0, 1.0, &mut rng);
    let err = finite_difference(
        |g, v| {
            let t = g.leaf(target.clone());
            mss_loss(g, v[0], t, &cfg)
        },
        &[pred],
    )
    .unwrap();
    assert!(err < FD_TOL, "max rel err {err}");
}

#[test]
fn mel_loss_zero_symmetric_and_log2_under_doubling() {
    let sr = 16000;
    let x = common::tone(500.0, sr, 2048, 0.4);
    let xt = Tensor::from_slice(&[2048], &x).unwrap();
    let half = Tensor::new(vec![2048], x.iter().map(|v| 0.5 * v).collect()).unwrap();

    let mut g = Graph::new();
    let (a, b) = (g.leaf(xt.clone()), g.leaf(xt.clone()));
    let same = mel_loss(&mut g, a, b, sr, 40, 512, 128).unwrap();
    assert!(g.item(same).abs() < 1e-9);

    let mut g = Graph::new();
    let (a, b) = (g.leaf(xt.clone()), g.leaf(half.clone()));
    let ab_var = mel_loss(&mut g, a, b, sr, 40, 512, 128).unwrap();
    let ab = g.item(ab_var);
    let mut g = Graph::new();
    let (b2, a2) = (g.leaf(half.clone()), g.leaf(xt.clone()));
    let ba_var = mel_loss(&mut g, b2, a2, sr, 40, 512, 128).unwrap();
    let ba = g.item(ba_var);
    assert!((ab - ba).abs() < 1e-9, "mel loss must be symmetric");

    // On bins far above the floor, halving the signal shifts the log-mel by
    // ln 2 within ±0.05.
    let buf = vasyn::audio::AudioBuffer::new(x.clone(), sr);
    let full = vasyn::dsp::mel_spectrogram(&buf, 40, 512, 128).unwrap().mags;
    let buf_half = vasyn::audio::AudioBuffer::new(half.data().to_vec(), sr);
    let half_mel = vasyn::dsp::mel_spectrogram(&buf_half, 40, 512, 128).unwrap().mags;
    let mut diffs = Vec::new();
    for (f, h) in full.data().iter().zip(half_mel.data()) {
        if *f > (100.0 * 1e-5f64).ln() {
            diffs.push((f - h).abs());
        }
    }
    assert!(!diffs.is_empty());
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!((mean - std::f64::consts::LN_2).abs() < 0.05, "mean log shift {mean}");
}

#[test]
fn schedule_endpoints_match_configuration() {
    let cfg = ContrastiveConfig::default();
    assert!((cfg.coefficient(0, 1000) - 1e-5).abs() < 1e-12);
    assert!((cfg.coefficient(1000, 1000) - 10.0).abs() < 1e-12);
    assert!((cfg.coefficient(500, 1000) - 5.0).abs() < 0.01);
    // saturates past the end
    assert!((cfg.coefficient(2000, 1000) - 10.0).abs() < 1e-12);
}

#[test]
fn total_loss_combines_and_reports_components() {
    let cfg = ContrastiveConfig::default();
    let mut g = Graph::<f64>::new();
    let zero = g.leaf(Tensor::scalar(0.0));
    let (total, parts) =
        total_backbone_loss(&mut g, zero, zero, zero, zero, 1.0, &cfg, 0, 100).unwrap();
    assert_eq!(g.item(total), 0.0);
    assert_eq!(parts.total, 0.0);

    let mut g = Graph::<f64>::new();
    let bad = g.leaf(Tensor::scalar(f64::NAN));
    let ok = g.leaf(Tensor::scalar(1.0));
    let err = total_backbone_loss(&mut g, ok, bad, ok, ok, 1.0, &cfg, 0, 100)
        .unwrap_err()
        .to_string();
    assert!(err.contains("mel"), "error must name the component: {err}");
}

#[test]
fn losses_are_nonnegative_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let a = Tensor::uniform(&[600], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[600], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(a), g.leaf(b));
        let cfg = MssConfig { fft_sizes: vec![128] };
        let mss_var = mss_loss(&mut g, av, bv, &cfg).unwrap();
        assert!(g.item(mss_var) >= 0.0);
        let mel_var = mel_loss(&mut g, av, bv, 16000, 20, 128, 32).unwrap();
        assert!(g.item(mel_var) >= 0.0);
    }
}
