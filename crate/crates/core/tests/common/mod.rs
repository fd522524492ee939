//! Shared test support: independent oracles and synthetic signal builders.

#![allow(dead_code)]

use vasyn::grad::Tensor;
use vasyn::Scalar;

/// Naive double-loop evaluation of the frame-contrastive objective, used as
/// the oracle for the tape implementation. `negatives[n]` are the in-view
/// negative indices for anchor `n`.
pub fn brute_force_contrastive(
    view1: &Tensor<f64>,
    view2: &Tensor<f64>,
    negatives: &[Vec<usize>],
    temperature: f64,
) -> f64 {
    let n = view1.dims()[0];
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let mut total = 0.0;
    for (i, view) in [view1, view2].into_iter().enumerate() {
        let _ = i;
        let mut sum = 0.0;
        for anchor in 0..n {
            let pos = (cos(view1.row(anchor), view2.row(anchor)) / temperature).exp();
            let mut denom = pos;
            for &neg in &negatives[anchor] {
                denom += (cos(view.row(anchor), view.row(neg)) / temperature).exp();
            }
            sum += -(pos / denom).ln();
        }
        total += sum / n as f64;
    }
    total
}

/// Pearson correlation of two equal-length sequences.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().map(|v| v.to_f64c()).sum::<f64>() / n,
        b.iter().map(|v| v.to_f64c()).sum::<f64>() / n,
    );
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64c() - ma, y.to_f64c() - mb);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da.sqrt() * db.sqrt()).max(1e-12)
}

/// Sine tone.
pub fn tone(freq: f64, sr: u32, len: usize, amp: f64) -> Vec<f64> {
    (0..len).map(|t| amp * (2.0 * std::f64::consts::PI * freq * t as f64 / sr as f64).sin()).collect()
}
