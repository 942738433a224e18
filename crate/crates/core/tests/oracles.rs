//! Metrics and loss checked against independent reference implementations.

use deftri_core::evaluation::{accuracy, confusion, macro_f1};
use deftri_core::numerics::graph::bce_value;
use deftri_core::numerics::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute force over (label, sample) cells: (tp, fp, fn, tn) per label.
fn brute_counts(preds: &[Vec<u8>], truths: &[Vec<u8>]) -> Vec<[u64; 4]> {
    let t = truths[0].len();
    let mut out = vec![[0u64; 4]; t];
    for label in 0..t {
        for (p, y) in preds.iter().zip(truths) {
            let slot = match (p[label], y[label]) {
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 1) => 2,
                _ => 3,
            };
            out[label][slot] += 1;
        }
    }
    out
}

fn brute_metrics(preds: &[Vec<u8>], truths: &[Vec<u8>]) -> (f64, f64) {
    let counts = brute_counts(preds, truths);
    let correct: u64 = counts.iter().map(|c| c[0] + c[3]).sum();
    let all: u64 = counts.iter().map(|c| c.iter().sum::<u64>()).sum();
    let frac = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let t = counts.len() as f64;
    let p = counts.iter().map(|c| frac(c[0], c[0] + c[1])).sum::<f64>() / t;
    let r = counts.iter().map(|c| frac(c[0], c[0] + c[2])).sum::<f64>() / t;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (correct as f64 / all as f64, f1)
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let n = rng.random_range(1..=20);
    let t = rng.random_range(1..=15);
    let density = rng.random_range(0.0..1.0);
    let mut draw = || (0..n).map(|_| (0..t).map(|_| u8::from(rng.random_bool(density))).collect()).collect();
    (draw(), draw())
}

#[test]
fn metrics_match_brute_force_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let (preds, truths) = random_fixture(&mut rng);
        let c = confusion(&preds, &truths).unwrap();
        let brute = brute_counts(&preds, &truths);
        for (got, want) in c.per_label.iter().zip(&brute) {
            assert_eq!([got.tp, got.fp, got.fn_, got.tn], *want, "case {case}");
        }
        let (acc, f1) = brute_metrics(&preds, &truths);
        let (a, f) = (accuracy(&c).unwrap(), macro_f1(&c).unwrap());
        assert!((a - acc).abs() <= 1e-12 && (f - f1).abs() <= 1e-12, "case {case}");
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));

        // sample permutation changes nothing; label permutation keeps accuracy
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.shuffle(&mut rng);
        let pick = |m: &[Vec<u8>]| order.iter().map(|&i| m[i].clone()).collect::<Vec<_>>();
        let shuffled = confusion(&pick(&preds), &pick(&truths)).unwrap();
        assert_eq!(shuffled, c);
        let mut cols: Vec<usize> = (0..truths[0].len()).collect();
        cols.shuffle(&mut rng);
        let permute =
            |m: &[Vec<u8>]| m.iter().map(|row| cols.iter().map(|&j| row[j]).collect()).collect::<Vec<Vec<u8>>>();
        let relabeled = confusion(&permute(&preds), &permute(&truths)).unwrap();
        assert!((accuracy(&relabeled).unwrap() - a).abs() <= 1e-12);
    }
}

/// Per-element `-(p·y·ln σ(x) + (1 − y)·ln(1 − σ(x)))`, averaged, with
/// `1 − σ(x)` written as `e^{−x} / (1 + e^{−x})` to avoid cancellation.
fn naive_bce(x: &[f64], y: &[u8], pos_weight: &[f64]) -> f64 {
    let t = pos_weight.len();
    let total: f64 = x
        .iter()
        .zip(y)
        .enumerate()
        .map(|(i, (&x, &y))| {
            let sig = 1.0 / (1.0 + (-x).exp());
            let one_minus = (-x).exp() / (1.0 + (-x).exp());
            let y = f64::from(y);
            -(pos_weight[i % t] * y * sig.ln() + (1.0 - y) * one_minus.ln())
        })
        .sum();
    total / x.len() as f64
}

#[test]
fn stable_bce_matches_naive_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let (b, t) = (rng.random_range(1..=8), rng.random_range(1..=15));
        let x: Vec<f64> = (0..b * t).map(|_| rng.random_range(-20.0..=20.0)).collect();
        let y: Vec<u8> = (0..b * t).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let pw: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..3.0)).collect();
        let stable = bce_value(&x, &y, &pw, &vec![1.0; b], t);
        let naive = naive_bce(&x, &y, &pw);
        assert!((stable - naive).abs() <= 1e-12, "{stable} vs {naive}");
    }
}

#[test]
fn bce_extremes_through_the_graph() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(Tensor::from_f64([1, 4], &[50.0, -50.0, 50.0, -50.0]).unwrap()).unwrap();
    let loss = g.bce_with_logits(x, &[1, 0, 0, 1], &[1.0; 4], None).unwrap();
    let v = g.value(loss).item();
    assert!(v.is_finite());
    assert!((v - 25.0).abs() < 1e-9, "{v}");

    let mut g = Graph::<f64>::eval();
    let x = g.constant(Tensor::from_f64([1, 1], &[0.0]).unwrap()).unwrap();
    let loss = g.bce_with_logits(x, &[1], &[1.0], None).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() <= 1e-12);
}
