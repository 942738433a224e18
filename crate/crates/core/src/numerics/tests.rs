use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
    let n = shape[0] * shape[1];
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `build` on fresh eval graphs and checks every parameter gradient
/// against central differences.
fn check<F>(params: Vec<Tensor<f64>>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    finite_diff_check(
        |ps, want| {
            let mut g = Graph::eval();
            let vars: Vec<Var> =
                ps.iter().enumerate().map(|(i, p)| g.param(p.clone(), i)).collect::<crate::Result<_>>()?;
            let out = build(&mut g, &vars)?;
            let loss = if g.value(out).shape() == [1, 1] { out } else { g.sum(out)? };
            let v = g.value(loss).item();
            let grads = if want {
                let gr = g.backward(loss)?;
                Some(
                    (0..ps.len())
                        .map(|i| gr.param(i).cloned().unwrap_or_else(|| Tensor::zeros(ps[i].shape())))
                        .collect(),
                )
            } else {
                None
            };
            Ok((v, grads))
        },
        &params,
        1e-5,
    )
    .unwrap()
}

/// Weights the output with fixed random coefficients so every output
/// element contributes a distinct gradient.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.value(out).shape());
    let c = g.constant(w)?;
    let m = g.mul(out, c)?;
    g.sum(m)
}

#[test]
fn forward_basics() {
    let mut g = Graph::<f64>::eval();
    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = g.constant(rand_tensor(&mut rng, [5, 7])).unwrap();
    let i = g.constant(Tensor::identity(7)).unwrap();
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai), g.value(a));

    let x = g.constant(rand_tensor(&mut rng, [20, 13]).map(|v| v * 30.0)).unwrap();
    let sm = g.softmax(x).unwrap();
    for r in 0..20 {
        let s: f64 = g.value(sm).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::eval();
    let x = g.param(Tensor::scalar(3.0), 0).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(0).unwrap().item(), 6.0);
}

#[test]
fn sum_of_matmul_gradient_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a0 = rand_tensor(&mut rng, [3, 4]);
    let b0 = rand_tensor(&mut rng, [4, 5]);
    let mut g = Graph::eval();
    let a = g.param(a0, 0).unwrap();
    let b = g.param(b0.clone(), 1).unwrap();
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    let expected = Tensor::<f64>::full([3, 5], 1.0).matmul(&b0, true).unwrap();
    let got = grads.param(0).unwrap();
    for (x, y) in got.data().iter().zip(expected.data()) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::eval();
    let x = g.param(Tensor::full([2, 2], 1.0), 0).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));
}

#[test]
fn shape_and_rate_errors() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 2])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(g.dropout(a, 1.0).is_err());
    assert!(g.dropout(a, -0.1).is_err());
}

#[test]
fn overflow_is_an_error() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::scalar(1e200)).unwrap();
    assert!(matches!(g.mul(a, a), Err(Error::NonFinite("mul"))));
}

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = vec![rand_tensor(&mut rng, [3, 4]), rand_tensor(&mut rng, [3, 4])];
    let r = check(p.clone(), |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let t = g.tanh(m)?;
        let s = g.sigmoid(v[0])?;
        let q = g.mul(t, s)?;
        let e = g.gelu(q)?;
        let sc = g.scale(e, 1.7)?;
        weighted(g, sc, 11)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    let r = check(p, |g, v| {
        let r = g.relu(v[0])?;
        let m = g.mean(r)?;
        let s = g.sum(v[1])?;
        let m2 = g.mul(m, s)?;
        Ok(m2)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_matmul_and_structure_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = vec![
        rand_tensor(&mut rng, [4, 3]),
        rand_tensor(&mut rng, [3, 5]),
        rand_tensor(&mut rng, [1, 5]),
        rand_tensor(&mut rng, [2, 5]),
    ];
    let r = check(p, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let b = g.add_row(m, v[2])?;
        let t = g.matmul_t(b, v[3])?; // 4x2
        let c = g.concat_cols(&[t, b])?; // 4x7
        let rr = g.concat_rows(&[c, c])?; // 8x7
        let s = g.slice(rr, 1..6, 2..7)?;
        let gr = g.gather_rows(s, &[4, 0, 0, 2])?;
        let sm = g.softmax(gr)?;
        weighted(g, sm, 12)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_layer_norm_and_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = vec![rand_tensor(&mut rng, [6, 4]), rand_tensor(&mut rng, [1, 4]), rand_tensor(&mut rng, [1, 4])];
    let r = check(p, |g, v| {
        let e = g.embedding(v[0], &[1, 5, 1, 3])?;
        let ln = g.layer_norm(e, v[1], v[2], 1e-12)?;
        weighted(g, ln, 13)
    });
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn gradcheck_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = vec![rand_tensor(&mut rng, [2 * 5, 3 * 8])];
    let mask = vec![vec![true, true, true, false, false], vec![true; 5]];
    let r = check(p, |g, v| {
        let o = g.attention(v[0], &mask, 2)?;
        weighted(g, o, 14)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = vec![rand_tensor(&mut rng, [3, 4]).map(|x| x * 5.0)];
    let y = [1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1];
    let r = check(p, |g, v| g.bce_with_logits(v[0], &y, &[1.0, 2.0, 0.5, 1.0], Some(&[1.0, 0.3, 2.0])));
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, [4, 12]);
    let mask = vec![vec![true, true, true, false]];
    let mut g = Graph::eval();
    let v = g.constant(x.clone()).unwrap();
    let o = g.attention(v, &mask, 2).unwrap();
    let (seq, probs) = g.attention_probs(o).unwrap();
    for m in probs.chunks(seq * seq) {
        for row in m.chunks(seq) {
            assert_eq!(row[3], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    // changing the masked key/value leaves real rows bitwise unchanged
    let mut x2 = x.clone();
    for j in 0..12 {
        x2.row_mut(3)[j] = 9.0;
    }
    let mut g2 = Graph::eval();
    let v2 = g2.constant(x2).unwrap();
    let o2 = g2.attention(v2, &mask, 2).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(o).row(r), g2.value(o2).row(r));
    }
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::eval();
    let x = g.constant(rand_tensor(&mut rng, [10, 32]).map(|v| v * 7.0 + 3.0)).unwrap();
    let gamma = g.constant(Tensor::full([1, 32], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros([1, 32])).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for r in 0..10 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn dropout_modes() {
    let x = Tensor::<f64>::full([1, 100_000], 1.0);
    let mut g = Graph::eval();
    let v = g.constant(x.clone()).unwrap();
    let d = g.dropout(v, 0.1).unwrap();
    assert_eq!(g.value(d), &x);

    let mut g = Graph::train(ChaCha8Rng::seed_from_u64(10));
    let v = g.constant(x).unwrap();
    let d = g.dropout(v, 0.1).unwrap();
    let vals = g.value(d).data();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-12));
}

#[test]
fn graph_is_deterministic_under_seed() {
    let run = || {
        let mut g = Graph::<f32>::train(ChaCha8Rng::seed_from_u64(42));
        let v = g.constant(Tensor::full([8, 8], 1.5)).unwrap();
        let d = g.dropout(v, 0.3).unwrap();
        g.value(d).clone()
    };
    assert_eq!(run(), run());
}
