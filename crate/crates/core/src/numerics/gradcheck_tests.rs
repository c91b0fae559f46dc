//! Analytic gradients against central finite differences.

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a small denominator floor, so entries whose true
/// gradient is ~0 are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Builds `sum(f(params) ⊙ weights)` and compares every parameter gradient
/// with central differences.
fn check<F>(seed: u64, inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Vec<Tensor>>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars);
        let shape = g.value(y).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD), &shape, 1.0),
        };
        let wv = g.input(w.clone());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        (value, Some(grads), w)
    };
    let (_, grads, weights) = eval(&inputs, None);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (pi, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[pi].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[pi].data_mut()[e] -= H;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            let numeric = (fp - fm) / (2.0 * H);
            worst = worst.max(rel_err(grads[pi].data()[e], numeric));
        }
    }
    worst
}

fn over_seeds(f: impl Fn(u64) -> f64) {
    for seed in 0..10 {
        let err = f(seed);
        assert!(err < TOL, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = random(&mut rng, &[3, 4], 1.0);
        let b = random(&mut rng, &[4, 2], 1.0);
        check(s, vec![a, b], |g, v| g.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn sum_of_product_gradient_is_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3], 1.0);
    let b = random(&mut rng, &[3, 4], 1.0);
    let mut g = Graph::new();
    let (va, vb) = (g.param(a), g.param(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    // d/dA sum(AB) = 1·Bᵀ: every row equals the row sums of B.
    for i in 0..2 {
        for k in 0..3 {
            let row_sum: f64 = (0..4).map(|j| b.get2(k, j)).sum();
            assert!((grads[0].get2(i, k) - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[8, 3], 1.0);
        let k = random(&mut rng, &[3, 3], 1.0);
        check(s, vec![x, k], |g, v| g.conv1d_depthwise(v[0], v[1], 4).unwrap())
    });
}

#[test]
fn softmax_gradients_each_axis() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[3, 4], 2.0);
        let e0 = check(s, vec![x.clone()], |g, v| g.softmax(v[0], 0).unwrap());
        let e1 = check(s, vec![x], |g, v| g.softmax(v[0], 1).unwrap());
        e0.max(e1)
    });
}

#[test]
fn group_and_layer_norm_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[3, 6], 2.0);
        let gamma = random(&mut rng, &[6], 1.0);
        let beta = random(&mut rng, &[6], 1.0);
        let e1 = check(s, vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.group_norm(v[0], 3, v[1], v[2], NORM_EPS).unwrap()
        });
        let e2 = check(s, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], NORM_EPS).unwrap());
        e1.max(e2)
    });
}

#[test]
fn batch_norm_gradients_both_modes() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[5, 3], 2.0);
        let gamma = random(&mut rng, &[3], 1.0);
        let beta = random(&mut rng, &[3], 1.0);
        let stats = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
            momentum: 0.1,
        };
        let mut worst: f64 = 0.0;
        for mode in [NormMode::Train, NormMode::Eval] {
            let st = stats.clone();
            worst = worst.max(check(s, vec![x.clone(), gamma.clone(), beta.clone()], move |g, v| {
                g.batch_norm(v[0], v[1], v[2], &st, mode, NORM_EPS).unwrap().0
            }));
        }
        worst
    });
}

#[test]
fn pointwise_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[4, 6], 3.0);
        let e1 = check(s, vec![x.clone()], |g, v| g.swish(v[0]).unwrap());
        let e2 = check(s, vec![x.clone()], |g, v| g.glu(v[0]).unwrap());
        let e3 = check(s, vec![x], |g, v| g.mean_pool(v[0], 2).unwrap());
        e1.max(e2).max(e3)
    });
}

#[test]
fn bias_positional_and_scale_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[6, 3], 1.0);
        let b = random(&mut rng, &[3], 1.0);
        let p = random(&mut rng, &[2, 3], 1.0);
        check(s, vec![x, b, p], |g, v| {
            let h = g.add_bias(v[0], v[1]).unwrap();
            let h = g.add_positional(h, v[2], 2).unwrap();
            let h2 = g.scale(h, 0.5).unwrap();
            g.add(h, h2).unwrap()
        })
    });
}

#[test]
fn attention_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let q = random(&mut rng, &[6, 4], 1.0);
        let k = random(&mut rng, &[6, 4], 1.0);
        let v = random(&mut rng, &[6, 4], 1.0);
        check(s, vec![q, k, v], |g, vars| g.attention(vars[0], vars[1], vars[2], 3, 2).unwrap())
    });
}

#[test]
fn cross_entropy_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let logits = random(&mut rng, &[3, 4], 2.0);
        check(s, vec![logits], |g, v| g.cross_entropy(v[0], &[0, 3, 1]).unwrap())
    });
}

#[test]
fn two_layer_network_gradients() {
    over_seeds(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = random(&mut rng, &[4, 3], 1.0);
        let w1 = random(&mut rng, &[3, 5], 1.0);
        let b1 = random(&mut rng, &[5], 0.5);
        let w2 = random(&mut rng, &[5, 2], 1.0);
        let b2 = random(&mut rng, &[2], 0.5);
        check(s, vec![w1, b1, w2, b2], move |g, v| {
            let xi = g.input(x.clone());
            let h = g.linear(xi, v[0], v[1]).unwrap();
            let h = g.swish(h).unwrap();
            let o = g.linear(h, v[2], v[3]).unwrap();
            g.cross_entropy(o, &[0, 1, 1, 0]).unwrap()
        })
    });
}

#[test]
fn sum_gives_all_ones() {
    let mut g = Graph::new();
    let p = g.param(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap());
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads[0], Tensor::full(&[2, 2], 1.0));
}

#[test]
fn backward_contracts() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::zeros(&[3, 2]));
    let s = g.sum(p).unwrap();
    assert!(matches!(g.backward(p), Err(NumericsError::NonScalarLoss(_))));
    let grads = g.backward(s).unwrap();
    assert_eq!(grads[1], Tensor::zeros(&[3, 2]));
    let _ = unused;
    assert!(matches!(g.backward(s), Err(NumericsError::GraphConsumed)));
}
