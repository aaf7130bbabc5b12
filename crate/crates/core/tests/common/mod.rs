//! Shared oracles for the integration tests.

#![allow(dead_code)]

use compliant_diffusion::autodiff::{AutodiffError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Input shapes and forward function of one op under test.
pub struct OpCase {
    pub name: &'static str,
    /// Shapes from random dims `(r, c, k)`, each in `1..=4`.
    pub shapes: fn(usize, usize, usize) -> Vec<Vec<usize>>,
    pub forward: fn(&mut Graph, &[Var], u64) -> Result<Var, AutodiffError>,
}

fn rc(r: usize, c: usize, _: usize) -> Vec<Vec<usize>> {
    vec![vec![r, c]]
}

fn rc_rc(r: usize, c: usize, _: usize) -> Vec<Vec<usize>> {
    vec![vec![r, c], vec![r, c]]
}

fn rc_c(r: usize, c: usize, _: usize) -> Vec<Vec<usize>> {
    vec![vec![r, c], vec![c]]
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: |r, c, k| vec![vec![r, k], vec![k, c]], forward: |g, x, _| g.matmul(x[0], x[1]) },
        OpCase { name: "transpose", shapes: rc, forward: |g, x, _| g.transpose(x[0]) },
        OpCase { name: "add", shapes: rc_rc, forward: |g, x, _| g.add(x[0], x[1]) },
        OpCase { name: "sub", shapes: rc_rc, forward: |g, x, _| g.sub(x[0], x[1]) },
        OpCase { name: "mul", shapes: rc_rc, forward: |g, x, _| g.mul(x[0], x[1]) },
        OpCase { name: "add_row", shapes: rc_c, forward: |g, x, _| g.add_row(x[0], x[1]) },
        OpCase { name: "mul_row", shapes: rc_c, forward: |g, x, _| g.mul_row(x[0], x[1]) },
        OpCase { name: "scale", shapes: rc, forward: |g, x, _| g.scale(x[0], -1.7) },
        OpCase { name: "relu", shapes: rc, forward: |g, x, _| g.relu(x[0]) },
        OpCase { name: "gelu", shapes: rc, forward: |g, x, _| g.gelu(x[0]) },
        OpCase { name: "softmax_rows", shapes: rc, forward: |g, x, _| g.softmax(x[0], 1) },
        OpCase { name: "softmax_cols", shapes: rc, forward: |g, x, _| g.softmax(x[0], 0) },
        OpCase { name: "layer_norm", shapes: |r, c, _| vec![vec![r, c + 1]], forward: |g, x, _| g.layer_norm(x[0]) },
        OpCase {
            name: "concat_rows",
            shapes: |r, c, k| vec![vec![r, c], vec![k, c]],
            forward: |g, x, _| g.concat(&[x[0], x[1]], 0),
        },
        OpCase {
            name: "concat_cols",
            shapes: |r, c, k| vec![vec![r, c], vec![r, k]],
            forward: |g, x, _| g.concat(&[x[0], x[1]], 1),
        },
        OpCase {
            name: "slice",
            shapes: |r, c, _| vec![vec![r, c + 2]],
            forward: |g, x, _| {
                let c = g.value(x[0]).cols();
                g.slice(x[0], 1, 1, c - 1)
            },
        },
        OpCase {
            name: "embedding_lookup",
            shapes: |_, c, k| vec![vec![k + 1, c]],
            forward: |g, x, seed| {
                let vocab = g.value(x[0]).rows();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..vocab)).collect();
                g.embedding_lookup(x[0], &ids)
            },
        },
        OpCase { name: "mean", shapes: rc, forward: |g, x, _| g.mean(x[0]) },
        OpCase { name: "sum_sq", shapes: rc, forward: |g, x, _| g.sum_sq(x[0]) },
        OpCase { name: "mse", shapes: rc_rc, forward: |g, x, _| g.mse(x[0], x[1]) },
        OpCase {
            name: "linear",
            shapes: |r, c, k| vec![vec![r, k], vec![k, c], vec![c]],
            forward: |g, x, _| g.linear(x[0], x[1], x[2]),
        },
    ]
}

/// Values bounded away from zero so `relu` is differentiable at every input.
fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss `mean(op(inputs) ⊙ R)` for a fixed random `R`.
fn loss(case: &OpCase, inputs: &[Tensor], probe_seed: u64) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars, probe_seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed ^ 0xABCD);
    let probe = random_tensor(g.value(out).shape(), &mut rng);
    let probe = g.constant(probe);
    let weighted = g.mul(out, probe).unwrap();
    let l = g.mean(weighted).unwrap();
    let mut grads = g.backward(l).unwrap();
    let gs = vars.iter().zip(inputs).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    (g.value(l).item(), gs)
}

/// Largest relative error between the analytic gradient and central
/// differences over all inputs of one random instance.
pub fn gradient_error(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let inputs: Vec<Tensor> = (case.shapes)(r, c, k).iter().map(|s| random_tensor(s, &mut rng)).collect();
    let (_, analytic) = loss(case, &inputs, seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            *n = (loss(case, &plus, seed).0 - loss(case, &minus, seed).0) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.data().iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a.data()).max(norm(&numeric)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}
