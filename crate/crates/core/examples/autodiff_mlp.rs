//! Fits a two-layer MLP to sin(x) with the tape autodiff and Adam.
//!
//! `cargo run --release --example autodiff_mlp`

use compliant_diffusion::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hidden = 32;
    let mut init = |r: usize, c: usize, s: f64| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect()).unwrap()
    };
    let mut params =
        vec![init(1, hidden, 1.0), Tensor::zeros(&[hidden]), init(hidden, 1, 0.3), Tensor::zeros(&[1])];
    let mut adam = AdamState::new(&params);
    let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };

    let xs: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    for step in 0..=2000 {
        let mut g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let x = g.constant(Tensor::matrix(xs.len(), 1, xs.clone()).unwrap());
        let y = g.constant(Tensor::matrix(ys.len(), 1, ys.clone()).unwrap());
        let h = g.linear(x, vars[0], vars[1]).unwrap();
        let h = g.gelu(h).unwrap();
        let out = g.linear(h, vars[2], vars[3]).unwrap();
        let loss = g.mse(out, y).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
        if step % 400 == 0 {
            println!("step {step:4}  mse {:.6}", g.value(loss).item());
        }
        adam_step(&mut params, &grads, &mut adam, &cfg);
    }
}
