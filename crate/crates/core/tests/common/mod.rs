#![allow(dead_code)]
pub mod oracles;

use ssa_core::data::SplitMix64;
use ssa_core::{Tape, Tensor, Var};

pub fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative error between the tape gradient of `f` and central
/// differences at `eps`, over every element of every input.
pub fn fd_max_rel_error(inputs: &[Tensor<f64>], eps: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0_f64;
    for (p, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap().clone();
        for i in 0..inputs[p].len() {
            let mut xs = inputs.to_vec();
            xs[p].data_mut()[i] += eps;
            let up = eval(&xs);
            xs[p].data_mut()[i] -= 2.0 * eps;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum with fixed random weights: turns any tensor into a scalar
/// whose gradient exercises every output element.
pub fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = SplitMix64::new(seed);
    let w = random(tape.shape(x), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum_all(p).unwrap()
}
