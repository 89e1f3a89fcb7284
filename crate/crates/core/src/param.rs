//! Named parameter traversal shared by the optimizer, binding and checkpoints.

use crate::data::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// A fixed, ordered collection of named trainable tensors.
///
/// Both visitors must walk the tensors in the same order; `bind` relies on it.
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Registers every tensor on `tape` as a differentiable leaf, in visit order.
    fn bind_all(&self, tape: &mut Tape<T>) -> Vec<Var> {
        let mut vars = Vec::new();
        self.visit(&mut |_, t| vars.push(tape.param(t.clone())));
        vars
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }
}

/// `uniform(-a, a)` with `a = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.uniform(-a, a)))
}
