//! Two-layer convolutional encoder producing the semantic feature map `S_f`.

use crate::data::SplitMix64;
use crate::error::Result;
use crate::param::{fan_in_uniform, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

impl BoundEncoder {
    pub fn vars(&self) -> [Var; 4] {
        [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(channels: usize, feat_dim: usize, rng: &mut SplitMix64) -> Self {
        Self {
            conv1_w: fan_in_uniform(&[3, 3, channels, feat_dim], 9 * channels, rng),
            conv1_b: Tensor::zeros(&[feat_dim]),
            conv2_w: fan_in_uniform(&[3, 3, feat_dim, feat_dim], 9 * feat_dim, rng),
            conv2_b: Tensor::zeros(&[feat_dim]),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.conv2_b.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundEncoder {
        let v = self.bind_all(tape);
        BoundEncoder {
            conv1_w: v[0],
            conv1_b: v[1],
            conv2_w: v[2],
            conv2_b: v[3],
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("conv1.w", &self.conv1_w);
        f("conv1.b", &self.conv1_b);
        f("conv2.w", &self.conv2_w);
        f("conv2.b", &self.conv2_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("conv1.w", &mut self.conv1_w);
        f("conv1.b", &mut self.conv1_b);
        f("conv2.w", &mut self.conv2_w);
        f("conv2.b", &mut self.conv2_b);
    }
}

/// `conv3x3 → relu → conv3x3`, zero padding, output `[H, W, D]`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, image: Var, enc: &BoundEncoder) -> Result<Var> {
    let hidden = tape.conv3x3(image, enc.conv1_w, enc.conv1_b)?;
    let hidden = tape.relu(hidden);
    tape.conv3x3(hidden, enc.conv2_w, enc.conv2_b)
}
