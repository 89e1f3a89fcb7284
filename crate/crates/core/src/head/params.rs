use crate::data::SplitMix64;
use crate::error::{Error, Result};
use crate::param::{fan_in_uniform, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::config::{HeadConfig, PeKind};

/// 1×1 convolution over channels: `[Din, Dout]` weight and `[Dout]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn init(din: usize, dout: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: fan_in_uniform(&[din, dout], din, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[din, dout]),
            bias: Tensor::zeros(&[dout]),
        }
    }

    /// Fusion map from `[center ‖ fixed]` that returns only the fixed half.
    pub fn select_fixed(d: usize) -> Self {
        Self::stacked_identity(d, d)
    }

    /// Fusion map from `[center ‖ fixed]` that returns only the center half.
    pub fn select_center(d: usize) -> Self {
        Self::stacked_identity(d, 0)
    }

    fn stacked_identity(d: usize, row_offset: usize) -> Self {
        let mut weight = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            weight.set(&[row_offset + i, i], T::one());
        }
        Self {
            weight,
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// Parameters of the position-encoding generator, by kind.
#[derive(Clone, Debug, PartialEq)]
pub enum PeParams<T> {
    /// Depthwise `[3, 3, D]` kernel.
    Conditional(Tensor<T>),
    Sinusoidal,
    /// `[H·W, D]` table; ties the head to one input resolution.
    Learnable(Tensor<T>),
    None,
}

/// Everything one classifier branch learns: fixed prototypes `S`, position
/// basis `P`, the two fusion maps and the position-encoding parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    pub semantic: Tensor<T>,
    pub position: Tensor<T>,
    pub phi_s: Affine<T>,
    pub phi_p: Affine<T>,
    pub pe: PeParams<T>,
}

impl<T: Scalar> PrototypeSet<T> {
    /// Fan-in scaled random init. `height`/`width` only matter for learnable encodings.
    pub fn init(cfg: &HeadConfig, height: usize, width: usize, rng: &mut SplitMix64) -> Self {
        let (k, d) = (cfg.num_classes, cfg.feat_dim);
        let pe = match cfg.pe_kind {
            PeKind::Conditional => PeParams::Conditional(fan_in_uniform(&[3, 3, d], 9, rng)),
            PeKind::Sinusoidal => PeParams::Sinusoidal,
            PeKind::Learnable => PeParams::Learnable(fan_in_uniform(&[height * width, d], d, rng)),
            PeKind::None => PeParams::None,
        };
        Self {
            semantic: fan_in_uniform(&[k, d], d, rng),
            position: fan_in_uniform(&[k, d], d, rng),
            phi_s: Affine::init(2 * d, d, rng),
            phi_p: Affine::init(2 * d, d, rng),
            pe,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.semantic.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.semantic.shape()[1]
    }

    pub fn pe_kind(&self) -> PeKind {
        match self.pe {
            PeParams::Conditional(_) => PeKind::Conditional,
            PeParams::Sinusoidal => PeKind::Sinusoidal,
            PeParams::Learnable(_) => PeKind::Learnable,
            PeParams::None => PeKind::None,
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (k, d) = (self.num_classes(), self.feat_dim());
        let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
            }
        };
        expect("position basis", &self.position, &[k, d])?;
        for (name, phi) in [("phi_s", &self.phi_s), ("phi_p", &self.phi_p)] {
            expect(name, &phi.weight, &[2 * d, d])?;
            expect(name, &phi.bias, &[d])?;
        }
        match &self.pe {
            PeParams::Conditional(kernel) => expect("pe kernel", kernel, &[3, 3, d]),
            PeParams::Learnable(table) if table.rank() != 2 || table.shape()[1] != d => Err(
                Error::Contract(format!("pe table has shape {:?}, expected [H*W, {d}]", table.shape())),
            ),
            _ => Ok(()),
        }
    }

    /// Registers the set on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundPrototypes {
        let vars = self.bind_all(tape);
        self.bind_from(&vars)
    }

    /// Rebuilds the handles from leaves already on a tape, in visit order.
    pub fn bind_from(&self, vars: &[Var]) -> BoundPrototypes {
        let mut vars = vars.iter().copied();
        let mut next = || vars.next().expect("visit order");
        let semantic = next();
        let position = next();
        let phi_s = BoundAffine { weight: next(), bias: next() };
        let phi_p = BoundAffine { weight: next(), bias: next() };
        let pe = match self.pe {
            PeParams::Conditional(_) => BoundPe::Conditional(next()),
            PeParams::Learnable(_) => BoundPe::Learnable(next()),
            PeParams::Sinusoidal => BoundPe::Sinusoidal,
            PeParams::None => BoundPe::None,
        };
        BoundPrototypes { semantic, position, phi_s, phi_p, pe }
    }
}

impl<T: Scalar> Parameters<T> for PrototypeSet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("S", &self.semantic);
        f("P", &self.position);
        f("phi_s.w", &self.phi_s.weight);
        f("phi_s.b", &self.phi_s.bias);
        f("phi_p.w", &self.phi_p.weight);
        f("phi_p.b", &self.phi_p.bias);
        match &self.pe {
            PeParams::Conditional(k) => f("pe.kernel", k),
            PeParams::Learnable(t) => f("pe.table", t),
            PeParams::Sinusoidal | PeParams::None => {}
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("S", &mut self.semantic);
        f("P", &mut self.position);
        f("phi_s.w", &mut self.phi_s.weight);
        f("phi_s.b", &mut self.phi_s.bias);
        f("phi_p.w", &mut self.phi_p.weight);
        f("phi_p.b", &mut self.phi_p.bias);
        match &mut self.pe {
            PeParams::Conditional(k) => f("pe.kernel", k),
            PeParams::Learnable(t) => f("pe.table", t),
            PeParams::Sinusoidal | PeParams::None => {}
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum BoundPe {
    Conditional(Var),
    Sinusoidal,
    Learnable(Var),
    None,
}

/// A [`PrototypeSet`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundPrototypes {
    pub semantic: Var,
    pub position: Var,
    pub phi_s: BoundAffine,
    pub phi_p: BoundAffine,
    pub pe: BoundPe,
}
