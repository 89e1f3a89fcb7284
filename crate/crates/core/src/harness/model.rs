use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::data::{encode, BoundEncoder, EncoderParams, SplitMix64};
use crate::error::{Error, Result};
use crate::head::{
    ssa_forward, vanilla_forward, Affine, BoundPrototypes, HeadConfig, PeKind, PeParams, PrototypeSet,
};
use crate::mask::LabelMask;
use crate::param::Parameters;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Vanilla,
    #[default]
    Ssa,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Vanilla => "vanilla",
            HeadMode::Ssa => "ssa",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(HeadMode::Vanilla),
            "ssa" => Ok(HeadMode::Ssa),
            other => Err(Error::Config(format!("unknown head mode {other:?}; expected vanilla or ssa"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    /// Fixed prototypes only.
    Vanilla { semantic: Tensor<T> },
    /// Adaptive student plus, while training, its teacher.
    Ssa {
        student: PrototypeSet<T>,
        teacher: Option<PrototypeSet<T>>,
    },
}

#[derive(Clone, Copy, Debug)]
pub enum BoundHead {
    Vanilla(Var),
    Ssa {
        student: BoundPrototypes,
        teacher: Option<BoundPrototypes>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub head: BoundHead,
}

/// Encoder plus classifier head, with the geometry it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: HeadConfig,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderParams<T>,
    pub head: Head<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: &HeadConfig, mode: HeadMode, height: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 100);
        let encoder = EncoderParams::init(3, config.feat_dim, &mut rng);
        let head = match mode {
            HeadMode::Vanilla => Head::Vanilla {
                semantic: crate::param::fan_in_uniform(&[config.num_classes, config.feat_dim], config.feat_dim, &mut rng),
            },
            HeadMode::Ssa => {
                let student = PrototypeSet::init(config, height, width, &mut rng);
                let teacher = PrototypeSet::init(config, height, width, &mut rng);
                Head::Ssa {
                    student,
                    teacher: Some(teacher),
                }
            }
        };
        Ok(Self {
            config: config.clone(),
            height,
            width,
            encoder,
            head,
        })
    }

    pub fn mode(&self) -> HeadMode {
        match self.head {
            Head::Vanilla { .. } => HeadMode::Vanilla,
            Head::Ssa { .. } => HeadMode::Ssa,
        }
    }

    pub fn has_teacher(&self) -> bool {
        matches!(self.head, Head::Ssa { teacher: Some(_), .. })
    }

    /// Drops the training-only teacher branch.
    pub fn strip_teacher(&mut self) {
        if let Head::Ssa { teacher, .. } = &mut self.head {
            *teacher = None;
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let encoder = self.encoder.bind(tape);
        let head = match &self.head {
            Head::Vanilla { semantic } => BoundHead::Vanilla(tape.param(semantic.clone())),
            Head::Ssa { student, teacher } => BoundHead::Ssa {
                student: student.bind(tape),
                teacher: teacher.as_ref().map(|t| t.bind(tape)),
            },
        };
        BoundModel { encoder, head }
    }

    /// Student logits used for prediction: `O` for the adaptive head, `M_c` for the baseline.
    pub fn student_logits(&self, tape: &mut Tape<T>, bound: &BoundModel, image: &Tensor<T>) -> Result<Var> {
        let img = tape.constant(image.clone());
        let sf = encode(tape, img, &bound.encoder)?;
        match bound.head {
            BoundHead::Vanilla(semantic) => vanilla_forward(tape, sf, semantic),
            BoundHead::Ssa { student, .. } => Ok(ssa_forward(tape, sf, &student, &self.config)?.fused),
        }
    }

    /// Inference path; never touches the teacher.
    pub fn predict(&self, image: &Tensor<T>) -> Result<LabelMask> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.student_logits(&mut tape, &bound, image)?;
        argmax_mask(tape.value(logits))
    }

    pub fn to_bundle(&self, iteration: usize) -> Result<Bundle<T>> {
        let mut b = Bundle::new();
        for (k, v) in self.config.to_entries() {
            b.set_meta(k, v)?;
        }
        b.set_meta("head_mode", self.mode())?;
        b.set_meta("height", self.height)?;
        b.set_meta("width", self.width)?;
        b.set_meta("iteration", iteration)?;
        let mut err = None;
        self.visit(&mut |name, t| {
            if let Err(e) = b.insert(name, t.clone()) {
                err.get_or_insert(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(b),
        }
    }

    /// Rebuilds a model from a checkpoint bundle. Teacher tensors are optional.
    pub fn from_bundle(b: &Bundle<T>) -> Result<(Self, usize)> {
        let config = HeadConfig::from_entries(|k| b.meta(k))?;
        let meta = |k: &str| b.meta(k).ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")));
        let parse = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| Error::Config(format!("checkpoint {k} is not an integer")))
        };
        let mode: HeadMode = meta("head_mode")?.parse()?;
        let (height, width, iteration) = (parse("height")?, parse("width")?, parse("iteration")?);
        let get = |name: &str| b.require(name).cloned();
        let encoder = EncoderParams {
            conv1_w: get("encoder.conv1.w")?,
            conv1_b: get("encoder.conv1.b")?,
            conv2_w: get("encoder.conv2.w")?,
            conv2_b: get("encoder.conv2.b")?,
        };
        let load_set = |prefix: &str| -> Result<PrototypeSet<T>> {
            let g = |n: &str| get(&format!("{prefix}.{n}"));
            let pe = match config.pe_kind {
                PeKind::Conditional => PeParams::Conditional(g("pe.kernel")?),
                PeKind::Learnable => PeParams::Learnable(g("pe.table")?),
                PeKind::Sinusoidal => PeParams::Sinusoidal,
                PeKind::None => PeParams::None,
            };
            let set = PrototypeSet {
                semantic: g("S")?,
                position: g("P")?,
                phi_s: Affine {
                    weight: g("phi_s.w")?,
                    bias: g("phi_s.b")?,
                },
                phi_p: Affine {
                    weight: g("phi_p.w")?,
                    bias: g("phi_p.b")?,
                },
                pe,
            };
            set.check_shapes()?;
            Ok(set)
        };
        let head = match mode {
            HeadMode::Vanilla => Head::Vanilla { semantic: get("student.S")? },
            HeadMode::Ssa => Head::Ssa {
                student: load_set("student")?,
                teacher: if b.get("teacher.S").is_some() {
                    Some(load_set("teacher")?)
                } else {
                    None
                },
            },
        };
        Ok((
            Self {
                config,
                height,
                width,
                encoder,
                head,
            },
            iteration,
        ))
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&mut |n, t| f(&format!("encoder.{n}"), t));
        match &self.head {
            Head::Vanilla { semantic } => f("student.S", semantic),
            Head::Ssa { student, teacher } => {
                student.visit(&mut |n, t| f(&format!("student.{n}"), t));
                if let Some(teacher) = teacher {
                    teacher.visit(&mut |n, t| f(&format!("teacher.{n}"), t));
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(&mut |n, t| f(&format!("encoder.{n}"), t));
        match &mut self.head {
            Head::Vanilla { semantic } => f("student.S", semantic),
            Head::Ssa { student, teacher } => {
                student.visit_mut(&mut |n, t| f(&format!("student.{n}"), t));
                if let Some(teacher) = teacher {
                    teacher.visit_mut(&mut |n, t| f(&format!("teacher.{n}"), t));
                }
            }
        }
    }
}

impl BoundModel {
    /// Handles in the same order as [`Model`]'s parameter visit.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars().to_vec();
        match &self.head {
            BoundHead::Vanilla(s) => v.push(*s),
            BoundHead::Ssa { student, teacher } => {
                v.extend(prototype_vars(student));
                if let Some(t) = teacher {
                    v.extend(prototype_vars(t));
                }
            }
        }
        v
    }
}

/// Handles of a bound prototype set in visit order.
pub fn prototype_vars(p: &BoundPrototypes) -> Vec<Var> {
    let mut v = vec![
        p.semantic,
        p.position,
        p.phi_s.weight,
        p.phi_s.bias,
        p.phi_p.weight,
        p.phi_p.bias,
    ];
    match p.pe {
        crate::head::BoundPe::Conditional(k) => v.push(k),
        crate::head::BoundPe::Learnable(t) => v.push(t),
        _ => {}
    }
    v
}

/// Per-pixel argmax over the last axis of `[H, W, K]` logits; ties go to the lower class.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMask> {
    let (h, w, k) = match *logits.shape() {
        [h, w, k] => (h, w, k),
        ref other => return Err(Error::Contract(format!("logits must be [H, W, K], got {other:?}"))),
    };
    let labels = logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    LabelMask::new(h, w, labels)
}
