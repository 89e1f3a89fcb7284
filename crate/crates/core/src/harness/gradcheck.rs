//! Central finite-difference gradient checking for the classifier heads.

use std::fmt;

use serde::Serialize;

use crate::data::SplitMix64;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, PrototypeSet};
use crate::mask::LabelMask;
use crate::param::Parameters;
use crate::tensor::{Tape, Tensor};

use super::model::{BoundHead, Head, HeadMode};
use super::objective::head_objective;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 4×4, K=3, D=4.
    Small,
    /// 8×8, K=4, D=8.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected small or full"))),
        }
    }
}

/// A head evaluated directly on a trainable feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFixture {
    pub config: HeadConfig,
    pub features: Tensor<f64>,
    pub labels: LabelMask,
    pub head: Head<f64>,
}

impl HeadFixture {
    /// Random features and labels; every class appears at least once.
    pub fn random(config: &HeadConfig, mode: HeadMode, height: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.num_classes, config.feat_dim);
        let mut rng = SplitMix64::derive(seed, 300);
        let features = Tensor::from_fn(&[height, width, d], |_| rng.normal());
        let mut labels = LabelMask::from_fn(height, width, |_, _| rng.below(k) as u32);
        for c in 0..k.min(height * width) {
            labels.set(c / width, c % width, c as u32);
        }
        let head = match mode {
            HeadMode::Vanilla => Head::Vanilla {
                semantic: Tensor::from_fn(&[k, d], |_| rng.uniform(-0.5, 0.5)),
            },
            HeadMode::Ssa => Head::Ssa {
                student: PrototypeSet::init(config, height, width, &mut rng),
                teacher: Some(PrototypeSet::init(config, height, width, &mut rng)),
            },
        };
        Ok(Self {
            config: config.clone(),
            features,
            labels,
            head,
        })
    }

    pub fn preset(preset: Preset, mode: HeadMode) -> Result<Self> {
        let (side, k, d) = match preset {
            Preset::Small => (4, 3, 4),
            Preset::Full => (8, 4, 8),
        };
        let cfg = HeadConfig::new(k, d);
        Self::random(&cfg, mode, side, side, 7)
    }

    /// Objective value and (optionally) analytic gradients in visit order.
    ///
    /// With `frozen` set, stop-gradient targets are replayed from those values.
    fn evaluate(&self, frozen: Option<&[Tensor<f64>]>) -> Result<(f64, Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
        let mut tape = match frozen {
            Some(f) => Tape::with_frozen(f.to_vec()),
            None => Tape::new(),
        };
        let vars = self.bind_all(&mut tape);
        let head = match &self.head {
            Head::Vanilla { .. } => BoundHead::Vanilla(vars[1]),
            Head::Ssa { student, teacher } => {
                let n = student_len(student);
                BoundHead::Ssa {
                    student: student.bind_from(&vars[1..1 + n]),
                    teacher: teacher.as_ref().map(|t| t.bind_from(&vars[1 + n..])),
                }
            }
        };
        let loss = head_objective(&mut tape, &head, &[(vars[0], &self.labels)], &self.config)?;
        let value = tape.value(loss.total).item();
        if frozen.is_some() {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let mut g = tape.backward(loss.total)?;
        let grads = vars.iter().map(|&v| g.take(v).expect("leaf gradient")).collect();
        Ok((value, grads, tape.frozen_values()))
    }
}

fn student_len(p: &PrototypeSet<f64>) -> usize {
    let mut n = 0;
    p.visit(&mut |_, _| n += 1);
    n
}

impl Parameters<f64> for HeadFixture {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        f("features", &self.features);
        match &self.head {
            Head::Vanilla { semantic } => f("student.S", semantic),
            Head::Ssa { student, teacher } => {
                student.visit(&mut |n, t| f(&format!("student.{n}"), t));
                if let Some(t) = teacher {
                    t.visit(&mut |n, x| f(&format!("teacher.{n}"), x));
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        f("features", &mut self.features);
        match &mut self.head {
            Head::Vanilla { semantic } => f("student.S", semantic),
            Head::Ssa { student, teacher } => {
                student.visit_mut(&mut |n, t| f(&format!("student.{n}"), t));
                if let Some(t) = teacher {
                    t.visit_mut(&mut |n, x| f(&format!("teacher.{n}"), x));
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    /// Coordinates of the worst element.
    pub worst_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<20} {:>6} elems  max_rel={:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
                t.name,
                t.shape.iter().product::<usize>(),
                t.max_rel_error,
                t.worst_index,
                t.analytic,
                t.numeric
            )?;
        }
        write!(
            f,
            "loss={:.10} eps={:e} tol={:e} max_rel={:.3e} {}",
            self.loss,
            self.eps,
            self.tol,
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &n) in idx.iter_mut().zip(shape).rev() {
        *slot = i % n;
        i /= n;
    }
    idx
}

pub fn grad_check(fixture: &HeadFixture, eps: f64, tol: f64) -> Result<GradCheckReport> {
    grad_check_with(fixture, eps, tol, |_, _| {})
}

/// As [`grad_check`], with `corrupt` applied to each analytic gradient before
/// comparison (used to test the checker itself).
pub fn grad_check_with(
    fixture: &HeadFixture,
    eps: f64,
    tol: f64,
    corrupt: impl Fn(&str, &mut Tensor<f64>),
) -> Result<GradCheckReport> {
    // Detached teacher targets are held at their unperturbed values, matching
    // what the analytic gradient differentiates.
    let (loss, mut analytic, frozen) = fixture.evaluate(None)?;
    let names = fixture.param_names();
    for (n, g) in names.iter().zip(analytic.iter_mut()) {
        corrupt(n, g);
    }
    let mut probe = fixture.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (p, name) in names.iter().enumerate() {
        let shape = analytic[p].shape().to_vec();
        let mut best = (0.0_f64, 0usize, 0.0, 0.0);
        for i in 0..analytic[p].len() {
            let orig = nth_param(&probe, p).data()[i];
            let mut at = |x: f64| -> Result<f64> {
                set_element(&mut probe, p, i, x);
                Ok(probe.evaluate(Some(&frozen))?.0)
            };
            let up = at(orig + eps)?;
            let down = at(orig - eps)?;
            set_element(&mut probe, p, i, orig);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let r = rel_error(a, numeric);
            if r > best.0 || r.is_nan() {
                best = (r, i, a, numeric);
            }
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            worst_index: unravel(best.1, &shape),
            shape,
            max_rel_error: best.0,
            analytic: best.2,
            numeric: best.3,
        });
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    Ok(GradCheckReport { eps, tol, loss, tensors })
}

fn nth_param(f: &HeadFixture, p: usize) -> Tensor<f64> {
    let mut out = None;
    let mut j = 0;
    f.visit(&mut |_, t| {
        if j == p {
            out = Some(t.clone());
        }
        j += 1;
    });
    out.expect("parameter index in range")
}

fn set_element(f: &mut HeadFixture, p: usize, i: usize, x: f64) {
    let mut j = 0;
    f.visit_mut(&mut |_, t| {
        if j == p {
            t.data_mut()[i] = x;
        }
        j += 1;
    });
}
