use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::config::{HeadConfig, SpatialSoftmaxAxis, TeacherMode};
use super::params::{BoundAffine, BoundPe, BoundPrototypes};

/// Every intermediate of one classifier branch, as tape handles.
///
/// For the teacher branch `coarse` holds the guidance weights that replaced
/// the coarse mask (the label one-hot, or the student's class probabilities).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub coarse: Var,
    pub fused: Var,
    pub s_center: Var,
    pub p_center: Var,
    pub s_proto: Var,
    pub p_proto: Var,
    pub p_feat: Var,
}

fn feature_dims<T: Scalar>(tape: &Tape<T>, sf: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(sf) {
        [h, w, d] => Ok((h, w, d)),
        ref other => Err(Error::Contract(format!("feature map must be [H, W, D], got {other:?}"))),
    }
}

/// `[H, W, D] ⊗ [K, D]ᵀ → [H, W, K]`: inner product of every pixel with every row.
fn pixel_logits<T: Scalar>(tape: &mut Tape<T>, x: Var, protos: Var) -> Result<Var> {
    let (h, w, d) = feature_dims(tape, x)?;
    let ps = tape.shape(protos).to_vec();
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::shape("pixel logits", &[h, w, d], &ps));
    }
    let flat = tape.reshape(x, &[h * w, d])?;
    let pt = tape.transpose(protos)?;
    let logits = tape.matmul(flat, pt)?;
    tape.reshape(logits, &[h, w, ps[0]])
}

/// Fixed-prototype classifier: `M_c[h,w,k] = ⟨sf[h,w], S[k]⟩`.
pub fn vanilla_forward<T: Scalar>(tape: &mut Tape<T>, sf: Var, semantic: Var) -> Result<Var> {
    pixel_logits(tape, sf, semantic)
}

/// 2-D sine/cosine table: the first half of the channels encodes the row,
/// the second half the column, alternating sin/cos over geometric frequencies.
pub fn sinusoidal_table<T: Scalar>(height: usize, width: usize, dim: usize) -> Tensor<T> {
    let half_y = dim / 2;
    let half_x = dim - half_y;
    let code = |pos: usize, c: usize, n: usize| {
        let i = (c / 2) as f64;
        let omega = 1.0 / 10000f64.powf(2.0 * i / n as f64);
        let a = pos as f64 * omega;
        if c.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    Tensor::from_fn(&[height, width, dim], |idx| {
        let c = idx % dim;
        let w = (idx / dim) % width;
        let h = idx / (dim * width);
        T::lit(if c < half_y {
            code(h, c, half_y)
        } else {
            code(w, c - half_y, half_x)
        })
    })
}

/// Position features `P_f` from semantic features `S_f`.
pub fn position_encode<T: Scalar>(tape: &mut Tape<T>, sf: Var, pe: &BoundPe) -> Result<Var> {
    let (h, w, d) = feature_dims(tape, sf)?;
    match *pe {
        BoundPe::Conditional(kernel) => {
            let conv = tape.depthwise_conv3x3(sf, kernel)?;
            tape.add(conv, sf)
        }
        BoundPe::Sinusoidal => Ok(tape.constant(sinusoidal_table(h, w, d))),
        BoundPe::Learnable(table) => {
            if tape.shape(table) != [h * w, d] {
                return Err(Error::shape("learnable position table", tape.shape(table), &[h * w, d]));
            }
            tape.reshape(table, &[h, w, d])
        }
        BoundPe::None => Ok(tape.constant(Tensor::zeros(&[h, w, d]))),
    }
}

/// Weighted class centers from `[H·W, K]` weights `wts` and `[H, W, D]` features.
/// With `normalize`, each class row is divided by its total weight (plus the guard).
fn weighted_centers<T: Scalar>(tape: &mut Tape<T>, wts: Var, feat: Var, normalize: bool) -> Result<Var> {
    let (h, w, d) = feature_dims(tape, feat)?;
    let flat = tape.reshape(feat, &[h * w, d])?;
    let wt = tape.transpose(wts)?;
    let num = tape.matmul(wt, flat)?;
    if !normalize {
        return Ok(num);
    }
    let mass = tape.sum(wts, &[0])?;
    let mass = tape.add_scalar(mass, T::guard());
    let inv = tape.recip(mass);
    tape.scale_rows(num, inv)
}

fn check_mask_features<T: Scalar>(tape: &Tape<T>, mc: Var, feat: Var) -> Result<(usize, usize, usize)> {
    let (h, w, _) = feature_dims(tape, feat)?;
    match *tape.shape(mc) {
        [mh, mw, k] if mh == h && mw == w => Ok((h, w, k)),
        ref other => Err(Error::shape("coarse mask vs features", other, tape.shape(feat))),
    }
}

/// Semantic domain center: per-class average of `sf` under `softmax_K(mc)`.
pub fn semantic_center<T: Scalar>(tape: &mut Tape<T>, mc: Var, sf: Var, normalize: bool) -> Result<Var> {
    let (h, w, k) = check_mask_features(tape, mc, sf)?;
    let probs = tape.softmax(mc, 2)?;
    let probs = tape.reshape(probs, &[h * w, k])?;
    weighted_centers(tape, probs, sf, normalize)
}

/// Spatial domain center of position features `pf`.
///
/// `Spatial`: per class, softmax of the mask over all positions, then the
/// weighted sum of `pf` (weights already sum to one). `Channel`: the semantic
/// center's per-pixel class weighting applied to `pf`.
pub fn spatial_center<T: Scalar>(
    tape: &mut Tape<T>,
    mc: Var,
    pf: Var,
    axis: SpatialSoftmaxAxis,
    normalize: bool,
) -> Result<Var> {
    let (h, w, k) = check_mask_features(tape, mc, pf)?;
    match axis {
        SpatialSoftmaxAxis::Spatial => {
            let flat = tape.reshape(mc, &[h * w, k])?;
            let attn = tape.softmax(flat, 0)?;
            weighted_centers(tape, attn, pf, false)
        }
        SpatialSoftmaxAxis::Channel => semantic_center(tape, mc, pf, normalize),
    }
}

fn fuse<T: Scalar>(tape: &mut Tape<T>, center: Var, fixed: Var, phi: &BoundAffine) -> Result<Var> {
    if tape.shape(center) != tape.shape(fixed) {
        return Err(Error::shape("prototype fusion", tape.shape(center), tape.shape(fixed)));
    }
    let cat = tape.concat_channel(center, fixed)?;
    tape.linear_1x1(cat, phi.weight, phi.bias)
}

/// `S_p = φ_s(S_c ‖ S)`.
pub fn adapt_semantic<T: Scalar>(tape: &mut Tape<T>, sc: Var, semantic: Var, phi_s: &BoundAffine) -> Result<Var> {
    fuse(tape, sc, semantic, phi_s)
}

/// `P_p = φ_p(P_c ‖ P)`.
pub fn adapt_spatial<T: Scalar>(tape: &mut Tape<T>, pc: Var, position: Var, phi_p: &BoundAffine) -> Result<Var> {
    fuse(tape, pc, position, phi_p)
}

/// `O = (S_f + P_f) ⊗ (S_p + P_p)ᵀ`.
pub fn fused_logits<T: Scalar>(tape: &mut Tape<T>, sf: Var, pf: Var, sp: Var, pp: Var) -> Result<Var> {
    let x = tape.add(sf, pf)?;
    let protos = tape.add(sp, pp)?;
    pixel_logits(tape, x, protos)
}

/// Student branch: coarse mask, both centers, adapted prototypes and the fused decision.
pub fn ssa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    sf: Var,
    protos: &BoundPrototypes,
    cfg: &HeadConfig,
) -> Result<HeadOutput> {
    let coarse = vanilla_forward(tape, sf, protos.semantic)?;
    let p_feat = position_encode(tape, sf, &protos.pe)?;
    let s_center = semantic_center(tape, coarse, sf, cfg.center_normalize)?;
    let p_center = spatial_center(tape, coarse, p_feat, cfg.spatial_softmax_axis, cfg.center_normalize)?;
    let s_proto = adapt_semantic(tape, s_center, protos.semantic, &protos.phi_s)?;
    let p_proto = adapt_spatial(tape, p_center, protos.position, &protos.phi_p)?;
    let fused = fused_logits(tape, sf, p_feat, s_proto, p_proto)?;
    Ok(HeadOutput {
        coarse,
        fused,
        s_center,
        p_center,
        s_proto,
        p_proto,
        p_feat,
    })
}

/// What replaces the coarse mask in the teacher branch.
#[derive(Clone, Copy, Debug)]
pub enum TeacherGuide<'a> {
    Labels(&'a LabelMask),
    /// The student's coarse logits `[H, W, K]`; used detached.
    Student(Var),
}

/// Constant `[H·W, K]` semantic and spatial weights for the teacher.
fn teacher_weights<T: Scalar>(
    tape: &Tape<T>,
    guide: TeacherGuide<'_>,
    h: usize,
    w: usize,
    k: usize,
    cfg: &HeadConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let base: Tensor<T> = match guide {
        TeacherGuide::Labels(mg) => {
            if mg.height() != h || mg.width() != w {
                return Err(Error::shape("teacher labels vs features", &[mg.height(), mg.width()], &[h, w]));
            }
            mg.one_hot(k, cfg.ignore_index)?
        }
        TeacherGuide::Student(mc) => {
            if tape.shape(mc) != [h, w, k] {
                return Err(Error::shape("teacher guidance", tape.shape(mc), &[h, w, k]));
            }
            crate::tensor::softmax_raw(tape.value(mc), 2).reshape(&[h * w, k])?
        }
    };
    let mut mass = vec![T::zero(); k];
    for row in base.data().chunks(k) {
        mass.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let semantic = if cfg.center_normalize {
        Tensor::from_fn(base.shape(), |i| base.data()[i] / (mass[i % k] + T::guard()))
    } else {
        base.clone()
    };
    // Each present class spreads unit mass over its own pixels; absent classes get none.
    let spatial = Tensor::from_fn(base.shape(), |i| {
        let m = mass[i % k];
        if m > T::zero() {
            base.data()[i] / m
        } else {
            T::zero()
        }
    });
    Ok((semantic, spatial))
}

/// Training-only teacher branch: identical wiring to [`ssa_forward`] with the
/// coarse mask replaced by ground-truth (or, in self mode, student) guidance.
pub fn teacher_forward<T: Scalar>(
    tape: &mut Tape<T>,
    sf: Var,
    guide: TeacherGuide<'_>,
    protos: &BoundPrototypes,
    cfg: &HeadConfig,
) -> Result<HeadOutput> {
    let (h, w, _) = feature_dims(tape, sf)?;
    let k = tape.shape(protos.semantic)[0];
    let guide = match guide {
        TeacherGuide::Student(mc) => TeacherGuide::Student(tape.detach(mc)),
        g => g,
    };
    let (sem_w, spa_w) = teacher_weights(tape, guide, h, w, k, cfg)?;
    let coarse = tape.constant(sem_w.reshape(&[h, w, k])?);
    let sem_w = tape.constant(sem_w);
    let spa_w = tape.constant(spa_w);
    let p_feat = position_encode(tape, sf, &protos.pe)?;
    let s_center = weighted_centers(tape, sem_w, sf, false)?;
    let p_center = weighted_centers(tape, spa_w, p_feat, false)?;
    let s_proto = adapt_semantic(tape, s_center, protos.semantic, &protos.phi_s)?;
    let p_proto = adapt_spatial(tape, p_center, protos.position, &protos.phi_p)?;
    let fused = fused_logits(tape, sf, p_feat, s_proto, p_proto)?;
    Ok(HeadOutput {
        coarse,
        fused,
        s_center,
        p_center,
        s_proto,
        p_proto,
        p_feat,
    })
}

/// Teacher guidance mode from a config, given the labels and the student's coarse mask.
pub fn teacher_guide<'a>(cfg: &HeadConfig, labels: &'a LabelMask, student_coarse: Var) -> TeacherGuide<'a> {
    match cfg.teacher_mode {
        TeacherMode::GroundTruth => TeacherGuide::Labels(labels),
        TeacherMode::SelfGuided => TeacherGuide::Student(student_coarse),
    }
}

/// `[K]` indicator of classes present (non-ignored) in `mg`.
pub fn class_presence<T: Scalar>(mg: &LabelMask, classes: usize, ignore: u32) -> Tensor<T> {
    let counts = mg.class_counts(classes, ignore);
    Tensor::from_fn(&[classes], |k| if counts[k] > 0 { T::one() } else { T::zero() })
}

/// Per-class mean of image centers over the images where that class is present;
/// zero rows for classes present nowhere.
pub fn batch_semantic_center<T: Scalar>(centers: &[Tensor<T>], presence: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = centers
        .first()
        .ok_or_else(|| Error::Contract("batch_semantic_center needs a nonempty batch".into()))?;
    if centers.len() != presence.len() {
        return Err(Error::Contract(format!(
            "{} centers but {} presence masks",
            centers.len(),
            presence.len()
        )));
    }
    let shape = first.shape().to_vec();
    let (k, d) = match shape[..] {
        [k, d] => (k, d),
        _ => return Err(Error::Contract(format!("centers must be [K, D], got {shape:?}"))),
    };
    let mut sum = Tensor::<T>::zeros(&shape);
    let mut count = vec![T::zero(); k];
    for (c, p) in centers.iter().zip(presence) {
        if c.shape() != shape.as_slice() {
            return Err(Error::shape("batch_semantic_center", &shape, c.shape()));
        }
        if p.shape() != [k] {
            return Err(Error::shape("batch_semantic_center presence", &[k], p.shape()));
        }
        for row in 0..k {
            let m = p.data()[row];
            if m > T::zero() {
                count[row] += m;
                for j in 0..d {
                    sum.data_mut()[row * d + j] += m * c.data()[row * d + j];
                }
            }
        }
    }
    Ok(Tensor::from_fn(&shape, |i| {
        let n = count[i / d];
        if n > T::zero() {
            sum.data()[i] / n
        } else {
            T::zero()
        }
    }))
}
