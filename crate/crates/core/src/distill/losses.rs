use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadOutput};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_raw, matmul_raw, softmax_raw, Tape, Tensor, Var};

use super::boundary::{boundary_band, BoundaryMasks};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

fn logits_dims<T: Scalar>(tape: &Tape<T>, o: Var, mg: &LabelMask) -> Result<(usize, usize, usize)> {
    match *tape.shape(o) {
        [h, w, k] if h == mg.height() && w == mg.width() => Ok((h, w, k)),
        ref other => Err(Error::shape("logits vs labels", other, &[mg.height(), mg.width()])),
    }
}

/// Mean of `−log softmax(o)[label]` over non-ignored pixels. All-ignored maps give 0.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, o: Var, mg: &LabelMask, ignore: u32) -> Result<Var> {
    let (h, w, k) = logits_dims(tape, o, mg)?;
    let onehot = mg.one_hot::<T>(k, ignore)?;
    let n = mg.labels().iter().filter(|&&l| l != ignore).count();
    if n == 0 {
        log::warn!("ce_loss: every pixel is ignored; loss defined as 0");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let scale = -T::one() / T::lit(n as f64);
    let weights = tape.constant(onehot.reshape(&[h, w, k])?.map(|v| v * scale));
    let logp = tape.log_softmax(o, 2)?;
    let picked = tape.mul(logp, weights)?;
    tape.sum_all(picked)
}

/// Soft dice on class probabilities, averaged over classes present in `mg`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, o: Var, mg: &LabelMask, ignore: u32) -> Result<Var> {
    let (h, w, k) = logits_dims(tape, o, mg)?;
    let onehot = mg.one_hot::<T>(k, ignore)?;
    let counts = mg.class_counts(k, ignore);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let valid = Tensor::from_fn(&[h * w, k], |i| {
        if mg.labels()[i / k] == ignore {
            T::zero()
        } else {
            T::one()
        }
    });
    let smooth = T::lit(DICE_SMOOTH);
    let gsum = Tensor::from_fn(&[k], |c| T::lit(counts[c] as f64) + smooth);
    let presence = Tensor::from_fn(&[k], |c| {
        if counts[c] > 0 {
            T::one() / T::lit(present as f64)
        } else {
            T::zero()
        }
    });

    let probs = tape.softmax(o, 2)?;
    let probs = tape.reshape(probs, &[h * w, k])?;
    let g = tape.constant(onehot);
    let inter = tape.mul(probs, g)?;
    let inter = tape.sum(inter, &[0])?;
    let num = tape.scale(inter, T::lit(2.0));
    let num = tape.add_scalar(num, smooth);
    let valid = tape.constant(valid);
    let pv = tape.mul(probs, valid)?;
    let psum = tape.sum(pv, &[0])?;
    let gsum = tape.constant(gsum);
    let den = tape.add(psum, gsum)?;
    let ratio = tape.div(num, den)?;
    let presence = tape.constant(presence);
    let mean_ratio = tape.mul(ratio, presence)?;
    let mean_ratio = tape.sum_all(mean_ratio)?;
    let neg = tape.neg(mean_ratio);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Per-pixel weights `c_i` of the boundary- and entropy-aware response loss,
/// or `None` when every class/region term is degenerate.
///
/// Term `(k, region)` has weights `M^i·H^i / Σ_i M^i·H^i` for region mask `M`
/// (`B_k` or `B̄_k`); terms with denominator below the guard are skipped and
/// the surviving terms are averaged.
pub fn response_pixel_weights<T: Scalar>(entropy: &[T], masks: &BoundaryMasks<T>) -> Option<Vec<T>> {
    let hw = entropy.len();
    let k = masks.num_classes();
    let mut coeff = vec![T::zero(); hw];
    let mut terms = 0usize;
    for region in [&masks.boundary, &masks.interior] {
        for class in 0..k {
            let m = &region.data()[class * hw..(class + 1) * hw];
            let den: T = m.iter().zip(entropy).map(|(&a, &b)| a * b).sum();
            if den < T::guard() {
                continue;
            }
            terms += 1;
            for ((c, &mi), &hi) in coeff.iter_mut().zip(m).zip(entropy) {
                *c += mi * hi / den;
            }
        }
    }
    if terms == 0 {
        return None;
    }
    let n = T::lit(terms as f64);
    coeff.iter_mut().for_each(|c| *c /= n);
    Some(coeff)
}

/// Per-pixel entropy of `softmax(o_hat)` over channels.
pub fn teacher_entropy<T: Scalar>(o_hat: &Tensor<T>) -> Vec<T> {
    let k = *o_hat.shape().last().unwrap();
    let q = softmax_raw(o_hat, o_hat.rank() - 1);
    let lq = log_softmax_raw(o_hat, o_hat.rank() - 1);
    q.data()
        .chunks(k)
        .zip(lq.data().chunks(k))
        .map(|(qr, lr)| -qr.iter().zip(lr).map(|(&a, &b)| a * b).sum::<T>())
        .collect()
}

/// Boundary- and entropy-aware response distillation of student logits `o`
/// toward the (detached) teacher logits `o_hat`.
pub fn response_distill<T: Scalar>(tape: &mut Tape<T>, o: Var, o_hat: Var, masks: &BoundaryMasks<T>) -> Result<Var> {
    if tape.shape(o) != tape.shape(o_hat) {
        return Err(Error::shape("response_distill", tape.shape(o), tape.shape(o_hat)));
    }
    let (h, w, k) = match *tape.shape(o) {
        [h, w, k] => (h, w, k),
        ref other => return Err(Error::Contract(format!("logits must be [H, W, K], got {other:?}"))),
    };
    if masks.semantic.shape() != [k, h, w] {
        return Err(Error::shape("response_distill masks", masks.semantic.shape(), &[k, h, w]));
    }
    let target = tape.value(o_hat).clone();
    let entropy = teacher_entropy(&target);
    let Some(coeff) = response_pixel_weights(&entropy, masks) else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    let q = softmax_raw(&target, 2);
    let weights = Tensor::from_fn(q.shape(), |i| -coeff[i / k] * q.data()[i]);
    let weights = tape.constant(weights);
    let logp = tape.log_softmax(o, 2)?;
    let prod = tape.mul(logp, weights)?;
    tape.sum_all(prod)
}

/// Zeroes the diagonal and every negative entry of a square matrix.
pub fn lambda_mask<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let k = m.shape()[0];
    Tensor::from_fn(m.shape(), |i| {
        let v = m.data()[i];
        if i / k == i % k || v < T::zero() {
            T::zero()
        } else {
            v
        }
    })
}

fn check_protos<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    match (tape.shape(a), tape.shape(b)) {
        (&[k, d], sb) if sb == [k, d] => Ok((k, d)),
        (sa, sb) => Err(Error::shape(op, sa, sb)),
    }
}

/// Penalises class pairs that are more similar in the student's prototype
/// relation matrix than in the teacher's.
pub fn semantic_distill<T: Scalar>(tape: &mut Tape<T>, sp: Var, sp_hat: Var) -> Result<Var> {
    let (k, _) = check_protos(tape, sp, sp_hat, "semantic_distill")?;
    let teacher = tape.value(sp_hat);
    let teacher_rel = softmax_raw(&matmul_raw(teacher, &teacher.transposed()?), 1);
    let teacher_rel = tape.constant(teacher_rel);
    let off_diag = tape.constant(Tensor::from_fn(&[k, k], |i| {
        if i / k == i % k {
            T::zero()
        } else {
            T::one()
        }
    }));
    let spt = tape.transpose(sp)?;
    let sim = tape.matmul(sp, spt)?;
    let rel = tape.softmax(sim, 1)?;
    let diff = tape.sub(rel, teacher_rel)?;
    let pos = tape.relu(diff);
    let masked = tape.mul(pos, off_diag)?;
    let total = tape.sum_all(masked)?;
    Ok(tape.scale(total, T::one() / T::lit(k as f64)))
}

/// `−(1/K)·Σ ψ(P_p)·log ψ(P̂_p)` over rows, with the teacher detached.
pub fn spatial_distill<T: Scalar>(tape: &mut Tape<T>, pp: Var, pp_hat: Var) -> Result<Var> {
    let (k, _) = check_protos(tape, pp, pp_hat, "spatial_distill")?;
    let log_target = log_softmax_raw(tape.value(pp_hat), 1);
    let log_target = tape.constant(log_target);
    let s = tape.softmax(pp, 1)?;
    let prod = tape.mul(s, log_target)?;
    let total = tape.sum_all(prod)?;
    Ok(tape.scale(total, -T::one() / T::lit(k as f64)))
}

/// The five loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_g: f64,
    pub l_rd: f64,
    pub l_sd: f64,
    pub l_pd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(l_c: f64, l_g: f64, l_rd: f64, l_sd: f64, l_pd: f64, cfg: &HeadConfig) -> Self {
        Self {
            l_c,
            l_g,
            l_rd,
            l_sd,
            l_pd,
            total: l_c + l_g + cfg.lambda_r * l_rd + cfg.lambda_s * l_sd + cfg.lambda_p * l_pd,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_g, self.l_rd, self.l_sd, self.l_pd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Componentwise mean; the total is averaged too, which keeps it consistent.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            l_c: sum(|b| b.l_c),
            l_g: sum(|b| b.l_g),
            l_rd: sum(|b| b.l_rd),
            l_sd: sum(|b| b.l_sd),
            l_pd: sum(|b| b.l_pd),
            total: sum(|b| b.total),
        }
    }

    /// Text record, one `key=value` per line.
    pub fn to_record(&self) -> String {
        format!(
            "l_c={}\nl_g={}\nl_rd={}\nl_sd={}\nl_pd={}\ntotal={}\n",
            self.l_c, self.l_g, self.l_rd, self.l_sd, self.l_pd, self.total
        )
    }
}

/// Loss handle on the tape plus the reported components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn item<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// `L_ce + L_dice` on one set of logits.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, o: Var, mg: &LabelMask, ignore: u32) -> Result<Var> {
    let ce = ce_loss(tape, o, mg, ignore)?;
    let dice = dice_loss(tape, o, mg, ignore)?;
    tape.add(ce, dice)
}

/// Full training objective for one image.
///
/// Teacher tensors are detached wherever they are targets; the teacher's own
/// segmentation loss keeps its gradient path.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &HeadOutput,
    teacher: &HeadOutput,
    mg: &LabelMask,
    cfg: &HeadConfig,
) -> Result<LossTerms> {
    let k = *tape.shape(student.fused).last().unwrap();
    let masks = boundary_band::<T>(mg, k, cfg.ignore_index, cfg.boundary_edge_size);
    let l_c = seg_loss(tape, student.fused, mg, cfg.ignore_index)?;
    let l_g = seg_loss(tape, teacher.fused, mg, cfg.ignore_index)?;
    let o_hat = tape.detach(teacher.fused);
    let l_rd = response_distill(tape, student.fused, o_hat, &masks)?;
    let sp_hat = tape.detach(teacher.s_proto);
    let l_sd = semantic_distill(tape, student.s_proto, sp_hat)?;
    let pp_hat = tape.detach(teacher.p_proto);
    let l_pd = spatial_distill(tape, student.p_proto, pp_hat)?;

    let mut total = tape.add(l_c, l_g)?;
    for (term, lambda) in [(l_rd, cfg.lambda_r), (l_sd, cfg.lambda_s), (l_pd, cfg.lambda_p)] {
        let weighted = tape.scale(term, T::lit(lambda));
        total = tape.add(total, weighted)?;
    }
    let breakdown = LossBreakdown::from_components(
        item(tape, l_c),
        item(tape, l_g),
        item(tape, l_rd),
        item(tape, l_sd),
        item(tape, l_pd),
        cfg,
    );
    Ok(LossTerms { total, breakdown })
}

/// Objective of the fixed-prototype baseline: segmentation loss on `M_c` only.
pub fn vanilla_loss<T: Scalar>(tape: &mut Tape<T>, coarse: Var, mg: &LabelMask, cfg: &HeadConfig) -> Result<LossTerms> {
    let l_c = seg_loss(tape, coarse, mg, cfg.ignore_index)?;
    let breakdown = LossBreakdown::from_components(item(tape, l_c), 0.0, 0.0, 0.0, 0.0, cfg);
    Ok(LossTerms { total: l_c, breakdown })
}
