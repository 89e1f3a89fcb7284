//! Batch objective shared by training, evaluation and gradient checking.

use crate::distill::{total_loss, vanilla_loss, LossBreakdown};
use crate::error::{Error, Result};
use crate::head::{
    adapt_semantic, batch_semantic_center, class_presence, ssa_forward, teacher_forward, teacher_guide,
    vanilla_forward, HeadConfig, HeadOutput, TeacherMode,
};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::model::BoundHead;

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean of the per-image objectives.
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Student logits per image (`O`, or `M_c` for the baseline).
    pub logits: Vec<Var>,
}

/// Objective over a batch of encoded feature maps.
///
/// In adaptive mode the semantic-distillation target is the teacher's
/// adaptation of the batch-averaged teacher semantic center.
pub fn head_objective<T: Scalar>(
    tape: &mut Tape<T>,
    head: &BoundHead,
    items: &[(Var, &LabelMask)],
    cfg: &HeadConfig,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut totals = Vec::with_capacity(items.len());
    let mut parts = Vec::with_capacity(items.len());
    let mut logits = Vec::with_capacity(items.len());
    match *head {
        BoundHead::Vanilla(semantic) => {
            for &(sf, labels) in items {
                let coarse = vanilla_forward(tape, sf, semantic)?;
                let terms = vanilla_loss(tape, coarse, labels, cfg)?;
                totals.push(terms.total);
                parts.push(terms.breakdown);
                logits.push(coarse);
            }
        }
        BoundHead::Ssa { student, teacher } => {
            let teacher = teacher.ok_or_else(|| Error::Contract("adaptive objective needs the teacher".into()))?;
            let k = tape.shape(student.semantic)[0];
            let mut outs: Vec<(HeadOutput, HeadOutput)> = Vec::with_capacity(items.len());
            let mut centers = Vec::with_capacity(items.len());
            let mut presence = Vec::with_capacity(items.len());
            for &(sf, labels) in items {
                let s = ssa_forward(tape, sf, &student, cfg)?;
                let t = teacher_forward(tape, sf, teacher_guide(cfg, labels, s.coarse), &teacher, cfg)?;
                centers.push(tape.value(t.s_center).clone());
                presence.push(match cfg.teacher_mode {
                    TeacherMode::GroundTruth => class_presence::<T>(labels, k, cfg.ignore_index),
                    TeacherMode::SelfGuided => Tensor::ones(&[k]),
                });
                outs.push((s, t));
            }
            let batch_center = batch_semantic_center(&centers, &presence)?;
            let batch_center = tape.freeze(batch_center);
            let batch_sp = adapt_semantic(tape, batch_center, teacher.semantic, &teacher.phi_s)?;
            for ((s, mut t), &(_, labels)) in outs.into_iter().zip(items) {
                t.s_proto = batch_sp;
                let terms = total_loss(tape, &s, &t, labels, cfg)?;
                totals.push(terms.total);
                parts.push(terms.breakdown);
                logits.push(s.fused);
            }
        }
    }
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, T::one() / T::lit(items.len() as f64));
    Ok(BatchLoss {
        total,
        breakdown: LossBreakdown::mean(&parts),
        logits,
    })
}
