//! Training objectives: segmentation losses and online multi-domain distillation.

mod boundary;
mod losses;

pub use boundary::{band_radius, boundary_band, boundary_seeds, BoundaryMasks};
pub use losses::{
    ce_loss, dice_loss, lambda_mask, response_distill, response_pixel_weights, seg_loss, semantic_distill,
    spatial_distill, teacher_entropy, total_loss, vanilla_loss, LossBreakdown, LossTerms, DICE_SMOOTH,
};
