//! The segmentation classifier: fixed-prototype baseline, semantic and
//! spatial prototype adaptation, fused decision, and the teacher branch.

mod config;
mod forward;
mod params;

pub use config::{HeadConfig, PeKind, SpatialSoftmaxAxis, TeacherMode};
pub use forward::{
    adapt_semantic, adapt_spatial, batch_semantic_center, class_presence, fused_logits, position_encode,
    semantic_center, sinusoidal_table, spatial_center, ssa_forward, teacher_forward, teacher_guide,
    vanilla_forward, HeadOutput, TeacherGuide,
};
pub use params::{Affine, BoundAffine, BoundPe, BoundPrototypes, PeParams, PrototypeSet};
