//! Attention-loss guidance: smoothing, the subject-neglect loss, the box
//! layout energy, and the latent update with its timestep window and
//! iterative refinement.

mod config;
mod loss;
mod update;

pub use config::{
    box_to_patches, validate_box, BBox, GuidanceConfig, LayoutEntry, LayoutSpec, Milestone,
};
pub use loss::{
    gaussian_kernel, layout_energy, semantic_loss, smooth_map, total_loss, LayoutEnergy,
    SemanticLoss, TotalLoss,
};
pub use update::{
    alpha_t, guidance_active, guidance_step, latent_update, read_trace, refine_latent, write_trace,
    LossReadout, RefineReport, TraceRecord,
};
