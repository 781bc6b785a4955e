//! Attention-map losses and the latent update step.

mod config;
mod losses;
mod objective;
mod update;

pub use config::{GuidanceConfig, MergeWeights, SubjectMapSource};
pub use losses::{
    ae_loss, ae_node, compgen_loss, inter_loss, inter_node, intra_loss, intra_node, mcg_loss,
    overlap_registry, soft_overlap, Aggregate, OverlapReduction, PerPixel,
};
pub use objective::{
    objective_registry, CompGen, ConceptMaps, GuidanceObjective, LossTerms, LossValues, Mcg,
};
pub use update::{lambda_at, update_latent, GuidanceRecord};
