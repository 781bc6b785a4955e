//! Synthetic concept world: a hand-built painter denoiser, rendered concept
//! datasets, template-matching presence scores and the scene suite.

pub mod dataset;
pub mod metrics;
pub mod presence;
pub mod render;
pub mod scenario;
pub mod trial;
pub mod world;

pub use dataset::{
    build_scene_dataset, build_scene_samples, caption, ground, load_dataset, render_at,
    render_concept, save_dataset, DatasetMeta, SceneSample,
};
pub use metrics::{
    evaluate_run, score_scene, summarize, RunImage, RunSummary, SceneMetrics,
    DEFAULT_PRESENCE_THRESHOLD,
};
pub use presence::{presence_score, TemplateBank};
pub use render::{image_from_latent, latent_from_image, Placement, Shape, BACKGROUND};
pub use scenario::{run_scenario, scenario_adapters, AdapterSource, ScenarioConfig, ScenarioResult, Variant};
pub use trial::{run_grounding_trial, GroundingTrial, GroundingTrialConfig};
pub use world::{
    build_world, builtin_adapter, catalog, concept_by_name, ConceptSpec, WorldConfig,
    LATENT_CHANNELS,
};
