//! The guided diffusion loop: schedules, steppers, branch merging and the
//! multi-concept / compositional entry points.

mod entry;
mod merge;
mod prompts;
mod run;
mod schedule;

pub use entry::{run_composed_baseline, run_compgen, run_mc2, sample_plain};
pub use merge::{
    masked_merge, merge_registry, semantic_merge, EpsSpace, LatentSpace, MergeInput, MergeStrategy,
};
pub use prompts::{compgen_plan, mc2_plan, ConceptRef, PromptTemplate};
pub use run::{
    execute, BranchSpec, GuidedConcept, RunOptions, RunOutput, RunPlan, RunTrace, SamplerConfig,
    StepRecord,
};
pub use schedule::{
    ddim_step, ddpm_posterior, ddpm_step, predict_x0, standard_normal, stepper_registry, Ddim,
    Ddpm, NoiseSchedule, Stepper,
};
