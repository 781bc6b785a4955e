use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Branch, ConceptAdapter, DenoiserParams, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::numerics::Tensor;

use super::merge::semantic_merge;
use super::prompts::{compgen_plan, mc2_plan, ConceptRef, PromptTemplate};
use super::run::{execute, RunOptions, RunOutput, RunPlan, SamplerConfig};
use super::schedule::{predict_x0, standard_normal, stepper_registry, NoiseSchedule};

/// Multi-concept sampling with per-step guidance.
#[allow(clippy::too_many_arguments)]
pub fn run_mc2(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    concepts: &[ConceptRef<'_>],
    template: &PromptTemplate,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let plan = mc2_plan(params, vocab, concepts, template, guidance)?;
    execute(&plan, guidance, sampler, seed, opts)
}

/// Adapter-free compositional generation with the excite-style objective.
#[allow(clippy::too_many_arguments)]
pub fn run_compgen(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    prompt: &str,
    subjects: &[String],
    template: &PromptTemplate,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let plan = compgen_plan(params, vocab, prompt, subjects, template, guidance)?;
    execute(&plan, guidance, sampler, seed, opts)
}

fn plain_loop(
    sampler: &SamplerConfig,
    total_steps: usize,
    params: &DenoiserParams,
    seed: u64,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let stepper = stepper_registry().create(&sampler.stepper)?;
    let schedule = NoiseSchedule::new(total_steps, &params.config.schedule)?;
    let shape = [sampler.height, sampler.width, params.config.latent_channels];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = standard_normal(&shape, &mut rng);
    for t in (0..total_steps).rev() {
        let eps = predict(&z, schedule.timestep(t))?;
        if t == 0 {
            return predict_x0(&z, &eps, 0, &schedule, sampler.clip());
        }
        let noise = stepper
            .stochastic()
            .then(|| standard_normal(&shape, &mut rng));
        z = stepper.step(&z, &eps, t, &schedule, noise.as_ref(), sampler.clip())?;
    }
    Err(Error::Invalid("sampling needs at least one step".into()))
}

/// Single-model sampling from one prompt, no merging and no guidance.
pub fn sample_plain(
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
    tokens: &[TokenId],
    total_steps: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let branch = Branch::new(params, adapter, tokens);
    plain_loop(sampler, total_steps, params, seed, |z, t| Ok(branch.forward(z, t)?.0))
}

/// Composed-score sampling: every step merges the plan's branches around
/// the unconditional prediction, with no latent guidance.
pub fn run_composed_baseline(
    plan: &RunPlan<'_>,
    total_steps: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    if sampler.merge != "semantic" || sampler.refinement {
        return Err(Error::Invalid(
            "the composed baseline merges in noise space without masks".into(),
        ));
    }
    let uncond = Branch::new(plan.params, None, &plan.unconditional);
    let branches: Vec<Branch<'_>> = plan
        .branches
        .iter()
        .map(|b| Branch::new(plan.params, b.adapter, &b.prompt.tokens))
        .collect();
    let weights: Vec<f64> = plan.branches.iter().map(|b| b.weight).collect();
    plain_loop(sampler, total_steps, plan.params, seed, |z, t| {
        let eps_u = uncond.forward(z, t)?.0;
        let eps = branches
            .iter()
            .map(|b| Ok(b.forward(z, t)?.0))
            .collect::<Result<Vec<_>>>()?;
        semantic_merge(&eps_u, &eps, &weights)
    })
}
