use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate_concept_map, extract_trigger_maps, SubPrompt};
use crate::denoiser::{grad_wrt_latent, Branch, ConceptAdapter, DenoiserParams, TokenId};
use crate::error::{Error, Result};
use crate::guidance::{
    inter_loss, lambda_at, objective_registry, overlap_registry, update_latent, ConceptMaps, GuidanceConfig, GuidanceRecord,
    LossValues,
};
use crate::masks::{propose_masks, MaskProposalConfig};
use crate::numerics::{Map2D, Tensor};

use super::merge::{merge_registry, MergeInput};
use super::schedule::{standard_normal, stepper_registry, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub height: usize,
    pub width: usize,
    /// Registered stepper name (`ddim` or `ddpm`).
    pub stepper: String,
    /// Registered merge name (`semantic` or `zspace`).
    pub merge: String,
    /// Mask-gated merging from proposed subject masks (two concepts only).
    pub refinement: bool,
    /// Clean-latent estimates are clamped to `[-c, c]`; 0 disables.
    pub clip_sample: f64,
    pub masks: MaskProposalConfig,
    /// Keep a copy of the latent every k steps; 0 disables.
    pub snapshot_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            stepper: "ddim".into(),
            merge: "semantic".into(),
            refinement: false,
            clip_sample: 1.0,
            masks: MaskProposalConfig::default(),
            snapshot_every: 0,
        }
    }
}

impl SamplerConfig {
    pub fn clip(&self) -> Option<f64> {
        (self.clip_sample > 0.0).then_some(self.clip_sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("sampler.height", "latent extents must be >= 1"));
        }
        let steppers = stepper_registry();
        if !steppers.contains(&self.stepper) {
            return Err(Error::config(
                "sampler.stepper",
                format!("unknown `{}` (available: {})", self.stepper, steppers.names().join(", ")),
            ));
        }
        let merges = merge_registry();
        if !merges.contains(&self.merge) {
            return Err(Error::config(
                "sampler.merge",
                format!("unknown `{}` (available: {})", self.merge, merges.names().join(", ")),
            ));
        }
        if !(self.clip_sample >= 0.0 && self.clip_sample.is_finite()) {
            return Err(Error::config("sampler.clip_sample", "must be finite and >= 0"));
        }
        self.masks.validate()
    }
}

/// One conditional branch; index 0 is the global branch.
#[derive(Debug, Clone)]
pub struct BranchSpec<'a> {
    pub prompt: SubPrompt,
    pub adapter: Option<&'a ConceptAdapter>,
    pub weight: f64,
}

/// Trigger columns of one branch that feed the guidance loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidedConcept {
    pub branch: usize,
    pub triggers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunPlan<'a> {
    pub params: &'a DenoiserParams,
    pub branches: Vec<BranchSpec<'a>>,
    /// Prompt of the unconditional branch (empty by default).
    pub unconditional: Vec<TokenId>,
    pub concepts: Vec<GuidedConcept>,
    /// Registered guidance objective name.
    pub objective: String,
}

/// Test and ablation overrides that bypass config validation.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Fixed step size for every guided step (may be 0).
    pub lambda_override: Option<f64>,
    /// Replaces the plan's branch weights.
    pub weights_override: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub guided: bool,
    pub lambda: Option<f64>,
    /// Loss on the maps of `z_t`, before the update.
    pub pre: Option<LossValues>,
    /// Loss on the maps the merge step sees.
    pub post: LossValues,
    /// Inter overlap of the merge-step concept maps, measured whether or not
    /// the inter term is enabled.
    pub overlap: Option<f64>,
    pub guidance: Vec<GuidanceRecord>,
    /// Noise-prediction norms: unconditional first, then each branch.
    pub eps_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub diagnostics: Vec<String>,
    /// `(step, latent)` copies taken before the step's update.
    pub snapshots: Vec<(usize, Tensor)>,
    /// Aggregated concept maps of the last step.
    pub final_concept_maps: Vec<Map2D>,
    pub final_latent: Tensor,
}

impl RunTrace {
    pub fn guided_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.guided).count()
    }

    /// Measured inter overlap of the merge-step maps at `step`.
    pub fn inter_at(&self, step: usize) -> Option<f64> {
        self.steps.get(step).and_then(|s| s.overlap)
    }

    fn note(&mut self, msg: String) {
        if !self.diagnostics.contains(&msg) {
            log::warn!("{msg}");
            self.diagnostics.push(msg);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Final clean-latent estimate, `h x w x l`.
    pub image: Tensor,
    pub trace: RunTrace,
}

impl RunPlan<'_> {
    fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Invalid("a run needs at least the global branch".into()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if let Some(a) = b.adapter {
                a.validate(self.params)?;
                if !b.prompt.tokens.contains(&a.trigger) {
                    return Err(Error::Invalid(format!(
                        "branch {i}: adapter trigger missing from its prompt"
                    )));
                }
            }
        }
        for c in &self.concepts {
            if c.branch >= self.branches.len() {
                return Err(Error::Invalid(format!("guided branch {} does not exist", c.branch)));
            }
            if c.triggers.is_empty() {
                return Err(Error::EmptySet(format!("trigger set of branch {}", c.branch)));
            }
        }
        Ok(())
    }
}

fn initial_latent(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize) -> Tensor {
    standard_normal(&[h, w, l], rng)
}

/// Also rejects tensors whose norm overflows; past that point every later
/// step is noise.
fn ensure_finite(z: &Tensor, step: usize, what: &str) -> Result<()> {
    if z.is_finite() && z.norm().is_finite() {
        Ok(())
    } else {
        Err(Error::NumericStep {
            step,
            detail: format!("non-finite {what}"),
        })
    }
}

/// Runs the two-stage guided sampling loop described by `plan`.
pub fn execute(
    plan: &RunPlan<'_>,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    guidance.validate()?;
    sampler.validate()?;
    plan.validate()?;
    let params = plan.params;
    let objective = objective_registry().create(&plan.objective)?;
    let stepper = stepper_registry().create(&sampler.stepper)?;
    let merger = merge_registry().create(&sampler.merge)?;
    let reduction = overlap_registry().create(&guidance.overlap)?;
    let schedule = NoiseSchedule::new(guidance.total_steps, &params.config.schedule)?;
    let (h, w, l) = (sampler.height, sampler.width, params.config.latent_channels);
    let weights: Vec<f64> = match &opts.weights_override {
        Some(ws) if ws.len() != plan.branches.len() => {
            return Err(Error::Invalid(format!(
                "{} weights for {} branches",
                ws.len(),
                plan.branches.len()
            )))
        }
        Some(ws) => ws.clone(),
        None => plan.branches.iter().map(|b| b.weight).collect(),
    };
    if sampler.refinement && (plan.concepts.len() != 2 || plan.branches.len() != 3) {
        return Err(Error::config(
            "sampler.refinement",
            "mask refinement is defined for exactly two concepts",
        ));
    }

    let mut trace = RunTrace {
        steps: Vec::with_capacity(guidance.total_steps),
        diagnostics: Vec::new(),
        snapshots: Vec::new(),
        final_concept_maps: Vec::new(),
        final_latent: Tensor::zeros(&[h, w, l]),
    };
    if plan.concepts.len() < 2 && guidance.use_inter_loss {
        trace.note(format!(
            "inter loss undefined for {} concept; guidance is intra-only",
            plan.concepts.len()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = initial_latent(&mut rng, h, w, l);
    let uncond = Branch::new(params, None, &plan.unconditional);
    let branches: Vec<Branch<'_>> = plan
        .branches
        .iter()
        .map(|b| Branch::new(params, b.adapter, &b.prompt.tokens))
        .collect();
    // Branches whose maps the loss reads, each evaluated once per stage 1.
    let mut used: Vec<usize> = plan.concepts.iter().map(|c| c.branch).collect();
    used.sort_unstable();
    used.dedup();
    let guided_branches: Vec<Branch<'_>> = used.iter().map(|&b| branches[b]).collect();

    let total = guidance.total_steps;
    let mut image = None;
    for step in 0..total {
        let t = total - 1 - step;
        let timestep = schedule.timestep(t);
        if sampler.snapshot_every > 0 && step % sampler.snapshot_every == 0 {
            trace.snapshots.push((step, z.clone()));
        }

        let guided = step < guidance.guided_steps;
        let mut record = StepRecord {
            step,
            timestep,
            guided,
            lambda: None,
            pre: None,
            post: LossValues::default(),
            overlap: None,
            guidance: Vec::new(),
            eps_norms: Vec::new(),
        };
        if guided {
            let lambda = match opts.lambda_override {
                Some(l) => l,
                None => lambda_at(step, guidance)?,
            };
            record.lambda = Some(lambda);
            for sub_step in 0..guidance.grad_steps_per_t {
                let mut terms = None;
                let (value, grad) = grad_wrt_latent(&z, timestep, &guided_branches, |g, nodes| {
                    let maps = plan
                        .concepts
                        .iter()
                        .map(|c| {
                            let slot = used.binary_search(&c.branch).expect("used branch");
                            ConceptMaps::record(g, &nodes[slot], &c.triggers, guidance)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let lt = objective.record(g, &maps, guidance)?;
                    terms = Some((lt.values(g), lt.diagnostics));
                    Ok(lt.total)
                })?;
                let (values, diagnostics) = terms.expect("loss recorded");
                debug_assert_eq!(values.total, value);
                for d in diagnostics {
                    trace.note(d);
                }
                let context = format!(
                    "step {step}: loss={:.6e}, inter={:?}, intra={:?}, ae={:?}",
                    values.total, values.inter, values.intra, values.ae
                );
                z = update_latent(&z, &grad, lambda, &context).map_err(|e| match e {
                    Error::NonFinite(d) => Error::NumericStep { step, detail: d },
                    other => other,
                })?;
                ensure_finite(&z, step, "latent after guidance")?;
                if sub_step == 0 {
                    record.pre = Some(values);
                }
                record.guidance.push(GuidanceRecord {
                    step,
                    sub_step,
                    lambda,
                    inter: values.inter,
                    intra: values.intra,
                    ae: values.ae,
                    loss: values.total,
                    grad_norm: grad.norm(),
                });
            }
        }

        // Stage 2: every branch plus the unconditional one on the updated latent.
        let mut all: Vec<&Branch<'_>> = vec![&uncond];
        all.extend(branches.iter());
        let outputs = all
            .par_iter()
            .map(|b| b.forward(&z, timestep))
            .collect::<Result<Vec<_>>>()?;
        for (i, (eps, _)) in outputs.iter().enumerate() {
            ensure_finite(eps, step, &format!("noise prediction of branch {i}"))?;
        }
        record.eps_norms = outputs.iter().map(|(e, _)| e.norm()).collect();
        let token_maps = plan
            .concepts
            .iter()
            .map(|c| {
                let attn = &outputs[c.branch + 1].1;
                extract_trigger_maps(attn, &c.triggers, (attn.height, attn.width))
            })
            .collect::<Result<Vec<_>>>()?;
        let concept_maps = token_maps
            .iter()
            .map(|t| aggregate_concept_map(t, &guidance.gaussian))
            .collect::<Result<Vec<_>>>()?;
        if !token_maps.is_empty() {
            record.post = objective.evaluate(&token_maps, guidance)?;
        }
        if concept_maps.len() >= 2 {
            record.overlap = Some(inter_loss(&concept_maps, reduction.as_ref(), guidance.eps_div)?);
        }

        let masks = if sampler.refinement {
            let proposal = propose_masks(&concept_maps[0], &concept_maps[1], &sampler.masks)?;
            for d in &proposal.diagnostics {
                trace.note(format!("step {step}: {d}"));
            }
            let [m1, m2] = proposal.masks;
            Some(vec![Map2D::filled(h, w, 1.0), m1, m2])
        } else {
            None
        };
        let eps_u = &outputs[0].0;
        let branch_eps: Vec<Tensor> = outputs[1..].iter().map(|(e, _)| e.clone()).collect();
        let input = MergeInput {
            z: &z,
            eps_u,
            branches: &branch_eps,
            weights: &weights,
            masks: masks.as_deref(),
        };
        if t >= 1 {
            let noise: Vec<Tensor> = if stepper.stochastic() {
                (0..merger.noise_draws(branch_eps.len()))
                    .map(|_| standard_normal(&[h, w, l], &mut rng))
                    .collect()
            } else {
                Vec::new()
            };
            z = merger.advance(&input, stepper.as_ref(), &schedule, t, &noise, sampler.clip())?;
            ensure_finite(&z, step, "latent")?;
        } else {
            let x0 = merger.finish(&input, &schedule, sampler.clip())?;
            ensure_finite(&x0, step, "final latent")?;
            image = Some(x0);
            trace.final_concept_maps = concept_maps;
        }
        trace.steps.push(record);
    }
    let image = image.expect("loop ends at t = 0");
    trace.final_latent = image.clone();
    Ok(RunOutput { image, trace })
}
