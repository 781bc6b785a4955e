use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConceptAdapter, DenoiserParams, Vocabulary};
use crate::error::{Error, Result};
use crate::grounding::{train_concept, TrainConfig};
use crate::guidance::GuidanceConfig;
use crate::numerics::Tensor;
use crate::sampler::{run_mc2, ConceptRef, PromptTemplate, RunOptions, SamplerConfig};

use super::dataset::build_scene_dataset;
use super::metrics::{evaluate_run, RunImage, RunSummary, SceneMetrics, DEFAULT_PRESENCE_THRESHOLD};
use super::render::image_from_latent;
use super::world::{build_world, builtin_adapter, concept_by_name, ConceptSpec, WorldConfig};

/// Ablation toggles of the scene suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// No guided steps: the plain composed-score baseline.
    NoGuidance,
    NoInter,
    NoIntra,
    /// Adapters trained without the grounding losses.
    NoGrounding,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGuidance,
        Variant::NoInter,
        Variant::NoIntra,
        Variant::NoGrounding,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGuidance => "no-guidance",
            Variant::NoInter => "no-inter",
            Variant::NoIntra => "no-intra",
            Variant::NoGrounding => "no-grounding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "variant".into(),
                name: s.into(),
                available: Self::ALL.iter().map(|v| v.name().to_string()).collect(),
            })
    }

    pub fn apply(&self, guidance: &mut GuidanceConfig, train: Option<&mut TrainConfig>) {
        match self {
            Variant::Full => {}
            Variant::NoGuidance => guidance.guided_steps = 0,
            Variant::NoInter => guidance.use_inter_loss = false,
            Variant::NoIntra => guidance.use_intra_loss = false,
            Variant::NoGrounding => {
                if let Some(t) = train {
                    t.gamma1 = 0.0;
                    t.gamma2 = 0.0;
                }
            }
        }
    }
}

/// Where the concept adapters of a scene run come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum AdapterSource {
    /// Hand-set embedding offsets of the world.
    Builtin,
    /// Trained per concept on `images` rendered samples.
    Trained { train: TrainConfig, images: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub concepts: Vec<String>,
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub template: PromptTemplate,
    pub presence_threshold: f64,
    /// Step whose inter overlap is reported; defaults to the last guided
    /// step of the unablated run so every variant is read at the same time.
    pub inter_step: Option<usize>,
    pub adapters: AdapterSource,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            concepts: vec!["red_disc".into(), "blue_square".into()],
            seeds: (0..20).collect(),
            world: WorldConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            template: PromptTemplate::default(),
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            inter_step: None,
            adapters: AdapterSource::Builtin,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::config("scenario.concepts", "must name at least one concept"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("scenario.seeds", "must list at least one seed"));
        }
        for c in &self.concepts {
            concept_by_name(c).map_err(|e| Error::config("scenario.concepts", e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.presence_threshold) {
            return Err(Error::config("scenario.presence_threshold", "must lie in [0, 1]"));
        }
        self.world.validate()?;
        self.guidance.validate()?;
        self.sampler.validate()?;
        self.template.validate()?;
        if let AdapterSource::Trained { train, images } = &self.adapters {
            train.validate()?;
            if *images == 0 {
                return Err(Error::config("scenario.adapters.images", "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<ConceptSpec>> {
        self.concepts.iter().map(|c| concept_by_name(c)).collect()
    }

    pub fn resolved_inter_step(&self) -> usize {
        self.inter_step
            .unwrap_or_else(|| self.guidance.guided_steps.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub variant: Variant,
    pub scenes: Vec<SceneMetrics>,
    pub summary: RunSummary,
    /// Final RGB images in seed order.
    pub images: Vec<Tensor>,
}

/// Adapters for `specs` as `source` describes them.
pub fn scenario_adapters(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    specs: &[ConceptSpec],
    world: &WorldConfig,
    source: &AdapterSource,
    height: usize,
    width: usize,
) -> Result<Vec<ConceptAdapter>> {
    match source {
        AdapterSource::Builtin => specs
            .iter()
            .map(|s| builtin_adapter(params, vocab, s, world))
            .collect(),
        AdapterSource::Trained { train, images } => specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(k as u64));
                let data = build_scene_dataset(vocab, s, *images, height, width, &mut rng)?;
                let trigger = vocab.id(&s.trigger)?;
                Ok(train_concept(params, &data, trigger, train)?.adapter)
            })
            .collect(),
    }
}

/// Runs every seed of the scene suite under `variant` and scores the images.
pub fn run_scenario(cfg: &ScenarioConfig, variant: Variant) -> Result<ScenarioResult> {
    cfg.validate()?;
    let specs = cfg.specs()?;
    let vocab = Vocabulary::standard();
    let params = build_world(&vocab, &cfg.world)?;
    let inter_step = cfg.resolved_inter_step();

    let mut guidance = cfg.guidance.clone();
    let mut source = cfg.adapters.clone();
    match &mut source {
        AdapterSource::Trained { train, .. } => variant.apply(&mut guidance, Some(train)),
        AdapterSource::Builtin => {
            if variant == Variant::NoGrounding {
                return Err(Error::config(
                    "scenario.adapters",
                    "the no-grounding variant needs trained adapters",
                ));
            }
            variant.apply(&mut guidance, None)
        }
    }
    let (h, w) = (cfg.sampler.height, cfg.sampler.width);
    let adapters = scenario_adapters(&params, &vocab, &specs, &cfg.world, &source, h, w)?;
    let concepts: Vec<ConceptRef<'_>> = adapters
        .iter()
        .zip(&specs)
        .map(|(a, s)| ConceptRef {
            adapter: a,
            category: &s.category,
        })
        .collect();

    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let out = run_mc2(
                &params,
                &vocab,
                &concepts,
                &cfg.template,
                &guidance,
                &cfg.sampler,
                seed,
                &RunOptions::default(),
            )?;
            Ok(RunImage {
                seed,
                image: image_from_latent(&out.image)?,
                final_inter: out.trace.inter_at(inter_step),
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (scenes, summary) = evaluate_run(&runs, &specs, cfg.presence_threshold)?;
    Ok(ScenarioResult {
        variant,
        scenes,
        summary,
        images: runs.into_iter().map(|r| r.image).collect(),
    })
}
