//! The run configuration file: one TOML document with a section per module.
//!
//! Every section is optional and falls back to its module's defaults. Unknown
//! keys are rejected, and every error names the key it concerns.

use std::path::PathBuf;

use mc2_core::grounding::TrainConfig;
use mc2_core::guidance::GuidanceConfig;
use mc2_core::harness::{
    concept_by_name, AdapterSource, GroundingTrialConfig, Variant, WorldConfig,
    DEFAULT_PRESENCE_THRESHOLD,
};
use mc2_core::sampler::{PromptTemplate, SamplerConfig};
use mc2_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// A customized concept loaded from an adapter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRef {
    pub path: PathBuf,
    /// Category word that stands in for the concept in the global prompt.
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompgenConfig {
    pub prompt: String,
    pub subjects: Vec<String>,
}

impl Default for CompgenConfig {
    fn default() -> Self {
        Self {
            prompt: "photo of a red disc and a blue square".into(),
            subjects: vec!["red disc".into(), "blue square".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InspectConfig {
    /// Prompt to inspect; empty means the first concept's caption.
    pub prompt: String,
    pub timestep: usize,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            timestep: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub variants: Vec<String>,
    pub presence_threshold: f64,
    /// Step whose inter overlap is reported; defaults to the last guided step.
    pub inter_step: Option<usize>,
    pub adapters: AdapterSource,
    /// Paired grounding trials over the run's seeds.
    pub grounding: bool,
    pub trial: GroundingTrialConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL
                .iter()
                .filter(|v| **v != Variant::NoGrounding)
                .map(|v| v.name().to_string())
                .collect(),
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            inter_step: None,
            adapters: AdapterSource::Builtin,
            grounding: false,
            trial: GroundingTrialConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Concepts of the synthetic world, by catalog name.
    pub concepts: Vec<String>,
    /// Adapter checkpoints; when empty, each concept uses its built-in
    /// adapter.
    pub adapters: Vec<AdapterRef>,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub template: PromptTemplate,
    /// Base model, including its noise schedule.
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub compgen: CompgenConfig,
    pub inspect: InspectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output: PathBuf::from("mc2-out"),
            concepts: vec!["red_disc".into(), "blue_square".into()],
            adapters: Vec::new(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            template: PromptTemplate::default(),
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            compgen: CompgenConfig::default(),
            inspect: InspectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Prefixes a module-level config key with its section, leaving keys that
/// already carry one alone.
fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, msg } if !key.starts_with(&format!("{section}.")) => Error::Config {
            key: format!("{section}.{key}"),
            msg,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.concepts.is_empty() && self.adapters.is_empty() {
            return Err(Error::config("concepts", "at least one concept is required"));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            concept_by_name(c).map_err(|e| Error::config(format!("concepts[{i}]"), e.to_string()))?;
        }
        self.guidance.validate().map_err(|e| in_section("guidance", e))?;
        self.sampler.validate()?;
        self.template.validate()?;
        self.world.validate()?;
        self.train.validate()?;
        if self.dataset.count == 0 {
            return Err(Error::config("dataset.count", "must be >= 1"));
        }
        if self.compgen.subjects.is_empty() {
            return Err(Error::config("compgen.subjects", "at least one subject is required"));
        }
        if self.inspect.timestep >= self.world.schedule.train_steps {
            return Err(Error::config(
                "inspect.timestep",
                format!("must be below {}", self.world.schedule.train_steps),
            ));
        }
        for (i, v) in self.eval.variants.iter().enumerate() {
            Variant::parse(v).map_err(|e| Error::config(format!("eval.variants[{i}]"), e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.eval.presence_threshold) {
            return Err(Error::config("eval.presence_threshold", "must lie in [0, 1]"));
        }
        self.eval.trial.validate()?;
        Ok(())
    }

    /// The fully resolved document, defaults included.
    pub fn dump(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Parses and validates a run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        // toml messages repeat the source excerpt; the first line is enough
        let msg = inner.message().lines().next().unwrap_or_default().to_string();
        Error::config(if path == "." { "<document>".into() } else { path }, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}
