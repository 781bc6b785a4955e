//! Paired grounding trials: the same adapter training run with and without
//! the attention-grounding losses, compared on held-out renders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Vocabulary;
use crate::error::{Error, Result};
use crate::grounding::{mean_in_mask_mass, train_concept, TrainConfig};

use super::dataset::build_scene_dataset;
use super::world::{build_world, concept_by_name, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingTrialConfig {
    pub concept: String,
    pub train: TrainConfig,
    pub height: usize,
    pub width: usize,
    pub train_images: usize,
    pub eval_images: usize,
    /// Noisings per held-out image.
    pub eval_draws: usize,
    pub eval_timesteps: (usize, usize),
}

impl Default for GroundingTrialConfig {
    fn default() -> Self {
        Self {
            concept: "red_disc".into(),
            train: TrainConfig {
                steps: 150,
                batch: 8,
                learning_rate: 0.02,
                // The default training weights are too weak to beat the
                // timestep noise of the diffusion gradient in this world.
                gamma1: 5.0,
                gamma2: 0.5,
                kind: crate::denoiser::AdapterKind::EmbeddingOffset,
                ..TrainConfig::default()
            },
            height: 16,
            width: 16,
            train_images: 8,
            eval_images: 8,
            eval_draws: 16,
            eval_timesteps: (0, 600),
        }
    }
}

impl GroundingTrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.gamma1 + self.train.gamma2 <= 0.0 {
            return Err(Error::config(
                "trial.train.gamma1",
                "a grounding trial needs gamma1 + gamma2 > 0",
            ));
        }
        for (k, v) in [
            ("trial.height", self.height),
            ("trial.width", self.width),
            ("trial.train_images", self.train_images),
            ("trial.eval_images", self.eval_images),
            ("trial.eval_draws", self.eval_draws),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if self.eval_timesteps.0 >= self.eval_timesteps.1 {
            return Err(Error::config("trial.eval_timesteps", "range is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingTrial {
    pub seed: u64,
    /// Held-out in-mask mass of the trigger map, grounding losses on.
    pub grounded: f64,
    /// Same, with both grounding weights set to zero.
    pub ungrounded: f64,
}

impl GroundingTrial {
    pub fn improved(&self) -> bool {
        self.grounded > self.ungrounded
    }
}

/// Trains twice from the same initialization and data stream, differing only
/// in the grounding weights, and measures both on fresh renders.
pub fn run_grounding_trial(
    world: &WorldConfig,
    cfg: &GroundingTrialConfig,
    seed: u64,
) -> Result<GroundingTrial> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let params = build_world(&vocab, world)?;
    let spec = concept_by_name(&cfg.concept)?;
    let trigger = vocab.id(&spec.trigger)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_set = build_scene_dataset(&vocab, &spec, cfg.train_images, cfg.height, cfg.width, &mut rng)?;
    let eval_set = build_scene_dataset(&vocab, &spec, cfg.eval_images, cfg.height, cfg.width, &mut rng)?;

    let mut on = cfg.train.clone();
    on.seed = seed;
    let off = TrainConfig {
        gamma1: 0.0,
        gamma2: 0.0,
        ..on.clone()
    };
    let mass = |train: &TrainConfig| -> Result<f64> {
        let adapter = train_concept(&params, &train_set, trigger, train)?.adapter;
        mean_in_mask_mass(
            &params,
            Some(&adapter),
            &eval_set,
            cfg.eval_timesteps,
            cfg.eval_draws,
            seed ^ 0x5eed,
        )
    };
    Ok(GroundingTrial {
        seed,
        grounded: mass(&on)?,
        ungrounded: mass(&off)?,
    })
}
