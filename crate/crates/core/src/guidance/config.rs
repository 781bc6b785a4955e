use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::GaussianSpec;

use super::overlap_registry;

/// Branch merge weights for both run modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeWeights {
    /// Global (category-prompt) branch weight in multi-concept runs.
    pub global: f64,
    /// Per-concept branch weight in multi-concept runs.
    pub concept: f64,
    pub compgen_global: f64,
    pub compgen_subject: f64,
}

impl Default for MergeWeights {
    fn default() -> Self {
        Self {
            global: 1.4,
            concept: 5.6,
            compgen_global: 5.6,
            compgen_subject: 1.4,
        }
    }
}

/// Where the subject maps of the compositional-generation loss come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectMapSource {
    /// Each subject's own sub-prompt branch.
    #[default]
    PerSubject,
    /// The subject-word columns of the global prompt's branch.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Weight of the intra-prompt term in the multi-concept loss.
    pub alpha: f64,
    /// Compositional-generation weights of the intra and inter terms.
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub guided_steps: usize,
    pub total_steps: usize,
    pub grad_steps_per_t: usize,
    pub eps_div: f64,
    pub eps_log: f64,
    pub gaussian: GaussianSpec,
    /// Name of the overlap reduction (`aggregate` or `per-pixel`).
    pub overlap: String,
    /// Smooth subject maps before the excite term.
    pub ae_smoothing: bool,
    pub subject_maps: SubjectMapSource,
    pub use_inter_loss: bool,
    pub use_intra_loss: bool,
    pub weights: MergeWeights,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            alpha1: 0.5,
            alpha2: 0.4,
            lambda_start: 20.0,
            lambda_end: 10.0,
            guided_steps: 25,
            total_steps: 30,
            grad_steps_per_t: 1,
            eps_div: 1e-8,
            eps_log: 1e-6,
            gaussian: GaussianSpec::default(),
            overlap: "aggregate".into(),
            ae_smoothing: true,
            subject_maps: SubjectMapSource::PerSubject,
            use_inter_loss: true,
            use_intra_loss: true,
            weights: MergeWeights::default(),
        }
    }
}

fn nonneg(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and >= 0, got {v}")))
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        nonneg("alpha", self.alpha)?;
        nonneg("alpha1", self.alpha1)?;
        nonneg("alpha2", self.alpha2)?;
        if !(self.lambda_end > 0.0 && self.lambda_start >= self.lambda_end)
            || !self.lambda_start.is_finite()
        {
            return Err(Error::config(
                "lambda_end",
                format!(
                    "need lambda_start >= lambda_end > 0, got {} and {}",
                    self.lambda_start, self.lambda_end
                ),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        if self.guided_steps > self.total_steps {
            return Err(Error::config(
                "guided_steps",
                format!("{} exceeds total_steps {}", self.guided_steps, self.total_steps),
            ));
        }
        if self.grad_steps_per_t == 0 {
            return Err(Error::config("grad_steps_per_t", "must be >= 1"));
        }
        if !(self.eps_div > 0.0) {
            return Err(Error::config("eps_div", "must be > 0"));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) {
            return Err(Error::config("eps_log", "must lie in (0, 0.5)"));
        }
        self.gaussian
            .validate()
            .map_err(|e| Error::config("gaussian", e.to_string()))?;
        if !overlap_registry().contains(&self.overlap) {
            return Err(Error::config(
                "overlap",
                format!(
                    "unknown reduction `{}` (available: {})",
                    self.overlap,
                    overlap_registry().names().join(", ")
                ),
            ));
        }
        let w = &self.weights;
        nonneg("weights.global", w.global)?;
        nonneg("weights.concept", w.concept)?;
        nonneg("weights.compgen_global", w.compgen_global)?;
        nonneg("weights.compgen_subject", w.compgen_subject)?;
        Ok(())
    }
}
