use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::GuidanceConfig;

/// Step size for guided step `k`, linear from `lambda_start` to `lambda_end`.
pub fn lambda_at(k: usize, cfg: &GuidanceConfig) -> Result<f64> {
    let kg = cfg.guided_steps;
    if k >= kg {
        return Err(Error::Invalid(format!(
            "guided step {k} outside [0, {kg})"
        )));
    }
    if kg == 1 {
        return Ok(cfg.lambda_start);
    }
    Ok(cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * k as f64 / (kg - 1) as f64)
}

/// `z - lambda * grad`. `context` names the loss terms in the error when
/// the gradient is not finite.
pub fn update_latent(z: &Tensor, grad: &Tensor, lambda: f64, context: &str) -> Result<Tensor> {
    if z.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs gradient {:?}",
            z.shape(),
            grad.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("guidance gradient ({context})")));
    }
    z.zip_with(grad, |a, g| a - lambda * g)
}

/// One line of the per-step guidance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub step: usize,
    pub sub_step: usize,
    pub lambda: f64,
    pub inter: Option<f64>,
    pub intra: Option<f64>,
    pub ae: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}
