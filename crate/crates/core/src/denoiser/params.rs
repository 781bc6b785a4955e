use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GaussianSpec, Tensor};
use crate::schedule::BetaSchedule;

/// What the output head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    /// The head output is the noise estimate itself.
    #[default]
    Epsilon,
    /// The head predicts the clean latent; the noise estimate is derived
    /// from it and `z_t` through the training schedule.
    Sample,
}

/// Time-dependent scaling of the feature lift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum InputScaling {
    #[default]
    Identity,
    /// Lift `z_t / sqrt(abar)` and the lift bias, both multiplied by the
    /// signal-to-noise ratio `abar / (1 - abar)` capped at `max`. Attention
    /// logits then grow with the evidence the noisy latent carries. The
    /// latent gain never drops below `floor`.
    Snr { max: f64, floor: f64 },
}

impl InputScaling {
    /// `(latent gain, bias gain)` at cumulative signal level `ab`.
    pub fn gains(&self, ab: f64) -> (f64, f64) {
        match *self {
            InputScaling::Identity => (1.0, 1.0),
            InputScaling::Snr { max, floor } => {
                let snr = (ab / (1.0 - ab)).min(max);
                ((snr / ab.sqrt()).max(floor), snr)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Spatial smoothing applied to `z` before the feature lift; `None`
    /// keeps the lift strictly per-pixel.
    pub lift_blur: Option<GaussianSpec>,
    #[serde(default)]
    pub input_scaling: InputScaling,
    pub prediction: Prediction,
    pub schedule: BetaSchedule,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            feature_dim: 16,
            text_dim: 8,
            heads: 2,
            blocks: 2,
            vocab_size: 64,
            context_len: 12,
            lift_blur: None,
            input_scaling: InputScaling::Identity,
            prediction: Prediction::Epsilon,
            schedule: BetaSchedule::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("latent_channels", self.latent_channels),
            ("feature_dim", self.feature_dim),
            ("text_dim", self.text_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (k, v) in nonzero {
            if v == 0 {
                return Err(Error::config(format!("denoiser.{k}"), "must be >= 1"));
            }
        }
        if self.feature_dim % self.heads != 0 {
            return Err(Error::config(
                "denoiser.heads",
                "feature_dim must be divisible by heads",
            ));
        }
        if let InputScaling::Snr { max, floor } = self.input_scaling {
            if !(max > 0.0 && max.is_finite()) {
                return Err(Error::config(
                    "denoiser.input_scaling.max",
                    "must be finite and > 0",
                ));
            }
            if !(floor >= 0.0 && floor.is_finite()) {
                return Err(Error::config(
                    "denoiser.input_scaling.floor",
                    "must be finite and >= 0",
                ));
            }
        }
        if let Some(g) = &self.lift_blur {
            g.validate()
                .map_err(|e| Error::config("denoiser.lift_blur", e.to_string()))?;
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `feature_dim x head_dim`
    pub wq: Tensor,
    /// `text_dim x head_dim`
    pub wk: Tensor,
    /// `text_dim x head_dim`
    pub wv: Tensor,
}

/// Weights of the text encoder and the cross-attention denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub w_mix: Tensor,
    pub b_mix: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub time_gain: Tensor,
    pub blocks: Vec<Vec<HeadParams>>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    alphas_cumprod: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        Self::build(config, |_| 0.0)
    }

    /// Gaussian-initialized weights scaled by fan-in.
    pub fn random(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Self::build(config, |fan_in| normal.sample(&mut rng) / (fan_in as f64).sqrt())
    }

    fn build(config: DenoiserConfig, mut init: impl FnMut(usize) -> f64) -> Result<Self> {
        config.validate()?;
        let (l, f, d, dh) = (
            config.latent_channels,
            config.feature_dim,
            config.text_dim,
            config.head_dim(),
        );
        let mut m = |r: usize, c: usize, fan: usize| Tensor::from_fn(&[r, c], |_| init(fan));
        let token_embedding = m(config.vocab_size, d, 1);
        let position_embedding = m(config.context_len, d, 4);
        let w_mix = m(d, d, d);
        let b_mix = m(1, d, 16);
        let w_in = m(l, f, l);
        let b_in = m(1, f, 16);
        let time_gain = m(1, f, 16);
        let blocks = (0..config.blocks)
            .map(|_| {
                (0..config.heads)
                    .map(|_| HeadParams {
                        wq: m(f, dh, f),
                        wk: m(d, dh, d),
                        wv: m(d, dh, d),
                    })
                    .collect()
            })
            .collect();
        let w_out = m(f, l, f);
        let b_out = m(1, l, 16);
        let alphas_cumprod = config.schedule.alphas_cumprod();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            w_mix,
            b_mix,
            w_in,
            b_in,
            time_gain,
            blocks,
            w_out,
            b_out,
            alphas_cumprod,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (l, f, d, dh) = (c.latent_channels, c.feature_dim, c.text_dim, c.head_dim());
        let expect = |name: &str, t: &Tensor, shape: [usize; 2]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.ensure_finite(name)
        };
        expect("token_embedding", &self.token_embedding, [c.vocab_size, d])?;
        expect("position_embedding", &self.position_embedding, [c.context_len, d])?;
        expect("w_mix", &self.w_mix, [d, d])?;
        expect("b_mix", &self.b_mix, [1, d])?;
        expect("w_in", &self.w_in, [l, f])?;
        expect("b_in", &self.b_in, [1, f])?;
        expect("time_gain", &self.time_gain, [1, f])?;
        expect("w_out", &self.w_out, [f, l])?;
        expect("b_out", &self.b_out, [1, l])?;
        if self.blocks.len() != c.blocks || self.blocks.iter().any(|b| b.len() != c.heads) {
            return Err(Error::Shape("block/head count mismatch".into()));
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            for (hi, head) in block.iter().enumerate() {
                expect(&format!("b{bi}.h{hi}.wq"), &head.wq, [f, dh])?;
                expect(&format!("b{bi}.h{hi}.wk"), &head.wk, [d, dh])?;
                expect(&format!("b{bi}.h{hi}.wv"), &head.wv, [d, dh])?;
            }
        }
        Ok(())
    }

    /// Sinusoidal embedding of a training-grid timestep, `1 x feature_dim`.
    pub fn time_embedding(&self, t: usize) -> Tensor {
        let f = self.config.feature_dim;
        let half = (f / 2).max(1);
        Tensor::from_fn(&[1, f], |j| {
            let k = j % half;
            let omega = 10000f64.powf(-(k as f64) / half as f64);
            let phase = t as f64 * omega;
            if j < half {
                phase.sin()
            } else {
                phase.cos()
            }
        })
    }
}
