use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    AdapterPayload, ConceptAdapter, DenoiserConfig, DenoiserParams, InputScaling, Prediction, TokenClass,
    TokenId, Vocabulary, DEFAULT_ADAPTER_SCALE,
};
use crate::error::{Error, Result};
use crate::numerics::{Border, GaussianSpec, Tensor};
use crate::schedule::BetaSchedule;

use super::render::Shape;

/// Latent channels: RGB mapped to `[-1, 1]` plus one objectness channel.
pub const LATENT_CHANNELS: usize = 4;
const FEATURES: usize = 16;
const TEXT_DIM: usize = 8;
const HEADS: usize = 2;
/// Text features carry `d / DESCRIPTOR_DIV` and `kappa / KAPPA_DIV`; the key
/// weights undo the division so features stay well inside tanh's range.
const DESCRIPTOR_DIV: f64 = 4.0;
const KAPPA_DIV: f64 = 32.0;
const OBJ: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Size range in pixels (radius, half side or circumradius).
    pub size_range: (f64, f64),
    pub trigger: String,
    pub category: String,
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Invalid(format!("{}: color outside [0, 1]", self.name)));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Invalid(format!("{}: bad size range", self.name)));
        }
        Ok(())
    }

    /// Latent of a fully covered pixel.
    pub fn descriptor(&self) -> [f64; LATENT_CHANNELS] {
        let c = self.color;
        [2.0 * c[0] - 1.0, 2.0 * c[1] - 1.0, 2.0 * c[2] - 1.0, 1.0]
    }
}

/// Eight built-in concepts; any two differ in shape or color.
pub fn catalog() -> Vec<ConceptSpec> {
    let items: [(&str, Shape, [f64; 3]); 8] = [
        ("red_disc", Shape::Disc, [1.0, 0.0, 0.0]),
        ("blue_square", Shape::Square, [0.0, 0.0, 1.0]),
        ("green_triangle", Shape::Triangle, [0.0, 1.0, 0.0]),
        ("yellow_disc", Shape::Disc, [1.0, 1.0, 0.0]),
        ("magenta_square", Shape::Square, [1.0, 0.0, 1.0]),
        ("cyan_triangle", Shape::Triangle, [0.0, 1.0, 1.0]),
        ("orange_disc", Shape::Disc, [1.0, 0.5, 0.0]),
        ("purple_square", Shape::Square, [0.5, 0.0, 1.0]),
    ];
    items
        .iter()
        .enumerate()
        .map(|(i, (name, shape, color))| ConceptSpec {
            name: name.to_string(),
            shape: *shape,
            color: *color,
            size_range: match shape {
                Shape::Disc => (2.5, 4.0),
                Shape::Square => (2.0, 3.5),
                Shape::Triangle => (3.0, 4.5),
            },
            trigger: format!("<c{i}>"),
            category: shape.name().to_string(),
        })
        .collect()
}

pub fn concept_by_name(name: &str) -> Result<ConceptSpec> {
    catalog()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown concept `{name}`")))
}

/// Knobs of the hand-built world denoiser.
///
/// Every text token carries a latent descriptor `d` and a bias. Both heads
/// share query/key weights so a pixel attends to a token with logit
/// `sharpness * (|z|^2 - |z - d|^2 + bias)` in the metric that weighs the
/// objectness channel by `objectness_weight`, where `z` is the blurred pixel
/// latent. The second head carries `d` as its value, and the output head
/// paints `gain * tanh(sum A d / gain)` as the predicted clean latent. The
/// gray canvas is the zero latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub sharpness: f64,
    /// Cap on the signal-to-noise gain of the attention logits.
    pub snr_cap: f64,
    /// Least gain of the latent in the attention logits, so maps keep some
    /// spatial structure at high noise.
    pub latent_gain_floor: f64,
    /// Weight of objectness against color when tokens are matched to pixels.
    pub objectness_weight: f64,
    pub blur: GaussianSpec,
    pub value_gain: f64,
    /// Objectness of a bare category word such as `disc`.
    pub category_objectness: f64,
    /// Objectness of a color word.
    pub color_objectness: f64,
    pub concept_bias: f64,
    pub category_bias: f64,
    pub color_bias: f64,
    /// Bias of a trigger token nobody has trained yet.
    pub untrained_trigger_bias: f64,
    pub position_std: f64,
    pub seed: u64,
    pub schedule: BetaSchedule,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sharpness: 0.5,
            snr_cap: 50.0,
            latent_gain_floor: 1.0,
            objectness_weight: 4.0,
            blur: GaussianSpec {
                kernel_size: 7,
                sigma: 1.5,
                border: Border::Zero,
            },
            value_gain: 8.0,
            category_objectness: 1.0,
            color_objectness: 1.0,
            concept_bias: -1.0,
            category_bias: 0.0,
            color_bias: 0.0,
            untrained_trigger_bias: -2.0,
            position_std: 0.002,
            seed: 7,
            schedule: BetaSchedule::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::config("world.sharpness", "must be > 0"));
        }
        if !(self.objectness_weight > 0.0 && self.objectness_weight.is_finite()) {
            return Err(Error::config("world.objectness_weight", "must be > 0"));
        }
        if !(self.value_gain > 0.0) {
            return Err(Error::config("world.value_gain", "must be > 0"));
        }
        if !(self.position_std >= 0.0) {
            return Err(Error::config("world.position_std", "must be >= 0"));
        }
        self.blur
            .validate()
            .map_err(|e| Error::config("world.blur", e.to_string()))
    }

    fn kappa(&self, d: &[f64; LATENT_CHANNELS], bias: f64) -> f64 {
        let color: f64 = d[..OBJ].iter().map(|v| v * v).sum();
        -(color + self.objectness_weight * d[OBJ] * d[OBJ]) + bias
    }

    /// Target text feature row of a token with descriptor `d`.
    fn text_row(&self, d: &[f64; LATENT_CHANNELS], bias: f64) -> Result<[f64; TEXT_DIM]> {
        let mut row = [0.0; TEXT_DIM];
        for (r, v) in row.iter_mut().zip(d) {
            *r = v / DESCRIPTOR_DIV;
        }
        row[LATENT_CHANNELS] = self.kappa(d, bias) / KAPPA_DIV;
        if row.iter().any(|v| v.abs() >= 0.999) {
            return Err(Error::Invalid(format!(
                "token descriptor {d:?} with bias {bias} does not fit the text range"
            )));
        }
        Ok(row)
    }

    /// Descriptor and bias of a base-vocabulary word.
    fn word_descriptor(&self, vocab: &Vocabulary, id: TokenId) -> Result<([f64; 4], f64)> {
        let word = vocab.word(id)?;
        Ok(match vocab.class(id) {
            TokenClass::Color => {
                let rgb = color_of(word)
                    .ok_or_else(|| Error::Invalid(format!("no color for `{word}`")))?;
                (
                    [
                        2.0 * rgb[0] - 1.0,
                        2.0 * rgb[1] - 1.0,
                        2.0 * rgb[2] - 1.0,
                        self.color_objectness,
                    ],
                    self.color_bias,
                )
            }
            TokenClass::Category => (
                [0.0, 0.0, 0.0, self.category_objectness],
                self.category_bias,
            ),
            TokenClass::Trigger => ([0.0; 4], self.untrained_trigger_bias),
            TokenClass::Pad | TokenClass::Filler | TokenClass::Reserved => ([0.0; 4], 0.0),
        })
    }
}

pub fn color_of(word: &str) -> Option<[f64; 3]> {
    Some(match word {
        "red" => [1.0, 0.0, 0.0],
        "green" => [0.0, 1.0, 0.0],
        "blue" => [0.0, 0.0, 1.0],
        "yellow" => [1.0, 1.0, 0.0],
        "cyan" => [0.0, 1.0, 1.0],
        "magenta" => [1.0, 0.0, 1.0],
        "orange" => [1.0, 0.5, 0.0],
        "purple" => [0.5, 0.0, 1.0],
        "white" => [1.0, 1.0, 1.0],
        "black" => [0.0, 0.0, 0.0],
        "gray" => [0.5, 0.5, 0.5],
        "pink" => [1.0, 0.6, 0.7],
        _ => return None,
    })
}

/// The denoiser configuration the world uses.
pub fn world_denoiser_config(vocab: &Vocabulary, cfg: &WorldConfig) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: LATENT_CHANNELS,
        feature_dim: FEATURES,
        text_dim: TEXT_DIM,
        heads: HEADS,
        blocks: 1,
        vocab_size: vocab.len(),
        context_len: 12,
        lift_blur: Some(cfg.blur),
        input_scaling: InputScaling::Snr {
            max: cfg.snr_cap,
            floor: cfg.latent_gain_floor,
        },
        prediction: Prediction::Sample,
        schedule: cfg.schedule,
    }
}

/// Builds the hand-set base model of the synthetic world.
pub fn build_world(vocab: &Vocabulary, cfg: &WorldConfig) -> Result<DenoiserParams> {
    cfg.validate()?;
    let config = world_denoiser_config(vocab, cfg);
    let mut p = DenoiserParams::zeros(config)?;
    let dh = p.config.head_dim();
    let d = TEXT_DIM;

    for id in 0..vocab.len() {
        let (desc, bias) = cfg.word_descriptor(vocab, TokenId(id))?;
        let row = cfg.text_row(&desc, bias)?;
        for (j, v) in row.iter().enumerate() {
            p.token_embedding.data_mut()[id * d + j] = v.atanh();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Positions only shift logits, so repeated tokens get distinct maps
    // without painting anything.
    for pos in 0..p.config.context_len {
        p.position_embedding.data_mut()[pos * d + LATENT_CHANNELS] =
            cfg.position_std * normal.sample(&mut rng);
    }
    p.w_mix = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });

    for j in 0..LATENT_CHANNELS {
        p.w_in.set2(j, j, 1.0);
    }
    p.b_in.set2(0, LATENT_CHANNELS, 1.0);

    let qscale = cfg.sharpness * (dh as f64).sqrt();
    for (hi, head) in p.blocks[0].iter_mut().enumerate() {
        for j in 0..=LATENT_CHANNELS {
            head.wq.set2(j, j, qscale);
        }
        for j in 0..LATENT_CHANNELS {
            let w = if j == OBJ { cfg.objectness_weight } else { 1.0 };
            head.wk.set2(j, j, 2.0 * w * DESCRIPTOR_DIV);
        }
        head.wk.set2(LATENT_CHANNELS, LATENT_CHANNELS, KAPPA_DIV);
        if hi == 1 {
            for j in 0..LATENT_CHANNELS {
                head.wv.set2(j, j, DESCRIPTOR_DIV / cfg.value_gain);
            }
        }
    }
    for j in 0..LATENT_CHANNELS {
        p.w_out.set2(dh + j, j, cfg.value_gain);
    }
    p.validate()?;
    Ok(p)
}

/// Embedding-offset adapter that makes the concept's trigger paint it.
pub fn builtin_adapter(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    spec: &ConceptSpec,
    cfg: &WorldConfig,
) -> Result<ConceptAdapter> {
    spec.validate()?;
    let trigger = vocab.id(&spec.trigger)?;
    if vocab.class(trigger) != TokenClass::Trigger {
        return Err(Error::Invalid(format!("`{}` is not a trigger token", spec.trigger)));
    }
    let row = cfg.text_row(&spec.descriptor(), cfg.concept_bias)?;
    let base = params.token_embedding.row(trigger.0);
    let scale = DEFAULT_ADAPTER_SCALE;
    let offset = Tensor::from_fn(&[1, TEXT_DIM], |j| (row[j].atanh() - base[j]) / scale);
    let adapter = ConceptAdapter {
        trigger,
        scale,
        payload: AdapterPayload::EmbeddingOffset(offset),
    };
    adapter.validate(params)?;
    Ok(adapter)
}
