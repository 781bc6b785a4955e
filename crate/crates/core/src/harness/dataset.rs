use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Vocabulary;
use crate::error::{Error, Result};
use crate::grounding::GroundedSample;
use crate::numerics::{Map2D, Tensor};

use super::render::{
    latent_from_image, random_placement, read_pgm, read_png, render_blob, write_pgm, write_png,
    Placement,
};
use super::world::ConceptSpec;

/// One rendered training image of a concept.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub mask: Map2D,
    /// `None` for samples read back from disk.
    pub placement: Option<Placement>,
}

/// Draws the blob at a random in-frame placement.
pub fn render_concept<R: Rng>(
    spec: &ConceptSpec,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<SceneSample> {
    spec.validate()?;
    let placement = random_placement(spec.shape, spec.size_range, height, width, rng);
    render_at(spec, placement, height, width)
}

pub fn render_at(
    spec: &ConceptSpec,
    placement: Placement,
    height: usize,
    width: usize,
) -> Result<SceneSample> {
    let (image, mask) = render_blob(spec.shape, spec.color, placement, height, width)?;
    Ok(SceneSample {
        image,
        mask,
        placement: Some(placement),
    })
}

pub fn caption(spec: &ConceptSpec) -> String {
    format!("photo of a {}", spec.trigger)
}

/// Converts a rendered image into a grounded training sample. The latent's
/// objectness channel is the binary mask.
pub fn ground(vocab: &Vocabulary, spec: &ConceptSpec, sample: &SceneSample) -> Result<GroundedSample> {
    let tokens = vocab.tokenize(&caption(spec))?;
    let trigger = vocab.id(&spec.trigger)?;
    let x0 = latent_from_image(&sample.image, sample.mask.values())?;
    GroundedSample::new(x0, tokens, trigger, sample.mask.clone())
}

pub fn build_scene_samples<R: Rng>(
    spec: &ConceptSpec,
    count: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Vec<SceneSample>> {
    if count == 0 {
        return Err(Error::Invalid("dataset count must be >= 1".into()));
    }
    (0..count)
        .map(|_| render_concept(spec, height, width, rng))
        .collect()
}

/// `count` grounded samples captioned `photo of a <trigger>`.
pub fn build_scene_dataset<R: Rng>(
    vocab: &Vocabulary,
    spec: &ConceptSpec,
    count: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Vec<GroundedSample>> {
    build_scene_samples(spec, count, height, width, rng)?
        .iter()
        .map(|s| ground(vocab, spec, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub concept: ConceptSpec,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub caption: String,
}

/// Writes `<root>/concepts/<name>/NNN.png`, `NNN.mask.pgm` and `meta`.
pub fn save_dataset(root: &Path, spec: &ConceptSpec, samples: &[SceneSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptySet("dataset has no samples".into()))?;
    let (height, width) = first.mask.dims();
    let dir = root.join("concepts").join(&spec.name);
    fs::create_dir_all(&dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_png(&dir.join(format!("{i:03}.png")), &s.image)?;
        write_pgm(&dir.join(format!("{i:03}.mask.pgm")), &s.mask)?;
    }
    let meta = DatasetMeta {
        concept: spec.clone(),
        count: samples.len(),
        height,
        width,
        caption: caption(spec),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta"), text)?;
    Ok(())
}

/// Reads a concept directory back. Images pass through 8-bit quantization.
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<SceneSample>)> {
    let text = fs::read_to_string(dir.join("meta"))?;
    let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut samples = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let image = read_png(&dir.join(format!("{i:03}.png")))?;
        let mask = read_pgm(&dir.join(format!("{i:03}.mask.pgm")))?;
        let mask = Map2D::from_mask(mask.height(), mask.width(), |y, x| mask.get(y, x) >= 0.5);
        if image.shape() != [meta.height, meta.width, 3] || mask.dims() != (meta.height, meta.width)
        {
            return Err(Error::Format(format!("sample {i:03} has the wrong size")));
        }
        samples.push(SceneSample {
            image,
            mask,
            placement: None,
        });
    }
    Ok((meta, samples))
}
