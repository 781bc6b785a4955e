//! Adapter checkpoint files: a JSON document carrying the adapter kind,
//! trigger word, scale and payload tensors as base64-encoded MCT1 blobs.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mct1, Tensor};

use super::adapter::{AdaptedMatrix, AdapterKind, AdapterPayload, ConceptAdapter, FullDelta, LowRankFactor};
use super::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: u32,
    kind: AdapterKind,
    trigger: String,
    scale: f64,
    tensors: Vec<NamedTensor>,
}

fn named(name: String, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name,
        data: STANDARD.encode(mct1::encode(t)),
    }
}

pub fn to_json(adapter: &ConceptAdapter, vocab: &Vocabulary) -> Result<String> {
    let tensors = match &adapter.payload {
        AdapterPayload::EmbeddingOffset(t) => vec![named("offset".into(), t)],
        AdapterPayload::LowRank(fs) => fs
            .iter()
            .flat_map(|f| {
                [
                    named(format!("{}.a", f.target.name()), &f.down),
                    named(format!("{}.b", f.target.name()), &f.up),
                ]
            })
            .collect(),
        AdapterPayload::FullDelta(ds) => ds
            .iter()
            .map(|d| named(format!("{}.delta", d.target.name()), &d.delta))
            .collect(),
    };
    let doc = Document {
        format: FORMAT_VERSION,
        kind: adapter.kind(),
        trigger: vocab.word(adapter.trigger)?.to_string(),
        scale: adapter.scale,
        tensors,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<ConceptAdapter> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported adapter format {} (expected {FORMAT_VERSION})",
            doc.format
        )));
    }
    let trigger = vocab.id(&doc.trigger)?;
    let mut decoded = Vec::with_capacity(doc.tensors.len());
    for nt in doc.tensors {
        let bytes = STANDARD
            .decode(nt.data.as_bytes())
            .map_err(|e| Error::Format(format!("tensor {}: {e}", nt.name)))?;
        decoded.push((nt.name, mct1::decode(&bytes)?));
    }
    let split = |name: &str, suffix: &str| -> Result<AdaptedMatrix> {
        let stem = name
            .strip_suffix(suffix)
            .ok_or_else(|| Error::Format(format!("unexpected tensor name {name}")))?;
        AdaptedMatrix::parse(stem)
    };
    let payload = match doc.kind {
        AdapterKind::EmbeddingOffset => match decoded.as_slice() {
            [(name, t)] if name == "offset" => AdapterPayload::EmbeddingOffset(t.clone()),
            _ => return Err(Error::Format("embedding-offset needs one `offset` tensor".into())),
        },
        AdapterKind::LowRank => {
            if decoded.len() % 2 != 0 {
                return Err(Error::Format("low-rank tensors must come in a/b pairs".into()));
            }
            let mut factors = Vec::new();
            for pair in decoded.chunks(2) {
                let target = split(&pair[0].0, ".a")?;
                if split(&pair[1].0, ".b")? != target {
                    return Err(Error::Format(format!("unpaired factor {}", pair[1].0)));
                }
                factors.push(LowRankFactor {
                    target,
                    down: pair[0].1.clone(),
                    up: pair[1].1.clone(),
                });
            }
            AdapterPayload::LowRank(factors)
        }
        AdapterKind::FullDelta => AdapterPayload::FullDelta(
            decoded
                .into_iter()
                .map(|(name, delta)| {
                    Ok(FullDelta {
                        target: split(&name, ".delta")?,
                        delta,
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(ConceptAdapter {
        trigger,
        scale: doc.scale,
        payload,
    })
}

pub fn save(path: &Path, adapter: &ConceptAdapter, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, to_json(adapter, vocab)?)?;
    Ok(())
}

pub fn load(path: &Path, vocab: &Vocabulary) -> Result<ConceptAdapter> {
    from_json(&std::fs::read_to_string(path)?, vocab)
}
