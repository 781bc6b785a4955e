use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::params::{DenoiserConfig, DenoiserParams};
use super::vocab::TokenId;

pub const DEFAULT_ADAPTER_SCALE: f64 = 0.7;
pub const LOW_RANK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    EmbeddingOffset,
    LowRank,
    FullDelta,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [
        AdapterKind::EmbeddingOffset,
        AdapterKind::LowRank,
        AdapterKind::FullDelta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::EmbeddingOffset => "embedding-offset",
            AdapterKind::LowRank => "low-rank",
            AdapterKind::FullDelta => "full-delta",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown adapter kind `{s}`")))
    }
}

/// A weight matrix an adapter may modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptedMatrix {
    Mix,
    Query { block: usize, head: usize },
    Key { block: usize, head: usize },
    Value { block: usize, head: usize },
}

impl AdaptedMatrix {
    /// Every adaptable matrix of a model, in a fixed order.
    pub fn all(config: &DenoiserConfig) -> Vec<AdaptedMatrix> {
        let mut out = vec![AdaptedMatrix::Mix];
        for block in 0..config.blocks {
            for head in 0..config.heads {
                out.push(AdaptedMatrix::Query { block, head });
                out.push(AdaptedMatrix::Key { block, head });
                out.push(AdaptedMatrix::Value { block, head });
            }
        }
        out
    }

    pub fn base<'a>(&self, params: &'a DenoiserParams) -> Result<&'a Tensor> {
        let head = |block: usize, head: usize| {
            params
                .blocks
                .get(block)
                .and_then(|b| b.get(head))
                .ok_or_else(|| Error::Invalid(format!("no block {block} head {head}")))
        };
        Ok(match *self {
            AdaptedMatrix::Mix => &params.w_mix,
            AdaptedMatrix::Query { block, head: h } => &head(block, h)?.wq,
            AdaptedMatrix::Key { block, head: h } => &head(block, h)?.wk,
            AdaptedMatrix::Value { block, head: h } => &head(block, h)?.wv,
        })
    }

    pub fn name(&self) -> String {
        match self {
            AdaptedMatrix::Mix => "mix".into(),
            AdaptedMatrix::Query { block, head } => format!("b{block}.h{head}.q"),
            AdaptedMatrix::Key { block, head } => format!("b{block}.h{head}.k"),
            AdaptedMatrix::Value { block, head } => format!("b{block}.h{head}.v"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "mix" {
            return Ok(AdaptedMatrix::Mix);
        }
        let bad = || Error::Format(format!("bad adapted matrix name `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let block = parts[0].strip_prefix('b').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let head = parts[1].strip_prefix('h').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        match parts[2] {
            "q" => Ok(AdaptedMatrix::Query { block, head }),
            "k" => Ok(AdaptedMatrix::Key { block, head }),
            "v" => Ok(AdaptedMatrix::Value { block, head }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub target: AdaptedMatrix,
    /// `in x rank`
    pub down: Tensor,
    /// `rank x out`
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullDelta {
    pub target: AdaptedMatrix,
    pub delta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterPayload {
    /// `1 x text_dim` offset added to the trigger token's embedding.
    EmbeddingOffset(Tensor),
    LowRank(Vec<LowRankFactor>),
    FullDelta(Vec<FullDelta>),
}

/// A single-concept customization: a parameter delta bound to a trigger token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAdapter {
    pub trigger: TokenId,
    pub scale: f64,
    pub payload: AdapterPayload,
}

impl ConceptAdapter {
    pub fn kind(&self) -> AdapterKind {
        match self.payload {
            AdapterPayload::EmbeddingOffset(_) => AdapterKind::EmbeddingOffset,
            AdapterPayload::LowRank(_) => AdapterKind::LowRank,
            AdapterPayload::FullDelta(_) => AdapterKind::FullDelta,
        }
    }

    /// Adapter whose payload is identically zero.
    pub fn zero(kind: AdapterKind, trigger: TokenId, params: &DenoiserParams) -> Result<Self> {
        let payload = match kind {
            AdapterKind::EmbeddingOffset => {
                AdapterPayload::EmbeddingOffset(Tensor::zeros(&[1, params.config.text_dim]))
            }
            AdapterKind::LowRank => AdapterPayload::LowRank(
                AdaptedMatrix::all(&params.config)
                    .into_iter()
                    .map(|target| {
                        let base = target.base(params)?;
                        Ok(LowRankFactor {
                            target,
                            down: Tensor::zeros(&[base.rows(), LOW_RANK]),
                            up: Tensor::zeros(&[LOW_RANK, base.cols()]),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            AdapterKind::FullDelta => AdapterPayload::FullDelta(
                AdaptedMatrix::all(&params.config)
                    .into_iter()
                    .map(|target| {
                        let base = target.base(params)?;
                        Ok(FullDelta {
                            target,
                            delta: Tensor::zeros(base.shape()),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            trigger,
            scale: DEFAULT_ADAPTER_SCALE,
            payload,
        })
    }

    /// Training initialization: zero effect, but low-rank `down` factors are
    /// random so the `up` factors receive gradient.
    pub fn init_for_training<R: Rng>(
        kind: AdapterKind,
        trigger: TokenId,
        params: &DenoiserParams,
        rng: &mut R,
    ) -> Result<Self> {
        let mut a = Self::zero(kind, trigger, params)?;
        if let AdapterPayload::LowRank(factors) = &mut a.payload {
            for f in factors.iter_mut() {
                let fan = f.down.rows() as f64;
                for v in f.down.data_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = n / fan.sqrt();
                }
            }
        }
        Ok(a)
    }

    pub fn validate(&self, params: &DenoiserParams) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 2.0) {
            return Err(Error::Invalid(format!(
                "adapter scale must lie in (0, 2], got {}",
                self.scale
            )));
        }
        if self.trigger.0 >= params.config.vocab_size {
            return Err(Error::UnknownTokenId(self.trigger.0));
        }
        let shape_err = |what: String| Err(Error::Shape(format!("adapter payload {what}")));
        match &self.payload {
            AdapterPayload::EmbeddingOffset(t) => {
                if t.shape() != [1, params.config.text_dim] {
                    return shape_err(format!("offset {:?}", t.shape()));
                }
                t.ensure_finite("adapter offset")?;
            }
            AdapterPayload::LowRank(factors) => {
                for f in factors {
                    let base = f.target.base(params)?;
                    if f.down.rows() != base.rows()
                        || f.up.cols() != base.cols()
                        || f.down.cols() != f.up.rows()
                    {
                        return shape_err(format!("low-rank factor for {}", f.target.name()));
                    }
                    f.down.ensure_finite("adapter factor")?;
                    f.up.ensure_finite("adapter factor")?;
                }
            }
            AdapterPayload::FullDelta(deltas) => {
                for d in deltas {
                    if d.delta.shape() != d.target.base(params)?.shape() {
                        return shape_err(format!("delta for {}", d.target.name()));
                    }
                    d.delta.ensure_finite("adapter delta")?;
                }
            }
        }
        Ok(())
    }

    /// Flat view of every trainable tensor, in a stable order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match &self.payload {
            AdapterPayload::EmbeddingOffset(t) => vec![t],
            AdapterPayload::LowRank(fs) => fs.iter().flat_map(|f| [&f.down, &f.up]).collect(),
            AdapterPayload::FullDelta(ds) => ds.iter().map(|d| &d.delta).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.payload {
            AdapterPayload::EmbeddingOffset(t) => vec![t],
            AdapterPayload::LowRank(fs) => fs
                .iter_mut()
                .flat_map(|f| [&mut f.down, &mut f.up])
                .collect(),
            AdapterPayload::FullDelta(ds) => ds.iter_mut().map(|d| &mut d.delta).collect(),
        }
    }

    pub fn is_zero_effect(&self) -> bool {
        match &self.payload {
            AdapterPayload::EmbeddingOffset(t) => t.data().iter().all(|&v| v == 0.0),
            AdapterPayload::LowRank(fs) => fs.iter().all(|f| {
                f.up.data().iter().all(|&v| v == 0.0) || f.down.data().iter().all(|&v| v == 0.0)
            }),
            AdapterPayload::FullDelta(ds) => ds
                .iter()
                .all(|d| d.delta.data().iter().all(|&v| v == 0.0)),
        }
    }
}
