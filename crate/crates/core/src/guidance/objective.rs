use serde::{Deserialize, Serialize};

use crate::attention::{aggregate_concept_map, aggregate_node, trigger_map_nodes};
use crate::autodiff::{Graph, NodeId};
use crate::denoiser::ForwardNodes;
use crate::error::{Error, Result};
use crate::numerics::Map2D;
use crate::registry::Registry;

use super::losses::{ae_loss, ae_node, inter_loss, inter_node, intra_loss, intra_node};
use super::{overlap_registry, GuidanceConfig};

/// Graph handles for one concept's maps.
#[derive(Debug, Clone)]
pub struct ConceptMaps {
    pub token_maps: Vec<NodeId>,
    /// Unsmoothed mean of the token maps.
    pub mean_map: NodeId,
    /// Smoothed mean: the aggregated concept map.
    pub concept_map: NodeId,
}

impl ConceptMaps {
    pub fn record(
        g: &mut Graph,
        fwd: &ForwardNodes,
        triggers: &[usize],
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        let token_maps = trigger_map_nodes(g, fwd, triggers)?;
        let mean_map = g.mean(&token_maps);
        let concept_map = aggregate_node(g, &[mean_map], fwd.height, fwd.width, cfg.gaussian)?;
        Ok(Self {
            token_maps,
            mean_map,
            concept_map,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: NodeId,
    pub inter: Option<NodeId>,
    pub intra: Option<NodeId>,
    pub ae: Option<NodeId>,
    pub diagnostics: Vec<String>,
}

/// Scalar loss values read back from a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub inter: Option<f64>,
    pub intra: Option<f64>,
    pub ae: Option<f64>,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let read = |n: Option<NodeId>| n.map(|id| g.scalar_value(id));
        LossValues {
            total: g.scalar_value(self.total),
            inter: read(self.inter),
            intra: read(self.intra),
            ae: read(self.ae),
        }
    }
}

/// A guidance loss over per-concept attention maps.
pub trait GuidanceObjective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Records the loss on a graph for differentiation.
    fn record(&self, g: &mut Graph, concepts: &[ConceptMaps], cfg: &GuidanceConfig) -> Result<LossTerms>;
    /// Evaluates the same loss on concrete per-concept token maps.
    fn evaluate(&self, token_maps: &[Vec<Map2D>], cfg: &GuidanceConfig) -> Result<LossValues>;
}

struct SharedValues {
    inter: Option<f64>,
    intra: Option<f64>,
}

fn shared_values(token_maps: &[Vec<Map2D>], cfg: &GuidanceConfig) -> Result<SharedValues> {
    if token_maps.is_empty() {
        return Err(Error::EmptySet("guidance concepts".into()));
    }
    let reduction = overlap_registry().create(&cfg.overlap)?;
    let inter = if cfg.use_inter_loss && token_maps.len() >= 2 {
        let maps = token_maps
            .iter()
            .map(|t| aggregate_concept_map(t, &cfg.gaussian))
            .collect::<Result<Vec<_>>>()?;
        Some(inter_loss(&maps, reduction.as_ref(), cfg.eps_div)?)
    } else {
        None
    };
    let intra = if cfg.use_intra_loss && token_maps.iter().any(|t| t.len() >= 2) {
        Some(intra_loss(token_maps, reduction.as_ref(), cfg.eps_div)?)
    } else {
        if token_maps.iter().any(|t| t.is_empty()) {
            return Err(Error::EmptySet("trigger set of a sub-prompt".into()));
        }
        None
    };
    Ok(SharedValues { inter, intra })
}

fn mean_map(maps: &[Map2D]) -> Result<Map2D> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptySet("token map list".into()))?;
    let (h, w) = first.dims();
    let mut acc = first.values().to_vec();
    for m in &maps[1..] {
        first.same_dims(m)?;
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Map2D::new(h, w, acc.into_iter().map(|v| v / n).collect())
}

/// `L_inter + alpha * L_intra`.
pub struct Mcg;

/// `L_ae + alpha1 * L_intra + alpha2 * L_inter`.
pub struct CompGen;

fn weighted_sum(g: &mut Graph, parts: &[(Option<NodeId>, f64)]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (node, w) in parts {
        if let Some(n) = node {
            let term = if *w == 1.0 { *n } else { g.scale(*n, *w) };
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
    }
    acc.unwrap_or_else(|| g.scalar(0.0))
}

fn shared_terms(
    g: &mut Graph,
    concepts: &[ConceptMaps],
    cfg: &GuidanceConfig,
) -> Result<(Option<NodeId>, Option<NodeId>, Vec<String>)> {
    if concepts.is_empty() {
        return Err(Error::EmptySet("guidance concepts".into()));
    }
    let reduction = overlap_registry().create(&cfg.overlap)?;
    let mut diagnostics = Vec::new();
    let inter = if cfg.use_inter_loss {
        let maps: Vec<NodeId> = concepts.iter().map(|c| c.concept_map).collect();
        let node = inter_node(g, &maps, reduction.as_ref(), cfg.eps_div);
        if node.is_none() {
            diagnostics.push(format!(
                "inter loss undefined for {} concept; guidance is intra-only",
                concepts.len()
            ));
        }
        node
    } else {
        None
    };
    let intra = if cfg.use_intra_loss {
        let sets: Vec<Vec<NodeId>> = concepts.iter().map(|c| c.token_maps.clone()).collect();
        intra_node(g, &sets, reduction.as_ref(), cfg.eps_div)?
    } else {
        None
    };
    Ok((inter, intra, diagnostics))
}

impl GuidanceObjective for Mcg {
    fn name(&self) -> &'static str {
        "mcg"
    }

    fn record(&self, g: &mut Graph, concepts: &[ConceptMaps], cfg: &GuidanceConfig) -> Result<LossTerms> {
        let (inter, intra, diagnostics) = shared_terms(g, concepts, cfg)?;
        let total = weighted_sum(g, &[(inter, 1.0), (intra, cfg.alpha)]);
        Ok(LossTerms {
            total,
            inter,
            intra,
            ae: None,
            diagnostics,
        })
    }

    fn evaluate(&self, token_maps: &[Vec<Map2D>], cfg: &GuidanceConfig) -> Result<LossValues> {
        let v = shared_values(token_maps, cfg)?;
        Ok(LossValues {
            total: v.inter.unwrap_or(0.0) + cfg.alpha * v.intra.unwrap_or(0.0),
            inter: v.inter,
            intra: v.intra,
            ae: None,
        })
    }
}

impl GuidanceObjective for CompGen {
    fn name(&self) -> &'static str {
        "compgen"
    }

    fn record(&self, g: &mut Graph, concepts: &[ConceptMaps], cfg: &GuidanceConfig) -> Result<LossTerms> {
        let (inter, intra, diagnostics) = shared_terms(g, concepts, cfg)?;
        let subject: Vec<NodeId> = concepts
            .iter()
            .map(|c| {
                if cfg.ae_smoothing {
                    c.concept_map
                } else {
                    c.mean_map
                }
            })
            .collect();
        let ae = ae_node(g, &subject)?;
        let total = weighted_sum(
            g,
            &[(Some(ae), 1.0), (intra, cfg.alpha1), (inter, cfg.alpha2)],
        );
        Ok(LossTerms {
            total,
            inter,
            intra,
            ae: Some(ae),
            diagnostics,
        })
    }

    fn evaluate(&self, token_maps: &[Vec<Map2D>], cfg: &GuidanceConfig) -> Result<LossValues> {
        let v = shared_values(token_maps, cfg)?;
        let means = token_maps
            .iter()
            .map(|t| mean_map(t))
            .collect::<Result<Vec<_>>>()?;
        let smoothing = cfg.ae_smoothing.then_some(&cfg.gaussian);
        let ae = ae_loss(&means, smoothing)?;
        Ok(LossValues {
            total: ae + cfg.alpha1 * v.intra.unwrap_or(0.0) + cfg.alpha2 * v.inter.unwrap_or(0.0),
            inter: v.inter,
            intra: v.intra,
            ae: Some(ae),
        })
    }
}

pub fn objective_registry() -> Registry<dyn GuidanceObjective> {
    let mut r: Registry<dyn GuidanceObjective> = Registry::new("guidance objective");
    r.register("mcg", || Box::new(Mcg));
    r.register("compgen", || Box::new(CompGen));
    r
}
