//! Per-trigger-token and per-concept attention maps from an [`AttentionStack`].
//!
//! Every operation exists twice: on concrete [`Map2D`] values, and recorded
//! on an autodiff [`Graph`] (maps as `(h*w) x 1` column nodes) so guidance
//! losses can be differentiated back to the latent.

use crate::autodiff::{Graph, NodeId};
use crate::denoiser::{AttentionStack, ForwardNodes, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_filter, GaussianSpec, Map2D};

/// A branch prompt together with the positions `S_k` of its trigger tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPrompt {
    pub tokens: Vec<TokenId>,
    pub triggers: Vec<usize>,
}

impl SubPrompt {
    pub fn new(tokens: Vec<TokenId>, triggers: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = triggers.iter().find(|&&i| i >= tokens.len()) {
            return Err(Error::Invalid(format!(
                "trigger position {bad} outside prompt of {} tokens",
                tokens.len()
            )));
        }
        Ok(Self { tokens, triggers })
    }

    /// Trigger set = every occurrence of `token`.
    pub fn with_trigger(tokens: Vec<TokenId>, token: TokenId) -> Self {
        let triggers = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == token)
            .map(|(i, _)| i)
            .collect();
        Self { tokens, triggers }
    }

    /// Trigger set = occurrences of any of `words`.
    pub fn with_triggers(tokens: Vec<TokenId>, words: &[TokenId]) -> Self {
        let triggers = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| words.contains(t))
            .map(|(i, _)| i)
            .collect();
        Self { tokens, triggers }
    }
}

/// Maps for one sub-prompt: each trigger token's map and their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerMapSet {
    pub prompt: usize,
    pub token_maps: Vec<Map2D>,
    pub concept_map: Map2D,
}

impl TriggerMapSet {
    pub fn build(
        prompt: usize,
        attn: &AttentionStack,
        triggers: &[usize],
        g: &GaussianSpec,
    ) -> Result<Self> {
        let token_maps = extract_trigger_maps(attn, triggers, (attn.height, attn.width))?;
        let concept_map = aggregate_concept_map(&token_maps, g)?;
        Ok(Self {
            prompt,
            token_maps,
            concept_map,
        })
    }
}

fn check_triggers(tokens: usize, triggers: &[usize]) -> Result<()> {
    if triggers.is_empty() {
        return Err(Error::EmptySet("trigger set".into()));
    }
    match triggers.iter().find(|&&i| i >= tokens) {
        Some(bad) => Err(Error::Invalid(format!(
            "trigger index {bad} outside prompt range 0..{tokens}"
        ))),
        None => Ok(()),
    }
}

/// Mean over blocks and heads of each trigger column, reshaped to `h x w`.
pub fn extract_trigger_maps(
    attn: &AttentionStack,
    triggers: &[usize],
    resolution: (usize, usize),
) -> Result<Vec<Map2D>> {
    if resolution != (attn.height, attn.width) {
        return Err(Error::Shape(format!(
            "requested {resolution:?} maps from a {}x{} attention stack",
            attn.height, attn.width
        )));
    }
    check_triggers(attn.tokens, triggers)?;
    let all: Vec<_> = attn.maps.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::EmptySet("attention stack".into()));
    }
    let n = all.len() as f64;
    let hw = attn.height * attn.width;
    triggers
        .iter()
        .map(|&col| {
            let mut acc: Vec<f64> = (0..hw).map(|p| all[0].get2(p, col)).collect();
            for a in &all[1..] {
                for (p, v) in acc.iter_mut().enumerate() {
                    *v += a.get2(p, col);
                }
            }
            Map2D::new(attn.height, attn.width, acc.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Elementwise mean of the token maps, then Gaussian smoothing.
pub fn aggregate_concept_map(maps: &[Map2D], g: &GaussianSpec) -> Result<Map2D> {
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
    let mean = Map2D::new(h, w, acc.into_iter().map(|v| v / n).collect())?;
    gaussian_filter(&mean, g)
}

/// Graph counterpart of [`extract_trigger_maps`]; one `(h*w) x 1` node per trigger.
pub fn trigger_map_nodes(g: &mut Graph, fwd: &ForwardNodes, triggers: &[usize]) -> Result<Vec<NodeId>> {
    check_triggers(fwd.tokens, triggers)?;
    let all: Vec<NodeId> = fwd.attention.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::EmptySet("attention stack".into()));
    }
    Ok(triggers
        .iter()
        .map(|&col| {
            let cols: Vec<NodeId> = all.iter().map(|a| g.cols(*a, col, 1)).collect();
            g.mean(&cols)
        })
        .collect())
}

/// Graph counterpart of [`aggregate_concept_map`].
pub fn aggregate_node(
    g: &mut Graph,
    maps: &[NodeId],
    height: usize,
    width: usize,
    spec: GaussianSpec,
) -> Result<NodeId> {
    if maps.is_empty() {
        return Err(Error::EmptySet("token map list".into()));
    }
    let mean = g.mean(maps);
    Ok(g.filter(mean, height, width, spec))
}

/// Reads a `(h*w) x 1` graph node back as a map.
pub fn node_to_map(g: &Graph, node: NodeId, height: usize, width: usize) -> Result<Map2D> {
    let v = g.value(node);
    Map2D::new(height, width, v.data().iter().map(|x| x.max(0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn stack(maps: Vec<Vec<Tensor>>, h: usize, w: usize, s: usize) -> AttentionStack {
        AttentionStack {
            height: h,
            width: w,
            tokens: s,
            maps,
        }
    }

    #[test]
    fn single_head_map_is_the_column() {
        let a = Tensor::matrix(4, 2, vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6]).unwrap();
        let st = stack(vec![vec![a]], 2, 2, 2);
        let maps = extract_trigger_maps(&st, &[1], (2, 2)).unwrap();
        assert_eq!(maps[0].values(), &[0.9, 0.8, 0.7, 0.6]);
    }

    #[test]
    fn two_heads_average() {
        let p = Tensor::matrix(2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let q = Tensor::matrix(2, 2, vec![0.4, 0.6, 0.2, 0.8]).unwrap();
        let st = stack(vec![vec![p, q]], 1, 2, 2);
        let maps = extract_trigger_maps(&st, &[0], (1, 2)).unwrap();
        assert!((maps[0].get(0, 0) - 0.3).abs() < 1e-15);
        assert!((maps[0].get(0, 1) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_trigger_is_rejected() {
        let st = stack(vec![vec![Tensor::full(&[4, 3], 1.0 / 3.0)]], 2, 2, 3);
        assert!(extract_trigger_maps(&st, &[3], (2, 2)).is_err());
        assert!(extract_trigger_maps(&st, &[], (2, 2)).is_err());
        assert!(extract_trigger_maps(&st, &[0], (4, 1)).is_err());
    }

    #[test]
    fn aggregate_of_constants() {
        let g = GaussianSpec::default();
        let a = aggregate_concept_map(&[Map2D::filled(3, 3, 0.1), Map2D::filled(3, 3, 0.3)], &g).unwrap();
        assert!(a.values().iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert!(aggregate_concept_map(&[], &g).is_err());
    }

    #[test]
    fn sub_prompt_collects_all_occurrences() {
        let t = |i| TokenId(i);
        let sp = SubPrompt::with_trigger(vec![t(1), t(40), t(2), t(40)], t(40));
        assert_eq!(sp.triggers, vec![1, 3]);
        assert!(SubPrompt::new(vec![t(1)], vec![1]).is_err());
    }
}
