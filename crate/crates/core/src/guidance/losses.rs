use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_filter, GaussianSpec, Map2D};
use crate::registry::Registry;

/// Scalar reduction of the pixelwise ratio `min(A, B) / (A + B)`.
pub trait OverlapReduction: Send + Sync {
    fn name(&self) -> &'static str;
    fn value(&self, a: &Map2D, b: &Map2D, eps_div: f64) -> Result<f64>;
    /// Same quantity on `(h*w) x 1` graph nodes.
    fn record(&self, g: &mut Graph, a: NodeId, b: NodeId, eps_div: f64) -> NodeId;
}

/// `sum min(A, B) / (sum (A + B) + eps)`.
pub struct Aggregate;

/// `mean_p min(A, B) / (A + B + eps)`.
pub struct PerPixel;

impl OverlapReduction for Aggregate {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn value(&self, a: &Map2D, b: &Map2D, eps_div: f64) -> Result<f64> {
        soft_overlap(a, b, eps_div)
    }

    fn record(&self, g: &mut Graph, a: NodeId, b: NodeId, eps_div: f64) -> NodeId {
        let m = g.min(a, b);
        let num = g.sum_all(m);
        let s = g.add(a, b);
        let den = g.sum_all(s);
        let den = g.offset(den, eps_div);
        g.div(num, den)
    }
}

impl OverlapReduction for PerPixel {
    fn name(&self) -> &'static str {
        "per-pixel"
    }

    fn value(&self, a: &Map2D, b: &Map2D, eps_div: f64) -> Result<f64> {
        a.same_dims(b)?;
        let total: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x.min(*y) / (x + y + eps_div))
            .sum();
        Ok(total / a.values().len() as f64)
    }

    fn record(&self, g: &mut Graph, a: NodeId, b: NodeId, eps_div: f64) -> NodeId {
        let n = g.value(a).len() as f64;
        let m = g.min(a, b);
        let s = g.add(a, b);
        let s = g.offset(s, eps_div);
        let r = g.div(m, s);
        let total = g.sum_all(r);
        g.scale(total, 1.0 / n)
    }
}

pub fn overlap_registry() -> Registry<dyn OverlapReduction> {
    let mut r: Registry<dyn OverlapReduction> = Registry::new("overlap reduction");
    r.register("aggregate", || Box::new(Aggregate));
    r.register("per-pixel", || Box::new(PerPixel));
    r
}

/// Soft-IoU style overlap in `[0, 1/2]`.
pub fn soft_overlap(a: &Map2D, b: &Map2D, eps_div: f64) -> Result<f64> {
    a.same_dims(b)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        num += x.min(*y);
        den += x + y;
    }
    Ok(num / (den + eps_div))
}

fn pair_coefficient(n: usize) -> f64 {
    2.0 / ((n - 1) as f64 * n as f64)
}

/// Intra-prompt aggregation loss over each sub-prompt's trigger maps.
///
/// Sub-prompts with a single trigger token have no pairs and are left out
/// of the average; if none has two or more, the loss is 0.
pub fn intra_loss(
    sets: &[Vec<Map2D>],
    reduction: &dyn OverlapReduction,
    eps_div: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for set in sets {
        if set.is_empty() {
            return Err(Error::EmptySet("trigger set of a sub-prompt".into()));
        }
        if set.len() < 2 {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                acc += 1.0 - reduction.value(&set[i], &set[j], eps_div)?;
            }
        }
        total += pair_coefficient(set.len()) * acc;
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        total / counted as f64
    })
}

/// Inter-prompt disentanglement loss over the concept maps; 0 for fewer
/// than two concepts.
pub fn inter_loss(maps: &[Map2D], reduction: &dyn OverlapReduction, eps_div: f64) -> Result<f64> {
    if maps.len() < 2 {
        log::debug!("inter loss undefined for {} concept(s); using 0", maps.len());
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            acc += reduction.value(&maps[i], &maps[j], eps_div)?;
        }
    }
    Ok(pair_coefficient(maps.len()) * acc)
}

pub fn mcg_loss(inter: f64, intra: f64, alpha: f64) -> f64 {
    inter + alpha * intra
}

/// Weakest-subject excite term: max over subjects of `1 - max(map)`, with
/// each map smoothed first when `smoothing` is given.
pub fn ae_loss(maps: &[Map2D], smoothing: Option<&GaussianSpec>) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::EmptySet("subject map list".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    for m in maps {
        let peak = match smoothing {
            Some(g) => gaussian_filter(m, g)?.max(),
            None => m.max(),
        };
        worst = worst.max(1.0 - peak);
    }
    Ok(worst)
}

pub fn compgen_loss(ae: f64, intra: f64, inter: f64, alpha1: f64, alpha2: f64) -> f64 {
    ae + alpha1 * intra + alpha2 * inter
}

/// Graph form of [`intra_loss`]; `None` when no sub-prompt has two triggers.
pub fn intra_node(
    g: &mut Graph,
    sets: &[Vec<NodeId>],
    reduction: &dyn OverlapReduction,
    eps_div: f64,
) -> Result<Option<NodeId>> {
    let mut per_prompt = Vec::new();
    for set in sets {
        if set.is_empty() {
            return Err(Error::EmptySet("trigger set of a sub-prompt".into()));
        }
        if set.len() < 2 {
            continue;
        }
        let mut acc: Option<NodeId> = None;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let o = reduction.record(g, set[i], set[j], eps_div);
                let neg = g.scale(o, -1.0);
                let term = g.offset(neg, 1.0);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
        }
        let sum = acc.expect("at least one pair");
        per_prompt.push(g.scale(sum, pair_coefficient(set.len())));
    }
    if per_prompt.is_empty() {
        return Ok(None);
    }
    let mut total = per_prompt[0];
    for p in &per_prompt[1..] {
        total = g.add(total, *p);
    }
    Ok(Some(g.scale(total, 1.0 / per_prompt.len() as f64)))
}

/// Graph form of [`inter_loss`]; `None` for fewer than two concepts.
pub fn inter_node(
    g: &mut Graph,
    maps: &[NodeId],
    reduction: &dyn OverlapReduction,
    eps_div: f64,
) -> Option<NodeId> {
    if maps.len() < 2 {
        return None;
    }
    let mut acc: Option<NodeId> = None;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let o = reduction.record(g, maps[i], maps[j], eps_div);
            acc = Some(match acc {
                Some(a) => g.add(a, o),
                None => o,
            });
        }
    }
    acc.map(|a| g.scale(a, pair_coefficient(maps.len())))
}

/// Graph form of [`ae_loss`] on already-prepared (smoothed or raw) maps.
pub fn ae_node(g: &mut Graph, maps: &[NodeId]) -> Result<NodeId> {
    if maps.is_empty() {
        return Err(Error::EmptySet("subject map list".into()));
    }
    let terms: Vec<NodeId> = maps
        .iter()
        .map(|m| {
            let peak = g.max_all(*m);
            let neg = g.scale(peak, -1.0);
            g.offset(neg, 1.0)
        })
        .collect();
    Ok(if terms.len() == 1 {
        terms[0]
    } else {
        g.max_of(&terms)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Map2D {
        Map2D::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = map(&[0.3, 0.7]);
        assert!((soft_overlap(&a, &a, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(soft_overlap(&map(&[1.0, 0.0]), &map(&[0.0, 1.0]), 1e-8).unwrap(), 0.0);
        let v = soft_overlap(&map(&[1.0, 0.0]), &map(&[0.5, 0.5]), 0.0).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn intra_and_inter_examples() {
        let r = Aggregate;
        let p = map(&[0.2, 0.8, 0.0]);
        let q = map(&[0.0, 0.0, 1.0]);
        let same = intra_loss(&[vec![p.clone(), p.clone()]], &r, 1e-12).unwrap();
        assert!((same - 0.5).abs() < 1e-9);
        assert!((intra_loss(&[vec![p.clone(), q.clone()]], &r, 1e-8).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(intra_loss(&[vec![p.clone()], vec![q.clone()]], &r, 1e-8).unwrap(), 0.0);
        assert!(intra_loss(&[vec![]], &r, 1e-8).is_err());

        assert!((inter_loss(&[p.clone(), p.clone()], &r, 1e-12).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(inter_loss(&[p.clone(), q.clone()], &r, 1e-8).unwrap(), 0.0);
        let three = inter_loss(&[p.clone(), p.clone(), q.clone()], &r, 1e-12).unwrap();
        assert!((three - 1.0 / 6.0).abs() < 1e-9);
        assert_eq!(inter_loss(&[p], &r, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn combination_examples() {
        assert!((mcg_loss(0.5, 0.5, 0.8) - 0.9).abs() < 1e-12);
        assert_eq!(mcg_loss(0.3, 0.9, 0.0), 0.3);
        assert_eq!(mcg_loss(0.0, 0.0, 0.8), 0.0);
        assert!((compgen_loss(0.2, 0.5, 0.5, 0.5, 0.4) - 0.65).abs() < 1e-12);
        assert_eq!(compgen_loss(0.2, 0.5, 0.5, 0.0, 0.0), 0.2);
    }

    #[test]
    fn ae_examples() {
        let peaked = |p: f64| map(&[p, 0.0, 0.0]);
        let v = ae_loss(&[peaked(0.9), peaked(0.4)], None).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        assert_eq!(ae_loss(&[Map2D::filled(2, 2, 1.0)], Some(&GaussianSpec::default())).unwrap(), 0.0);
        assert_eq!(ae_loss(&[peaked(1.0), Map2D::zeros(1, 3)], None).unwrap(), 1.0);
        assert!(ae_loss(&[], None).is_err());
    }

    #[test]
    fn registry_names() {
        let r = overlap_registry();
        assert_eq!(r.names(), vec!["aggregate", "per-pixel"]);
        assert_eq!(r.create("per-pixel").unwrap().name(), "per-pixel");
    }
}
