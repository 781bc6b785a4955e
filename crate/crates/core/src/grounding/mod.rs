//! Attention-grounding losses and single-concept adapter training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{extract_trigger_maps, trigger_map_nodes};
use crate::autodiff::{Graph, NodeId};
use crate::denoiser::{
    bind_weights, encode_graph, forward_graph, AdapterKind, Branch, ConceptAdapter, DenoiserParams,
    TokenId,
};
use crate::error::{Error, Result};
use crate::numerics::{Map2D, Tensor};
use crate::sampler::standard_normal;

/// One training image with its caption and per-token masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedSample {
    /// Clean latent, `h x w x l`.
    pub x0: Tensor,
    pub tokens: Vec<TokenId>,
    /// One mask per caption token; tokens that are not grounded carry the
    /// all-ones mask.
    pub masks: Vec<Map2D>,
    /// Caption positions whose maps the grounding losses act on.
    pub grounded: Vec<usize>,
}

impl GroundedSample {
    /// Sample whose `trigger` occurrences are grounded to `mask`.
    pub fn new(x0: Tensor, tokens: Vec<TokenId>, trigger: TokenId, mask: Map2D) -> Result<Self> {
        let (h, w) = mask.dims();
        let grounded: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == trigger)
            .map(|(i, _)| i)
            .collect();
        let masks = tokens
            .iter()
            .map(|t| {
                if *t == trigger {
                    mask.clone()
                } else {
                    Map2D::filled(h, w, 1.0)
                }
            })
            .collect();
        let s = Self {
            x0,
            tokens,
            masks,
            grounded,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks.first().map(|m| m.dims()).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = match self.x0.shape() {
            [h, w, _] => (*h, *w),
            s => return Err(Error::Shape(format!("sample latent must be rank 3, got {s:?}"))),
        };
        if self.masks.len() != self.tokens.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} tokens",
                self.masks.len(),
                self.tokens.len()
            )));
        }
        for m in &self.masks {
            if m.dims() != (h, w) {
                return Err(Error::Shape(format!("mask {:?} vs latent {h}x{w}", m.dims())));
            }
            if !m.is_binary() {
                return Err(Error::Invalid("sample masks must be binary".into()));
            }
        }
        if let Some(&p) = self.grounded.iter().find(|&&p| p >= self.tokens.len()) {
            return Err(Error::Invalid(format!("grounded position {p} outside caption")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Weight of the in-mask ratio loss.
    pub gamma1: f64,
    /// Weight of the per-pixel cross-entropy loss.
    pub gamma2: f64,
    pub eps_log: f64,
    pub eps_div: f64,
    /// Training timesteps are drawn uniformly from `[min_timestep, max_timestep)`.
    pub min_timestep: usize,
    pub max_timestep: usize,
    pub kind: AdapterKind,
    pub scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 2,
            learning_rate: 1e-4,
            gamma1: 0.1,
            gamma2: 0.01,
            eps_log: 1e-6,
            eps_div: 1e-8,
            min_timestep: 0,
            max_timestep: 1000,
            kind: AdapterKind::LowRank,
            scale: crate::denoiser::DEFAULT_ADAPTER_SCALE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        for (k, v) in [("train.gamma1", self.gamma1), ("train.gamma2", self.gamma2)] {
            if !(v >= 0.0) {
                return Err(Error::config(k, "must be >= 0"));
            }
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) {
            return Err(Error::config("train.eps_log", "must lie in (0, 0.5)"));
        }
        if self.min_timestep >= self.max_timestep {
            return Err(Error::config(
                "train.min_timestep",
                "must be below train.max_timestep",
            ));
        }
        if !(self.scale > 0.0 && self.scale <= 2.0) {
            return Err(Error::config("train.scale", "must lie in (0, 2]"));
        }
        Ok(())
    }
}

fn check_pairs(maps: &[Map2D], masks: &[Map2D]) -> Result<()> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (a, m) in maps.iter().zip(masks) {
        a.same_dims(m)?;
    }
    Ok(())
}

/// `(1/s) sum_i (1 - sum(M_i A_i) / (sum(A_i) + eps))`.
pub fn grounding_l1(maps: &[Map2D], masks: &[Map2D], eps_div: f64) -> Result<f64> {
    check_pairs(maps, masks)?;
    let mut total = 0.0;
    for (a, m) in maps.iter().zip(masks) {
        let inside: f64 = a.values().iter().zip(m.values()).map(|(x, y)| x * y).sum();
        total += 1.0 - inside / (a.sum() + eps_div);
    }
    Ok(total / maps.len() as f64)
}

/// Per-pixel binary cross-entropy between masks and clamped maps,
/// averaged over tokens and pixels.
pub fn grounding_l2(maps: &[Map2D], masks: &[Map2D], eps_log: f64) -> Result<f64> {
    check_pairs(maps, masks)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, m) in maps.iter().zip(masks) {
        for (x, y) in a.values().iter().zip(m.values()) {
            let p = x.clamp(eps_log, 1.0 - eps_log);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of attention mass inside the mask, averaged over tokens.
pub fn in_mask_mass(maps: &[Map2D], masks: &[Map2D]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let mut total = 0.0;
    for (a, m) in maps.iter().zip(masks) {
        let inside: f64 = a.values().iter().zip(m.values()).map(|(x, y)| x * y).sum();
        total += inside / a.sum();
    }
    Ok(total / maps.len() as f64)
}

fn l1_node(g: &mut Graph, maps: &[NodeId], masks: &[NodeId], eps_div: f64) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (a, m) in maps.iter().zip(masks) {
        let prod = g.mul(*a, *m);
        let inside = g.sum_all(prod);
        let mass = g.sum_all(*a);
        let mass = g.offset(mass, eps_div);
        let ratio = g.div(inside, mass);
        let neg = g.scale(ratio, -1.0);
        let term = g.offset(neg, 1.0);
        acc = Some(match acc {
            Some(x) => g.add(x, term),
            None => term,
        });
    }
    let sum = acc.expect("nonempty");
    g.scale(sum, 1.0 / maps.len() as f64)
}

fn l2_node(g: &mut Graph, maps: &[NodeId], masks: &[Tensor], eps_log: f64) -> NodeId {
    let mut acc: Option<NodeId> = None;
    let mut count = 0usize;
    for (a, m) in maps.iter().zip(masks) {
        let p = g.clamp(*a, eps_log, 1.0 - eps_log);
        let log_p = g.ln(p);
        let neg_p = g.scale(p, -1.0);
        let q = g.offset(neg_p, 1.0);
        let log_q = g.ln(q);
        let mc = g.constant(m.clone());
        let inv = g.constant(m.map(|v| 1.0 - v));
        let pos = g.mul(mc, log_p);
        let negt = g.mul(inv, log_q);
        let both = g.add(pos, negt);
        let s = g.sum_all(both);
        count += m.len();
        acc = Some(match acc {
            Some(x) => g.add(x, s),
            None => s,
        });
    }
    let sum = acc.expect("nonempty");
    g.scale(sum, -1.0 / count as f64)
}

fn mask_column(m: &Map2D) -> Tensor {
    let (h, w) = m.dims();
    Tensor::new(vec![h * w, 1], m.values().to_vec()).expect("mask column")
}

/// Loss components of one training evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub diffusion: f64,
    pub l1: f64,
    pub l2: f64,
}

struct Evaluation {
    parts: LossParts,
    grads: Vec<Tensor>,
}

/// Loss and adapter gradients on one noised sample.
fn evaluate(
    params: &DenoiserParams,
    adapter: &ConceptAdapter,
    sample: &GroundedSample,
    t: usize,
    noise: &Tensor,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let (h, w) = sample.dims();
    let l = params.config.latent_channels;
    let ab = params.alpha_bar(t);
    let xt = sample
        .x0
        .zip_with(noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)?
        .reshape(&[h * w, l])?;
    let mut g = Graph::new();
    let (weights, leaves) = bind_weights(&mut g, params, Some(adapter), true)?;
    let text = encode_graph(&mut g, params, &weights, &sample.tokens)?;
    let z = g.constant(xt);
    let fwd = forward_graph(&mut g, params, &weights, z, h, w, t, text)?;
    let target = g.constant(noise.clone().reshape(&[h * w, l])?);
    let diff = g.sub(fwd.eps, target);
    let sq = g.mul(diff, diff);
    let sse = g.sum_all(sq);
    let mse = g.scale(sse, 1.0 / (h * w * l) as f64);

    let grounded = !sample.grounded.is_empty() && (cfg.gamma1 > 0.0 || cfg.gamma2 > 0.0);
    let mut parts = LossParts {
        diffusion: g.scalar_value(mse),
        ..LossParts::default()
    };
    let mut total = mse;
    if grounded {
        let maps = trigger_map_nodes(&mut g, &fwd, &sample.grounded)?;
        let cols: Vec<Tensor> = sample
            .grounded
            .iter()
            .map(|&p| mask_column(&sample.masks[p]))
            .collect();
        let mask_nodes: Vec<NodeId> = cols.iter().map(|c| g.constant(c.clone())).collect();
        let l1 = l1_node(&mut g, &maps, &mask_nodes, cfg.eps_div);
        let l2 = l2_node(&mut g, &maps, &cols, cfg.eps_log);
        parts.l1 = g.scalar_value(l1);
        parts.l2 = g.scalar_value(l2);
        let a = g.scale(l1, cfg.gamma1);
        let b = g.scale(l2, cfg.gamma2);
        let ab_sum = g.add(a, b);
        total = g.add(total, ab_sum);
    }
    parts.total = g.scalar_value(total);
    let grads = g.backward(total);
    let grads = leaves
        .iter()
        .map(|id| grads.get_or_zeros(*id, g.value(*id)))
        .collect();
    Ok(Evaluation { parts, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub adapter: ConceptAdapter,
    pub curve: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<LossParts> {
        self.curve.last().map(|r| r.loss)
    }
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &[&Tensor]) -> Self {
        Self {
            m: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[k];
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g;
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g * g;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a fresh adapter for `trigger` on `dataset`; base weights are
/// only read.
pub fn train_concept(
    params: &DenoiserParams,
    dataset: &[GroundedSample],
    trigger: TokenId,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySet("training dataset".into()));
    }
    for s in dataset {
        s.validate()?;
        if !s.tokens.contains(&trigger) {
            return Err(Error::Invalid("every caption must contain the trigger".into()));
        }
    }
    if cfg.max_timestep > params.train_steps() {
        return Err(Error::config(
            "train.max_timestep",
            format!("exceeds the {} training steps", params.train_steps()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.steps == 0 {
        let mut adapter = ConceptAdapter::zero(cfg.kind, trigger, params)?;
        adapter.scale = cfg.scale;
        return Ok(TrainReport {
            adapter,
            curve: Vec::new(),
        });
    }
    let mut adapter = ConceptAdapter::init_for_training(cfg.kind, trigger, params, &mut rng)?;
    adapter.scale = cfg.scale;
    let mut adam = Adam::new(&adapter.tensors());
    let mut curve = Vec::with_capacity(cfg.steps);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for step in 0..cfg.steps {
        // Draw the whole batch up front so results do not depend on threads.
        let draws: Vec<(usize, usize, Tensor)> = (0..cfg.batch)
            .map(|_| {
                let i = *indices.choose(&mut rng).expect("nonempty");
                let t = rng.gen_range(cfg.min_timestep..cfg.max_timestep);
                let noise = standard_normal(dataset[i].x0.shape(), &mut rng);
                (i, t, noise)
            })
            .collect();
        let evals = draws
            .par_iter()
            .map(|(i, t, noise)| evaluate(params, &adapter, &dataset[*i], *t, noise, cfg))
            .collect::<Result<Vec<_>>>()?;
        let n = evals.len() as f64;
        let mut mean = LossParts::default();
        let mut grads: Vec<Tensor> = evals[0].grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        for e in &evals {
            mean.total += e.parts.total / n;
            mean.diffusion += e.parts.diffusion / n;
            mean.l1 += e.parts.l1 / n;
            mean.l2 += e.parts.l2 / n;
            for (acc, g) in grads.iter_mut().zip(&e.grads) {
                acc.add_assign(g)?;
            }
        }
        let grads: Vec<Tensor> = grads.into_iter().map(|g| g.map(|v| v / n)).collect();
        if !mean.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {:?}", mean),
            });
        }
        adam.update(adapter.tensors_mut(), &grads, cfg.learning_rate);
        curve.push(TrainRecord { step, loss: mean });
    }
    adapter.validate(params)?;
    Ok(TrainReport { adapter, curve })
}

/// Mean noise-prediction error on fixed draws: `draws` noisings per sample
/// at timesteps from `[min_t, max_t)`.
pub fn heldout_mse(
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
    samples: &[GroundedSample],
    (min_t, max_t): (usize, usize),
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let branch = Branch::new(params, adapter, &s.tokens);
        for _ in 0..draws {
            let t = rng.gen_range(min_t..max_t);
            let noise = standard_normal(s.x0.shape(), &mut rng);
            let ab = params.alpha_bar(t);
            let xt = s.x0.zip_with(&noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)?;
            let (eps, _) = branch.forward(&xt, t)?;
            total += eps.sub(&noise)?.data().iter().map(|d| d * d).sum::<f64>() / eps.len() as f64;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean in-mask attention mass of the grounded tokens over noised samples.
pub fn mean_in_mask_mass(
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
    samples: &[GroundedSample],
    (min_t, max_t): (usize, usize),
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        if s.grounded.is_empty() {
            continue;
        }
        let branch = Branch::new(params, adapter, &s.tokens);
        let masks: Vec<Map2D> = s.grounded.iter().map(|&p| s.masks[p].clone()).collect();
        for _ in 0..draws {
            let t = rng.gen_range(min_t..max_t);
            let noise = standard_normal(s.x0.shape(), &mut rng);
            let ab = params.alpha_bar(t);
            let xt = s.x0.zip_with(&noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)?;
            let (_, attn) = branch.forward(&xt, t)?;
            let maps = extract_trigger_maps(&attn, &s.grounded, (attn.height, attn.width))?;
            total += in_mask_mass(&maps, &masks)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySet("grounded samples".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> Map2D {
        Map2D::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = m(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(grounding_l1(&[a.clone()], &[m(&[1.0; 4])], 0.0).unwrap(), 0.0);
        let half = grounding_l1(&[a.clone()], &[m(&[1.0, 1.0, 0.0, 0.0])], 0.0).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        let none = grounding_l1(&[m(&[0.0, 0.0, 1.0, 0.0])], &[m(&[1.0, 0.0, 0.0, 0.0])], 1e-8).unwrap();
        assert_eq!(none, 1.0);
    }

    #[test]
    fn l2_examples() {
        let v = grounding_l2(&[m(&[0.5])], &[m(&[1.0])], 1e-6).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let mask = m(&[1.0, 0.0, 1.0]);
        let good = grounding_l2(&[mask.clone()], &[mask.clone()], 1e-6).unwrap();
        assert!((good - -(1.0f64 - 1e-6).ln()).abs() < 1e-15);
        let bad = grounding_l2(&[m(&[0.0, 1.0, 0.0])], &[mask], 1e-6).unwrap();
        assert!((bad - -(1e-6f64).ln()).abs() < 1e-9);
    }
}
