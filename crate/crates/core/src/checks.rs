//! Gradient and descent checks shared by the test suites and the `gradcheck`
//! command.
//!
//! The oracle route differentiates the multi-concept loss by hand on the
//! closed-form attention of [`oracle_attention`], without the autodiff
//! graph. The network route differentiates through the denoiser with the
//! graph. Both are compared against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::denoiser::{
    grad_wrt_latent, oracle_attention, oracle_attention_vjp, AdapterKind, AdapterPayload, Branch,
    ConceptAdapter, DenoiserConfig, DenoiserParams, ForwardNodes, Vocabulary,
};
use crate::error::{Error, Result};
use crate::guidance::{update_latent, ConceptMaps, GuidanceConfig, GuidanceObjective, Mcg};
use crate::numerics::{
    filter_plane_adjoint, finite_diff_grad, relative_l2_error, Map2D, Tensor,
};

/// Finite-difference step used by every check.
pub const FD_STEP: f64 = 1e-5;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

/// A latent, anchor rows, and the anchor rows that form each concept.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    pub z: Tensor,
    pub anchors: Tensor,
    pub concepts: Vec<Vec<usize>>,
}

impl OracleInstance {
    /// Two concepts with two trigger rows each, plus one filler row that
    /// only takes part in the softmax.
    pub fn random(seed: u64, h: usize, w: usize, l: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            z: uniform(&[h, w, l], &mut rng, 1.0),
            anchors: uniform(&[5, l], &mut rng, 1.5),
            concepts: vec![vec![0, 1], vec![2, 3]],
        }
    }

    fn token_maps(&self, z: &Tensor) -> Result<Vec<Vec<Map2D>>> {
        let maps = oracle_attention(z, &self.anchors)?;
        Ok(self
            .concepts
            .iter()
            .map(|rows| rows.iter().map(|&r| maps[r].clone()).collect())
            .collect())
    }
}

/// Multi-concept loss of the oracle maps at latent `z`.
pub fn oracle_mcg_loss(inst: &OracleInstance, z: &Tensor, cfg: &GuidanceConfig) -> Result<f64> {
    Ok(Mcg.evaluate(&inst.token_maps(z)?, cfg)?.total)
}

/// Adds `scale * d overlap(a, b) / d(a, b)` of the aggregate reduction to
/// the two cotangents.
fn overlap_cotangents(a: &[f64], b: &[f64], eps: f64, scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
    let den: f64 = a.iter().zip(b).map(|(x, y)| x + y).sum::<f64>() + eps;
    let base = -num / (den * den);
    for p in 0..a.len() {
        let (sa, sb) = if a[p] < b[p] {
            (1.0, 0.0)
        } else if a[p] > b[p] {
            (0.0, 1.0)
        } else {
            (0.5, 0.5)
        };
        ga[p] += scale * (sa / den + base);
        gb[p] += scale * (sb / den + base);
    }
}

/// Gradient of [`oracle_mcg_loss`] with every derivative written out.
/// Only the aggregate overlap reduction is covered.
pub fn oracle_mcg_grad(inst: &OracleInstance, z: &Tensor, cfg: &GuidanceConfig) -> Result<Tensor> {
    if cfg.overlap != "aggregate" {
        return Err(Error::Invalid(format!(
            "the closed-form gradient covers the aggregate reduction, not `{}`",
            cfg.overlap
        )));
    }
    let sets = inst.token_maps(z)?;
    let (h, w) = sets[0][0].dims();
    let n = h * w;
    // cot[c][k]: cotangent of token map k of concept c
    let mut cot: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| vec![vec![0.0; n]; s.len()]).collect();

    if cfg.use_inter_loss && sets.len() >= 2 {
        let concept_maps = sets
            .iter()
            .map(|s| crate::attention::aggregate_concept_map(s, &cfg.gaussian))
            .collect::<Result<Vec<_>>>()?;
        let c = sets.len();
        let coef = 2.0 / (c * (c - 1)) as f64;
        let mut cmap_cot = vec![vec![0.0; n]; c];
        for i in 0..c {
            for j in i + 1..c {
                let (lo, hi) = cmap_cot.split_at_mut(j);
                overlap_cotangents(
                    concept_maps[i].values(),
                    concept_maps[j].values(),
                    cfg.eps_div,
                    coef,
                    &mut lo[i],
                    &mut hi[0],
                );
            }
        }
        for (ci, g) in cmap_cot.iter().enumerate() {
            // the smoothing clamps negatives, which cannot occur for
            // softmax maps, so only the filter adjoint remains
            let mut pulled = vec![0.0; n];
            filter_plane_adjoint(g, h, w, &cfg.gaussian, &mut pulled);
            let k = sets[ci].len() as f64;
            for tok in cot[ci].iter_mut() {
                for (t, v) in tok.iter_mut().zip(&pulled) {
                    *t += v / k;
                }
            }
        }
    }

    if cfg.use_intra_loss {
        let counted = sets.iter().filter(|s| s.len() >= 2).count();
        for (ci, set) in sets.iter().enumerate() {
            let k = set.len();
            if k < 2 {
                continue;
            }
            // d(1 - overlap) = -d overlap; averaged over counted prompts
            let coef = -cfg.alpha * 2.0 / (k * (k - 1)) as f64 / counted as f64;
            for i in 0..k {
                for j in i + 1..k {
                    let (lo, hi) = cot[ci].split_at_mut(j);
                    overlap_cotangents(
                        set[i].values(),
                        set[j].values(),
                        cfg.eps_div,
                        coef,
                        &mut lo[i],
                        &mut hi[0],
                    );
                }
            }
        }
    }

    let s = inst.anchors.rows();
    let mut per_row = vec![Map2D::zeros(h, w); s];
    for (ci, rows) in inst.concepts.iter().enumerate() {
        for (k, &r) in rows.iter().enumerate() {
            let mut acc = per_row[r].values().to_vec();
            for (a, v) in acc.iter_mut().zip(&cot[ci][k]) {
                *a += v;
            }
            // cotangents may be negative, which map validation rejects
            per_row[r] = Map2D::from_raw(h, w, acc);
        }
    }
    oracle_attention_vjp(z, &inst.anchors, &per_row)
}

/// One gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub seed: u64,
    pub relative_error: f64,
}

/// Closed-form oracle gradient against finite differences.
pub fn oracle_gradient_case(seed: u64, cfg: &GuidanceConfig) -> Result<GradCase> {
    let inst = OracleInstance::random(seed, 8, 8, 4);
    let grad = oracle_mcg_grad(&inst, &inst.z, cfg)?;
    let fd = finite_diff_grad(|x| oracle_mcg_loss(&inst, x, cfg), &inst.z, FD_STEP)?;
    Ok(GradCase {
        seed,
        relative_error: relative_l2_error(&grad, &fd, 1e-12),
    })
}

/// Loss before and after one guidance step on an oracle instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentCase {
    pub seed: u64,
    pub before: f64,
    pub after: f64,
}

impl DescentCase {
    pub fn decreased(&self) -> bool {
        self.after < self.before
    }
}

pub fn oracle_descent_case(seed: u64, lambda: f64, cfg: &GuidanceConfig) -> Result<DescentCase> {
    let inst = OracleInstance::random(seed, 8, 8, 4);
    let grad = oracle_mcg_grad(&inst, &inst.z, cfg)?;
    let next = update_latent(&inst.z, &grad, lambda, "oracle mcg")?;
    Ok(DescentCase {
        seed,
        before: oracle_mcg_loss(&inst, &inst.z, cfg)?,
        after: oracle_mcg_loss(&inst, &next, cfg)?,
    })
}

fn mcg_node(
    g: &mut Graph,
    nodes: &[ForwardNodes],
    triggers: &[Vec<usize>],
    cfg: &GuidanceConfig,
) -> Result<NodeId> {
    let concepts = nodes
        .iter()
        .zip(triggers)
        .map(|(n, t)| ConceptMaps::record(g, n, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mcg.record(g, &concepts, cfg)?.total)
}

/// Network gradient of the multi-concept loss on a random 8x8x4 latent
/// with two adapted branches, against finite differences.
pub fn network_gradient_case(seed: u64, cfg: &GuidanceConfig) -> Result<GradCase> {
    let vocab = Vocabulary::standard();
    let params = DenoiserParams::random(DenoiserConfig::default(), 100 + seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a1 = ConceptAdapter::zero(AdapterKind::EmbeddingOffset, vocab.id("<c0>")?, &params)?;
    a1.payload = AdapterPayload::EmbeddingOffset(uniform(&[1, params.config.text_dim], &mut rng, 1.0));
    let mut a2 = ConceptAdapter::init_for_training(AdapterKind::LowRank, vocab.id("<c1>")?, &params, &mut rng)?;
    for t in a2.tensors_mut() {
        *t = uniform(t.shape(), &mut rng, 0.5);
    }
    let p1 = vocab.tokenize("photo of the <c0> and dog, a <c0>")?;
    let p2 = vocab.tokenize("photo of the cat and <c1>, a <c1>")?;
    let branches = [Branch::new(&params, Some(&a1), &p1), Branch::new(&params, Some(&a2), &p2)];
    let triggers = vec![vec![4, 8], vec![5, 8]];
    let z = uniform(&[8, 8, params.config.latent_channels], &mut rng, 1.0);
    let t = rng.gen_range(0..params.train_steps());
    let (_, grad) = grad_wrt_latent(&z, t, &branches, |g, n| mcg_node(g, n, &triggers, cfg))?;
    let fd = finite_diff_grad(
        |x| grad_wrt_latent(x, t, &branches, |g, n| mcg_node(g, n, &triggers, cfg)).map(|r| r.0),
        &z,
        FD_STEP,
    )?;
    Ok(GradCase {
        seed,
        relative_error: relative_l2_error(&grad, &fd, 1e-12),
    })
}
