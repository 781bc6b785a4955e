use crate::error::{Error, Result};
use crate::numerics::{Map2D, Tensor};
use crate::registry::Registry;

use super::schedule::{predict_x0, NoiseSchedule, Stepper};

fn check_branches(eps_u: &Tensor, branches: &[Tensor], weights: &[f64]) -> Result<()> {
    if branches.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} branch predictions but {} weights",
            branches.len(),
            weights.len()
        )));
    }
    if let Some(b) = branches.iter().find(|b| b.shape() != eps_u.shape()) {
        return Err(Error::Shape(format!(
            "branch prediction {:?} vs unconditional {:?}",
            b.shape(),
            eps_u.shape()
        )));
    }
    Ok(())
}

/// `u + sum_i c_i(p) (e_i - u)` evaluated as `(1 - sum c_i) u + sum c_i e_i`,
/// with `c_i(p) = w_i * M_i(p)` (`M_i = 1` without masks). The rearranged
/// form reproduces a branch exactly when its weight is 1 and the rest 0.
fn combine(eps_u: &Tensor, branches: &[Tensor], weights: &[f64], masks: Option<&[Map2D]>) -> Result<Tensor> {
    let channels = match eps_u.shape() {
        [_, _, l] => *l,
        _ => 1,
    };
    let pixels = eps_u.len() / channels.max(1);
    let mut out = eps_u.clone();
    let data = out.data_mut();
    let mut coef = vec![0.0; branches.len()];
    for p in 0..pixels {
        let mut total = 0.0;
        for (i, c) in coef.iter_mut().enumerate() {
            *c = match masks {
                Some(m) => weights[i] * m[i].values()[p],
                None => weights[i],
            };
            total += *c;
        }
        let cu = 1.0 - total;
        for k in p * channels..(p + 1) * channels {
            let mut acc = cu * eps_u.data()[k];
            for (i, b) in branches.iter().enumerate() {
                acc += coef[i] * b.data()[k];
            }
            data[k] = acc;
        }
    }
    Ok(out)
}

/// Weighted recombination of branch predictions around the unconditional one.
pub fn semantic_merge(eps_u: &Tensor, branches: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    check_branches(eps_u, branches, weights)?;
    combine(eps_u, branches, weights, None)
}

/// [`semantic_merge`] with each branch's correction gated by a spatial mask.
pub fn masked_merge(
    eps_u: &Tensor,
    branches: &[Tensor],
    masks: &[Map2D],
    weights: &[f64],
) -> Result<Tensor> {
    check_branches(eps_u, branches, weights)?;
    if masks.len() != branches.len() {
        return Err(Error::Invalid(format!(
            "{} masks for {} branches",
            masks.len(),
            branches.len()
        )));
    }
    let (h, w) = match eps_u.shape() {
        [h, w, _] => (*h, *w),
        s => return Err(Error::Shape(format!("masked merge needs h x w x l, got {s:?}"))),
    };
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} vs latent {h}x{w}",
                m.dims()
            )));
        }
        if m.values().iter().any(|v| *v > 1.0) {
            return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
        }
    }
    combine(eps_u, branches, weights, Some(masks))
}

/// Everything a merge strategy needs for one step.
pub struct MergeInput<'a> {
    pub z: &'a Tensor,
    pub eps_u: &'a Tensor,
    pub branches: &'a [Tensor],
    pub weights: &'a [f64],
    /// Per-branch masks; present when refinement is on.
    pub masks: Option<&'a [Map2D]>,
}

impl MergeInput<'_> {
    fn merged_eps(&self) -> Result<Tensor> {
        match self.masks {
            Some(m) => masked_merge(self.eps_u, self.branches, m, self.weights),
            None => semantic_merge(self.eps_u, self.branches, self.weights),
        }
    }
}

/// Combines branch predictions and advances the latent.
pub trait MergeStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Noise draws needed per step for a run with `branches` branches.
    fn noise_draws(&self, branches: usize) -> usize;
    /// Step from index `t` to `t - 1`. `noise` holds [`Self::noise_draws`]
    /// tensors when the stepper is stochastic, otherwise nothing.
    fn advance(
        &self,
        input: &MergeInput<'_>,
        stepper: &dyn Stepper,
        s: &NoiseSchedule,
        t: usize,
        noise: &[Tensor],
        clip: Option<f64>,
    ) -> Result<Tensor>;
    /// Clean-latent estimate at the last index.
    fn finish(&self, input: &MergeInput<'_>, s: &NoiseSchedule, clip: Option<f64>) -> Result<Tensor> {
        predict_x0(input.z, &input.merged_eps()?, 0, s, clip)
    }
}

/// Merge in noise-prediction space, then take one shared step.
pub struct EpsSpace;

/// Step every branch separately and merge the resulting latents.
pub struct LatentSpace;

impl MergeStrategy for EpsSpace {
    fn name(&self) -> &'static str {
        "semantic"
    }

    fn noise_draws(&self, _branches: usize) -> usize {
        1
    }

    fn advance(
        &self,
        input: &MergeInput<'_>,
        stepper: &dyn Stepper,
        s: &NoiseSchedule,
        t: usize,
        noise: &[Tensor],
        clip: Option<f64>,
    ) -> Result<Tensor> {
        stepper.step(input.z, &input.merged_eps()?, t, s, noise.first(), clip)
    }
}

impl MergeStrategy for LatentSpace {
    fn name(&self) -> &'static str {
        "zspace"
    }

    fn noise_draws(&self, branches: usize) -> usize {
        branches + 1
    }

    fn advance(
        &self,
        input: &MergeInput<'_>,
        stepper: &dyn Stepper,
        s: &NoiseSchedule,
        t: usize,
        noise: &[Tensor],
        clip: Option<f64>,
    ) -> Result<Tensor> {
        let draw = |i: usize| noise.get(i);
        let z_u = stepper.step(input.z, input.eps_u, t, s, draw(0), clip)?;
        let stepped = input
            .branches
            .iter()
            .enumerate()
            .map(|(i, e)| stepper.step(input.z, e, t, s, draw(i + 1), clip))
            .collect::<Result<Vec<_>>>()?;
        match input.masks {
            Some(m) => masked_merge(&z_u, &stepped, m, input.weights),
            None => semantic_merge(&z_u, &stepped, input.weights),
        }
    }
}

pub fn merge_registry() -> Registry<dyn MergeStrategy> {
    let mut r: Registry<dyn MergeStrategy> = Registry::new("merge");
    r.register("semantic", || Box::new(EpsSpace));
    r.register("zspace", || Box::new(LatentSpace));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn semantic_examples() {
        let u = t(&[0.3, -1.0]);
        assert_eq!(semantic_merge(&u, &[], &[]).unwrap(), u);
        let e = t(&[1e20, 0.1]);
        assert_eq!(semantic_merge(&u, &[e.clone()], &[1.0]).unwrap(), e);
        let (a, b) = (t(&[1.0, 2.0]), t(&[-0.5, 0.25]));
        let m = semantic_merge(&t(&[0.0, 0.0]), &[a, b], &[1.4, 5.6]).unwrap();
        assert_eq!(m.data(), &[1.4 * 1.0 + 5.6 * -0.5, 1.4 * 2.0 + 5.6 * 0.25]);
        assert!(semantic_merge(&u, &[u.clone()], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn masked_with_zero_mask_ignores_branch() {
        let u = t(&[0.5, 0.5]);
        let e = t(&[3.0, -3.0]);
        let z = Map2D::zeros(1, 2);
        assert_eq!(masked_merge(&u, &[e], &[z], &[2.0]).unwrap(), u);
    }
}
