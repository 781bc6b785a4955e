use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::registry::Registry;
use crate::schedule::BetaSchedule;

/// Inference timesteps subsampled from the training grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    timesteps: Vec<usize>,
    train_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` inference steps at training timesteps `i * (train_steps / steps)`.
    pub fn new(steps: usize, beta: &BetaSchedule) -> Result<Self> {
        beta.validate()?;
        if steps == 0 || steps > beta.train_steps {
            return Err(Error::config(
                "total_steps",
                format!("must lie in [1, {}], got {steps}", beta.train_steps),
            ));
        }
        let stride = beta.train_steps / steps;
        Ok(Self {
            steps,
            timesteps: (0..steps).map(|i| i * stride).collect(),
            train_alpha_bar: beta.alphas_cumprod(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Training-grid timestep of inference index `i`.
    pub fn timestep(&self, i: usize) -> usize {
        self.timesteps[i]
    }

    /// Cumulative signal fraction at inference index `i`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.train_alpha_bar[self.timesteps[i]]
    }
}

fn check(z: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<()> {
    if z.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise prediction {:?}",
            z.shape(),
            eps.shape()
        )));
    }
    if t == 0 {
        return Err(Error::Invalid(
            "no step below t = 0; take the predicted clean latent instead".into(),
        ));
    }
    if t >= s.steps() {
        return Err(Error::Invalid(format!("step {t} outside [1, {})", s.steps())));
    }
    Ok(())
}

/// Clean-latent estimate `(z - sqrt(1 - ab) eps) / sqrt(ab)`, optionally clipped.
pub fn predict_x0(z: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule, clip: Option<f64>) -> Result<Tensor> {
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_with(eps, |zv, ev| {
        let x = (zv - b * ev) / a;
        match clip {
            Some(c) => x.clamp(-c, c),
            None => x,
        }
    })
}

/// Strided DDPM posterior step; `noise` is the standard normal draw.
pub fn ddpm_posterior(
    z: &Tensor,
    eps: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
    clip: Option<f64>,
) -> Result<Tensor> {
    check(z, eps, t, s)?;
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c_z = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    let x0 = predict_x0(z, eps, t, s, clip)?;
    let mean = x0.zip_with(z, |x, zv| c_x0 * x + c_z * zv)?;
    mean.zip_with(noise, |m, n| m + sigma * n)
}

/// Deterministic (sigma = 0) DDIM step.
pub fn ddim_step(z: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule, clip: Option<f64>) -> Result<Tensor> {
    check(z, eps, t, s)?;
    let ab_prev = s.alpha_bar(t - 1);
    let x0 = predict_x0(z, eps, t, s, clip)?;
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let e = match clip {
        // Keep the noise direction consistent with the clipped x0.
        Some(_) => {
            let ab = s.alpha_bar(t);
            z.zip_with(&x0, |zv, x| (zv - ab.sqrt() * x) / (1.0 - ab).sqrt())?
        }
        None => eps.clone(),
    };
    x0.zip_with(&e, |x, ev| a * x + b * ev)
}

pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// One reverse step from inference index `t` to `t - 1`.
pub fn ddpm_step<R: Rng>(
    z: &Tensor,
    eps: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<Tensor> {
    if deterministic {
        ddim_step(z, eps, t, s, None)
    } else {
        check(z, eps, t, s)?;
        let noise = standard_normal(z.shape(), rng);
        ddpm_posterior(z, eps, t, s, &noise, None)
    }
}

/// A reverse-diffusion update rule.
pub trait Stepper: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether [`Stepper::step`] consumes a noise draw.
    fn stochastic(&self) -> bool;
    fn step(
        &self,
        z: &Tensor,
        eps: &Tensor,
        t: usize,
        s: &NoiseSchedule,
        noise: Option<&Tensor>,
        clip: Option<f64>,
    ) -> Result<Tensor>;
}

pub struct Ddpm;
pub struct Ddim;

impl Stepper for Ddpm {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn step(
        &self,
        z: &Tensor,
        eps: &Tensor,
        t: usize,
        s: &NoiseSchedule,
        noise: Option<&Tensor>,
        clip: Option<f64>,
    ) -> Result<Tensor> {
        let noise = noise.ok_or_else(|| Error::Invalid("ddpm step needs a noise draw".into()))?;
        ddpm_posterior(z, eps, t, s, noise, clip)
    }
}

impl Stepper for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn stochastic(&self) -> bool {
        false
    }

    fn step(
        &self,
        z: &Tensor,
        eps: &Tensor,
        t: usize,
        s: &NoiseSchedule,
        _noise: Option<&Tensor>,
        clip: Option<f64>,
    ) -> Result<Tensor> {
        ddim_step(z, eps, t, s, clip)
    }
}

pub fn stepper_registry() -> Registry<dyn Stepper> {
    let mut r: Registry<dyn Stepper> = Registry::new("stepper");
    r.register("ddim", || Box::new(Ddim));
    r.register("ddpm", || Box::new(Ddpm));
    r
}
