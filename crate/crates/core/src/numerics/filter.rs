use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Map2D;

/// How the filter reads outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    /// Nearest in-grid value; constant planes are fixed points.
    #[default]
    Replicate,
    /// Zeros outside the grid.
    Zero,
}

/// Odd-sized isotropic Gaussian kernel description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub kernel_size: usize,
    pub sigma: f64,
    #[serde(default)]
    pub border: Border,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            sigma: 0.5,
            border: Border::Replicate,
        }
    }
}

impl GaussianSpec {
    pub fn new(kernel_size: usize, sigma: f64) -> Result<Self> {
        let g = Self {
            kernel_size,
            sigma,
            border: Border::Replicate,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_border(self, border: Border) -> Self {
        Self { border, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Invalid(format!(
                "gaussian kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "gaussian sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.kernel_size / 2
    }

    /// Normalized 1-D taps; the 2-D kernel is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = self.radius() as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }

    /// Normalized 2-D kernel, row-major `kernel_size x kernel_size`.
    pub fn kernel2d(&self) -> Vec<f64> {
        let t = self.taps();
        let mut k = Vec::with_capacity(t.len() * t.len());
        for a in &t {
            for b in &t {
                k.push(a * b);
            }
        }
        k
    }
}

/// Gaussian smoothing of one `h x w` plane.
///
/// With replicate borders this is evaluated as `a(p) + sum_q k(q) (a(q) - a(p))`,
/// which equals the plain weighted sum for a normalized kernel and leaves
/// constant planes untouched.
pub(crate) fn filter_plane(src: &[f64], h: usize, w: usize, g: &GaussianSpec, dst: &mut [f64]) {
    let k = g.kernel2d();
    let r = g.radius() as i64;
    let size = g.kernel_size;
    if g.border == Border::Zero {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let kv = k[((dy + r) as usize) * size + (dx + r) as usize];
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
                dst[(y as usize) * w + x as usize] = acc;
            }
        }
        return;
    }
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let center = src[(y as usize) * w + x as usize];
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let kv = k[((dy + r) as usize) * size + (dx + r) as usize];
                    acc += kv * (src[yy * w + xx] - center);
                }
            }
            dst[(y as usize) * w + x as usize] = center + acc;
        }
    }
}

/// Adjoint of [`filter_plane`] for a normalized kernel.
pub(crate) fn filter_plane_adjoint(
    grad_out: &[f64],
    h: usize,
    w: usize,
    g: &GaussianSpec,
    grad_in: &mut [f64],
) {
    let k = g.kernel2d();
    let r = g.radius() as i64;
    let size = g.kernel_size;
    let zero = g.border == Border::Zero;
    let inside = |v: i64, n: usize| (0..n as i64).contains(&v);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let go = grad_out[(y as usize) * w + x as usize];
            if go == 0.0 {
                continue;
            }
            for dy in -r..=r {
                if zero && !inside(y + dy, h) {
                    continue;
                }
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    if zero && !inside(x + dx, w) {
                        continue;
                    }
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let kv = k[((dy + r) as usize) * size + (dx + r) as usize];
                    grad_in[yy * w + xx] += kv * go;
                }
            }
        }
    }
}

pub fn gaussian_filter(a: &Map2D, g: &GaussianSpec) -> Result<Map2D> {
    g.validate()?;
    let (h, w) = a.dims();
    let mut out = vec![0.0; h * w];
    filter_plane(a.values(), h, w, g, &mut out);
    // rounding can leave -0.0-ish tiny negatives next to exact zeros
    for v in out.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(Map2D::from_raw(h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_kernel_rejected() {
        assert!(GaussianSpec::new(4, 0.5).is_err());
        assert!(GaussianSpec::new(3, 0.0).is_err());
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let a = Map2D::filled(7, 5, 0.3);
        let out = gaussian_filter(&a, &GaussianSpec::default()).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_map_stays_zero() {
        let a = Map2D::zeros(4, 4);
        let out = gaussian_filter(&a, &GaussianSpec::default()).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_center_weight_matches_closed_form() {
        let mut a = Map2D::zeros(9, 9);
        a.set(4, 4, 1.0);
        let out = gaussian_filter(&a, &GaussianSpec::default()).unwrap();
        // sigma 0.5: edge taps e^-2, corner taps e^-4
        let z = 1.0 + 4.0 * (-2.0f64).exp() + 4.0 * (-4.0f64).exp();
        assert!((out.get(4, 4) - 1.0 / z).abs() < 1e-15);
        assert!((out.get(4, 5) - (-2.0f64).exp() / z).abs() < 1e-15);
        assert!((out.get(3, 5) - (-4.0f64).exp() / z).abs() < 1e-15);
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_border_loses_mass_at_edges() {
        let a = Map2D::filled(5, 5, 1.0);
        let g = GaussianSpec::new(3, 0.8).unwrap().with_border(Border::Zero);
        let out = gaussian_filter(&a, &g).unwrap();
        assert!((out.get(2, 2) - 1.0).abs() < 1e-15);
        let t = g.taps();
        assert!((out.get(0, 0) - (t[1] + t[2]).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn adjoint_identity() {
        for border in [Border::Replicate, Border::Zero] {
            adjoint_identity_for(border);
        }
    }

    fn adjoint_identity_for(border: Border) {
        let (h, w) = (5, 6);
        let g = GaussianSpec::new(5, 1.1).unwrap().with_border(border);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..h * w).map(|i| ((i * 3) % 5) as f64 * 0.2 - 0.3).collect();
        let mut fa = vec![0.0; h * w];
        filter_plane(&a, h, w, &g, &mut fa);
        let mut ftb = vec![0.0; h * w];
        filter_plane_adjoint(&b, h, w, &g, &mut ftb);
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ftb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
