use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::render::{coverage, Placement, BACKGROUND};
use super::world::ConceptSpec;

/// Search steps for template size and center position, in pixels.
const SIZE_STEP: f64 = 0.25;
const SIZE_MARGIN: f64 = 0.5;
const POSITION_STEP: f64 = 0.5;

struct Template {
    /// Sub-pixel phase of the center.
    phase: (f64, f64),
    /// Patch side; the center sits at `(radius + phase.0, radius + phase.1)`.
    side: usize,
    radius: usize,
    /// Deviation from the background, `side x side x 3`.
    dev: Vec<f64>,
}

/// Pre-rendered canonical templates of one concept over sizes and sub-pixel
/// phases.
pub struct TemplateBank {
    spec: ConceptSpec,
    templates: Vec<Template>,
}

impl TemplateBank {
    pub fn new(spec: &ConceptSpec) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = spec.size_range;
        let lo = (lo - SIZE_MARGIN).max(SIZE_STEP);
        let hi = hi + SIZE_MARGIN;
        let mut templates = Vec::new();
        let mut size = lo;
        while size <= hi + 1e-9 {
            let radius = spec.shape.extent(size).ceil() as usize + 1;
            let side = 2 * radius + 2;
            for phase in [(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)] {
                let p = Placement {
                    cy: radius as f64 + phase.0,
                    cx: radius as f64 + phase.1,
                    size,
                };
                let cov = coverage(spec.shape, p, side, side);
                let dev = cov
                    .iter()
                    .flat_map(|c| spec.color.map(|col| c * (col - BACKGROUND)))
                    .collect();
                templates.push(Template {
                    phase,
                    side,
                    radius,
                    dev,
                });
            }
            size += SIZE_STEP;
        }
        Ok(Self {
            spec: spec.clone(),
            templates,
        })
    }

    pub fn spec(&self) -> &ConceptSpec {
        &self.spec
    }

    /// Best windowed correlation between the image's deviation from the
    /// background and a template, clamped at zero. The product is normalized
    /// by the larger of the two energies, so a faint tint of the right hue
    /// scores low.
    pub fn score(&self, image: &Tensor) -> Result<f64> {
        let (h, w) = match image.shape() {
            [h, w, 3] => (*h, *w),
            s => return Err(Error::Shape(format!("image must be h x w x 3, got {s:?}"))),
        };
        image.ensure_finite("presence image")?;
        let dev: Vec<f64> = image.data().iter().map(|v| v - BACKGROUND).collect();
        let mut best = 0.0f64;
        for t in &self.templates {
            // Centers anywhere in the frame on the half-pixel grid matching
            // this template's phase; blobs cut by the border still match.
            let centers = |n: usize, phase: f64| -> Vec<i64> {
                let mut out = Vec::new();
                let mut c = 0.0;
                while c <= n as f64 + 1e-9 {
                    let fl = c.floor();
                    if ((c - fl) - phase).abs() < 1e-9 {
                        out.push(fl as i64);
                    }
                    c += POSITION_STEP;
                }
                out
            };
            let ys = centers(h, t.phase.0);
            let xs = centers(w, t.phase.1);
            for &fy in &ys {
                for &fx in &xs {
                    let oy = fy - t.radius as i64;
                    let ox = fx - t.radius as i64;
                    let (mut dot, mut ni, mut nt) = (0.0, 0.0, 0.0);
                    for py in 0..t.side {
                        let y = oy + py as i64;
                        if y < 0 || y >= h as i64 {
                            continue;
                        }
                        for px in 0..t.side {
                            let x = ox + px as i64;
                            if x < 0 || x >= w as i64 {
                                continue;
                            }
                            let ii = (y as usize * w + x as usize) * 3;
                            let ti = (py * t.side + px) * 3;
                            for k in 0..3 {
                                let a = dev[ii + k];
                                let b = t.dev[ti + k];
                                dot += a * b;
                                ni += a * a;
                                nt += b * b;
                            }
                        }
                    }
                    if ni > 0.0 && nt > 0.0 {
                        best = best.max(dot / (nt.sqrt() * ni.max(nt).sqrt()));
                    }
                }
            }
        }
        Ok(best.clamp(0.0, 1.0))
    }
}

/// Presence of `spec` in `image`, in `[0, 1]`.
pub fn presence_score(image: &Tensor, spec: &ConceptSpec) -> Result<f64> {
    TemplateBank::new(spec)?.score(image)
}
