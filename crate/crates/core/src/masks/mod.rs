//! Two-subject mask proposal from aggregated cross-attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dilate, distance_to_set, gaussian_filter, GaussianSpec, Map2D};

/// How each map is rescaled before smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rescale {
    /// `(A - min A) / max A`.
    #[default]
    Literal,
    /// `(A - min A) / (max A - min A)`.
    UnitRange,
}

/// Whether the comparison masks are `{0, 1}` or keep the map magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMode {
    #[default]
    Hard,
    /// `M_i = A_i * [A_i > A_j]`, so the binarization threshold is active.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskProposalConfig {
    /// Overlap threshold.
    pub theta1: f64,
    /// Binarization threshold.
    pub theta2: f64,
    pub dilation_radius: usize,
    pub gaussian: GaussianSpec,
    pub rescale: Rescale,
    pub compare: CompareMode,
}

impl Default for MaskProposalConfig {
    fn default() -> Self {
        Self {
            theta1: 0.2,
            theta2: 0.5,
            dilation_radius: 2,
            gaussian: GaussianSpec::default(),
            rescale: Rescale::Literal,
            compare: CompareMode::Hard,
        }
    }
}

impl MaskProposalConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("masks.theta1", self.theta1), ("masks.theta2", self.theta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, format!("must lie in (0, 1), got {v}")));
            }
        }
        if self.dilation_radius < 1 {
            return Err(Error::config("masks.dilation_radius", "must be >= 1"));
        }
        self.gaussian
            .validate()
            .map_err(|e| Error::config("masks.gaussian", e.to_string()))
    }
}

/// Pixel counts after each stage, for reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub compare: [usize; 2],
    pub overlap: usize,
    pub excluded: [usize; 2],
    pub binarized: [usize; 2],
    pub ring: usize,
    pub assigned: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    /// Soft masks in `[0, 1]`.
    pub masks: [Map2D; 2],
    /// Binary masks before the final blur; disjoint.
    pub hard: [Map2D; 2],
    pub counts: StageCounts,
    pub diagnostics: Vec<String>,
}

fn rescale(a: &Map2D, mode: Rescale, g: &GaussianSpec) -> Result<Map2D> {
    let (lo, hi) = (a.min(), a.max());
    let denom = match mode {
        Rescale::Literal => hi,
        Rescale::UnitRange => hi - lo,
    };
    let (h, w) = a.dims();
    // An all-zero map (or a constant one in unit-range mode) has nothing to
    // rescale; it stays at zero instead of becoming 0/0.
    let data = if denom > 0.0 {
        a.values().iter().map(|v| (v - lo) / denom).collect()
    } else {
        vec![0.0; h * w]
    };
    gaussian_filter(&Map2D::new(h, w, data)?, g)
}

fn binary(h: usize, w: usize, f: impl Fn(usize) -> bool) -> Map2D {
    Map2D::from_mask(h, w, |y, x| f(y * w + x))
}

fn distances(m: &Map2D) -> Result<Vec<f64>> {
    if m.count_set() == 0 {
        return Ok(vec![f64::INFINITY; m.values().len()]);
    }
    Ok(distance_to_set(m)?.into_values())
}

/// Mutually exclusive masks with soft boundaries for two subjects.
pub fn propose_masks(a1: &Map2D, a2: &Map2D, cfg: &MaskProposalConfig) -> Result<MaskProposal> {
    a1.same_dims(a2)?;
    cfg.validate()?;
    let (h, w) = a1.dims();
    let n = h * w;
    let mut diagnostics = Vec::new();
    let mut counts = StageCounts::default();

    let r1 = rescale(a1, cfg.rescale, &cfg.gaussian)?;
    let r2 = rescale(a2, cfg.rescale, &cfg.gaussian)?;
    let (v1, v2) = (r1.values(), r2.values());

    let mut m1: Vec<f64> = (0..n)
        .map(|p| match (v1[p] > v2[p], cfg.compare) {
            (false, _) => 0.0,
            (true, CompareMode::Hard) => 1.0,
            (true, CompareMode::Soft) => v1[p],
        })
        .collect();
    let mut m2: Vec<f64> = (0..n)
        .map(|p| match (v2[p] > v1[p], cfg.compare) {
            (false, _) => 0.0,
            (true, CompareMode::Hard) => 1.0,
            (true, CompareMode::Soft) => v2[p],
        })
        .collect();
    counts.compare = [
        m1.iter().filter(|v| **v > 0.0).count(),
        m2.iter().filter(|v| **v > 0.0).count(),
    ];
    let overlap: Vec<bool> = (0..n)
        .map(|p| v1[p] > cfg.theta1 && v2[p] > cfg.theta1)
        .collect();
    counts.overlap = overlap.iter().filter(|o| **o).count();

    // The second exclusion sees the already-updated first mask.
    for p in 0..n {
        if overlap[p] && m2[p] > 0.0 {
            m1[p] = 0.0;
        }
    }
    for p in 0..n {
        if overlap[p] && m1[p] > 0.0 {
            m2[p] = 0.0;
        }
    }
    counts.excluded = [
        m1.iter().filter(|v| **v > 0.0).count(),
        m2.iter().filter(|v| **v > 0.0).count(),
    ];

    let b1 = binary(h, w, |p| m1[p] > cfg.theta2);
    let b2 = binary(h, w, |p| m2[p] > cfg.theta2);
    counts.binarized = [b1.count_set(), b2.count_set()];
    if counts.binarized == [0, 0] {
        diagnostics.push("degenerate tie: both subject masks are empty".to_string());
        let zero = Map2D::zeros(h, w);
        return Ok(MaskProposal {
            masks: [zero.clone(), zero.clone()],
            hard: [zero.clone(), zero],
            counts,
            diagnostics,
        });
    }

    let union = binary(h, w, |p| b1.values()[p] > 0.0 || b2.values()[p] > 0.0);
    let grown = dilate(&union, cfg.dilation_radius)?;
    let ring: Vec<bool> = (0..n)
        .map(|p| grown.values()[p] > 0.0 && union.values()[p] == 0.0)
        .collect();
    counts.ring = ring.iter().filter(|r| **r).count();
    let d1 = distances(&b1)?;
    let d2 = distances(&b2)?;
    // Equidistant ring pixels go to the first subject.
    let hard1 = binary(h, w, |p| (ring[p] && d1[p] <= d2[p]) || b1.values()[p] > 0.0);
    let hard2 = binary(h, w, |p| (ring[p] && d2[p] < d1[p]) || b2.values()[p] > 0.0);
    counts.assigned = [hard1.count_set(), hard2.count_set()];
    if counts.binarized[0] == 0 || counts.binarized[1] == 0 {
        diagnostics.push("one subject mask is empty".to_string());
    }

    let soft1 = gaussian_filter(&hard1, &cfg.gaussian)?;
    let soft2 = gaussian_filter(&hard2, &cfg.gaussian)?;
    Ok(MaskProposal {
        masks: [soft1, soft2],
        hard: [hard1, hard2],
        counts,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_give_zero_masks_and_a_diagnostic() {
        let a = Map2D::from_fn(6, 6, |y, x| (y * 6 + x) as f64 / 36.0).unwrap();
        let p = propose_masks(&a, &a, &MaskProposalConfig::default()).unwrap();
        assert!(p.masks.iter().all(|m| m.count_set() == 0));
        assert_eq!(p.diagnostics.len(), 1);
    }

    #[test]
    fn zero_second_map_leaves_it_empty() {
        let a1 = Map2D::from_fn(8, 8, |y, x| if (2..5).contains(&y) && (2..5).contains(&x) { 1.0 } else { 0.1 }).unwrap();
        let p = propose_masks(&a1, &Map2D::zeros(8, 8), &MaskProposalConfig::default()).unwrap();
        assert_eq!(p.masks[1].count_set(), 0);
        assert!(p.hard[0].count_set() > 0);
    }

    #[test]
    fn config_is_checked() {
        let bad = MaskProposalConfig {
            theta1: 1.0,
            ..Default::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("theta1"));
    }
}
