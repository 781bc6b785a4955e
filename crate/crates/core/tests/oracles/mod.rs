//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use mc2_core::masks::MaskProposalConfig;
use mc2_core::numerics::{gaussian_filter, Map2D};

/// Euclidean distance from every pixel to the nearest set pixel, by full scan.
pub fn brute_distance(m: &Map2D) -> Vec<f64> {
    let (h, w) = m.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for yy in 0..h {
                for xx in 0..w {
                    if m.is_set(yy, xx) {
                        let dy = y as f64 - yy as f64;
                        let dx = x as f64 - xx as f64;
                        best = best.min(dy * dy + dx * dx);
                    }
                }
            }
            out.push(best.sqrt());
        }
    }
    out
}

/// Square-element dilation by full scan.
pub fn brute_dilate(m: &Map2D, r: usize) -> Map2D {
    let (h, w) = m.dims();
    Map2D::from_mask(h, w, |y, x| {
        (0..h).any(|yy| {
            (0..w).any(|xx| m.is_set(yy, xx) && y.abs_diff(yy) <= r && x.abs_diff(xx) <= r)
        })
    })
}

/// The two-subject mask proposal written out line by line with the literal
/// `(A - min) / max` rescale and hard comparisons. Returns the pre-blur
/// masks and the blurred ones.
pub fn brute_masks(a1: &Map2D, a2: &Map2D, cfg: &MaskProposalConfig) -> ([Map2D; 2], [Map2D; 2]) {
    let (h, w) = a1.dims();
    let n = h * w;

    let rescale = |a: &Map2D| {
        let lo = a.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v: Vec<f64> = if hi > 0.0 {
            a.values().iter().map(|x| (x - lo) / hi).collect()
        } else {
            vec![0.0; n]
        };
        gaussian_filter(&Map2D::new(h, w, v).unwrap(), &cfg.gaussian).unwrap()
    };
    let s1 = rescale(a1);
    let s2 = rescale(a2);
    let (a1, a2) = (s1.values(), s2.values());

    let mut m1 = vec![false; n];
    let mut m2 = vec![false; n];
    for p in 0..n {
        m1[p] = a1[p] > a2[p];
        m2[p] = a2[p] > a1[p];
    }
    let mut o = vec![false; n];
    for p in 0..n {
        o[p] = a1[p] > cfg.theta1 && a2[p] > cfg.theta1;
    }
    for p in 0..n {
        m1[p] = m1[p] && !(o[p] && m2[p]);
    }
    for p in 0..n {
        m2[p] = m2[p] && !(o[p] && m1[p]);
    }
    // binarizing {0, 1} values at theta2 < 1 keeps them unchanged
    for p in 0..n {
        m1[p] = (m1[p] as u8 as f64) > cfg.theta2;
        m2[p] = (m2[p] as u8 as f64) > cfg.theta2;
    }
    if !m1.iter().any(|b| *b) && !m2.iter().any(|b| *b) {
        let z = Map2D::zeros(h, w);
        return ([z.clone(), z.clone()], [z.clone(), z]);
    }
    let union = Map2D::from_mask(h, w, |y, x| m1[y * w + x] || m2[y * w + x]);
    let grown = brute_dilate(&union, cfg.dilation_radius);
    let ring: Vec<bool> = (0..n)
        .map(|p| grown.values()[p] > 0.0 && union.values()[p] == 0.0)
        .collect();
    let d1 = brute_distance(&Map2D::from_mask(h, w, |y, x| m1[y * w + x]));
    let d2 = brute_distance(&Map2D::from_mask(h, w, |y, x| m2[y * w + x]));
    let h1 = Map2D::from_mask(h, w, |y, x| {
        let p = y * w + x;
        (ring[p] && d1[p] <= d2[p]) || m1[p]
    });
    let h2 = Map2D::from_mask(h, w, |y, x| {
        let p = y * w + x;
        (ring[p] && d2[p] < d1[p]) || m2[p]
    });
    let b1 = gaussian_filter(&h1, &cfg.gaussian).unwrap();
    let b2 = gaussian_filter(&h2, &cfg.gaussian).unwrap();
    ([h1, h2], [b1, b2])
}
