use crate::error::{Error, Result};

use super::Map2D;

/// Exact Euclidean distance from every pixel to the nearest set pixel (`> 0`).
///
/// Separable squared-distance transform (lower envelope of parabolas per
/// axis). All intermediate squared distances are integers, so results are
/// exact.
pub fn distance_to_set(m: &Map2D) -> Result<Map2D> {
    let (h, w) = m.dims();
    if m.count_set() == 0 {
        return Err(Error::EmptySet("distance transform of an all-zero mask".into()));
    }
    // larger than any real squared distance, small enough to stay integral
    let far = ((h + w) * (h + w) * 4) as f64;
    let mut grid: Vec<f64> = m
        .values()
        .iter()
        .map(|&v| if v > 0.0 { 0.0 } else { far })
        .collect();

    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        transform_1d(&col, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        transform_1d(&row, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    Ok(Map2D::from_raw(
        h,
        w,
        grid.into_iter().map(f64::sqrt).collect(),
    ))
}

/// 1-D squared distance transform of a sampled function `f`.
fn transform_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                // k == 0 implies z[k] = -inf, so this never underflows
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}
