//! Closed-form attention test double: the map of token `k` at pixel `p` is
//! `softmax_k <z(p), anchor_k>`. Gradients are available analytically, so
//! guidance losses can be checked without the network.

use crate::error::{Error, Result};
use crate::numerics::{Map2D, Tensor};

fn check(z: &Tensor, anchors: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [h, w, l] = match z.shape() {
        [h, w, l] => [*h, *w, *l],
        s => return Err(Error::Shape(format!("latent must be rank 3, got {s:?}"))),
    };
    if anchors.rank() != 2 || anchors.cols() != l || anchors.rows() == 0 {
        return Err(Error::Shape(format!(
            "anchors must be s x {l} with s >= 1, got {:?}",
            anchors.shape()
        )));
    }
    Ok((h, w, l, anchors.rows()))
}

fn pixel_probs(z: &[f64], anchors: &Tensor, out: &mut [f64]) {
    let l = z.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = (0..l).map(|c| z[c] * anchors.get2(k, c)).sum();
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// One `h x w` map per anchor row.
pub fn oracle_attention(z: &Tensor, anchors: &Tensor) -> Result<Vec<Map2D>> {
    let (h, w, l, s) = check(z, anchors)?;
    z.ensure_finite("oracle latent")?;
    let mut maps = vec![vec![0.0; h * w]; s];
    let mut probs = vec![0.0; s];
    for p in 0..h * w {
        pixel_probs(&z.data()[p * l..(p + 1) * l], anchors, &mut probs);
        for k in 0..s {
            maps[k][p] = probs[k];
        }
    }
    maps.into_iter().map(|m| Map2D::new(h, w, m)).collect()
}

/// Pulls per-map cotangents `dL/dA_k` back to `dL/dz`:
/// `dL/dz(p) = sum_k a_k (g_k - sum_j a_j g_j) anchor_k`.
pub fn oracle_attention_vjp(z: &Tensor, anchors: &Tensor, map_grads: &[Map2D]) -> Result<Tensor> {
    let (h, w, l, s) = check(z, anchors)?;
    if map_grads.len() != s || map_grads.iter().any(|g| g.dims() != (h, w)) {
        return Err(Error::Shape("one h x w cotangent per anchor required".into()));
    }
    let mut out = Tensor::zeros(&[h, w, l]);
    let mut probs = vec![0.0; s];
    for p in 0..h * w {
        pixel_probs(&z.data()[p * l..(p + 1) * l], anchors, &mut probs);
        let mean: f64 = (0..s).map(|k| probs[k] * map_grads[k].values()[p]).sum();
        let dst = &mut out.data_mut()[p * l..(p + 1) * l];
        for k in 0..s {
            let coef = probs[k] * (map_grads[k].values()[p] - mean);
            for (c, d) in dst.iter_mut().enumerate() {
                *d += coef * anchors.get2(k, c);
            }
        }
    }
    Ok(out)
}
