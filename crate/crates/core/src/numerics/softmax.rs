use crate::error::{Error, Result};

use super::Tensor;

/// Row-wise softmax of `scale * m`, stabilized by subtracting each row's max.
pub fn softmax_rows(m: &Tensor, scale: f64) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid(format!("softmax scale must be positive, got {scale}")));
    }
    let cols = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row, scale);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
