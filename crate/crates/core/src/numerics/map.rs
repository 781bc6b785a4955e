use crate::error::{Error, Result};

use super::Tensor;

/// A nonnegative `h x w` scalar field (attention map, soft or binary mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map2D {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("map extents must be >= 1, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} map needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("map value {v}")));
        }
        if let Some(v) = data.iter().find(|v| **v < 0.0) {
            return Err(Error::Invalid(format!("map values must be nonnegative, found {v}")));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0 && value >= 0.0);
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self::new(h, w, data)
    }

    /// Binary map from a predicate.
    pub fn from_mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { h, w, data }
    }

    pub(crate) fn from_raw(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn same_dims(&self, other: &Map2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "map dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pixel is set iff its value is strictly positive.
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.get(y, x) > 0.0
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn scale(&self, c: f64) -> Result<Map2D> {
        Map2D::new(self.h, self.w, self.data.iter().map(|v| v * c).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Map2D> {
        match t.shape() {
            [h, w] => Map2D::new(*h, *w, t.data().to_vec()),
            [h, w, 1] => Map2D::new(*h, *w, t.data().to_vec()),
            s => Err(Error::Shape(format!("expected a 2-D map tensor, got {s:?}"))),
        }
    }
}
