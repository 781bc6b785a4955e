use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Map2D, Tensor};

/// Gray level of the empty canvas.
pub const BACKGROUND: f64 = 0.5;
/// Supersamples per pixel side for coverage.
const SUPERSAMPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point lies inside a blob of `size` centered at the origin.
    /// `size` is the radius (disc), half side (square) or circumradius
    /// (upward triangle).
    pub fn contains(&self, dx: f64, dy: f64, size: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= size * size,
            Shape::Square => dx.abs() <= size && dy.abs() <= size,
            Shape::Triangle => {
                // Apex up (negative y), base at y = size / 2.
                let h = 1.5 * size;
                let top = -size;
                let t = (dy - top) / h;
                let half = t * size * 3f64.sqrt() / 2.0;
                (0.0..=1.0).contains(&t) && dx.abs() <= half
            }
        }
    }

    /// Half extent of the bounding box for `size`.
    pub fn extent(&self, size: f64) -> f64 {
        size
    }
}

/// A blob placement: center in pixel coordinates (pixel `(y, x)` covers
/// `[x, x+1] x [y, y+1]`) and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cy: f64,
    pub cx: f64,
    pub size: f64,
}

/// Fraction of each pixel covered by the blob, by supersampling.
pub fn coverage(shape: Shape, p: Placement, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if p.size <= 0.0 {
        return out;
    }
    let step = 1.0 / SUPERSAMPLE as f64;
    let e = shape.extent(p.size) + 1.0;
    for y in 0..h {
        let yc = y as f64 + 0.5;
        if (yc - p.cy).abs() > e + 0.5 {
            continue;
        }
        for x in 0..w {
            let xc = x as f64 + 0.5;
            if (xc - p.cx).abs() > e + 0.5 {
                continue;
            }
            let mut hits = 0usize;
            for i in 0..SUPERSAMPLE {
                let sy = y as f64 + (i as f64 + 0.5) * step;
                for j in 0..SUPERSAMPLE {
                    let sx = x as f64 + (j as f64 + 0.5) * step;
                    if shape.contains(sx - p.cx, sy - p.cy, p.size) {
                        hits += 1;
                    }
                }
            }
            out[y * w + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

/// `h x w x 3` RGB image in `[0, 1]`.
pub fn blank_image(h: usize, w: usize) -> Tensor {
    Tensor::full(&[h, w, 3], BACKGROUND)
}

/// Composites an anti-aliased blob onto `image`; returns the coverage.
pub fn paint(image: &mut Tensor, shape: Shape, color: [f64; 3], p: Placement) -> Result<Vec<f64>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Shape(format!("image must be h x w x 3, got {s:?}"))),
    };
    let cov = coverage(shape, p, h, w);
    let data = image.data_mut();
    for (i, c) in cov.iter().enumerate() {
        if *c > 0.0 {
            for (k, col) in color.iter().enumerate() {
                let v = &mut data[i * 3 + k];
                *v += c * (col - *v);
            }
        }
    }
    Ok(cov)
}

/// Draws one blob of the given look on an empty canvas. Positions must keep
/// the blob's bounding box inside the frame.
pub fn render_blob(
    shape: Shape,
    color: [f64; 3],
    p: Placement,
    h: usize,
    w: usize,
) -> Result<(Tensor, Map2D)> {
    let e = shape.extent(p.size);
    if p.size > 0.0
        && (p.cx - e < 0.0 || p.cy - e < 0.0 || p.cx + e > w as f64 || p.cy + e > h as f64)
    {
        return Err(Error::Invalid(format!(
            "blob at ({:.2}, {:.2}) size {:.2} leaves the {h}x{w} frame",
            p.cy, p.cx, p.size
        )));
    }
    let mut image = blank_image(h, w);
    let cov = paint(&mut image, shape, color, p)?;
    let mask = Map2D::from_mask(h, w, |y, x| cov[y * w + x] >= 0.5);
    Ok((image, mask))
}

/// Random placement with the blob fully inside the frame.
pub fn random_placement<R: Rng>(
    shape: Shape,
    size_range: (f64, f64),
    h: usize,
    w: usize,
    rng: &mut R,
) -> Placement {
    let size = if size_range.1 > size_range.0 {
        rng.gen_range(size_range.0..size_range.1)
    } else {
        size_range.0
    };
    let e = shape.extent(size);
    let cy = rng.gen_range(e..(h as f64 - e).max(e + 1e-9));
    let cx = rng.gen_range(e..(w as f64 - e).max(e + 1e-9));
    Placement { cy, cx, size }
}

/// Image RGB in `[0, 1]` to latent channels `2 rgb - 1` plus an objectness
/// channel holding the coverage. The gray canvas is the zero latent.
pub fn latent_from_image(image: &Tensor, objectness: &[f64]) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Shape(format!("image must be h x w x 3, got {s:?}"))),
    };
    if objectness.len() != h * w {
        return Err(Error::Shape("objectness plane size".into()));
    }
    let mut out = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        for k in 0..3 {
            out.push(2.0 * image.data()[p * 3 + k] - 1.0);
        }
        out.push(objectness[p].clamp(0.0, 1.0));
    }
    Tensor::new(vec![h, w, 4], out)
}

/// Fixed affine map from latent channels 0..3 to RGB in `[0, 1]`.
pub fn image_from_latent(latent: &Tensor) -> Result<Tensor> {
    let (h, w, l) = match latent.shape() {
        [h, w, l] if *l >= 3 => (*h, *w, *l),
        s => return Err(Error::Shape(format!("latent must be h x w x (>=3), got {s:?}"))),
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for k in 0..3 {
            out.push(((latent.data()[p * l + k] + 1.0) / 2.0).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Shape(format!("image must be h x w x 3, got {s:?}"))),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// 8-bit grayscale PGM, min-max scaled unless the map is already in `[0, 1]`.
pub fn write_pgm(path: &Path, map: &Map2D) -> Result<()> {
    let (h, w) = map.dims();
    let (lo, hi) = (map.min(), map.max());
    let unit = lo >= 0.0 && hi <= 1.0;
    let bytes: Vec<u8> = map
        .values()
        .iter()
        .map(|v| {
            let s = if unit {
                *v
            } else if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            };
            (s * 255.0).round() as u8
        })
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Format("mask buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

/// Min-max scaled PGM regardless of range (attention visualizations).
pub fn write_pgm_scaled(path: &Path, map: &Map2D) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let (h, w) = map.dims();
    let scaled = Map2D::new(
        h,
        w,
        map.values()
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect(),
    )?;
    write_pgm(path, &scaled)
}

pub fn read_pgm(path: &Path) -> Result<Map2D> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Map2D::new(
        h as usize,
        w as usize,
        img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    )
}
