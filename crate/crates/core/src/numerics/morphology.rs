use crate::error::{Error, Result};

use super::Map2D;

/// Binary dilation with a square (Chebyshev) structuring element.
///
/// Pixels with value `> 0` count as set. Runs as two separable 1-D max passes.
pub fn dilate(m: &Map2D, radius: usize) -> Result<Map2D> {
    if radius < 1 {
        return Err(Error::Invalid("dilation radius must be >= 1".into()));
    }
    let (h, w) = m.dims();
    let r = radius as i64;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w as i64 {
            let lo = (x - r).max(0) as usize;
            let hi = (x + r).min(w as i64 - 1) as usize;
            rows[y * w + x as usize] = (lo..=hi).any(|xx| m.is_set(y, xx));
        }
    }
    let mut out = Map2D::zeros(h, w);
    for x in 0..w {
        for y in 0..h as i64 {
            let lo = (y - r).max(0) as usize;
            let hi = (y + r).min(h as i64 - 1) as usize;
            if (lo..=hi).any(|yy| rows[yy * w + x]) {
                out.set(y as usize, x, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_zero_is_an_error() {
        assert!(dilate(&Map2D::zeros(3, 3), 0).is_err());
    }

    #[test]
    fn empty_and_full() {
        let z = dilate(&Map2D::zeros(5, 4), 1).unwrap();
        assert_eq!(z.count_set(), 0);
        let f = dilate(&Map2D::filled(5, 4, 1.0), 2).unwrap();
        assert_eq!(f.count_set(), 20);
    }

    #[test]
    fn single_pixel_grows_to_block() {
        let mut m = Map2D::zeros(9, 9);
        m.set(4, 4, 1.0);
        let d = dilate(&m, 1).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert_eq!(d.is_set(y, x), inside, "({y},{x})");
            }
        }
    }
}
