//! Per-image normalized depth maps and per-box median depth.

use alloc::vec::Vec;
use core::fmt;

use crate::model::{BoundingBox, ImageRef};

#[derive(Debug, Clone, PartialEq)]
pub enum DepthError {
    DimensionMismatch { expected: (u32, u32), got: (u32, u32), values: usize },
    NonFinite,
}

impl fmt::Display for DepthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthError::DimensionMismatch { expected, got, values } => write!(
                f,
                "depth map is {}x{} with {} values, image is {}x{}",
                got.0, got.1, values, expected.0, expected.1
            ),
            DepthError::NonFinite => f.write_str("depth map contains non-finite values"),
        }
    }
}

impl core::error::Error for DepthError {}

/// Row-major depth grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    /// Min-max normalize a raw backend map. A constant map becomes all zeros.
    pub fn from_raw(image: &ImageRef, width: u32, height: u32, raw: Vec<f32>) -> Result<Self, DepthError> {
        if (width, height) != (image.width, image.height) || raw.len() != width as usize * height as usize {
            return Err(DepthError::DimensionMismatch {
                expected: (image.width, image.height),
                got: (width, height),
                values: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(DepthError::NonFinite);
        }
        let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = f64::from(hi) - f64::from(lo);
        let values = if range > 0.0 {
            raw.iter().map(|&v| ((f64::from(v) - f64::from(lo)) / range).clamp(0.0, 1.0) as f32).collect()
        } else {
            alloc::vec![0.0; raw.len()]
        };
        Ok(DepthMap { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Median over the pixels covered by the box; an even count averages the
    /// two middle values. A pixel is covered when its cell intersects the box.
    pub fn median_in_box(&self, bbox: &BoundingBox) -> f64 {
        let (x0, x1) = pixel_span(bbox.x1(), bbox.x2(), self.width);
        let (y0, y1) = pixel_span(bbox.y1(), bbox.y2(), self.height);
        let mut samples: Vec<f32> = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
        for y in y0..y1 {
            let row = y as usize * self.width as usize;
            samples.extend_from_slice(&self.values[row + x0 as usize..row + x1 as usize]);
        }
        median(&mut samples)
    }
}

/// Half-open pixel range covering `[lo, hi)`, never empty.
fn pixel_span(lo: f64, hi: f64, limit: u32) -> (u32, u32) {
    let max = f64::from(limit);
    let start = libm::floor(lo.clamp(0.0, max - 1.0)) as u32;
    let end = (libm::ceil(hi.clamp(0.0, max)) as u32).clamp(start + 1, limit);
    (start, end)
}

fn median(samples: &mut [f32]) -> f64 {
    samples.sort_by(f32::total_cmp);
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        f64::from(samples[n / 2])
    } else {
        (f64::from(samples[n / 2 - 1]) + f64::from(samples[n / 2])) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn image(w: u32, h: u32) -> ImageRef {
        ImageRef::new("d", "d.png", w, h).unwrap()
    }

    #[test]
    fn min_max_normalization() {
        let map = DepthMap::from_raw(&image(3, 1), 3, 1, vec![2.0, 6.0, 10.0]).unwrap();
        assert_eq!(map.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let map = DepthMap::from_raw(&image(2, 2), 2, 2, vec![4.2; 4]).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let err = DepthMap::from_raw(&image(2, 2), 2, 3, vec![0.0; 6]);
        assert!(matches!(err, Err(DepthError::DimensionMismatch { .. })));
        let err = DepthMap::from_raw(&image(2, 2), 2, 2, vec![0.0; 3]);
        assert!(matches!(err, Err(DepthError::DimensionMismatch { .. })));
        assert_eq!(DepthMap::from_raw(&image(1, 1), 1, 1, vec![f32::NAN]), Err(DepthError::NonFinite));
    }

    #[test]
    fn median_inside_box() {
        // 4x2 map, raw values are their own normalized values after 0..7 scaling
        let raw: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let map = DepthMap::from_raw(&image(4, 2), 4, 2, raw).unwrap();
        // whole image: 8 samples, middle pair 3/7 and 4/7
        let all = BoundingBox::new(0.0, 0.0, 4.0, 2.0).unwrap();
        assert!((map.median_in_box(&all) - 0.5).abs() < 1e-6);
        // first row, first three pixels: 0, 1/7, 2/7 -> 1/7
        let b = BoundingBox::new(0.0, 0.0, 2.5, 1.0).unwrap();
        assert!((map.median_in_box(&b) - 1.0 / 7.0).abs() < 1e-6);
        // sub-pixel box still samples one pixel
        let tiny = BoundingBox::new(3.2, 1.1, 3.4, 1.3).unwrap();
        assert!((map.median_in_box(&tiny) - 1.0).abs() < 1e-6);
    }
}
