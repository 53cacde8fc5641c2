//! Binary rasters aligned to an image (1 = stratum corneum).

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{dim_err, Error, Result};
use crate::io::save_png;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(dim_err!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            ));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(SegMask { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SegMask {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y) as u8);
            }
        }
        SegMask { width, height, values }
    }

    /// Thresholds a row-major probability map at `threshold` (value >= threshold is 1).
    pub fn from_probabilities(width: usize, height: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        if probs.len() != width * height {
            return Err(dim_err!(
                "probability map has {} cells for {width}x{height}",
                probs.len()
            ));
        }
        Ok(SegMask {
            width,
            height,
            values: probs.iter().map(|&p| (p >= threshold) as u8).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &SegMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest-neighbour resampling: destination pixel `x` reads source column
    /// `floor((x + 0.5) * src_w / dst_w)`, likewise for rows.
    pub fn resize_nearest(&self, width: usize, height: usize) -> SegMask {
        let xs = nearest_index_map(self.width, width);
        let ys = nearest_index_map(self.height, height);
        let mut values = Vec::with_capacity(width * height);
        for &sy in &ys {
            let row = &self.values[sy * self.width..(sy + 1) * self.width];
            values.extend(xs.iter().map(|&sx| row[sx]));
        }
        SegMask { width, height, values }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels at 128 or above read as foreground.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        SegMask {
            width: img.width() as usize,
            height: img.height() as usize,
            values: img.pixels().map(|p| (p.0[0] >= 128) as u8).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(path, &self.to_gray_image())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray_image(&img))
    }

    /// Dice overlap `2|A∩B| / (|A| + |B|)` between two binary masks (1.0 when both empty).
    pub fn dice(&self, other: &SegMask) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(dim_err!(
                "mask {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        let inter = self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count();
        let total = self.count_ones() + other.count_ones();
        Ok(if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        })
    }
}

/// Source index for every destination index under the half-pixel-centre convention.
pub fn nearest_index_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|d| (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary() {
        assert!(SegMask::new(2, 1, vec![0, 2]).is_err());
        assert!(SegMask::new(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let m = SegMask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(SegMask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn nearest_resize_matches_integer_oracle() {
        // (2d + 1) * src / (2 dst) in integer arithmetic is the same half-pixel rule.
        let m = SegMask::from_fn(13, 9, |x, y| (x * 7 + y * 3) % 5 < 2);
        for (w, h) in [(40, 31), (5, 4), (13, 9), (26, 18)] {
            let r = m.resize_nearest(w, h);
            for y in 0..h {
                for x in 0..w {
                    let sx = ((2 * x + 1) * 13 / (2 * w)).min(12);
                    let sy = ((2 * y + 1) * 9 / (2 * h)).min(8);
                    assert_eq!(r.get(x, y), m.get(sx, sy));
                }
            }
        }
    }

    #[test]
    fn dice_of_masks() {
        let a = SegMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = SegMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(a.dice(&a).unwrap(), 1.0);
        assert_eq!(a.dice(&b).unwrap(), 0.5);
        assert_eq!(SegMask::zeros(3, 3).dice(&SegMask::zeros(3, 3)).unwrap(), 1.0);
    }
}
