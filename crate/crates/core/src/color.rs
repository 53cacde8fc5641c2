//! sRGB to CIELAB (D65 white point).

use image::RgbImage;

const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub fn dist2(&self, other: &Lab) -> f64 {
        let (dl, da, db) = (self.l - other.l, self.a - other.a, self.b - other.b);
        dl * dl + da * da + db * db
    }
}

fn linearize(c: u8) -> f64 {
    let v = c as f64 / 255.0;
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> Lab {
    let [r, g, b] = rgb.map(linearize);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / WHITE[0]), lab_f(y / WHITE[1]), lab_f(z / WHITE[2]));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Row-major CIELAB values for every pixel.
pub fn rgb_to_lab(img: &RgbImage) -> Vec<Lab> {
    let mut cache = std::collections::HashMap::new();
    img.pixels()
        .map(|p| *cache.entry(p.0).or_insert_with(|| rgb_pixel_to_lab(p.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = rgb_pixel_to_lab([255, 255, 255]);
        assert!((w.l - 100.0).abs() < 1e-3 && w.a.abs() < 1e-2 && w.b.abs() < 1e-2);
        let k = rgb_pixel_to_lab([0, 0, 0]);
        assert_eq!((k.l, k.a, k.b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mid_gray_matches_luminance_formula() {
        // For gray, Y equals the linearised channel and L depends on Y alone.
        let v: f64 = 119.0 / 255.0;
        let y = ((v + 0.055) / 1.055).powf(2.4);
        let l = 116.0 * y.cbrt() - 16.0;
        let g = rgb_pixel_to_lab([119, 119, 119]);
        assert!((g.l - l).abs() < 0.1, "{} vs {l}", g.l);
        assert!(g.a.abs() < 0.05 && g.b.abs() < 0.05);
    }

    #[test]
    fn whole_image_conversion() {
        let img = RgbImage::from_fn(3, 2, |x, _| image::Rgb([x as u8 * 100, 20, 30]));
        let lab = rgb_to_lab(&img);
        assert_eq!(lab.len(), 6);
        assert_eq!(lab[4], rgb_pixel_to_lab([100, 20, 30]));
    }
}
