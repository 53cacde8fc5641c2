//! Conversions between 8-bit RGB images and network input tensors.

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Bilinear resample of an RGB image (no-op when the size already matches).
pub fn resize_rgb(image: &RgbImage, width: usize, height: usize) -> RgbImage {
    if image.width() as usize == width && image.height() as usize == height {
        return image.clone();
    }
    imageops::resize(image, width as u32, height as u32, FilterType::Triangle)
}

pub fn hflip(image: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(image)
}

/// Writes one image into a `[3, H, W]` planar buffer, scaled to `[-1, 1]`.
fn write_planar<T: Real>(image: &RgbImage, out: &mut [T]) {
    let plane = (image.width() * image.height()) as usize;
    for (i, px) in image.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = T::of(px.0[ch] as f64 / 127.5 - 1.0);
        }
    }
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor with values in `[-1, 1]`.
pub fn images_to_tensor<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| dim_err!("empty image batch"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let per = 3 * w * h;
    let mut data = vec![T::zero(); images.len() * per];
    for (img, chunk) in images.iter().zip(data.chunks_mut(per)) {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(dim_err!(
                "image batch mixes {w}x{h} with {}x{}",
                img.width(),
                img.height()
            ));
        }
        write_planar(img, chunk);
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn planar_layout_and_scale() {
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([255, 0, if x == 1 { 51 } else { 0 }]));
        let t = images_to_tensor::<f64>(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let want = [1.0, 1.0, -1.0, -1.0, -1.0, -0.6];
        assert!(t.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        let other = RgbImage::new(3, 1);
        assert!(images_to_tensor::<f32>(&[&img, &other]).is_err());
    }

    #[test]
    fn resize_keeps_constant_colour() {
        let img = RgbImage::from_pixel(40, 30, Rgb([10, 200, 90]));
        let r = resize_rgb(&img, 16, 12);
        assert_eq!((r.width(), r.height()), (16, 12));
        assert!(r.pixels().all(|p| p.0 == [10, 200, 90]));
    }
}
