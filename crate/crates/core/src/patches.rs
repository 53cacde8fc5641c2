//! Square patches centred on superpixel centroids that fall inside the stratum corneum.

use image::RgbImage;

use crate::error::{dim_err, Error, Result};
use crate::mask::SegMask;
use crate::slic::SuperpixelLabeling;

pub const DEFAULT_PATCH_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    /// Inclusive containment test on pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left as f64
            && y >= self.top as f64
            && x <= (self.left + self.width - 1) as f64
            && y <= (self.top + self.height - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    /// Rounded centroid pixel.
    pub center: (usize, usize),
    pub window: Window,
    pub superpixel: u32,
}

/// Window of `size` whose centre is as close to `c` as the image bounds allow.
pub fn clamped_window(c: (usize, usize), size: usize, width: usize, height: usize) -> Window {
    let place = |c: usize, extent: usize| c.saturating_sub(size / 2).min(extent - size);
    Window {
        left: place(c.0, width),
        top: place(c.1, height),
        width: size,
        height: size,
    }
}

/// One patch per superpixel whose rounded centroid lies on the mask, in label order.
pub fn select_patches(labels: &SuperpixelLabeling, sc_mask: &SegMask, patch_size: usize) -> Result<Vec<PatchSpec>> {
    let (w, h) = (labels.width, labels.height);
    if sc_mask.width() != w || sc_mask.height() != h {
        return Err(dim_err!(
            "superpixels are {w}x{h} but mask is {}x{}",
            sc_mask.width(),
            sc_mask.height()
        ));
    }
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Err(Error::Parameter(format!(
            "patch size {patch_size} does not fit a {w}x{h} image"
        )));
    }
    let mut out = Vec::new();
    for (id, c) in labels.centroids.iter().enumerate() {
        let cx = (c.x.round() as usize).min(w - 1);
        let cy = (c.y.round() as usize).min(h - 1);
        if sc_mask.get(cx, cy) {
            out.push(PatchSpec {
                center: (cx, cy),
                window: clamped_window((cx, cy), patch_size, w, h),
                superpixel: id as u32,
            });
        }
    }
    Ok(out)
}

pub fn crop(image: &RgbImage, window: &Window) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if window.width == 0 || window.height == 0 || window.left + window.width > w || window.top + window.height > h {
        return Err(Error::Parameter(format!("window {window:?} outside a {w}x{h} image")));
    }
    Ok(image::imageops::crop_imm(
        image,
        window.left as u32,
        window.top as u32,
        window.width as u32,
        window.height as u32,
    )
    .to_image())
}
