//! Raster figures: ROC curves and diagnosis overlays.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::mask::SegMask;
use crate::metrics::RocCurve;
use crate::patches::Window;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Unit-square ROC plot with one polyline per curve, FPR on x and TPR on y.
pub fn roc_plot(curves: &[&RocCurve], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = (size / 12) as f32;
    let span = size as f32 - 2.0 * margin;
    let to_px = |fpr: f64, tpr: f64| (margin + fpr as f32 * span, margin + (1.0 - tpr as f32) * span);
    for g in 1..10 {
        let f = g as f64 / 10.0;
        let light = Rgb([235, 235, 235]);
        draw_line_segment_mut(&mut img, to_px(f, 0.0), to_px(f, 1.0), light);
        draw_line_segment_mut(&mut img, to_px(0.0, f), to_px(1.0, f), light);
    }
    draw_line_segment_mut(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([170, 170, 170]));
    let black = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), black);
    draw_line_segment_mut(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    for (i, c) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in c.points.windows(2) {
            draw_line_segment_mut(
                &mut img,
                to_px(pair[0].fpr, pair[0].tpr),
                to_px(pair[1].fpr, pair[1].tpr),
                color,
            );
        }
    }
    img
}

/// Copy of `image` with the mask outline in green and the given windows boxed in red.
pub fn overlay(image: &RgbImage, mask: &SegMask, boxes: &[Window]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.put_pixel(x as u32, y as u32, Rgb([0, 200, 0]));
            }
        }
    }
    for b in boxes {
        for inset in 0..2u32 {
            if b.width as u32 > 2 * inset && b.height as u32 > 2 * inset {
                let r = Rect::at(b.left as i32 + inset as i32, b.top as i32 + inset as i32)
                    .of_size(b.width as u32 - 2 * inset, b.height as u32 - 2 * inset);
                draw_hollow_rect_mut(&mut out, r, Rgb([220, 20, 20]));
            }
        }
    }
    out
}
