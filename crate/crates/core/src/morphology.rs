//! Post-processing of predicted masks: hole filling and removal of small isolated
//! components. Foreground uses 8-connectivity, background 4-connectivity.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::SegMask;

/// Default minimum component area as a fraction of the image.
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Parameter(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// Foreground labels `1..=count` in raster order of first appearance; background is 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledComponents {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `areas[l - 1]` is the pixel count of label `l`.
    pub areas: Vec<usize>,
}

fn neighbours(x: usize, y: usize, w: usize, h: usize, conn: Connectivity) -> impl Iterator<Item = (usize, usize)> {
    conn.offsets().iter().filter_map(move |&(dx, dy)| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        (nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize).then_some((nx as usize, ny as usize))
    })
}

/// Flood-fill labelling of pixels whose value equals `target`.
fn label_value(mask: &SegMask, target: u8, conn: Connectivity) -> LabeledComponents {
    let (w, h) = (mask.width(), mask.height());
    let vals = mask.values();
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if vals[start] != target || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            area += 1;
            for (nx, ny) in neighbours(p % w, p / w, w, h, conn) {
                let q = ny * w + nx;
                if vals[q] == target && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            }
        }
        areas.push(area);
    }
    LabeledComponents {
        width: w,
        height: h,
        labels,
        count: areas.len(),
        areas,
    }
}

pub fn connected_components(mask: &SegMask, connectivity: Connectivity) -> LabeledComponents {
    label_value(mask, 1, connectivity)
}

/// Sets to foreground every background pixel not 4-connected to the image border.
pub fn fill_holes(mask: &SegMask) -> SegMask {
    let (w, h) = (mask.width(), mask.height());
    let vals = mask.values();
    let mut reached = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let on_border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            let p = y * w + x;
            if on_border && vals[p] == 0 && !reached[p] {
                reached[p] = true;
                queue.push_back(p);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for (nx, ny) in neighbours(p % w, p / w, w, h, Connectivity::Four) {
            let q = ny * w + nx;
            if vals[q] == 0 && !reached[q] {
                reached[q] = true;
                queue.push_back(q);
            }
        }
    }
    let values = vals.iter().zip(&reached).map(|(&v, &r)| (v == 1 || !r) as u8).collect();
    SegMask::new(w, h, values).expect("same dimensions")
}

/// Deletes 8-connected foreground components with area below
/// `min_area_fraction * width * height`.
pub fn remove_small_components(mask: &SegMask, min_area_fraction: f64) -> Result<SegMask> {
    if !(0.0..=1.0).contains(&min_area_fraction) {
        return Err(Error::Parameter(format!(
            "min_area_fraction {min_area_fraction} outside [0, 1]"
        )));
    }
    let min_area = min_area_fraction * (mask.width() * mask.height()) as f64;
    let comps = connected_components(mask, Connectivity::Eight);
    let keep: Vec<bool> = comps.areas.iter().map(|&a| a as f64 >= min_area).collect();
    let values = comps
        .labels
        .iter()
        .map(|&l| (l != 0 && keep[l as usize - 1]) as u8)
        .collect();
    SegMask::new(mask.width(), mask.height(), values)
}

/// Hole filling followed by small-component removal at `min_area_fraction`.
pub fn postprocess_with(mask: &SegMask, min_area_fraction: f64) -> Result<SegMask> {
    remove_small_components(&fill_holes(mask), min_area_fraction)
}

pub fn postprocess(mask: &SegMask) -> SegMask {
    postprocess_with(mask, DEFAULT_MIN_AREA_FRACTION).expect("default fraction is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&str]) -> SegMask {
        let h = rows.len();
        let w = rows[0].len();
        SegMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = grid(&["#.", ".#"]);
        assert_eq!(connected_components(&m, Connectivity::Four).count, 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).count, 1);
        assert_eq!(
            connected_components(&SegMask::zeros(4, 4), Connectivity::Eight).count,
            0
        );
    }

    #[test]
    fn labels_follow_raster_order() {
        let m = grid(&["..#", "#..", "..#"]);
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.labels, vec![0, 0, 1, 2, 0, 0, 0, 0, 3]);
        assert_eq!(c.areas, vec![1, 1, 1]);
    }

    #[test]
    fn donut_is_filled() {
        let m = grid(&["#####", "#...#", "#...#", "#...#", "#####"]);
        assert_eq!(fill_holes(&m), SegMask::from_fn(5, 5, |_, _| true));
    }

    #[test]
    fn open_cavity_is_not_filled() {
        let m = grid(&["#####", "#...#", "#...#", "#...#", "##.##"]);
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn diagonal_gap_seals_a_hole_under_four_connected_background() {
        // The centre touches the outside only diagonally, so it is a hole.
        let m = grid(&[".#.", "#.#", ".#."]);
        assert!(fill_holes(&m).get(1, 1));
    }

    #[test]
    fn small_components() {
        let mut m = SegMask::zeros(100, 100);
        m.set(50, 50, true);
        assert!(remove_small_components(&m, 0.001).unwrap().is_empty());
        assert_eq!(remove_small_components(&m, 0.0).unwrap(), m);
        assert!(remove_small_components(&m, 1.5).is_err());
        assert!(remove_small_components(&m, -0.1).is_err());
    }

    #[test]
    fn donut_with_speck() {
        let mut m = SegMask::zeros(60, 60);
        for y in 10..30 {
            for x in 10..30 {
                let ring = !(14..26).contains(&x) || !(14..26).contains(&y);
                m.set(x, y, ring);
            }
        }
        m.set(50, 50, true);
        let out = postprocess(&m);
        let expected = SegMask::from_fn(60, 60, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
        assert_eq!(out, expected);
        assert_eq!(postprocess(&out), out);
        assert!(postprocess(&SegMask::zeros(8, 8)).is_empty());
    }
}
