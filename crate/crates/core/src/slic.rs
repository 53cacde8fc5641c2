//! SLIC superpixels: local k-means in joint CIELAB and image-plane space, followed by
//! a connectivity pass that gives every label exactly one 4-connected region.

use std::collections::VecDeque;

use image::RgbImage;

use crate::color::{rgb_to_lab, Lab};
use crate::error::{Error, Result};

/// Superpixel counts swept in the WSI experiments.
pub const SUPERPIXEL_PRESETS: [usize; 3] = [300, 500, 700];
pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelLabeling {
    pub width: usize,
    pub height: usize,
    /// Row-major label ids in `0..centroids.len()`.
    pub labels: Vec<u32>,
    pub centroids: Vec<Centroid>,
    /// The requested cluster count.
    pub k: usize,
}

impl SuperpixelLabeling {
    pub fn num_labels(&self) -> usize {
        self.centroids.len()
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub n_superpixels: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(n_superpixels: usize) -> Self {
        SlicParams {
            n_superpixels,
            compactness: DEFAULT_COMPACTNESS,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Cluster {
    x: f64,
    y: f64,
    lab: Lab,
}

pub fn slic(image: &RgbImage, params: SlicParams) -> Result<SuperpixelLabeling> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let k = params.n_superpixels;
    if k == 0 || k > w * h {
        return Err(Error::Parameter(format!(
            "n_superpixels must lie in 1..={} for a {w}x{h} image, got {k}",
            w * h
        )));
    }
    if params.iterations == 0 {
        return Err(Error::Parameter("SLIC needs at least one iteration".into()));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Parameter("compactness must be positive".into()));
    }
    let lab = rgb_to_lab(image);
    let step = ((w * h) as f64 / k as f64).sqrt();
    let mut clusters = seed_grid(&lab, w, h, k, step);

    // Spatial distance is measured in units of the grid step and weighted by the
    // compactness: D^2 = d_lab^2 + (d_xy / S)^2 * m^2.
    let spatial_weight = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..params.iterations {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (ci, c) in clusters.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            if cy + radius < 0 || cx + radius < 0 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
                    let d = lab[p].dist2(&c.lab) + (dx * dx + dy * dy) * spatial_weight;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        assign_stragglers(&lab, w, &clusters, spatial_weight, &mut labels);
        update_clusters(&lab, w, &labels, &mut clusters);
    }

    let min_size = ((w * h) as f64 / k as f64 / 4.0) as usize;
    let labels = enforce_connectivity(&labels, w, h, min_size);
    let centroids = centroids_of(&lab, w, &labels);
    Ok(SuperpixelLabeling {
        width: w,
        height: h,
        labels,
        centroids,
        k,
    })
}

/// Seeds on a regular `round(W/S) x round(H/S)` grid of cell centres, each nudged to
/// the lowest-gradient pixel of its 3x3 neighbourhood.
fn seed_grid(lab: &[Lab], w: usize, h: usize, k: usize, step: f64) -> Vec<Cluster> {
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let mut nx = nx;
    let mut ny = ny;
    while nx * ny > k && (nx > 1 || ny > 1) {
        if nx >= ny {
            nx -= 1;
        } else {
            ny -= 1;
        }
    }
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let grad = |x: usize, y: usize| -> f64 {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return f64::INFINITY;
        }
        lab[y * w + x + 1].dist2(&lab[y * w + x - 1]) + lab[(y + 1) * w + x].dist2(&lab[(y - 1) * w + x])
    };
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * sx) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * sy) as usize).min(h - 1);
            let (mut bx, mut by, mut best) = (cx, cy, grad(cx, cy));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (x, y) = (cx as isize + dx, cy as isize + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let g = grad(x as usize, y as usize);
                    if g < best {
                        (bx, by, best) = (x as usize, y as usize, g);
                    }
                }
            }
            out.push(Cluster {
                x: bx as f64,
                y: by as f64,
                lab: lab[by * w + bx],
            });
        }
    }
    out
}

/// Pixels outside every search window fall back to the globally nearest cluster.
fn assign_stragglers(lab: &[Lab], w: usize, clusters: &[Cluster], spatial_weight: f64, labels: &mut [u32]) {
    for (p, l) in labels.iter_mut().enumerate() {
        if *l != u32::MAX {
            continue;
        }
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let mut best = (f64::INFINITY, 0u32);
        for (ci, c) in clusters.iter().enumerate() {
            let d = lab[p].dist2(&c.lab) + ((x - c.x).powi(2) + (y - c.y).powi(2)) * spatial_weight;
            if d < best.0 {
                best = (d, ci as u32);
            }
        }
        *l = best.1;
    }
}

fn update_clusters(lab: &[Lab], w: usize, labels: &[u32], clusters: &mut [Cluster]) {
    let mut sums = vec![[0.0f64; 6]; clusters.len()];
    for (p, &l) in labels.iter().enumerate() {
        let s = &mut sums[l as usize];
        s[0] += (p % w) as f64;
        s[1] += (p / w) as f64;
        s[2] += lab[p].l;
        s[3] += lab[p].a;
        s[4] += lab[p].b;
        s[5] += 1.0;
    }
    for (c, s) in clusters.iter_mut().zip(&sums) {
        if s[5] > 0.0 {
            *c = Cluster {
                x: s[0] / s[5],
                y: s[1] / s[5],
                lab: Lab {
                    l: s[2] / s[5],
                    a: s[3] / s[5],
                    b: s[4] / s[5],
                },
            };
        }
    }
}

fn centroids_of(lab: &[Lab], w: usize, labels: &[u32]) -> Vec<Centroid> {
    let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sums = vec![[0.0f64; 6]; n];
    for (p, &l) in labels.iter().enumerate() {
        let s = &mut sums[l as usize];
        s[0] += (p % w) as f64;
        s[1] += (p / w) as f64;
        s[2] += lab[p].l;
        s[3] += lab[p].a;
        s[4] += lab[p].b;
        s[5] += 1.0;
    }
    sums.iter()
        .map(|s| Centroid {
            x: s[0] / s[5],
            y: s[1] / s[5],
            l: s[2] / s[5],
            a: s[3] / s[5],
            b: s[4] / s[5],
        })
        .collect()
}

/// Splits every label into its 4-connected pieces, merges pieces smaller than
/// `min_size` into the neighbouring label that shares the longest boundary with them,
/// and renumbers labels consecutively in raster order.
pub fn enforce_connectivity(labels: &[u32], width: usize, height: usize, min_size: usize) -> Vec<u32> {
    let n = width * height;
    assert_eq!(labels.len(), n, "label raster size");
    // 4-connected pieces of equal label, numbered in raster order.
    let mut piece = vec![u32::MAX; n];
    let mut members: Vec<Vec<u32>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if piece[start] != u32::MAX {
            continue;
        }
        let id = members.len() as u32;
        let mut list = Vec::new();
        piece[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            list.push(p as u32);
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if piece[q] == u32::MAX && labels[q] == labels[start] {
                    piece[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        members.push(list);
    }

    let mut final_label: Vec<Option<u32>> = vec![None; members.len()];
    let mut next = 0u32;
    let mut pending = Vec::new();
    for (id, list) in members.iter().enumerate() {
        if list.len() >= min_size {
            final_label[id] = Some(next);
            next += 1;
        } else {
            pending.push(id);
        }
    }
    // Small pieces adopt the dominant already-labelled neighbour; repeat until stable
    // because a small piece may only touch other small pieces.
    loop {
        let mut changed = false;
        let mut still = Vec::new();
        for &id in &pending {
            match dominant_neighbour(&members[id], &piece, &final_label, width, height) {
                Some(l) => {
                    final_label[id] = Some(l);
                    changed = true;
                }
                None => still.push(id),
            }
        }
        pending = still;
        if pending.is_empty() {
            break;
        }
        if !changed {
            // Isolated small pieces (e.g. the whole image is one small piece).
            let id = pending.remove(0);
            final_label[id] = Some(next);
            next += 1;
        }
    }

    // Renumber in raster order of first appearance.
    let mut remap = vec![u32::MAX; next as usize];
    let mut count = 0u32;
    let mut out = vec![0u32; n];
    for p in 0..n {
        let l = final_label[piece[p] as usize].expect("every piece labelled") as usize;
        if remap[l] == u32::MAX {
            remap[l] = count;
            count += 1;
        }
        out[p] = remap[l];
    }
    out
}

fn dominant_neighbour(
    list: &[u32],
    piece: &[u32],
    final_label: &[Option<u32>],
    width: usize,
    height: usize,
) -> Option<u32> {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    let me = piece[list[0] as usize];
    for &p in list {
        let p = p as usize;
        let (x, y) = (p % width, p / width);
        let mut neigh = [None; 4];
        if x > 0 {
            neigh[0] = Some(p - 1);
        }
        if x + 1 < width {
            neigh[1] = Some(p + 1);
        }
        if y > 0 {
            neigh[2] = Some(p - width);
        }
        if y + 1 < height {
            neigh[3] = Some(p + width);
        }
        for q in neigh.into_iter().flatten() {
            if piece[q] == me {
                continue;
            }
            if let Some(l) = final_label[piece[q] as usize] {
                match counts.iter_mut().find(|(cl, _)| *cl == l) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((l, 1)),
                }
            }
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::SegMask;
    use crate::morphology::{connected_components, Connectivity};
    use image::Rgb;

    fn uniform(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([180, 120, 160]))
    }

    fn label_components(labels: &[u32], w: usize, h: usize) -> usize {
        let n = labels.iter().map(|&l| l + 1).max().unwrap() as usize;
        (0..n as u32)
            .map(|l| {
                let m = SegMask::from_fn(w, h, |x, y| labels[y * w + x] == l);
                connected_components(&m, Connectivity::Four).count
            })
            .filter(|&c| c != 1)
            .count()
    }

    #[test]
    fn single_superpixel() {
        let s = slic(&uniform(20, 10), SlicParams::new(1)).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
        assert_eq!(s.num_labels(), 1);
    }

    #[test]
    fn too_many_superpixels_rejected() {
        assert!(matches!(
            slic(&uniform(4, 4), SlicParams::new(17)),
            Err(Error::Parameter(_))
        ));
        assert!(slic(&uniform(4, 4), SlicParams::new(0)).is_err());
    }

    #[test]
    fn uniform_image_gives_regular_cells() {
        let (w, h, k) = (120usize, 90usize, 48usize);
        let s = slic(
            &uniform(w as u32, h as u32),
            SlicParams {
                compactness: 40.0,
                ..SlicParams::new(k)
            },
        )
        .unwrap();
        let mean = (w * h) as f64 / k as f64;
        let mut areas = vec![0usize; s.num_labels()];
        s.labels.iter().for_each(|&l| areas[l as usize] += 1);
        for a in areas {
            let r = a as f64 / mean;
            assert!((0.5..=2.0).contains(&r), "area ratio {r}");
        }
        assert!(s.num_labels() as f64 <= 1.5 * k as f64);
    }

    #[test]
    fn stray_pixel_is_absorbed() {
        let (w, h) = (8, 8);
        let mut labels: Vec<u32> = (0..w * h).map(|p| if p % w < 4 { 0 } else { 1 }).collect();
        labels[3 * w + 1] = 1;
        let out = enforce_connectivity(&labels, w, h, 4);
        assert_eq!(out[3 * w + 1], 0);
        assert_eq!(out.iter().filter(|&&l| l == 0).count(), 32);
    }

    #[test]
    fn connected_labeling_is_unchanged() {
        let (w, h) = (6, 4);
        let labels: Vec<u32> = (0..w * h).map(|p| ((p % w) / 2) as u32).collect();
        assert_eq!(enforce_connectivity(&labels, w, h, 3), labels);
    }

    #[test]
    fn random_labels_become_connected() {
        use rand::Rng;
        let mut r = crate::rng::seeded(5);
        for _ in 0..20 {
            let (w, h) = (r.gen_range(3..20), r.gen_range(3..20));
            let labels: Vec<u32> = (0..w * h).map(|_| r.gen_range(0..4)).collect();
            let out = enforce_connectivity(&labels, w, h, r.gen_range(0..6));
            assert_eq!(label_components(&out, w, h), 0);
        }
    }
}
