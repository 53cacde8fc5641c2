//! Shared oracles for the integration tests.
#![allow(dead_code)]

use capsdemm_core::capsnet::{self, CapsConfig, StemLayer};
use capsdemm_core::unet::{self, UNetConfig};
use capsdemm_core::{Result, Tape, Tensor, Var};
use rand::Rng;

pub type R = capsdemm_core::rng::Rng64;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> R {
    capsdemm_core::rng::seeded(seed)
}

pub fn uniform(r: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Uniform in `[-hi, -lo] U [lo, hi]`, keeping inputs off a kink at zero.
pub fn off_zero(r: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Relative error with a floor so vanishing gradients compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between reverse-mode gradients of `f` and central finite
/// differences, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_EPS;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_EPS;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g[j], numeric));
        }
    }
    worst
}

/// `sum(out * proj)` with a fixed random projection, turning any output into a scalar.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let proj = uniform(&mut r, tape.shape(out), -1.0, 1.0);
    let p = tape.constant(proj);
    let m = tape.mul(out, p)?;
    tape.sum(m)
}

/// One random gradient check per operation and composed loss, for instance `seed`.
/// Returns `(name, max relative error)` pairs.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(1));
    let mut out = Vec::new();

    {
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=3);
        let f = r.gen_range(1..=3);
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let h = r.gen_range(k..=k + 4);
        let w = r.gen_range(k..=k + 4);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let kern = uniform(&mut r, &[f, c, k, k], -1.0, 1.0);
        let b = uniform(&mut r, &[f], -1.0, 1.0);
        out.push((
            "conv2d",
            gradcheck(&[x, kern, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
        let (h, w) = (2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3));
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        out.push((
            "maxpool2d",
            gradcheck(&[x], |t, v| {
                let y = t.maxpool2d(v[0], 2, 2)?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let factor = r.gen_range(2..=3);
        let shape = [1, 2, r.gen_range(1..=3), r.gen_range(1..=3)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        out.push((
            "upsample2d_nearest",
            gradcheck(&[x], |t, v| {
                let y = t.upsample2d_nearest(v[0], factor)?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let (n, h, w) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let (ca, cb) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let a = uniform(&mut r, &[n, ca, h, w], -1.0, 1.0);
        let b = uniform(&mut r, &[n, cb, h, w], -1.0, 1.0);
        out.push((
            "concat_channels",
            gradcheck(&[a, b], |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let shape = [r.gen_range(1..=4), r.gen_range(1..=5)];
        let x = off_zero(&mut r, &shape, 0.05, 2.0);
        out.push((
            "relu",
            gradcheck(&[x], |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, seed)
            }),
        ));
        let x = uniform(&mut r, &shape, -4.0, 4.0);
        out.push((
            "sigmoid",
            gradcheck(&[x], |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=3)];
        let axis = r.gen_range(0..3);
        let x = uniform(&mut r, &shape, -3.0, 3.0);
        out.push((
            "softmax",
            gradcheck(&[x], |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
        let a = uniform(&mut r, &shape, -2.0, 2.0);
        let b = uniform(&mut r, &shape, -2.0, 2.0);
        out.push((
            "add",
            gradcheck(&[a.clone(), b.clone()], |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
        out.push((
            "mul",
            gradcheck(&[a.clone(), b], |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
        out.push(("sum", gradcheck(std::slice::from_ref(&a), |t, v| t.sum(v[0]))));
        let numel = shape[0] * shape[1];
        out.push((
            "reshape",
            gradcheck(&[a], |t, v| {
                let y = t.reshape(v[0], &[numel])?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let (types, dim) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let shape = [r.gen_range(1..=2), types * dim, r.gen_range(1..=3), r.gen_range(1..=3)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        out.push((
            "to_capsules",
            gradcheck(&[x], |t, v| {
                let y = t.to_capsules(v[0], types, dim)?;
                project(t, y, seed)
            }),
        ));
    }
    let (m, i, j, d, e) = (
        r.gen_range(1..=3),
        r.gen_range(1..=3),
        r.gen_range(1..=2),
        r.gen_range(1..=3),
        r.gen_range(1..=3),
    );
    {
        let s = off_zero(&mut r, &[m, i, d], 0.1, 1.5);
        out.push((
            "squash",
            gradcheck(&[s], |t, v| {
                let y = t.squash(v[0])?;
                project(t, y, seed)
            }),
        ));
        let u = uniform(&mut r, &[m, i, d], -1.0, 1.0);
        let w = uniform(&mut r, &[i, j, d, e], -1.0, 1.0);
        out.push((
            "capsule_predict",
            gradcheck(&[u, w], |t, v| {
                let y = t.capsule_predict(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
        let c = uniform(&mut r, &[m, i, j], 0.0, 1.0);
        let uhat = uniform(&mut r, &[m, i, j, e], -1.0, 1.0);
        out.push((
            "weighted_sum",
            gradcheck(&[c, uhat.clone()], |t, v| {
                let y = t.weighted_sum(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
        let vv = uniform(&mut r, &[m, j, e], -1.0, 1.0);
        out.push((
            "agreement",
            gradcheck(&[uhat, vv], |t, v| {
                let y = t.agreement(v[0], v[1])?;
                project(t, y, seed)
            }),
        ));
        let x = off_zero(&mut r, &[m, j, e], 0.1, 1.5);
        out.push((
            "norm_last",
            gradcheck(&[x], |t, v| {
                let y = t.norm_last(v[0])?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let (rows, cols) = (r.gen_range(1..=3), r.gen_range(2..=8));
        let k = r.gen_range(1..=cols);
        let x = uniform(&mut r, &[rows, cols], 0.0, 1.0);
        out.push((
            "topk_mean",
            gradcheck(&[x], |t, v| {
                let y = t.topk_mean(v[0], k)?;
                project(t, y, seed)
            }),
        ));
    }
    {
        let n = r.gen_range(1..=6);
        let p = uniform(&mut r, &[n], 0.05, 0.95);
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..2) as f64).collect();
        out.push(("bce", gradcheck(&[p], |t, v| t.bce(v[0], &y))));
    }
    {
        let shape = [r.gen_range(1..=2), 1, r.gen_range(2..=4), r.gen_range(2..=4)];
        let p = uniform(&mut r, &shape, 0.01, 0.99);
        let g: Vec<f64> = (0..p.numel()).map(|_| r.gen_range(0..2) as f64).collect();
        out.push(("dice_loss", gradcheck(&[p], |t, v| t.dice_loss(v[0], &g, 1.0))));
    }
    out.push(("seg_loss graph", seg_graph_check(&mut r, seed)));
    out.push(("bce_loss graph", caps_graph_check(&mut r, seed)));
    out
}

/// Parameters with biases moved off zero. Freshly initialised zero biases put ReLU
/// inputs exactly on the kink wherever the layer input is all zero.
fn generic_point<'a>(params: impl Iterator<Item = (&'a str, &'a Tensor<f64>)>, r: &mut R) -> Vec<Tensor<f64>> {
    params
        .map(|(name, t)| {
            if name.ends_with(".bias") {
                off_zero(r, t.shape(), 0.05, 0.3)
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Full U-Net plus dice loss, gradients w.r.t. every parameter.
fn seg_graph_check(r: &mut R, seed: u64) -> f64 {
    let cfg = UNetConfig {
        depth: 1,
        base_filters: 2,
        kernel_size: 3,
        input_channels: 3,
        train_height: 4,
        train_width: 6,
    };
    let params = unet::build_params::<f64>(&cfg, seed).expect("params");
    let n = r.gen_range(1..=2);
    let x = uniform(r, &[n, 3, cfg.train_height, cfg.train_width], -1.0, 1.0);
    let g: Vec<f64> = (0..n * cfg.train_height * cfg.train_width)
        .map(|_| r.gen_range(0..2) as f64)
        .collect();
    let tensors = generic_point(params.iter(), r);
    gradcheck(&tensors, |t, v| {
        let input = t.constant(x.clone());
        let trace = unet::forward(&cfg, t, v, input)?;
        t.dice_loss(trace.probs, &g, unet::DICE_EPS)
    })
}

/// Stem, capsules, routing, lengths, top-K pooling and BCE, gradients w.r.t. every parameter.
fn caps_graph_check(r: &mut R, seed: u64) -> f64 {
    let cfg = CapsConfig {
        stem: vec![StemLayer {
            filters: 2,
            kernel: 3,
            stride: 1,
        }],
        capsule_types: 2,
        capsule_dim: 3,
        caps_kernel: 3,
        caps_stride: 1,
        secondary_dim: 3,
        routing_iterations: r.gen_range(1..=3),
        k: r.gen_range(1..=4),
        patch_size: 7,
    };
    let params = capsnet::build_params::<f64>(&cfg, seed).expect("params");
    let n = r.gen_range(1..=2);
    let x = uniform(r, &[n, 3, 7, 7], -1.0, 1.0);
    let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..2) as f64).collect();
    let tensors = generic_point(params.iter(), r);
    gradcheck(&tensors, |t, v| {
        let input = t.constant(x.clone());
        let trace = capsnet::forward(&cfg, t, v, input)?;
        t.bce(trace.pooled, &y)
    })
}

/// Disjoint-set forest with path halving and union by size.
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }

    pub fn size_of(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }
}

/// Union-find over pixels equal to `value`, 4- or 8-connected (raster-scan merging of
/// already visited neighbours).
pub fn union_components(vals: &[u8], w: usize, h: usize, value: u8, eight: bool) -> UnionFind {
    let mut uf = UnionFind::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if vals[p] != value {
                continue;
            }
            let mut back = vec![];
            if x > 0 {
                back.push(p - 1);
            }
            if y > 0 {
                back.push(p - w);
                if eight && x > 0 {
                    back.push(p - w - 1);
                }
                if eight && x + 1 < w {
                    back.push(p - w + 1);
                }
            }
            for q in back {
                if vals[q] == value {
                    uf.union(p, q);
                }
            }
        }
    }
    uf
}

/// Hole filling by union-find: a background component is a hole iff none of its
/// pixels touches the border.
pub fn fill_holes_oracle(vals: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut uf = union_components(vals, w, h, 0, false);
    let mut open = std::collections::HashSet::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && vals[y * w + x] == 0 {
                open.insert(uf.find(y * w + x));
            }
        }
    }
    (0..w * h)
        .map(|p| (vals[p] == 1 || !open.contains(&uf.find(p))) as u8)
        .collect()
}

/// Keeps 8-connected foreground components with at least `min_area` pixels.
pub fn remove_small_oracle(vals: &[u8], w: usize, h: usize, min_area: f64) -> Vec<u8> {
    let mut uf = union_components(vals, w, h, 1, true);
    (0..w * h)
        .map(|p| (vals[p] == 1 && uf.size_of(p) as f64 >= min_area) as u8)
        .collect()
}

/// Random binary mask grown from a few seeds so it has both blobs and holes.
pub fn random_mask(r: &mut R, w: usize, h: usize) -> Vec<u8> {
    let density = r.gen_range(0.25..0.75);
    let mut v: Vec<u8> = (0..w * h).map(|_| r.gen_bool(density) as u8).collect();
    // One smoothing pass by majority over the 3x3 neighbourhood makes larger shapes.
    if r.gen_bool(0.5) {
        let src = v.clone();
        for y in 0..h {
            for x in 0..w {
                let mut on = 0;
                let mut n = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            on += src[ny as usize * w + nx as usize] as usize;
                            n += 1;
                        }
                    }
                }
                v[y * w + x] = (2 * on > n) as u8;
            }
        }
    }
    v
}

/// O(n^2) Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Labels whose pixels do not form exactly one 4-connected region, found by BFS.
pub fn disconnected_labels(labels: &[u32], w: usize, h: usize) -> Vec<u32> {
    let mut seen = vec![false; w * h];
    let mut regions: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        let l = labels[start];
        *regions.entry(l).or_default() += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut next = vec![];
            if x > 0 {
                next.push(p - 1);
            }
            if x + 1 < w {
                next.push(p + 1);
            }
            if y > 0 {
                next.push(p - w);
            }
            if y + 1 < h {
                next.push(p + w);
            }
            for q in next {
                if !seen[q] && labels[q] == l {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    let mut bad: Vec<u32> = regions.into_iter().filter(|&(_, n)| n != 1).map(|(l, _)| l).collect();
    bad.sort_unstable();
    bad
}

/// Closed-form CapsDeMM parameter count: each unpadded stem conv `f*c*k*k + f`, the
/// primary capsule conv `(types*dim)*c*k*k + types*dim`, and the routing transforms
/// `types * outputs * dim * secondary_dim`.
pub fn caps_param_formula(cfg: &CapsConfig) -> usize {
    let mut c = 3;
    let mut total = 0;
    for l in &cfg.stem {
        total += l.filters * c * l.kernel * l.kernel + l.filters;
        c = l.filters;
    }
    let prim = cfg.capsule_types * cfg.capsule_dim;
    total += prim * c * cfg.caps_kernel * cfg.caps_kernel + prim;
    total + cfg.capsule_types * capsnet::OUTPUT_CAPSULES * cfg.capsule_dim * cfg.secondary_dim
}

/// Closed-form U-Net parameter count for `k x k` convolutions with biases.
pub fn unet_param_formula(cfg: &UNetConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let k = cfg.kernel_size;
    let f = |s: usize| cfg.base_filters * (1 << s);
    let mut total = 0;
    let mut c = cfg.input_channels;
    for s in 0..cfg.depth {
        total += conv(c, f(s), k) + conv(f(s), f(s), k);
        c = f(s);
    }
    total += conv(c, f(cfg.depth), k) + conv(f(cfg.depth), f(cfg.depth), k);
    for s in (0..cfg.depth).rev() {
        total += conv(f(s + 1) + f(s), f(s), k) + conv(f(s), f(s), k);
    }
    total + conv(f(0), 1, 1)
}

/// Smoothed dice straight from the definition, for cross-checking.
pub fn dice_oracle(pred: &[f64], gt: &[f64], eps: f64) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    (2.0 * inter + eps) / (sg + sp + eps)
}
