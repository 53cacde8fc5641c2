//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its output value; nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and the
//! backward pass is a single reverse sweep.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{dims4, gemm, MatRef, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
        dims: [usize; 4],
    },
    Concat {
        a: usize,
        b: usize,
        batch: usize,
        len_a: usize,
        len_b: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    SumAll(usize),
    Reshape(usize),
    ToCapsules {
        input: usize,
        dims: [usize; 4],
        types: usize,
        dim: usize,
    },
    Squash {
        input: usize,
        width: usize,
    },
    CapsulePredict {
        u: usize,
        w: usize,
        m: usize,
        i: usize,
        j: usize,
        d: usize,
        e: usize,
    },
    WeightedSum {
        c: usize,
        uhat: usize,
        m: usize,
        i: usize,
        j: usize,
        e: usize,
    },
    Agreement {
        uhat: usize,
        v: usize,
        m: usize,
        i: usize,
        j: usize,
        e: usize,
    },
    NormLast {
        input: usize,
        width: usize,
    },
    TopKMean {
        input: usize,
        cols: usize,
        k: usize,
        picks: Vec<usize>,
    },
    Bce {
        input: usize,
        targets: Vec<T>,
    },
    Dice {
        input: usize,
        targets: Vec<T>,
        batch: usize,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability clamp used inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Non-finite checking follows `debug_assertions`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Forces NaN/Inf detection on every recorded output on or off.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient written by the last [`Tape::backward`], for leaves that require it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0].value;
        let g = node.grad().map(<[T]>::to_vec);
        node.clear_grad();
        g
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel, zero padding,
    /// plus optional per-filter bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input))?;
        let [f, kc, kh, kw] = dims4(self.shape(kernel))?;
        if kc != c {
            return Err(dim_err!("conv2d: input has {c} channels, kernel expects {kc}"));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(dim_err!("conv2d: bias shape {:?}, expected [{f}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.data(input.0),
            n,
            &geom,
            self.data(kernel.0),
            bias.map(|b| self.data(b.0)),
        );
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        let mut inputs = vec![input.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
                batch: n,
            },
            &inputs,
        )
    }

    pub fn maxpool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = dims4(self.shape(input))?;
        if size == 0 || stride == 0 || size > dims[2] || size > dims[3] {
            return Err(dim_err!("maxpool2d: window {size} on input {dims:?}"));
        }
        let (out, argmax) = kernels::maxpool2d_forward(self.data(input.0), dims, size, stride);
        let oh = (dims[2] - size) / stride + 1;
        let ow = (dims[3] - size) / stride + 1;
        let value = Tensor::new(&[dims[0], dims[1], oh, ow], out)?;
        self.push("maxpool2d", value, Op::MaxPool2d { input: input.0, argmax }, &[input.0])
    }

    /// Flat input indices that won each pooling window of a `maxpool2d` node.
    pub fn pool_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool2d { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn upsample2d_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let dims = dims4(self.shape(input))?;
        if factor == 0 {
            return Err(Error::Usage("upsample factor must be >= 1".into()));
        }
        let out = kernels::upsample_nearest(self.data(input.0), dims, factor);
        let value = Tensor::new(&[dims[0], dims[1], dims[2] * factor, dims[3] * factor], out)?;
        self.push(
            "upsample2d_nearest",
            value,
            Op::Upsample {
                input: input.0,
                factor,
                dims,
            },
            &[input.0],
        )
    }

    /// Channels of `a` followed by channels of `b`. Spatial sizes must match exactly.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = dims4(self.shape(a))?;
        let [nb, cb, hb, wb] = dims4(self.shape(b))?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(dim_err!("concat_channels: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (len_a, len_b) = (ca * ha * wa, cb * hb * wb);
        let mut out = Vec::with_capacity(na * (len_a + len_b));
        for n in 0..na {
            out.extend_from_slice(&self.data(a.0)[n * len_a..(n + 1) * len_a]);
            out.extend_from_slice(&self.data(b.0)[n * len_b..(n + 1) * len_b]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        self.push(
            "concat_channels",
            value,
            Op::Concat {
                a: a.0,
                b: b.0,
                batch: na,
                len_a,
                len_b,
            },
            &[a.0, b.0],
        )
    }

    fn map(&mut self, name: &'static str, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op, &[input.0])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.map("relu", input, Op::Relu(input.0), |v| {
            if v < T::zero() {
                T::zero()
            } else {
                v
            }
        })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.map("sigmoid", input, Op::Sigmoid(input.0), sigmoid)
    }

    /// Exp-normalisation along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} for rank {}", shape.len()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let x = self.data(input.0);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                input: input.0,
                outer,
                axis: len,
                inner,
            },
            &[input.0],
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.push("add", value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.push("mul", value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.data(input.0).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(input.0), &[input.0])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().with_requires_grad(false).reshape(shape)?;
        let mut value = value;
        value.clear_grad();
        self.push("reshape", value, Op::Reshape(input.0), &[input.0])
    }

    /// `[N, types*dim, H, W]` conv output to `[N*H*W, types, dim]` capsule vectors;
    /// channel `t*dim + d` is component `d` of capsule type `t`.
    pub fn to_capsules(&mut self, input: Var, types: usize, dim: usize) -> Result<Var> {
        let dims = dims4(self.shape(input))?;
        let [n, c, h, w] = dims;
        if c != types * dim {
            return Err(dim_err!("to_capsules: {c} channels != {types} x {dim}"));
        }
        let x = self.data(input.0);
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (p, &v) in src.iter().enumerate() {
                    out[(b * h * w + p) * c + ch] = v;
                }
            }
        }
        let value = Tensor::new(&[n * h * w, types, dim], out)?;
        self.push(
            "to_capsules",
            value,
            Op::ToCapsules {
                input: input.0,
                dims,
                types,
                dim,
            },
            &[input.0],
        )
    }

    /// Capsule non-linearity along the last axis: `v = |s|^2 / (1 + |s|^2) * s / |s|`.
    pub fn squash(&mut self, input: Var) -> Result<Var> {
        let width = *self.shape(input).last().expect("non-empty shape");
        let x = self.data(input.0);
        let mut out = Vec::with_capacity(x.len());
        for s in x.chunks(width) {
            let f = squash_factor(norm(s));
            out.extend(s.iter().map(|&v| v * f));
        }
        let value = Tensor::new(self.shape(input), out)?;
        self.push("squash", value, Op::Squash { input: input.0, width }, &[input.0])
    }

    /// Per-input predictions `uhat[m,i,j,:] = u[m,i,:] . W[i,j,:,:]` for
    /// `u: [M, I, D]` and `W: [I, J, D, E]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (m, i, d) = match *self.shape(u) {
            [m, i, d] => (m, i, d),
            ref s => return Err(dim_err!("capsule_predict: u must be [M,I,D], got {s:?}")),
        };
        let (wi, j, wd, e) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(dim_err!("capsule_predict: W must be [I,J,D,E], got {s:?}")),
        };
        if wi != i || wd != d {
            return Err(dim_err!(
                "capsule_predict: u {:?} incompatible with W {:?}",
                self.shape(u),
                self.shape(w)
            ));
        }
        let ud = self.data(u.0);
        let wd_ = self.data(w.0);
        let mut out = vec![T::zero(); m * i * j * e];
        let mut block = vec![T::zero(); m * e];
        let mut ublock = vec![T::zero(); m * d];
        for ii in 0..i {
            for (mm, row) in ublock.chunks_mut(d).enumerate() {
                row.copy_from_slice(&ud[(mm * i + ii) * d..][..d]);
            }
            for jj in 0..j {
                let wij = &wd_[(ii * j + jj) * d * e..(ii * j + jj + 1) * d * e];
                gemm(MatRef::new(&ublock, m, d), MatRef::new(wij, d, e), &mut block, false);
                for mm in 0..m {
                    let dst = ((mm * i + ii) * j + jj) * e;
                    out[dst..dst + e].copy_from_slice(&block[mm * e..(mm + 1) * e]);
                }
            }
        }
        let value = Tensor::new(&[m, i, j, e], out)?;
        self.push(
            "capsule_predict",
            value,
            Op::CapsulePredict {
                u: u.0,
                w: w.0,
                m,
                i,
                j,
                d,
                e,
            },
            &[u.0, w.0],
        )
    }

    /// `s[m,j,:] = sum_i c[m,i,j] * uhat[m,i,j,:]`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (m, i, j, e) = match *self.shape(uhat) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(dim_err!("weighted_sum: uhat must be [M,I,J,E], got {s:?}")),
        };
        if self.shape(c) != [m, i, j] {
            return Err(dim_err!("weighted_sum: coupling shape {:?}", self.shape(c)));
        }
        let cd = self.data(c.0);
        let ud = self.data(uhat.0);
        let mut out = vec![T::zero(); m * j * e];
        for mm in 0..m {
            for ii in 0..i {
                for jj in 0..j {
                    let coef = cd[(mm * i + ii) * j + jj];
                    let src = &ud[((mm * i + ii) * j + jj) * e..][..e];
                    let dst = &mut out[(mm * j + jj) * e..][..e];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + coef * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[m, j, e], out)?;
        self.push(
            "weighted_sum",
            value,
            Op::WeightedSum {
                c: c.0,
                uhat: uhat.0,
                m,
                i,
                j,
                e,
            },
            &[c.0, uhat.0],
        )
    }

    /// Routing agreement `a[m,i,j] = uhat[m,i,j,:] . v[m,j,:]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (m, i, j, e) = match *self.shape(uhat) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(dim_err!("agreement: uhat must be [M,I,J,E], got {s:?}")),
        };
        if self.shape(v) != [m, j, e] {
            return Err(dim_err!("agreement: v shape {:?}", self.shape(v)));
        }
        let ud = self.data(uhat.0);
        let vd = self.data(v.0);
        let mut out = vec![T::zero(); m * i * j];
        for mm in 0..m {
            for ii in 0..i {
                for jj in 0..j {
                    let a = &ud[((mm * i + ii) * j + jj) * e..][..e];
                    let b = &vd[(mm * j + jj) * e..][..e];
                    out[(mm * i + ii) * j + jj] = dot(a, b);
                }
            }
        }
        let value = Tensor::new(&[m, i, j], out)?;
        self.push(
            "agreement",
            value,
            Op::Agreement {
                uhat: uhat.0,
                v: v.0,
                m,
                i,
                j,
                e,
            },
            &[uhat.0, v.0],
        )
    }

    /// Euclidean length along the last axis; drops that axis.
    pub fn norm_last(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let out: Vec<T> = self.data(input.0).chunks(width).map(norm).collect();
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = Tensor::new(&out_shape, out)?;
        self.push("norm_last", value, Op::NormLast { input: input.0, width }, &[input.0])
    }

    /// Row-wise mean of the `k` largest entries of a `[rows, cols]` tensor. Among equal
    /// values the lower index is selected first.
    pub fn topk_mean(&mut self, input: Var, k: usize) -> Result<Var> {
        let (rows, cols) = match *self.shape(input) {
            [r, c] => (r, c),
            ref s => return Err(dim_err!("topk_mean expects [rows, cols], got {s:?}")),
        };
        if k == 0 || k > cols {
            return Err(Error::Parameter(format!("top-K size {k} must lie in 1..={cols}")));
        }
        let x = self.data(input.0);
        let mut picks = Vec::with_capacity(rows * k);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let top = top_k_indices(row, k);
            out.push(top.iter().map(|&c| row[c]).sum::<T>() / T::of(k as f64));
            picks.extend(top.into_iter().map(|c| r * cols + c));
        }
        let value = Tensor::new(&[rows], out)?;
        self.push(
            "topk_mean",
            value,
            Op::TopKMean {
                input: input.0,
                cols,
                k,
                picks,
            },
            &[input.0],
        )
    }

    /// Mean binary cross-entropy of probabilities against fixed 0/1 targets, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let p = self.data(probs.0);
        if p.len() != targets.len() {
            return Err(dim_err!("bce: {} probabilities, {} targets", p.len(), targets.len()));
        }
        let loss = p.iter().zip(targets).map(|(&p, &y)| bce_term(p, y)).sum::<T>() / T::of(p.len() as f64);
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                input: probs.0,
                targets: targets.to_vec(),
            },
            &[probs.0],
        )
    }

    /// Batch mean of `1 - (2 sum(G S) + eps) / (sum G + sum S + eps)`, one ratio per
    /// leading-axis sample.
    pub fn dice_loss(&mut self, pred: Var, targets: &[T], eps: T) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        let p = self.data(pred.0);
        if p.len() != targets.len() {
            return Err(dim_err!(
                "dice_loss: {} predictions, {} targets",
                p.len(),
                targets.len()
            ));
        }
        let batch = shape[0];
        let per = p.len() / batch;
        let mut loss = T::zero();
        for b in 0..batch {
            let (a, d) = dice_parts(&p[b * per..(b + 1) * per], &targets[b * per..(b + 1) * per], eps);
            loss = loss + (T::one() - a / d);
        }
        loss = loss / T::of(batch as f64);
        self.push(
            "dice_loss",
            Tensor::scalar(loss),
            Op::Dice {
                input: pred.0,
                targets: targets.to_vec(),
                batch,
                eps,
            },
            &[pred.0],
        )
    }

    /// Back-propagates from a one-element `loss`, writing gradients into every
    /// `requires_grad` leaf reachable from it. Earlier gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.set_grad(g)?;
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let mut dx = self.grad_buf(*input);
                let mut dk = self.grad_buf(*kernel);
                let mut db = bias.and_then(|b| self.grad_buf(b));
                kernels::conv2d_backward(
                    self.data(*input),
                    *batch,
                    geom,
                    self.data(*kernel),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
                if let Some(b) = bias {
                    accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = self.grad_buf(*input);
                if let Some(dx) = dx.as_deref_mut() {
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a] = dx[a] + gv;
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Upsample { input, factor, dims } => {
                let mut dx = self.grad_buf(*input);
                if let Some(dx) = dx.as_deref_mut() {
                    kernels::upsample_nearest_backward(g, *dims, *factor, dx);
                }
                accumulate(grads, *input, dx);
            }
            Op::Concat {
                a,
                b,
                batch,
                len_a,
                len_b,
            } => {
                let mut da = self.grad_buf(*a);
                let mut db = self.grad_buf(*b);
                for n in 0..*batch {
                    let row = &g[n * (len_a + len_b)..(n + 1) * (len_a + len_b)];
                    if let Some(da) = da.as_deref_mut() {
                        da[n * len_a..(n + 1) * len_a].copy_from_slice(&row[..*len_a]);
                    }
                    if let Some(db) = db.as_deref_mut() {
                        db[n * len_b..(n + 1) * len_b].copy_from_slice(&row[*len_a..]);
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Relu(input) => {
                let x = self.data(*input);
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::Sigmoid(input) => {
                let dx = out.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::Softmax {
                input,
                outer,
                axis,
                inner,
            } => {
                let mut dx = vec![T::zero(); out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * axis + k) * inner + i;
                        let dotp: T = (0..*axis).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..*axis {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dotp);
                        }
                    }
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, Some(g.to_vec()));
                accumulate(grads, *b, Some(g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let da = xb.iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                let db = xa.iter().zip(g).map(|(&x, &gv)| x * gv).collect();
                accumulate(grads, *a, Some(da));
                accumulate(grads, *b, Some(db));
            }
            Op::SumAll(input) => {
                let n = self.data(*input).len();
                accumulate(grads, *input, Some(vec![g[0]; n]));
            }
            Op::Reshape(input) => accumulate(grads, *input, Some(g.to_vec())),
            Op::ToCapsules {
                input,
                dims,
                types,
                dim,
            } => {
                let [n, c, h, w] = *dims;
                debug_assert_eq!(c, types * dim);
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for (p, d) in dst.iter_mut().enumerate() {
                            *d = g[(b * h * w + p) * c + ch];
                        }
                    }
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::Squash { input, width } => {
                let x = self.data(*input);
                let mut dx = Vec::with_capacity(x.len());
                for (s, gs) in x.chunks(*width).zip(g.chunks(*width)) {
                    let r = norm(s);
                    let f = squash_factor(r);
                    if r == T::zero() {
                        dx.extend(gs.iter().map(|&gv| gv * f));
                        continue;
                    }
                    // dv/ds = f I + (f'(r) / r) s s^T, with f(r) = r / (1 + r^2).
                    let r2 = r * r;
                    let denom = T::one() + r2;
                    let fprime = (T::one() - r2) / (denom * denom);
                    let coef = fprime / r * dot(s, gs);
                    dx.extend(s.iter().zip(gs).map(|(&sv, &gv)| f * gv + coef * sv));
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::CapsulePredict { u, w, m, i, j, d, e } => {
                let (m, i, j, d, e) = (*m, *i, *j, *d, *e);
                let mut du = self.grad_buf(*u);
                let mut dw = self.grad_buf(*w);
                let ud = self.data(*u);
                let wd = self.data(*w);
                let mut gblock = vec![T::zero(); m * e];
                let mut ublock = vec![T::zero(); m * d];
                let mut dublock = vec![T::zero(); m * d];
                for ii in 0..i {
                    for (mm, row) in ublock.chunks_mut(d).enumerate() {
                        row.copy_from_slice(&ud[(mm * i + ii) * d..][..d]);
                    }
                    dublock.fill(T::zero());
                    for jj in 0..j {
                        for (mm, row) in gblock.chunks_mut(e).enumerate() {
                            row.copy_from_slice(&g[((mm * i + ii) * j + jj) * e..][..e]);
                        }
                        let woff = (ii * j + jj) * d * e;
                        if du.is_some() {
                            gemm(
                                MatRef::new(&gblock, m, e),
                                MatRef::t(&wd[woff..woff + d * e], d, e),
                                &mut dublock,
                                true,
                            );
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            gemm(
                                MatRef::t(&ublock, m, d),
                                MatRef::new(&gblock, m, e),
                                &mut dw[woff..woff + d * e],
                                true,
                            );
                        }
                    }
                    if let Some(du) = du.as_deref_mut() {
                        for (mm, row) in dublock.chunks(d).enumerate() {
                            du[(mm * i + ii) * d..][..d].copy_from_slice(row);
                        }
                    }
                }
                accumulate(grads, *u, du);
                accumulate(grads, *w, dw);
            }
            Op::WeightedSum { c, uhat, m, i, j, e } => {
                let (m, i, j, e) = (*m, *i, *j, *e);
                let cd = self.data(*c);
                let ud = self.data(*uhat);
                let mut dc = vec![T::zero(); m * i * j];
                let mut du = vec![T::zero(); m * i * j * e];
                for mm in 0..m {
                    for ii in 0..i {
                        for jj in 0..j {
                            let k = (mm * i + ii) * j + jj;
                            let gs = &g[(mm * j + jj) * e..][..e];
                            dc[k] = dot(&ud[k * e..(k + 1) * e], gs);
                            for (o, &gv) in du[k * e..(k + 1) * e].iter_mut().zip(gs) {
                                *o = cd[k] * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *c, Some(dc));
                accumulate(grads, *uhat, Some(du));
            }
            Op::Agreement { uhat, v, m, i, j, e } => {
                let (m, i, j, e) = (*m, *i, *j, *e);
                let ud = self.data(*uhat);
                let vd = self.data(*v);
                let mut du = vec![T::zero(); m * i * j * e];
                let mut dv = vec![T::zero(); m * j * e];
                for mm in 0..m {
                    for ii in 0..i {
                        for jj in 0..j {
                            let k = (mm * i + ii) * j + jj;
                            let gv = g[k];
                            let vrow = &vd[(mm * j + jj) * e..][..e];
                            for (o, &vv) in du[k * e..(k + 1) * e].iter_mut().zip(vrow) {
                                *o = gv * vv;
                            }
                            let dvrow = &mut dv[(mm * j + jj) * e..][..e];
                            for (o, &uv) in dvrow.iter_mut().zip(&ud[k * e..(k + 1) * e]) {
                                *o = *o + gv * uv;
                            }
                        }
                    }
                }
                accumulate(grads, *uhat, Some(du));
                accumulate(grads, *v, Some(dv));
            }
            Op::NormLast { input, width } => {
                let x = self.data(*input);
                let mut dx = Vec::with_capacity(x.len());
                for ((s, &n), &gv) in x.chunks(*width).zip(out).zip(g) {
                    if n == T::zero() {
                        dx.extend(std::iter::repeat_n(T::zero(), *width));
                    } else {
                        dx.extend(s.iter().map(|&sv| gv * sv / n));
                    }
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::TopKMean { input, cols, k, picks } => {
                let mut dx = vec![T::zero(); self.data(*input).len()];
                let scale = T::one() / T::of(*k as f64);
                for (n, chunk) in picks.chunks(*k).enumerate() {
                    for &p in chunk {
                        debug_assert_eq!(p / cols, n);
                        dx[p] = dx[p] + g[n] * scale;
                    }
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::Bce { input, targets } => {
                let p = self.data(*input);
                let n = T::of(p.len() as f64);
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| g[0] * bce_grad(p, y) / n)
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::Dice {
                input,
                targets,
                batch,
                eps,
            } => {
                let p = self.data(*input);
                let per = p.len() / batch;
                let two = T::of(2.0);
                let scale = g[0] / T::of(*batch as f64);
                let mut dx = Vec::with_capacity(p.len());
                for b in 0..*batch {
                    let (ps, gs) = (&p[b * per..(b + 1) * per], &targets[b * per..(b + 1) * per]);
                    let (a, d) = dice_parts(ps, gs, *eps);
                    // d(1 - a/d)/ds = -(2 g d - a) / d^2
                    dx.extend(gs.iter().map(|&gt| -scale * (two * gt * d - a) / (d * d)));
                }
                accumulate(grads, *input, Some(dx));
            }
        }
    }

    fn grad_buf(&self, idx: usize) -> Option<Vec<T>> {
        self.nodes[idx]
            .needs_grad
            .then(|| vec![T::zero(); self.nodes[idx].value.numel()])
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, contrib: Option<Vec<T>>) {
    let Some(c) = contrib else { return };
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(c).for_each(|(e, v)| *e = *e + v),
        slot @ None => *slot = Some(c),
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Real>(s: &[T]) -> T {
    dot(s, s).sqrt()
}

/// `|s| / (1 + |s|^2)`: multiplying `s` by this yields the squashed vector.
pub(crate) fn squash_factor<T: Real>(r: T) -> T {
    r / (T::one() + r * r)
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::of(BCE_CLAMP);
    p.max(lo).min(T::one() - lo)
}

fn bce_term<T: Real>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

fn bce_grad<T: Real>(p: T, y: T) -> T {
    if p != clamp_prob(p) {
        return T::zero();
    }
    -(y / p) + (T::one() - y) / (T::one() - p)
}

fn dice_parts<T: Real>(pred: &[T], gt: &[T], eps: T) -> (T, T) {
    let inter: T = pred.iter().zip(gt).map(|(&s, &g)| s * g).sum();
    let sg: T = gt.iter().copied().sum();
    let ss: T = pred.iter().copied().sum();
    (T::of(2.0) * inter + eps, sg + ss + eps)
}

/// Indices of the `k` largest values, largest first; ties resolved by lower index.
pub(crate) fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Direct six-loop reference cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = dims4(x.shape()).unwrap();
        let [f, _, kh, kw] = dims4(k.shape()).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for bn in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bn * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bn * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_diagonal_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = random(&[2, 3, 8, 8], 1);
        let k = random(&[4, 3, 5, 5], 2);
        let b = random(&[4], 3);
        let expected = conv_oracle(&x, &k, b.data(), 2, 2);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv2d(xv, kv, Some(bv), 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_output_shape_formula() {
        for (h, k, s, p) in [(7, 3, 1, 1), (7, 3, 2, 0), (9, 5, 2, 2), (224, 5, 2, 0), (6, 6, 3, 0)] {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, h, h + 1]));
            let kv = tape.constant(Tensor::zeros(&[2, 1, k, k]));
            let y = tape.conv2d(x, kv, None, s, p).unwrap();
            assert_eq!(
                tape.shape(y),
                &[1, 2, (h + 2 * p - k) / s + 1, (h + 1 + 2 * p - k) / s + 1]
            );
        }
    }

    #[test]
    fn maxpool_basic_and_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let r = random(&[1, 2, 6, 6], 9);
        let x = tape.constant(r.clone());
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let mut expected = Vec::new();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(r.data()[(c * 6 + 2 * oy + dy) * 6 + 2 * ox + dx]);
                        }
                    }
                    expected.push(m);
                }
            }
        }
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 4, 4], 3.0));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        let mut expected = vec![0.0; 16];
        for i in [0, 2, 8, 10] {
            expected[i] = 1.0;
        }
        assert_eq!(g, expected.as_slice());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2d_nearest(x, 2).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let y1 = tape.upsample2d_nearest(x, 1).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(x).data());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = random(&[2, 1, 3, 2], 4);
        let b = random(&[2, 3, 3, 2], 5);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.concat_channels(av, bv).unwrap();
        assert_eq!(tape.shape(c), &[2, 4, 3, 2]);
        assert_eq!(tape.value(c).slice_channels(0, 1).unwrap(), a);
        assert_eq!(tape.value(c).slice_channels(1, 3).unwrap(), b);

        let ones = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let c = tape.concat_channels(ones, zeros).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 1., 1., 1., 0., 0., 0., 0.]);

        let wrong = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(tape.concat_channels(ones, wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_activations() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.5);
        let eq = tape.constant(Tensor::full(&[4], 0.3));
        let sm = tape.softmax(eq, 0).unwrap();
        let v = tape.value(sm).data();
        assert!(v.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tape.softmax(eq, 1).is_err());
    }

    #[test]
    fn softmax_shift_invariant_along_middle_axis() {
        let base = random(&[2, 5, 3], 11);
        let shifted = Tensor::new(&[2, 5, 3], base.data().iter().map(|v| v + 17.5).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(base), tape.constant(shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let v = tape.value(sa).data();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|k| v[(o * 5 + k) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[0.1, -0.2, 0.3]));
        let x = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn chain_rule_by_hand() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(w).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let r = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::Usage(_))));
    }

    #[test]
    fn finite_check_reports_nan() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(t(&[2], &[1.0, f64::NAN]));
        assert!(matches!(tape.relu(x), Err(Error::NonFinite("relu"))));
        let mut lax = Tape::new().with_finite_checks(false);
        let x = lax.constant(t(&[2], &[1.0, f64::NAN]));
        assert!(lax.relu(x).is_ok());
    }

    #[test]
    fn topk_mean_values_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.9, 0.1, 0.8]));
        let k1 = tape.topk_mean(x, 1).unwrap();
        let k2 = tape.topk_mean(x, 2).unwrap();
        let k3 = tape.topk_mean(x, 3).unwrap();
        assert_eq!(tape.value(k1).data(), &[0.9]);
        assert!((tape.value(k2).data()[0] - 0.85).abs() < 1e-15);
        assert!((tape.value(k3).data()[0] - 0.6).abs() < 1e-15);
        assert!(matches!(tape.topk_mean(x, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        for y in [0.0, 1.0] {
            let mut tape = Tape::new();
            let p = tape.constant(t(&[1], &[0.5]));
            let l = tape.bce(p, &[y]).unwrap();
            assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0 - 1e-12, 1e-12]));
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(random(&[2, 3, 7, 7], 21));
            let k = tape.param(random(&[4, 3, 3, 3], 22));
            let y = tape.conv2d(x, k, None, 1, 1).unwrap();
            let r = tape.relu(y).unwrap();
            let p = tape.maxpool2d(r, 2, 2).unwrap();
            let l = tape.sum(p).unwrap();
            tape.backward(l).unwrap();
            tape.grad(k).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
