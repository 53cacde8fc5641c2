//! Raw numeric kernels behind the tape operations. All buffers are row-major.

use crate::tensor::{gemm, MatRef, Real};

/// Flush-to-zero and denormals-are-zero for the current thread until dropped.
/// Sigmoid tails and their gradients produce subnormal floats, which slow the matrix
/// kernels down by about half once training settles.
pub(crate) struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let mut saved = 0u32;
            // SAFETY: reads and writes MXCSR through a valid u32; only the FTZ and DAZ
            // bits change and the old value is restored on drop.
            unsafe {
                std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
                let set = saved | FTZ_DAZ;
                std::arch::asm!("ldmxcsr [{}]", in(reg) &set, options(nostack));
            }
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the MXCSR value read in `new`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kh) / self.stride + 1,
            (self.width + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let pad = g.padding as isize;
    for ci in 0..g.channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix >= 0 && ix < g.width as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let pad = g.padding as isize;
    for ci in 0..g.channels {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &s) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] = drow[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], batch: usize, g: &ConvGeom, kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let in_len = g.channels * g.height * g.width;
    let out_len = g.filters * oh * ow;
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * oh * ow]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        gemm(
            MatRef::new(kernel, g.filters, g.patch_len()),
            MatRef::new(cols, g.patch_len(), oh * ow),
            yn,
            false,
        );
        if let Some(b) = bias {
            for (f, row) in yn.chunks_mut(oh * ow).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[f]);
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients for a batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw();
    let in_len = g.channels * g.height * g.width;
    let out_len = g.filters * oh * ow;
    let plen = g.patch_len();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); plen * oh * ow]
    };
    let mut dcol = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); plen * oh * ow]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (f, row) in dyn_.chunks(oh * ow).enumerate() {
                db[f] = db[f] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            gemm(
                MatRef::new(dyn_, g.filters, oh * ow),
                MatRef::t(cols, plen, oh * ow),
                dk,
                true,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    MatRef::t(kernel, g.filters, plen),
                    MatRef::new(dyn_, g.filters, oh * ow),
                    dxn,
                    true,
                );
            } else {
                gemm(
                    MatRef::t(kernel, g.filters, plen),
                    MatRef::new(dyn_, g.filters, oh * ow),
                    &mut dcol,
                    false,
                );
                col2im(&dcol, g, dxn);
            }
        }
    }
}

/// Window maximum with first (row-major) maximum winning ties. Returns values and
/// flat input indices of the winners.
pub(crate) fn maxpool2d_forward<T: Real>(
    x: &[T],
    dims: [usize; 4],
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_nearest<T: Real>(x: &[T], dims: [usize; 4], factor: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Real>(dy: &[T], dims: [usize; 4], factor: usize, dx: &mut [T]) {
    let [n, c, h, w] = dims;
    let ow = w * factor;
    for plane in 0..n * c {
        let src = &dy[plane * h * w * factor * factor..(plane + 1) * h * w * factor * factor];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, row) in src.chunks(ow).enumerate() {
            let drow = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, &v) in row.iter().enumerate() {
                drow[ox / factor] = drow[ox / factor] + v;
            }
        }
    }
}

#[cfg(test)]
mod denormal_tests {
    use super::FlushDenormals;

    #[test]
    fn flush_is_scoped() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!(tiny * half > 0.0);
        {
            let _g = FlushDenormals::new();
            if cfg!(target_arch = "x86_64") {
                assert_eq!(std::hint::black_box(tiny) * half, 0.0);
            }
        }
        assert!(std::hint::black_box(tiny) * half > 0.0);
    }
}
