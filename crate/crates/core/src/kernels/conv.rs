//! 2-D cross-correlation via im2col and a blocked matrix product.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, ci, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input {x:?} is not rank 4"
                )))
            }
        };
        let (co, kci, kh, kw) = match *k {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d kernel {k:?} is not rank 4"
                )))
            }
        };
        if kci != ci {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride must be positive".into()));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * pad) as isize - k as isize;
            if span < 0 || k == 0 {
                return Err(Error::Geometry(format!(
                    "kernel {k} does not fit extent {size} with pad {pad}"
                )));
            }
            Ok(span as usize / stride + 1)
        };
        let oh = extent(h, kh)?;
        let ow = extent(w, kw)?;
        Ok(ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.co, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one sample `[ci, h, w]` into `[ci*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let pix = g.pixels();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into one sample `[ci, h, w]`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pix = g.pixels();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let in_stride = g.ci * g.h * g.w;
    let out_stride = g.co * g.pixels();
    let mut out = vec![T::zero(); g.n * out_stride];
    if out_stride == 0 {
        return out;
    }
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(s, y)| {
            let xs = &x[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(
                    g.co,
                    g.ci,
                    g.pixels(),
                    T::one(),
                    kernel,
                    false,
                    xs,
                    false,
                    T::zero(),
                    y,
                );
            } else {
                let mut cols = vec![T::zero(); g.patch() * g.pixels()];
                im2col(xs, g, &mut cols);
                T::gemm(
                    g.co,
                    g.patch(),
                    g.pixels(),
                    T::one(),
                    kernel,
                    false,
                    &cols,
                    false,
                    T::zero(),
                    y,
                );
            }
            if let Some(b) = bias {
                for (o, plane) in y.chunks_mut(g.pixels()).enumerate() {
                    for v in plane {
                        *v += b[o];
                    }
                }
            }
        });
    out
}

/// Gradients of a convolution. Each is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_k, want_b) = want;
    let in_stride = g.ci * g.h * g.w;
    let pix = g.pixels();
    let out_stride = g.co * pix;
    let ksize = g.co * g.patch();

    // Per-sample partials, reduced afterwards in sample order so the result
    // does not depend on the thread count.
    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_stride..(s + 1) * in_stride];
            let dy = &dout[s * out_stride..(s + 1) * out_stride];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else if want_k {
                let mut c = vec![T::zero(); g.patch() * pix];
                im2col(xs, g, &mut c);
                cols_owned = c;
                &cols_owned
            } else {
                &[]
            };
            let dk = want_k.then(|| {
                let mut dk = vec![T::zero(); ksize];
                T::gemm(
                    g.co,
                    pix,
                    g.patch(),
                    T::one(),
                    dy,
                    false,
                    cols,
                    true,
                    T::zero(),
                    &mut dk,
                );
                dk
            });
            let dx = want_x.then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); in_stride];
                    T::gemm(
                        g.ci,
                        g.co,
                        pix,
                        T::one(),
                        kernel,
                        true,
                        dy,
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                } else {
                    let mut dcols = vec![T::zero(); g.patch() * pix];
                    T::gemm(
                        g.patch(),
                        g.co,
                        pix,
                        T::one(),
                        kernel,
                        true,
                        dy,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); in_stride];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let mut grads = ConvGrads {
        input: want_x.then(|| Vec::with_capacity(g.n * in_stride)),
        kernel: want_k.then(|| vec![T::zero(); ksize]),
        bias: None,
    };
    for (dx, dk) in partials {
        if let (Some(acc), Some(dx)) = (grads.input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (grads.kernel.as_mut(), dk) {
            for (a, v) in acc.iter_mut().zip(dk) {
                *a += v;
            }
        }
    }
    if want_b {
        let mut db = vec![T::zero(); g.co];
        for s in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = s * out_stride + o * pix;
                *acc += dout[start..start + pix].iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(db);
    }
    grads
}
