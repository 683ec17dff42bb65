//! Bilinear resampling with half-pixel centers (align-corners off).

use crate::scalar::Scalar;

/// Source taps for one output coordinate: `(lo, hi, frac)`.
#[derive(Debug, Clone, Copy)]
pub struct AxisTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Output index `i` samples source coordinate `(i + 0.5) * src / dst - 0.5`,
/// clamped to `[0, src - 1]`.
pub fn axis_taps<T: Scalar>(src: usize, dst: usize) -> Vec<AxisTap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            AxisTap {
                lo,
                hi,
                frac: T::from_f64_lossy(frac),
            }
        })
        .collect()
}

/// Resizes `planes` consecutive `[h, w]` planes to `[oh, ow]`.
pub fn forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for ay in &ty {
            let r0 = &plane[ay.lo * w..(ay.lo + 1) * w];
            let r1 = &plane[ay.hi * w..(ay.hi + 1) * w];
            for ax in &tx {
                // lerp form keeps constants and same-size resizes exact
                let top = r0[ax.lo] + ax.frac * (r0[ax.hi] - r0[ax.lo]);
                let bot = r1[ax.lo] + ax.frac * (r1[ax.hi] - r1[ax.lo]);
                out.push(top + ay.frac * (bot - top));
            }
        }
    }
    out
}

pub fn backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let one = T::one();
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (one - ay.frac);
                let bot = v * ay.frac;
                plane[ay.lo * w + ax.lo] += top * (one - ax.frac);
                plane[ay.lo * w + ax.hi] += top * ax.frac;
                plane[ay.hi * w + ax.lo] += bot * (one - ax.frac);
                plane[ay.hi * w + ax.hi] += bot * ax.frac;
            }
        }
    }
}
