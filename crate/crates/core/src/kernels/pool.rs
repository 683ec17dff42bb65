//! Global reductions over the spatial plane or across channels.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Avg,
    Max,
}

/// `[n, c, h, w] -> [n, c]`. For max, also returns the flat input index of
/// the first maximum in row-major order.
pub fn spatial_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    let denom = T::from_usize(hw).unwrap();
    for (plane_idx, plane) in x.chunks(hw).take(n * c).enumerate() {
        match kind {
            PoolKind::Avg => out.push(plane.iter().copied().sum::<T>() / denom),
            PoolKind::Max => {
                let mut best = 0;
                for (i, v) in plane.iter().enumerate() {
                    if *v > plane[best] {
                        best = i;
                    }
                }
                out.push(plane[best]);
                argmax.push(plane_idx * hw + best);
            }
        }
    }
    (out, argmax)
}

pub fn spatial_backward<T: Scalar>(
    dout: &[T],
    hw: usize,
    kind: PoolKind,
    argmax: &[usize],
    dx: &mut [T],
) {
    match kind {
        PoolKind::Avg => {
            let denom = T::from_usize(hw).unwrap();
            for (plane, g) in dx.chunks_mut(hw).zip(dout) {
                let share = *g / denom;
                for v in plane {
                    *v += share;
                }
            }
        }
        PoolKind::Max => {
            for (idx, g) in argmax.iter().zip(dout) {
                dx[*idx] += *g;
            }
        }
    }
}

/// `[n, c, h, w] -> [n, 1, h, w]`. For max, returns the winning channel per
/// output pixel (first maximum on ties).
pub fn channel_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n * hw];
    let mut arg = vec![0usize; if kind == PoolKind::Max { n * hw } else { 0 }];
    let denom = T::from_usize(c).unwrap();
    for s in 0..n {
        let sample = &x[s * c * hw..(s + 1) * c * hw];
        let dst = &mut out[s * hw..(s + 1) * hw];
        match kind {
            PoolKind::Avg => {
                for ch in 0..c {
                    for (d, v) in dst.iter_mut().zip(&sample[ch * hw..(ch + 1) * hw]) {
                        *d += *v;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d / denom;
                }
            }
            PoolKind::Max => {
                dst.copy_from_slice(&sample[..hw]);
                let arg = &mut arg[s * hw..(s + 1) * hw];
                for ch in 1..c {
                    for p in 0..hw {
                        let v = sample[ch * hw + p];
                        if v > dst[p] {
                            dst[p] = v;
                            arg[p] = ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn channel_backward<T: Scalar>(
    dout: &[T],
    n: usize,
    c: usize,
    hw: usize,
    kind: PoolKind,
    arg: &[usize],
    dx: &mut [T],
) {
    let denom = T::from_usize(c).unwrap();
    for s in 0..n {
        for p in 0..hw {
            let g = dout[s * hw + p];
            match kind {
                PoolKind::Avg => {
                    for ch in 0..c {
                        dx[(s * c + ch) * hw + p] += g / denom;
                    }
                }
                PoolKind::Max => dx[(s * c + arg[s * hw + p]) * hw + p] += g,
            }
        }
    }
}
