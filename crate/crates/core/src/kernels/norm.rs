//! L2 normalization of feature groups and attention-transfer maps.

use crate::scalar::{lit, Scalar};

/// Groups whose L2 norm falls below this pass through unnormalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// How a 4-D feature is partitioned into unit-norm groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormAxis {
    /// Each `[h, w]` plane of each channel.
    #[default]
    ChannelSlice,
    /// Each channel vector at each pixel.
    PixelVector,
}

/// Forward pass result: normalized values plus each group's norm
/// (zero marks a pass-through group).
pub struct Normalized<T> {
    pub values: Vec<T>,
    pub norms: Vec<T>,
}

fn group_indices(
    axis: NormAxis,
    n: usize,
    c: usize,
    hw: usize,
) -> impl Iterator<Item = Vec<usize>> {
    let groups = match axis {
        NormAxis::ChannelSlice => n * c,
        NormAxis::PixelVector => n * hw,
    };
    (0..groups).map(move |g| match axis {
        NormAxis::ChannelSlice => (g * hw..(g + 1) * hw).collect(),
        NormAxis::PixelVector => {
            let (s, p) = (g / hw, g % hw);
            (0..c).map(|ch| (s * c + ch) * hw + p).collect()
        }
    })
}

pub fn normalize_forward<T: Scalar>(
    x: &[T],
    axis: NormAxis,
    n: usize,
    c: usize,
    hw: usize,
) -> Normalized<T> {
    let eps = lit::<T>(DEGENERATE_NORM);
    let mut values = x.to_vec();
    let mut norms = Vec::new();
    for idx in group_indices(axis, n, c, hw) {
        let norm = idx.iter().map(|&i| x[i] * x[i]).sum::<T>().sqrt();
        if norm < eps {
            norms.push(T::zero());
            continue;
        }
        for &i in &idx {
            values[i] = x[i] / norm;
        }
        norms.push(norm);
    }
    Normalized { values, norms }
}

pub fn normalize_backward<T: Scalar>(
    dout: &[T],
    y: &[T],
    norms: &[T],
    axis: NormAxis,
    n: usize,
    c: usize,
    hw: usize,
    dx: &mut [T],
) {
    for (idx, &norm) in group_indices(axis, n, c, hw).zip(norms) {
        if norm == T::zero() {
            for &i in &idx {
                dx[i] += dout[i];
            }
            continue;
        }
        let dot = idx.iter().map(|&i| y[i] * dout[i]).sum::<T>();
        for &i in &idx {
            dx[i] += (dout[i] - y[i] * dot) / norm;
        }
    }
}

/// Activation-based attention map: per-pixel `sum_c |x|^p`, then scaled to
/// unit Frobenius norm per sample. Returns the map, per-sample norms and the
/// raw aggregated map (needed for the gradient).
pub struct AtForward<T> {
    pub map: Vec<T>,
    pub norms: Vec<T>,
    pub degenerate: Vec<bool>,
}

pub fn at_map_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    power: i32,
) -> AtForward<T> {
    let mut agg = vec![T::zero(); n * hw];
    for s in 0..n {
        for ch in 0..c {
            let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (a, v) in agg[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
                *a += v.abs().powi(power);
            }
        }
    }
    let normalized = normalize_forward(&agg, NormAxis::ChannelSlice, n, 1, hw);
    AtForward {
        degenerate: normalized.norms.iter().map(|v| *v == T::zero()).collect(),
        map: normalized.values,
        norms: normalized.norms,
    }
}

pub fn at_map_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    fwd: (&[T], &[T]),
    n: usize,
    c: usize,
    hw: usize,
    power: i32,
    dx: &mut [T],
) {
    let (map, norms) = fwd;
    let mut dagg = vec![T::zero(); n * hw];
    normalize_backward(
        dout,
        map,
        norms,
        NormAxis::ChannelSlice,
        n,
        1,
        hw,
        &mut dagg,
    );
    let p = T::from_i32(power).unwrap();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for q in 0..hw {
                let v = x[base + q];
                let slope = if v == T::zero() {
                    T::zero()
                } else {
                    p * v.abs().powi(power - 1) * v.signum()
                };
                dx[base + q] += dagg[s * hw + q] * slope;
            }
        }
    }
}
