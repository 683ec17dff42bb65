//! Per-pixel classification losses over `[n, K, h, w]` logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Softmax over the class axis for each pixel, optionally at temperature.
pub fn softmax_classes<T: Scalar>(
    logits: &[T],
    n: usize,
    k: usize,
    hw: usize,
    temperature: T,
) -> Vec<T> {
    let mut probs = vec![T::zero(); logits.len()];
    for s in 0..n {
        let base = s * k * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(logits[at(c)] / temperature);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (logits[at(c)] / temperature - m).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] = probs[at(c)] / z;
            }
        }
    }
    probs
}

/// Log-sum-exp per pixel, used for a stable log-softmax.
fn log_softmax_at<T: Scalar>(
    logits: &[T],
    base: usize,
    k: usize,
    hw: usize,
    p: usize,
    class: usize,
) -> T {
    let mut m = T::neg_infinity();
    for c in 0..k {
        m = m.max(logits[base + c * hw + p]);
    }
    let mut z = T::zero();
    for c in 0..k {
        z += (logits[base + c * hw + p] - m).exp();
    }
    logits[base + class * hw + p] - m - z.ln()
}

pub struct CrossEntropy<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub counted: usize,
}

/// Mean of `-log softmax(logits)[label]` over pixels whose label is not
/// `ignore_index`. An all-ignored batch has loss zero.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    hw: usize,
    ignore_index: u8,
) -> Result<CrossEntropy<T>> {
    if labels.len() != n * hw {
        return Err(Error::Dimension(format!(
            "{} labels for {} pixels",
            labels.len(),
            n * hw
        )));
    }
    let mut total = T::zero();
    let mut counted = 0usize;
    for s in 0..n {
        for p in 0..hw {
            let y = labels[s * hw + p];
            if y == ignore_index {
                continue;
            }
            if y as usize >= k {
                return Err(Error::Label {
                    label: y as u32,
                    classes: k,
                });
            }
            total -= log_softmax_at(logits, s * k * hw, k, hw, p, y as usize);
            counted += 1;
        }
    }
    let loss = if counted == 0 {
        T::zero()
    } else {
        total / T::from_usize(counted).unwrap()
    };
    Ok(CrossEntropy {
        loss,
        probs: softmax_classes(logits, n, k, hw, T::one()),
        counted,
    })
}

pub fn cross_entropy_backward<T: Scalar>(
    g: T,
    probs: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    hw: usize,
    ignore_index: u8,
    counted: usize,
    dx: &mut [T],
) {
    if counted == 0 {
        return;
    }
    let scale = g / T::from_usize(counted).unwrap();
    for s in 0..n {
        for p in 0..hw {
            let y = labels[s * hw + p];
            if y == ignore_index {
                continue;
            }
            for c in 0..k {
                let i = s * k * hw + c * hw + p;
                let target = if c == y as usize { T::one() } else { T::zero() };
                dx[i] += scale * (probs[i] - target);
            }
        }
    }
}

pub struct Kd<T> {
    pub loss: T,
    pub student_probs: Vec<T>,
    pub teacher_probs: Vec<T>,
}

/// `T^2 * mean_pixels KL(softmax(teacher/T) || softmax(student/T))`.
pub fn kd_forward<T: Scalar>(
    student: &[T],
    teacher: &[T],
    n: usize,
    k: usize,
    hw: usize,
    temperature: T,
) -> Kd<T> {
    let ps = softmax_classes(student, n, k, hw, temperature);
    let pt = softmax_classes(teacher, n, k, hw, temperature);
    let mut total = T::zero();
    for s in 0..n {
        let base = s * k * hw;
        for p in 0..hw {
            for c in 0..k {
                let i = base + c * hw + p;
                if pt[i] > T::zero() {
                    let log_pt = log_softmax_scaled(teacher, base, k, hw, p, c, temperature);
                    let log_ps = log_softmax_scaled(student, base, k, hw, p, c, temperature);
                    total += pt[i] * (log_pt - log_ps);
                }
            }
        }
    }
    let pixels = T::from_usize((n * hw).max(1)).unwrap();
    Kd {
        loss: temperature * temperature * total / pixels,
        student_probs: ps,
        teacher_probs: pt,
    }
}

fn log_softmax_scaled<T: Scalar>(
    z: &[T],
    base: usize,
    k: usize,
    hw: usize,
    p: usize,
    class: usize,
    t: T,
) -> T {
    let mut m = T::neg_infinity();
    for c in 0..k {
        m = m.max(z[base + c * hw + p] / t);
    }
    let mut sum = T::zero();
    for c in 0..k {
        sum += (z[base + c * hw + p] / t - m).exp();
    }
    z[base + class * hw + p] / t - m - sum.ln()
}

pub fn kd_backward<T: Scalar>(
    g: T,
    kd_probs: (&[T], &[T]),
    pixels: usize,
    temperature: T,
    dx: &mut [T],
) {
    let (ps, pt) = kd_probs;
    let scale = g * temperature / T::from_usize(pixels.max(1)).unwrap();
    for ((d, s), t) in dx.iter_mut().zip(ps).zip(pt) {
        *d += scale * (*s - *t);
    }
}
