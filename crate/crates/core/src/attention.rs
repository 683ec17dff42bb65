//! Channel-then-spatial attention refinement (CBAM) and the parameter-free
//! activation map used by attention transfer.
//!
//! Refinement of a feature `F: [n, c, h, w]`:
//!
//! ```text
//! M_C(F) = sigmoid( MLP(avgpool_hw(F)) + MLP(maxpool_hw(F)) )       [n, c, 1, 1]
//! M_S(F) = sigmoid( conv7x7([avgpool_c(F); maxpool_c(F)]) )          [n, 1, h, w]
//! F'  = M_C(F)  * F
//! F'' = M_S(F') * F'
//! ```
//!
//! `MLP(d) = W1 relu(W0 d + b0) + b1` with a single copy of the weights used
//! for both pooled descriptors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::kernels::PoolKind;
use crate::scalar::Scalar;
use crate::tape::{Param, Tape, Var};

pub const SPATIAL_KERNEL: usize = 7;
pub const DEFAULT_REDUCTION: usize = 8;

/// Learnable state of one attention block.
#[derive(Debug, Clone)]
pub struct CbamParams<T: Scalar = f64> {
    channels: usize,
    reduction: usize,
    pub w0: Param<T>,
    pub b0: Param<T>,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub spatial_kernel: Param<T>,
    pub spatial_bias: Param<T>,
}

impl<T: Scalar> CbamParams<T> {
    fn check(channels: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "attention block needs channels divisible by the reduction ratio, got {channels} / {reduction}"
            )));
        }
        Ok(channels / reduction)
    }

    /// All weights and biases zero: both gates are exactly 0.5.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::check(channels, reduction)?;
        Ok(CbamParams {
            channels,
            reduction,
            w0: init::zeros(&[hidden, channels])?,
            b0: init::zeros(&[hidden])?,
            w1: init::zeros(&[channels, hidden])?,
            b1: init::zeros(&[channels])?,
            spatial_kernel: init::zeros(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL])?,
            spatial_bias: init::zeros(&[1])?,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::check(channels, reduction)?;
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(CbamParams {
            channels,
            reduction,
            w0: init::uniform(&[hidden, channels], bound(channels), rng)?,
            b0: init::zeros(&[hidden])?,
            w1: init::uniform(&[channels, hidden], bound(hidden), rng)?,
            b1: init::zeros(&[channels])?,
            spatial_kernel: init::uniform(
                &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL],
                bound(2 * SPATIAL_KERNEL * SPATIAL_KERNEL),
                rng,
            )?,
            spatial_bias: init::zeros(&[1])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn params(&self) -> [(&'static str, &Param<T>); 6] {
        [
            ("w0", &self.w0),
            ("b0", &self.b0),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("spatial_kernel", &self.spatial_kernel),
            ("spatial_bias", &self.spatial_bias),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 6] {
        [
            ("w0", &mut self.w0),
            ("b0", &mut self.b0),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("spatial_kernel", &mut self.spatial_kernel),
            ("spatial_bias", &mut self.spatial_bias),
        ]
    }

    pub fn freeze(&mut self) {
        for (_, p) in self.params_mut() {
            p.set_trainable(false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|(_, p)| !p.is_trainable())
    }
}

/// Channel gate `M_C` and spatial gate `M_S` of one refinement.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    pub channel: Var,
    pub spatial: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Refined {
    /// `F'' = M_S(F') * F'`
    pub refined: Var,
    /// `F' = M_C(F) * F`
    pub channel_refined: Var,
    pub maps: AttentionMaps,
}

fn shared_mlp<T: Scalar>(tape: &mut Tape<T>, d: Var, p: &CbamParams<T>) -> Result<Var> {
    let (w0, b0, w1, b1) = (
        tape.param(&p.w0)?,
        tape.param(&p.b0)?,
        tape.param(&p.w1)?,
        tape.param(&p.b1)?,
    );
    let h = tape.dense(d, w0, Some(b0))?;
    let h = tape.relu(h)?;
    tape.dense(h, w1, Some(b1))
}

/// `M_C(F)`, shaped `[n, c, 1, 1]`.
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, f: Var, p: &CbamParams<T>) -> Result<Var> {
    let (n, c, _, _) = tape.value(f).shape().nchw()?;
    if c != p.channels {
        return Err(Error::Dimension(format!(
            "attention block for {} channels applied to {c}",
            p.channels
        )));
    }
    let avg = tape.pool_spatial(f, PoolKind::Avg)?;
    let max = tape.pool_spatial(f, PoolKind::Max)?;
    let avg = tape.reshape(avg, &[n, c])?;
    let max = tape.reshape(max, &[n, c])?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let logits = tape.add(a, m)?;
    let gate = tape.sigmoid(logits)?;
    tape.reshape(gate, &[n, c, 1, 1])
}

/// `M_S(F)`, shaped `[n, 1, h, w]`.
pub fn spatial_attention<T: Scalar>(tape: &mut Tape<T>, f: Var, p: &CbamParams<T>) -> Result<Var> {
    let avg = tape.pool_channel(f, PoolKind::Avg)?;
    let max = tape.pool_channel(f, PoolKind::Max)?;
    let desc = tape.concat_channels(&[avg, max])?;
    let k = tape.param(&p.spatial_kernel)?;
    let b = tape.param(&p.spatial_bias)?;
    let logits = tape.conv2d(desc, k, Some(b), 1, SPATIAL_KERNEL / 2)?;
    tape.sigmoid(logits)
}

pub fn cbam_refine<T: Scalar>(tape: &mut Tape<T>, f: Var, p: &CbamParams<T>) -> Result<Refined> {
    let channel = channel_attention(tape, f, p)?;
    let f1 = tape.broadcast_mul(f, channel)?;
    let spatial = spatial_attention(tape, f1, p)?;
    let f2 = tape.broadcast_mul(f1, spatial)?;
    Ok(Refined {
        refined: f2,
        channel_refined: f1,
        maps: AttentionMaps { channel, spatial },
    })
}

/// Attention-transfer map with flags for samples whose map had zero norm.
#[derive(Debug, Clone)]
pub struct AtMap {
    pub map: Var,
    pub degenerate: Vec<bool>,
}

pub const DEFAULT_AT_POWER: i32 = 2;

/// `sum_c |F|^power` per pixel, normalized to unit Frobenius norm per sample.
pub fn at_map<T: Scalar>(tape: &mut Tape<T>, f: Var, power: i32) -> Result<AtMap> {
    let (map, degenerate) = tape.at_map(f, power)?;
    Ok(AtMap { map, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduction_must_divide_channels() {
        assert!(matches!(
            CbamParams::<f64>::zeros(6, 4),
            Err(Error::Config(_))
        ));
        assert!(CbamParams::<f64>::zeros(8, 4).is_ok());
    }

    #[test]
    fn zero_block_gates_are_one_half() {
        let p = CbamParams::<f64>::zeros(4, 2).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..4 * 9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = tape
            .constant(Tensor::from_vec(&[1, 4, 3, 3], data).unwrap())
            .unwrap();
        let r = cbam_refine(&mut tape, f, &p).unwrap();
        assert!(tape.value(r.maps.channel).data().iter().all(|v| *v == 0.5));
        assert!(tape.value(r.maps.spatial).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let p = CbamParams::<f64>::zeros(4, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape
            .constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap())
            .unwrap();
        assert!(matches!(
            cbam_refine(&mut tape, f, &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn frozen_block_exposes_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = CbamParams::<f64>::init(4, 2, &mut rng).unwrap();
        p.freeze();
        assert!(p.is_frozen());
        let mut tape = Tape::new();
        let f = tape
            .leaf(Tensor::ones(&[1, 4, 2, 2]).unwrap(), true)
            .unwrap();
        let r = cbam_refine(&mut tape, f, &p).unwrap();
        let l = tape.sum(r.refined).unwrap();
        tape.backward(l).unwrap();
        let w0 = tape.param(&p.w0).unwrap();
        assert!(tape.grad(w0).is_none());
        assert!(tape.grad(f).is_some());
    }
}
