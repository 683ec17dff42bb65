//! Small encoder-decoder segmentation network with backbone, encoder and
//! decoder feature taps.
//!
//! Layout for widths `[w1, .., wd]`:
//!
//! ```text
//! x - 0.5
//! stage i:   conv3x3/2 (no bias) -> affine -> relu      (B = last stage, pre-relu)
//! context:   2 x [conv3x3 -> affine -> relu]            (E = second, pre-relu)
//! decoder:   conv3x3 -> affine -> relu                  (D, pre-relu)
//! classifier 1x1 with bias, bilinear upsample to input size
//! ```
//!
//! The affine layers carry a per-channel scale and shift and no running
//! statistics, so training and evaluation forwards coincide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::DEFAULT_REDUCTION;
use crate::distill::{TapId, TapShape};
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::{lit, Scalar};
use crate::tape::{Param, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels per stride-2 stage; the length is the depth.
    pub widths: Vec<usize>,
    /// Reduction ratio of the attention blocks that will run on the taps.
    pub reduction: usize,
}

impl SegNetConfig {
    pub fn teacher(num_classes: usize) -> Self {
        SegNetConfig {
            in_channels: 3,
            num_classes,
            widths: vec![32, 64, 128],
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn student(num_classes: usize) -> Self {
        SegNetConfig {
            in_channels: 3,
            num_classes,
            widths: vec![8, 16, 32],
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn bottleneck(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config(
                "network needs at least one input channel".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio must be positive".into()));
        }
        if let Some(w) = self
            .widths
            .iter()
            .find(|w| **w == 0 || **w % self.reduction != 0)
        {
            return Err(Error::Config(format!(
                "width {w} is not a positive multiple of the reduction ratio {}",
                self.reduction
            )));
        }
        Ok(())
    }

    /// Feature shapes at every tap for an `h x w` input.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Result<Vec<(TapId, TapShape)>> {
        let f = 1usize << self.depth();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is not divisible by {f} (depth {})",
                self.depth()
            )));
        }
        let shape = (self.bottleneck(), h / f, w / f);
        Ok(TapId::ALL.iter().map(|id| (*id, shape)).collect())
    }
}

/// 3x3 convolution followed by a per-channel affine.
#[derive(Debug, Clone)]
pub struct ConvAffine<T: Scalar = f64> {
    pub kernel: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    stride: usize,
}

impl<T: Scalar> ConvAffine<T> {
    fn init(ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fan_in = ci * 9;
        Ok(ConvAffine {
            kernel: init::uniform(&[co, ci, 3, 3], (6.0 / fan_in as f64).sqrt(), rng)?,
            gamma: init::ones(&[co])?,
            beta: init::zeros(&[co])?,
            stride,
        })
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.param(&self.kernel)?;
        let y = tape.conv2d(x, k, None, self.stride, 1)?;
        let g = tape.param(&self.gamma)?;
        let b = tape.param(&self.beta)?;
        tape.channel_affine(y, g, b)
    }

    fn named(&self, prefix: &str) -> [(String, &Param<T>); 3] {
        [
            (format!("{prefix}.kernel"), &self.kernel),
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> [(String, &mut Param<T>); 3] {
        [
            (format!("{prefix}.kernel"), &mut self.kernel),
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }
}

/// Pre-activation features at the taps plus full-resolution logits.
#[derive(Debug, Clone, Copy)]
pub struct TapBundle {
    pub backbone: Var,
    pub encoder: Var,
    pub decoder: Var,
    pub logits: Var,
}

impl TapBundle {
    pub fn get(&self, id: TapId) -> Var {
        match id {
            TapId::Backbone => self.backbone,
            TapId::Encoder => self.encoder,
            TapId::Decoder => self.decoder,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegNet<T: Scalar = f64> {
    cfg: SegNetConfig,
    stages: Vec<ConvAffine<T>>,
    context: [ConvAffine<T>; 2],
    decoder: ConvAffine<T>,
    pub classifier_kernel: Param<T>,
    pub classifier_bias: Param<T>,
}

impl<T: Scalar> SegNet<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(cfg: SegNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(cfg.depth());
        let mut ci = cfg.in_channels;
        for &co in &cfg.widths {
            stages.push(ConvAffine::init(ci, co, 2, &mut rng)?);
            ci = co;
        }
        let c = cfg.bottleneck();
        let context = [
            ConvAffine::init(c, c, 1, &mut rng)?,
            ConvAffine::init(c, c, 1, &mut rng)?,
        ];
        let decoder = ConvAffine::init(c, c, 1, &mut rng)?;
        let classifier_kernel = init::uniform(
            &[cfg.num_classes, c, 1, 1],
            1.0 / (c as f64).sqrt(),
            &mut rng,
        )?;
        let classifier_bias = init::zeros(&[cfg.num_classes])?;
        Ok(SegNet {
            cfg,
            stages,
            context,
            decoder,
            classifier_kernel,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(s.named(&format!("stage{i}")));
        }
        for (i, s) in self.context.iter().enumerate() {
            out.extend(s.named(&format!("context{i}")));
        }
        out.extend(self.decoder.named("decoder"));
        out.push(("classifier.kernel".to_string(), &self.classifier_kernel));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.extend(s.named_mut(&format!("stage{i}")));
        }
        for (i, s) in self.context.iter_mut().enumerate() {
            out.extend(s.named_mut(&format!("context{i}")));
        }
        out.extend(self.decoder.named_mut("decoder"));
        out.push(("classifier.kernel".to_string(), &mut self.classifier_kernel));
        out.push(("classifier.bias".to_string(), &mut self.classifier_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value().numel()).sum()
    }

    pub fn freeze(&mut self) {
        for (_, p) in self.params_mut() {
            p.set_trainable(false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|(_, p)| !p.is_trainable())
    }

    pub fn forward_with_taps(&self, tape: &mut Tape<T>, x: Var) -> Result<TapBundle> {
        self.forward_with_hook(tape, x, &mut |_, _, f| Ok(f))
    }

    /// Forward pass where `hook` may substitute each pre-activation tap
    /// feature before the network continues from it. The bundle reports the
    /// raw features.
    pub fn forward_with_hook(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        hook: &mut dyn FnMut(&mut Tape<T>, TapId, Var) -> Result<Var>,
    ) -> Result<TapBundle> {
        let (_, c, h, w) = tape.value(x).shape().nchw()?;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.tap_shapes(h, w)?;

        let scale = tape.constant(Tensor::ones(&[c])?)?;
        let shift = tape.constant(Tensor::full(&[c], lit(-0.5))?)?;
        let mut y = tape.channel_affine(x, scale, shift)?;

        let last = self.stages.len() - 1;
        for stage in &self.stages[..last] {
            let z = stage.forward(tape, y)?;
            y = tape.relu(z)?;
        }
        let backbone = self.stages[last].forward(tape, y)?;
        let y = hook(tape, TapId::Backbone, backbone)?;
        let y = tape.relu(y)?;

        let y = self.context[0].forward(tape, y)?;
        let y = tape.relu(y)?;
        let encoder = self.context[1].forward(tape, y)?;
        let y = hook(tape, TapId::Encoder, encoder)?;
        let y = tape.relu(y)?;

        let decoder = self.decoder.forward(tape, y)?;
        let y = hook(tape, TapId::Decoder, decoder)?;
        let y = tape.relu(y)?;

        let k = tape.param(&self.classifier_kernel)?;
        let b = tape.param(&self.classifier_bias)?;
        let coarse = tape.conv2d(y, k, Some(b), 1, 0)?;
        let logits = tape.bilinear_resize(coarse, h, w)?;
        Ok(TapBundle {
            backbone,
            encoder,
            decoder,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_validate() {
        assert!(SegNetConfig::teacher(4).validate().is_ok());
        assert!(SegNetConfig::student(4).validate().is_ok());
        let bad = SegNetConfig {
            widths: vec![8, 12],
            ..SegNetConfig::student(4)
        };
        assert!(matches!(
            SegNet::<f64>::build(bad, 0),
            Err(Error::Config(_))
        ));
        let bad = SegNetConfig {
            num_classes: 1,
            ..SegNetConfig::student(4)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = SegNet::<f64>::build(SegNetConfig::student(4), 0).unwrap();
        let mut names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        let len = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), len);
    }
}
