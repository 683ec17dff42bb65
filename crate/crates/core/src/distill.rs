//! Distillation objectives: student-to-teacher feature alignment, the
//! attention-guided feature loss, and the KD / AT baselines.
//!
//! Per tap `j` the attention-guided loss is
//!
//! ```text
//! l_j = mean( (norm(CBAM_s(align(F_s))) - norm(CBAM_t(F_t)))^2 )
//! ```
//!
//! averaged over the registered taps. Teacher features and the teacher-side
//! attention blocks never receive gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{self, CbamParams};
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::NormAxis;
use crate::scalar::{lit, Scalar};
use crate::tape::{Param, Tape, Var};

/// Where a feature is captured in the segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapId {
    /// Last backbone stage.
    Backbone,
    /// Output of the context block.
    Encoder,
    /// Decoder output, before the classifier.
    Decoder,
}

impl TapId {
    pub const ALL: [TapId; 3] = [TapId::Backbone, TapId::Encoder, TapId::Decoder];

    pub fn letter(self) -> char {
        match self {
            TapId::Backbone => 'B',
            TapId::Encoder => 'E',
            TapId::Decoder => 'D',
        }
    }

    /// Parses a tap string such as `"BED"` or `"D"` into ordered, unique ids.
    pub fn parse_list(s: &str) -> Result<Vec<TapId>> {
        let mut ids = Vec::new();
        for ch in s.trim().chars() {
            let id = match ch.to_ascii_uppercase() {
                'B' => TapId::Backbone,
                'E' => TapId::Encoder,
                'D' => TapId::Decoder,
                ',' | ' ' => continue,
                other => return Err(Error::Config(format!("unknown tap '{other}' in \"{s}\""))),
            };
            if ids.contains(&id) {
                return Err(Error::Config(format!("tap '{ch}' listed twice in \"{s}\"")));
            }
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(Error::Config("at least one tap is required".into()));
        }
        ids.sort();
        Ok(ids)
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// 1x1 convolution from student to teacher channels.
#[derive(Debug, Clone)]
pub struct Projector<T: Scalar = f64> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Projector<T> {
    pub fn init<R: Rng + ?Sized>(c_student: usize, c_teacher: usize, rng: &mut R) -> Result<Self> {
        Ok(Projector {
            kernel: init::uniform(
                &[c_teacher, c_student, 1, 1],
                1.0 / (c_student as f64).sqrt(),
                rng,
            )?,
            bias: init::zeros(&[c_teacher])?,
        })
    }
}

/// Feature geometry `(channels, height, width)` at one tap.
pub type TapShape = (usize, usize, usize);

#[derive(Debug, Clone)]
pub struct TapEntry<T: Scalar = f64> {
    pub id: TapId,
    pub teacher_shape: TapShape,
    pub student_shape: TapShape,
    /// Present iff the channel counts differ.
    pub projector: Option<Projector<T>>,
    pub student_cbam: CbamParams<T>,
    /// Frozen on construction.
    pub teacher_cbam: CbamParams<T>,
}

impl<T: Scalar> TapEntry<T> {
    /// Registers a tap around an already-trained teacher attention block.
    /// The student block and projector are freshly initialized from `rng`.
    pub fn new<R: Rng + ?Sized>(
        id: TapId,
        teacher_shape: TapShape,
        student_shape: TapShape,
        mut teacher_cbam: CbamParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if teacher_cbam.channels() != teacher_shape.0 {
            return Err(Error::Config(format!(
                "tap {id}: teacher attention block has {} channels, feature has {}",
                teacher_cbam.channels(),
                teacher_shape.0
            )));
        }
        teacher_cbam.freeze();
        let projector = if student_shape.0 != teacher_shape.0 {
            Some(Projector::init(student_shape.0, teacher_shape.0, rng)?)
        } else {
            None
        };
        let student_cbam = CbamParams::init(teacher_shape.0, teacher_cbam.reduction(), rng)?;
        Ok(TapEntry {
            id,
            teacher_shape,
            student_shape,
            projector,
            student_cbam,
            teacher_cbam,
        })
    }

    /// Trainable student-side parameters with stable names.
    pub fn student_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let id = self.id;
        let mut out: Vec<(String, &mut Param<T>)> = Vec::new();
        if let Some(p) = self.projector.as_mut() {
            out.push((format!("tap.{id}.proj.kernel"), &mut p.kernel));
            out.push((format!("tap.{id}.proj.bias"), &mut p.bias));
        }
        for (name, p) in self.student_cbam.params_mut() {
            out.push((format!("tap.{id}.cbam.{name}"), p));
        }
        out
    }

    pub fn student_params(&self) -> Vec<(String, &Param<T>)> {
        let id = self.id;
        let mut out: Vec<(String, &Param<T>)> = Vec::new();
        if let Some(p) = self.projector.as_ref() {
            out.push((format!("tap.{id}.proj.kernel"), &p.kernel));
            out.push((format!("tap.{id}.proj.bias"), &p.bias));
        }
        for (name, p) in self.student_cbam.params() {
            out.push((format!("tap.{id}.cbam.{name}"), p));
        }
        out
    }
}

/// Ordered, non-empty set of registered taps.
#[derive(Debug, Clone)]
pub struct TapSet<T: Scalar = f64> {
    entries: Vec<TapEntry<T>>,
}

impl<T: Scalar> TapSet<T> {
    pub fn new(mut entries: Vec<TapEntry<T>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("a tap set needs at least one tap".into()));
        }
        entries.sort_by_key(|e| e.id);
        if entries.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("duplicate tap in tap set".into()));
        }
        Ok(TapSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<TapId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn entries(&self) -> &[TapEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [TapEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: TapId) -> Result<&TapEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Config(format!("tap {id} is not registered")))
    }

    pub fn student_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.entries
            .iter_mut()
            .flat_map(|e| e.student_params_mut())
            .collect()
    }

    pub fn student_params(&self) -> Vec<(String, &Param<T>)> {
        self.entries
            .iter()
            .flat_map(|e| e.student_params())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    AttnFd,
    Kd,
    At,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AttnFd => "attnfd",
            Method::Kd => "kd",
            Method::At => "at",
            Method::None => "none",
        }
    }

    /// Whether the method reads teacher features at the taps.
    pub fn uses_taps(self) -> bool {
        matches!(self, Method::AttnFd | Method::At)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attnfd" => Ok(Method::AttnFd),
            "kd" => Ok(Method::Kd),
            "at" => Ok(Method::At),
            "none" => Ok(Method::None),
            other => Err(Error::Config(format!(
                "unknown method \"{other}\" (attnfd, kd, at, none)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const CITYSCAPES_ALPHA: f64 = 15.0;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub method: Method,
    pub kd_temperature: f64,
    pub at_power: i32,
    pub norm_axis: NormAxis,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: DEFAULT_ALPHA,
            method: Method::AttnFd,
            kd_temperature: DEFAULT_KD_TEMPERATURE,
            at_power: attention::DEFAULT_AT_POWER,
            norm_axis: NormAxis::ChannelSlice,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "kd temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        if self.at_power < 1 {
            return Err(Error::Config(format!(
                "at power must be >= 1, got {}",
                self.at_power
            )));
        }
        Ok(())
    }
}

fn check_student_shape<T: Scalar>(
    tape: &Tape<T>,
    f: Var,
    entry: &TapEntry<T>,
) -> Result<(usize, usize)> {
    let (_, c, h, w) = tape.value(f).shape().nchw()?;
    if (c, h, w) != entry.student_shape {
        return Err(Error::Dimension(format!(
            "tap {}: student feature is {c}x{h}x{w}, registered {:?}",
            entry.id, entry.student_shape
        )));
    }
    Ok((entry.teacher_shape.1, entry.teacher_shape.2))
}

fn resize_to<T: Scalar>(tape: &mut Tape<T>, f: Var, oh: usize, ow: usize) -> Result<Var> {
    let (_, _, h, w) = tape.value(f).shape().nchw()?;
    if (h, w) == (oh, ow) {
        Ok(f)
    } else {
        tape.bilinear_resize(f, oh, ow)
    }
}

/// Resizes the student feature to the teacher's resolution, then projects it
/// to the teacher's channel count when they differ.
pub fn align_student_feature<T: Scalar>(
    tape: &mut Tape<T>,
    f_s: Var,
    entry: &TapEntry<T>,
) -> Result<Var> {
    let (oh, ow) = check_student_shape(tape, f_s, entry)?;
    let x = resize_to(tape, f_s, oh, ow)?;
    match &entry.projector {
        None => Ok(x),
        Some(p) => {
            let k = tape.param(&p.kernel)?;
            let b = tape.param(&p.bias)?;
            tape.conv2d(x, k, Some(b), 1, 0)
        }
    }
}

pub fn channel_normalize<T: Scalar>(tape: &mut Tape<T>, f: Var, axis: NormAxis) -> Result<Var> {
    tape.normalize(f, axis)
}

fn check_lengths<T: Scalar>(student: &[Var], teacher: &[Var], taps: &TapSet<T>) -> Result<()> {
    if student.len() != taps.len() || teacher.len() != taps.len() {
        return Err(Error::Contract(format!(
            "{} taps registered, got {} student and {} teacher features",
            taps.len(),
            student.len(),
            teacher.len()
        )));
    }
    Ok(())
}

fn check_teacher_shape<T: Scalar>(tape: &Tape<T>, t: Var, entry: &TapEntry<T>) -> Result<()> {
    let (_, c, h, w) = tape.value(t).shape().nchw()?;
    if (c, h, w) != entry.teacher_shape {
        return Err(Error::Dimension(format!(
            "tap {}: teacher feature is {c}x{h}x{w}, registered {:?}",
            entry.id, entry.teacher_shape
        )));
    }
    Ok(())
}

fn mean_over_taps<T: Scalar>(tape: &mut Tape<T>, terms: Vec<Var>) -> Result<Var> {
    let count = terms.len();
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    if count == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, T::one() / T::from_usize(count).unwrap())
    }
}

/// Attention-guided feature loss. Features are listed in tap-set order.
///
/// Each tap contributes the squared L2 distance between normalized student
/// and teacher maps, averaged over maps, so the term lies in `[0, 4]` at any
/// feature size. Taps are then averaged.
pub fn attnfd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    taps: &TapSet<T>,
    axis: NormAxis,
) -> Result<Var> {
    check_lengths(student, teacher, taps)?;
    let mut terms = Vec::with_capacity(taps.len());
    for ((s, t), entry) in student.iter().zip(teacher).zip(taps.entries()) {
        check_teacher_shape(tape, *t, entry)?;
        let s = align_student_feature(tape, *s, entry)?;
        let s = attention::cbam_refine(tape, s, &entry.student_cbam)?.refined;
        let s = channel_normalize(tape, s, axis)?;
        let t = tape.detach(*t)?;
        let t = attention::cbam_refine(tape, t, &entry.teacher_cbam)?.refined;
        let t = channel_normalize(tape, t, axis)?;
        let (_, c, h, w) = tape.value(t).shape().nchw()?;
        let map_len = match axis {
            NormAxis::ChannelSlice => h * w,
            NormAxis::PixelVector => c,
        };
        let mse = tape.mse(s, t)?;
        terms.push(tape.scale(mse, T::from_usize(map_len).unwrap())?);
    }
    mean_over_taps(tape, terms)
}

/// Temperature-scaled KL divergence between softened teacher and student
/// class distributions, averaged over pixels and multiplied by `T^2`.
pub fn kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: Var,
    temperature: f64,
) -> Result<Var> {
    let t = tape.detach(teacher_logits)?;
    tape.kd_loss(student_logits, t, lit(temperature))
}

/// Attention-transfer loss. The activation map sums over channels, so the
/// student feature is only resized, never projected.
pub fn at_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    taps: &TapSet<T>,
    power: i32,
) -> Result<Var> {
    check_lengths(student, teacher, taps)?;
    let mut terms = Vec::with_capacity(taps.len());
    for ((s, t), entry) in student.iter().zip(teacher).zip(taps.entries()) {
        check_teacher_shape(tape, *t, entry)?;
        let (oh, ow) = check_student_shape(tape, *s, entry)?;
        let s = resize_to(tape, *s, oh, ow)?;
        let s = attention::at_map(tape, s, power)?.map;
        let t = tape.detach(*t)?;
        let t = attention::at_map(tape, t, power)?.map;
        terms.push(tape.mse(s, t)?);
    }
    mean_over_taps(tape, terms)
}

/// `ce + alpha * distill`. With `alpha == 0` the cross-entropy node itself
/// is returned.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, ce: Var, distill: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(ce);
    }
    let d = tape.scale(distill, lit(alpha))?;
    tape.add(ce, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_lists_parse_in_network_order() {
        assert_eq!(
            TapId::parse_list("DEB").unwrap(),
            vec![TapId::Backbone, TapId::Encoder, TapId::Decoder]
        );
        assert_eq!(TapId::parse_list("d").unwrap(), vec![TapId::Decoder]);
        assert!(TapId::parse_list("").is_err());
        assert!(TapId::parse_list("BB").is_err());
        assert!(TapId::parse_list("X").is_err());
    }

    #[test]
    fn methods_round_trip() {
        for m in [Method::AttnFd, Method::Kd, Method::At, Method::None] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fitnet".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            kd_temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
