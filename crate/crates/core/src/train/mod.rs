//! The two training phases.
//!
//! The teacher is first trained under cross-entropy. Its weights are then
//! frozen and one attention block per tap is calibrated in-path: each block
//! replaces its tap feature by the refined feature and the network keeps
//! running from there, again under cross-entropy. The student is trained
//! under cross-entropy plus the configured distillation term, reading the
//! teacher's features from a separate forward-only tape.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Digest};
pub use optim::{cosine_lr, sgd_step, Sgd};

use crate::attention::{self, CbamParams};
use crate::dataset::{self, AugmentPolicy, Sample, Splits, IGNORE_INDEX};
use crate::distill::{self, DistillConfig, Method, TapEntry, TapId, TapSet};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::scalar::Scalar;
use crate::segnet::{SegNet, SegNetConfig};
use crate::tape::{Param, Tape, Var};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const TAP_STREAM: u64 = 3;
const CALIBRATION_STREAM: u64 = 4;
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Attention calibration epochs after teacher training.
    pub calibration_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Random scale, flip and crop on training batches.
    pub augment: bool,
    pub distill: DistillConfig,
    pub taps: Vec<TapId>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 30,
            calibration_epochs: 5,
            batch_size: 16,
            seed: 0,
            eval_every: 5,
            augment: true,
            distill: DistillConfig::default(),
            taps: TapId::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "need lr0 > lr_min >= 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be >= 1".into(),
            ));
        }
        self.distill.validate()?;
        if self.distill.method.uses_taps() {
            let mut ids = self.taps.clone();
            ids.sort();
            ids.dedup();
            if ids.is_empty() || ids.len() != self.taps.len() {
                return Err(Error::Config(format!(
                    "{} needs a non-empty list of distinct taps",
                    self.distill.method
                )));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> Sgd {
        Sgd {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn teacher_text(&self) -> String {
        format!(
            "lr0={:?}\nlr_min={:?}\nmomentum={:?}\nweight_decay={:?}\nepochs={}\ncalibration_epochs={}\nbatch_size={}\nseed={}\naugment={}\n",
            self.lr0,
            self.lr_min,
            self.momentum,
            self.weight_decay,
            self.epochs,
            self.calibration_epochs,
            self.batch_size,
            self.seed,
            self.augment
        )
    }

    fn student_text(&self) -> String {
        let taps: String = self.taps.iter().map(|t| t.letter()).collect();
        let d = &self.distill;
        format!(
            "{}eval_every={}\nmethod={}\nalpha={:?}\nkd_temperature={:?}\nat_power={}\nnorm_axis={:?}\ntaps={taps}\n",
            self.teacher_text(),
            self.eval_every,
            d.method,
            d.alpha,
            d.kd_temperature,
            d.at_power,
            d.norm_axis
        )
    }
}

fn net_text(cfg: &SegNetConfig) -> String {
    let widths: Vec<String> = cfg.widths.iter().map(usize::to_string).collect();
    format!(
        "in_channels={}\nnum_classes={}\nwidths={}\nreduction={}\n",
        cfg.in_channels,
        cfg.num_classes,
        widths.join(","),
        cfg.reduction
    )
}

/// Identity of a teacher run: precision, network, optimization settings and
/// data.
pub fn teacher_digest<T: Scalar>(net: &SegNetConfig, cfg: &TrainConfig, data: &Splits) -> Digest {
    let text = format!(
        "teacher\nbits={}\n{}{}data={}\n",
        T::BITS,
        net_text(net),
        cfg.teacher_text(),
        data.fingerprint()
    );
    Digest::of(text.as_bytes())
}

pub fn student_digest<T: Scalar>(
    net: &SegNetConfig,
    cfg: &TrainConfig,
    teacher: Digest,
    data: &Splits,
) -> Digest {
    let text = format!(
        "student\nbits={}\n{}{}teacher={teacher}\ndata={}\n",
        T::BITS,
        net_text(net),
        cfg.student_text(),
        data.fingerprint()
    );
    Digest::of(text.as_bytes())
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub ce: f64,
    pub attn_loss: f64,
    pub total: f64,
    pub val_miou: Option<f64>,
    pub val_acc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch\tlr\tce\tattn_loss\ttotal\tval_miou\tval_acc";

impl EpochRecord {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.epoch,
            self.lr,
            self.ce,
            self.attn_loss,
            self.total,
            opt(self.val_miou),
            opt(self.val_acc)
        )
    }
}

/// Header plus one line per record, newline-terminated.
pub fn log_to_tsv(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

struct Losses {
    ce: Var,
    distill: Option<Var>,
    total: Var,
}

/// Runs `epochs` epochs of SGD on whatever `params` selects from `model`.
/// Epoch `i` of the phase shuffles with seed `cfg.seed + first_epoch + i`.
#[allow(clippy::too_many_arguments)]
fn run_phase<T: Scalar, M>(
    model: &mut M,
    cfg: &TrainConfig,
    data: &Splits,
    epochs: usize,
    first_epoch: usize,
    forward: &dyn Fn(&M, &mut Tape<T>, Var, &[u8]) -> Result<Losses>,
    params: &dyn Fn(&mut M) -> Vec<&mut Param<T>>,
    eval: &dyn Fn(&M) -> Result<ConfusionMatrix>,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;
    let sgd = cfg.optimizer();
    let policy = AugmentPolicy::standard(data.train[0].height());
    let mut step = 0;
    for e in 0..epochs {
        let epoch = first_epoch + e;
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(SHUFFLE_STREAM);
        order.shuffle(&mut rng);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        aug_rng.set_stream(AUGMENT_STREAM);

        let lr_first = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
        let (mut ce_sum, mut d_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
            let augmented: Vec<Sample>;
            let refs: Vec<&Sample> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| dataset::augment(&data.train[i], &mut aug_rng, &policy))
                    .collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data.train[i]).collect()
            };
            let (x, y) = dataset::batch::<T>(&refs)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            };
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let losses = forward(model, &mut tape, xv, &y).map_err(diverged)?;
            let value = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.to_f64_lossy()) };
            let total = value(losses.total)?;
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            ce_sum += value(losses.ce)?;
            d_sum += losses.distill.map(value).transpose()?.unwrap_or(0.0);
            total_sum += total;
            tape.backward(losses.total).map_err(diverged)?;
            tape.accumulate_into(params(model));
            sgd.step(params(model), lr)?;
            step += 1;
        }
        let batches = steps_per_epoch as f64;
        let (val_miou, val_acc) = if (e + 1) % cfg.eval_every == 0 || e + 1 == epochs {
            let cm = eval(model)?;
            (Some(cm.miou()?.0), Some(cm.pixel_accuracy()?))
        } else {
            (None, None)
        };
        log.push(EpochRecord {
            epoch: epoch + 1,
            lr: lr_first,
            ce: ce_sum / batches,
            attn_loss: d_sum / batches,
            total: total_sum / batches,
            val_miou,
            val_acc,
        });
    }
    Ok(())
}

/// Per-pixel argmax over the class axis of `[n, k, h, w]` logits; ties go
/// to the lower class.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.shape().nchw()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        let base = s * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Confusion matrix of `logits_of` over un-augmented samples.
pub fn evaluate_with<T: Scalar>(
    samples: &[Sample],
    classes: usize,
    logits_of: &dyn Fn(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = dataset::batch::<T>(&refs)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x)?;
        let logits = logits_of(&mut tape, xv)?;
        cm.accumulate(&argmax_classes(tape.value(logits))?, &y, IGNORE_INDEX)?;
    }
    Ok(cm)
}

pub fn evaluate<T: Scalar>(net: &SegNet<T>, samples: &[Sample]) -> Result<ConfusionMatrix> {
    evaluate_with(samples, net.config().num_classes, &|tape, x| {
        Ok(net.forward_with_taps(tape, x)?.logits)
    })
}

/// A trained teacher with its calibrated per-tap attention blocks.
#[derive(Debug, Clone)]
pub struct Teacher<T: Scalar = f64> {
    pub net: SegNet<T>,
    /// One block per tap, in network order.
    pub cbams: Vec<(TapId, CbamParams<T>)>,
}

impl<T: Scalar> Teacher<T> {
    pub fn cbam(&self, id: TapId) -> Result<&CbamParams<T>> {
        self.cbams
            .iter()
            .find(|(t, _)| *t == id)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Config(format!("teacher has no attention block at tap {id}")))
    }

    /// Forward pass with every calibrated block in the path.
    fn forward_refined(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut hook = |tape: &mut Tape<T>, id: TapId, f: Var| {
            Ok(attention::cbam_refine(tape, f, self.cbam(id)?)?.refined)
        };
        Ok(self.net.forward_with_hook(tape, x, &mut hook)?.logits)
    }

    pub fn to_checkpoint(&self, digest: Digest) -> Checkpoint {
        let mut ck = network_checkpoint(&self.net, "teacher", digest);
        for (id, c) in &self.cbams {
            for (name, p) in c.params() {
                ck.push_param(&format!("teacher.cbam.{id}.{name}"), p);
            }
        }
        ck
    }

    /// Restores a teacher; everything comes back frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "teacher")?;
        let mut net = network_from_checkpoint::<T>(ck)?;
        net.freeze();
        let shapes = net
            .config()
            .tap_shapes(1 << net.config().depth(), 1 << net.config().depth())?;
        let mut cbams = Vec::new();
        for (id, (c, _, _)) in shapes {
            let mut cbam = CbamParams::zeros(c, net.config().reduction)?;
            for (name, p) in cbam.params_mut() {
                ck.restore_param(&format!("teacher.cbam.{id}.{name}"), p)?;
            }
            cbam.freeze();
            cbams.push((id, cbam));
        }
        Ok(Teacher { net, cbams })
    }
}

fn network_checkpoint<T: Scalar>(net: &SegNet<T>, kind: &str, digest: Digest) -> Checkpoint {
    let cfg = net.config();
    let mut ck = Checkpoint::new(digest);
    ck.set_meta("kind", kind);
    ck.set_meta("net.in_channels", cfg.in_channels);
    ck.set_meta("net.num_classes", cfg.num_classes);
    let widths: Vec<String> = cfg.widths.iter().map(usize::to_string).collect();
    ck.set_meta("net.widths", widths.join(","));
    ck.set_meta("net.reduction", cfg.reduction);
    ck.set_meta("scalar_bits", T::BITS);
    for (name, p) in net.params() {
        ck.push_param(&name, p);
    }
    ck
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let found = ck.meta("kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    let v = ck.meta(key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("meta {key}={v} is not an integer")))
}

/// The network stored in a teacher or student checkpoint.
pub fn network_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<SegNet<T>> {
    let widths = ck
        .meta("net.widths")?
        .split(',')
        .map(|w| {
            w.parse()
                .map_err(|_| Error::Checkpoint(format!("bad width {w}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let cfg = SegNetConfig {
        in_channels: meta_usize(ck, "net.in_channels")?,
        num_classes: meta_usize(ck, "net.num_classes")?,
        widths,
        reduction: meta_usize(ck, "net.reduction")?,
    };
    let mut net = SegNet::build(cfg, 0)?;
    for (name, p) in net.params_mut() {
        ck.restore_param(&name, p)?;
    }
    Ok(net)
}

fn push_metrics(ck: &mut Checkpoint, cm: &ConfusionMatrix) -> Result<()> {
    let (miou, per_class) = cm.miou()?;
    ck.metrics.push(("val_miou".into(), miou));
    ck.metrics.push(("val_acc".into(), cm.pixel_accuracy()?));
    for (k, iou) in per_class.iter().enumerate() {
        ck.metrics
            .push((format!("val_iou.{k}"), iou.unwrap_or(f64::NAN)));
    }
    let k = cm.classes();
    for t in 0..k {
        for p in 0..k {
            ck.metrics
                .push((format!("val_cm.{t}.{p}"), cm.get(t, p) as f64));
        }
    }
    Ok(())
}

/// The validation confusion matrix recorded at training time.
pub fn recorded_confusion(ck: &Checkpoint) -> Result<ConfusionMatrix> {
    let k = meta_usize(ck, "net.num_classes")?;
    let mut counts = Vec::with_capacity(k * k);
    for t in 0..k {
        for p in 0..k {
            let name = format!("val_cm.{t}.{p}");
            let v = ck
                .metric(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing metric {name}")))?;
            counts.push(v as u64);
        }
    }
    ConfusionMatrix::from_counts(k, counts)
}

fn network_params<T: Scalar>(net: &mut SegNet<T>) -> Vec<&mut Param<T>> {
    net.params_mut().into_iter().map(|(_, p)| p).collect()
}

fn calibration_params<T: Scalar>(t: &mut Teacher<T>) -> Vec<&mut Param<T>> {
    t.cbams
        .iter_mut()
        .flat_map(|(_, c)| c.params_mut().into_iter().map(|(_, p)| p))
        .collect()
}

fn check_data<T: Scalar>(net: &SegNetConfig, data: &Splits) -> Result<(usize, usize)> {
    data.validate(net.num_classes)?;
    let (h, w) = (data.train[0].height(), data.train[0].width());
    net.tap_shapes(h, w)?;
    Ok((h, w))
}

#[derive(Debug, Clone)]
pub struct TeacherRun<T: Scalar = f64> {
    pub teacher: Teacher<T>,
    pub log: Vec<EpochRecord>,
    /// Validation confusion of the plain network, before calibration.
    pub val: ConfusionMatrix,
    pub digest: Digest,
}

impl<T: Scalar> TeacherRun<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.teacher.to_checkpoint(self.digest);
        push_metrics(&mut ck, &self.val)?;
        Ok(ck)
    }
}

/// Cross-entropy training followed by in-path attention calibration.
pub fn train_teacher<T: Scalar>(
    net_cfg: &SegNetConfig,
    cfg: &TrainConfig,
    data: &Splits,
) -> Result<TeacherRun<T>> {
    cfg.validate()?;
    let (h, w) = check_data::<T>(net_cfg, data)?;
    let digest = teacher_digest::<T>(net_cfg, cfg, data);
    let mut net = SegNet::<T>::build(net_cfg.clone(), cfg.seed)?;
    let mut log = Vec::new();

    let forward = |net: &SegNet<T>, tape: &mut Tape<T>, x: Var, y: &[u8]| -> Result<Losses> {
        let logits = net.forward_with_taps(tape, x)?.logits;
        let ce = tape.softmax_cross_entropy(logits, y, IGNORE_INDEX)?;
        Ok(Losses {
            ce,
            distill: None,
            total: ce,
        })
    };
    let eval = |net: &SegNet<T>| evaluate(net, &data.val);
    run_phase(
        &mut net,
        cfg,
        data,
        cfg.epochs,
        0,
        &forward,
        &network_params,
        &eval,
        &mut log,
    )?;
    let val = evaluate(&net, &data.val)?;
    net.freeze();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(CALIBRATION_STREAM);
    let mut cbams = Vec::new();
    for (id, (c, _, _)) in net_cfg.tap_shapes(h, w)? {
        cbams.push((id, CbamParams::init(c, net_cfg.reduction, &mut rng)?));
    }
    let mut teacher = Teacher { net, cbams };
    let forward = |t: &Teacher<T>, tape: &mut Tape<T>, x: Var, y: &[u8]| -> Result<Losses> {
        let logits = t.forward_refined(tape, x)?;
        let ce = tape.softmax_cross_entropy(logits, y, IGNORE_INDEX)?;
        Ok(Losses {
            ce,
            distill: None,
            total: ce,
        })
    };
    let eval = |t: &Teacher<T>| {
        evaluate_with(&data.val, net_cfg.num_classes, &|tape, x| {
            t.forward_refined(tape, x)
        })
    };
    run_phase(
        &mut teacher,
        cfg,
        data,
        cfg.calibration_epochs,
        cfg.epochs,
        &forward,
        &calibration_params,
        &eval,
        &mut log,
    )?;
    for (_, c) in &mut teacher.cbams {
        c.freeze();
    }
    Ok(TeacherRun {
        teacher,
        log,
        val,
        digest,
    })
}

/// A student network and, for feature methods, its tap-side parameters.
#[derive(Debug, Clone)]
pub struct Student<T: Scalar = f64> {
    pub net: SegNet<T>,
    pub taps: Option<TapSet<T>>,
}

impl<T: Scalar> Student<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> =
            self.net.params_mut().into_iter().map(|(_, p)| p).collect();
        if let Some(taps) = self.taps.as_mut() {
            out.extend(taps.student_params_mut().into_iter().map(|(_, p)| p));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StudentRun<T: Scalar = f64> {
    pub student: Student<T>,
    pub log: Vec<EpochRecord>,
    pub val: ConfusionMatrix,
    pub digest: Digest,
}

impl<T: Scalar> StudentRun<T> {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = network_checkpoint(&self.student.net, "student", self.digest);
        ck.set_meta("method", cfg.distill.method);
        ck.set_meta("alpha", cfg.distill.alpha);
        let taps: String = cfg.taps.iter().map(|t| t.letter()).collect();
        ck.set_meta("taps", taps);
        if let Some(taps) = &self.student.taps {
            for (name, p) in taps.student_params() {
                ck.push_param(&name, p);
            }
        }
        push_metrics(&mut ck, &self.val)?;
        Ok(ck)
    }
}

/// Builds the tap set for `cfg`, checking every tap's geometry up front.
pub fn build_taps<T: Scalar>(
    student: &SegNetConfig,
    teacher: &Teacher<T>,
    cfg: &TrainConfig,
    h: usize,
    w: usize,
) -> Result<TapSet<T>> {
    let t_shapes = teacher.net.config().tap_shapes(h, w)?;
    let s_shapes = student.tap_shapes(h, w)?;
    let shape = |shapes: &[(TapId, distill::TapShape)], id: TapId| {
        shapes
            .iter()
            .find(|(t, _)| *t == id)
            .map(|(_, s)| *s)
            .unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TAP_STREAM);
    let mut entries = Vec::new();
    for &id in &cfg.taps {
        let cbam = teacher.cbam(id)?.clone();
        entries.push(TapEntry::new(
            id,
            shape(&t_shapes, id),
            shape(&s_shapes, id),
            cbam,
            &mut rng,
        )?);
    }
    TapSet::new(entries)
}

/// Trains a student against a frozen teacher.
pub fn distill_student<T: Scalar>(
    net_cfg: &SegNetConfig,
    cfg: &TrainConfig,
    teacher: &Teacher<T>,
    teacher_digest: Digest,
    data: &Splits,
) -> Result<StudentRun<T>> {
    cfg.validate()?;
    let (h, w) = check_data::<T>(net_cfg, data)?;
    let method = cfg.distill.method;
    if method != Method::None {
        if !teacher.net.is_frozen() || teacher.cbams.iter().any(|(_, c)| !c.is_frozen()) {
            return Err(Error::Contract(
                "teacher must be frozen before distillation".into(),
            ));
        }
        if teacher.net.config().num_classes != net_cfg.num_classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes, student {}",
                teacher.net.config().num_classes,
                net_cfg.num_classes
            )));
        }
    }
    let taps = if method.uses_taps() {
        Some(build_taps(net_cfg, teacher, cfg, h, w)?)
    } else {
        None
    };
    let mut student = Student {
        net: SegNet::<T>::build(net_cfg.clone(), cfg.seed)?,
        taps,
    };
    let digest = student_digest::<T>(net_cfg, cfg, teacher_digest, data);
    let dc = cfg.distill.clone();

    let forward = |s: &Student<T>, tape: &mut Tape<T>, x: Var, y: &[u8]| -> Result<Losses> {
        let bundle = s.net.forward_with_taps(tape, x)?;
        let ce = tape.softmax_cross_entropy(bundle.logits, y, IGNORE_INDEX)?;
        let d = if method == Method::None {
            None
        } else {
            let mut tt = Tape::inference();
            let tx = tt.constant(tape.value(x).clone())?;
            let tb = teacher.net.forward_with_taps(&mut tt, tx)?;
            match (method, s.taps.as_ref()) {
                (Method::Kd, _) => {
                    let tl = tape.constant(tt.value(tb.logits).clone())?;
                    Some(distill::kd_loss(
                        tape,
                        bundle.logits,
                        tl,
                        dc.kd_temperature,
                    )?)
                }
                (_, Some(taps)) => {
                    let mut sf = Vec::with_capacity(taps.len());
                    let mut tf = Vec::with_capacity(taps.len());
                    for id in taps.ids() {
                        sf.push(bundle.get(id));
                        tf.push(tape.constant(tt.value(tb.get(id)).clone())?);
                    }
                    Some(if method == Method::At {
                        distill::at_loss(tape, &sf, &tf, taps, dc.at_power)?
                    } else {
                        distill::attnfd_loss(tape, &sf, &tf, taps, dc.norm_axis)?
                    })
                }
                _ => return Err(Error::Contract(format!("{method} needs registered taps"))),
            }
        };
        let total = match d {
            Some(d) => distill::total_loss(tape, ce, d, dc.alpha)?,
            None => ce,
        };
        Ok(Losses {
            ce,
            distill: d,
            total,
        })
    };
    let eval = |s: &Student<T>| evaluate(&s.net, &data.val);
    let mut log = Vec::new();
    run_phase(
        &mut student,
        cfg,
        data,
        cfg.epochs,
        0,
        &forward,
        &Student::params_mut,
        &eval,
        &mut log,
    )?;
    let val = evaluate(&student.net, &data.val)?;
    Ok(StudentRun {
        student,
        log,
        val,
        digest,
    })
}
