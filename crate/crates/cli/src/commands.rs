//! Subcommand bodies. Each writes into one run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attnfd::dataset::{self, Splits};
use attnfd::metrics::{ConfusionMatrix, Report};
use attnfd::train::{
    self, log_to_tsv, network_from_checkpoint, recorded_confusion, Checkpoint, Digest, Teacher,
};
use attnfd::{Error, Method, Result, Scalar, SegNet};

use crate::config::RunConfig;
use crate::viz;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TEACHER_FILE: &str = "teacher.ck";
pub const STUDENT_FILE: &str = "student.ck";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_report(out: &Path, cm: &ConfusionMatrix, extra: &str) -> Result<String> {
    let report = Report::single(cm)?;
    let table = report.to_table();
    write(&out.join(REPORT_FILE), &table)?;
    write(
        &out.join(METRICS_FILE),
        format!("{extra}{}", report.to_key_values()),
    )?;
    Ok(table)
}

/// Writes the configured generated splits as `train/` and `val/` datasets.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (train_n, val_n) = cfg.split_sizes()?;
    let data = Splits::shapes(&cfg.shapes()?, train_n, val_n)?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    let train = dataset::write_dataset(&out.join("train"), &data.train)?;
    let val = dataset::write_dataset(&out.join("val"), &data.val)?;
    Ok(format!(
        "wrote {train_n} training samples ({}) and {val_n} validation samples ({})\n",
        train.display(),
        val.display()
    ))
}

pub fn train_teacher<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = cfg.splits()?;
    let run = train::train_teacher::<T>(&cfg.teacher_net()?, &cfg.teacher_train()?, &data)?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    write(&out.join(LOG_FILE), log_to_tsv(&run.log))?;
    run.checkpoint()?.save(&out.join(TEACHER_FILE))?;
    let table = write_report(out, &run.val, &format!("digest={}\n", run.digest))?;
    Ok(format!("teacher {}\n{table}", run.digest))
}

/// Expected digest of the teacher this configuration describes.
pub fn expected_teacher_digest<T: Scalar>(cfg: &RunConfig, data: &Splits) -> Result<Digest> {
    Ok(train::teacher_digest::<T>(
        &cfg.teacher_net()?,
        &cfg.teacher_train()?,
        data,
    ))
}

pub fn distill<T: Scalar>(
    cfg: &RunConfig,
    teacher: Option<&Path>,
    force: bool,
    out: &Path,
) -> Result<String> {
    let data = cfg.splits()?;
    let student_cfg = cfg.student_train()?;
    let (teacher, teacher_digest) = match teacher {
        Some(path) => {
            let want = expected_teacher_digest::<T>(cfg, &data)?;
            let ck = Checkpoint::load(path, Some(want), force)?;
            (Teacher::<T>::from_checkpoint(&ck)?, ck.digest)
        }
        None if student_cfg.distill.method == Method::None => {
            let mut net = SegNet::<T>::build(cfg.teacher_net()?, 0)?;
            net.freeze();
            (
                Teacher {
                    net,
                    cbams: Vec::new(),
                },
                Digest([0; 32]),
            )
        }
        None => {
            return Err(Error::Config(format!(
                "method {} needs --teacher",
                student_cfg.distill.method
            )))
        }
    };
    let run = train::distill_student::<T>(
        &cfg.student_net()?,
        &student_cfg,
        &teacher,
        teacher_digest,
        &data,
    )?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    write(&out.join(LOG_FILE), log_to_tsv(&run.log))?;
    run.checkpoint(&student_cfg)?
        .save(&out.join(STUDENT_FILE))?;
    let table = write_report(
        out,
        &run.val,
        &format!(
            "digest={}\nmethod={}\n",
            run.digest, student_cfg.distill.method
        ),
    )?;
    Ok(format!(
        "student {} ({})\n{table}",
        run.digest, student_cfg.distill.method
    ))
}

fn scalar_bits(ck: &Checkpoint) -> Result<u32> {
    match ck.meta("scalar_bits")? {
        "64" => Ok(64),
        "32" => Ok(32),
        v => Err(Error::Checkpoint(format!("unsupported scalar_bits {v}"))),
    }
}

fn evaluate_at<T: Scalar>(ck: &Checkpoint, samples: &[dataset::Sample]) -> Result<ConfusionMatrix> {
    let net = network_from_checkpoint::<T>(ck)?;
    train::evaluate(&net, samples)
}

/// Scores a checkpoint's network at the precision it was trained in.
/// Teacher checkpoints are scored without their attention blocks.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<String> {
    let ck = Checkpoint::load(checkpoint, None, false)?;
    let samples = match manifest {
        Some(m) => dataset::load_manifest(m)?,
        None => cfg.splits()?.val,
    };
    if samples.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: the sample list is empty".into(),
        ));
    }
    let cm = match scalar_bits(&ck)? {
        32 => evaluate_at::<f32>(&ck, &samples)?,
        _ => evaluate_at::<f64>(&ck, &samples)?,
    };
    let report = Report::single(&cm)?;
    let mut text = format!(
        "checkpoint {} ({})\n",
        checkpoint.display(),
        ck.meta("kind")?
    );
    text.push_str(&report.to_table());
    if let Some(out) = out {
        write(&out.join(REPORT_FILE), &text)?;
        write(&out.join(METRICS_FILE), report.to_key_values())?;
    }
    Ok(text)
}

pub fn viz_attn(checkpoint: &Path, image: &Path, out: &Path) -> Result<viz::Heatmaps> {
    let ck = Checkpoint::load(checkpoint, None, false)?;
    let img = dataset::load_image(image)?;
    match scalar_bits(&ck)? {
        32 => viz::heatmaps::<f32>(&ck, &img, out),
        _ => viz::heatmaps::<f64>(&ck, &img, out),
    }
}

/// The checkpoint inside a run directory, or the path itself.
fn run_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    for name in [STUDENT_FILE, TEACHER_FILE] {
        let p = path.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no checkpoint in run directory",
        ),
    })
}

/// Mean and spread over runs, grouped by method and taps.
pub fn aggregate(runs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("aggregate needs at least one run".into()));
    }
    let mut groups: Vec<(String, Vec<ConfusionMatrix>)> = Vec::new();
    for r in runs {
        let ck = Checkpoint::load(&run_checkpoint(r)?, None, false)?;
        let label = match ck.meta("kind")? {
            "student" => format!("student {} taps={}", ck.meta("method")?, ck.meta("taps")?),
            kind => kind.to_string(),
        };
        let cm = recorded_confusion(&ck)?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(cm),
            None => groups.push((label, vec![cm])),
        }
    }
    let mut text = String::new();
    let mut kv = String::new();
    for (label, cms) in &groups {
        let report = Report::over_seeds(cms)?;
        let _ = writeln!(text, "== {label}");
        text.push_str(&report.to_table());
        for line in report.to_key_values().lines() {
            let _ = writeln!(kv, "{}.{line}", label.replace(' ', "."));
        }
    }
    if let Some(out) = out {
        write(&out.join(REPORT_FILE), &text)?;
        write(&out.join(METRICS_FILE), &kv)?;
    }
    Ok(text)
}
