//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attnfd::dataset::{ShapesSpec, Splits};
use attnfd::kernels::norm::NormAxis;
use attnfd::{Error, Method, Result, SegNetConfig, TapId, TrainConfig};

/// Every recognised key with its default and a one-line description, in
/// echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "student run seed"),
    ("precision", "f64", "arithmetic precision: f64 or f32"),
    (
        "method",
        "attnfd",
        "distillation method: attnfd, kd, at or none",
    ),
    ("taps", "B,E,D", "tap points used by feature methods"),
    ("data.canvas", "64", "side length of generated scenes"),
    ("data.classes", "4", "background plus shape kinds"),
    ("data.train", "512", "generated training scenes"),
    ("data.val", "128", "generated validation scenes"),
    ("data.seed", "0", "scene generator seed"),
    ("data.min_shapes", "1", "fewest shapes per scene"),
    ("data.max_shapes", "4", "most shapes per scene"),
    (
        "data.min_extent",
        "0.12",
        "smallest shape extent, fraction of the canvas",
    ),
    (
        "data.max_extent",
        "0.28",
        "largest shape extent, fraction of the canvas",
    ),
    ("data.noise", "0.08", "per-pixel noise standard deviation"),
    (
        "data.color_jitter",
        "0.2",
        "per-shape color offset half-width",
    ),
    (
        "data.train_manifest",
        "",
        "load training samples from this manifest instead",
    ),
    (
        "data.val_manifest",
        "",
        "load validation samples from this manifest instead",
    ),
    ("net.reduction", "8", "attention MLP reduction ratio"),
    ("teacher.widths", "32,64,128", "teacher stage widths"),
    ("teacher.epochs", "100", "teacher cross-entropy epochs"),
    (
        "teacher.calibration_epochs",
        "5",
        "teacher attention calibration epochs",
    ),
    ("teacher.seed", "0", "teacher run seed"),
    (
        "teacher.augment",
        "true",
        "random scale, flip and crop for the teacher",
    ),
    ("student.widths", "8,16,32", "student stage widths"),
    ("student.epochs", "30", "student epochs"),
    (
        "student.augment",
        "false",
        "random scale, flip and crop for the student",
    ),
    ("train.lr0", "0.05", "initial learning rate"),
    ("train.lr_min", "0", "final learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0", "L2 weight decay"),
    ("train.batch_size", "16", "samples per step"),
    ("train.eval_every", "5", "validation interval in epochs"),
    ("distill.alpha", "2", "weight of the distillation term"),
    ("distill.kd_temperature", "4", "softmax temperature for kd"),
    ("distill.at_power", "2", "activation exponent for at"),
    (
        "distill.norm_axis",
        "channel",
        "feature normalization: channel or pixel",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}={value}: expected {want}"))
}

impl RunConfig {
    /// Defaults overridden by the pairs in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got \"{line}\"",
                    n + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => {
                slot.1 = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key \"{key}\""))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn num<N: std::str::FromStr>(&self, key: &str, want: &str) -> Result<N> {
        let v = self.get(key);
        v.parse().map_err(|_| bad(key, v, want))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.num(key, "a non-negative integer")
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.num(key, "a number")
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(bad(key, v, "true or false")),
        }
    }

    fn widths(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key);
        v.split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| bad(key, v, "comma-separated integers"))
            })
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Checks every value parses and the derived settings are consistent.
    pub fn validate(&self) -> Result<()> {
        self.precision()?;
        self.shapes()?.validate()?;
        self.teacher_net()?.validate()?;
        self.student_net()?.validate()?;
        self.teacher_train()?.validate()?;
        self.student_train()?.validate()?;
        Ok(())
    }

    pub fn set_seed(&mut self, key: &str, seed: u64) {
        self.set(key, &seed.to_string()).unwrap();
    }

    /// Effective configuration, every key present. Parsing it reproduces
    /// `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((k, v), (_, _, help)) in self.values.iter().zip(KEYS) {
            let _ = writeln!(s, "# {help}\n{k}={v}");
        }
        s
    }

    /// Scalar width in bits, 64 or 32.
    pub fn precision(&self) -> Result<u32> {
        match self.get("precision") {
            "f64" => Ok(64),
            "f32" => Ok(32),
            v => Err(bad("precision", v, "f64 or f32")),
        }
    }

    pub fn shapes(&self) -> Result<ShapesSpec> {
        Ok(ShapesSpec {
            canvas: self.usize("data.canvas")?,
            classes: self.usize("data.classes")?,
            min_shapes: self.usize("data.min_shapes")?,
            max_shapes: self.usize("data.max_shapes")?,
            min_extent: self.f64("data.min_extent")?,
            max_extent: self.f64("data.max_extent")?,
            noise: self.f64("data.noise")?,
            color_jitter: self.f64("data.color_jitter")?,
            seed: self.num("data.seed", "a non-negative integer")?,
        })
    }

    pub fn split_sizes(&self) -> Result<(usize, usize)> {
        Ok((self.usize("data.train")?, self.usize("data.val")?))
    }

    /// Training and validation samples: manifests when configured,
    /// otherwise generated scenes.
    pub fn splits(&self) -> Result<Splits> {
        let (train_n, val_n) = self.split_sizes()?;
        let spec = self.shapes()?;
        let generated = || Splits::shapes(&spec, train_n, val_n);
        match (
            self.path("data.train_manifest"),
            self.path("data.val_manifest"),
        ) {
            (None, None) => generated(),
            (Some(t), Some(v)) => Ok(Splits {
                train: attnfd::dataset::load_manifest(&t)?,
                val: attnfd::dataset::load_manifest(&v)?,
            }),
            _ => Err(Error::Config(
                "data.train_manifest and data.val_manifest must be set together".into(),
            )),
        }
    }

    fn net(&self, key: &str) -> Result<SegNetConfig> {
        Ok(SegNetConfig {
            in_channels: 3,
            num_classes: self.usize("data.classes")?,
            widths: self.widths(key)?,
            reduction: self.usize("net.reduction")?,
        })
    }

    pub fn teacher_net(&self) -> Result<SegNetConfig> {
        self.net("teacher.widths")
    }

    pub fn student_net(&self) -> Result<SegNetConfig> {
        self.net("student.widths")
    }

    fn base_train(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            lr0: self.f64("train.lr0")?,
            lr_min: self.f64("train.lr_min")?,
            momentum: self.f64("train.momentum")?,
            weight_decay: self.f64("train.weight_decay")?,
            batch_size: self.usize("train.batch_size")?,
            eval_every: self.usize("train.eval_every")?,
            ..TrainConfig::default()
        };
        t.calibration_epochs = self.usize("teacher.calibration_epochs")?;
        Ok(t)
    }

    pub fn teacher_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.usize("teacher.epochs")?,
            seed: self.num("teacher.seed", "a non-negative integer")?,
            augment: self.bool("teacher.augment")?,
            ..self.base_train()?
        })
    }

    pub fn student_train(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            epochs: self.usize("student.epochs")?,
            seed: self.num("seed", "a non-negative integer")?,
            augment: self.bool("student.augment")?,
            ..self.base_train()?
        };
        t.distill.method = self.get("method").parse::<Method>()?;
        t.distill.alpha = self.f64("distill.alpha")?;
        t.distill.kd_temperature = self.f64("distill.kd_temperature")?;
        t.distill.at_power = self.num("distill.at_power", "an integer")?;
        t.distill.norm_axis = match self.get("distill.norm_axis") {
            "channel" => NormAxis::ChannelSlice,
            "pixel" => NormAxis::PixelVector,
            v => return Err(bad("distill.norm_axis", v, "channel or pixel")),
        };
        let taps: String = self.get("taps").split(',').map(str::trim).collect();
        t.taps = TapId::parse_list(&taps)?;
        Ok(t)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
