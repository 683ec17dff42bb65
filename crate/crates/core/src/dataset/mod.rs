//! Segmentation samples: the synthetic shapes generator, augmentation, and
//! netpbm-backed storage with a tab-separated manifest.

pub mod augment;
pub mod netpbm;
pub mod shapes;

use std::fs;
use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentParams, AugmentPolicy};
pub use shapes::{generate, ShapesSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Digest;

pub const IGNORE_INDEX: u8 = 255;

/// Rounds to the nearest 8-bit level so samples survive netpbm round trips.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// An RGB image in `[0, 1]` (`[3, h, w]`) with a row-major label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f64>, label: Vec<u8>) -> Result<Self> {
        let d = image.dims();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::Dimension(format!(
                "sample image must be [3,h,w], got {d:?}"
            )));
        }
        if label.len() != d[1] * d[2] {
            return Err(Error::Consistency(format!(
                "label has {} pixels, image {}x{}",
                label.len(),
                d[1],
                d[2]
            )));
        }
        Ok(Sample { image, label })
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }

    /// Checks every label is a class below `classes` or the ignore index.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self
            .label
            .iter()
            .find(|&&l| l != IGNORE_INDEX && l as usize >= classes)
        {
            Some(&l) => Err(Error::Label {
                label: l as u32,
                classes,
            }),
            None => Ok(()),
        }
    }
}

/// Stacks samples of equal size into `[n, 3, h, w]` plus flat labels.
pub fn batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot batch zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Consistency(format!(
                "batch mixes {h}x{w} and {}x{} samples",
                s.height(),
                s.width()
            )));
        }
        data.extend(s.image.data().iter().map(|v| T::from_f64_lossy(*v)));
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], data)?, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn located(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Reads a P6 image as a planar `[3, h, w]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = netpbm::decode(&read(path)?, b"P6").map_err(|e| located(path, e))?;
    let hw = img.width * img.height;
    let mut planar = vec![0.0; 3 * hw];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, img.height, img.width], planar)
}

/// Reads a P6 image and a P5 label map of the same size.
pub fn load_sample(image_path: &Path, label_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let lbl = netpbm::decode(&read(label_path)?, b"P5").map_err(|e| located(label_path, e))?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    if (w, h) != (lbl.width, lbl.height) {
        return Err(Error::Consistency(format!(
            "{} is {w}x{h} but {} is {}x{}",
            image_path.display(),
            label_path.display(),
            lbl.width,
            lbl.height
        )));
    }
    Sample::new(image, lbl.data)
}

pub fn save_sample(s: &Sample, image_path: &Path, label_path: &Path) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let hw = h * w;
    let mut interleaved = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            interleaved.push((s.image.data()[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = netpbm::Raster {
        width: w,
        height: h,
        channels: 3,
        data: interleaved,
    };
    let lbl = netpbm::Raster {
        width: w,
        height: h,
        channels: 1,
        data: s.label.clone(),
    };
    write(image_path, &netpbm::encode(&img))?;
    write(label_path, &netpbm::encode(&lbl))
}

/// Image/label path pairs from a manifest; relative paths resolve against
/// the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        let trimmed = body.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let mut cols = body.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    pairs.push((base.join(a.trim()), base.join(b.trim())));
                }
                _ => {
                    return Err(Error::Parse {
                        offset,
                        message: format!("{}: expected `image<TAB>label`", path.display()),
                    })
                }
            }
        }
        offset += line.len();
    }
    Ok(pairs)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    read_manifest(path)?
        .iter()
        .map(|(i, l)| load_sample(i, l))
        .collect()
}

/// Writes samples under `dir` as `images/NNNNN.ppm`, `labels/NNNNN.pgm`
/// and `manifest.tsv`. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/{i:05}.ppm");
        let lbl = format!("labels/{i:05}.pgm");
        save_sample(s, &dir.join(&img), &dir.join(&lbl))?;
        manifest.push_str(&format!("{img}\t{lbl}\n"));
    }
    let path = dir.join("manifest.tsv");
    write(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Train and validation splits: training scenes take indices
/// `0..train`, validation scenes the following `val` indices.
pub fn shapes_splits(
    spec: &ShapesSpec,
    train: usize,
    val: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let make = |range: std::ops::Range<usize>| -> Result<Vec<Sample>> {
        range.map(|i| generate(spec, i as u64)).collect()
    };
    Ok((make(0..train)?, make(train..train + val)?))
}

/// Training and validation samples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Splits {
    pub fn shapes(spec: &ShapesSpec, train: usize, val: usize) -> Result<Self> {
        let (train, val) = shapes_splits(spec, train, val)?;
        Ok(Splits { train, val })
    }

    /// Nonempty splits of one image size with labels below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let first = self
            .train
            .first()
            .ok_or_else(|| Error::Config("training split is empty".into()))?;
        if self.val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let size = (first.height(), first.width());
        for s in self.train.iter().chain(&self.val) {
            if (s.height(), s.width()) != size {
                return Err(Error::Consistency(format!(
                    "samples mix {}x{} and {}x{}",
                    size.0,
                    size.1,
                    s.height(),
                    s.width()
                )));
            }
            s.check_labels(classes)?;
        }
        Ok(())
    }

    /// Content hash over both splits.
    pub fn fingerprint(&self) -> Digest {
        let mut bytes = Vec::new();
        for (tag, split) in [(b't', &self.train), (b'v', &self.val)] {
            bytes.push(tag);
            bytes.extend_from_slice(&(split.len() as u64).to_le_bytes());
            for s in split {
                for d in s.image.dims() {
                    bytes.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in s.image.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                bytes.extend_from_slice(&s.label);
            }
        }
        Digest::of(&bytes)
    }
}
