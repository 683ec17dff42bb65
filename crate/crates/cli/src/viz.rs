//! Attention heatmaps for one image.
//!
//! For every tap four grayscale maps are written at the input resolution:
//! the channel mean of the raw feature, of the channel-gated feature, of the
//! refined feature, and the spatial gate itself. The first three are
//! min-max scaled per image; the spatial gate keeps its absolute `(0, 1)`
//! scale.

use std::path::{Path, PathBuf};

use attnfd::attention::{self, CbamParams};
use attnfd::dataset::netpbm::{self, Raster};
use attnfd::distill::{self, Projector, TapEntry};
use attnfd::train::{network_from_checkpoint, Checkpoint, Teacher};
use attnfd::{init, Error, Result, Scalar, SegNet, TapId, Tape, Tensor, Var};

pub const FLAT_GRAY: u8 = 128;

#[derive(Debug, Default)]
pub struct Heatmaps {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Per-channel mean of a `[1, c, h, w]` tensor.
pub fn channel_mean<T: Scalar>(t: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, c, h, w) = t.shape().nchw()?;
    if n != 1 {
        return Err(Error::Dimension(format!(
            "heatmaps take one sample, got {n}"
        )));
    }
    let d = t.data();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&d[ch * h * w..(ch + 1) * h * w]) {
            *o += v.to_f64_lossy();
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    Ok(out)
}

/// Min-max scaling to `0..=255`. `None` when the map is constant.
pub fn min_max_bytes(v: &[f64]) -> Option<Vec<u8>> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    Some(
        v.iter()
            .map(|x| (255.0 * (x - lo) / (hi - lo)).round() as u8)
            .collect(),
    )
}

pub fn unit_bytes(v: &[f64]) -> Vec<u8> {
    v.iter()
        .map(|x| (255.0 * x.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

/// Nearest-neighbour enlargement of an `h x w` map by integer factors.
fn enlarge(v: &[u8], h: usize, w: usize, fy: usize, fx: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * fy * fx);
    for y in 0..h * fy {
        for x in 0..w * fx {
            out.push(v[(y / fy) * w + x / fx]);
        }
    }
    out
}

struct Source<T: Scalar> {
    net: SegNet<T>,
    /// Per tap: optional student alignment and the attention block.
    taps: Vec<(TapId, Option<TapEntry<T>>, CbamParams<T>)>,
}

fn teacher_source<T: Scalar>(ck: &Checkpoint) -> Result<Source<T>> {
    let t = Teacher::<T>::from_checkpoint(ck)?;
    let taps = t
        .cbams
        .iter()
        .map(|(id, c)| (*id, None, c.clone()))
        .collect();
    Ok(Source { net: t.net, taps })
}

fn student_source<T: Scalar>(ck: &Checkpoint, h: usize, w: usize) -> Result<Source<T>> {
    let net = network_from_checkpoint::<T>(ck)?;
    let ids = TapId::parse_list(ck.meta("taps")?)?;
    let shapes = net.config().tap_shapes(h, w)?;
    let reduction = net.config().reduction;
    let mut taps = Vec::new();
    for id in ids {
        let Ok(kernel) = ck.block(&format!("tap.{id}.cbam.w0")) else {
            continue;
        };
        let ct = kernel.dims[1];
        let student_shape = shapes
            .iter()
            .find(|(t, _)| *t == id)
            .map(|(_, s)| *s)
            .unwrap();
        let projector = if student_shape.0 != ct {
            let mut p = Projector {
                kernel: init::zeros(&[ct, student_shape.0, 1, 1])?,
                bias: init::zeros(&[ct])?,
            };
            ck.restore_param(&format!("tap.{id}.proj.kernel"), &mut p.kernel)?;
            ck.restore_param(&format!("tap.{id}.proj.bias"), &mut p.bias)?;
            Some(p)
        } else {
            None
        };
        let mut cbam = CbamParams::zeros(ct, reduction)?;
        for (name, p) in cbam.params_mut() {
            ck.restore_param(&format!("tap.{id}.cbam.{name}"), p)?;
        }
        let entry = TapEntry {
            id,
            teacher_shape: (ct, student_shape.1, student_shape.2),
            student_shape,
            projector,
            student_cbam: cbam.clone(),
            teacher_cbam: CbamParams::zeros(ct, reduction)?,
        };
        taps.push((id, Some(entry), cbam));
    }
    if taps.is_empty() {
        return Err(Error::Config(
            "checkpoint has no attention blocks to visualize".into(),
        ));
    }
    Ok(Source { net, taps })
}

/// Writes `{tap}_raw.pgm`, `{tap}_channel.pgm`, `{tap}_refined.pgm` and
/// `{tap}_spatial.pgm` under `out` for a teacher checkpoint or a student
/// trained with attention blocks.
pub fn heatmaps<T: Scalar>(ck: &Checkpoint, image: &Tensor<f64>, out: &Path) -> Result<Heatmaps> {
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let src = match ck.meta("kind")? {
        "teacher" => teacher_source::<T>(ck)?,
        _ => student_source::<T>(ck, h, w)?,
    };
    let mut tape = Tape::<T>::inference();
    let x = tape.constant(image.cast::<T>().reshape(&[1, 3, h, w])?)?;
    let bundle = src.net.forward_with_taps(&mut tape, x)?;
    let mut result = Heatmaps::default();
    for (id, align, cbam) in &src.taps {
        let mut f: Var = bundle.get(*id);
        if let Some(entry) = align {
            f = distill::align_student_feature(&mut tape, f, entry)?;
        }
        let r = attention::cbam_refine(&mut tape, f, cbam)?;
        let (_, _, fh, fw) = tape.value(f).shape().nchw()?;
        let (fy, fx) = (h / fh, w / fw);
        let maps = [
            ("raw", channel_mean(tape.value(f))?),
            ("channel", channel_mean(tape.value(r.channel_refined))?),
            ("refined", channel_mean(tape.value(r.refined))?),
        ];
        let mut images = Vec::new();
        for (name, m) in maps {
            let bytes = match min_max_bytes(&m) {
                Some(b) => b,
                None => {
                    result.warnings.push(format!(
                        "tap {id} {name} map is constant, written as mid-gray"
                    ));
                    vec![FLAT_GRAY; m.len()]
                }
            };
            images.push((name, bytes));
        }
        let spatial: Vec<f64> = tape
            .value(r.maps.spatial)
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        images.push(("spatial", unit_bytes(&spatial)));
        for (name, bytes) in images {
            let raster = Raster {
                width: fw * fx,
                height: fh * fy,
                channels: 1,
                data: enlarge(&bytes, fh, fw, fy, fx),
            };
            let path = out.join(format!("{id}_{name}.pgm"));
            std::fs::create_dir_all(out).map_err(|source| Error::Io {
                path: out.to_path_buf(),
                source,
            })?;
            std::fs::write(&path, netpbm::encode(&raster)).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            result.written.push(path);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_is_affine_invariant() {
        let v = [0.3, -1.2, 4.0, 0.0];
        let scaled: Vec<f64> = v.iter().map(|x| 0.25 * x).collect();
        assert_eq!(min_max_bytes(&v), min_max_bytes(&scaled));
        assert_eq!(min_max_bytes(&v).unwrap(), vec![74, 0, 255, 59]);
        assert_eq!(min_max_bytes(&[2.0, 2.0]), None);
    }

    #[test]
    fn enlarge_replicates_blocks() {
        assert_eq!(enlarge(&[1, 2], 1, 2, 2, 2), vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
