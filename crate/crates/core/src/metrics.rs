//! Confusion-matrix bookkeeping, mIoU and pixel accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K x K` pixel counts, rows indexed by ground truth and columns by
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Dimension(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose label is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, label {}",
                pred.len(),
                label.len()
            )));
        }
        let k = self.classes;
        for (&p, &l) in pred.iter().zip(label) {
            if l == ignore_index {
                continue;
            }
            if p as usize >= k {
                return Err(Error::Contract(format!(
                    "prediction {p} outside {k} classes"
                )));
            }
            if l as usize >= k {
                return Err(Error::Label {
                    label: l as u32,
                    classes: k,
                });
            }
            self.counts[l as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class is absent from both truth and
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let denom = row + col - diag;
                (denom > 0).then(|| diag as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over defined classes, with the per-class values.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let per_class = self.class_iou();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Undefined("mIoU of an empty evaluation".into()));
        }
        Ok((
            defined.iter().sum::<f64>() / defined.len() as f64,
            per_class,
        ))
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined(
                "pixel accuracy of an empty evaluation".into(),
            ));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Undefined("mean of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Summary of one or more evaluations of the same configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub miou: f64,
    pub miou_std: f64,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub per_class: Vec<Option<f64>>,
    pub seeds: usize,
}

impl Report {
    pub fn single(cm: &ConfusionMatrix) -> Result<Self> {
        Self::over_seeds(std::slice::from_ref(cm))
    }

    /// Averages mIoU, accuracy and per-class IoU over per-seed matrices.
    pub fn over_seeds(runs: &[ConfusionMatrix]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Undefined("report over zero runs".into()));
        }
        let k = runs[0].classes();
        let mut mious = Vec::new();
        let mut accs = Vec::new();
        let mut per_seed = Vec::new();
        for cm in runs {
            if cm.classes() != k {
                return Err(Error::Dimension("runs disagree on class count".into()));
            }
            let (m, pc) = cm.miou()?;
            mious.push(m);
            accs.push(cm.pixel_accuracy()?);
            per_seed.push(pc);
        }
        let per_class = (0..k)
            .map(|c| {
                let vals: Vec<f64> = per_seed.iter().filter_map(|pc| pc[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let (miou, miou_std) = mean_std(&mious)?;
        let (accuracy, accuracy_std) = mean_std(&accs)?;
        Ok(Report {
            miou,
            miou_std,
            accuracy,
            accuracy_std,
            per_class,
            seeds: runs.len(),
        })
    }

    /// Human-readable table; IoU values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "class", "IoU%");
        for (c, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{:<10} {:>8.2}", c, 100.0 * v);
                }
                None => {
                    let _ = writeln!(s, "{:<10} {:>8}", c, "n/a");
                }
            }
        }
        let _ = writeln!(
            s,
            "{:<10} {:>8.2} ± {:.2}",
            "mIoU",
            100.0 * self.miou,
            100.0 * self.miou_std
        );
        let _ = writeln!(
            s,
            "{:<10} {:>8.2} ± {:.2}",
            "accuracy",
            100.0 * self.accuracy,
            100.0 * self.accuracy_std
        );
        let _ = writeln!(s, "{:<10} {:>8}", "seeds", self.seeds);
        s
    }

    /// Flat `key=value` lines, values as fractions in `[0, 1]`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou={}", self.miou);
        let _ = writeln!(s, "miou_std={}", self.miou_std);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "accuracy_std={}", self.accuracy_std);
        let _ = writeln!(s, "std={}", self.miou_std);
        let _ = writeln!(s, "seeds={}", self.seeds);
        for (c, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "per_class_iou.{c}={v}");
                }
                None => {
                    let _ = writeln!(s, "per_class_iou.{c}=nan");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]).unwrap(), (4.0, 0.0));
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn key_values_mention_every_class() {
        let cm = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 1, 3, 0, 0, 0, 0]).unwrap();
        let kv = Report::single(&cm).unwrap().to_key_values();
        assert!(kv.contains("miou=0.6\n"));
        assert!(kv.contains("accuracy=0.75\n"));
        assert!(kv.contains("per_class_iou.2=nan\n"));
    }
}
