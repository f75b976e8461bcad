//! Segmentation and disparity metrics. Segmentation scores come from one
//! global confusion matrix accumulated over the whole evaluation set.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    /// Count pixels where `ignore` is false (or absent).
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
            return Err(Error::Shape(format!("confusion inputs of lengths {} and {}", pred.len(), gt.len())));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if ignore.is_some_and(|m| m[i]) {
                continue;
            }
            for label in [p, g] {
                if label as usize >= self.classes {
                    return Err(Error::LabelOutOfRange { label: label as usize, classes: self.classes });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {}-class and {}-class matrices", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize, ignore: Option<&[bool]>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Weighted by ground-truth class frequency.
    #[default]
    Frequency,
    /// Unweighted mean over classes present in the ground truth.
    Macro,
}

/// All values in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub acc: f64,
    pub macc: f64,
    pub pre: f64,
    pub rec: f64,
    pub mfsc: f64,
    pub miou: f64,
    pub fwiou: f64,
}

pub fn seg_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<SegReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("segmentation metrics of an empty confusion matrix".into()));
    }
    let total = total as f64;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let present: Vec<usize> = (0..cm.classes).filter(|&k| cm.row(k) > 0).collect();
    let n = present.len() as f64;
    let (mut macc, mut miou, mut mfsc, mut fwiou) = (0.0, 0.0, 0.0, 0.0);
    let (mut pre, mut rec) = (0.0, 0.0);
    let mut trace = 0;
    for k in 0..cm.classes {
        trace += cm.get(k, k);
    }
    for &k in &present {
        let (d, row, col) = (cm.get(k, k), cm.row(k), cm.col(k));
        let recall = ratio(d, row);
        let precision = ratio(d, col);
        let iou = ratio(d, row + col - d);
        let f1 = ratio(2 * d, row + col);
        let freq = row as f64 / total;
        macc += recall / n;
        miou += iou / n;
        mfsc += f1 / n;
        fwiou += freq * iou;
        let wt = match averaging {
            Averaging::Frequency => freq,
            Averaging::Macro => 1.0 / n,
        };
        pre += wt * precision;
        rec += wt * recall;
    }
    Ok(SegReport {
        acc: 100.0 * trace as f64 / total,
        macc: 100.0 * macc,
        pre: 100.0 * pre,
        rec: 100.0 * rec,
        mfsc: 100.0 * mfsc,
        miou: 100.0 * miou,
        fwiou: 100.0 * fwiou,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoReport {
    /// Mean absolute error in pixels.
    pub epe: f64,
    /// Percentage of pixels with error above 1 px.
    pub pep1: f64,
    /// Percentage of pixels with error above 3 px.
    pub pep3: f64,
}

/// Running sums so that reports can be merged over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StereoAccumulator {
    pub count: u64,
    pub abs_err: f64,
    pub over1: u64,
    pub over3: u64,
}

impl StereoAccumulator {
    pub fn add(&mut self, pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || valid.len() != gt.len() {
            return Err(Error::Shape(format!(
                "disparity lengths {} / {} / mask {}",
                pred.len(),
                gt.len(),
                valid.len()
            )));
        }
        for ((&p, &g), &v) in pred.iter().zip(gt).zip(valid) {
            if !v {
                continue;
            }
            let e = (f64::from(p) - f64::from(g)).abs();
            if !e.is_finite() {
                return Err(Error::NonFinite("disparity error".into()));
            }
            self.count += 1;
            self.abs_err += e;
            self.over1 += u64::from(e > 1.0);
            self.over3 += u64::from(e > 3.0);
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &Self) {
        self.count += o.count;
        self.abs_err += o.abs_err;
        self.over1 += o.over1;
        self.over3 += o.over3;
    }

    pub fn report(&self) -> Result<StereoReport> {
        if self.count == 0 {
            return Err(Error::Invalid("stereo metrics with no valid pixels".into()));
        }
        let n = self.count as f64;
        Ok(StereoReport { epe: self.abs_err / n, pep1: 100.0 * self.over1 as f64 / n, pep3: 100.0 * self.over3 as f64 / n })
    }
}

pub fn stereo_metrics(pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<StereoReport> {
    let mut acc = StereoAccumulator::default();
    acc.add(pred, gt, valid)?;
    acc.report()
}

impl fmt::Display for SegReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in [
            ("acc", self.acc),
            ("macc", self.macc),
            ("pre", self.pre),
            ("rec", self.rec),
            ("mfsc", self.mfsc),
            ("miou", self.miou),
            ("fwiou", self.fwiou),
        ] {
            writeln!(f, "{k:<6} {v:8.3}")?;
        }
        Ok(())
    }
}

impl fmt::Display for StereoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:8.3}", "epe", self.epe)?;
        writeln!(f, "{:<6} {:8.3}", "pep1", self.pep1)?;
        writeln!(f, "{:<6} {:8.3}", "pep3", self.pep3)
    }
}

/// Per-pixel argmax over a `[C, H, W]` buffer.
pub fn argmax_labels(data: &[f32], classes: usize) -> Vec<u8> {
    let hw = data.len() / classes;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if data[k * hw + p] > data[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests;
