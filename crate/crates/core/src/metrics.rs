//! Dice / IOU from per-class confusion counts.

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-class true-positive, false-positive and false-negative pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    pixels: u64,
    ignore_index: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeanOptions {
    /// Skip classes that never appear in prediction or target.
    pub present_only: bool,
    pub include_background: bool,
}

impl Default for MeanOptions {
    fn default() -> Self {
        Self {
            present_only: true,
            include_background: false,
        }
    }
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            pixels: 0,
            ignore_index: None,
        }
    }

    pub fn with_ignore(mut self, ignore_index: Option<u8>) -> Self {
        self.ignore_index = ignore_index;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    pub fn tp(&self) -> &[u64] {
        &self.tp
    }

    pub fn fp(&self) -> &[u64] {
        &self.fp
    }

    pub fn fn_counts(&self) -> &[u64] {
        &self.fn_
    }

    pub fn update(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape("confusion update", target.len(), pred.len()));
        }
        let c = self.num_classes();
        for (&p, &t) in pred.iter().zip(target) {
            if self.ignore_index == Some(t) {
                continue;
            }
            if p as usize >= c || t as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "class id {} out of range for {c} classes",
                    p.max(t)
                )));
            }
            if p == t {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    /// Sum of two accumulators.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("confusion merge", self.num_classes(), other.num_classes()));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.pixels += other.pixels;
        Ok(())
    }

    fn nonempty(&self) -> Result<()> {
        if self.pixels == 0 {
            return Err(Error::InvalidArgument(
                "metrics requested from an empty accumulator".into(),
            ));
        }
        Ok(())
    }

    fn present(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] + self.fn_[c] > 0
    }

    /// `2TP / (2TP + FP + FN)`; `None` for a class absent from both masks.
    pub fn dice_per_class(&self) -> Result<Vec<Option<f64>>> {
        self.nonempty()?;
        Ok((0..self.num_classes())
            .map(|c| {
                self.present(c).then(|| {
                    let tp = self.tp[c] as f64;
                    2.0 * tp / (2.0 * tp + (self.fp[c] + self.fn_[c]) as f64)
                })
            })
            .collect())
    }

    /// `TP / (TP + FP + FN)`; `None` for a class absent from both masks.
    pub fn iou_per_class(&self) -> Result<Vec<Option<f64>>> {
        self.nonempty()?;
        Ok((0..self.num_classes())
            .map(|c| {
                self.present(c).then(|| {
                    let tp = self.tp[c] as f64;
                    tp / (tp + (self.fp[c] + self.fn_[c]) as f64)
                })
            })
            .collect())
    }

    fn mean(&self, scores: Vec<Option<f64>>, opts: MeanOptions) -> f64 {
        let first = if opts.include_background { 0 } else { 1 };
        let vals: Vec<f64> = scores
            .into_iter()
            .skip(first)
            .filter_map(|s| match s {
                Some(v) => Some(v),
                None if opts.present_only => None,
                None => Some(0.0),
            })
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Mean Dice over the included classes; NaN if no class qualifies.
    pub fn mean_dice(&self, opts: MeanOptions) -> Result<f64> {
        Ok(self.mean(self.dice_per_class()?, opts))
    }

    /// Mean IOU over the included classes; NaN if no class qualifies.
    pub fn mean_iou(&self, opts: MeanOptions) -> Result<f64> {
        Ok(self.mean(self.iou_per_class()?, opts))
    }

    pub fn report(&self, class_names: Option<&[String]>, opts: MeanOptions) -> Result<MetricsReport> {
        let dice = self.dice_per_class()?;
        let iou = self.iou_per_class()?;
        let classes = (0..self.num_classes())
            .map(|c| ClassMetrics {
                class: c,
                name: class_names.and_then(|n| n.get(c).cloned()),
                dice: dice[c],
                iou: iou[c],
                tp: self.tp[c],
                fp: self.fp[c],
                fn_: self.fn_[c],
                target_pixels: self.tp[c] + self.fn_[c],
            })
            .collect();
        Ok(MetricsReport {
            classes,
            mean_dice: self.mean_dice(opts)?,
            mean_iou: self.mean_iou(opts)?,
            present_only: opts.present_only,
            include_background: opts.include_background,
            pixels: self.pixels,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub target_pixels: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub present_only: bool,
    pub include_background: bool,
    pub pixels: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut acc = ConfusionAccumulator::new(3);
        let m = [0, 1, 2, 1, 0, 0];
        acc.update(&m, &m).unwrap();
        assert!(acc.fp().iter().chain(acc.fn_counts()).all(|&v| v == 0));
        for v in acc
            .dice_per_class()
            .unwrap()
            .into_iter()
            .chain(acc.iou_per_class().unwrap())
        {
            assert_eq!(v, Some(1.0));
        }
    }

    #[test]
    fn all_wrong_counts() {
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(&[0; 10], &[1; 10]).unwrap();
        assert_eq!(acc.fp()[0], 10);
        assert_eq!(acc.fn_counts()[1], 10);
    }

    #[test]
    fn formula_values() {
        let mut acc = ConfusionAccumulator::new(2);
        let mut pred = vec![1u8; 50];
        let mut target = vec![1u8; 50];
        pred.extend([1; 25]);
        target.extend([0; 25]);
        pred.extend([0; 25]);
        target.extend([1; 25]);
        acc.update(&pred, &target).unwrap();
        assert_eq!((acc.tp()[1], acc.fp()[1], acc.fn_counts()[1]), (50, 25, 25));
        assert_eq!(acc.iou_per_class().unwrap()[1], Some(0.5));
        assert!((acc.dice_per_class().unwrap()[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sequential_updates_are_additive() {
        let (p1, t1) = ([0u8, 1, 2, 2], [0u8, 2, 2, 1]);
        let (p2, t2) = ([1u8, 1, 0], [1u8, 0, 0]);
        let mut a = ConfusionAccumulator::new(3);
        a.update(&p1, &t1).unwrap();
        a.update(&p2, &t2).unwrap();
        let mut b = ConfusionAccumulator::new(3);
        b.update(&[p1.as_slice(), &p2].concat(), &[t1.as_slice(), &t2].concat())
            .unwrap();
        assert_eq!(a, b);
        let mut c = ConfusionAccumulator::new(3);
        let mut d = ConfusionAccumulator::new(3);
        c.update(&p1, &t1).unwrap();
        d.update(&p2, &t2).unwrap();
        c.merge(&d).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn absent_classes_and_empty() {
        let acc = ConfusionAccumulator::new(3);
        assert!(acc.mean_dice(MeanOptions::default()).is_err());
        let mut acc = ConfusionAccumulator::new(3);
        acc.update(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(acc.mean_iou(MeanOptions::default()).unwrap(), 1.0);
        let all = MeanOptions {
            present_only: false,
            include_background: true,
        };
        assert!((acc.mean_iou(all).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(acc.update(&[3], &[0]).is_err());
        assert!(acc.update(&[0, 1], &[0]).is_err());
    }
}
