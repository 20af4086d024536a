//! Confusion matrices, IoU, grouped mIoU and per-step reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Square count matrix; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    /// From row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::invalid(format!("{} counts for a {k}x{k} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion accumulate",
                lhs: vec![gt.len()],
                rhs: vec![pred.len()],
            });
        }
        if let Some(&bad) = gt.iter().chain(pred).find(|&&c| c >= self.k) {
            return Err(Error::invalid(format!("class {bad} outside a {}-class matrix", self.k)));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid(format!("merging {}- and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`; `None` when the class is absent from both ground
    /// truth and predictions.
    pub fn iou(&self, c: usize) -> Option<f64> {
        if c >= self.k {
            return None;
        }
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over `classes`, skipping undefined entries.
    pub fn group_miou(&self, classes: &[usize]) -> Option<f64> {
        mean_defined(classes.iter().map(|&c| self.iou(c)))
    }
}

pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of the all-class mIoU over completed steps.
pub fn avg_metric(per_step_miou_all: &[f64]) -> Result<f64> {
    if per_step_miou_all.is_empty() {
        return Err(Error::invalid("avg metric needs at least one step"));
    }
    Ok(per_step_miou_all.iter().sum::<f64>() / per_step_miou_all.len() as f64)
}

/// Metrics after one continual step. Undefined values are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// `(class id, IoU)` for every head channel, in channel order.
    pub per_class_iou: Vec<(usize, Option<f64>)>,
    pub miou_initial: f64,
    pub miou_incremented: f64,
    pub miou_all: f64,
    pub avg_so_far: f64,
    pub loss_pseudo: f64,
    pub loss_distill: f64,
    pub seconds: f64,
}

impl StepReport {
    /// Metric part of a report; `initial` lists the class ids of the first
    /// step including background. Losses, time and `avg_so_far` are left at 0.
    pub fn from_confusion(step: usize, cm: &ConfusionMatrix, class_ids: &[usize], initial: &[usize]) -> Result<Self> {
        if class_ids.len() != cm.size() {
            return Err(Error::invalid(format!(
                "{} class ids for a {}-class matrix",
                class_ids.len(),
                cm.size()
            )));
        }
        let ious = cm.per_class_iou();
        let group = |want_initial: bool| {
            mean_defined(
                class_ids
                    .iter()
                    .zip(&ious)
                    .filter(|(id, _)| initial.contains(id) == want_initial)
                    .map(|(_, &v)| v),
            )
            .unwrap_or(f64::NAN)
        };
        Ok(StepReport {
            step,
            per_class_iou: class_ids.iter().copied().zip(ious.iter().copied()).collect(),
            miou_initial: group(true),
            miou_incremented: group(false),
            miou_all: mean_defined(ious.iter().copied()).unwrap_or(f64::NAN),
            avg_so_far: 0.0,
            loss_pseudo: 0.0,
            loss_distill: 0.0,
            seconds: 0.0,
        })
    }

    pub fn class_iou(&self, id: usize) -> Option<f64> {
        self.per_class_iou.iter().find(|(c, _)| *c == id).and_then(|(_, v)| *v)
    }
}

pub const CSV_HEADER: &str =
    "step,miou_initial,miou_incremented,miou_all,avg_so_far,loss_pseudo,loss_distill,seconds";

/// One header line plus one row per step. Values use the shortest decimal form
/// that round-trips.
pub fn to_csv(reports: &[StepReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.miou_initial,
            r.miou_incremented,
            r.miou_all,
            r.avg_so_far,
            r.loss_pseudo,
            r.loss_distill,
            r.seconds
        );
    }
    out
}

/// Row of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub step: usize,
    pub miou_initial: f64,
    pub miou_incremented: f64,
    pub miou_all: f64,
    pub avg_so_far: f64,
    pub loss_pseudo: f64,
    pub loss_distill: f64,
    pub seconds: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::invalid("report CSV has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::invalid(format!("report CSV row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            Ok(CsvRow {
                step: f[0].parse().map_err(|_| bad())?,
                miou_initial: num(1)?,
                miou_incremented: num(2)?,
                miou_all: num(3)?,
                avg_so_far: num(4)?,
                loss_pseudo: num(5)?,
                loss_distill: num(6)?,
                seconds: num(7)?,
            })
        })
        .collect()
}

/// Human-readable per-step report with per-class IoU.
pub fn to_text(reports: &[StepReport]) -> String {
    let pct = |v: f64| if v.is_nan() { "   n/a".to_string() } else { format!("{:6.2}", 100.0 * v) };
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "step {}", r.step);
        let _ = writeln!(out, "  miou initial     {}", pct(r.miou_initial));
        let _ = writeln!(out, "  miou incremented {}", pct(r.miou_incremented));
        let _ = writeln!(out, "  miou all         {}", pct(r.miou_all));
        let _ = writeln!(out, "  avg so far       {}", pct(r.avg_so_far));
        let _ = writeln!(out, "  loss pseudo {:.6}  loss distill {:.6}", r.loss_pseudo, r.loss_distill);
        for (id, v) in &r.per_class_iou {
            let _ = writeln!(out, "  class {id:3} iou {}", pct(v.unwrap_or(f64::NAN)));
        }
    }
    out
}
