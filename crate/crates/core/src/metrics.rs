//! Confusion-matrix metrics (mIoU, OA, mF1) and the overlap-Δ report.
//! Classes that never occur in truth or prediction are left out of means.

use std::fmt::Write as _;

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::geometry::FrustumConfig;
use crate::infer::{infer_image, WindowModel};
use crate::raster::{LabelMap, IGNORE};

/// Entry `(g, p)` counts pixels with truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` for classes absent from both truth and prediction.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, prediction: &LabelMap, truth: &LabelMap) -> Result<()> {
        if prediction.dims() != truth.dims() {
            return Err(Error::Metrics(format!(
                "prediction {:?} and truth {:?} differ in size",
                prediction.dims(),
                truth.dims()
            )));
        }
        let c = self.classes;
        let mut local = vec![0u64; c * c];
        for (i, (&p, &g)) in prediction.data.iter().zip(&truth.data).enumerate() {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return Err(Error::LabelRange {
                    value: p.max(g) as u8,
                    x: i % truth.width,
                    y: i / truth.width,
                    classes: c,
                });
            }
            local[g * c + p] += 1;
        }
        // committed only after the whole map validated
        for (a, b) in self.counts.iter_mut().zip(local) {
            *a += b;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metrics(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn per_class(&self) -> Vec<ClassScore> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fp = (0..c).filter(|&g| g != k).map(|g| self.get(g, k)).sum::<u64>();
                let fn_ = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum::<u64>();
                let present = tp + fp + fn_ > 0;
                ClassScore {
                    class: k,
                    tp,
                    fp,
                    fn_,
                    iou: present.then(|| tp as f64 / (tp + fp + fn_) as f64),
                    f1: present.then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
                }
            })
            .collect()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Metrics("confusion matrix is empty".into()));
        }
        Ok(())
    }

    fn mean_present(&self, pick: impl Fn(&ClassScore) -> Option<f64>) -> Result<f64> {
        self.check_nonempty()?;
        let vals: Vec<f64> = self.per_class().iter().filter_map(pick).collect();
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        self.mean_present(|s| s.iou)
    }

    pub fn mf1(&self) -> Result<f64> {
        self.mean_present(|s| s.f1)
    }

    pub fn oa(&self) -> Result<f64> {
        self.check_nonempty()?;
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        Ok(MetricSummary {
            miou: self.miou()?,
            oa: self.oa()?,
            mf1: self.mf1()?,
            per_class: self.per_class(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub miou: f64,
    pub oa: f64,
    pub mf1: f64,
    pub per_class: Vec<ClassScore>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl MetricSummary {
    fn rows(&self, names: &[&str], per_class: bool) -> Vec<(String, String)> {
        let mut rows = vec![
            ("mIoU".to_string(), format!("{:.6}", self.miou)),
            ("OA".to_string(), format!("{:.6}", self.oa)),
            ("mF1".to_string(), format!("{:.6}", self.mf1)),
        ];
        if per_class {
            for s in &self.per_class {
                let name = names.get(s.class).map_or_else(|| format!("class{}", s.class), |n| n.to_string());
                rows.push((format!("IoU[{name}]"), fmt_opt(s.iou)));
                rows.push((format!("F1[{name}]"), fmt_opt(s.f1)));
            }
        }
        rows
    }

    /// Aligned two-column text.
    pub fn to_text(&self, class_names: &[&str], per_class: bool) -> String {
        aligned(&self.rows(class_names, per_class))
    }

    /// CSV with header `metric,value`.
    pub fn to_csv(&self, class_names: &[&str], per_class: bool) -> String {
        csv(&self.rows(class_names, per_class))
    }
}

fn aligned(rows: &[(String, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}

fn csv(rows: &[(String, String)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// Confusion matrix of full-image inference over `scenes`.
pub fn evaluate(
    model: &dyn WindowModel,
    scenes: &[Scene],
    frustum: &FrustumConfig,
    stride: usize,
    workers: usize,
) -> Result<ConfusionMatrix> {
    if scenes.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.classes());
    for scene in scenes {
        let pred = infer_image(model, &scene.image, frustum, stride, workers)?;
        cm.update(&pred, &scene.labels)?;
    }
    Ok(cm)
}

/// mIoU without (`stride_a`) and with (`stride_b`) overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapReport {
    pub stride_a: usize,
    pub stride_b: usize,
    pub miou_a: f64,
    pub miou_b: f64,
    pub delta: f64,
}

pub const OVERLAP_COLUMNS: [&str; 3] = ["mIoU w/o overlap", "mIoU w/ overlap", "Δ"];

impl OverlapReport {
    pub fn to_text(&self) -> String {
        let vals = [self.miou_a, self.miou_b, self.delta].map(|v| format!("{v:.6}"));
        let widths: Vec<usize> = OVERLAP_COLUMNS
            .iter()
            .zip(&vals)
            .map(|(h, v)| h.chars().count().max(v.len()))
            .collect();
        let mut out = String::new();
        for (i, h) in OVERLAP_COLUMNS.iter().enumerate() {
            let pad = widths[i] - h.chars().count();
            let _ = write!(out, "{}{h}{}", if i > 0 { "  " } else { "" }, " ".repeat(pad));
        }
        out.push('\n');
        for (i, v) in vals.iter().enumerate() {
            let _ = write!(out, "{}{v:<w$}", if i > 0 { "  " } else { "" }, w = widths[i]);
        }
        out.push('\n');
        out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }

    pub fn to_csv(&self) -> String {
        csv(&[
            (OVERLAP_COLUMNS[0].to_string(), self.miou_a.to_string()),
            (OVERLAP_COLUMNS[1].to_string(), self.miou_b.to_string()),
            (OVERLAP_COLUMNS[2].to_string(), self.delta.to_string()),
        ])
    }
}

pub fn overlap_delta(
    model: &dyn WindowModel,
    scenes: &[Scene],
    frustum: &FrustumConfig,
    stride_a: usize,
    stride_b: usize,
    workers: usize,
) -> Result<OverlapReport> {
    if stride_a <= stride_b {
        return Err(Error::config(
            "overlap_delta",
            format!("stride_a ({stride_a}) must exceed stride_b ({stride_b})"),
        ));
    }
    let miou_a = evaluate(model, scenes, frustum, stride_a, workers)?.miou()?;
    let miou_b = evaluate(model, scenes, frustum, stride_b, workers)?.miou()?;
    Ok(OverlapReport {
        stride_a,
        stride_b,
        miou_a,
        miou_b,
        delta: miou_b - miou_a,
    })
}
