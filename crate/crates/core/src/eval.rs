//! Detection matching by rotated IoU, average precision and mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, OrientedBox};
use crate::model::ToyModel;
use crate::pseudo_label::{teacher_boxes, SamplerConfig};
use crate::scenes::FeatureField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: OrientedBox, confidence: f64) -> Result<Self> {
        if !(confidence > 0.0 && confidence < 1.0) && confidence != 1.0 {
            return Err(Error::invalid(format!("confidence must be in (0,1], got {confidence}")));
        }
        Ok(Self { bbox, confidence })
    }

    pub fn class_id(&self) -> usize {
        self.bbox.class_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    Voc11,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Post-processing applied to a model's prediction map.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub nms_pre: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            score_threshold: 0.05,
            nms_iou: 0.1,
            nms_pre: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("iou_threshold must be in (0,1]".into()));
        }
        self.postprocess().validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn postprocess(&self) -> SamplerConfig {
        SamplerConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            nms_pre: self.nms_pre,
            ..SamplerConfig::default()
        }
    }
}

/// Model forward, decoding and rotated NMS.
pub fn detect(model: &ToyModel, features: &FeatureField, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let map = model.forward(features)?;
    Ok(teacher_boxes(&map, &cfg.postprocess())
        .into_iter()
        .map(|c| Detection {
            bbox: c.bbox,
            confidence: c.score,
        })
        .collect())
}

/// TP flags for `dets` (already in confidence order). Each detection takes
/// the unmatched same-class ground truth with the highest IoU, if that IoU
/// reaches the threshold.
pub fn match_detections(dets: &[Detection], gts: &[OrientedBox], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class_id != d.class_id() {
                    continue;
                }
                let iou = rotated_iou(&d.bbox, g);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each detection in the given order.
pub fn pr_points(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the interpolated PR curve. Detections are ordered by
/// confidence, ties kept in input order. `None` when `n_gt == 0`.
pub fn average_precision(flags: &[bool], confidences: &[f64], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let sorted: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
    Some(ap_from_points(&pr_points(&sorted, n_gt), interp))
}

fn ap_from_points(points: &[(f64, f64)], interp: Interpolation) -> f64 {
    // precision envelope: max precision at recall >= r
    let mut env: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    match interp {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (&(r, _), &p) in points.iter().zip(&env) {
                ap += (r - prev_r) * p;
                prev_r = r;
            }
            ap
        }
        Interpolation::Voc11 => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    points
                        .iter()
                        .zip(&env)
                        .find(|(p, _)| p.0 >= r)
                        .map(|(_, &e)| e)
                        .unwrap_or(0.0)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: Vec<ClassReport>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-class AP over a set of images; mAP averages classes that have at
/// least one ground-truth box (0 if none do).
pub fn evaluate(images: &[(Vec<Detection>, Vec<OrientedBox>)], num_classes: usize, cfg: &EvalConfig) -> EvalReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        // (confidence, image, index within image) in insertion order
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        let mut n_gt = 0;
        for (im, (d, g)) in images.iter().enumerate() {
            n_gt += g.iter().filter(|b| b.class_id == c).count();
            dets.extend(d.iter().enumerate().filter(|(_, x)| x.class_id() == c).map(|(k, x)| (x.confidence, im, k)));
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
        let flags: Vec<bool> = dets
            .iter()
            .map(|&(_, im, k)| {
                let d = &images[im].0[k];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in images[im].1.iter().enumerate() {
                    if used[im][j] || g.class_id != c {
                        continue;
                    }
                    let iou = rotated_iou(&d.bbox, g);
                    if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                best.map(|(j, _)| used[im][j] = true).is_some()
            })
            .collect();
        let tp = flags.iter().filter(|f| **f).count();
        let pr_curve = if n_gt > 0 { pr_points(&flags, n_gt) } else { Vec::new() };
        let ap = (n_gt > 0).then(|| ap_from_points(&pr_curve, cfg.interpolation));
        per_class.push(ClassReport {
            class_id: c,
            ap,
            num_gt: n_gt,
            tp,
            fp: flags.len() - tp,
            fn_: n_gt - tp,
            pr_curve,
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    EvalReport {
        map,
        tp: per_class.iter().map(|c| c.tp).sum(),
        fp: per_class.iter().map(|c| c.fp).sum(),
        fn_: per_class.iter().map(|c| c.fn_).sum(),
        per_class,
    }
}
