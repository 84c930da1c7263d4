//! Dense pseudo-labels from a teacher prediction map.
//!
//! The teacher's map is decoded into boxes, filtered by score and rotated
//! NMS; the surviving boxes mark the informative region. A random subset of
//! the grid cells inside that region is paired with the student's
//! predictions at the same cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, rotated_iou, Angle, OrientedBox, Point2};
use crate::losses::PairRecord;
use crate::scenes::GridSpec;

/// One cell's post-activation outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub scores: Vec<f64>,
    /// `(l, t, r, b)` in strides.
    pub offsets: [f64; 4],
    pub angle: Angle,
    pub centerness: f64,
}

impl CellPrediction {
    pub fn max_class(&self) -> (usize, f64) {
        argmax(&self.scores)
    }
}

/// First index of the largest value.
pub(crate) fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePredictionMap {
    pub grid: GridSpec,
    pub num_classes: usize,
    /// Cell-major, `num_classes` per cell.
    pub scores: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
    pub angles: Vec<Angle>,
    pub centerness: Vec<f64>,
}

impl DensePredictionMap {
    pub fn new(grid: GridSpec, num_classes: usize) -> Self {
        let n = grid.num_cells();
        Self {
            grid,
            num_classes,
            scores: vec![0.5; n * num_classes],
            offsets: vec![[0.0; 4]; n],
            angles: vec![Angle::ZERO; n],
            centerness: vec![0.5; n],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn cell_scores(&self, idx: usize) -> &[f64] {
        &self.scores[idx * self.num_classes..(idx + 1) * self.num_classes]
    }

    pub fn cell(&self, idx: usize) -> CellPrediction {
        CellPrediction {
            scores: self.cell_scores(idx).to_vec(),
            offsets: self.offsets[idx],
            angle: self.angles[idx],
            centerness: self.centerness[idx],
        }
    }

    pub fn set_cell(&mut self, idx: usize, cell: &CellPrediction) {
        let k = self.num_classes;
        self.scores[idx * k..(idx + 1) * k].copy_from_slice(&cell.scores);
        self.offsets[idx] = cell.offsets;
        self.angles[idx] = cell.angle;
        self.centerness[idx] = cell.centerness;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if self.scores.len() != n * self.num_classes
            || self.offsets.len() != n
            || self.angles.len() != n
            || self.centerness.len() != n
        {
            return Err(Error::invalid("prediction map channels do not match grid"));
        }
        let open_unit = |x: &f64| x.is_finite() && *x > 0.0 && *x < 1.0;
        if !self.scores.iter().all(open_unit) || !self.centerness.iter().all(open_unit) {
            return Err(Error::invalid("scores and centerness must lie in (0,1)"));
        }
        if !self.offsets.iter().flatten().all(|o| o.is_finite() && *o >= 0.0) {
            return Err(Error::invalid("offsets must be finite and >= 0"));
        }
        Ok(())
    }

    /// Mirror about the vertical axis: columns reversed, `l`/`r` swapped,
    /// angle negated.
    pub fn flip_horizontal(&self) -> DensePredictionMap {
        let mut out = self.clone();
        for idx in 0..self.num_cells() {
            let src = self.grid.mirror_index(idx);
            let mut c = self.cell(src);
            c.offsets.swap(0, 2);
            c.angle = normalize_angle(-c.angle.radians()).expect("finite angle");
            out.set_cell(idx, &c);
        }
        out
    }
}

/// Oriented box implied by a cell's `(l, t, r, b, angle)`, or `None` if it
/// has no area.
pub fn decode_cell(grid: &GridSpec, idx: usize, offsets: [f64; 4], angle: Angle, class_id: usize) -> Option<OrientedBox> {
    let [l, t, r, b] = offsets;
    let s = grid.stride;
    let (w, h) = ((l + r) * s, (t + b) * s);
    if !(w > 0.0 && h > 0.0) {
        return None;
    }
    let p = grid.cell_center(idx);
    let (sn, cs) = angle.radians().sin_cos();
    let du = (r - l) / 2.0 * s;
    let dv = (b - t) / 2.0 * s;
    let center = Point2::new(p.x + du * cs - dv * sn, p.y + du * sn + dv * cs);
    OrientedBox::new(center.x, center.y, w, h, angle, class_id).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: OrientedBox,
    pub score: f64,
    pub cell: usize,
}

/// Boxes of all cells whose `max-class score × centerness` exceeds `score_threshold`.
pub fn decode_boxes(map: &DensePredictionMap, score_threshold: f64) -> Vec<Candidate> {
    (0..map.num_cells())
        .filter_map(|idx| {
            let (cls, s) = argmax(map.cell_scores(idx));
            let score = s * map.centerness[idx];
            if score <= score_threshold {
                return None;
            }
            decode_cell(&map.grid, idx, map.offsets[idx], map.angles[idx], cls).map(|bbox| Candidate {
                bbox,
                score,
                cell: idx,
            })
        })
        .collect()
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
}

/// Greedy class-agnostic suppression in descending score order.
pub fn rotated_nms(mut candidates: Vec<Candidate>, iou_thresh: f64) -> Vec<Candidate> {
    sort_candidates(&mut candidates);
    let mut keep: Vec<Candidate> = Vec::new();
    for c in candidates {
        if keep.iter().all(|k| rotated_iou(&k.bbox, &c.bbox) <= iou_thresh) {
            keep.push(c);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub sample_ratio: f64,
    /// At most this many top-scoring candidates enter NMS.
    pub nms_pre: usize,
    pub weighted_by_score: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.1,
            sample_ratio: 0.25,
            nms_pre: 256,
            weighted_by_score: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::invalid("score_threshold must be in (0,1)"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::invalid("nms_iou must be in (0,1)"));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::invalid("sample_ratio must be in (0,1]"));
        }
        if self.nms_pre == 0 {
            return Err(Error::invalid("nms_pre must be >= 1"));
        }
        Ok(())
    }
}

/// Decode, keep the top `nms_pre`, then suppress.
pub fn teacher_boxes(map: &DensePredictionMap, cfg: &SamplerConfig) -> Vec<Candidate> {
    let mut c = decode_boxes(map, cfg.score_threshold);
    sort_candidates(&mut c);
    c.truncate(cfg.nms_pre);
    rotated_nms(c, cfg.nms_iou)
}

/// Cells whose centers fall inside at least one kept box.
pub fn informative_cells(grid: &GridSpec, boxes: &[Candidate]) -> Vec<usize> {
    (0..grid.num_cells())
        .filter(|&idx| {
            let p = grid.cell_center(idx);
            boxes.iter().any(|b| b.bbox.contains(p))
        })
        .collect()
}

/// Random subset of `ceil(ratio · |candidates|)` informative cells, in ascending cell order.
pub fn sample_dense_labels<R: Rng + ?Sized>(
    map: &DensePredictionMap,
    boxes: &[Candidate],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<usize> {
    let candidates = informative_cells(&map.grid, boxes);
    if candidates.is_empty() {
        return Vec::new();
    }
    let k = ((cfg.sample_ratio * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let picked: Vec<usize> = if cfg.weighted_by_score {
        let weight = |i: usize| {
            let idx = candidates[i];
            argmax(map.cell_scores(idx)).1 * map.centerness[idx]
        };
        match rand::seq::index::sample_weighted(rng, candidates.len(), weight, k) {
            Ok(ix) => ix.into_iter().collect(),
            Err(_) => rand::seq::index::sample(rng, candidates.len(), k).into_vec(),
        }
    } else {
        rand::seq::index::sample(rng, candidates.len(), k).into_vec()
    };
    let mut out: Vec<usize> = picked.into_iter().map(|i| candidates[i]).collect();
    out.sort_unstable();
    out
}

/// One pair per position, both sides read at the same cell.
pub fn pair_with_student(
    positions: &[usize],
    teacher: &DensePredictionMap,
    student: &DensePredictionMap,
) -> Result<Vec<PairRecord>> {
    if teacher.grid != student.grid || teacher.num_classes != student.num_classes {
        return Err(Error::invalid("teacher and student maps differ in shape"));
    }
    positions
        .iter()
        .map(|&idx| {
            if idx >= teacher.num_cells() {
                return Err(Error::invalid(format!("position {idx} outside the grid")));
            }
            Ok(PairRecord {
                cell: idx,
                position: teacher.grid.grid_coords(idx),
                teacher: teacher.cell(idx),
                student: student.cell(idx),
            })
        })
        .collect()
}
