//! Synthetic aerial scenes: dense, regularly arranged oriented objects,
//! hand-built feature fields, and FCOS-style dense targets.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, obb_to_polygon, Angle, OrientedBox, Point2};

/// Feature channel layout. Class-signature channels follow `CH_CLASS0`.
pub const CH_INSIDE: usize = 0;
pub const CH_SIN2: usize = 1;
pub const CH_COS2: usize = 2;
pub const CH_LOCAL_U: usize = 3;
pub const CH_LOCAL_V: usize = 4;
pub const CH_WIDTH: usize = 5;
pub const CH_HEIGHT: usize = 6;
pub const CH_NOISE: usize = 7;
pub const CH_CLASS0: usize = 8;

pub fn num_feature_channels(num_classes: usize) -> usize {
    CH_CLASS0 + num_classes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Scene units per cell.
    pub stride: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: f64) -> Result<Self> {
        if height == 0 || width == 0 || !(stride > 0.0) {
            return Err(Error::invalid("grid needs positive height, width and stride"));
        }
        Ok(Self {
            height,
            width,
            stride,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn row_col(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }

    /// Scene-space center of a cell.
    pub fn cell_center(&self, idx: usize) -> Point2 {
        let (r, c) = self.row_col(idx);
        Point2::new((c as f64 + 0.5) * self.stride, (r as f64 + 0.5) * self.stride)
    }

    /// Grid coordinates `(col, row)` of a cell.
    pub fn grid_coords(&self, idx: usize) -> Point2 {
        let (r, c) = self.row_col(idx);
        Point2::new(c as f64, r as f64)
    }

    pub fn mirror_index(&self, idx: usize) -> usize {
        let (r, c) = self.row_col(idx);
        self.index(r, self.width - 1 - c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Grid,
    Rows,
    Clusters,
    Scattered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub canvas_height: f64,
    pub canvas_width: f64,
    pub layouts: Vec<LayoutKind>,
    pub count_min: usize,
    pub count_max: usize,
    /// Range of the long box side, scene units.
    pub size_min: f64,
    pub size_max: f64,
    /// Half-width of the uniform jitter added to a layout's shared angle.
    pub angle_jitter: f64,
    pub num_classes: usize,
    pub stride: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas_height: 256.0,
            canvas_width: 256.0,
            layouts: vec![
                LayoutKind::Grid,
                LayoutKind::Rows,
                LayoutKind::Clusters,
                LayoutKind::Scattered,
            ],
            count_min: 6,
            count_max: 16,
            size_min: 24.0,
            size_max: 44.0,
            angle_jitter: 0.08,
            num_classes: 3,
            stride: 8.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_min < 1 || self.count_max < self.count_min {
            return Err(Error::invalid("object count range must satisfy 1 <= min <= max"));
        }
        if !(self.angle_jitter >= 0.0) {
            return Err(Error::invalid("angle jitter must be >= 0"));
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return Err(Error::invalid("size range must be positive and ordered"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if self.layouts.is_empty() {
            return Err(Error::invalid("need at least one layout kind"));
        }
        if !(self.stride > 0.0 && self.canvas_width >= self.stride && self.canvas_height >= self.stride) {
            return Err(Error::invalid("canvas must hold at least one grid cell"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            height: (self.canvas_height / self.stride).floor() as usize,
            width: (self.canvas_width / self.stride).floor() as usize,
            stride: self.stride,
        }
    }

    /// Long-to-short side ratio of a class; classes are told apart by shape too.
    pub fn class_aspect(&self, class_id: usize) -> f64 {
        let k = self.num_classes.max(2) - 1;
        3.0 - 1.6 * class_id as f64 / k as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<OrientedBox>,
    pub layout: LayoutKind,
}

impl Scene {
    /// One structured-text record: `{"config_hash": ..., "layout": ..., "boxes": [...]}`.
    pub fn to_record_line(&self, config_hash: &str) -> String {
        let rec = SceneRecord {
            config_hash: config_hash.to_string(),
            layout: self.layout,
            boxes: self.boxes.clone(),
        };
        serde_json::to_string(&rec).expect("scene serializes")
    }

    pub fn from_record_line(line: &str) -> Result<(String, Scene)> {
        let rec: SceneRecord = serde_json::from_str(line)
            .map_err(|e| Error::invalid(format!("bad scene record: {e}")))?;
        Ok((
            rec.config_hash,
            Scene {
                boxes: rec.boxes,
                layout: rec.layout,
            },
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    config_hash: String,
    layout: LayoutKind,
    boxes: Vec<OrientedBox>,
}

pub fn write_scenes(path: &Path, scenes: &[Scene], config_hash: &str) -> Result<()> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&s.to_record_line(config_hash));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<Vec<(String, Scene)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Scene::from_record_line)
        .collect()
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Generates one scene with the layout picked uniformly from `cfg.layouts`.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let layout = cfg.layouts[rng.random_range(0..cfg.layouts.len())];
    generate_layout(cfg, layout, rng)
}

pub fn generate_layout<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    layout: LayoutKind,
    rng: &mut R,
) -> Result<Scene> {
    cfg.validate()?;
    let count = rng.random_range(cfg.count_min..=cfg.count_max);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let boxes = match layout {
            LayoutKind::Grid => place_lattice(cfg, count, rng)?,
            LayoutKind::Rows => place_rows(cfg, count, rng)?,
            LayoutKind::Clusters => place_clusters(cfg, count, rng)?,
            LayoutKind::Scattered => place_scattered(cfg, count, rng)?,
        };
        if let Some(boxes) = boxes {
            return Ok(Scene { boxes, layout });
        }
    }
    Err(Error::Generation(format!(
        "could not place {count} objects ({layout:?}) on a {}x{} canvas",
        cfg.canvas_width, cfg.canvas_height
    )))
}

/// Scene `i` of a dataset derived from `seed`; independent of other indices.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(cfg, &mut scene_rng(cfg.seed, i as u64)))
        .collect()
}

fn jittered<R: Rng + ?Sized>(base: f64, jitter: f64, rng: &mut R) -> Angle {
    let j = if jitter > 0.0 {
        rng.random_range(-jitter..=jitter)
    } else {
        0.0
    };
    normalize_angle(base + j).expect("finite angle")
}

fn random_size<R: Rng + ?Sized>(cfg: &SceneConfig, class_id: usize, rng: &mut R) -> (f64, f64) {
    let long = if cfg.size_max > cfg.size_min {
        rng.random_range(cfg.size_min..=cfg.size_max)
    } else {
        cfg.size_min
    };
    (long, long / cfg.class_aspect(class_id))
}

fn fits(cfg: &SceneConfig, b: &OrientedBox, placed: &[OrientedBox]) -> bool {
    let inside = obb_to_polygon(b).iter().all(|p| {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= cfg.canvas_width && p.y <= cfg.canvas_height
    });
    inside && placed.iter().all(|o| !overlaps(b, o, 2.0))
}

fn overlaps(a: &OrientedBox, b: &OrientedBox, margin: f64) -> bool {
    let grow = |x: &OrientedBox| OrientedBox {
        w: x.w + margin,
        h: x.h + margin,
        ..*x
    };
    crate::geometry::rotated_iou(&grow(a), &grow(b)) > 0.0
}

fn make_box(cx: f64, cy: f64, w: f64, h: f64, angle: Angle, class_id: usize) -> OrientedBox {
    OrientedBox {
        cx,
        cy,
        w,
        h,
        angle,
        class_id,
    }
}

// Shared class, size and base angle on a rotated lattice.
fn place_lattice<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Option<Vec<OrientedBox>>> {
    let class_id = rng.random_range(0..cfg.num_classes);
    let (w, h) = random_size(cfg, class_id, rng);
    let base = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let (su, sv) = (w * 1.3 + 4.0, h * 1.6 + 4.0);
    let (s, c) = base.sin_cos();
    let (u, v) = (Point2::new(c, s), Point2::new(-s, c));
    let center = Point2::new(cfg.canvas_width / 2.0, cfg.canvas_height / 2.0);
    let mut boxes = Vec::with_capacity(count);
    for k in 0..count {
        let (i, j) = (k / cols, k % cols);
        let du = (j as f64 - (cols as f64 - 1.0) / 2.0) * su;
        let dv = (i as f64 - (rows as f64 - 1.0) / 2.0) * sv;
        let b = make_box(
            center.x + du * u.x + dv * v.x,
            center.y + du * u.y + dv * v.y,
            w,
            h,
            jittered(base, cfg.angle_jitter, rng),
            class_id,
        );
        if !fits(cfg, &b, &boxes) {
            return Ok(None);
        }
        boxes.push(b);
    }
    Ok(Some(boxes))
}

// Parallel rows of side-by-side objects, one class per row.
fn place_rows<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Option<Vec<OrientedBox>>> {
    let n_rows = rng.random_range(1..=3usize).min(count);
    let base = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let (s, c) = base.sin_cos();
    let (u, v) = (Point2::new(c, s), Point2::new(-s, c));
    let center = Point2::new(cfg.canvas_width / 2.0, cfg.canvas_height / 2.0);
    let per_row = count.div_ceil(n_rows);
    let mut boxes = Vec::with_capacity(count);
    let mut row_offset = -(n_rows as f64 - 1.0) / 2.0;
    for _ in 0..n_rows {
        let class_id = rng.random_range(0..cfg.num_classes);
        let (w, h) = random_size(cfg, class_id, rng);
        let in_row = per_row.min(count - boxes.len());
        let spacing = h * 1.5 + 3.0;
        let du = row_offset * (cfg.size_max * 1.4 + 6.0);
        for k in 0..in_row {
            let dv = (k as f64 - (in_row as f64 - 1.0) / 2.0) * spacing;
            let b = make_box(
                center.x + du * u.x + dv * v.x,
                center.y + du * u.y + dv * v.y,
                w,
                h,
                jittered(base, cfg.angle_jitter, rng),
                class_id,
            );
            if !fits(cfg, &b, &boxes) {
                return Ok(None);
            }
            boxes.push(b);
        }
        row_offset += 1.0;
    }
    Ok(Some(boxes))
}

// A few groups, each with its own class and orientation.
fn place_clusters<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Option<Vec<OrientedBox>>> {
    let n_clusters = rng.random_range(2..=3usize).min(count);
    let margin = cfg.size_max;
    let mut boxes = Vec::with_capacity(count);
    for k in 0..n_clusters {
        let class_id = rng.random_range(0..cfg.num_classes);
        let base = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
        let cx = rng.random_range(margin..(cfg.canvas_width - margin).max(margin + 1e-9));
        let cy = rng.random_range(margin..(cfg.canvas_height - margin).max(margin + 1e-9));
        let members = count / n_clusters + usize::from(k < count % n_clusters);
        for _ in 0..members {
            let (w, h) = random_size(cfg, class_id, rng);
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let r = rng.random_range(0.0..cfg.size_max * 1.6);
                let t = rng.random_range(0.0..2.0 * PI);
                let b = make_box(
                    cx + r * t.cos(),
                    cy + r * t.sin(),
                    w,
                    h,
                    jittered(base, cfg.angle_jitter, rng),
                    class_id,
                );
                if fits(cfg, &b, &boxes) {
                    boxes.push(b);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Ok(None);
            }
        }
    }
    Ok(Some(boxes))
}

fn place_scattered<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Option<Vec<OrientedBox>>> {
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..cfg.num_classes);
        let (w, h) = random_size(cfg, class_id, rng);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = make_box(
                rng.random_range(0.0..cfg.canvas_width),
                rng.random_range(0.0..cfg.canvas_height),
                w,
                h,
                normalize_angle(rng.random_range(-FRAC_PI_2..FRAC_PI_2)).expect("finite"),
                class_id,
            );
            if fits(cfg, &b, &boxes) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }
    Ok(Some(boxes))
}

/// Dense regression/classification targets for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMap {
    pub grid: GridSpec,
    pub num_classes: usize,
    pub cells: Vec<TargetCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetCell {
    /// `None` for background.
    pub class_id: Option<usize>,
    /// Distances to the left, top, right, bottom edges in the box frame, in strides.
    pub offsets: [f64; 4],
    pub angle: Angle,
    pub centerness: f64,
    pub box_index: Option<usize>,
}

impl TargetCell {
    pub const BACKGROUND: TargetCell = TargetCell {
        class_id: None,
        offsets: [0.0; 4],
        angle: Angle::ZERO,
        centerness: 0.0,
        box_index: None,
    };

    pub fn is_foreground(&self) -> bool {
        self.class_id.is_some()
    }
}

impl TargetMap {
    pub fn num_foreground(&self) -> usize {
        self.cells.iter().filter(|c| c.is_foreground()).count()
    }
}

/// Box-frame offsets `(l, t, r, b)` of a point, in strides.
pub fn encode_offsets(b: &OrientedBox, p: Point2, stride: f64) -> [f64; 4] {
    let (lu, lv) = b.to_local(p);
    [
        (b.w / 2.0 + lu) / stride,
        (b.h / 2.0 + lv) / stride,
        (b.w / 2.0 - lu) / stride,
        (b.h / 2.0 - lv) / stride,
    ]
}

pub fn centerness(offsets: &[f64; 4]) -> f64 {
    let [l, t, r, b] = *offsets;
    let ratio = |a: f64, c: f64| {
        let hi = a.max(c);
        if hi <= 0.0 {
            0.0
        } else {
            a.min(c).max(0.0) / hi
        }
    };
    (ratio(l, r) * ratio(t, b)).sqrt()
}

/// Index of the smallest-area box containing `p`.
fn owner(boxes: &[OrientedBox], p: Point2) -> Option<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.contains(p))
        .min_by(|(_, a), (_, b)| a.area().total_cmp(&b.area()))
        .map(|(i, _)| i)
}

pub fn encode_targets(scene: &Scene, grid: GridSpec, num_classes: usize) -> TargetMap {
    let cells = (0..grid.num_cells())
        .map(|idx| {
            let p = grid.cell_center(idx);
            match owner(&scene.boxes, p) {
                None => TargetCell::BACKGROUND,
                Some(k) => {
                    let b = &scene.boxes[k];
                    let offsets = encode_offsets(b, p, grid.stride);
                    TargetCell {
                        class_id: Some(b.class_id),
                        offsets,
                        angle: b.angle,
                        centerness: centerness(&offsets),
                        box_index: Some(k),
                    }
                }
            }
        })
        .collect();
    TargetMap {
        grid,
        num_classes,
        cells,
    }
}

/// `H × W × F` feature grid, cell-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub grid: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.num_cells() * channels],
        }
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Mirror about the vertical axis. Channels that change sign under the
    /// mirror (`sin 2θ` and the width-axis coordinate) are negated.
    pub fn flip_horizontal(&self) -> FeatureField {
        let mut out = FeatureField::zeros(self.grid, self.channels);
        for idx in 0..self.grid.num_cells() {
            let src = self.cell(self.grid.mirror_index(idx));
            let dst = out.cell_mut(idx);
            dst.copy_from_slice(src);
            dst[CH_SIN2] = -dst[CH_SIN2];
            dst[CH_LOCAL_U] = -dst[CH_LOCAL_U];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Standard deviation of additive per-cell Gaussian noise on every channel.
    pub noise_sigma: f64,
    /// Log-scale spread of per-scene channel gains; 0 disables.
    pub gain_spread: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.3,
            gain_spread: 0.0,
        }
    }
}

pub fn render_features<R: Rng + ?Sized>(
    scene: &Scene,
    grid: GridSpec,
    num_classes: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> FeatureField {
    render_features_with(
        scene,
        grid,
        num_classes,
        &RenderConfig {
            noise_sigma,
            gain_spread: 0.0,
        },
        rng,
    )
}

pub fn render_features_with<R: Rng + ?Sized>(
    scene: &Scene,
    grid: GridSpec,
    num_classes: usize,
    cfg: &RenderConfig,
    rng: &mut R,
) -> FeatureField {
    let channels = num_feature_channels(num_classes);
    let mut field = FeatureField::zeros(grid, channels);
    let s = grid.stride;
    for idx in 0..grid.num_cells() {
        let p = grid.cell_center(idx);
        let cell = field.cell_mut(idx);
        match owner(&scene.boxes, p) {
            Some(k) => {
                let b = &scene.boxes[k];
                let (lu, lv) = b.to_local(p);
                let inner = (b.w / 2.0 - lu.abs()).min(b.h / 2.0 - lv.abs());
                let two = 2.0 * b.angle.radians();
                cell[CH_INSIDE] = (inner / s).tanh();
                cell[CH_SIN2] = two.sin();
                cell[CH_COS2] = two.cos();
                cell[CH_LOCAL_U] = lu / (4.0 * s);
                cell[CH_LOCAL_V] = lv / (4.0 * s);
                cell[CH_WIDTH] = b.w / (8.0 * s);
                cell[CH_HEIGHT] = b.h / (8.0 * s);
                cell[CH_CLASS0 + b.class_id] = 1.0;
            }
            None => {
                let d = scene
                    .boxes
                    .iter()
                    .map(|b| {
                        let (lu, lv) = b.to_local(p);
                        let dx = (lu.abs() - b.w / 2.0).max(0.0);
                        let dy = (lv.abs() - b.h / 2.0).max(0.0);
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                cell[CH_INSIDE] = -(d / s).tanh();
            }
        }
    }
    if cfg.gain_spread > 0.0 {
        let gains: Vec<f64> = (0..channels)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (cfg.gain_spread * z).exp()
            })
            .collect();
        for cell in field.data.chunks_mut(channels) {
            for (x, g) in cell.iter_mut().zip(&gains) {
                *x *= g;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for x in field.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x += cfg.noise_sigma * z;
        }
        for idx in 0..grid.num_cells() {
            let z: f64 = StandardNormal.sample(rng);
            field.cell_mut(idx)[CH_NOISE] = cfg.noise_sigma * z;
        }
    }
    field
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Partition `0..n` into (labeled, unlabeled) with `ceil(fraction·n)` labeled.
pub fn split_labeled(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("labeled fraction must be in (0,1], got {fraction}")));
    }
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut is_labeled = vec![false; n];
    for &i in &picked {
        is_labeled[i] = true;
    }
    let rest = (0..n).filter(|i| !is_labeled[*i]).collect();
    Ok((picked, rest))
}
