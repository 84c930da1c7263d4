//! Oriented boxes and rotated IoU.
//!
//! Angles measure the rotation of a box's width axis from the scene x-axis,
//! counter-clockwise positive, and are kept in `[-π/2, π/2)`. A rectangle is
//! symmetric under a half turn, so every real angle has exactly one
//! representative in that range.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-edge tolerance for polygon clipping, in scene units.
pub const CLIP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dist_sq(self, o: Point2) -> f64 {
        let d = self.sub(o);
        d.x * d.x + d.y * d.y
    }

    /// Rotates about `pivot` by `theta` radians counter-clockwise.
    pub fn rotate_about(self, pivot: Point2, theta: f64) -> Point2 {
        let (s, c) = theta.sin_cos();
        let d = self.sub(pivot);
        Point2::new(pivot.x + c * d.x - s * d.y, pivot.y + s * d.x + c * d.y)
    }
}

/// A rotation angle reduced modulo π into `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn new(theta: f64) -> Result<Self> {
        normalize_angle(theta)
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Angle {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        normalize_angle(value)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// Reduces `theta` modulo π into `[-π/2, π/2)`.
pub fn normalize_angle(theta: f64) -> Result<Angle> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("angle must be finite, got {theta}")));
    }
    let mut r = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    // floor() can land one period off when theta + π/2 rounds onto a multiple of π
    if r >= FRAC_PI_2 {
        r -= PI;
    }
    if r < -FRAC_PI_2 {
        r += PI;
    }
    if r >= FRAC_PI_2 {
        r = -FRAC_PI_2;
    }
    Ok(Angle(r))
}

/// How the orientation gap between two normalized angles is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleGapMode {
    /// Plain `|a - b|`, in `[0, π)`.
    #[default]
    Literal,
    /// Distance on the π-periodic circle, in `[0, π/2]`.
    Circular,
}

/// Plain absolute difference of two normalized angles.
pub fn angle_gap(r_t: Angle, r_s: Angle) -> f64 {
    (r_t.0 - r_s.0).abs()
}

pub fn angle_gap_with(r_t: Angle, r_s: Angle, mode: AngleGapMode) -> f64 {
    let d = angle_gap(r_t, r_s);
    match mode {
        AngleGapMode::Literal => d,
        AngleGapMode::Circular => d.min(PI - d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle: Angle,
    pub class_id: usize,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, angle: Angle, class_id: usize) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("box center must be finite"));
        }
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "box size must be positive and finite, got {w}x{h}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            angle,
            class_id,
        })
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Unit vectors of the box's width and height axes.
    pub fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.angle.radians().sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    /// Coordinates of `p` in the box frame (along the width axis, along the height axis).
    pub fn to_local(&self, p: Point2) -> (f64, f64) {
        let (u, v) = self.axes();
        let d = p.sub(self.center());
        (d.x * u.x + d.y * u.y, d.x * v.x + d.y * v.y)
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (lu, lv) = self.to_local(p);
        lu.abs() <= self.w / 2.0 && lv.abs() <= self.h / 2.0
    }

    pub fn to_polygon(&self) -> [Point2; 4] {
        obb_to_polygon(self)
    }
}

/// Rectangle corners in counter-clockwise order, starting from the
/// (-w/2, -h/2) corner of the box frame.
pub fn obb_to_polygon(b: &OrientedBox) -> [Point2; 4] {
    let (u, v) = b.axes();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    let corner = |su: f64, sv: f64| {
        Point2::new(
            b.cx + su * hw * u.x + sv * hh * v.x,
            b.cy + su * hw * u.y + sv * hh * v.y,
        )
    };
    [
        corner(-1.0, -1.0),
        corner(1.0, -1.0),
        corner(1.0, 1.0),
        corner(-1.0, 1.0),
    ]
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.cross(b);
    }
    acc / 2.0
}

/// Clips `subject` against a convex counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let edge = e1.sub(e0);
        let side = |p: Point2| edge.cross(p.sub(e0));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            let cur_in = sc >= -CLIP_EPS;
            let prev_in = sp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Intersection-over-union of two oriented boxes.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // quick reject on circumscribed circles
    let ra = 0.5 * (a.w * a.w + a.h * a.h).sqrt();
    let rb = 0.5 * (b.w * b.w + b.h * b.h).sqrt();
    if a.center().dist_sq(b.center()) > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let pa = obb_to_polygon(a);
    let pb = obb_to_polygon(b);
    let inter = polygon_area(&clip_convex(&pa, &pb)).max(0.0);
    if inter <= CLIP_EPS {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
