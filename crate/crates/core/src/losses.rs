//! Losses on pseudo-label/prediction pairs and on ground-truth targets.
//!
//! Every loss here returns its value together with the gradient with respect
//! to the student's post-activation outputs (scores, offsets, angle,
//! centerness); [`crate::model`] carries those through the network.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_gap_with, normalize_angle, Angle, AngleGapMode, Point2};
use crate::ot::{
    build_cost_matrix_with, gc_gradient, gc_loss, sinkhorn, CostComposition, CostPoint,
    DiscreteDistribution, SinkhornConfig, TransportSolution,
};
use crate::pseudo_label::{argmax, CellPrediction, DensePredictionMap};
use crate::scenes::TargetMap;

pub const PROB_CLAMP: f64 = 1e-7;
pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 50.0;

/// A pseudo-label and the student prediction at the same cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub cell: usize,
    /// Grid coordinates `(col, row)`.
    pub position: Point2,
    pub teacher: CellPrediction,
    pub student: CellPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseLoss {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

impl BaseLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.ctr
    }
}

/// Gradient with respect to one cell's student outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrad {
    pub scores: Vec<f64>,
    pub offsets: [f64; 4],
    pub angle: f64,
    pub centerness: f64,
}

impl CellGrad {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            scores: vec![0.0; num_classes],
            offsets: [0.0; 4],
            angle: 0.0,
            centerness: 0.0,
        }
    }

    fn scale(&mut self, k: f64) {
        self.scores.iter_mut().for_each(|g| *g *= k);
        self.offsets.iter_mut().for_each(|g| *g *= k);
        self.angle *= k;
        self.centerness *= k;
    }
}

/// Per-cell gradients for a whole prediction map, same layout as
/// [`DensePredictionMap`]: `K` scores, 4 offsets, angle, centerness.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrad {
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl MapGrad {
    pub fn zeros(num_cells: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            data: vec![0.0; num_cells * (num_classes + 6)],
        }
    }

    pub fn stride(&self) -> usize {
        self.num_classes + 6
    }

    pub fn num_cells(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        let s = self.stride();
        &self.data[idx * s..(idx + 1) * s]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[idx * s..(idx + 1) * s]
    }

    pub fn add_cell(&mut self, idx: usize, g: &CellGrad, weight: f64) {
        let k = self.num_classes;
        let c = self.cell_mut(idx);
        for (d, s) in c[..k].iter_mut().zip(&g.scores) {
            *d += weight * s;
        }
        for j in 0..4 {
            c[k + j] += weight * g.offsets[j];
        }
        c[k + 4] += weight * g.angle;
        c[k + 5] += weight * g.centerness;
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of prediction `p` against soft target `t`.
pub fn bce(p: f64, t: f64) -> f64 {
    let (p, t) = (clamp_prob(p), clamp_prob(t));
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// d bce / d p; zero where the clamp is active.
pub fn bce_grad(p: f64, t: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let t = clamp_prob(t);
    -t / p + (1.0 - t) / (1.0 - p)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Soft-target BCE over all classes, smooth-L1 over `(l, t, r, b, angle)`,
/// and BCE on centerness, with the teacher as target.
pub fn base_unsup_loss(pair: &PairRecord) -> BaseLoss {
    base_loss_and_grad(&pair.student, &pair.teacher.scores, &pair.teacher.offsets, pair.teacher.angle, pair.teacher.centerness, true).0
}

/// `θ_s − θ_t` taken modulo π into `[−π/2, π/2)`, so boxes on either side
/// of the angle wrap regress toward each other.
pub fn angle_residual(student: Angle, target: Angle) -> f64 {
    normalize_angle(student.radians() - target.radians())
        .map(|a| a.radians())
        .unwrap_or(0.0)
}

pub(crate) fn base_loss_and_grad(
    student: &CellPrediction,
    target_scores: &[f64],
    target_offsets: &[f64; 4],
    target_angle: Angle,
    target_ctr: f64,
    with_reg: bool,
) -> (BaseLoss, CellGrad) {
    let mut g = CellGrad::zeros(student.scores.len());
    let mut cls = 0.0;
    for (k, (&p, &t)) in student.scores.iter().zip(target_scores).enumerate() {
        cls += bce(p, t);
        g.scores[k] = bce_grad(p, t);
    }
    let mut reg = 0.0;
    let mut ctr = 0.0;
    if with_reg {
        for j in 0..4 {
            let d = student.offsets[j] - target_offsets[j];
            reg += smooth_l1(d);
            g.offsets[j] = smooth_l1_grad(d);
        }
        let d = angle_residual(student.angle, target_angle);
        reg += smooth_l1(d);
        g.angle = smooth_l1_grad(d);
        ctr = bce(student.centerness, target_ctr);
        g.centerness = bce_grad(student.centerness, target_ctr);
    }
    (BaseLoss { cls, reg, ctr }, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawWeight {
    pub sigma: f64,
    pub omega: f64,
}

/// `σ = α·|r_t − r_s|/π`, `ω = 1 + σ`.
pub fn raw_weight(r_t: Angle, r_s: Angle, alpha: f64) -> Result<RawWeight> {
    raw_weight_with(r_t, r_s, alpha, AngleGapMode::Literal)
}

pub fn raw_weight_with(r_t: Angle, r_s: Angle, alpha: f64, mode: AngleGapMode) -> Result<RawWeight> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let sigma = alpha * angle_gap_with(r_t, r_s, mode) / PI;
    Ok(RawWeight {
        sigma,
        omega: 1.0 + sigma,
    })
}

// d gap / d r_s
fn gap_grad_student(r_t: Angle, r_s: Angle, mode: AngleGapMode) -> f64 {
    let d = r_s.radians() - r_t.radians();
    let s = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    match mode {
        AngleGapMode::Literal => s,
        AngleGapMode::Circular => {
            if d.abs() <= PI / 2.0 {
                s
            } else {
                -s
            }
        }
    }
}

/// `Σ ωᵢ · L_uᵢ` with no normalization; 0 for an empty set.
pub fn raw_loss(pairs: &[PairRecord], alpha: f64) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        let w = raw_weight(p.teacher.angle, p.student.angle, alpha)?;
        acc += w.omega * base_unsup_loss(p).total();
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Teacher,
    Student,
}

/// Teacher argmax class at each pair (ties to the lowest index).
pub fn selected_classes(pairs: &[PairRecord]) -> Vec<usize> {
    pairs.iter().map(|p| argmax(&p.teacher.scores).0).collect()
}

/// `dᵢ = exp(s_{i, c(i)})` on the requested side, `c` taken from the teacher.
pub fn scores_to_distribution(pairs: &[PairRecord], side: Side) -> Result<DiscreteDistribution> {
    if pairs.is_empty() {
        return Err(Error::invalid("score distribution needs at least one pair"));
    }
    let classes = selected_classes(pairs);
    let weights = pairs
        .iter()
        .zip(&classes)
        .map(|(p, &c)| {
            let s = match side {
                Side::Teacher => &p.teacher.scores,
                Side::Student => &p.student.scores,
            };
            s[c].exp()
        })
        .collect();
    DiscreteDistribution::with_support(weights, pairs.iter().map(|p| p.position).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawNormalize {
    #[default]
    None,
    /// Divide by the number of pairs.
    Mean,
    /// Divide by `Σ ω` (held constant for the gradient).
    SumWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnsupConfig {
    pub alpha: f64,
    pub use_raw: bool,
    pub use_gc: bool,
    pub cost: CostComposition,
    pub sinkhorn: SinkhornConfig,
    pub raw_normalize: RawNormalize,
    pub gap_mode: AngleGapMode,
    /// Differentiate ω through the student angle; when off ω is a constant weight.
    pub raw_weight_grad: bool,
}

impl Default for UnsupConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            use_raw: true,
            use_gc: true,
            cost: CostComposition::default(),
            sinkhorn: SinkhornConfig::default(),
            raw_normalize: RawNormalize::None,
            gap_mode: AngleGapMode::Literal,
            raw_weight_grad: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupOutput {
    /// Unweighted sums of the per-pair terms.
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    /// Pair term: `Σ ω L_u` (ω ≡ 1 when RAW is off), after normalization.
    pub raw: f64,
    pub gc: f64,
    pub unsup: f64,
    pub num_pairs: usize,
    pub label_free: bool,
    /// Gradient of `unsup` with respect to each pair's student outputs.
    pub grads: Vec<CellGrad>,
    pub transport: Option<TransportSolution>,
}

/// Pair term plus global-consistency term, with student gradients.
///
/// The GC gradient reaches the student's selected-class score through
/// `dᵢ = exp(sᵢ)`; the transport duals and the cost matrix are constants.
/// The rotation weight ω is differentiated through the student angle.
pub fn unsup_loss(pairs: &[PairRecord], cfg: &UnsupConfig) -> Result<UnsupOutput> {
    unsup_loss_with(pairs, cfg, None)
}

/// As [`unsup_loss`], but with a given transport solution in place of a
/// fresh Sinkhorn solve (used to freeze the duals).
pub fn unsup_loss_with(
    pairs: &[PairRecord],
    cfg: &UnsupConfig,
    frozen: Option<&TransportSolution>,
) -> Result<UnsupOutput> {
    if pairs.is_empty() {
        return Ok(UnsupOutput {
            cls: 0.0,
            reg: 0.0,
            ctr: 0.0,
            raw: 0.0,
            gc: 0.0,
            unsup: 0.0,
            num_pairs: 0,
            label_free: true,
            grads: Vec::new(),
            transport: None,
        });
    }
    let alpha = if cfg.use_raw { cfg.alpha } else { 0.0 };
    let mut sums = BaseLoss::default();
    let mut raw = 0.0;
    let mut omega_sum = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (l, mut g) = base_loss_and_grad(
            &p.student,
            &p.teacher.scores,
            &p.teacher.offsets,
            p.teacher.angle,
            p.teacher.centerness,
            true,
        );
        let w = raw_weight_with(p.teacher.angle, p.student.angle, alpha, cfg.gap_mode)?;
        let lu = l.total();
        sums.cls += l.cls;
        sums.reg += l.reg;
        sums.ctr += l.ctr;
        raw += w.omega * lu;
        omega_sum += w.omega;
        g.scale(w.omega);
        if cfg.raw_weight_grad {
            g.angle += alpha / PI * gap_grad_student(p.teacher.angle, p.student.angle, cfg.gap_mode) * lu;
        }
        grads.push(g);
    }
    let norm = match cfg.raw_normalize {
        RawNormalize::None => 1.0,
        RawNormalize::Mean => 1.0 / pairs.len() as f64,
        RawNormalize::SumWeights => 1.0 / omega_sum,
    };
    raw *= norm;
    if norm != 1.0 {
        grads.iter_mut().for_each(|g| g.scale(norm));
    }

    let mut gc = 0.0;
    let mut transport = None;
    if cfg.use_gc {
        let classes = selected_classes(pairs);
        let d_t = scores_to_distribution(pairs, Side::Teacher)?;
        let d_s = scores_to_distribution(pairs, Side::Student)?;
        let view = |side: Side| -> Vec<CostPoint> {
            pairs
                .iter()
                .zip(&classes)
                .map(|(p, &c)| CostPoint {
                    z: p.position,
                    score: match side {
                        Side::Teacher => p.teacher.scores[c],
                        Side::Student => p.student.scores[c],
                    },
                })
                .collect()
        };
        let sol = match frozen {
            Some(sol) => sol.clone(),
            None => {
                let cost = build_cost_matrix_with(&view(Side::Teacher), &view(Side::Student), cfg.cost)?;
                sinkhorn(&d_t, &d_s, &cost, &cfg.sinkhorn)?
            }
        };
        gc = gc_loss(&d_t, &d_s, &sol)?;
        let dg = gc_gradient(&d_s, &sol.dual_col)?;
        for ((g, &c), (dgi, dsi)) in grads.iter_mut().zip(&classes).zip(dg.iter().zip(d_s.weights())) {
            g.scores[c] += dgi * dsi;
        }
        transport = Some(sol);
    }
    Ok(UnsupOutput {
        cls: sums.cls,
        reg: sums.reg,
        ctr: sums.ctr,
        raw,
        gc,
        unsup: raw + gc,
        num_pairs: pairs.len(),
        label_free: false,
        grads,
        transport,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub raw: f64,
    pub gc: f64,
    pub unsup: f64,
    pub sup: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.reg, self.ctr, self.raw, self.gc, self.unsup, self.sup, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Supervised loss against ground-truth targets: one-hot BCE over every
/// cell, smooth-L1 and centerness BCE on foreground cells, all divided by
/// the number of foreground cells (at least 1).
pub fn supervised_loss(pred: &DensePredictionMap, targets: &TargetMap) -> Result<(BaseLoss, MapGrad)> {
    if pred.grid != targets.grid || pred.num_classes != targets.num_classes {
        return Err(Error::invalid("prediction and target maps differ in shape"));
    }
    let k = pred.num_classes;
    let n = pred.num_cells();
    let num_pos = targets.num_foreground().max(1) as f64;
    let mut grad = MapGrad::zeros(n, k);
    let mut total = BaseLoss::default();
    let mut onehot = vec![0.0; k];
    for idx in 0..n {
        let t = &targets.cells[idx];
        onehot.iter_mut().for_each(|x| *x = 0.0);
        if let Some(c) = t.class_id {
            onehot[c] = 1.0;
        }
        let cell = pred.cell(idx);
        let (l, g) = base_loss_and_grad(&cell, &onehot, &t.offsets, t.angle, t.centerness, t.is_foreground());
        total.cls += l.cls;
        total.reg += l.reg;
        total.ctr += l.ctr;
        grad.add_cell(idx, &g, 1.0 / num_pos);
    }
    total.cls /= num_pos;
    total.reg /= num_pos;
    total.ctr /= num_pos;
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cell(scores: Vec<f64>, offsets: [f64; 4], angle: f64, ctr: f64) -> CellPrediction {
        CellPrediction {
            scores,
            offsets,
            angle: Angle::new(angle).unwrap(),
            centerness: ctr,
        }
    }

    fn pair(t: CellPrediction, s: CellPrediction, x: f64, y: f64) -> PairRecord {
        PairRecord {
            cell: 0,
            position: Point2::new(x, y),
            teacher: t,
            student: s,
        }
    }

    fn entropy(t: f64) -> f64 {
        -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
    }

    fn random_cell(rng: &mut ChaCha8Rng, k: usize) -> CellPrediction {
        cell(
            (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
            [0.0; 4].map(|_: f64| rng.random_range(0.2..3.0)),
            rng.random_range(-1.5..1.5),
            rng.random_range(0.05..0.95),
        )
    }

    #[test]
    fn base_loss_identical_is_entropy_floor() {
        let c = cell(vec![0.3, 0.8], [1.0, 2.0, 1.5, 0.5], 0.2, 0.6);
        let l = base_unsup_loss(&pair(c.clone(), c, 0.0, 0.0));
        assert_eq!(l.reg, 0.0);
        assert_abs_diff_eq!(l.cls, entropy(0.3) + entropy(0.8), epsilon = 1e-12);
        assert_abs_diff_eq!(l.ctr, entropy(0.6), epsilon = 1e-12);
    }

    #[test]
    fn base_loss_examples() {
        let t = cell(vec![0.3], [1.0, 1.0, 1.0, 1.0], 0.0, 0.5);
        let s = cell(vec![0.3], [1.5, 1.0, 1.0, 1.0], 0.0, 0.5);
        assert_abs_diff_eq!(base_unsup_loss(&pair(t, s, 0.0, 0.0)).reg, 0.125, epsilon = 1e-15);
        let t = cell(vec![1.0], [1.0; 4], 0.0, 0.5);
        let s = cell(vec![0.5], [1.0; 4], 0.0, 0.5);
        assert_abs_diff_eq!(base_unsup_loss(&pair(t, s, 0.0, 0.0)).cls, 2f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn angle_residual_wraps() {
        let a = |x: f64| Angle::new(x).unwrap();
        assert_abs_diff_eq!(angle_residual(a(1.5), a(-1.5)), 3.0 - PI, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_residual(a(0.2), a(-0.3)), 0.5, epsilon = 1e-15);
        // RAW still sees the literal gap
        let w = raw_weight(a(1.5), a(-1.5), 1.0).unwrap();
        assert_abs_diff_eq!(w.sigma, 3.0 / PI, epsilon = 1e-12);
    }

    #[test]
    fn raw_weight_examples() {
        let r = Angle::new(0.4).unwrap();
        assert_eq!(raw_weight(r, r, 50.0).unwrap().omega, 1.0);
        let w = raw_weight(Angle::new(PI / 4.0).unwrap(), Angle::new(-PI / 4.0).unwrap(), 50.0).unwrap();
        assert_abs_diff_eq!(w.sigma, 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.omega, 26.0, epsilon = 1e-12);
        assert!(raw_weight(r, r, -1.0).is_err());
        assert_eq!(DEFAULT_ALPHA, 50.0);
    }

    #[test]
    fn raw_weight_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = Angle::new(rng.random_range(-2.0..2.0)).unwrap();
            let b = Angle::new(rng.random_range(-2.0..2.0)).unwrap();
            let alpha = rng.random_range(0.1..100.0);
            let w = raw_weight(a, b, alpha).unwrap();
            assert_abs_diff_eq!(w.omega, 1.0 + alpha * (a.radians() - b.radians()).abs() / PI, epsilon = 1e-12);
            let w2 = raw_weight(a, b, 2.0 * alpha).unwrap();
            assert_abs_diff_eq!(w2.omega - 1.0, 2.0 * (w.omega - 1.0), epsilon = 1e-12);
            assert!(w.omega >= 1.0);
        }
    }

    #[test]
    fn raw_loss_examples() {
        // single product: omega 26, L_u = reg only = 0.5 via offset diff of 1.0
        let t = cell(vec![0.5], [1.0; 4], PI / 4.0, 0.5);
        let s = cell(vec![0.5], [1.0; 4], -PI / 4.0, 0.5);
        let p = pair(t, s, 0.0, 0.0);
        let lu = base_unsup_loss(&p).total();
        assert_abs_diff_eq!(raw_loss(&[p], 50.0).unwrap(), 26.0 * lu, epsilon = 1e-9);
        assert_eq!(raw_loss(&[], 50.0).unwrap(), 0.0);
    }

    #[test]
    fn raw_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = (0..5).map(|i| pair(random_cell(&mut rng, 3), random_cell(&mut rng, 3), i as f64, 0.0)).collect();
        let mut want = 0.0;
        for p in &pairs {
            let mut cls = 0.0;
            for k in 0..3 {
                let (s, t) = (p.student.scores[k], p.teacher.scores[k]);
                cls -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
            }
            let mut reg = 0.0;
            let mut diffs: Vec<f64> = (0..4).map(|j| p.student.offsets[j] - p.teacher.offsets[j]).collect();
            let mut da = p.student.angle.radians() - p.teacher.angle.radians();
            while da >= PI / 2.0 {
                da -= PI;
            }
            while da < -PI / 2.0 {
                da += PI;
            }
            diffs.push(da);
            for d in diffs {
                reg += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
            let (sc, tc) = (p.student.centerness, p.teacher.centerness);
            let ctr = -(tc * sc.ln() + (1.0 - tc) * (1.0 - sc).ln());
            let omega = 1.0 + 50.0 * (p.teacher.angle.radians() - p.student.angle.radians()).abs() / PI;
            want += omega * (cls + reg + ctr);
        }
        assert_abs_diff_eq!(raw_loss(&pairs, 50.0).unwrap(), want, epsilon = 1e-9);
        let plain: f64 = pairs.iter().map(|p| base_unsup_loss(p).total()).sum();
        assert!(raw_loss(&pairs, 50.0).unwrap() >= plain);
        assert_abs_diff_eq!(raw_loss(&pairs, 0.0).unwrap(), plain, epsilon = 1e-12);
    }

    #[test]
    fn distribution_examples() {
        let zero = cell(vec![0.0, 0.0], [1.0; 4], 0.0, 0.5);
        let d = scores_to_distribution(&[pair(zero.clone(), zero, 0.0, 0.0)], Side::Teacher).unwrap();
        assert_eq!(d.weights(), &[1.0]);
        let t = cell(vec![0.9, 0.1], [1.0; 4], 0.0, 0.5);
        let s = cell(vec![0.2, 0.7], [1.0; 4], 0.0, 0.5);
        let p = [pair(t, s, 0.0, 0.0)];
        assert_abs_diff_eq!(scores_to_distribution(&p, Side::Teacher).unwrap().weights()[0], 0.9f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(scores_to_distribution(&p, Side::Student).unwrap().weights()[0], 0.2f64.exp(), epsilon = 1e-12);
        let tie = cell(vec![0.5, 0.5], [1.0; 4], 0.0, 0.5);
        assert_eq!(selected_classes(&[pair(tie.clone(), tie, 0.0, 0.0)]), vec![0]);
        assert!(scores_to_distribution(&[], Side::Teacher).is_err());
    }

    #[test]
    fn argmax_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = random_cell(&mut rng, 4);
            let mut t2 = t.clone();
            t2.scores.iter_mut().for_each(|s| *s = s.powf(3.0) * 0.5);
            let a = selected_classes(&[pair(t.clone(), t.clone(), 0.0, 0.0)]);
            let b = selected_classes(&[pair(t2.clone(), t2, 0.0, 0.0)]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unsup_self_transport() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..6)
            .map(|i| {
                let c = random_cell(&mut rng, 3);
                pair(c.clone(), c, (i % 3) as f64, (i / 3) as f64)
            })
            .collect();
        let cfg = UnsupConfig {
            sinkhorn: SinkhornConfig {
                epsilon: 0.005,
                max_iters: 20_000,
                tolerance: 1e-9,
            },
            ..UnsupConfig::default()
        };
        let out = unsup_loss(&pairs, &cfg).unwrap();
        let floors: f64 = pairs.iter().map(|p| base_unsup_loss(p).total()).sum();
        assert_abs_diff_eq!(out.raw, floors, epsilon = 1e-12);
        let sol = out.transport.unwrap();
        assert!(sol.primal_cost < 1e-3);
        assert!(out.gc.abs() < 0.05);
    }

    #[test]
    fn unsup_single_pair_gc_is_zero() {
        let c = cell(vec![0.2, 0.6], [1.0; 4], 0.1, 0.4);
        let s = cell(vec![0.3, 0.6], [1.2; 4], 0.3, 0.4);
        let out = unsup_loss(&[pair(c.clone(), s, 3.0, 4.0)], &UnsupConfig::default()).unwrap();
        assert_abs_diff_eq!(out.gc, 0.0, epsilon = 1e-15);
        // a lone pair always pays its own coupling cost
        let s = cell(vec![0.3, 0.5], [1.2; 4], 0.3, 0.4);
        let out = unsup_loss(&[pair(c, s, 3.0, 4.0)], &UnsupConfig::default()).unwrap();
        assert_abs_diff_eq!(out.gc, 1.0, epsilon = 1e-12);
        assert_eq!(out.num_pairs, 1);
    }

    #[test]
    fn unsup_empty_is_label_free() {
        let out = unsup_loss(&[], &UnsupConfig::default()).unwrap();
        assert!(out.label_free);
        assert_eq!(out.unsup, 0.0);
    }

    #[test]
    fn flags_off_is_plain_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<_> = (0..5).map(|i| pair(random_cell(&mut rng, 2), random_cell(&mut rng, 2), i as f64, 1.0)).collect();
        let cfg = UnsupConfig {
            use_raw: false,
            use_gc: false,
            ..UnsupConfig::default()
        };
        let out = unsup_loss(&pairs, &cfg).unwrap();
        let plain: f64 = pairs.iter().map(|p| base_unsup_loss(p).total()).sum();
        assert_abs_diff_eq!(out.unsup, plain, epsilon = 1e-12);
        assert_eq!(out.gc, 0.0);
    }

    #[test]
    fn normalization_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = (0..4).map(|i| pair(random_cell(&mut rng, 2), random_cell(&mut rng, 2), i as f64, 1.0)).collect();
        let base = UnsupConfig {
            use_gc: false,
            ..UnsupConfig::default()
        };
        let none = unsup_loss(&pairs, &base).unwrap().raw;
        let mean = unsup_loss(&pairs, &UnsupConfig { raw_normalize: RawNormalize::Mean, ..base }).unwrap().raw;
        assert_abs_diff_eq!(mean, none / 4.0, epsilon = 1e-12);
        let sw = unsup_loss(&pairs, &UnsupConfig { raw_normalize: RawNormalize::SumWeights, ..base }).unwrap().raw;
        let omega: f64 = pairs.iter().map(|p| raw_weight(p.teacher.angle, p.student.angle, 50.0).unwrap().omega).sum();
        assert_abs_diff_eq!(sw, none / omega, epsilon = 1e-12);
    }

    #[test]
    fn constant_weight_drops_only_the_angle_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pairs: Vec<_> = (0..4).map(|i| pair(random_cell(&mut rng, 2), random_cell(&mut rng, 2), i as f64, 1.0)).collect();
        let base = UnsupConfig {
            use_gc: false,
            ..UnsupConfig::default()
        };
        let full = unsup_loss(&pairs, &base).unwrap();
        let fixed = unsup_loss(&pairs, &UnsupConfig { raw_weight_grad: false, ..base }).unwrap();
        assert_eq!(full.unsup, fixed.unsup);
        for (p, (a, b)) in pairs.iter().zip(full.grads.iter().zip(&fixed.grads)) {
            assert_eq!(a.scores, b.scores);
            assert_eq!(a.offsets, b.offsets);
            assert_eq!(a.centerness, b.centerness);
            let lu = base_unsup_loss(p).total();
            let sign = (p.student.angle.radians() - p.teacher.angle.radians()).signum();
            assert_abs_diff_eq!(a.angle - b.angle, 50.0 / PI * sign * lu, epsilon = 1e-9);
        }
    }

    fn perturbed(pairs: &[PairRecord], i: usize, ch: usize, h: f64) -> Vec<PairRecord> {
        let mut out = pairs.to_vec();
        let s = &mut out[i].student;
        let k = s.scores.len();
        if ch < k {
            s.scores[ch] += h;
        } else if ch < k + 4 {
            s.offsets[ch - k] += h;
        } else if ch == k + 4 {
            s.angle = Angle::new(s.angle.radians() + h).unwrap();
        } else {
            s.centerness += h;
        }
        out
    }

    /// Loss with the transport duals taken from a fixed solution.
    fn frozen_loss(pairs: &[PairRecord], cfg: &UnsupConfig, sol: &TransportSolution) -> f64 {
        let mut c = *cfg;
        c.use_gc = false;
        let raw = unsup_loss(pairs, &c).unwrap().raw;
        let d_t = scores_to_distribution(pairs, Side::Teacher).unwrap();
        let d_s = scores_to_distribution(pairs, Side::Student).unwrap();
        raw + gc_loss(&d_t, &d_s, sol).unwrap()
    }

    #[test]
    fn unsup_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = UnsupConfig::default();
        for _ in 0..10 {
            let pairs: Vec<_> = (0..4)
                .map(|i| pair(random_cell(&mut rng, 3), random_cell(&mut rng, 3), rng.random_range(0.0..8.0), i as f64))
                .collect();
            let out = unsup_loss(&pairs, &cfg).unwrap();
            let sol = out.transport.clone().unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for ch in 0..(3 + 6) {
                    let fd = (frozen_loss(&perturbed(&pairs, i, ch, h), &cfg, &sol)
                        - frozen_loss(&perturbed(&pairs, i, ch, -h), &cfg, &sol))
                        / (2.0 * h);
                    let g = &out.grads[i];
                    let an = if ch < 3 {
                        g.scores[ch]
                    } else if ch < 7 {
                        g.offsets[ch - 3]
                    } else if ch == 7 {
                        g.angle
                    } else {
                        g.centerness
                    };
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(err < 1e-4, "pair {i} ch {ch}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn supervised_loss_perfect_prediction() {
        use crate::scenes::{encode_targets, GridSpec, LayoutKind, Scene};
        use crate::geometry::OrientedBox;
        let grid = GridSpec::new(8, 8, 8.0).unwrap();
        let b = OrientedBox::new(32.0, 32.0, 30.0, 14.0, Angle::new(0.3).unwrap(), 1).unwrap();
        let t = encode_targets(&Scene { boxes: vec![b], layout: LayoutKind::Scattered }, grid, 2);
        let mut m = DensePredictionMap::new(grid, 2);
        for (idx, c) in t.cells.iter().enumerate() {
            let mut p = m.cell(idx);
            p.scores = vec![PROB_CLAMP, PROB_CLAMP];
            if let Some(k) = c.class_id {
                p.scores[k] = 1.0 - PROB_CLAMP;
                p.offsets = c.offsets;
                p.angle = c.angle;
                p.centerness = c.centerness.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            }
            m.set_cell(idx, &p);
        }
        let (l, _) = supervised_loss(&m, &t).unwrap();
        assert!(l.cls < 1e-4);
        assert!(l.reg < 1e-12);
    }
}
