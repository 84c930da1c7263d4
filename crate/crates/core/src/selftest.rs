//! Oracle suites run by the `selftest` command. Each check compares an
//! implementation against an independent computation and reports the
//! worst error seen.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{average_precision, evaluate, Detection, EvalConfig, Interpolation};
use crate::geometry::{rotated_iou, Angle, OrientedBox, Point2};
use crate::losses::{raw_weight, unsup_loss_with, MapGrad, PairRecord, UnsupConfig};
use crate::mean_teacher::ema_update;
use crate::model::{ParamVector, ToyModel};
use crate::ot::{exact_ot_oracle, gc_gradient, gc_loss, sinkhorn, CostMatrix, DiscreteDistribution, SinkhornConfig};
use crate::pseudo_label::{pair_with_student, CellPrediction, DensePredictionMap};
use crate::scenes::{FeatureField, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelftestOptions {
    /// Regularization used by the transport agreement check.
    pub epsilon: f64,
    /// Added to every analytic gradient before comparison.
    pub grad_bias: f64,
    pub seed: u64,
    /// Samples per axis for the IoU rasterization.
    pub raster: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            grad_bias: 0.0,
            seed: 20240,
            raster: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl OracleResult {
    fn new(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution {
    DiscreteDistribution::new((0..n).map(|_| rng.random_range(0.05..1.0)).collect()).expect("positive weights")
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
    CostMatrix::from_flat(n, (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect()).expect("finite costs")
}

/// Sinkhorn primal cost against the exact LP over 100 instances.
pub fn ot_agreement(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = SinkhornConfig {
        epsilon: opts.epsilon,
        max_iters: 20_000,
        tolerance: 1e-9,
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let (a, b, c) = (random_dist(&mut rng, n), random_dist(&mut rng, n), random_cost(&mut rng, n));
        let exact = exact_ot_oracle(&a, &b, &c).expect("n <= 8");
        let err = match sinkhorn(&a, &b, &c, &cfg) {
            Ok(sol) if exact > 1e-12 => (sol.primal_cost - exact).abs() / exact,
            // degenerate exact = 0: absolute error, scaled onto the 1% budget
            Ok(sol) => (sol.primal_cost - exact).abs() / 1e-3 * 0.01,
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    OracleResult::new("ot_agreement", worst, 0.01, format!("epsilon {}", opts.epsilon))
}

/// GC gradient against central differences with frozen duals.
pub fn gc_gradient_fd(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let (dt, ds, c) = (random_dist(&mut rng, n), random_dist(&mut rng, n), random_cost(&mut rng, n));
        let sol = sinkhorn(&dt, &ds, &c, &SinkhornConfig::default()).expect("valid instance");
        let g: Vec<f64> = gc_gradient(&ds, &sol.dual_col).expect("sizes match").iter().map(|x| x + opts.grad_bias).collect();
        let h = 1e-5;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..n {
            let shifted = |d: f64| {
                let mut w = ds.weights().to_vec();
                w[i] += d;
                gc_loss(&dt, &DiscreteDistribution::new(w).expect("positive"), &sol).expect("sizes match")
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            num = num.max((fd - g[i]).abs());
            den = den.max(fd.abs()).max(g[i].abs());
        }
        worst = worst.max(num / den.max(1e-12));
    }
    OracleResult::new("gc_gradient_fd", worst, 1e-6, "100 instances, frozen duals".into())
}

fn random_cell(rng: &mut ChaCha8Rng, k: usize) -> CellPrediction {
    CellPrediction {
        scores: (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
        offsets: [0.0; 4].map(|_: f64| rng.random_range(0.3..2.5)),
        angle: Angle::new(rng.random_range(-1.2..1.2)).expect("finite"),
        centerness: rng.random_range(0.1..0.9),
    }
}

/// Pair loss (RAW + GC) through the toy model against parameter finite
/// differences, duals frozen, on 20 reduced instances.
pub fn end_to_end_fd(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 2);
    let (f, k) = (5, 2);
    let grid = GridSpec::new(3, 3, 8.0).expect("valid grid");
    let cfg = UnsupConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let model = ToyModel::init(f, 4, k, &mut rng).expect("valid dims");
        let mut feats = FeatureField::zeros(grid, f);
        feats.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let mut teacher = DensePredictionMap::new(grid, k);
        for idx in 0..grid.num_cells() {
            teacher.set_cell(idx, &random_cell(&mut rng, k));
        }
        let count = rng.random_range(2..=6);
        let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, grid.num_cells(), count).into_vec();
        positions.sort_unstable();
        let loss_at = |m: &ToyModel, frozen| {
            let pairs = pair_with_student(&positions, &teacher, &m.forward(&feats).expect("shape")).expect("shape");
            unsup_loss_with(&pairs, &cfg, frozen).expect("valid pairs")
        };
        let out = loss_at(&model, None);
        let sol = out.transport.clone().expect("gc enabled");
        let pairs: Vec<PairRecord> = pair_with_student(&positions, &teacher, &model.forward(&feats).expect("shape")).expect("shape");
        let mut up = MapGrad::zeros(grid.num_cells(), k);
        for (p, g) in pairs.iter().zip(&out.grads) {
            up.add_cell(p.cell, g, 1.0);
        }
        let mut grad = model.backward(&feats, &up).expect("shape");
        grad.0.iter_mut().for_each(|g| *g += opts.grad_bias);
        let h = 1e-6;
        for i in 0..model.params.len() {
            let mut p = model.clone();
            p.params.0[i] += h;
            let mut q = model.clone();
            q.params.0[i] -= h;
            let fd = (loss_at(&p, Some(&sol)).unsup - loss_at(&q, Some(&sol)).unsup) / (2.0 * h);
            let err = (fd - grad.0[i]).abs() / fd.abs().max(grad.0[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    OracleResult::new("end_to_end_fd", worst, 1e-4, "20 instances, hidden 4".into())
}

/// Marginal violation of converged solutions over 200 instances.
pub fn transport_feasibility(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    let mut worst = 0.0f64;
    let mut converged = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let (a, b, c) = (random_dist(&mut rng, n), random_dist(&mut rng, n), random_cost(&mut rng, n));
        let sol = sinkhorn(&a, &b, &c, &SinkhornConfig::default()).expect("valid instance");
        if sol.converged {
            converged += 1;
            worst = worst.max(sol.marginal_violation(a.normalized().weights(), b.normalized().weights()));
        }
    }
    OracleResult::new("transport_feasibility", worst, 1e-6, format!("{converged}/200 converged"))
}

/// Rotation weight identities and affinity in the angle gap.
pub fn raw_exactness(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 4);
    let ang = |x: f64| Angle::new(x).expect("finite");
    let mut worst = (raw_weight(ang(0.3), ang(0.3), 50.0).expect("alpha ok").omega - 1.0).abs();
    worst = worst.max((raw_weight(ang(PI / 4.0), ang(-PI / 4.0), 50.0).expect("alpha ok").omega - 26.0).abs() / 26.0);
    for _ in 0..1000 {
        let (a, b) = (ang(rng.random_range(-1.57..1.57)), ang(rng.random_range(-1.57..1.57)));
        let alpha = rng.random_range(0.0..100.0);
        let w = raw_weight(a, b, alpha).expect("alpha ok").omega;
        let want = 1.0 + alpha * (a.radians() - b.radians()).abs() / PI;
        worst = worst.max((w - want).abs() / want);
    }
    OracleResult::new("raw_exactness", worst, 4.0 * f64::EPSILON, "1000 angle pairs".into())
}

/// EMA convexity, fixed point and the 0.9 example.
pub fn ema_properties(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 5);
    let mut worst = (ema_update(&ParamVector(vec![0.0]), &ParamVector(vec![1.0]), 0.9).expect("ok").0[0] - 0.1).abs();
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let t = ParamVector((0..n).map(|_| rng.random_range(-10.0..10.0)).collect());
        let s = ParamVector((0..n).map(|_| rng.random_range(-10.0..10.0)).collect());
        let m = rng.random_range(1e-3..0.9999);
        let e = ema_update(&t, &s, m).expect("shapes match");
        for i in 0..n {
            let (lo, hi) = (t.0[i].min(s.0[i]), t.0[i].max(s.0[i]));
            let outside = (lo - e.0[i]).max(e.0[i] - hi).max(0.0);
            worst = worst.max(outside);
            let want = m * t.0[i] + (1.0 - m) * s.0[i];
            worst = worst.max((e.0[i] - want).abs() / (1.0 + want.abs()) - 4.0 * f64::EPSILON).max(0.0);
        }
        worst = worst.max(ema_update(&t, &t, m).expect("shapes match").max_abs_diff(&t));
    }
    OracleResult::new("ema_properties", worst, 1e-15, "1000 parameter pairs".into())
}

/// Fraction of a regular sub-grid over the pair's bounding box that lies in
/// the intersection, over the fraction in the union.
pub fn raster_iou(a: &OrientedBox, b: &OrientedBox, samples: usize) -> f64 {
    let pts: Vec<Point2> = a.to_polygon().into_iter().chain(b.to_polygon()).collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.x), h.max(p.x)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.y), h.max(p.y)));
    let (dx, dy) = ((x1 - x0) / samples as f64, (y1 - y0) / samples as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..samples {
        let y = y0 + (i as f64 + 0.5) * dy;
        for j in 0..samples {
            let p = Point2::new(x0 + (j as f64 + 0.5) * dx, y);
            let (ia, ib) = (a.contains(p), b.contains(p));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rotated IoU against rasterization on 200 pairs plus two closed forms.
pub fn iou_raster(opts: &SelftestOptions) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 6);
    let sq = |x: f64| OrientedBox::new(x, 0.0, 1.0, 1.0, Angle::ZERO, 0).expect("valid");
    let mut worst_exact = (rotated_iou(&sq(0.0), &sq(0.0)) - 1.0).abs();
    worst_exact = worst_exact.max((rotated_iou(&sq(0.0), &sq(0.5)) - 1.0 / 3.0).abs());
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let random_box = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| {
            OrientedBox::new(
                cx,
                cy,
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..6.0),
                Angle::new(rng.random_range(-1.57..1.57)).expect("finite"),
                0,
            )
            .expect("valid")
        };
        let a = random_box(&mut rng, 0.0, 0.0);
        let (cx, cy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let b = random_box(&mut rng, cx, cy);
        worst = worst.max((rotated_iou(&a, &b) - raster_iou(&a, &b, opts.raster)).abs());
    }
    let passed = worst <= 1e-2 && worst_exact <= 1e-9;
    OracleResult {
        name: "iou_raster".into(),
        passed,
        measured: worst,
        tolerance: 1e-2,
        detail: format!("closed-form error {worst_exact:.1e}, {}^2 samples", opts.raster),
    }
}

/// The [TP, FP, TP] hand case and the identity detection set.
pub fn ap_hand_cases(_opts: &SelftestOptions) -> OracleResult {
    let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2, Interpolation::AllPoint).unwrap_or(f64::NAN);
    let gts: Vec<OrientedBox> = (0..5)
        .map(|i| OrientedBox::new(10.0 + 20.0 * i as f64, 10.0, 12.0, 6.0, Angle::new(0.2 * i as f64).expect("finite"), i % 2).expect("valid"))
        .collect();
    let dets = gts.iter().map(|g| Detection::new(*g, 1.0).expect("valid")).collect();
    let m = evaluate(&[(dets, gts)], 2, &EvalConfig::default()).map;
    let err = (ap - 5.0 / 6.0).abs().max((m - 1.0).abs());
    OracleResult::new("ap_hand_cases", err, 1e-15, format!("AP {ap:.6}, identity mAP {m:.6}"))
}

pub fn run_all(opts: &SelftestOptions) -> Vec<OracleResult> {
    vec![
        ot_agreement(opts),
        gc_gradient_fd(opts),
        end_to_end_fd(opts),
        transport_feasibility(opts),
        raw_exactness(opts),
        ema_properties(opts),
        iou_raster(opts),
        ap_hand_cases(opts),
    ]
}
