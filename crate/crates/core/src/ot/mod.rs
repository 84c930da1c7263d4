//! Discrete optimal transport between two point sets of equal size.
//!
//! The global-consistency loss treats the teacher's and the student's selected
//! class scores as two discrete distributions over the sampled positions and
//! scores them by the dual value of an entropic transport problem. Only the
//! student-side potential `μ*` enters the gradient; the duals and the cost
//! matrix are held fixed when differentiating.

mod exact;
mod sinkhorn;

pub use exact::{exact_ot_oracle, EXACT_MAX_N};
pub use sinkhorn::{sinkhorn, SinkhornConfig, TransportSolution};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
    support: Option<Vec<Point2>>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("distribution must have at least one point"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("distribution weights must be finite and >= 0"));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::invalid("distribution needs at least one positive weight"));
        }
        Ok(Self {
            weights,
            support: None,
        })
    }

    pub fn with_support(weights: Vec<f64>, support: Vec<Point2>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::invalid(format!(
                "support has {} points but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let mut d = Self::new(weights)?;
        d.support = Some(support);
        Ok(d)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> Option<&[Point2]> {
        self.support.as_deref()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weights divided by their L1 norm.
    pub fn normalized(&self) -> DiscreteDistribution {
        let s = self.l1_norm();
        DiscreteDistribution {
            weights: self.weights.iter().map(|w| w / s).collect(),
            support: self.support.clone(),
        }
    }
}

/// Dense square cost matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("cost matrix must be square and non-empty"));
        }
        Self::from_flat(n, rows.concat())
    }

    pub fn from_flat(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n || n == 0 {
            return Err(Error::invalid(format!(
                "expected {} cost entries, got {}",
                n * n,
                entries.len()
            )));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        Ok(Self { n, entries })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A sampled position together with the score of its selected class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub z: Point2,
    pub score: f64,
}

/// Which components enter the cost matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostComposition {
    pub use_dist: bool,
    pub use_score: bool,
}

impl Default for CostComposition {
    fn default() -> Self {
        Self {
            use_dist: true,
            use_score: true,
        }
    }
}

/// `C = C_dist + C_score`, each max-normalized over all pairs.
pub fn build_cost_matrix(teacher: &[CostPoint], student: &[CostPoint]) -> Result<CostMatrix> {
    build_cost_matrix_with(teacher, student, CostComposition::default())
}

pub fn build_cost_matrix_with(
    teacher: &[CostPoint],
    student: &[CostPoint],
    composition: CostComposition,
) -> Result<CostMatrix> {
    let n = teacher.len();
    if n == 0 || student.len() != n {
        return Err(Error::invalid(format!(
            "cost views must be non-empty and equal length (teacher {n}, student {})",
            student.len()
        )));
    }
    if teacher
        .iter()
        .chain(student)
        .any(|p| !(p.z.x.is_finite() && p.z.y.is_finite() && p.score.is_finite()))
    {
        return Err(Error::invalid("cost views contain non-finite values"));
    }
    let mut entries = vec![0.0; n * n];
    if composition.use_dist {
        add_normalized(&mut entries, n, |i, j| teacher[i].z.dist_sq(student[j].z));
    }
    if composition.use_score {
        add_normalized(&mut entries, n, |i, j| {
            (teacher[i].score - student[j].score).abs()
        });
    }
    CostMatrix::from_flat(n, entries)
}

// a component whose max is zero contributes nothing
fn add_normalized(out: &mut [f64], n: usize, f: impl Fn(usize, usize) -> f64) {
    let raw: Vec<f64> = (0..n * n).map(|k| f(k / n, k % n)).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for (o, r) in out.iter_mut().zip(&raw) {
            *o += r / max;
        }
    }
}

/// `⟨λ*, d_t/‖d_t‖₁⟩ + ⟨μ*, d_s/‖d_s‖₁⟩`.
pub fn gc_loss(
    d_t: &DiscreteDistribution,
    d_s: &DiscreteDistribution,
    sol: &TransportSolution,
) -> Result<f64> {
    let n = sol.dual_row.len();
    if d_t.len() != n || d_s.len() != n || sol.dual_col.len() != n {
        return Err(Error::invalid(format!(
            "gc_loss dimension mismatch: d_t {}, d_s {}, duals {n}/{}",
            d_t.len(),
            d_s.len(),
            sol.dual_col.len()
        )));
    }
    let (nt, ns) = (d_t.l1_norm(), d_s.l1_norm());
    let a: f64 = sol
        .dual_row
        .iter()
        .zip(d_t.weights())
        .map(|(l, w)| l * w / nt)
        .sum();
    let b: f64 = sol
        .dual_col
        .iter()
        .zip(d_s.weights())
        .map(|(m, w)| m * w / ns)
        .sum();
    Ok(a + b)
}

/// Gradient of the GC loss with respect to the unnormalized student weights,
/// with `μ*` held constant: `μ*/‖d_s‖₁ − ⟨μ*, d_s⟩/‖d_s‖₁²`.
pub fn gc_gradient(d_s: &DiscreteDistribution, mu_star: &[f64]) -> Result<Vec<f64>> {
    gc_gradient_raw(d_s.weights(), mu_star)
}

pub(crate) fn gc_gradient_raw(d_s: &[f64], mu_star: &[f64]) -> Result<Vec<f64>> {
    if d_s.len() != mu_star.len() {
        return Err(Error::invalid("gc_gradient dimension mismatch"));
    }
    let norm: f64 = d_s.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::invalid("gc_gradient needs a non-zero distribution"));
    }
    let dot: f64 = mu_star.iter().zip(d_s).map(|(m, d)| m * d).sum();
    let tail = dot / (norm * norm);
    Ok(mu_star.iter().map(|m| m / norm - tail).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, s: f64) -> CostPoint {
        CostPoint {
            z: Point2::new(x, y),
            score: s,
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(vec![]).is_err());
        assert!(DiscreteDistribution::new(vec![0.0, 0.0]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0, -0.1]).is_err());
        let d = DiscreteDistribution::new(vec![1.0, 3.0]).unwrap().normalized();
        assert_abs_diff_eq!(d.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(DiscreteDistribution::with_support(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn cost_single_identical_point_is_zero() {
        let c = build_cost_matrix(&[pt(1.0, 2.0, 0.3)], &[pt(1.0, 2.0, 0.3)]).unwrap();
        assert_eq!(c.as_slice(), &[0.0]);
    }

    #[test]
    fn cost_two_points_equal_scores() {
        let v = [pt(0.0, 0.0, 0.5), pt(0.0, 1.0, 0.5)];
        let c = build_cost_matrix(&v, &v).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cost_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<_> = (0..3)
            .map(|_| pt(rng.random(), rng.random(), rng.random_range(0.01..0.99)))
            .collect();
        let s: Vec<_> = (0..3)
            .map(|_| pt(rng.random(), rng.random(), rng.random_range(0.01..0.99)))
            .collect();
        let c = build_cost_matrix(&t, &s).unwrap();
        let mut dmax = 0.0f64;
        let mut smax = 0.0f64;
        for a in 0..3 {
            for b in 0..3 {
                let dx = t[a].z.x - s[b].z.x;
                let dy = t[a].z.y - s[b].z.y;
                dmax = dmax.max(dx * dx + dy * dy);
                smax = smax.max((t[a].score - s[b].score).abs());
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let dx = t[i].z.x - s[j].z.x;
                let dy = t[i].z.y - s[j].z.y;
                let want = (dx * dx + dy * dy) / dmax + (t[i].score - s[j].score).abs() / smax;
                assert_abs_diff_eq!(c.get(i, j), want, epsilon = 1e-14);
                assert!((0.0..=2.0).contains(&c.get(i, j)));
            }
        }
    }

    #[test]
    fn cost_composition_switches() {
        let t = [pt(0.0, 0.0, 0.2), pt(1.0, 0.0, 0.8)];
        let none = CostComposition {
            use_dist: false,
            use_score: false,
        };
        let c = build_cost_matrix_with(&t, &t, none).unwrap();
        assert!(c.as_slice().iter().all(|v| *v == 0.0));
        let dist_only = CostComposition {
            use_dist: true,
            use_score: false,
        };
        let c = build_cost_matrix_with(&t, &t, dist_only).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cost_rejects_mismatched_lengths() {
        assert!(build_cost_matrix(&[pt(0.0, 0.0, 0.5)], &[]).is_err());
        assert!(build_cost_matrix(&[], &[]).is_err());
    }

    #[test]
    fn identical_views_give_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<_> = (0..7)
            .map(|_| pt(rng.random(), rng.random(), rng.random()))
            .collect();
        let c = build_cost_matrix(&v, &v).unwrap();
        for i in 0..7 {
            assert_eq!(c.get(i, i), 0.0);
        }
    }

    fn sol_with_duals(l: Vec<f64>, m: Vec<f64>) -> TransportSolution {
        let n = l.len();
        TransportSolution {
            plan: vec![0.0; n * n],
            n,
            dual_row: l,
            dual_col: m,
            primal_cost: 0.0,
            iterations_used: 0,
            converged: true,
        }
    }

    #[test]
    fn gc_loss_examples() {
        let d = DiscreteDistribution::new(vec![0.3, 1.2, 2.0]).unwrap();
        let e = DiscreteDistribution::new(vec![5.0, 0.1, 0.7]).unwrap();
        let zero = sol_with_duals(vec![0.0; 3], vec![0.0; 3]);
        assert_eq!(gc_loss(&d, &e, &zero).unwrap(), 0.0);
        let consts = sol_with_duals(vec![0.4; 3], vec![-1.5; 3]);
        assert_abs_diff_eq!(gc_loss(&d, &e, &consts).unwrap(), 0.4 - 1.5, epsilon = 1e-14);
        let short = DiscreteDistribution::new(vec![1.0]).unwrap();
        assert!(gc_loss(&short, &e, &zero).is_err());
    }

    #[test]
    fn gc_gradient_examples() {
        let d = DiscreteDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let g = gc_gradient(&d, &[0.7; 3]).unwrap();
        for v in g {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
        let d = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(gc_gradient(&d, &[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
        assert!(gc_gradient_raw(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(gc_gradient_raw(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gc_gradient_scales_inversely() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
            let mu: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(0.2..7.0);
            let g1 = gc_gradient_raw(&w, &mu).unwrap();
            let wk: Vec<f64> = w.iter().map(|x| x * k).collect();
            let g2 = gc_gradient_raw(&wk, &mu).unwrap();
            for (a, b) in g1.iter().zip(&g2) {
                assert_abs_diff_eq!(a / k, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let dt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
            let ds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
            let sol = sol_with_duals(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let t = DiscreteDistribution::new(dt).unwrap();
            let loss = |w: &[f64]| gc_loss(&t, &DiscreteDistribution::new(w.to_vec()).unwrap(), &sol).unwrap();
            let g = gc_gradient_raw(&ds, &sol.dual_col).unwrap();
            for i in 0..n {
                let h = 1e-6;
                let mut p = ds.clone();
                let mut m = ds.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1e-8);
                assert!((fd - g[i]).abs() / scale < 1e-6 || (fd - g[i]).abs() < 1e-10);
            }
        }
    }
}
