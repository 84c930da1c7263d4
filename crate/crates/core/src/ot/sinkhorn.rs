use serde::{Deserialize, Serialize};

use super::{CostMatrix, DiscreteDistribution};
use crate::error::{Error, Result};

/// Below this regularization the solver always iterates in the log domain.
const LOG_DOMAIN_BELOW: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 200,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportSolution {
    /// Row-major `n × n` transport plan.
    pub plan: Vec<f64>,
    pub n: usize,
    /// Source potential λ*.
    pub dual_row: Vec<f64>,
    /// Target potential μ*.
    pub dual_col: Vec<f64>,
    pub primal_cost: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportSolution {
    pub fn plan_at(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.n + j]
    }

    /// Largest absolute deviation of the plan's row and column sums from the marginals.
    pub fn marginal_violation(&self, source: &[f64], target: &[f64]) -> f64 {
        marginal_violation(&self.plan, self.n, source, target)
    }

    /// `⟨λ*, a⟩ + ⟨μ*, b⟩` for probability vectors `a`, `b`.
    pub fn dual_objective(&self, source: &[f64], target: &[f64]) -> f64 {
        dot(&self.dual_row, source) + dot(&self.dual_col, target)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn marginal_violation(plan: &[f64], n: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut col = vec![0.0; n];
    for i in 0..n {
        let row = &plan[i * n..(i + 1) * n];
        worst = worst.max((row.iter().sum::<f64>() - a[i]).abs());
        for (c, p) in col.iter_mut().zip(row) {
            *c += p;
        }
    }
    for j in 0..n {
        worst = worst.max((col[j] - b[j]).abs());
    }
    worst
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport by Sinkhorn iterations.
///
/// Both marginals are normalized before solving. Potentials come from the
/// scaling vectors as `λ = ε log u`, `μ = ε log v`, then shifted by `(+c, −c)`
/// so that `⟨λ, a⟩ = ⟨μ, b⟩`.
pub fn sinkhorn(
    source: &DiscreteDistribution,
    target: &DiscreteDistribution,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportSolution> {
    cfg.validate()?;
    let n = cost.n();
    if source.len() != n || target.len() != n {
        return Err(Error::invalid(format!(
            "marginal sizes {}/{} do not match {n}x{n} cost",
            source.len(),
            target.len()
        )));
    }
    if cost.as_slice().iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let a = source.normalized().weights().to_vec();
    let b = target.normalized().weights().to_vec();

    let scaled = if cfg.epsilon >= LOG_DOMAIN_BELOW {
        scaling_iterations(&a, &b, cost, cfg)
    } else {
        None
    };
    let (mut f, mut g, iters, converged) =
        scaled.unwrap_or_else(|| log_iterations(&a, &b, cost, cfg));

    let eps = cfg.epsilon;
    let mut plan = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            plan[i * n + j] = ((f[i] + g[j] - cost.get(i, j)) / eps).exp();
        }
    }
    let primal_cost = dot(&plan, cost.as_slice());

    repair_potentials(&mut f, &mut g, cost);

    let shift = (dot(&g, &b) - dot(&f, &a)) / 2.0;
    f.iter_mut().for_each(|x| *x += shift);
    g.iter_mut().for_each(|x| *x -= shift);

    Ok(TransportSolution {
        plan,
        n,
        dual_row: f,
        dual_col: g,
        primal_cost,
        iterations_used: iters,
        converged,
    })
}

type Potentials = (Vec<f64>, Vec<f64>, usize, bool);

// Plain scaling; gives up (None) if a scaling vector under- or overflows.
fn scaling_iterations(
    a: &[f64],
    b: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Option<Potentials> {
    let n = a.len();
    let eps = cfg.epsilon;
    let kernel: Vec<f64> = cost.as_slice().iter().map(|c| (-c / eps).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for i in 0..n {
            let s = dot(&kernel[i * n..(i + 1) * n], &v);
            u[i] = if a[i] > 0.0 { a[i] / s } else { 0.0 };
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| kernel[i * n + j] * u[i]).sum();
            v[j] = if b[j] > 0.0 { b[j] / s } else { 0.0 };
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        // columns match exactly after the v-update; check rows
        let mut worst = 0.0f64;
        for i in 0..n {
            let s = dot(&kernel[i * n..(i + 1) * n], &v);
            worst = worst.max((u[i] * s - a[i]).abs());
        }
        if !worst.is_finite() {
            return None;
        }
        if worst <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    if a.iter().zip(&u).any(|(w, x)| *w > 0.0 && *x == 0.0)
        || b.iter().zip(&v).any(|(w, x)| *w > 0.0 && *x == 0.0)
    {
        return None;
    }
    let f = u.iter().map(|x| eps * x.ln()).collect();
    let g = v.iter().map(|x| eps * x.ln()).collect();
    Some((f, g, iters, converged))
}

fn log_iterations(a: &[f64], b: &[f64], cost: &CostMatrix, cfg: &SinkhornConfig) -> Potentials {
    let n = a.len();
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for i in 0..n {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost.get(i, j)) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost.get(i, j)) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        let mut worst = 0.0f64;
        for i in 0..n {
            let row: f64 = (0..n)
                .map(|j| ((f[i] + g[j] - cost.get(i, j)) / eps).exp())
                .sum();
            worst = worst.max((row - a[i]).abs());
        }
        if worst <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    (f, g, iters, converged)
}

// Zero-mass points leave an infinite potential; replace it by the
// c-transform of the other side so that λ_i + μ_j ≤ C_ij still holds.
fn repair_potentials(f: &mut [f64], g: &mut [f64], cost: &CostMatrix) {
    let n = f.len();
    for i in 0..n {
        if !f[i].is_finite() {
            let t = (0..n)
                .filter(|&j| g[j].is_finite())
                .map(|j| cost.get(i, j) - g[j])
                .fold(f64::INFINITY, f64::min);
            f[i] = if t.is_finite() { t } else { 0.0 };
        }
    }
    for j in 0..n {
        if !g[j].is_finite() {
            let t = (0..n)
                .map(|i| cost.get(i, j) - f[i])
                .fold(f64::INFINITY, f64::min);
            g[j] = if t.is_finite() { t } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::exact_ot_oracle;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(w: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(w.to_vec()).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (DiscreteDistribution, DiscreteDistribution, CostMatrix) {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let c: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect();
        (dist(&a).normalized(), dist(&b).normalized(), CostMatrix::from_flat(n, c).unwrap())
    }

    #[test]
    fn two_point_diagonal() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let u = dist(&[0.5, 0.5]);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            max_iters: 1000,
            tolerance: 1e-9,
        };
        let sol = sinkhorn(&u, &u, &c, &cfg).unwrap();
        assert!(sol.converged);
        assert!(sol.primal_cost <= 0.02);
        assert_abs_diff_eq!(sol.plan_at(0, 0), 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.plan_at(1, 1), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn single_point() {
        let c = CostMatrix::from_rows(&[vec![0.7]]).unwrap();
        let d = dist(&[3.0]);
        let sol = sinkhorn(&d, &d, &c, &SinkhornConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.plan_at(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.primal_cost, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.dual_row[0], 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.dual_col[0], 0.35, epsilon = 1e-12);
    }

    #[test]
    fn four_point_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, c) = random_instance(&mut rng, 4);
        let cfg = SinkhornConfig {
            epsilon: 0.005,
            max_iters: 50_000,
            tolerance: 1e-10,
        };
        let sol = sinkhorn(&a, &b, &c, &cfg).unwrap();
        let exact = exact_ot_oracle(&a, &b, &c).unwrap();
        assert!((sol.primal_cost - exact).abs() <= 0.01 * exact.max(1e-1));
    }

    #[test]
    fn rejects_bad_input() {
        let c = CostMatrix::zeros(2);
        let d = dist(&[1.0, 1.0]);
        let bad = SinkhornConfig {
            epsilon: 0.0,
            ..SinkhornConfig::default()
        };
        assert!(sinkhorn(&d, &d, &c, &bad).is_err());
        assert!(sinkhorn(&dist(&[1.0]), &d, &c, &SinkhornConfig::default()).is_err());
        assert!(CostMatrix::from_flat(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn log_and_scaling_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (a, b, c) = random_instance(&mut rng, 5);
            let cfg = SinkhornConfig {
                epsilon: 0.05,
                max_iters: 5000,
                tolerance: 1e-12,
            };
            let plain = sinkhorn(&a, &b, &c, &cfg).unwrap();
            let (mut f, mut g, _, conv) = log_iterations(a.weights(), b.weights(), &c, &cfg);
            assert!(conv);
            repair_potentials(&mut f, &mut g, &c);
            let obj: f64 = dot(&f, a.weights()) + dot(&g, b.weights());
            assert_abs_diff_eq!(plain.dual_objective(a.weights(), b.weights()), obj, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_mass_points_stay_finite() {
        let c = CostMatrix::from_rows(&[
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 1.0, 0.0],
        ])
        .unwrap();
        let a = dist(&[0.5, 0.0, 0.5]);
        let b = dist(&[0.2, 0.3, 0.5]);
        for eps in [0.005, 0.02, 0.05] {
            let cfg = SinkhornConfig {
                epsilon: eps,
                max_iters: 20_000,
                tolerance: 1e-9,
            };
            let sol = sinkhorn(&a, &b, &c, &cfg).unwrap();
            assert!(sol.dual_row.iter().chain(&sol.dual_col).all(|x| x.is_finite()));
            assert!(sol.plan.iter().all(|x| x.is_finite()));
            if sol.converged {
                assert!(sol.marginal_violation(a.weights(), b.weights()) <= 1e-9);
            }
            assert!(sol.plan_at(1, 0) == 0.0 && sol.plan_at(1, 2) == 0.0);
        }
    }

    #[test]
    fn tiny_epsilon_never_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b, c) = random_instance(&mut rng, 6);
        let cfg = SinkhornConfig {
            epsilon: 1e-4,
            max_iters: 200,
            tolerance: 1e-6,
        };
        let sol = sinkhorn(&a, &b, &c, &cfg).unwrap();
        assert!(sol.plan.iter().all(|x| x.is_finite()));
        assert!(sol.primal_cost.is_finite());
    }

    #[test]
    fn recentered_duals_split_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, c) = random_instance(&mut rng, 4);
        let sol = sinkhorn(&a, &b, &c, &SinkhornConfig::default()).unwrap();
        assert_abs_diff_eq!(
            dot(&sol.dual_row, a.weights()),
            dot(&sol.dual_col, b.weights()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropic_dual_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 2..7 {
            let (a, b, c) = random_instance(&mut rng, n);
            let eps = 0.05;
            let sol = sinkhorn(&a, &b, &c, &SinkhornConfig { epsilon: eps, max_iters: 5000, tolerance: 1e-9 }).unwrap();
            let slack = 3.0 * eps * (n as f64).ln();
            for i in 0..n {
                for j in 0..n {
                    assert!(sol.dual_row[i] + sol.dual_col[j] <= c.get(i, j) + slack + 1e-12);
                }
            }
        }
    }
}
