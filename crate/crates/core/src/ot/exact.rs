//! Exact transport cost for small instances by a dense two-phase simplex.

use super::{CostMatrix, DiscreteDistribution};
use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 8;

const PIVOT_EPS: f64 = 1e-12;

/// Minimum of `⟨C, p⟩` over the transport polytope of the normalized marginals.
pub fn exact_ot_oracle(
    source: &DiscreteDistribution,
    target: &DiscreteDistribution,
    cost: &CostMatrix,
) -> Result<f64> {
    let n = cost.n();
    if n > EXACT_MAX_N {
        return Err(Error::UnsupportedSize {
            n,
            max: EXACT_MAX_N,
        });
    }
    if source.len() != n || target.len() != n {
        return Err(Error::invalid("marginal sizes do not match cost matrix"));
    }
    let a = source.normalized();
    let b = target.normalized();

    // Row constraints for every source point, column constraints for all but
    // the last target point (the dropped one is implied by total mass).
    let vars = n * n;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n - 1);
    let mut rhs = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        let mut r = vec![0.0; vars];
        r[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = 1.0);
        rows.push(r);
        rhs.push(a.weights()[i]);
    }
    for j in 0..n.saturating_sub(1) {
        let mut r = vec![0.0; vars];
        for i in 0..n {
            r[i * n + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b.weights()[j]);
    }
    let lp = Simplex::solve(&rows, &rhs, cost.as_slice())
        .ok_or_else(|| Error::invalid("transport LP is infeasible"))?;
    Ok(lp)
}

/// Dense tableau for `min cᵀx  s.t. Ax = b, x ≥ 0` with `b ≥ 0`, Bland's rule.
struct Simplex {
    tab: Vec<Vec<f64>>,
    basis: Vec<usize>,
    width: usize,
}

impl Simplex {
    fn solve(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<f64> {
        let m = a.len();
        let n = c.len();
        let width = n + m;
        let tab: Vec<Vec<f64>> = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (row, &bi))| {
                let mut t = row.clone();
                t.resize(width + 1, 0.0);
                t[n + i] = 1.0;
                t[width] = bi;
                t
            })
            .collect();
        let mut s = Simplex {
            tab,
            basis: (n..n + m).collect(),
            width,
        };

        // phase one: drive artificials out
        let mut phase1 = vec![0.0; width];
        phase1[n..].iter_mut().for_each(|x| *x = 1.0);
        s.run(&phase1, width);
        if s.objective(&phase1) > 1e-9 {
            return None;
        }
        for r in 0..m {
            if s.basis[r] >= n {
                if let Some(col) = (0..n).find(|&j| s.tab[r][j].abs() > PIVOT_EPS) {
                    s.pivot(r, col);
                }
            }
        }

        let mut phase2 = c.to_vec();
        phase2.resize(width, 0.0);
        s.run(&phase2, n);
        Some(s.objective(&phase2))
    }

    fn objective(&self, c: &[f64]) -> f64 {
        self.basis
            .iter()
            .zip(&self.tab)
            .map(|(&j, row)| c[j] * row[self.width])
            .sum()
    }

    // Only columns below `allowed` may enter.
    fn run(&mut self, c: &[f64], allowed: usize) {
        loop {
            let entering = (0..allowed).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let reduced = c[j]
                    - self
                        .basis
                        .iter()
                        .zip(&self.tab)
                        .map(|(&bj, row)| c[bj] * row[j])
                        .sum::<f64>();
                reduced < -PIVOT_EPS
            });
            let Some(col) = entering else { return };
            let mut best: Option<(usize, f64)> = None;
            for (r, row) in self.tab.iter().enumerate() {
                if row[col] > PIVOT_EPS {
                    let ratio = row[self.width] / row[col];
                    let better = match best {
                        None => true,
                        Some((br, bv)) => {
                            ratio < bv - PIVOT_EPS
                                || (ratio <= bv + PIVOT_EPS && self.basis[r] < self.basis[br])
                        }
                    };
                    if better {
                        best = Some((r, ratio));
                    }
                }
            }
            match best {
                Some((r, _)) => self.pivot(r, col),
                // unbounded; cannot happen on a bounded polytope
                None => return,
            }
        }
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.tab[r][col];
        self.tab[r].iter_mut().for_each(|x| *x /= p);
        let pivot_row = self.tab[r].clone();
        for (i, row) in self.tab.iter_mut().enumerate() {
            if i != r {
                let f = row[col];
                if f != 0.0 {
                    for (x, pv) in row.iter_mut().zip(&pivot_row) {
                        *x -= f * pv;
                    }
                }
            }
        }
        self.basis[r] = col;
    }
}
