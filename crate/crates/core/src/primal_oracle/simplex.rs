//! Dense two-phase simplex for `min c·x` subject to `A x = b`, `x >= 0`.
//!
//! Rows are equilibrated, ties in the ratio test are broken
//! lexicographically, and the tableau is rebuilt from the original matrix
//! every few dozen pivots to stop roundoff from accumulating.

use serde::Serialize;

use crate::error::{Error, Result};

/// Pivot elements below this fraction of the column are refused.
const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-10;
const RATIO_TOL: f64 = 1e-12;
/// Entries below this are roundoff and are flushed.
const DROP_TOL: f64 = 1e-14;
/// Consecutive degenerate pivots before falling back to Bland's rule.
const STALL_LIMIT: usize = 5000;
const REINVERT_EVERY: usize = 64;

/// Equality-form linear program with optional row labels for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub cost: Vec<f64>,
    /// Sparse rows `(column, coefficient)` with right-hand sides.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub labels: Vec<String>,
}

impl LinearProgram {
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            cost: vec![0.0; n_vars],
            ..Self::default()
        }
    }

    pub fn add_var(&mut self, cost: f64) -> usize {
        self.cost.push(cost);
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) {
        self.rows.push(coeffs);
        self.rhs.push(rhs);
        self.labels.push(label.into());
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Row multipliers `y` with `c - Aᵀy >= 0` at optimality.
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub min_reduced_cost: f64,
    /// `max |A x - b|`.
    pub primal_residual: f64,
    pub pivots: usize,
}

struct Tableau {
    m: usize,
    /// Structural columns; artificials follow, then the right-hand side.
    n: usize,
    width: usize,
    /// Scaled original `[A | I | b]`.
    a0: Vec<f64>,
    t: Vec<f64>,
    basis: Vec<usize>,
    /// Phase costs over structural and artificial columns.
    cost: Vec<f64>,
    /// Reduced-cost row; the last entry is minus the objective.
    z: Vec<f64>,
    pivots: usize,
    since_reinvert: usize,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.width + j]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let p = self.t[r * w + c];
        for j in 0..w {
            self.t[r * w + j] /= p;
        }
        let (before, rest) = self.t.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        let eliminate = |row: &mut [f64]| {
            let f = row[c];
            if f != 0.0 {
                for (x, &pv) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * pv;
                }
                row[c] = 0.0;
            }
        };
        before.chunks_mut(w).for_each(eliminate);
        after.chunks_mut(w).for_each(eliminate);
        let f = self.z[c];
        if f != 0.0 {
            for (x, &pv) in self.z.iter_mut().zip(prow.iter()) {
                *x -= f * pv;
            }
            self.z[c] = 0.0;
        }
        self.basis[r] = c;
        self.pivots += 1;
        self.since_reinvert += 1;
    }

    /// Recomputes `B⁻¹[A | I | b]` and the cost row for the current basis
    /// by Gauss-Jordan elimination with partial pivoting.
    fn reinvert(&mut self) -> Result<()> {
        let (m, w) = (self.m, self.width);
        let mut b: Vec<f64> = (0..m)
            .flat_map(|i| (0..m).map(move |k| (i, k)))
            .map(|(i, k)| self.a0[i * w + self.basis[k]])
            .collect();
        let mut t = self.a0.clone();
        for k in 0..m {
            let r = (k..m)
                .max_by(|&x, &y| b[x * m + k].abs().total_cmp(&b[y * m + k].abs()))
                .unwrap();
            let p = b[r * m + k];
            if p.abs() < 1e-13 {
                return Err(Error::Numerical("simplex basis became singular".into()));
            }
            if r != k {
                for j in 0..m {
                    b.swap(r * m + j, k * m + j);
                }
                for j in 0..w {
                    t.swap(r * w + j, k * w + j);
                }
            }
            for j in 0..m {
                b[k * m + j] /= p;
            }
            for j in 0..w {
                t[k * w + j] /= p;
            }
            for i in 0..m {
                let f = b[i * m + k];
                if i != k && f != 0.0 {
                    for j in 0..m {
                        b[i * m + j] -= f * b[k * m + j];
                    }
                    for j in 0..w {
                        t[i * w + j] -= f * t[k * w + j];
                    }
                }
            }
        }
        for x in t.iter_mut() {
            if x.abs() < DROP_TOL {
                *x = 0.0;
            }
        }
        self.t = t;
        self.refresh_costs();
        self.since_reinvert = 0;
        Ok(())
    }

    fn refresh_costs(&mut self) {
        let w = self.width;
        let mut z = vec![0.0; w];
        z[..w - 1].copy_from_slice(&self.cost);
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..w {
                    z[j] -= cb * self.t[i * w + j];
                }
            }
        }
        for k in 0..self.m {
            z[self.basis[k]] = 0.0;
        }
        self.z = z;
    }

    /// Minimum-ratio row for entering column `c`. Ties are broken
    /// lexicographically on the rows of `B⁻¹` (the artificial block), or by
    /// smallest basic index under Bland's rule.
    fn ratio_test(&self, c: usize, bland: bool) -> Option<usize> {
        let rhs = self.width - 1;
        let big = (0..self.m).fold(0.0f64, |s, i| s.max(self.at(i, c).abs()));
        let ratio_of = |i: usize| self.at(i, rhs).max(0.0) / self.at(i, c);
        let mut ratio = f64::INFINITY;
        let mut rows = Vec::new();
        for i in 0..self.m {
            if self.at(i, c) > PIVOT_TOL * big.max(1.0) {
                let r = ratio_of(i);
                ratio = ratio.min(r);
                rows.push(i);
            }
        }
        rows.retain(|&i| ratio_of(i) <= ratio + RATIO_TOL);
        if rows.len() <= 1 || bland {
            return rows.into_iter().min_by_key(|&i| self.basis[i]);
        }
        for k in 0..self.m {
            let key = |i: usize| self.at(i, self.n + k) / self.at(i, c);
            let least = rows.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
            rows.retain(|&i| key(i) <= least + RATIO_TOL);
            if rows.len() == 1 {
                break;
            }
        }
        rows.into_iter().min_by_key(|&i| self.basis[i])
    }

    /// Runs pivots until no structural column prices out negative.
    fn optimise(&mut self, max_pivots: usize) -> Result<()> {
        let rhs = self.width - 1;
        let mut stall = 0;
        loop {
            if self.pivots > max_pivots {
                return Err(Error::Numerical(format!("simplex exceeded {max_pivots} pivots")));
            }
            if self.since_reinvert >= REINVERT_EVERY {
                self.reinvert()?;
            }
            let bland = stall >= STALL_LIMIT;
            let mut enter = None;
            let mut best = -COST_TOL;
            for j in 0..self.n {
                let rc = self.z[j];
                if rc < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(c) = enter else {
                if self.since_reinvert == 0 {
                    return Ok(());
                }
                // confirm optimality on a fresh factorisation
                self.reinvert()?;
                if (0..self.n).all(|j| self.z[j] >= -COST_TOL) {
                    return Ok(());
                }
                continue;
            };
            let Some(r) = self.ratio_test(c, bland) else {
                return Err(Error::Numerical("linear program is unbounded".into()));
            };
            let before = self.z[rhs];
            self.pivot(r, c);
            let gain = before - self.z[rhs];
            stall = if gain.abs() <= 1e-12 * (1.0 + before.abs()) { stall + 1 } else { 0 };
        }
    }
}

/// Solves the program. An infeasible program yields [`Error::Infeasible`]
/// naming the constraints left unsatisfied by phase one.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    let n = lp.n_vars;
    let m = lp.rows.len();
    let width = n + m + 1;
    let mut a0 = vec![0.0; m * width];
    let mut row_scale = vec![1.0; m];
    for (i, row) in lp.rows.iter().enumerate() {
        let big = row.iter().fold(0.0f64, |s, &(_, a)| s.max(a.abs()));
        let big = if big > 0.0 { big } else { 1.0 };
        row_scale[i] = if lp.rhs[i] < 0.0 { -1.0 / big } else { 1.0 / big };
        for &(j, a) in row {
            a0[i * width + j] += row_scale[i] * a;
        }
        a0[i * width + n + i] = 1.0;
        a0[i * width + width - 1] = row_scale[i] * lp.rhs[i];
    }
    let mut cost = vec![0.0; n + m];
    cost[n..].iter_mut().for_each(|c| *c = 1.0);
    let mut tab = Tableau {
        m,
        n,
        width,
        t: a0.clone(),
        a0,
        basis: (n..n + m).collect(),
        cost,
        z: Vec::new(),
        pivots: 0,
        since_reinvert: 0,
    };
    tab.refresh_costs();
    let max_pivots = 50 * (n + m) + 1000;
    tab.optimise(max_pivots)?;
    let infeasibility = -tab.z[width - 1];
    if infeasibility > 1e-9 {
        let violated: Vec<String> = (0..m)
            .filter(|&i| tab.basis[i] >= n && tab.at(i, width - 1) > 1e-9)
            .map(|i| lp.labels.get(tab.basis[i] - n).cloned().unwrap_or_default())
            .collect();
        return Err(Error::Infeasible(format!(
            "phase one leaves {infeasibility:.3e} unmet in [{}]",
            violated.join(", ")
        )));
    }
    // Drive zero-level artificials out of the basis; rows that cannot be
    // cleared are redundant and keep their artificial at zero.
    let mut redundant = vec![false; m];
    for i in 0..m {
        if tab.basis[i] >= n {
            let j = (0..n)
                .filter(|&j| tab.at(i, j).abs() > 1e-9)
                .max_by(|&x, &y| tab.at(i, x).abs().total_cmp(&tab.at(i, y).abs()));
            match j {
                Some(j) => tab.pivot(i, j),
                None => redundant[i] = true,
            }
        }
    }
    tab.cost[..n].copy_from_slice(&lp.cost);
    tab.cost[n..].iter_mut().for_each(|c| *c = 0.0);
    tab.reinvert()?;
    tab.optimise(tab.pivots + max_pivots)?;
    let mut x = vec![0.0; n];
    for i in 0..m {
        if tab.basis[i] < n {
            x[tab.basis[i]] = tab.at(i, width - 1).max(0.0);
        }
    }
    let duals: Vec<f64> = (0..m)
        .map(|i| if redundant[i] { 0.0 } else { -row_scale[i] * tab.z[n + i] })
        .collect();
    let mut reduced_costs = lp.cost.clone();
    for (i, row) in lp.rows.iter().enumerate() {
        for &(j, a) in row {
            reduced_costs[j] -= duals[i] * a;
        }
    }
    let min_reduced_cost = reduced_costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let primal_residual = lp
        .rows
        .iter()
        .zip(&lp.rhs)
        .map(|(row, &b)| (row.iter().map(|&(j, a)| a * x[j]).sum::<f64>() - b).abs())
        .fold(0.0, f64::max);
    let objective = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        objective,
        duals,
        reduced_costs,
        min_reduced_cost,
        primal_residual,
        pivots: tab.pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_program() {
        // min -x - y  s.t. x + 2y + s1 = 4, 3x + y + s2 = 6
        let mut lp = LinearProgram::new(4);
        lp.cost = vec![-1.0, -1.0, 0.0, 0.0];
        lp.add_row(vec![(0, 1.0), (1, 2.0), (2, 1.0)], 4.0, "a");
        lp.add_row(vec![(0, 3.0), (1, 1.0), (3, 1.0)], 6.0, "b");
        let s = solve(&lp).unwrap();
        assert!((s.objective + 2.8).abs() < 1e-12);
        assert!((s.x[0] - 1.6).abs() < 1e-12 && (s.x[1] - 1.2).abs() < 1e-12);
        assert!(s.min_reduced_cost >= -1e-12);
        let dual_obj: f64 = s.duals.iter().zip(&lp.rhs).map(|(y, b)| y * b).sum();
        assert!((dual_obj - s.objective).abs() < 1e-12);
    }

    #[test]
    fn infeasible_program_names_rows() {
        let mut lp = LinearProgram::new(1);
        lp.add_row(vec![(0, 1.0)], 1.0, "x = 1");
        lp.add_row(vec![(0, 1.0)], 2.0, "x = 2");
        match solve(&lp) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("x = ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn redundant_and_negative_rows() {
        let mut lp = LinearProgram::new(2);
        lp.cost = vec![1.0, 2.0];
        lp.add_row(vec![(0, -1.0), (1, -1.0)], -1.0, "sum");
        lp.add_row(vec![(0, 2.0), (1, 2.0)], 2.0, "sum twice");
        let s = solve(&lp).unwrap();
        assert!((s.objective - 1.0).abs() < 1e-12);
        assert!(s.min_reduced_cost >= -1e-12);
        assert!(s.primal_residual < 1e-12);
    }

    #[test]
    fn degenerate_program_terminates() {
        // Beale's cycling example in equality form.
        let mut lp = LinearProgram::new(7);
        lp.cost = vec![-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0];
        lp.add_row(vec![(0, 0.25), (1, -60.0), (2, -0.04), (3, 9.0), (4, 1.0)], 0.0, "r1");
        lp.add_row(vec![(0, 0.5), (1, -90.0), (2, -0.02), (3, 3.0), (5, 1.0)], 0.0, "r2");
        lp.add_row(vec![(2, 1.0), (6, 1.0)], 1.0, "r3");
        let s = solve(&lp).unwrap();
        assert!((s.objective + 0.05).abs() < 1e-12);
    }
}
