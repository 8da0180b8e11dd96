//! Discrete-time martingale transport with the perspective cost
//! `∑_k Δt ∑_x m_k(x) L(w_k(x) / (m_k(x) Δt))`, `w_k(x) = ∑_y (y - x)² π_k(x, y)`.
//!
//! `L` enters through its piecewise-linear interpolant on per-node
//! breakpoints, so each solve is a linear program. Breakpoints are refined
//! at the observed controls until the value settles.

use serde::Serialize;

use super::simplex::{solve, LinearProgram, LpSolution};
use crate::error::{Error, Result};
use crate::hamiltonian::Lagrangian;
use crate::measures::{convex_order, Grid1D, GridMeasure};

/// Largest state grid and step count per interval the oracle accepts.
pub const MAX_NODES: usize = 15;
pub const MAX_STEPS: usize = 4;

#[derive(Clone, Debug)]
pub struct DiscreteMotInstance {
    pub grid: Grid1D,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    /// Steps on `[t0, T1]` and `[T1, T2]`; with `t0 > T1` only the second
    /// count is used, on `[t0, T2]`.
    pub steps: (usize, usize),
    pub mu0: GridMeasure,
    pub mu1: GridMeasure,
    pub mu2: GridMeasure,
    pub cost: Lagrangian,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscreteMotResult {
    pub value: f64,
    pub times: Vec<f64>,
    /// `m_k` at every time node.
    pub marginals: Vec<Vec<f64>>,
    /// `π_k(x, y)`, row-major.
    pub transitions: Vec<Vec<f64>>,
    /// `w_k(x) / (m_k(x) Δt)` where `m_k(x) > 0`.
    pub controls: Vec<Vec<f64>>,
    pub min_reduced_cost: f64,
    pub primal_residual: f64,
    pub refinements: usize,
    /// Value change of the last refinement.
    pub last_change: f64,
    /// Mass-weighted chord excess of the linearised cost next to the
    /// observed controls.
    pub interpolation_gap: f64,
}

impl DiscreteMotInstance {
    fn uses_mu1(&self) -> bool {
        self.t0 <= self.t1
    }

    fn times(&self) -> Vec<f64> {
        let mut t = Vec::new();
        if self.uses_mu1() {
            let n0 = self.steps.0;
            for k in 0..n0 {
                t.push(self.t0 + (self.t1 - self.t0) * k as f64 / n0 as f64);
            }
            for k in 0..=self.steps.1 {
                t.push(self.t1 + (self.t2 - self.t1) * k as f64 / self.steps.1 as f64);
            }
        } else {
            for k in 0..=self.steps.1 {
                t.push(self.t0 + (self.t2 - self.t0) * k as f64 / self.steps.1 as f64);
            }
        }
        t
    }

    fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if n > MAX_NODES {
            return Err(Error::InvalidGrid(format!("oracle grid has {n} nodes, at most {MAX_NODES} allowed")));
        }
        let n0 = if self.uses_mu1() { self.steps.0 } else { 0 };
        if n0 > MAX_STEPS || self.steps.1 > MAX_STEPS || self.steps.1 == 0 || (self.uses_mu1() && self.t0 < self.t1 && n0 == 0) {
            return Err(Error::InvalidGrid(format!("steps {:?} outside 1..={MAX_STEPS}", self.steps)));
        }
        for mu in [&self.mu0, &self.mu1, &self.mu2] {
            if mu.grid() != &self.grid {
                return Err(Error::GridMismatch("oracle marginals must live on the oracle grid".into()));
            }
        }
        let mut checks = vec![("mu0 <= mu2", convex_order(&self.mu0, &self.mu2))];
        if self.uses_mu1() {
            checks = vec![
                ("mu0 <= mu1", convex_order(&self.mu0, &self.mu1)),
                ("mu1 <= mu2", convex_order(&self.mu1, &self.mu2)),
            ];
        }
        for (name, r) in checks {
            if !r.holds {
                return Err(Error::Infeasible(format!(
                    "{name} fails: violation {:.3e} at strike {:?}",
                    r.max_violation, r.worst_strike
                )));
            }
        }
        Ok(())
    }
}

struct Layout {
    n: usize,
    steps: usize,
    /// First column of each `(k, i)` breakpoint block.
    theta: Vec<Vec<usize>>,
}

impl Layout {
    fn pi(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.n + i) * self.n + j
    }
}

fn build(inst: &DiscreteMotInstance, breaks: &[Vec<Vec<f64>>]) -> (LinearProgram, Layout) {
    let x = inst.grid.nodes();
    let n = x.len();
    let times = inst.times();
    let steps = times.len() - 1;
    let mut lp = LinearProgram::new(steps * n * n);
    let mut layout = Layout {
        n,
        steps,
        theta: vec![vec![0; n]; steps],
    };
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        for i in 0..n {
            layout.theta[k][i] = lp.n_vars;
            for &b in &breaks[k][i] {
                lp.add_var(dt * inst.cost.eval(b));
            }
        }
    }
    let row_sum = |k: usize, i: usize| (0..n).map(|j| (layout.pi(k, i, j), 1.0)).collect::<Vec<_>>();
    for i in 0..n {
        lp.add_row(row_sum(0, i), inst.mu0.weights()[i], format!("m_0({}) = mu0", x[i]));
    }
    for k in 1..steps {
        for i in 0..n {
            let mut r = row_sum(k, i);
            r.extend((0..n).map(|h| (layout.pi(k - 1, h, i), -1.0)));
            lp.add_row(r, 0.0, format!("flow continuity k={k} x={}", x[i]));
        }
    }
    if inst.uses_mu1() && inst.steps.0 > 0 {
        let j = inst.steps.0;
        for i in 0..n {
            lp.add_row(row_sum(j, i), inst.mu1.weights()[i], format!("m_T1({}) = mu1", x[i]));
        }
    }
    if inst.uses_mu1() && inst.steps.0 == 0 {
        for i in 0..n {
            lp.add_row(row_sum(0, i), inst.mu1.weights()[i], format!("m_T1({}) = mu1", x[i]));
        }
    }
    for i in 0..n {
        let r = (0..n).map(|h| (layout.pi(steps - 1, h, i), 1.0)).collect();
        lp.add_row(r, inst.mu2.weights()[i], format!("m_T2({}) = mu2", x[i]));
    }
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        for i in 0..n {
            let mart = (0..n)
                .filter(|&j| j != i)
                .map(|j| (layout.pi(k, i, j), x[j] - x[i]))
                .collect();
            lp.add_row(mart, 0.0, format!("martingale k={k} x={}", x[i]));
            let t0 = layout.theta[k][i];
            let nb = breaks[k][i].len();
            let mut r: Vec<(usize, f64)> = (0..nb).map(|l| (t0 + l, 1.0)).collect();
            r.extend((0..n).map(|j| (layout.pi(k, i, j), -1.0)));
            lp.add_row(r, 0.0, format!("breakpoint mass k={k} x={}", x[i]));
            let mut r: Vec<(usize, f64)> = breaks[k][i].iter().enumerate().map(|(l, &b)| (t0 + l, b)).collect();
            r.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (layout.pi(k, i, j), -(x[j] - x[i]).powi(2) / dt)),
            );
            lp.add_row(r, 0.0, format!("breakpoint moment k={k} x={}", x[i]));
        }
    }
    (lp, layout)
}

fn observed(inst: &DiscreteMotInstance, layout: &Layout, s: &LpSolution) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let x = inst.grid.nodes();
    let n = layout.n;
    let times = inst.times();
    let mut marginals = Vec::new();
    let mut transitions = Vec::new();
    let mut controls = Vec::new();
    for k in 0..layout.steps {
        let dt = times[k + 1] - times[k];
        let pi: Vec<f64> = (0..n * n).map(|q| s.x[layout.pi(k, q / n, q % n)]).collect();
        let m: Vec<f64> = (0..n).map(|i| pi[i * n..(i + 1) * n].iter().sum()).collect();
        let b: Vec<f64> = (0..n)
            .map(|i| {
                let w: f64 = (0..n).map(|j| (x[j] - x[i]).powi(2) * pi[i * n + j]).sum();
                if m[i] > 1e-14 {
                    w / (m[i] * dt)
                } else {
                    0.0
                }
            })
            .collect();
        marginals.push(m);
        transitions.push(pi);
        controls.push(b);
    }
    let last: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| transitions[layout.steps - 1][i * n + j]).sum())
        .collect();
    marginals.push(last);
    (marginals, transitions, controls)
}

/// Largest chord excess over `L` on the breakpoint intervals touching `b`.
fn chord_gap(set: &[f64], b: f64, cost: &Lagrangian) -> f64 {
    let tol = 1e-7 * (1.0 + b);
    let pos = set.partition_point(|&v| v < b - tol);
    let on_node = pos < set.len() && (set[pos] - b).abs() <= tol;
    let mut cells = Vec::new();
    if on_node {
        if pos > 0 {
            cells.push((set[pos - 1], set[pos]));
        }
        if pos + 1 < set.len() {
            cells.push((set[pos], set[pos + 1]));
        }
    } else if pos > 0 && pos < set.len() {
        cells.push((set[pos - 1], set[pos]));
    }
    cells
        .into_iter()
        .map(|(lo, hi)| {
            let mid = 0.5 * (lo + hi);
            0.5 * (cost.eval(lo) + cost.eval(hi)) - cost.eval(mid)
        })
        .fold(0.0, f64::max)
}

/// Inserts `b` and the midpoints of its neighbouring intervals.
fn refine_around(set: &mut Vec<f64>, b: f64) -> bool {
    let tol = 1e-7 * (1.0 + b);
    let pos = set.partition_point(|&v| v < b - tol);
    let on_node = pos < set.len() && (set[pos] - b).abs() <= tol;
    let lo = if pos > 0 { Some(set[pos - 1]) } else { None };
    let hi_idx = if on_node { pos + 1 } else { pos };
    let hi = set.get(hi_idx).copied();
    let mut fresh = Vec::new();
    if !on_node {
        fresh.push(b);
    }
    if let Some(lo) = lo {
        fresh.push(0.5 * (lo + b));
    }
    if let Some(hi) = hi {
        fresh.push(0.5 * (b + hi));
    }
    let before = set.len();
    for v in fresh {
        if set.iter().all(|&w| (w - v).abs() > 1e-7 * (1.0 + v)) {
            set.insert(set.partition_point(|&w| w < v), v);
        }
    }
    set.len() > before
}

/// Solves the discrete program, refining breakpoints until the value
/// changes by less than `1e-7` between rounds.
pub fn solve_discrete_mot(inst: &DiscreteMotInstance) -> Result<DiscreteMotResult> {
    inst.validate()?;
    let x = inst.grid.nodes();
    let n = x.len();
    let times = inst.times();
    let steps = times.len() - 1;
    let span = x[n - 1] - x[0];
    let mut breaks: Vec<Vec<Vec<f64>>> = (0..steps)
        .map(|k| {
            let dt = times[k + 1] - times[k];
            let top = span * span / dt;
            (0..n)
                .map(|_| (0..=8).map(|l| top * (l as f64 / 8.0).powi(2)).collect())
                .collect()
        })
        .collect();
    let mut prev = f64::INFINITY;
    let mut rounds = 0;
    loop {
        let (lp, layout) = build(inst, &breaks);
        let s = solve(&lp)?;
        let (marginals, transitions, controls) = observed(inst, &layout, &s);
        let change = (prev - s.objective).abs();
        let mut gap = 0.0;
        for k in 0..steps {
            let dt = times[k + 1] - times[k];
            for i in 0..n {
                if marginals[k][i] > 1e-14 {
                    gap += dt * marginals[k][i] * chord_gap(&breaks[k][i], controls[k][i], &inst.cost);
                }
            }
        }
        let mut added = false;
        if change >= 1e-7 || gap >= 1e-8 {
            for k in 0..steps {
                for i in 0..n {
                    if marginals[k][i] > 1e-14 {
                        added |= refine_around(&mut breaks[k][i], controls[k][i]);
                    }
                }
            }
        }
        if !added {
            return Ok(DiscreteMotResult {
                value: s.objective,
                times,
                marginals,
                transitions,
                controls,
                min_reduced_cost: s.min_reduced_cost,
                primal_residual: s.primal_residual,
                refinements: rounds,
                last_change: if change.is_finite() { change } else { 0.0 },
                interpolation_gap: gap,
            });
        }
        if rounds >= 60 {
            return Err(Error::Numerical(format!("breakpoint refinement stalled, last change {change:.3e}")));
        }
        prev = s.objective;
        rounds += 1;
    }
}
