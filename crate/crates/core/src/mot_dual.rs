//! Dual ascent for continuous-time martingale optimal transport.
//!
//! The dual value of potentials `(u1, u2)` is
//! `∫u(T0) dμ0 - ∫u2 dμ2 - 1{T0 <= T1} ∫u1 dμ1`, where `u` solves the
//! jump HJ equation. Its supergradient is `(m_T1 - μ1, m_T2 - μ2)` for the
//! flow driven by the extracted diffusion.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fokker_planck::{evolve_1d, FlowResult};
use crate::hamiltonian::Hamiltonian;
use crate::hj_solver::{mot_stable_dt, second_difference, solve_hj_mot, HjSolution, Space, TimeGrid};
use crate::measures::{convex_order, Grid1D, GridMeasure, OrderReport};

/// Marginals, horizon and cost of one MOT instance on a common grid.
#[derive(Clone, Debug)]
pub struct MotProblem {
    pub mu0: GridMeasure,
    pub mu1: GridMeasure,
    pub mu2: GridMeasure,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub hamiltonian: Hamiltonian,
    pub time: TimeGrid,
}

impl MotProblem {
    /// Builds the time grid at `cfl` (in `(0, 1]`) times the stable step.
    pub fn new(
        mu0: GridMeasure,
        mu1: GridMeasure,
        mu2: GridMeasure,
        times: (f64, f64, f64),
        hamiltonian: Hamiltonian,
        cfl: f64,
    ) -> Result<Self> {
        let (t0, t1, t2) = times;
        let grid = mu0.grid();
        if mu1.grid() != grid || mu2.grid() != grid {
            return Err(Error::GridMismatch("marginals must share one grid".into()));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "cfl",
                value: cfl,
                constraint: "must lie in (0, 1]".into(),
            });
        }
        if !(t0 >= 0.0 && t0 < t2 && t1 > 0.0 && t1 < t2) {
            return Err(Error::InvalidGrid(format!("need 0 <= T0 < T2 and 0 < T1 < T2, got {t0}, {t1}, {t2}")));
        }
        let dt = cfl * mot_stable_dt(grid, hamiltonian.max_control());
        let time = if t0 <= t1 {
            TimeGrid::with_max_step(t0, t1, t2, dt)?
        } else {
            TimeGrid::with_max_step(t0, t0, t2, dt)?
        };
        Ok(Self {
            mu0,
            mu1,
            mu2,
            t0,
            t1,
            t2,
            hamiltonian,
            time,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        self.mu0.grid()
    }

    /// Whether the `T1` marginal enters the problem.
    pub fn uses_mu1(&self) -> bool {
        self.t0 <= self.t1
    }

    /// Convex-order checks the instance must pass.
    pub fn feasibility(&self) -> Vec<(&'static str, OrderReport)> {
        if self.uses_mu1() {
            vec![
                ("mu0 <= mu1", convex_order(&self.mu0, &self.mu1)),
                ("mu1 <= mu2", convex_order(&self.mu1, &self.mu2)),
            ]
        } else {
            vec![("mu0 <= mu2", convex_order(&self.mu0, &self.mu2))]
        }
    }

    pub fn check_feasible(&self) -> Result<()> {
        for (name, r) in self.feasibility() {
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

/// Dual value of `(u1, u2)` and the HJ solution behind it. `u1` is ignored
/// when `T0 > T1`.
pub fn dual_objective(problem: &MotProblem, u1: &[f64], u2: &[f64]) -> Result<(f64, HjSolution)> {
    let zero;
    let u1 = if problem.uses_mu1() {
        u1
    } else {
        zero = vec![0.0; u2.len()];
        &zero
    };
    let sol = solve_hj_mot(&problem.hamiltonian, u1, u2, problem.grid(), &problem.time)?;
    let mut v = problem.mu0.integrate(sol.initial()) - problem.mu2.integrate(u2);
    if problem.uses_mu1() {
        v -= problem.mu1.integrate(u1);
    }
    Ok((v, sol))
}

/// Forward flow of `μ0` under the controls of `sol`.
pub fn optimal_flow(problem: &MotProblem, sol: &HjSolution) -> Result<FlowResult> {
    evolve_1d(&sol.controls, &problem.mu0, &problem.time, problem.hamiltonian.spec())
}

/// Why an ascent stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AscentStatus {
    Converged,
    /// The step shrank below its floor without meeting the tolerance.
    Plateau,
    MaxIters,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub value: f64,
    pub residual1: f64,
    pub residual2: f64,
    pub step: f64,
    pub accepted: bool,
}

/// Potentials with their value, residuals and history.
#[derive(Clone, Debug, Serialize)]
pub struct DualState {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub dual_value: f64,
    /// `m_T1 - μ1` and `m_T2 - μ2`, nodewise.
    pub residual1: Vec<f64>,
    pub residual2: Vec<f64>,
    pub history: Vec<IterRecord>,
    pub status: AscentStatus,
}

impl DualState {
    pub fn zero(n: usize) -> Self {
        Self {
            u1: vec![0.0; n],
            u2: vec![0.0; n],
            dual_value: f64::NEG_INFINITY,
            residual1: vec![0.0; n],
            residual2: vec![0.0; n],
            history: Vec::new(),
            status: AscentStatus::MaxIters,
        }
    }

    pub fn residual_norms(&self) -> (f64, f64) {
        (sup(&self.residual1), sup(&self.residual2))
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Step rule and potential bounds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AscentConfig {
    /// Initial and largest step, in potential units per unit of normalised
    /// supergradient.
    pub step: f64,
    pub min_step: f64,
    pub max_iters: usize,
    /// Sup-norm tolerance on both residuals.
    pub tol: f64,
    /// Bound `M` on `|u_i|`.
    pub bound: f64,
    /// Lipschitz bound `Λ` on the potentials.
    pub lipschitz: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            min_step: 1e-7,
            max_iters: 2000,
            tol: 1e-4,
            bound: 10.0,
            lipschitz: 10.0,
        }
    }
}

/// Maps `u` into `{|u| <= M, Λ-Lipschitz}`: the midpoint of the largest
/// `Λ`-Lipschitz minorant and the smallest majorant, clipped. Feasible `u`
/// are fixed.
pub fn project_potential(u: &mut [f64], grid: &Grid1D, bound: f64, lipschitz: f64) {
    let x = grid.nodes();
    let n = u.len();
    let mut lower = u.to_vec();
    let mut upper = u.to_vec();
    for i in 1..n {
        let d = lipschitz * (x[i] - x[i - 1]);
        lower[i] = lower[i].min(lower[i - 1] + d);
        upper[i] = upper[i].max(upper[i - 1] - d);
    }
    for i in (0..n - 1).rev() {
        let d = lipschitz * (x[i + 1] - x[i]);
        lower[i] = lower[i].min(lower[i + 1] + d);
        upper[i] = upper[i].max(upper[i + 1] - d);
    }
    for i in 0..n {
        u[i] = (0.5 * (lower[i] + upper[i])).clamp(-bound, bound);
    }
}

fn evaluate(problem: &MotProblem, u1: &[f64], u2: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (v, sol) = dual_objective(problem, u1, u2)?;
    let flow = optimal_flow(problem, &sol)?;
    let j = problem.time.jump_node();
    let r1 = if problem.uses_mu1() {
        flow.marginals[j].iter().zip(problem.mu1.weights()).map(|(a, b)| a - b).collect()
    } else {
        vec![0.0; u1.len()]
    };
    let last = &flow.marginals[problem.time.n_steps()];
    let r2 = last.iter().zip(problem.mu2.weights()).map(|(a, b)| a - b).collect();
    Ok((v, r1, r2))
}

/// Projected supergradient ascent with halving on decrease and a 1.2
/// growth factor, capped at the initial step, on acceptance.
pub fn ascend(init: DualState, problem: &MotProblem, config: &AscentConfig) -> Result<DualState> {
    problem.check_feasible()?;
    let grid = problem.grid().clone();
    let mut st = init;
    if !problem.uses_mu1() {
        st.u1.iter_mut().for_each(|v| *v = 0.0);
    }
    project_potential(&mut st.u1, &grid, config.bound, config.lipschitz);
    project_potential(&mut st.u2, &grid, config.bound, config.lipschitz);
    let (v, r1, r2) = evaluate(problem, &st.u1, &st.u2)?;
    st.dual_value = v;
    st.residual1 = r1;
    st.residual2 = r2;
    let mut step = config.step;
    for iter in 0..config.max_iters {
        let (n1, n2) = st.residual_norms();
        if n1.max(n2) <= config.tol {
            st.status = AscentStatus::Converged;
            return Ok(st);
        }
        if step < config.min_step {
            st.status = AscentStatus::Plateau;
            return Ok(st);
        }
        let scale = n1.max(n2);
        let mut u1 = st.u1.clone();
        let mut u2 = st.u2.clone();
        if problem.uses_mu1() {
            for (u, r) in u1.iter_mut().zip(&st.residual1) {
                *u += step * r / scale;
            }
            project_potential(&mut u1, &grid, config.bound, config.lipschitz);
        }
        for (u, r) in u2.iter_mut().zip(&st.residual2) {
            *u += step * r / scale;
        }
        project_potential(&mut u2, &grid, config.bound, config.lipschitz);
        let trial = evaluate(problem, &u1, &u2);
        let accepted = match trial {
            Ok((v, r1, r2)) if v >= st.dual_value => {
                st.u1 = u1;
                st.u2 = u2;
                st.dual_value = v;
                st.residual1 = r1;
                st.residual2 = r2;
                true
            }
            Ok(_) | Err(Error::OutOfRange { .. }) => false,
            Err(e) => return Err(e),
        };
        let (n1, n2) = st.residual_norms();
        st.history.push(IterRecord {
            iter,
            value: st.dual_value,
            residual1: n1,
            residual2: n2,
            step,
            accepted,
        });
        step = if accepted { (step * 1.2).min(config.step) } else { 0.5 * step };
    }
    let (n1, n2) = st.residual_norms();
    st.status = if n1.max(n2) <= config.tol {
        AscentStatus::Converged
    } else {
        AscentStatus::MaxIters
    };
    Ok(st)
}

/// `b = -H'(D²u/2)` recomputed from the layers of `sol`, step by step.
pub fn extract_optimal_diffusion(sol: &HjSolution, h: &Hamiltonian) -> Result<Vec<Vec<f64>>> {
    let Space::Line(grid) = &sol.space else {
        return Err(Error::GridMismatch("diffusion controls live on a line".into()));
    };
    (0..sol.time.n_steps())
        .map(|k| {
            let u = sol.before(k + 1);
            (0..grid.len())
                .map(|i| h.control_value(0.5 * second_difference(grid, u, i)).map(|(b, _)| b))
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SupersolutionReport {
    pub holds: bool,
    pub max_violation: f64,
    /// `(step, node)` of the largest residual.
    pub worst: Option<(usize, usize)>,
}

/// Checks `-∂t u + H(D²u/2) <= tol` at interior nodes, differencing each
/// step between `u(t_k+)` and `u(t_{k+1}-)` so the jump is never crossed.
pub fn certify_supersolution(sol: &HjSolution, h: &Hamiltonian, tol: f64) -> Result<SupersolutionReport> {
    let Space::Line(grid) = &sol.space else {
        return Err(Error::GridMismatch("supersolution check runs on a line".into()));
    };
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst = None;
    for k in 0..sol.time.n_steps() {
        let dt = sol.time.dt(k);
        let (now, next) = (sol.after(k), sol.before(k + 1));
        for i in 1..grid.len() - 1 {
            let a = 0.5 * second_difference(grid, next, i);
            let r = (now[i] - next[i]) / dt + h.sup_value(a)?;
            if r > max_violation {
                max_violation = r;
                worst = Some((k, i));
            }
        }
    }
    Ok(SupersolutionReport {
        holds: max_violation <= tol,
        max_violation: max_violation.max(0.0),
        worst,
    })
}
