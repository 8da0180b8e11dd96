//! Dual ascent for the martingale Schrodinger bridge.
//!
//! The dual value of `(u1, u2)` is `u(t0, X0, Y0) - ∫u2 dμ2`, minus
//! `∫u1 dμ1` when `t0 < T1`, where `u` solves the bridge HJ equation. Its
//! supergradient is the pair of `X`-marginal residuals of the flow tilted by
//! `α = -τ2 ∂y u`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fokker_planck::{evolve_2d_with, FlowResult, PlaneMeasure};
use crate::hj_solver::{solve_hj_sb_with, ControlKind, Coordinates, Generator2D, Grid2D, HjSolution, Space, TimeGrid};
use crate::measures::{convex_order, Grid1D, GridMeasure, OrderReport};
use crate::mot_dual::{project_potential, AscentConfig, AscentStatus};
use crate::svm_models::SvmSpec;

/// Relative tolerance on `mean(μi) = X0`.
pub const MEAN_TOL: f64 = 1e-6;

/// Reference model, marginals and grids of one bridge instance.
#[derive(Clone, Debug)]
pub struct SbProblem {
    pub spec: SvmSpec,
    pub mu1: GridMeasure,
    pub mu2: GridMeasure,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub grid: Grid2D,
    pub time: TimeGrid,
    generator: Generator2D,
}

impl SbProblem {
    /// The `x` axis is the common grid of the marginals, which must be
    /// uniform. Steps are `cfl` times the stable step of the uncontrolled
    /// generator.
    pub fn new(spec: SvmSpec, mu1: GridMeasure, mu2: GridMeasure, times: (f64, f64, f64), ygrid: Grid1D, cfl: f64) -> Result<Self> {
        let (t0, t1, t2) = times;
        if mu1.grid() != mu2.grid() {
            return Err(Error::GridMismatch("marginals must share one grid".into()));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "cfl",
                value: cfl,
                constraint: "must lie in (0, 1]".into(),
            });
        }
        if !(t0 < t2 && t1 < t2) {
            return Err(Error::InvalidGrid(format!("need t0 < T2 and T1 < T2, got {t0}, {t1}, {t2}")));
        }
        let grid = Grid2D::new(mu1.grid().clone(), ygrid)?;
        let generator = Generator2D::new(&spec.model, &grid, Coordinates::Price)?;
        let dt = cfl / generator.max_rate().max(1e-300);
        let time = if t0 < t1 {
            TimeGrid::with_max_step(t0, t1, t2, dt)?
        } else {
            TimeGrid::with_max_step(t0, t0, t2, dt)?
        };
        Ok(Self {
            spec,
            mu1,
            mu2,
            t0,
            t1,
            t2,
            grid,
            time,
            generator,
        })
    }

    /// Same instance on another time grid.
    pub fn with_time(&self, time: TimeGrid) -> Self {
        Self { time, ..self.clone() }
    }

    pub fn generator(&self) -> &Generator2D {
        &self.generator
    }

    /// Whether the `T1` marginal is a constraint; it is not once `t0 >= T1`.
    pub fn uses_mu1(&self) -> bool {
        self.t0 < self.t1
    }

    pub fn initial(&self) -> Result<PlaneMeasure> {
        PlaneMeasure::dirac(self.grid.clone(), self.spec.x0, self.spec.y0)
    }

    pub fn feasibility(&self) -> Vec<(&'static str, OrderReport)> {
        if self.uses_mu1() {
            vec![("mu1 <= mu2", convex_order(&self.mu1, &self.mu2))]
        } else {
            Vec::new()
        }
    }

    /// Necessary conditions for a martingale with these marginals.
    pub fn check_feasible(&self) -> Result<()> {
        let x0 = self.spec.x0;
        let mut means = vec![("mu2", self.mu2.mean())];
        if self.uses_mu1() {
            means.push(("mu1", self.mu1.mean()));
        }
        for (name, m) in means {
            if (m - x0).abs() > MEAN_TOL * (1.0 + x0.abs()) {
                return Err(Error::Infeasible(format!("mean of {name} is {m}, not the initial price {x0}")));
            }
        }
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

/// Dual value of `(u1, u2)` and the HJ solution behind it. The value at
/// `(X0, Y0)` is the bilinear interpolant, which is also the integral
/// against the initial measure.
pub fn sb_dual_objective(problem: &SbProblem, u1: &[f64], u2: &[f64]) -> Result<(f64, HjSolution)> {
    let zero;
    let u1 = if problem.uses_mu1() {
        u1
    } else {
        zero = vec![0.0; u2.len()];
        &zero
    };
    let sol = solve_hj_sb_with(&problem.generator, u1, u2, &problem.time)?;
    let mut v = problem.grid.interpolate(sol.initial(), problem.spec.x0, problem.spec.y0) - problem.mu2.integrate(u2);
    if problem.uses_mu1() {
        v -= problem.mu1.integrate(u1);
    }
    Ok((v, sol))
}

/// Forward flow of the initial state under the tilts of `sol`; its cost is
/// `½∫∫α² dm dt`.
pub fn tilted_flow(problem: &SbProblem, sol: &HjSolution) -> Result<FlowResult> {
    evolve_2d_with(&problem.generator, &sol.controls, &problem.initial()?, &problem.time)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SbIterRecord {
    pub iter: usize,
    pub value: f64,
    pub residual1: f64,
    pub residual2: f64,
    /// `2M (|r1|₁ + |r2|₁)`, a bound on the remaining concave improvement.
    pub improvement_bound: f64,
    pub entropy: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SbDualState {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub dual_value: f64,
    /// `m_T1 - μ1` and `m_T2 - μ2` for the `X`-marginals of the tilted flow.
    pub residual1: Vec<f64>,
    pub residual2: Vec<f64>,
    /// `½∫∫α² dm dt` of the current tilt.
    pub entropy: f64,
    pub history: Vec<SbIterRecord>,
    pub status: AscentStatus,
}

impl SbDualState {
    pub fn zero(n: usize) -> Self {
        Self {
            u1: vec![0.0; n],
            u2: vec![0.0; n],
            dual_value: f64::NEG_INFINITY,
            residual1: vec![0.0; n],
            residual2: vec![0.0; n],
            entropy: 0.0,
            history: Vec::new(),
            status: AscentStatus::MaxIters,
        }
    }

    pub fn residual_norms(&self) -> (f64, f64) {
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        (sup(&self.residual1), sup(&self.residual2))
    }

    pub fn improvement_bound(&self, bound: f64) -> f64 {
        let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        2.0 * bound * (l1(&self.residual1) + l1(&self.residual2))
    }
}

struct Evaluation {
    value: f64,
    r1: Vec<f64>,
    r2: Vec<f64>,
    entropy: f64,
}

fn evaluate(problem: &SbProblem, u1: &[f64], u2: &[f64]) -> Result<Evaluation> {
    let (value, sol) = sb_dual_objective(problem, u1, u2)?;
    let flow = tilted_flow(problem, &sol)?;
    let residual = |k: usize, mu: &GridMeasure| -> Result<Vec<f64>> {
        let m = flow.marginal(k)?;
        Ok(m.weights().iter().zip(mu.weights()).map(|(a, b)| a - b).collect())
    };
    let r1 = if problem.uses_mu1() {
        residual(problem.time.jump_node(), &problem.mu1)?
    } else {
        vec![0.0; u1.len()]
    };
    let r2 = residual(problem.time.n_steps(), &problem.mu2)?;
    Ok(Evaluation {
        value,
        r1,
        r2,
        entropy: flow.cost,
    })
}

/// Projected supergradient ascent with the step rule of the MOT ascent,
/// except that a step must strictly raise the value, so a saturated bound
/// ends in a plateau. A step whose solve or flow fails counts as a decrease.
pub fn sb_ascend(init: SbDualState, problem: &SbProblem, config: &AscentConfig) -> Result<SbDualState> {
    problem.check_feasible()?;
    let grid = problem.grid.x.clone();
    let mut st = init;
    if !problem.uses_mu1() {
        st.u1.iter_mut().for_each(|v| *v = 0.0);
    }
    project_potential(&mut st.u1, &grid, config.bound, config.lipschitz);
    project_potential(&mut st.u2, &grid, config.bound, config.lipschitz);
    let e = evaluate(problem, &st.u1, &st.u2)?;
    st.dual_value = e.value;
    st.residual1 = e.r1;
    st.residual2 = e.r2;
    st.entropy = e.entropy;
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
            u1.iter_mut().zip(&st.residual1).for_each(|(u, r)| *u += step * r / scale);
            project_potential(&mut u1, &grid, config.bound, config.lipschitz);
        }
        u2.iter_mut().zip(&st.residual2).for_each(|(u, r)| *u += step * r / scale);
        project_potential(&mut u2, &grid, config.bound, config.lipschitz);
        let accepted = match evaluate(problem, &u1, &u2) {
            Ok(e) if e.value > st.dual_value => {
                st.u1 = u1;
                st.u2 = u2;
                st.dual_value = e.value;
                st.residual1 = e.r1;
                st.residual2 = e.r2;
                st.entropy = e.entropy;
                true
            }
            Ok(_) | Err(Error::Cfl { .. }) | Err(Error::InvalidMeasure(_)) => false,
            Err(e) => return Err(e),
        };
        let (r1, r2) = st.residual_norms();
        st.history.push(SbIterRecord {
            iter,
            value: st.dual_value,
            residual1: r1,
            residual2: r2,
            improvement_bound: st.improvement_bound(config.bound),
            entropy: st.entropy,
            step,
            accepted,
        });
        step = if accepted { (step * 1.2).min(config.step) } else { step * 0.5 };
    }
    let (n1, n2) = st.residual_norms();
    st.status = if n1.max(n2) <= config.tol {
        AscentStatus::Converged
    } else {
        AscentStatus::MaxIters
    };
    Ok(st)
}

/// A solution carrying the constant tilt `α ≡ c` on every step and zero
/// layers, for feeding the Monte Carlo estimators a known control.
pub fn constant_tilt(problem: &SbProblem, c: f64) -> HjSolution {
    let n = problem.grid.len();
    let steps = problem.time.n_steps();
    HjSolution {
        time: problem.time.clone(),
        space: Space::Plane(problem.grid.clone()),
        layers: vec![vec![0.0; n]; steps + 2],
        controls: vec![vec![c; n]; steps],
        control_kind: ControlKind::Tilt,
        cfl_number: 0.0,
        jump_residual: 0.0,
    }
}

/// Largest jump of `∂y u` across `T1`; zero because `u1` depends on `x`
/// only.
pub fn jump_y_gradient_gap(sol: &HjSolution) -> f64 {
    let Space::Plane(g) = &sol.space else {
        return 0.0;
    };
    let j = sol.time.jump_node();
    let (a, b) = (sol.before(j), sol.after(j));
    let ny = g.ny();
    let mut gap: f64 = 0.0;
    for p in 0..g.len() {
        if (p + 1) % ny == 0 {
            continue;
        }
        gap = gap.max(((a[p + 1] - a[p]) - (b[p + 1] - b[p])).abs() / g.hy());
    }
    gap
}

/// Monte Carlo check of the optimal density and its portfolio form.
#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub seed: u64,
    pub n_paths: usize,
    /// `E[dP*/dP0]` under reference sampling; 1 for a true density.
    pub density_mean: f64,
    pub density_se: f64,
    pub density_pass: bool,
    /// `E*[log dP*/dP0]` from the weights of tilted paths.
    pub entropy_weights: f64,
    pub entropy_weights_se: f64,
    /// `E*[½∫α² dt]` on the same tilted paths.
    pub entropy_energy: f64,
    /// Standard error of the difference of the two estimates.
    pub entropy_diff_se: f64,
    pub entropy_pass: bool,
    /// `½∫∫α² dm dt` of the grid flow, for comparison.
    pub flow_entropy: f64,
    /// `X_T2` mean under the tilted law and its standard error.
    pub tilted_mean_x: f64,
    pub tilted_mean_x_se: f64,
    /// `log-density - (u(t0) - u1(X_T1) - u2(X_T2) - ∫Δ dW)` under tilted
    /// sampling.
    pub portfolio_mean: f64,
    pub portfolio_rms: f64,
    /// Set when some path weight was not finite.
    pub failure: Option<String>,
}

struct PathOut {
    log_density: f64,
    energy: f64,
    x_t1: f64,
    x_t2: f64,
    hedge: f64,
}

/// Gradients `(∂x u, ∂y u)` of a layer by centred differences, one-sided at
/// the edges.
fn gradients(g: &Grid2D, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = (g.nx(), g.ny());
    let mut dx = vec![0.0; g.len()];
    let mut dy = vec![0.0; g.len()];
    for i in 0..nx {
        for j in 0..ny {
            let p = g.index(i, j);
            let (il, ir) = (i.saturating_sub(1), (i + 1).min(nx - 1));
            let (jl, jr) = (j.saturating_sub(1), (j + 1).min(ny - 1));
            dx[p] = (u[g.index(ir, j)] - u[g.index(il, j)]) / (g.hx() * (ir - il) as f64);
            dy[p] = if ny > 1 {
                (u[g.index(i, jr)] - u[g.index(i, jl)]) / (g.hy() * (jr - jl) as f64)
            } else {
                0.0
            };
        }
    }
    (dx, dy)
}

fn rollout(problem: &SbProblem, sol: &HjSolution, n_paths: usize, seed: u64, tilted: bool) -> Vec<PathOut> {
    let model = &problem.spec.model;
    let tg = &problem.time;
    let g = &problem.grid;
    let steps = tg.n_steps();
    let jn = tg.jump_node();
    let grads: Vec<(Vec<f64>, Vec<f64>)> = (0..steps).map(|k| gradients(g, sol.before(k + 1))).collect();
    let path = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut lx, mut y) = (problem.spec.x0.ln(), problem.spec.y0);
        let (mut lw, mut energy, mut hedge) = (0.0, 0.0, 0.0);
        let mut x_t1 = lx.exp();
        for k in 0..steps {
            if k == jn {
                x_t1 = lx.exp();
            }
            let dt = tg.dt(k);
            let sq = dt.sqrt();
            let dw: f64 = StandardNormal.sample(&mut rng);
            let dw2: f64 = StandardNormal.sample(&mut rng);
            let (dw, dw2) = (dw * sq, dw2 * sq);
            let x = lx.exp();
            let cell = g.cell(x, y);
            let a = cell.eval(&sol.controls[k]);
            let st = model.sigma_tilde(y);
            let (t1, t2) = (model.tau1(x, y), model.tau2(x, y));
            let (ux, uy) = (cell.eval(&grads[k].0), cell.eval(&grads[k].1));
            let delta = -model.sigma(x, y) * ux - t1 * uy;
            // the X-noise is a Brownian motion under both laws
            hedge += delta * dw;
            let mut dy = model.drift(x, y) * dt + t1 * dw + t2 * dw2;
            if tilted {
                dy += t2 * a * dt;
                lw += a * dw2 + 0.5 * a * a * dt;
            } else {
                lw += a * dw2 - 0.5 * a * a * dt;
            }
            energy += 0.5 * a * a * dt;
            lx += st * dw - 0.5 * st * st * dt;
            y += dy;
        }
        if jn == steps {
            x_t1 = lx.exp();
        }
        PathOut {
            log_density: lw,
            energy,
            x_t1,
            x_t2: lx.exp(),
            hedge,
        }
    };
    (0..n_paths).into_par_iter().map(path).collect()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Reference and tilted rollouts of `sol`. Paths draw from the ChaCha stream
/// of their index, so the report does not depend on the thread count.
pub fn optimal_density_report(problem: &SbProblem, sol: &HjSolution, n_paths: usize, seed: u64) -> Result<DensityReport> {
    if n_paths < 2 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            value: n_paths as f64,
            constraint: "need at least two paths".into(),
        });
    }
    if sol.controls.len() != problem.time.n_steps() {
        return Err(Error::GridMismatch("solution uses a different time grid".into()));
    }
    let reference = rollout(problem, sol, n_paths, seed, false);
    let tilted = rollout(problem, sol, n_paths, seed.wrapping_add(1), true);
    let bad = reference.iter().chain(&tilted).filter(|p| !p.log_density.is_finite()).count();
    let flow_entropy = tilted_flow(problem, sol).map(|f| f.cost).unwrap_or(f64::NAN);
    let z: Vec<f64> = reference.iter().map(|p| p.log_density.exp()).collect();
    let (density_mean, density_se) = mean_se(&z);
    let lw: Vec<f64> = tilted.iter().map(|p| p.log_density).collect();
    let en: Vec<f64> = tilted.iter().map(|p| p.energy).collect();
    let diff: Vec<f64> = lw.iter().zip(&en).map(|(a, b)| a - b).collect();
    let (entropy_weights, entropy_weights_se) = mean_se(&lw);
    let (entropy_energy, _) = mean_se(&en);
    let (d, entropy_diff_se) = mean_se(&diff);
    let xs: Vec<f64> = tilted.iter().map(|p| p.x_t2).collect();
    let (tilted_mean_x, tilted_mean_x_se) = mean_se(&xs);
    let u0 = problem.grid.interpolate(sol.initial(), problem.spec.x0, problem.spec.y0);
    let xg = &problem.grid.x;
    let pot = |layer: &[f64], x: f64| problem.grid.interpolate(layer, x, problem.spec.y0);
    let j = problem.time.jump_node();
    // u1 and u2 are recovered from the stored jump and terminal layers
    let u1: Vec<f64> = (0..xg.len())
        .map(|i| {
            let p = problem.grid.index(i, 0);
            sol.before(j)[p] - sol.after(j)[p]
        })
        .collect();
    let last = sol.layers.last().expect("nonempty");
    let resid: Vec<f64> = tilted
        .iter()
        .map(|p| {
            let u1v = if problem.uses_mu1() { xg.interpolate(&u1, p.x_t1.clamp(xg.lo(), xg.hi())).unwrap_or(0.0) } else { 0.0 };
            p.log_density - (u0 - u1v - pot(last, p.x_t2) - p.hedge)
        })
        .collect();
    let (portfolio_mean, _) = mean_se(&resid);
    let portfolio_rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    Ok(DensityReport {
        seed,
        n_paths,
        density_mean,
        density_se,
        density_pass: (density_mean - 1.0).abs() <= 3.0 * density_se.max(1e-15),
        entropy_weights,
        entropy_weights_se,
        entropy_energy,
        entropy_diff_se,
        entropy_pass: d.abs() <= 3.0 * entropy_diff_se.max(1e-15),
        flow_entropy,
        tilted_mean_x,
        tilted_mean_x_se,
        portfolio_mean,
        portfolio_rms,
        failure: (bad > 0).then(|| format!("{bad} paths with non-finite weights")),
    })
}
