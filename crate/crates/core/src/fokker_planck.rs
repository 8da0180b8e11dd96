//! Forward flows: the martingale diffusion equation `∂t m = ½∂xx(b m)`, the
//! controlled two-factor Fokker-Planck equation, and Euler-Maruyama paths.
//!
//! Both grid solvers apply the transpose of the generator used by
//! [`crate::hj_solver`], so mass and the `x`-mean are conserved exactly and
//! the primal cost matches the dual value of the same discretisation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamiltonian::LagrangianSpec;
use crate::hj_solver::{clamp_locate, Coordinates, Generator2D, Grid2D, HjSolution, Space, TimeGrid};
use crate::measures::{Grid1D, GridMeasure, CLIP_TOL};
use crate::svm_models::SvmModel;

/// Probability weights on a [`Grid2D`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaneMeasure {
    pub grid: Grid2D,
    pub weights: Vec<f64>,
}

impl PlaneMeasure {
    pub fn new(grid: Grid2D, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} weights for {} nodes",
                weights.len(),
                grid.len()
            )));
        }
        let mass: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (mass - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMeasure(format!("weights must be nonnegative with mass 1, got {mass}")));
        }
        Ok(Self { grid, weights })
    }

    /// Unit mass at `(x, y)` split bilinearly over the enclosing cell, which
    /// keeps both coordinate means.
    pub fn dirac(grid: Grid2D, x: f64, y: f64) -> Result<Self> {
        let inside = |g: &Grid1D, v: f64| v >= g.lo() && v <= g.hi();
        if !inside(&grid.x, x) || !inside(&grid.y, y) {
            return Err(Error::Domain(format!("({x}, {y}) lies outside the grid")));
        }
        let (i, tx) = clamp_locate(&grid.x, x);
        let (j, ty) = clamp_locate(&grid.y, y);
        let mut weights = vec![0.0; grid.len()];
        weights[grid.index(i, j)] += (1.0 - tx) * (1.0 - ty);
        weights[grid.index(i + 1, j)] += tx * (1.0 - ty);
        weights[grid.index(i, j + 1)] += (1.0 - tx) * ty;
        weights[grid.index(i + 1, j + 1)] += tx * ty;
        Ok(Self { grid, weights })
    }

    pub fn x_marginal(&self) -> Result<GridMeasure> {
        x_marginal(&self.grid, &self.weights)
    }

    pub fn y_marginal(&self) -> Result<GridMeasure> {
        let ny = self.grid.ny();
        let mut w = vec![0.0; ny];
        for (p, &m) in self.weights.iter().enumerate() {
            w[p % ny] += m;
        }
        GridMeasure::normalized(self.grid.y.clone(), w)
    }
}

fn x_marginal(grid: &Grid2D, weights: &[f64]) -> Result<GridMeasure> {
    let ny = grid.ny();
    let w: Vec<f64> = weights.chunks(ny).map(|c| c.iter().sum()).collect();
    GridMeasure::normalized(grid.x.clone(), w)
}

/// Weights at every time node of a forward solve.
#[derive(Clone, Debug, Serialize)]
pub struct FlowResult {
    pub times: Vec<f64>,
    pub space: Space,
    pub marginals: Vec<Vec<f64>>,
    /// Per step: `b m` for the diffusion flow, `α m` for the controlled flow.
    pub flux: Vec<Vec<f64>>,
    /// `∑ dt ∑ L(b) m` or `∑ dt ∑ ½α² m`, with the control of each step
    /// charged on the weights at its left node.
    pub cost: f64,
}

impl FlowResult {
    /// Marginal at node `k`: the flow on a line, the `x`-marginal on a plane.
    pub fn marginal(&self, k: usize) -> Result<GridMeasure> {
        match &self.space {
            Space::Line(g) => GridMeasure::normalized(g.clone(), self.marginals[k].clone()),
            Space::Plane(g) => x_marginal(g, &self.marginals[k]),
        }
    }

    pub fn plane_marginal(&self, k: usize) -> Result<PlaneMeasure> {
        match &self.space {
            Space::Plane(g) => Ok(PlaneMeasure {
                grid: g.clone(),
                weights: self.marginals[k].clone(),
            }),
            Space::Line(_) => Err(Error::GridMismatch("flow lives on a line".into())),
        }
    }

    pub fn last(&self) -> Result<GridMeasure> {
        self.marginal(self.marginals.len() - 1)
    }

    /// Rows `t, node, mass` with `node` the flat node index.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,node,mass")?;
        for (t, m) in self.times.iter().zip(&self.marginals) {
            for (p, v) in m.iter().enumerate() {
                writeln!(w, "{t},{p},{v}")?;
            }
        }
        Ok(())
    }
}

/// Zero tiny negative weights from rounding; anything larger is an error.
fn clip(m: &mut [f64]) -> Result<()> {
    let mut clipped = false;
    for v in m.iter_mut() {
        if *v < 0.0 {
            if *v < -CLIP_TOL {
                return Err(Error::Numerical(format!("negative mass {v} in forward solve")));
            }
            *v = 0.0;
            clipped = true;
        }
    }
    if clipped {
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
    }
    Ok(())
}

/// Explicit update `m_{k+1} = m_k + dt (D²)ᵀ(b m_k / 2)` with the centred
/// second difference of the backward solver. `b[k]` is the control of step `k`.
pub fn evolve_1d(b: &[Vec<f64>], m0: &GridMeasure, tg: &TimeGrid, spec: &LagrangianSpec) -> Result<FlowResult> {
    let grid = m0.grid();
    let n = grid.len();
    if b.len() != tg.n_steps() {
        return Err(Error::GridMismatch(format!("{} control layers for {} steps", b.len(), tg.n_steps())));
    }
    let nodes = grid.nodes();
    let mut m = m0.weights().to_vec();
    let mut marginals = vec![m.clone()];
    let mut flux = Vec::with_capacity(b.len());
    let mut cost = 0.0;
    for (k, bk) in b.iter().enumerate() {
        if bk.len() != n {
            return Err(Error::GridMismatch(format!("control layer {k} has {} values", bk.len())));
        }
        if let Some(v) = bk.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("diffusion control must be nonnegative, got {v}")));
        }
        let dt = tg.dt(k);
        let mut next = m.clone();
        for i in 1..n - 1 {
            let (hl, hr) = (nodes[i] - nodes[i - 1], nodes[i + 1] - nodes[i]);
            let rate = dt * bk[i] / (hl * hr);
            if rate > 1.0 + 1e-12 {
                return Err(Error::Cfl {
                    dt,
                    required_dt: hl * hr / bk[i],
                });
            }
            let s = 0.5 * dt * bk[i] * m[i] * 2.0 / (hl + hr);
            next[i - 1] += s / hl;
            next[i + 1] += s / hr;
            next[i] -= s * (1.0 / hl + 1.0 / hr);
        }
        cost += dt * m.iter().zip(bk).map(|(&mi, &bi)| mi * spec.eval(bi)).sum::<f64>();
        flux.push(m.iter().zip(bk).map(|(a, c)| a * c).collect());
        clip(&mut next)?;
        m = next;
        marginals.push(m.clone());
    }
    Ok(FlowResult {
        times: tg.nodes(),
        space: Space::Line(grid.clone()),
        marginals,
        flux,
        cost,
    })
}

/// Controlled forward equation for the pair `(X, Y)` with the `y`-drift
/// `b + τ2 α`. `alpha[k]` is the control of step `k`.
pub fn evolve_2d(model: &SvmModel, alpha: &[Vec<f64>], m0: &PlaneMeasure, tg: &TimeGrid) -> Result<FlowResult> {
    let generator = Generator2D::new(model, &m0.grid, Coordinates::Price)?;
    evolve_2d_with(&generator, alpha, m0, tg)
}

/// [`evolve_2d`] with a prebuilt generator.
pub fn evolve_2d_with(generator: &Generator2D, alpha: &[Vec<f64>], m0: &PlaneMeasure, tg: &TimeGrid) -> Result<FlowResult> {
    if m0.grid != generator.grid {
        return Err(Error::GridMismatch("initial measure and generator use different grids".into()));
    }
    if alpha.len() != tg.n_steps() {
        return Err(Error::GridMismatch(format!("{} control layers for {} steps", alpha.len(), tg.n_steps())));
    }
    let n = generator.len();
    let mut m = m0.weights.clone();
    let mut marginals = vec![m.clone()];
    let mut flux = Vec::with_capacity(alpha.len());
    let mut cost = 0.0;
    for (k, ak) in alpha.iter().enumerate() {
        if ak.len() != n {
            return Err(Error::GridMismatch(format!("control layer {k} has {} values", ak.len())));
        }
        let dt = tg.dt(k);
        let mut next = m.clone();
        let mut energy = 0.0;
        for p in 0..n {
            if m[p] == 0.0 {
                continue;
            }
            let row = generator.row(p, ak[p]);
            if -dt * row.w[0] > 1.0 + 1e-12 {
                return Err(Error::Cfl {
                    dt,
                    required_dt: -1.0 / row.w[0],
                });
            }
            for q in 0..row.len {
                next[row.idx[q]] += dt * row.w[q] * m[p];
            }
            energy += 0.5 * ak[p] * ak[p] * m[p];
        }
        if !energy.is_finite() {
            return Err(Error::Numerical("control energy is not finite".into()));
        }
        cost += dt * energy;
        flux.push(m.iter().zip(ak).map(|(a, c)| a * c).collect());
        clip(&mut next)?;
        m = next;
        marginals.push(m.clone());
    }
    Ok(FlowResult {
        times: tg.nodes(),
        space: Space::Plane(generator.grid.clone()),
        marginals,
        flux,
        cost,
    })
}

/// Measure the paths are drawn under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sampling {
    /// Reference dynamics; `exp(log_weight)` is the density of the tilted
    /// law, `∫α dW⊥ - ½∫α² dt`.
    Reference,
    /// Tilted dynamics with `y`-drift `b + τ2 α`; `exp(log_weight)` is the
    /// density of the reference law, `-∫α dW̃⊥ - ½∫α² dt`.
    Tilted,
}

/// Euler-Maruyama sample of `(X, Y)` recorded at selected time nodes.
#[derive(Clone, Debug, Serialize)]
pub struct PathEnsemble {
    pub seed: u64,
    pub sampling: Sampling,
    /// Time-node indices and times of the recorded states.
    pub record_nodes: Vec<usize>,
    pub record_times: Vec<f64>,
    /// `x[r][path]`, `y[r][path]`.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub log_weight: Vec<f64>,
    /// `½∫α² dt` per path.
    pub energy: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentSummary {
    pub t: f64,
    pub mean_x: f64,
    pub se_mean_x: f64,
    pub var_x: f64,
    pub mean_log_x: f64,
    pub se_mean_log_x: f64,
    pub mean_y: f64,
    pub weighted_mean_x: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleSummary {
    pub seed: u64,
    pub n_paths: usize,
    pub sampling: Sampling,
    pub moments: Vec<MomentSummary>,
    pub min_log_weight: f64,
    pub max_log_weight: f64,
    pub effective_sample_size: f64,
    pub mean_energy: f64,
    pub se_energy: f64,
}

fn mean_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.log_weight.len()
    }

    /// Normalised weights `w_i / ∑ w`.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let m = self.log_weight.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weight.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// `(∑ w)² / ∑ w²`.
    pub fn effective_sample_size(&self) -> f64 {
        let w = self.normalized_weights();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Empirical `X` law at record `r` binned to the nearest node of `grid`.
    pub fn x_histogram(&self, r: usize, grid: &Grid1D, weighted: bool) -> Result<GridMeasure> {
        let uniform = 1.0 / self.n_paths() as f64;
        let w = if weighted { self.normalized_weights() } else { vec![uniform; self.n_paths()] };
        let nodes = grid.nodes();
        let mut mass = vec![0.0; grid.len()];
        for (x, wi) in self.x[r].iter().zip(w) {
            let (i, t) = clamp_locate(grid, *x);
            let k = if t < 0.5 || i + 1 >= nodes.len() { i } else { i + 1 };
            mass[k] += wi;
        }
        GridMeasure::normalized(grid.clone(), mass)
    }

    pub fn summary(&self) -> EnsembleSummary {
        let w = self.normalized_weights();
        let moments = self
            .record_times
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let xs = &self.x[r];
                let (mean_x, se_mean_x) = mean_se(xs.iter().cloned());
                let var_x = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum::<f64>() / xs.len() as f64;
                let (mean_log_x, se_mean_log_x) = mean_se(xs.iter().map(|x| x.ln()));
                let (mean_y, _) = mean_se(self.y[r].iter().cloned());
                let weighted_mean_x = xs.iter().zip(&w).map(|(x, wi)| x * wi).sum();
                MomentSummary {
                    t,
                    mean_x,
                    se_mean_x,
                    var_x,
                    mean_log_x,
                    se_mean_log_x,
                    mean_y,
                    weighted_mean_x,
                }
            })
            .collect();
        let (mean_energy, se_energy) = mean_se(self.energy.iter().cloned());
        EnsembleSummary {
            seed: self.seed,
            n_paths: self.n_paths(),
            sampling: self.sampling,
            moments,
            min_log_weight: self.log_weight.iter().cloned().fold(f64::INFINITY, f64::min),
            max_log_weight: self.log_weight.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            effective_sample_size: self.effective_sample_size(),
            mean_energy,
            se_energy,
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// Control field for [`simulate`]: a bridge solution whose step-`k`
/// controls are read off bilinearly.
pub struct Control<'a> {
    pub solution: &'a HjSolution,
}

impl Control<'_> {
    fn at(&self, k: usize, x: f64, y: f64) -> f64 {
        match &self.solution.space {
            Space::Plane(g) => g.interpolate(&self.solution.controls[k], x, y),
            Space::Line(_) => 0.0,
        }
    }
}

pub struct SimulationSetup<'a> {
    pub model: &'a SvmModel,
    pub x0: f64,
    pub y0: f64,
    pub time: &'a TimeGrid,
    pub control: Option<Control<'a>>,
    pub sampling: Sampling,
    /// Time-node indices to record; the initial node is always recorded.
    pub record: Vec<usize>,
}

/// Euler-Maruyama for `log X` and `Y` on the nodes of `setup.time`. Path `i`
/// draws from the ChaCha stream `i` of `seed`, so the output does not
/// depend on the thread count.
pub fn simulate(setup: &SimulationSetup<'_>, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            value: 0.0,
            constraint: "need at least one path".into(),
        });
    }
    if !(setup.x0 > 0.0) {
        return Err(Error::Domain(format!("initial price must be positive, got {}", setup.x0)));
    }
    let tg = setup.time;
    let steps = tg.n_steps();
    if let Some(c) = &setup.control {
        if c.solution.controls.len() != steps {
            return Err(Error::GridMismatch("control solution uses a different time grid".into()));
        }
    }
    let mut record: Vec<usize> = std::iter::once(0).chain(setup.record.iter().cloned()).collect();
    record.sort_unstable();
    record.dedup();
    if record.last().is_some_and(|&r| r > steps) {
        return Err(Error::InvalidParameter {
            name: "record",
            value: steps as f64,
            constraint: "record nodes must be time nodes".into(),
        });
    }
    let model = setup.model;
    let tilted = setup.sampling == Sampling::Tilted;
    let path = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut lx, mut y) = (setup.x0.ln(), setup.y0);
        let mut lw = 0.0;
        let mut energy = 0.0;
        let mut xs = Vec::with_capacity(record.len());
        let mut ys = Vec::with_capacity(record.len());
        let mut r = 0;
        for k in 0..=steps {
            if r < record.len() && record[r] == k {
                xs.push(lx.exp());
                ys.push(y);
                r += 1;
            }
            if k == steps {
                break;
            }
            let dt = tg.dt(k);
            let sq = dt.sqrt();
            let dw: f64 = StandardNormal.sample(&mut rng);
            let dw2: f64 = StandardNormal.sample(&mut rng);
            let (dw, dw2) = (dw * sq, dw2 * sq);
            let x = lx.exp();
            let a = setup.control.as_ref().map_or(0.0, |c| c.at(k, x, y));
            let st = model.sigma_tilde(y);
            let (t1, t2) = (model.tau1(x, y), model.tau2(x, y));
            let mut dy = model.drift(x, y) * dt + t1 * dw + t2 * dw2;
            if tilted {
                dy += t2 * a * dt;
                lw += -a * dw2 - 0.5 * a * a * dt;
            } else {
                lw += a * dw2 - 0.5 * a * a * dt;
            }
            energy += 0.5 * a * a * dt;
            lx += st * dw - 0.5 * st * st * dt;
            y += dy;
        }
        (xs, ys, lw, energy)
    };
    let out: Vec<_> = (0..n_paths).into_par_iter().map(path).collect();
    let nr = record.len();
    let mut x = vec![Vec::with_capacity(n_paths); nr];
    let mut y = vec![Vec::with_capacity(n_paths); nr];
    let mut log_weight = Vec::with_capacity(n_paths);
    let mut energy = Vec::with_capacity(n_paths);
    for (xs, ys, lw, e) in out {
        for r in 0..nr {
            x[r].push(xs[r]);
            y[r].push(ys[r]);
        }
        if !lw.is_finite() {
            return Err(Error::Numerical("non-finite path weight".into()));
        }
        log_weight.push(lw);
        energy.push(e);
    }
    Ok(PathEnsemble {
        seed,
        sampling: setup.sampling,
        record_times: record.iter().map(|&k| tg.time(k)).collect(),
        record_nodes: record,
        x,
        y,
        log_weight,
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{legendre, symmetric_a_grid, Lagrangian};
    use crate::hj_solver::{mot_stable_dt, solve_hj_mot, solve_hj_sb_with};
    use crate::measures::wasserstein2;
    use crate::svm_models::make_heston;
    use proptest::prelude::*;

    fn gaussian(var: f64) -> GridMeasure {
        let g = Grid1D::uniform(-8.0, 8.0, 161).unwrap();
        GridMeasure::from_density(g, |x| (-x * x / (2.0 * var)).exp()).unwrap()
    }

    fn quad_spec() -> LagrangianSpec {
        LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 20.0, 1001).unwrap()
    }

    #[test]
    fn frozen_flow() {
        let m0 = gaussian(1.0);
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (5, 5)).unwrap();
        let spec = LagrangianSpec::new(Lagrangian::EntropicLike, 2.0, 5.0, 101).unwrap();
        let b = vec![vec![0.0; 161]; 10];
        let f = evolve_1d(&b, &m0, &tg, &spec).unwrap();
        for m in &f.marginals {
            assert_eq!(m, m0.weights());
        }
        assert!((f.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_grows_linearly() {
        let m0 = gaussian(1.0);
        let s2 = 0.3;
        let dt = 0.9 * mot_stable_dt(m0.grid(), s2);
        let tg = TimeGrid::with_max_step(0.0, 0.5, 1.0, dt).unwrap();
        let b = vec![vec![s2; 161]; tg.n_steps()];
        let f = evolve_1d(&b, &m0, &tg, &quad_spec()).unwrap();
        for (k, t) in tg.nodes().iter().enumerate() {
            let m = f.marginal(k).unwrap();
            assert!((m.variance() - m0.variance() - s2 * t).abs() < 1e-4);
        }
        assert!((f.cost - s2 * s2).abs() < 1e-12);
    }

    #[test]
    fn negative_control_and_cfl_are_rejected() {
        let m0 = gaussian(1.0);
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (1, 1)).unwrap();
        let mut b = vec![vec![0.0; 161]; 2];
        b[1][3] = -1.0;
        assert!(matches!(evolve_1d(&b, &m0, &tg, &quad_spec()), Err(Error::Domain(_))));
        let b = vec![vec![1.0; 161]; 2];
        assert!(matches!(evolve_1d(&b, &m0, &tg, &quad_spec()), Err(Error::Cfl { .. })));
    }

    #[test]
    fn envelope_identity_mot() {
        let g = Grid1D::uniform(-3.0, 3.0, 41).unwrap();
        let spec = quad_spec();
        let h = legendre(&spec, &symmetric_a_grid(30.0, 601), 20.0, 2001).unwrap();
        let tg = TimeGrid::with_max_step(0.0, 0.4, 1.0, 0.9 * mot_stable_dt(&g, h.max_control())).unwrap();
        let u1 = g.map(|x| 0.3 * (x).cos());
        let u2 = g.map(|x| -0.5 * (x * x).min(4.0));
        let sol = solve_hj_mot(&h, &u1, &u2, &g, &tg).unwrap();
        let m0 = GridMeasure::project_atoms(g.clone(), &[(-0.5, 0.5), (0.5, 0.5)]).unwrap();
        let f = evolve_1d(&sol.controls, &m0, &tg, &spec).unwrap();
        let lhs = m0.integrate(sol.initial());
        let j = tg.jump_node();
        let rhs = f.cost
            + f.marginals[j].iter().zip(&u1).map(|(a, b)| a * b).sum::<f64>()
            + f.marginals[tg.n_steps()].iter().zip(&u2).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mass_and_mean_conserved(b in proptest::collection::vec(0.0f64..0.2, 41), seed_pos in 5usize..35) {
            let g = Grid1D::uniform(-3.0, 3.0, 41).unwrap();
            let mut w = vec![0.0; 41];
            w[seed_pos] = 0.5;
            w[seed_pos + 1] = 0.5;
            let m0 = GridMeasure::new(g.clone(), w).unwrap();
            let tg = TimeGrid::with_max_step(0.0, 0.5, 1.0, 0.9 * mot_stable_dt(&g, 0.2)).unwrap();
            let layers = vec![b; tg.n_steps()];
            let f = evolve_1d(&layers, &m0, &tg, &quad_spec()).unwrap();
            let mut prev = m0.clone();
            for k in 0..=tg.n_steps() {
                let m = f.marginal(k).unwrap();
                prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((m.mean() - m0.mean()).abs() < 1e-8);
                prop_assert!(crate::measures::convex_order(&prev, &m).max_violation < 1e-10);
                prev = m;
            }
        }
    }

    fn plane() -> (SvmModel, Grid2D, Generator2D) {
        let m = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap();
        let g = Grid2D::new(Grid1D::uniform(0.5, 1.5, 41).unwrap(), Grid1D::uniform(0.01, 0.13, 13).unwrap()).unwrap();
        let gen = Generator2D::new(&m, &g, Coordinates::Price).unwrap();
        (m, g, gen)
    }

    #[test]
    fn uncontrolled_and_constant_control_energy() {
        let (_, g, gen) = plane();
        let tg = TimeGrid::with_max_step(0.0, 0.25, 0.5, 0.5 / gen.max_rate()).unwrap();
        let m0 = PlaneMeasure::dirac(g.clone(), 1.0, 0.04).unwrap();
        let zero = vec![vec![0.0; g.len()]; tg.n_steps()];
        let f = evolve_2d_with(&gen, &zero, &m0, &tg).unwrap();
        assert_eq!(f.cost, 0.0);
        let c = 0.2;
        let m = SvmModel::Constant {
            sigma_tilde: 0.1,
            b: 0.0,
            tau1: 0.0,
            tau2: 0.05,
        };
        let g2 = Grid2D::new(Grid1D::uniform(0.5, 1.5, 21).unwrap(), Grid1D::uniform(-0.5, 0.5, 21).unwrap()).unwrap();
        let gen2 = Generator2D::new(&m, &g2, Coordinates::Price).unwrap();
        let m0 = PlaneMeasure::dirac(g2.clone(), 1.0, 0.0).unwrap();
        let consts = vec![vec![c; g2.len()]; tg.n_steps()];
        let f = evolve_2d_with(&gen2, &consts, &m0, &tg).unwrap();
        assert!((f.cost - 0.5 * c * c * 0.5).abs() < 1e-12);
        for k in 0..=tg.n_steps() {
            let xm = f.marginal(k).unwrap();
            assert!((xm.mean() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_identity_bridge() {
        let (_, g, gen) = plane();
        let tg = TimeGrid::with_max_step(0.0, 0.25, 0.5, 0.5 / gen.max_rate()).unwrap();
        let u1 = g.x.map(|x| 0.2 * (4.0 * x).sin());
        let u2 = g.x.map(|x| -(x - 1.0).abs());
        let sol = solve_hj_sb_with(&gen, &u1, &u2, &tg).unwrap();
        let m0 = PlaneMeasure::dirac(g.clone(), 1.0, 0.04).unwrap();
        let f = evolve_2d_with(&gen, &sol.controls, &m0, &tg).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&m0.weights, sol.initial());
        let j = tg.jump_node();
        let rhs = f.cost + dot(&f.marginal(j).unwrap().weights().to_vec(), &u1) + dot(f.last().unwrap().weights(), &u2);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
        assert!(f.cost > 0.0);
        for k in 0..=tg.n_steps() {
            assert!((f.marginal(k).unwrap().mean() - 1.0).abs() < 1e-12);
        }
    }

    fn setup<'a>(model: &'a SvmModel, tg: &'a TimeGrid, sampling: Sampling) -> SimulationSetup<'a> {
        SimulationSetup {
            model,
            x0: 1.0,
            y0: 0.04,
            time: tg,
            control: None,
            sampling,
            record: vec![tg.jump_node(), tg.n_steps()],
        }
    }

    #[test]
    fn degenerate_paths_are_constant() {
        let m = SvmModel::Constant {
            sigma_tilde: 0.0,
            b: 0.0,
            tau1: 0.0,
            tau2: 0.0,
        };
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (10, 10)).unwrap();
        let e = simulate(&setup(&m, &tg, Sampling::Reference), 50, 7).unwrap();
        assert!(e.x.iter().flatten().all(|&x| x == 1.0));
        assert!(e.y.iter().flatten().all(|&y| y == 0.04));
        assert!(e.log_weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn gbm_moments() {
        let s = 0.3;
        let m = SvmModel::Constant {
            sigma_tilde: s,
            b: 0.0,
            tau1: 0.1,
            tau2: 0.2,
        };
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (20, 20)).unwrap();
        let e = simulate(&setup(&m, &tg, Sampling::Reference), 20000, 11).unwrap();
        let sum = e.summary();
        let last = sum.moments.last().unwrap();
        assert!((last.mean_x - 1.0).abs() < 3.0 * last.se_mean_x);
        assert!((last.mean_log_x + 0.5 * s * s).abs() < 3.0 * last.se_mean_log_x);
        assert!((sum.effective_sample_size - 20000.0).abs() < 1e-6);
        assert!(e.x.iter().flatten().all(|&x| x > 0.0));
        let json = e.summary_json().unwrap();
        assert!(json.contains("effective_sample_size"));
    }

    #[test]
    fn paths_are_thread_count_independent() {
        let m = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap();
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (10, 10)).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&setup(&m, &tg, Sampling::Reference), 500, 3).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.x, b.x);
        assert_eq!(a.log_weight, b.log_weight);
    }

    #[test]
    fn tilted_paths_match_forward_equation() {
        let (m, g, gen) = plane();
        let tg = TimeGrid::with_max_step(0.0, 0.25, 0.5, 0.5 / gen.max_rate()).unwrap();
        let u1 = vec![0.0; g.nx()];
        let u2 = g.x.map(|x| -0.5 * (x - 1.0).abs());
        let sol = solve_hj_sb_with(&gen, &u1, &u2, &tg).unwrap();
        let m0 = PlaneMeasure::dirac(g.clone(), 1.0, 0.04).unwrap();
        let f = evolve_2d_with(&gen, &sol.controls, &m0, &tg).unwrap();
        let mut s = setup(&m, &tg, Sampling::Tilted);
        s.control = Some(Control { solution: &sol });
        let n = 20000;
        let e = simulate(&s, n, 5).unwrap();
        let r = e.record_nodes.iter().position(|&k| k == tg.n_steps()).unwrap();
        let mc = e.x_histogram(r, &g.x, false).unwrap();
        let pde = f.last().unwrap();
        let sd = pde.variance().sqrt();
        let w2 = wasserstein2(&mc, &pde);
        assert!(w2 < 3.0 * (sd / (n as f64).sqrt() + g.hx()), "{w2}");
        let sum = e.summary();
        assert!((sum.mean_energy - f.cost).abs() < 3.0 * sum.se_energy + 0.2 * f.cost, "{} {}", sum.mean_energy, f.cost);
    }
}
