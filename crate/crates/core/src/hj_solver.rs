//! Explicit monotone backward solvers for the dual Hamilton-Jacobi equations.
//!
//! A solve runs from `T2` down to `t0`. At `T1` the solution jumps by the
//! potential `u1`: `u(T1-) = u1 + u(T1+)`. Controls are extracted at every
//! step and are exactly the ones the forward solvers in
//! [`crate::fokker_planck`] consume, so a backward/forward pair satisfies
//! the discrete envelope identity to rounding.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::Hamiltonian;
use crate::measures::Grid1D;
use crate::svm_models::SvmModel;

/// Time nodes `t0 < ... < T1 < ... < T2` with uniform steps on each piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    /// Step counts on `[t0, T1]` and `[T1, T2]`.
    pub steps: (usize, usize),
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, t2: f64, steps: (usize, usize)) -> Result<Self> {
        for (name, v) in [("t0", t0), ("t1", t1), ("t2", t2)] {
            crate::error::ensure_finite(name, v)?;
        }
        if !(t0 <= t1 && t1 < t2) {
            return Err(Error::InvalidGrid(format!("need t0 <= T1 < T2, got {t0}, {t1}, {t2}")));
        }
        if (t1 > t0) != (steps.0 > 0) {
            return Err(Error::InvalidGrid("[t0, T1] needs steps exactly when t0 < T1".into()));
        }
        if steps.1 == 0 {
            return Err(Error::InvalidGrid("[T1, T2] needs at least one step".into()));
        }
        Ok(Self { t0, t1, t2, steps })
    }

    /// Smallest step counts with every step at most `dt_max`.
    pub fn with_max_step(t0: f64, t1: f64, t2: f64, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt_max",
                value: dt_max,
                constraint: "must be positive".into(),
            });
        }
        let n0 = if t1 > t0 { ((t1 - t0) / dt_max).ceil() as usize } else { 0 };
        let n1 = ((t2 - t1) / dt_max).ceil().max(1.0) as usize;
        Self::new(t0, t1, t2, (n0, n1))
    }

    /// The grid restricted to `[T1, T2]`.
    pub fn post(&self) -> Self {
        Self {
            t0: self.t1,
            t1: self.t1,
            t2: self.t2,
            steps: (0, self.steps.1),
        }
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self {
            steps: (self.steps.0 * factor, self.steps.1 * factor),
            ..self.clone()
        }
    }

    pub fn n_steps(&self) -> usize {
        self.steps.0 + self.steps.1
    }

    /// Index of the node at `T1`.
    pub fn jump_node(&self) -> usize {
        self.steps.0
    }

    pub fn time(&self, k: usize) -> f64 {
        let (n0, n1) = self.steps;
        if k < n0 {
            self.t0 + (self.t1 - self.t0) * k as f64 / n0 as f64
        } else if k == n0 {
            self.t1
        } else if k < n0 + n1 {
            self.t1 + (self.t2 - self.t1) * (k - n0) as f64 / n1 as f64
        } else {
            self.t2
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|k| self.time(k)).collect()
    }

    /// Length of step `k`, from node `k` to node `k + 1`.
    pub fn dt(&self, k: usize) -> f64 {
        self.time(k + 1) - self.time(k)
    }

    pub fn max_dt(&self) -> f64 {
        let pre = if self.steps.0 > 0 { (self.t1 - self.t0) / self.steps.0 as f64 } else { 0.0 };
        pre.max((self.t2 - self.t1) / self.steps.1 as f64)
    }
}

/// Tensor grid with uniform spacing on both axes, stored row-major in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x: Grid1D,
    pub y: Grid1D,
}

impl Grid2D {
    pub fn new(x: Grid1D, y: Grid1D) -> Result<Self> {
        for (name, g) in [("x", &x), ("y", &y)] {
            if g.max_spacing() - g.min_spacing() > 1e-9 * g.max_spacing() {
                return Err(Error::InvalidGrid(format!("{name}-axis must be uniform")));
            }
        }
        Ok(Self { x, y })
    }

    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny() + j
    }

    pub fn hx(&self) -> f64 {
        self.x.spacing(0)
    }

    pub fn hy(&self) -> f64 {
        self.y.spacing(0)
    }

    /// A function of `x` repeated along `y`.
    pub fn broadcast_x(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(self.ny()))
            .collect()
    }

    /// Bilinear interpolation, clamped to the grid.
    pub fn interpolate(&self, values: &[f64], x: f64, y: f64) -> f64 {
        self.cell(x, y).eval(values)
    }

    /// The interpolation stencil at `(x, y)`, for reuse across several
    /// fields on the same grid.
    pub fn cell(&self, x: f64, y: f64) -> Cell {
        let (i, tx) = clamp_locate(&self.x, x);
        let (j, ty) = clamp_locate(&self.y, y);
        let (i1, j1) = ((i + 1).min(self.nx() - 1), (j + 1).min(self.ny() - 1));
        Cell {
            corners: [self.index(i, j), self.index(i, j1), self.index(i1, j), self.index(i1, j1)],
            tx,
            ty,
        }
    }
}

/// Bilinear stencil located by [`Grid2D::cell`].
#[derive(Clone, Copy, Debug)]
pub struct Cell {
    corners: [usize; 4],
    tx: f64,
    ty: f64,
}

impl Cell {
    pub fn eval(&self, values: &[f64]) -> f64 {
        let [a, b, c, d] = self.corners.map(|p| values[p]);
        let (tx, ty) = (self.tx, self.ty);
        (1.0 - tx) * ((1.0 - ty) * a + ty * b) + tx * ((1.0 - ty) * c + ty * d)
    }
}

/// Cell index and the weight of the right node, with out-of-grid points
/// projected to the nearest end.
pub(crate) fn clamp_locate(g: &Grid1D, x: f64) -> (usize, f64) {
    let n = g.nodes();
    if x <= n[0] {
        return (0, 0.0);
    }
    if x >= n[n.len() - 1] {
        return (n.len() - 2, 1.0);
    }
    let i = n.partition_point(|&v| v <= x) - 1;
    (i, (x - n[i]) / (n[i + 1] - n[i]))
}

/// State coordinates of the first axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinates {
    /// First axis is the price `x`.
    Price,
    /// First axis is `w = log x`; the generator gains the drift `-σ̃²/2 ∂w`.
    LogPrice,
}

/// Sparse row of the discrete generator at one node, centre first.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 9],
    pub w: [f64; 9],
    pub len: usize,
}

impl Stencil {
    fn centre(p: usize) -> Self {
        let mut s = Self {
            idx: [p; 9],
            w: [0.0; 9],
            len: 1,
        };
        s.idx[0] = p;
        s
    }

    fn add(&mut self, q: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        if let Some(k) = self.idx[..self.len].iter().position(|&v| v == q) {
            self.w[k] += w;
        } else {
            self.idx[self.len] = q;
            self.w[self.len] = w;
            self.len += 1;
        }
    }

    pub fn apply(&self, u: &[f64]) -> f64 {
        (0..self.len).map(|k| self.w[k] * u[self.idx[k]]).sum()
    }
}

/// Discrete `L⁰` on a [`Grid2D`]: positive-coefficient cross stencil,
/// upwinded drifts, and second differences dropped on boundary rows.
#[derive(Clone, Debug)]
pub struct Generator2D {
    pub grid: Grid2D,
    pub coordinates: Coordinates,
    base: Vec<Stencil>,
    /// `τ2` at each node; the control enters as the `y`-drift `τ2 α`.
    tilt: Vec<f64>,
}

impl Generator2D {
    pub fn new(model: &SvmModel, grid: &Grid2D, coordinates: Coordinates) -> Result<Self> {
        let (nx, ny) = (grid.nx(), grid.ny());
        let (hx, hy) = (grid.hx(), grid.hy());
        let mut base = Vec::with_capacity(grid.len());
        let mut tilt = Vec::with_capacity(grid.len());
        for i in 0..nx {
            for j in 0..ny {
                let p = grid.index(i, j);
                let s = grid.x.nodes()[i];
                let y = grid.y.nodes()[j];
                let x = match coordinates {
                    Coordinates::Price => s,
                    Coordinates::LogPrice => s.exp(),
                };
                let st = model.sigma_tilde(y);
                let sig = match coordinates {
                    Coordinates::Price => x * st,
                    Coordinates::LogPrice => st,
                };
                let (t1, t2) = (model.tau1(x, y), model.tau2(x, y));
                let axx = 0.5 * sig * sig;
                let ayy = 0.5 * (t1 * t1 + t2 * t2);
                let axy = sig * t1;
                let dx = match coordinates {
                    Coordinates::Price => 0.0,
                    Coordinates::LogPrice => -0.5 * st * st,
                };
                let dy = model.drift(x, y);
                for v in [axx, ayy, axy, dx, dy, t2] {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!("non-finite coefficient at ({s}, {y})")));
                    }
                }
                let interior_x = i > 0 && i + 1 < nx;
                let interior_y = j > 0 && j + 1 < ny;
                let mut st_p = Stencil::centre(p);
                if interior_x {
                    st_p.add(p - ny, axx / (hx * hx));
                    st_p.add(p + ny, axx / (hx * hx));
                    st_p.add(p, -2.0 * axx / (hx * hx));
                }
                if interior_y {
                    st_p.add(p - 1, ayy / (hy * hy));
                    st_p.add(p + 1, ayy / (hy * hy));
                    st_p.add(p, -2.0 * ayy / (hy * hy));
                }
                if interior_x && interior_y && axy != 0.0 {
                    let c = axy.abs() / (2.0 * hx * hy);
                    if axx / (hx * hx) < c * (1.0 - 1e-12) || ayy / (hy * hy) < c * (1.0 - 1e-12) {
                        return Err(Error::Stencil(format!(
                            "cross term dominates at (x, y) = ({s}, {y}); need {:.3e} <= hy <= {:.3e}",
                            axy.abs() * hx / (2.0 * axx).max(1e-300),
                            2.0 * ayy * hx / axy.abs(),
                        )));
                    }
                    let (d1, d2) = if axy > 0.0 {
                        (p + ny + 1, p - ny - 1)
                    } else {
                        (p + ny - 1, p - ny + 1)
                    };
                    st_p.add(d1, c);
                    st_p.add(d2, c);
                    for q in [p + ny, p - ny, p + 1, p - 1] {
                        st_p.add(q, -c);
                    }
                    st_p.add(p, 2.0 * c);
                }
                if dx != 0.0 && i > 0 {
                    // Drift in w points to lower w; the first column has no
                    // upwind neighbour and is left without it.
                    st_p.add(p - ny, dx.abs() / hx);
                    st_p.add(p, -dx.abs() / hx);
                }
                if dy > 0.0 && j + 1 < ny {
                    st_p.add(p + 1, dy / hy);
                    st_p.add(p, -dy / hy);
                } else if dy < 0.0 && j > 0 {
                    st_p.add(p - 1, -dy / hy);
                    st_p.add(p, dy / hy);
                }
                base.push(st_p);
                tilt.push(t2);
            }
        }
        Ok(Self {
            grid: grid.clone(),
            coordinates,
            base,
            tilt,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn tau2(&self) -> &[f64] {
        &self.tilt
    }

    /// Row at node `p` with the extra `y`-drift `τ2 α`, upwinded.
    pub(crate) fn row(&self, p: usize, alpha: f64) -> Stencil {
        let mut s = self.base[p];
        let e = self.tilt[p] * alpha;
        if e != 0.0 {
            let hy = self.grid.hy();
            let j = p % self.grid.ny();
            if e > 0.0 && j + 1 < self.grid.ny() {
                s.add(p + 1, e / hy);
                s.add(p, -e / hy);
            } else if e < 0.0 && j > 0 {
                s.add(p - 1, -e / hy);
                s.add(p, e / hy);
            }
        }
        s
    }

    /// Largest decay rate of the uncontrolled stencil; explicit steps need
    /// `dt` below its reciprocal.
    pub fn max_rate(&self) -> f64 {
        self.base.iter().map(|s| -s.w[0]).fold(0.0, f64::max)
    }

    /// Godunov choice of the control at node `p` for the Hamiltonian
    /// `min_α {τ2 α ∂y u + α²/2}`: the one-sided difference in the
    /// direction of the resulting drift. Flat or uphill-both-ways data give
    /// `α = 0`.
    fn godunov(&self, p: usize, u: &[f64]) -> f64 {
        let k = self.tilt[p];
        if k == 0.0 {
            return 0.0;
        }
        let ny = self.grid.ny();
        let hy = self.grid.hy();
        let j = p % ny;
        let fwd = if j + 1 < ny { (u[p + 1] - u[p]) / hy } else { 0.0 };
        let bwd = if j > 0 { (u[p] - u[p - 1]) / hy } else { 0.0 };
        let f = if fwd < 0.0 { fwd * fwd } else { 0.0 };
        let b = if bwd > 0.0 { bwd * bwd } else { 0.0 };
        if f == 0.0 && b == 0.0 {
            0.0
        } else if f >= b {
            -k * fwd
        } else {
            -k * bwd
        }
    }

    /// One backward step: `u_new = u + dt (L⁰u + min_α{...})`. Returns the
    /// new layer, the controls and the largest `dt × rate`.
    fn backward_step(&self, u: &[f64], dt: f64, controlled: bool) -> (Vec<f64>, Vec<f64>, f64) {
        let node = |p: usize| {
            let alpha = if controlled { self.godunov(p, u) } else { 0.0 };
            let row = self.row(p, alpha);
            (u[p] + dt * (row.apply(u) + 0.5 * alpha * alpha), alpha, -dt * row.w[0])
        };
        let out: Vec<(f64, f64, f64)> = if self.len() >= 4096 {
            (0..self.len()).into_par_iter().map(node).collect()
        } else {
            (0..self.len()).map(node).collect()
        };
        let mut v = Vec::with_capacity(out.len());
        let mut a = Vec::with_capacity(out.len());
        let mut cfl: f64 = 0.0;
        for (x, al, c) in out {
            v.push(x);
            a.push(al);
            cfl = cfl.max(c);
        }
        (v, a, cfl)
    }
}

/// Space on which a solution lives.
#[derive(Clone, Debug, Serialize)]
pub enum Space {
    Line(Grid1D),
    Plane(Grid2D),
}

/// Meaning of [`HjSolution::controls`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ControlKind {
    /// `b(t, x) = -H'(D²u/2)`, the squared volatility.
    Diffusion,
    /// `α(t, x, y) = -τ2 ∂y u`.
    Tilt,
}

#[derive(Clone, Debug, Serialize)]
pub struct HjSolution {
    pub time: TimeGrid,
    pub space: Space,
    /// One layer per time node, with `u(T1-)` and `u(T1+)` both stored.
    pub layers: Vec<Vec<f64>>,
    /// Control used on step `k`, from node `k` to node `k + 1`.
    pub controls: Vec<Vec<f64>>,
    pub control_kind: ControlKind,
    /// Largest `dt × (decay rate)` met; at most one for a monotone sweep.
    pub cfl_number: f64,
    /// `max |u(T1-) - u1 - u(T1+)|`.
    pub jump_residual: f64,
}

#[derive(Serialize)]
struct HjMeta<'a> {
    time: &'a TimeGrid,
    space: &'a Space,
    control_kind: ControlKind,
    cfl_number: f64,
    jump_residual: f64,
}

impl HjSolution {
    /// Left limit at node `k`; at `T1` this is `u(T1-)`.
    pub fn before(&self, k: usize) -> &[f64] {
        let j = self.time.jump_node();
        if k <= j {
            &self.layers[k]
        } else {
            &self.layers[k + 1]
        }
    }

    /// Right limit at node `k`; at `T1` this is `u(T1+)`.
    pub fn after(&self, k: usize) -> &[f64] {
        let j = self.time.jump_node();
        if k < j {
            &self.layers[k]
        } else {
            &self.layers[k + 1]
        }
    }

    /// `u(t0)`, the left limit when `t0 = T1`.
    pub fn initial(&self) -> &[f64] {
        self.before(0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows `t, x[, y], u`; `T1` appears twice, left limit first.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let j = self.time.jump_node();
        let times: Vec<f64> = (0..self.layers.len())
            .map(|l| self.time.time(if l <= j { l } else { l - 1 }))
            .collect();
        match &self.space {
            Space::Line(g) => {
                writeln!(w, "t,x,u")?;
                for (t, layer) in times.iter().zip(&self.layers) {
                    for (x, u) in g.nodes().iter().zip(layer) {
                        writeln!(w, "{t},{x},{u}")?;
                    }
                }
            }
            Space::Plane(g) => {
                writeln!(w, "t,x,y,u")?;
                for (t, layer) in times.iter().zip(&self.layers) {
                    for (i, x) in g.x.nodes().iter().enumerate() {
                        for (jj, y) in g.y.nodes().iter().enumerate() {
                            writeln!(w, "{t},{x},{y},{}", layer[g.index(i, jj)])?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn metadata_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&HjMeta {
            time: &self.time,
            space: &self.space,
            control_kind: self.control_kind,
            cfl_number: self.cfl_number,
            jump_residual: self.jump_residual,
        })?)
    }
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::GridMismatch(format!("{name} has {} values for {n} nodes", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "potential",
            value: f64::NAN,
            constraint: format!("{name} must be finite"),
        });
    }
    Ok(())
}

/// Stable step for the centred second difference with controls up to `b_max`.
pub fn mot_stable_dt(grid: &Grid1D, b_max: f64) -> f64 {
    let n = grid.nodes();
    let rate = (1..n.len() - 1)
        .map(|i| b_max / ((n[i] - n[i - 1]) * (n[i + 1] - n[i])))
        .fold(0.0, f64::max);
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Centred second difference, zero on the two end nodes.
pub(crate) fn second_difference(grid: &Grid1D, u: &[f64], i: usize) -> f64 {
    let n = grid.nodes();
    if i == 0 || i + 1 == n.len() {
        return 0.0;
    }
    let (hl, hr) = (n[i] - n[i - 1], n[i + 1] - n[i]);
    2.0 / (hl + hr) * ((u[i + 1] - u[i]) / hr - (u[i] - u[i - 1]) / hl)
}

/// MOT dual equation `-∂t u + H(D²u/2) = δ_{T1} u1`, `u(T2) = u2`, on a line.
pub fn solve_hj_mot(h: &Hamiltonian, u1: &[f64], u2: &[f64], grid: &Grid1D, tg: &TimeGrid) -> Result<HjSolution> {
    let n = grid.len();
    check_len("u1", u1, n)?;
    check_len("u2", u2, n)?;
    let stable = mot_stable_dt(grid, h.max_control());
    if tg.max_dt() > stable * (1.0 + 1e-12) {
        return Err(Error::Cfl {
            dt: tg.max_dt(),
            required_dt: stable,
        });
    }
    let steps = tg.n_steps();
    let jump = tg.jump_node();
    let mut layers_rev = vec![u2.to_vec()];
    let mut controls_rev = Vec::with_capacity(steps);
    let mut jump_residual: f64 = 0.0;
    let mut cfl: f64 = 0.0;
    let nodes = grid.nodes();
    for k in (0..steps).rev() {
        let dt = tg.dt(k);
        let u = layers_rev.last().expect("nonempty");
        let mut next = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let d2 = second_difference(grid, u, i);
            let (bi, _) = h.control_value(0.5 * d2)?;
            next.push(u[i] + dt * (0.5 * bi * d2 + h.spec().eval(bi)));
            if i > 0 && i + 1 < n {
                cfl = cfl.max(dt * bi / ((nodes[i] - nodes[i - 1]) * (nodes[i + 1] - nodes[i])));
            }
            b.push(bi);
        }
        controls_rev.push(b);
        if k == jump {
            let minus: Vec<f64> = u1.iter().zip(&next).map(|(a, c)| a + c).collect();
            for i in 0..n {
                jump_residual = jump_residual.max((minus[i] - u1[i] - next[i]).abs());
            }
            layers_rev.push(next);
            layers_rev.push(minus);
        } else {
            layers_rev.push(next);
        }
    }
    layers_rev.reverse();
    controls_rev.reverse();
    Ok(HjSolution {
        time: tg.clone(),
        space: Space::Line(grid.clone()),
        layers: layers_rev,
        controls: controls_rev,
        control_kind: ControlKind::Diffusion,
        cfl_number: cfl,
        jump_residual,
    })
}

fn solve_plane(
    generator: &Generator2D,
    terminal: Vec<f64>,
    jump: Option<&[f64]>,
    tg: &TimeGrid,
    controlled: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64, f64)> {
    let steps = tg.n_steps();
    let jn = tg.jump_node();
    let mut layers_rev = vec![terminal];
    let mut controls_rev = Vec::with_capacity(steps);
    let mut jump_residual: f64 = 0.0;
    let mut cfl: f64 = 0.0;
    for k in (0..steps).rev() {
        let dt = tg.dt(k);
        let (next, alpha, c) = generator.backward_step(layers_rev.last().expect("nonempty"), dt, controlled);
        if c > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                dt,
                required_dt: dt / c,
            });
        }
        cfl = cfl.max(c);
        controls_rev.push(alpha);
        match jump {
            Some(u1) if k == jn => {
                let minus: Vec<f64> = u1.iter().zip(&next).map(|(a, c)| a + c).collect();
                for p in 0..minus.len() {
                    jump_residual = jump_residual.max((minus[p] - u1[p] - next[p]).abs());
                }
                layers_rev.push(next);
                layers_rev.push(minus);
            }
            None if k == jn => {
                let copy = next.clone();
                layers_rev.push(next);
                layers_rev.push(copy);
            }
            _ => layers_rev.push(next),
        }
    }
    layers_rev.reverse();
    controls_rev.reverse();
    Ok((layers_rev, controls_rev, cfl, jump_residual))
}

/// Bridge dual equation `-∂t u - L⁰u + ½τ2²(∂y u)² = δ_{T1} u1(x)`,
/// `u(T2) = u2(x)`, on the `(x, y)` grid. `u1`, `u2` are given on the `x` axis.
pub fn solve_hj_sb(model: &SvmModel, u1: &[f64], u2: &[f64], grid: &Grid2D, tg: &TimeGrid) -> Result<HjSolution> {
    check_len("u1", u1, grid.nx())?;
    check_len("u2", u2, grid.nx())?;
    let generator = Generator2D::new(model, grid, Coordinates::Price)?;
    solve_hj_sb_with(&generator, u1, u2, tg)
}

/// [`solve_hj_sb`] with a prebuilt generator.
pub fn solve_hj_sb_with(generator: &Generator2D, u1: &[f64], u2: &[f64], tg: &TimeGrid) -> Result<HjSolution> {
    let grid = &generator.grid;
    check_len("u1", u1, grid.nx())?;
    check_len("u2", u2, grid.nx())?;
    let u1b = grid.broadcast_x(u1);
    let (layers, controls, cfl_number, jump_residual) =
        solve_plane(generator, grid.broadcast_x(u2), Some(&u1b), tg, true)?;
    Ok(HjSolution {
        time: tg.clone(),
        space: Space::Plane(grid.clone()),
        layers,
        controls,
        control_kind: ControlKind::Tilt,
        cfl_number,
        jump_residual,
    })
}

/// Tolerance for the domain-doubling test of [`solve_hj_vix_post`].
#[derive(Clone, Copy, Debug)]
pub struct DomainCheck {
    /// `w`-interval on which the two solutions are compared.
    pub window: (f64, f64),
    pub tolerance: f64,
}

/// Post-`T1` VIX' equation in `w = log x`: terminal data `u2(e^w) - δw`
/// and generator with drift `-σ̃²/2 ∂w`. The layers cover `[T1, T2]` and
/// `controls` holds the tilt `α`.
pub fn solve_hj_vix_post(
    model: &SvmModel,
    u2: &dyn Fn(f64) -> f64,
    delta: f64,
    wgrid: &Grid1D,
    ygrid: &Grid1D,
    tg: &TimeGrid,
    check: Option<DomainCheck>,
) -> Result<HjSolution> {
    let grid = Grid2D::new(wgrid.clone(), ygrid.clone())?;
    let generator = Generator2D::new(model, &grid, Coordinates::LogPrice)?;
    let sol = vix_post_with(&generator, u2, delta, &tg.post())?;
    if let Some(chk) = check {
        let extra = (wgrid.len() - 1) / 2;
        let wide = Grid2D::new(wgrid.extended(extra), ygrid.clone())?;
        let wide_gen = Generator2D::new(model, &wide, Coordinates::LogPrice)?;
        let wide_sol = vix_post_with(&wide_gen, u2, delta, &tg.post())?;
        let a = sol.after(0);
        let b = wide_sol.after(0);
        let mut disc: f64 = 0.0;
        for (i, &w) in wgrid.nodes().iter().enumerate() {
            if w < chk.window.0 || w > chk.window.1 {
                continue;
            }
            for (j, &y) in ygrid.nodes().iter().enumerate() {
                disc = disc.max((a[grid.index(i, j)] - wide.interpolate(b, w, y)).abs());
            }
        }
        if disc > chk.tolerance {
            return Err(Error::EnlargeDomain {
                discrepancy: disc,
                tolerance: chk.tolerance,
            });
        }
    }
    Ok(sol)
}

/// [`solve_hj_vix_post`] with a prebuilt log-coordinate generator, on `tg`
/// taken as a grid over `[T1, T2]`.
pub fn vix_post_with(generator: &Generator2D, u2: &dyn Fn(f64) -> f64, delta: f64, tg: &TimeGrid) -> Result<HjSolution> {
    if generator.coordinates != Coordinates::LogPrice {
        return Err(Error::GridMismatch("VIX' solve needs log-price coordinates".into()));
    }
    crate::error::ensure_finite("delta", delta)?;
    let grid = &generator.grid;
    let terminal: Vec<f64> = grid
        .x
        .nodes()
        .iter()
        .flat_map(|&w| {
            let v = u2(w.exp()) - delta * w;
            std::iter::repeat(v).take(grid.ny())
        })
        .collect();
    let (layers, controls, cfl_number, _) = solve_plane(generator, terminal, None, tg, true)?;
    Ok(HjSolution {
        time: tg.clone(),
        space: Space::Plane(grid.clone()),
        layers,
        controls,
        control_kind: ControlKind::Tilt,
        cfl_number,
        jump_residual: 0.0,
    })
}

/// Uncontrolled backward solve `-∂t u - L⁰u = 0`, `u(end) = terminal`, on
/// `tg` taken as a grid over `[T1, T2]`: the reference expectation of the
/// terminal data.
pub fn expectation_post(generator: &Generator2D, terminal: Vec<f64>, tg: &TimeGrid) -> Result<HjSolution> {
    if terminal.len() != generator.len() {
        return Err(Error::GridMismatch("terminal data does not match the grid".into()));
    }
    let (layers, controls, cfl_number, _) = solve_plane(generator, terminal, None, tg, false)?;
    Ok(HjSolution {
        time: tg.clone(),
        space: Space::Plane(generator.grid.clone()),
        layers,
        controls,
        control_kind: ControlKind::Tilt,
        cfl_number,
        jump_residual: 0.0,
    })
}

/// `max |u(t, w, y)| / (1 + |w|)` over the solution, the constant of the
/// logarithmic growth bound in price coordinates.
pub fn log_growth_constant(sol: &HjSolution) -> f64 {
    let Space::Plane(g) = &sol.space else {
        return f64::NAN;
    };
    let mut c: f64 = 0.0;
    for layer in &sol.layers {
        for (i, &w) in g.x.nodes().iter().enumerate() {
            for j in 0..g.ny() {
                c = c.max(layer[g.index(i, j)].abs() / (1.0 + w.abs()));
            }
        }
    }
    c
}

/// Pre-`T1` piece of the VIX' dual: `-∂t v - L⁰_{w,y} v + ½τ2²(∂y v)² = 0`
/// on `[t0, T1]` with `v(T1) = terminal`. The returned solution lives on the
/// grid `(t0, t0, T1)`, so node `k` is `t0 + k dt`.
pub fn solve_hj_vix_pre(generator: &Generator2D, terminal: Vec<f64>, tg: &TimeGrid) -> Result<HjSolution> {
    if tg.steps.0 == 0 {
        return Err(Error::InvalidGrid("pre-T1 solve needs t0 < T1".into()));
    }
    if terminal.len() != generator.len() {
        return Err(Error::GridMismatch("terminal data does not match the grid".into()));
    }
    let pre = TimeGrid::new(tg.t0, tg.t0, tg.t1, (0, tg.steps.0))?;
    let (layers, controls, cfl_number, _) = solve_plane(generator, terminal, None, &pre, true)?;
    Ok(HjSolution {
        time: pre,
        space: Space::Plane(generator.grid.clone()),
        layers,
        controls,
        control_kind: ControlKind::Tilt,
        cfl_number,
        jump_residual: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{legendre, symmetric_a_grid, Lagrangian, LagrangianSpec};
    use crate::svm_models::make_heston;
    use proptest::prelude::*;

    fn quad_h() -> Hamiltonian {
        let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 20.0, 1001).unwrap();
        legendre(&spec, &symmetric_a_grid(30.0, 601), 20.0, 2001).unwrap()
    }

    fn line() -> Grid1D {
        Grid1D::uniform(-3.0, 3.0, 41).unwrap()
    }

    fn mot_grid(grid: &Grid1D, h: &Hamiltonian) -> TimeGrid {
        let dt = 0.9 * mot_stable_dt(grid, h.max_control());
        TimeGrid::with_max_step(0.0, 0.5, 1.0, dt).unwrap()
    }

    #[test]
    fn time_grid_nodes() {
        let tg = TimeGrid::new(0.0, 0.3, 1.0, (3, 7)).unwrap();
        assert_eq!(tg.time(3), 0.3);
        assert_eq!(tg.time(10), 1.0);
        assert_eq!(tg.nodes().len(), 11);
        assert!(TimeGrid::new(0.0, 1.0, 1.0, (3, 1)).is_err());
        assert!(TimeGrid::new(0.3, 0.3, 1.0, (2, 1)).is_err());
        let post = tg.post();
        assert_eq!(post.n_steps(), 7);
        assert_eq!(post.time(0), 0.3);
    }

    #[test]
    fn constant_terminal_is_preserved() {
        let h = quad_h();
        let g = line();
        let tg = mot_grid(&g, &h);
        let sol = solve_hj_mot(&h, &vec![0.0; 41], &vec![2.5; 41], &g, &tg).unwrap();
        for l in &sol.layers {
            assert!(l.iter().all(|&v| (v - 2.5).abs() < 1e-14));
        }
    }

    #[test]
    fn constant_jump_only() {
        let h = quad_h();
        let g = line();
        let tg = mot_grid(&g, &h);
        let sol = solve_hj_mot(&h, &vec![1.5; 41], &vec![0.0; 41], &g, &tg).unwrap();
        let j = tg.jump_node();
        for k in 0..=tg.n_steps() {
            let expect_before = if k <= j { 1.5 } else { 0.0 };
            let expect_after = if k < j { 1.5 } else { 0.0 };
            assert!(sol.before(k).iter().all(|&v| (v - expect_before).abs() < 1e-14));
            assert!(sol.after(k).iter().all(|&v| (v - expect_after).abs() < 1e-14));
        }
        assert!(sol.jump_residual < 1e-15);
    }

    #[test]
    fn linear_terminal_is_preserved() {
        let h = quad_h();
        let g = line();
        let tg = mot_grid(&g, &h);
        let u2 = g.map(|x| x);
        let sol = solve_hj_mot(&h, &vec![0.0; 41], &u2, &g, &tg).unwrap();
        for (a, x) in sol.initial().iter().zip(g.nodes()) {
            assert!((a - x).abs() < 1e-12);
        }
        assert!(sol.controls.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn cfl_violation_reports_step() {
        let h = quad_h();
        let g = line();
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (2, 2)).unwrap();
        match solve_hj_mot(&h, &vec![0.0; 41], &vec![0.0; 41], &g, &tg) {
            Err(Error::Cfl { dt, required_dt }) => assert!(required_dt < dt),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn table_range_is_enforced() {
        let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 5.0, 101).unwrap();
        let h = legendre(&spec, &symmetric_a_grid(1.0, 21), 5.0, 501).unwrap();
        let g = line();
        let tg = mot_grid(&g, &h);
        let u2 = g.map(|x| -10.0 * x.abs());
        assert!(matches!(
            solve_hj_mot(&h, &vec![0.0; 41], &u2, &g, &tg),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn maximum_principle_and_nonnegative_control() {
        let h = quad_h();
        let g = line();
        let tg = mot_grid(&g, &h);
        let u1 = g.map(|x| (2.0 * x).sin());
        let u2 = g.map(|x| -(-x * x).exp());
        let sol = solve_hj_mot(&h, &u1, &u2, &g, &tg).unwrap();
        let lo = u2.iter().cloned().fold(f64::INFINITY, f64::min) + u1.iter().cloned().fold(0.0, f64::min);
        let hi = u2.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + u1.iter().cloned().fold(0.0, f64::max);
        for l in &sol.layers {
            assert!(l.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
        assert!(sol.controls.iter().flatten().all(|&b| b >= 0.0));
        assert!(sol.jump_residual <= 1e-15);
        assert!(sol.cfl_number <= 1.0);
    }

    #[test]
    fn refinement_is_cauchy() {
        let h = quad_h();
        let u2f = |x: f64| -(-x * x).exp();
        let solve = |n: usize| {
            let g = Grid1D::uniform(-3.0, 3.0, n).unwrap();
            let tg = mot_grid(&g, &h);
            let sol = solve_hj_mot(&h, &vec![0.0; n], &g.map(u2f), &g, &tg).unwrap();
            (g, sol.initial().to_vec())
        };
        let (_, a) = solve(21);
        let (gb, b) = solve(41);
        let (gc, c) = solve(81);
        let diff = |f: &Grid1D, fine: &[f64], coarse: &[f64]| {
            coarse
                .iter()
                .enumerate()
                .map(|(i, v)| (fine[f.find_node(f.nodes()[0] + 0.0, 0.0).unwrap() + 2 * i] - v).abs())
                .fold(0.0, f64::max)
        };
        let d1 = diff(&gb, &b, &a);
        let d2 = diff(&gc, &c, &b);
        assert!(d1 >= 1.5 * d2, "{d1} {d2}");
    }

    fn heston_grid() -> (SvmModel, Grid2D) {
        let m = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap();
        let g = Grid2D::new(Grid1D::uniform(0.5, 1.5, 41).unwrap(), Grid1D::uniform(0.01, 0.13, 13).unwrap()).unwrap();
        (m, g)
    }

    fn plane_time(gen: &Generator2D, t0: f64, t1: f64, t2: f64) -> TimeGrid {
        TimeGrid::with_max_step(t0, t1, t2, 0.5 / gen.max_rate()).unwrap()
    }

    #[test]
    fn bridge_zero_and_linear_data() {
        let (m, g) = heston_grid();
        let gen = Generator2D::new(&m, &g, Coordinates::Price).unwrap();
        let tg = plane_time(&gen, 0.0, 0.25, 0.5);
        let zero = vec![0.0; g.nx()];
        let sol = solve_hj_sb(&m, &zero, &zero, &g, &tg).unwrap();
        assert!(sol.sup_norm() == 0.0);
        assert!(sol.controls.iter().flatten().all(|&a| a == 0.0));
        let lin = g.x.map(|x| x);
        let sol = solve_hj_sb(&m, &zero, &lin, &g, &tg).unwrap();
        let u0 = sol.initial();
        for (i, &x) in g.x.nodes().iter().enumerate() {
            for j in 0..g.ny() {
                assert!((u0[g.index(i, j)] - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bridge_bump_is_bounded_and_converges() {
        let m = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap();
        let bump = |x: f64| 0.5 * (-((x - 1.0) / 0.15).powi(2)).exp();
        let solve = |nx: usize, ny: usize| {
            let g = Grid2D::new(Grid1D::uniform(0.5, 1.5, nx).unwrap(), Grid1D::uniform(0.01, 0.13, ny).unwrap()).unwrap();
            let gen = Generator2D::new(&m, &g, Coordinates::Price).unwrap();
            let tg = plane_time(&gen, 0.0, 0.25, 0.5);
            let u2 = g.x.map(bump);
            let sol = solve_hj_sb_with(&gen, &vec![0.0; nx], &u2, &tg).unwrap();
            assert!(sol.sup_norm() <= 0.5 + 1e-12);
            (g, sol.initial().to_vec())
        };
        let (g1, a) = solve(21, 7);
        let (g2, b) = solve(41, 13);
        let (g3, c) = solve(81, 25);
        let gap = |gc: &Grid2D, coarse: &[f64], gf: &Grid2D, fine: &[f64]| {
            let mut d: f64 = 0.0;
            for (i, &x) in gc.x.nodes().iter().enumerate() {
                for (j, &y) in gc.y.nodes().iter().enumerate() {
                    d = d.max((coarse[gc.index(i, j)] - gf.interpolate(fine, x, y)).abs());
                }
            }
            d
        };
        let d1 = gap(&g1, &a, &g3, &c);
        let d2 = gap(&g2, &b, &g3, &c);
        assert!(d2 < d1, "{d1} {d2}");
    }

    #[test]
    fn cross_window_is_checked() {
        let m = make_heston(1.0, 0.04, 0.5, -0.9, (0.01, 1.0)).unwrap();
        let g = Grid2D::new(Grid1D::uniform(0.5, 1.5, 41).unwrap(), Grid1D::uniform(0.01, 0.5, 5).unwrap()).unwrap();
        assert!(matches!(Generator2D::new(&m, &g, Coordinates::Price), Err(Error::Stencil(_))));
    }

    fn vix_setup(s: f64) -> (SvmModel, Grid1D, Grid1D, TimeGrid) {
        let m = SvmModel::Constant {
            sigma_tilde: s,
            b: 0.0,
            tau1: 0.0,
            tau2: 0.3,
        };
        let w = Grid1D::uniform(-1.0, 1.0, 41).unwrap();
        let y = Grid1D::uniform(-0.5, 0.5, 11).unwrap();
        let tg = TimeGrid::new(0.0, 0.1, 0.2, (10, 40)).unwrap();
        (m, w, y, tg)
    }

    #[test]
    fn vix_post_zero() {
        let (m, w, y, tg) = vix_setup(0.2);
        let sol = solve_hj_vix_post(&m, &|_| 0.0, 0.0, &w, &y, &tg, None).unwrap();
        assert_eq!(sol.sup_norm(), 0.0);
    }

    #[test]
    fn vix_post_affine_solution() {
        let s = 0.2;
        let delta = 1.7;
        let (m, w, y, tg) = vix_setup(s);
        let sol = solve_hj_vix_post(&m, &|_| 0.0, delta, &w, &y, &tg, None).unwrap();
        let g = Grid2D::new(w.clone(), y.clone()).unwrap();
        let post = tg.post();
        // The first column has no upwind neighbour and keeps its terminal
        // value. The scheme is exact until that reaches a node, one column
        // per step, and stays monotone: below the exact value by at most
        // the boundary's own error.
        for k in 0..=post.n_steps() {
            let t = post.time(k);
            let reached = post.n_steps() - k;
            let lag = delta * s * s * (tg.t2 - t) / 2.0;
            for (i, &wi) in w.nodes().iter().enumerate() {
                for j in 0..y.len() {
                    let exact = -delta * wi + delta * s * s * (tg.t2 - t) / 2.0;
                    let u = sol.after(k)[g.index(i, j)];
                    if i > reached {
                        assert!((u - exact).abs() < 1e-12);
                    }
                    assert!(u <= exact + 1e-12 && u >= exact - lag - 1e-12);
                }
            }
        }
        assert!(log_growth_constant(&sol) <= delta + delta * s * s * 0.1);
    }

    #[test]
    fn vix_post_is_continuous_in_delta() {
        let (m, w, y, tg) = vix_setup(0.2);
        let u2 = |x: f64| (x - 1.0).abs();
        let a = solve_hj_vix_post(&m, &u2, 0.5, &w, &y, &tg, None).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let b = solve_hj_vix_post(&m, &u2, 0.5 + eps, &w, &y, &tg, None).unwrap();
            let d = a.after(0).iter().zip(b.after(0)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < last);
            assert!(d <= eps * (1.0 + 0.04 * 0.1 / 2.0) + 1e-12, "{eps} {d}");
            last = d;
        }
    }

    #[test]
    fn vix_domain_doubling() {
        let (m, w, y, tg) = vix_setup(0.2);
        let u2 = |x: f64| (x - 1.0).abs();
        let chk = DomainCheck {
            window: (-0.25, 0.25),
            tolerance: 1e-6,
        };
        assert!(solve_hj_vix_post(&m, &u2, 0.5, &w, &y, &tg, Some(chk)).is_ok());
        let narrow = Grid1D::uniform(-0.1, 0.1, 11).unwrap();
        let tight = DomainCheck {
            window: (-0.05, 0.05),
            tolerance: 1e-9,
        };
        let tg = TimeGrid::new(0.0, 0.1, 1.1, (10, 400)).unwrap();
        assert!(matches!(
            solve_hj_vix_post(&m, &u2, 0.5, &narrow, &y, &tg, Some(tight)),
            Err(Error::EnlargeDomain { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn comparison_principle(
            slopes in proptest::collection::vec(-1.0f64..1.0, 41),
            bump in proptest::collection::vec(0.0f64..0.05, 41),
            jump_slopes in proptest::collection::vec(-1.0f64..1.0, 41),
        ) {
            let h = quad_h();
            let g = line();
            let tg = mot_grid(&g, &h);
            let path = |s: &[f64]| s.iter().scan(0.0, |acc, v| { *acc += 0.15 * v; Some(*acc) }).collect::<Vec<f64>>();
            let a = path(&slopes);
            let u1 = path(&jump_slopes);
            let hi: Vec<f64> = a.iter().zip(&bump).map(|(x, y)| x + y).collect();
            let lo_sol = solve_hj_mot(&h, &u1, &a, &g, &tg).unwrap();
            let hi_sol = solve_hj_mot(&h, &u1, &hi, &g, &tg).unwrap();
            for (l, u) in lo_sol.initial().iter().zip(hi_sol.initial()) {
                prop_assert!(*l <= *u + 1e-9);
            }
        }
    }
}
