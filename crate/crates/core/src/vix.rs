//! Joint SPX/VIX' dual: the `δ`-family of post-`T1` solves in log-price
//! coordinates, the envelope `Φ`, the pre-`T1` value and the dual value,
//! with the VIX index and the put-price bound of the log-contract order.
//!
//! `Φ(x, y) = inf_{v >= 0} sup_δ {u3(v) - δ(v - log x) + u(T1+, x, y; δ)}`.
//! On the grid the sup runs over the `δ`-nodes. For fixed `(x, y)` it is a
//! convex piecewise-linear function of `v`, as is `u3`, so the inf is taken
//! exactly over their breakpoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hj_solver::{expectation_post, solve_hj_vix_post, solve_hj_vix_pre, vix_post_with, Coordinates, DomainCheck, Generator2D, Grid2D, HjSolution, TimeGrid};
use crate::measures::{convex_order, Grid1D, GridMeasure};
use crate::svm_models::SvmSpec;

/// Marginals of the price at `T1`, `T2` and of the log-contract at `T1`.
#[derive(Clone, Debug)]
pub struct VixInstance {
    pub spec: SvmSpec,
    pub mu1: GridMeasure,
    pub mu2: GridMeasure,
    /// Law bounding the conditional log-contract `V`, on `[0, inf)`.
    pub mu3: GridMeasure,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
}

impl VixInstance {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1 && self.t1 < self.t2) {
            return Err(Error::InvalidGrid(format!("need t0 < T1 < T2, got {}, {}, {}", self.t0, self.t1, self.t2)));
        }
        if !(self.spec.x0 > 0.0) {
            return Err(Error::Domain(format!("initial price must be positive, got {}", self.spec.x0)));
        }
        if self.mu3.support().any(|(v, _)| v < 0.0) {
            return Err(Error::InvalidMeasure("mu3 must live on [0, inf)".into()));
        }
        if self.mu1.support().chain(self.mu2.support()).any(|(x, _)| x <= 0.0) {
            return Err(Error::InvalidMeasure("price marginals must live on (0, inf)".into()));
        }
        let r = convex_order(&self.mu1, &self.mu2);
        if !r.holds {
            return Err(Error::Infeasible(format!(
                "mu1 <= mu2 fails: violation {:.3e} at strike {:?}",
                r.max_violation, r.worst_strike
            )));
        }
        Ok(())
    }

    pub fn tenor(&self) -> f64 {
        self.t2 - self.t1
    }
}

/// Convex piecewise-linear function on `[0, inf)`: value `value0` at 0 and
/// slope `slopes[i]` on `[knots[i], knots[i + 1]]`, the last slope
/// continuing past the last knot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexPiecewise {
    pub knots: Vec<f64>,
    pub value0: f64,
    pub slopes: Vec<f64>,
}

impl ConvexPiecewise {
    pub fn new(knots: Vec<f64>, value0: f64, slopes: Vec<f64>) -> Result<Self> {
        if knots.first() != Some(&0.0) || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("knots must start at 0 and increase".into()));
        }
        if slopes.len() != knots.len() {
            return Err(Error::GridMismatch(format!("{} slopes for {} knots", slopes.len(), knots.len())));
        }
        if slopes.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter {
                name: "slopes",
                value: f64::NAN,
                constraint: "must be nondecreasing for convexity".into(),
            });
        }
        if slopes.last().is_some_and(|&s| s < 0.0) {
            return Err(Error::InvalidParameter {
                name: "slopes",
                value: *slopes.last().expect("nonempty"),
                constraint: "last slope must be nonnegative for a lower bound".into(),
            });
        }
        if !value0.is_finite() || slopes.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "u3",
                value: value0,
                constraint: "must be finite".into(),
            });
        }
        Ok(Self { knots, value0, slopes })
    }

    pub fn zero() -> Self {
        Self {
            knots: vec![0.0],
            value0: 0.0,
            slopes: vec![0.0],
        }
    }

    pub fn constant(c: f64) -> Self {
        Self { value0: c, ..Self::zero() }
    }

    /// `k |v - v0|` for `v0 > 0`.
    pub fn wedge(v0: f64, k: f64) -> Result<Self> {
        Self::new(vec![0.0, v0], k * v0, vec![-k, k])
    }

    /// Nearest convex, lower-bounded slope sequence: pool-adjacent-violators
    /// weighted by interval length, then the last block floored at 0.
    pub fn projected(knots: Vec<f64>, value0: f64, raw: &[f64]) -> Result<Self> {
        let n = raw.len();
        let len = |i: usize| if i + 1 < knots.len() { knots[i + 1] - knots[i] } else { 1.0 };
        let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
        for (i, &s) in raw.iter().enumerate() {
            blocks.push((s, len(i.min(knots.len().saturating_sub(1))), 1));
            while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
                let (s2, w2, c2) = blocks.pop().expect("two blocks");
                let (s1, w1, c1) = blocks.pop().expect("two blocks");
                blocks.push(((s1 * w1 + s2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
            }
        }
        let mut slopes = Vec::with_capacity(n);
        for (s, _, c) in blocks {
            slopes.extend(std::iter::repeat(s).take(c));
        }
        if let Some(last) = slopes.last().copied() {
            if last < 0.0 {
                let k = slopes.iter().position(|&s| s == last).expect("present");
                slopes[k..].iter_mut().for_each(|s| *s = 0.0);
            }
        }
        Self::new(knots, value0, slopes)
    }

    pub fn eval(&self, v: f64) -> f64 {
        let mut acc = self.value0;
        for i in 0..self.knots.len() {
            let start = self.knots[i];
            let end = self.knots.get(i + 1).copied().unwrap_or(f64::INFINITY);
            if v <= start {
                break;
            }
            acc += self.slopes[i] * (v.min(end) - start);
        }
        acc
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            value0: self.value0 + c,
            ..self.clone()
        }
    }

    /// Minimum over `[0, hi]`, attained at a knot or an end.
    pub fn min_on(&self, hi: f64) -> f64 {
        self.knots
            .iter()
            .copied()
            .filter(|&k| k <= hi)
            .chain([hi])
            .map(|v| self.eval(v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn integrate(&self, mu: &GridMeasure) -> f64 {
        mu.expect(|v| self.eval(v))
    }
}

/// Grids of the VIX' solves: `(w = log x, y)` plane, `δ` and `v` nodes, and
/// the time grid `t0 < T1 < T2`.
#[derive(Clone, Debug)]
pub struct VixGrids {
    pub w: Grid1D,
    pub y: Grid1D,
    pub deltas: Vec<f64>,
    /// Number of uniform `v` nodes on `[0, v_max]`.
    pub v_nodes: usize,
    pub v_max: f64,
    pub time: TimeGrid,
    pub domain_check: Option<DomainCheck>,
}

impl VixGrids {
    /// `δ` in `[-delta_max, delta_max]` with `n_delta` nodes (odd, so 0 is a
    /// node), `v_max = 1.05 σ̃²_max (T2 - T1) / 2`, steps at `cfl` times the
    /// stable step of the log generator.
    pub fn new(inst: &VixInstance, w: Grid1D, y: Grid1D, delta_max: f64, n_delta: usize, v_nodes: usize, cfl: f64) -> Result<Self> {
        if n_delta < 3 || n_delta % 2 == 0 || !(delta_max > 0.0) {
            return Err(Error::InvalidGrid("delta grid needs an odd node count >= 3 and a positive half-width".into()));
        }
        let deltas = (0..n_delta)
            .map(|i| {
                let k = i as f64 - (n_delta / 2) as f64;
                delta_max * k / (n_delta / 2) as f64
            })
            .collect();
        let g = Grid2D::new(w.clone(), y.clone())?;
        let generator = Generator2D::new(&inst.spec.model, &g, Coordinates::LogPrice)?;
        let dt = cfl / generator.max_rate().max(1e-300);
        let time = TimeGrid::with_max_step(inst.t0, inst.t1, inst.t2, dt)?;
        let s2 = inst.spec.model.sigma_tilde_max((y.lo(), y.hi())).powi(2);
        Ok(Self {
            w,
            y,
            deltas,
            v_nodes,
            v_max: 1.05 * s2 * inst.tenor() / 2.0,
            time,
            domain_check: None,
        })
    }

    pub fn plane(&self) -> Result<Grid2D> {
        Grid2D::new(self.w.clone(), self.y.clone())
    }

    pub fn delta_max(&self) -> f64 {
        self.deltas.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// `u(T1+; δ)` for every `δ`-node, with the uncontrolled expectations that
/// bound `Φ`.
#[derive(Clone, Debug, Serialize)]
pub struct DeltaFamily {
    pub grid: Grid2D,
    pub deltas: Vec<f64>,
    /// `tables[i][p] = u(T1+, node p; δ_i)`.
    pub tables: Vec<Vec<f64>>,
    /// Reference `E[u2(X_T2)]` and `E[log X_T2]` from each node at `T1`.
    pub expected_u2: Vec<f64>,
    pub expected_log: Vec<f64>,
    /// `max |u(δ_{i+1}) - u(δ_i)| / |δ_{i+1} - δ_i|`.
    pub delta_lipschitz: f64,
    /// Admissible constant `max|w| + σ̃²_max (T2 - T1) / 2`.
    pub delta_lipschitz_bound: f64,
    /// Largest positive second divided difference in `δ`; zero for a
    /// concave family.
    pub concavity_violation: f64,
    pub tenor: f64,
}

/// Evaluates a grid potential on `x = e^w`, held constant outside the grid.
fn on_prices(grid: &Grid1D, values: &[f64], x: f64) -> f64 {
    grid.interpolate(values, x.clamp(grid.lo(), grid.hi())).unwrap_or(f64::NAN)
}

/// Solves the post-`T1` equation once per `δ`-node, in parallel. `u2` is
/// given on the `μ2` grid.
pub fn post_t1_family(inst: &VixInstance, u2: &[f64], grids: &VixGrids) -> Result<DeltaFamily> {
    let g2 = inst.mu2.grid();
    if u2.len() != g2.len() {
        return Err(Error::GridMismatch(format!("u2 has {} values for {} nodes", u2.len(), g2.len())));
    }
    if !grids.deltas.contains(&0.0) {
        return Err(Error::InvalidGrid("delta grid must contain 0".into()));
    }
    let plane = grids.plane()?;
    let generator = Generator2D::new(&inst.spec.model, &plane, Coordinates::LogPrice)?;
    let post = grids.time.post();
    let u2f = |x: f64| on_prices(g2, u2, x);
    let solve = |&d: &f64| -> Result<Vec<f64>> {
        let sol = match grids.domain_check {
            Some(chk) => solve_hj_vix_post(&inst.spec.model, &u2f, d, &grids.w, &grids.y, &grids.time, Some(chk))?,
            None => vix_post_with(&generator, &u2f, d, &post)?,
        };
        Ok(sol.after(0).to_vec())
    };
    let tables = grids.deltas.par_iter().map(solve).collect::<Result<Vec<_>>>()?;
    let terminal = |f: &dyn Fn(f64) -> f64| plane.broadcast_x(&plane.x.map(f));
    let expected_u2 = expectation_post(&generator, terminal(&|w| u2f(w.exp())), &post)?.after(0).to_vec();
    let expected_log = expectation_post(&generator, terminal(&|w| w), &post)?.after(0).to_vec();
    let mut lip: f64 = 0.0;
    let mut concave: f64 = 0.0;
    for i in 0..tables.len() - 1 {
        let h = grids.deltas[i + 1] - grids.deltas[i];
        for p in 0..plane.len() {
            lip = lip.max((tables[i + 1][p] - tables[i][p]).abs() / h);
        }
        if i + 2 < tables.len() {
            let h2 = grids.deltas[i + 2] - grids.deltas[i + 1];
            for p in 0..plane.len() {
                let s1 = (tables[i + 1][p] - tables[i][p]) / h;
                let s2 = (tables[i + 2][p] - tables[i + 1][p]) / h2;
                concave = concave.max(s2 - s1);
            }
        }
    }
    let s2 = inst.spec.model.sigma_tilde_max((grids.y.lo(), grids.y.hi())).powi(2);
    let wmax = grids.w.lo().abs().max(grids.w.hi().abs());
    let bound = wmax + s2 * inst.tenor() / 2.0;
    if lip > bound * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::Refine(format!(
            "delta family moves by {lip:.4e} per unit delta, above the admissible {bound:.4e}; refine the delta grid"
        )));
    }
    Ok(DeltaFamily {
        grid: plane,
        deltas: grids.deltas.clone(),
        tables,
        expected_u2,
        expected_log,
        delta_lipschitz: lip,
        delta_lipschitz_bound: bound,
        concavity_violation: concave,
        tenor: inst.tenor(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PhiTable {
    pub grid: Grid2D,
    pub values: Vec<f64>,
    /// Minimising `v` and the maximising `δ` there, per node.
    pub v_star: Vec<f64>,
    pub delta_star: Vec<f64>,
    /// `u(T1; 0) + min u3` and `E[u2] + u3(log x - E[log X_T2])` under the
    /// reference law; the upper bound is infinite where that log-contract
    /// leaves `[0, v_max]`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Largest excursion of `Φ` outside `[lower, upper]`.
    pub bound_violation: f64,
    pub v_max: f64,
}

/// Upper hull of the points `(δ_i, g_i)`, as indices in increasing `δ`.
fn upper_hull(d: &[f64], g: &[f64]) -> Vec<usize> {
    let mut h: Vec<usize> = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        while h.len() >= 2 {
            let (a, b) = (h[h.len() - 2], h[h.len() - 1]);
            let cross = (d[b] - d[a]) * (g[i] - g[a]) - (g[b] - g[a]) * (d[i] - d[a]);
            if cross >= 0.0 {
                h.pop();
            } else {
                break;
            }
        }
        h.push(i);
    }
    h
}

/// `Φ` at every node of the family's grid. Fails if `v_max` is below
/// `σ̃²_max (T2 - T1) / 2`, beyond which the inner sup is infinite.
pub fn compute_phi(family: &DeltaFamily, u3: &ConvexPiecewise, v_nodes: usize, v_max: f64, sigma_tilde_max: f64) -> Result<PhiTable> {
    let needed = sigma_tilde_max * sigma_tilde_max * family.tenor / 2.0;
    if v_max < needed {
        return Err(Error::InvalidParameter {
            name: "v_max",
            value: v_max,
            constraint: format!("extend the v grid to at least {needed}"),
        });
    }
    let d = &family.deltas;
    let i0 = d.iter().position(|&x| x == 0.0).ok_or_else(|| Error::InvalidGrid("delta grid must contain 0".into()))?;
    let g = &family.grid;
    let vgrid: Vec<f64> = (0..v_nodes.max(2)).map(|k| v_max * k as f64 / (v_nodes.max(2) - 1) as f64).collect();
    let u3min = u3.min_on(v_max);
    let node = |p: usize| {
        let w = g.x.nodes()[p / g.ny()];
        let col: Vec<f64> = family.tables.iter().map(|t| t[p]).collect();
        // sup over δ of col_i - δ_i (v - w)
        let inner = |v: f64| {
            let c = v - w;
            let mut best = (f64::NEG_INFINITY, 0.0);
            for (i, &di) in d.iter().enumerate() {
                let val = col[i] - di * c;
                if val > best.0 {
                    best = (val, di);
                }
            }
            best
        };
        let hull = upper_hull(d, &col);
        let mut cands: Vec<f64> = vgrid.clone();
        cands.extend(u3.knots.iter().copied().filter(|&k| k <= v_max));
        for pair in hull.windows(2) {
            let slope = (col[pair[1]] - col[pair[0]]) / (d[pair[1]] - d[pair[0]]);
            cands.push((slope + w).clamp(0.0, v_max));
        }
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for v in cands {
            let (s, di) = inner(v);
            let val = u3.eval(v) + s;
            if val < best.0 {
                best = (val, v, di);
            }
        }
        let lower = col[i0] + u3min;
        // the reference law is a feasible choice only when its log-contract
        // falls inside the searched range
        let v0 = w - family.expected_log[p];
        let upper = if (0.0..=v_max).contains(&v0) { family.expected_u2[p] + u3.eval(v0) } else { f64::INFINITY };
        (best.0, best.1, best.2, lower, upper)
    };
    let out: Vec<_> = (0..g.len()).into_par_iter().map(node).collect();
    let mut t = PhiTable {
        grid: g.clone(),
        values: Vec::with_capacity(out.len()),
        v_star: Vec::with_capacity(out.len()),
        delta_star: Vec::with_capacity(out.len()),
        lower: Vec::with_capacity(out.len()),
        upper: Vec::with_capacity(out.len()),
        bound_violation: 0.0,
        v_max,
    };
    for (phi, v, di, lo, hi) in out {
        let scale = 1e-10 * (1.0 + phi.abs());
        t.bound_violation = t.bound_violation.max(lo - phi - scale).max(phi - hi - scale);
        t.values.push(phi);
        t.v_star.push(v);
        t.delta_star.push(di);
        t.lower.push(lo);
        t.upper.push(hi);
    }
    t.bound_violation = t.bound_violation.max(0.0);
    Ok(t)
}

/// Pre-`T1` value in log coordinates with terminal data `u1(e^w) + Φ`.
/// Needs constant `τ2`, under which the log-coordinate equation
/// characterises the control problem.
pub fn pre_t1_value(inst: &VixInstance, phi: &PhiTable, u1: &[f64], time: &TimeGrid) -> Result<HjSolution> {
    if !inst.spec.model.tau2_is_constant() {
        return Err(Error::Hypothesis("the pre-T1 PDE route needs a constant tau2".into()));
    }
    let g1 = inst.mu1.grid();
    if u1.len() != g1.len() {
        return Err(Error::GridMismatch(format!("u1 has {} values for {} nodes", u1.len(), g1.len())));
    }
    let g = &phi.grid;
    let jump = g.broadcast_x(&g.x.map(|w| on_prices(g1, u1, w.exp())));
    let terminal: Vec<f64> = jump.iter().zip(&phi.values).map(|(a, b)| a + b).collect();
    let generator = Generator2D::new(&inst.spec.model, g, Coordinates::LogPrice)?;
    solve_hj_vix_pre(&generator, terminal, time)
}

#[derive(Clone, Debug, Serialize)]
pub struct VixDualReport {
    pub dual_value: f64,
    /// `u(t0, X0, Y0)` and the three pairings `∫ui dμi`.
    pub value_at_start: f64,
    pub pairing: [f64; 3],
    pub phi_bound_violation: f64,
    pub concavity_violation: f64,
    pub delta_lipschitz: f64,
}

/// `-∫u1 dμ1 - ∫u2 dμ2 - ∫u3 dμ3 + u(t0, X0, Y0)`.
pub fn vix_dual_value(inst: &VixInstance, u1: &[f64], u2: &[f64], u3: &ConvexPiecewise, grids: &VixGrids) -> Result<VixDualReport> {
    inst.validate()?;
    let family = post_t1_family(inst, u2, grids)?;
    let smax = inst.spec.model.sigma_tilde_max((grids.y.lo(), grids.y.hi()));
    let phi = compute_phi(&family, u3, grids.v_nodes, grids.v_max, smax)?;
    let pre = pre_t1_value(inst, &phi, u1, &grids.time)?;
    let start = phi.grid.interpolate(pre.initial(), inst.spec.x0.ln(), inst.spec.y0);
    let pairing = [inst.mu1.integrate(u1), inst.mu2.integrate(u2), u3.integrate(&inst.mu3)];
    Ok(VixDualReport {
        dual_value: start - pairing.iter().sum::<f64>(),
        value_at_start: start,
        pairing,
        phi_bound_violation: phi.bound_violation,
        concavity_violation: family.concavity_violation,
        delta_lipschitz: family.delta_lipschitz,
    })
}

/// `100 √(2V / (T2 - T1))`.
pub fn vix_index(v: f64, t1: f64, t2: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("log-contract value must be nonnegative, got {v}")));
    }
    if !(t2 > t1) {
        return Err(Error::InvalidGrid(format!("need T1 < T2, got {t1}, {t2}")));
    }
    Ok(100.0 * (2.0 * v / (t2 - t1)).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PutBoundRow {
    pub strike: f64,
    /// Sample mean of `(K - VIX)+` and its standard error.
    pub sample: f64,
    pub se: f64,
    /// `∫(K - 100√(2x/(T2 - T1)))+ dμ3`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PutBoundReport {
    pub rows: Vec<PutBoundRow>,
    pub all_pass: bool,
    pub failures: usize,
}

/// Checks `E[(K - VIX)+] <= ∫(K - 100√(2x/(T2 - T1)))+ dμ3` at each strike;
/// a strike fails when the sample exceeds the bound by more than three
/// standard errors.
pub fn vix_put_bound(mu3: &GridMeasure, samples: &[f64], strikes: &[f64], t1: f64, t2: f64) -> Result<PutBoundReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "samples",
            value: samples.len() as f64,
            constraint: "need at least two samples".into(),
        });
    }
    let vix: Vec<f64> = samples.iter().map(|&v| vix_index(v.max(0.0), t1, t2)).collect::<Result<_>>()?;
    let n = vix.len() as f64;
    let mut rows = Vec::with_capacity(strikes.len());
    for &k in strikes {
        let pay: Vec<f64> = vix.iter().map(|v| (k - v).max(0.0)).collect();
        let mean = pay.iter().sum::<f64>() / n;
        let var = pay.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let bound = mu3.expect(|x| (k - vix_index(x.max(0.0), t1, t2).unwrap_or(0.0)).max(0.0));
        rows.push(PutBoundRow {
            strike: k,
            sample: mean,
            se,
            bound,
            pass: mean <= bound + 3.0 * se + 1e-12,
        });
    }
    let failures = rows.iter().filter(|r| !r.pass).count();
    Ok(PutBoundReport {
        all_pass: failures == 0,
        failures,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svm_models::{make_heston, SvmModel};
    use proptest::prelude::*;

    const S: f64 = 0.3;

    fn constant_instance() -> VixInstance {
        let model = SvmModel::Constant {
            sigma_tilde: S,
            b: 0.0,
            tau1: 0.0,
            tau2: 0.2,
        };
        let g = Grid1D::uniform(0.5, 1.5, 21).unwrap();
        let mu1 = GridMeasure::from_atoms(g.clone(), &[(0.9, 0.5), (1.1, 0.5)]).unwrap();
        let mu2 = GridMeasure::from_atoms(g, &[(0.8, 0.5), (1.2, 0.5)]).unwrap();
        let mu3 = GridMeasure::from_atoms(Grid1D::uniform(0.0, 0.02, 11).unwrap(), &[(0.004, 1.0)]).unwrap();
        VixInstance {
            spec: SvmSpec { model, x0: 1.0, y0: 1.0 },
            mu1,
            mu2,
            mu3,
            t0: 0.0,
            t1: 0.1,
            t2: 0.2,
        }
    }

    fn grids(inst: &VixInstance) -> VixGrids {
        let w = Grid1D::uniform(-0.8, 0.8, 33).unwrap();
        let y = Grid1D::uniform(0.5, 1.5, 5).unwrap();
        VixGrids::new(inst, w, y, 2.0, 21, 41, 0.5).unwrap()
    }

    fn interior(g: &Grid2D, margin: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (margin..g.nx() - margin).flat_map(move |i| (0..g.ny()).map(move |j| (g.index(i, j), g.x.nodes()[i])))
    }

    #[test]
    fn affine_terminal_has_closed_form() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let tau = inst.tenor();
        for (i, &d) in fam.deltas.iter().enumerate() {
            for (p, w) in interior(&fam.grid, 8) {
                let exact = -d * w + d * S * S * tau / 2.0;
                assert!((fam.tables[i][p] - exact).abs() < 1e-9, "delta {d}, w {w}: {} vs {exact}", fam.tables[i][p]);
            }
        }
        assert!(fam.concavity_violation < 1e-9);
    }

    #[test]
    fn phi_vanishes_without_potentials() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let phi = compute_phi(&fam, &ConvexPiecewise::zero(), gr.v_nodes, gr.v_max, S).unwrap();
        for (p, _) in interior(&phi.grid, 8) {
            assert!(phi.values[p].abs() < 1e-6, "{}", phi.values[p]);
            assert!((phi.v_star[p] - S * S * inst.tenor() / 2.0).abs() < 1e-9);
        }
        assert_eq!(phi.bound_violation, 0.0);
    }

    #[test]
    fn steep_wedge_pins_the_log_contract() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let vc = S * S * inst.tenor() / 2.0;
        let v0 = 0.3 * vc;
        let k = 10.0 * gr.delta_max();
        let u3 = ConvexPiecewise::wedge(v0, k).unwrap();
        let phi = compute_phi(&fam, &u3, gr.v_nodes, gr.v_max, S).unwrap();
        for (p, _) in interior(&phi.grid, 8) {
            // sup over the bounded delta grid of -delta (v0 - vc)
            let expect = gr.delta_max() * (v0 - vc).abs();
            assert!((phi.values[p] - expect).abs() < 1e-9, "{} vs {expect}", phi.values[p]);
            assert!((phi.v_star[p] - v0).abs() < 1e-12);
        }
        assert_eq!(phi.bound_violation, 0.0);
    }

    #[test]
    fn too_short_v_range_is_rejected() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let short = 0.5 * S * S * inst.tenor() / 2.0;
        assert!(matches!(compute_phi(&fam, &ConvexPiecewise::zero(), 11, short, S), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn heston_pre_solve_needs_constant_vol_of_vol() {
        let mut inst = constant_instance();
        inst.spec.model = make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap();
        inst.spec.y0 = 0.04;
        let w = Grid1D::uniform(-0.8, 0.8, 17).unwrap();
        let y = Grid1D::uniform(0.01, 0.13, 7).unwrap();
        let gr = VixGrids::new(&inst, w, y, 2.0, 5, 11, 0.5).unwrap();
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let smax = inst.spec.model.sigma_tilde_max((0.01, 0.13));
        let phi = compute_phi(&fam, &ConvexPiecewise::zero(), 11, gr.v_max, smax).unwrap();
        assert!(fam.concavity_violation < 1e-9);
        assert_eq!(phi.bound_violation, 0.0);
        let u1 = vec![0.0; inst.mu1.grid().len()];
        assert!(matches!(pre_t1_value(&inst, &phi, &u1, &gr.time), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn pre_solve_propagates_constants() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let fam = post_t1_family(&inst, &vec![0.0; inst.mu2.grid().len()], &gr).unwrap();
        let phi = compute_phi(&fam, &ConvexPiecewise::constant(0.7), gr.v_nodes, gr.v_max, S).unwrap();
        let mut flat = phi.clone();
        flat.values.iter_mut().for_each(|v| *v = 0.7);
        let sol = pre_t1_value(&inst, &flat, &vec![0.0; inst.mu1.grid().len()], &gr.time).unwrap();
        assert!(sol.initial().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn zero_potentials_give_zero_value() {
        let inst = constant_instance();
        let gr = grids(&inst);
        let r = vix_dual_value(&inst, &vec![0.0; 21], &vec![0.0; 21], &ConvexPiecewise::zero(), &gr).unwrap();
        assert!(r.dual_value.abs() < 1e-6, "{}", r.dual_value);
    }

    #[test]
    fn shifting_u3_leaves_the_value_unchanged() {
        let mut inst = constant_instance();
        inst.spec.model = SvmModel::Constant {
            sigma_tilde: S,
            b: 0.1,
            tau1: 0.05,
            tau2: 0.3,
        };
        let gr = grids(&inst);
        let u1: Vec<f64> = inst.mu1.nodes().iter().map(|x| 0.3 * (x - 1.0).powi(2)).collect();
        let u2: Vec<f64> = inst.mu2.nodes().iter().map(|x| -0.2 * (x - 1.0).abs()).collect();
        let u3 = ConvexPiecewise::new(vec![0.0, 0.003, 0.006], -0.01, vec![-2.0, 0.5, 3.0]).unwrap();
        let a = vix_dual_value(&inst, &u1, &u2, &u3, &gr).unwrap();
        let b = vix_dual_value(&inst, &u1, &u2, &u3.shifted(0.37), &gr).unwrap();
        assert!((a.dual_value - b.dual_value).abs() < 1e-9, "{} vs {}", a.dual_value, b.dual_value);
        assert_eq!(a.phi_bound_violation, 0.0);
    }

    #[test]
    fn index_matches_reference_points() {
        assert!((vix_index(0.05, 0.0, 0.1).unwrap() - 100.0).abs() < 1e-12);
        let tau = 30.0 / 365.0;
        let v = 0.2f64.powi(2) * tau / 2.0;
        assert!((vix_index(v, 0.0, tau).unwrap() - 20.0).abs() < 1e-9);
        assert!(vix_index(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn put_bound_separates_contraction_from_spread() {
        let tau = 30.0 / 365.0;
        let level = |vix: f64| (vix / 100.0).powi(2) * tau / 2.0;
        let g = Grid1D::uniform(0.0, level(60.0), 61).unwrap();
        let mu3 = GridMeasure::project_atoms(g, &[(level(15.0), 0.5), (level(35.0), 0.5)]).unwrap();
        let strikes = [15.0, 20.0, 25.0, 30.0];
        // point mass at the mean of V: smaller in the order, puts below the bound
        let mean = vec![mu3.mean(); 2000];
        assert!(vix_put_bound(&mu3, &mean, &strikes, 0.0, tau).unwrap().all_pass);
        // spread wider than mu3 in the decreasing-concave direction
        let wide: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { level(5.0) } else { level(40.0) }).collect();
        let r = vix_put_bound(&mu3, &wide, &strikes, 0.0, tau).unwrap();
        assert!(!r.all_pass && r.failures > 0);
    }

    proptest! {
        #[test]
        fn projected_slopes_are_convex(raw in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let knots: Vec<f64> = (0..raw.len()).map(|i| i as f64 * 0.01).collect();
            let f = ConvexPiecewise::projected(knots, 0.0, &raw).unwrap();
            prop_assert!(f.slopes.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(*f.slopes.last().unwrap() >= 0.0);
        }

        #[test]
        fn eval_is_convex(a in 0.0f64..0.05, b in 0.0f64..0.05, t in 0.0f64..1.0) {
            let f = ConvexPiecewise::new(vec![0.0, 0.01, 0.02], 0.1, vec![-1.0, 0.0, 2.0]).unwrap();
            let m = t * a + (1.0 - t) * b;
            prop_assert!(f.eval(m) <= t * f.eval(a) + (1.0 - t) * f.eval(b) + 1e-12);
        }
    }
}
