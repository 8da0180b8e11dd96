//! Path-space entropy minimisation on a trinomial tree of the stochastic
//! volatility model, with optional convex-lower order constraints on the
//! conditional log-contract value at `T1`.

use rand::Rng;
use serde::Serialize;

use super::entropy::{solve_entropy_primal, EntropyProgram, KktReport, LinearConstraint};
use crate::error::{Error, Result};
use crate::measures::GridMeasure;
use crate::svm_models::SvmModel;

pub const MAX_DEPTH: usize = 6;
pub const ATTAINMENT_TOL: f64 = 1e-8;
const FIXED_POINT_TOL: f64 = 1e-8;
const FIXED_POINT_CAP: usize = 100;

#[derive(Clone, Debug, Serialize)]
pub struct TreeNode {
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub x: f64,
    pub y: f64,
    /// Reference transition probability from the parent.
    pub prob: f64,
    /// Paths through this node, as a half-open range of path indices.
    pub span: (usize, usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct PathTree {
    pub times: Vec<f64>,
    /// Level of `T1`, absent when the tree starts after it.
    pub t1_level: Option<usize>,
    pub nodes: Vec<TreeNode>,
    /// Node visited by each path at each level.
    pub paths: Vec<Vec<usize>>,
    pub p0: Vec<f64>,
}

/// Unit increments `√2 (cos θ, sin θ)` at 90°, 210° and 330°: mean zero,
/// identity covariance.
const BRANCHES: [(f64, f64); 3] = [
    (0.0, std::f64::consts::SQRT_2),
    (-0.5 * 2.449_489_742_783_178, -0.5 * std::f64::consts::SQRT_2),
    (0.5 * 2.449_489_742_783_178, -0.5 * std::f64::consts::SQRT_2),
];

impl PathTree {
    /// Euler tree with exact martingale correction of the price factor:
    /// `X' = X e^{σ̃ ΔW} / E[e^{σ̃ ΔW}]`, `Y' = Y + b Δt + τ1 ΔW + τ2 ΔW⊥`.
    pub fn trinomial(model: &SvmModel, x0: f64, y0: f64, times: (f64, f64, f64), steps: (usize, usize)) -> Result<Self> {
        let (t0, t1, t2) = times;
        if !(x0 > 0.0) {
            return Err(Error::Domain(format!("initial price {x0} must be positive")));
        }
        if !(t0 < t2 && t1 < t2) {
            return Err(Error::InvalidGrid(format!("need T0 < T2 and T1 < T2, got {t0}, {t1}, {t2}")));
        }
        let mut times_v = Vec::new();
        let t1_level = if t0 < t1 {
            if steps.0 == 0 {
                return Err(Error::InvalidGrid("the interval before T1 needs a step".into()));
            }
            for k in 0..steps.0 {
                times_v.push(t0 + (t1 - t0) * k as f64 / steps.0 as f64);
            }
            Some(steps.0)
        } else if t0 == t1 {
            Some(0)
        } else {
            None
        };
        let start = if t0 < t1 { t1 } else { t0 };
        if steps.1 == 0 {
            return Err(Error::InvalidGrid("the interval before T2 needs a step".into()));
        }
        for k in 0..=steps.1 {
            times_v.push(start + (t2 - start) * k as f64 / steps.1 as f64);
        }
        let depth = times_v.len() - 1;
        if depth > MAX_DEPTH {
            return Err(Error::InvalidGrid(format!("tree depth {depth} exceeds {MAX_DEPTH}")));
        }
        let mut nodes = vec![TreeNode {
            level: 0,
            parent: None,
            children: Vec::new(),
            x: x0,
            y: y0,
            prob: 1.0,
            span: (0, 0),
        }];
        let mut frontier = vec![0usize];
        for k in 0..depth {
            let dt = times_v[k + 1] - times_v[k];
            let sq = dt.sqrt();
            let mut next = Vec::with_capacity(3 * frontier.len());
            for &v in &frontier {
                let (x, y) = (nodes[v].x, nodes[v].y);
                let s = model.sigma_tilde(y);
                let growth: Vec<f64> = BRANCHES.iter().map(|&(a, _)| (s * sq * a).exp()).collect();
                let mean = growth.iter().sum::<f64>() / 3.0;
                for (j, &(a, b)) in BRANCHES.iter().enumerate() {
                    let ny = y + model.drift(x, y) * dt + model.tau1(x, y) * sq * a + model.tau2(x, y) * sq * b;
                    let id = nodes.len();
                    nodes.push(TreeNode {
                        level: k + 1,
                        parent: Some(v),
                        children: Vec::new(),
                        x: x * growth[j] / mean,
                        y: ny,
                        prob: 1.0 / 3.0,
                        span: (0, 0),
                    });
                    nodes[v].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::finish(times_v, t1_level, nodes)
    }

    /// Builds a tree from explicit nodes listed parent-first. Each parent's
    /// children must appear in order and their reference probabilities must
    /// sum to one.
    pub fn from_nodes(times: Vec<f64>, t1_level: Option<usize>, nodes: Vec<TreeNode>) -> Result<Self> {
        Self::finish(times, t1_level, nodes)
    }

    fn finish(times: Vec<f64>, t1_level: Option<usize>, mut nodes: Vec<TreeNode>) -> Result<Self> {
        let leaves: Vec<usize> = (0..nodes.len()).filter(|&v| nodes[v].children.is_empty()).collect();
        let depth = times.len() - 1;
        if leaves.iter().any(|&v| nodes[v].level != depth) {
            return Err(Error::InvalidGrid("every leaf must sit at the last level".into()));
        }
        for v in 0..nodes.len() {
            if !nodes[v].children.is_empty() {
                let total: f64 = nodes[v].children.iter().map(|&c| nodes[c].prob).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidMeasure(format!("transition probabilities at node {v} sum to {total}")));
                }
            }
        }
        // depth-first leaf order gives contiguous spans
        let mut order = Vec::new();
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            if nodes[v].children.is_empty() {
                order.push(v);
            }
            for &c in nodes[v].children.iter().rev() {
                stack.push(c);
            }
        }
        let mut paths = Vec::with_capacity(order.len());
        let mut p0 = Vec::with_capacity(order.len());
        for (idx, &leaf) in order.iter().enumerate() {
            let mut chain = vec![leaf];
            let mut prob = nodes[leaf].prob;
            let mut v = leaf;
            while let Some(p) = nodes[v].parent {
                chain.push(p);
                prob *= nodes[p].prob;
                v = p;
            }
            chain.reverse();
            for &u in &chain {
                let s = &mut nodes[u].span;
                if s.0 == s.1 {
                    *s = (idx, idx + 1);
                } else {
                    s.1 = idx + 1;
                }
            }
            paths.push(chain);
            p0.push(prob);
        }
        Ok(Self {
            times,
            t1_level,
            nodes,
            paths,
            p0,
        })
    }

    pub fn depth(&self) -> usize {
        self.times.len() - 1
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn x_at(&self, path: usize, level: usize) -> f64 {
        self.nodes[self.paths[path][level]].x
    }

    /// Smallest and largest price at a level.
    pub fn x_range(&self, level: usize) -> (f64, f64) {
        self.nodes
            .iter()
            .filter(|n| n.level == level)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| (lo.min(n.x), hi.max(n.x)))
    }

    /// Law of the price at `level` under path probabilities `p`, projected
    /// onto `grid` by linear interpolation (mean preserving).
    pub fn x_marginal(&self, p: &[f64], level: usize, grid: &crate::measures::Grid1D) -> Result<GridMeasure> {
        let mut w = vec![0.0; grid.len()];
        for (path, &q) in p.iter().enumerate() {
            let (i, t) = grid.locate(self.x_at(path, level))?;
            w[i] += (1.0 - t) * q;
            if t > 0.0 {
                w[i + 1] += t * q;
            }
        }
        GridMeasure::new(grid.clone(), w)
    }

    /// `V(u) = E_p[log X_{T1} - log X_{T2} | u]` for every node `u` at the
    /// `T1` level, keyed by node index.
    pub fn log_contract(&self, p: &[f64]) -> Result<Vec<(usize, f64)>> {
        let l1 = self.vix_level()?;
        let last = self.depth();
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.level == l1)
            .map(|(u, n)| {
                let (a, b) = n.span;
                let mass: f64 = p[a..b].iter().sum();
                let v = if mass > 0.0 {
                    (a..b).map(|q| p[q] * (n.x.ln() - self.x_at(q, last).ln())).sum::<f64>() / mass
                } else {
                    let m0: f64 = self.p0[a..b].iter().sum();
                    (a..b).map(|q| self.p0[q] * (n.x.ln() - self.x_at(q, last).ln())).sum::<f64>() / m0
                };
                (u, v)
            })
            .collect())
    }

    fn vix_level(&self) -> Result<usize> {
        match self.t1_level {
            Some(l) if l < self.depth() => Ok(l),
            _ => Err(Error::InvalidGrid("VIX constraints need a T1 level before the last".into())),
        }
    }

    /// Martingale rows: `Σ_{paths through v} p (X_child - X_v) = 0`.
    fn martingale_rows(&self) -> Vec<LinearConstraint> {
        let mut rows = Vec::new();
        for (v, n) in self.nodes.iter().enumerate() {
            if n.children.is_empty() {
                continue;
            }
            let coeffs: Vec<(usize, f64)> = (n.span.0..n.span.1)
                .map(|q| (q, self.x_at(q, n.level + 1) - n.x))
                .filter(|&(_, a)| a != 0.0)
                .collect();
            if !coeffs.is_empty() {
                rows.push(LinearConstraint::new(coeffs, 0.0, format!("martingale at node {v}")));
            }
        }
        rows
    }

    fn marginal_rows(&self, level: usize, mu: &GridMeasure, name: &str) -> Result<Vec<LinearConstraint>> {
        let grid = mu.grid();
        let mut coeffs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); grid.len()];
        for q in 0..self.n_paths() {
            let (i, t) = grid.locate(self.x_at(q, level)).map_err(|_| {
                Error::Domain(format!("{name} grid does not cover tree price {}", self.x_at(q, level)))
            })?;
            coeffs[i].push((q, 1.0 - t));
            if t > 0.0 {
                coeffs[i + 1].push((q, t));
            }
        }
        Ok(coeffs
            .into_iter()
            .enumerate()
            .map(|(g, c)| LinearConstraint::new(c, mu.weights()[g], format!("{name} at {}", grid.nodes()[g])))
            .collect())
    }

    /// Reference transitions tilted along the direction orthogonal to
    /// `(1, ΔX)` at every trinomial node, scaled by `eps` in `[0, 1)` of
    /// the largest admissible move. The result is a martingale measure.
    pub fn perturbed_martingale_measure(&self, eps: f64, rng: &mut impl Rng) -> Vec<f64> {
        let mut trans: Vec<f64> = self.nodes.iter().map(|n| n.prob).collect();
        for n in &self.nodes {
            if n.children.len() != 3 {
                continue;
            }
            let dx: Vec<f64> = n.children.iter().map(|&c| self.nodes[c].x - n.x).collect();
            // (1,1,1) × dx
            let d = [dx[2] - dx[1], dx[0] - dx[2], dx[1] - dx[0]];
            let big = d.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            if big == 0.0 {
                continue;
            }
            let base: Vec<f64> = n.children.iter().map(|&c| self.nodes[c].prob).collect();
            let room = (0..3)
                .filter(|&j| d[j] != 0.0)
                .map(|j| base[j] / d[j].abs())
                .fold(f64::INFINITY, f64::min);
            let s = eps * room * rng.gen_range(-1.0..1.0);
            for j in 0..3 {
                trans[n.children[j]] = base[j] + s * d[j];
            }
        }
        self.paths
            .iter()
            .map(|chain| chain.iter().skip(1).map(|&u| trans[u]).product())
            .collect()
    }
}

/// Calibration targets on the tree.
#[derive(Clone, Debug)]
pub struct SbTargets {
    /// Price law at `T1`; ignored when the tree has no `T1` level.
    pub mu1: Option<GridMeasure>,
    pub mu2: GridMeasure,
    /// Convex-lower bound on the law of the `T1` log-contract value.
    pub mu3: Option<GridMeasure>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub last_change: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SbOracleResult {
    /// Relative entropy of the optimal path measure.
    pub value: f64,
    pub p: Vec<f64>,
    pub kkt: KktReport,
    pub newton_steps: usize,
    pub vix: Option<FixedPointReport>,
    /// Set when the log-contract fixed point did not settle; the value is
    /// then only an upper bound.
    pub upper_bound_only: bool,
}

/// Entropy program without the log-contract constraints.
pub fn sb_program(tree: &PathTree, targets: &SbTargets) -> Result<EntropyProgram> {
    let mut eqs = tree.martingale_rows();
    if let (Some(l1), Some(mu1)) = (tree.t1_level, &targets.mu1) {
        if l1 > 0 {
            eqs.extend(tree.marginal_rows(l1, mu1, "mu1")?);
        }
    }
    eqs.extend(tree.marginal_rows(tree.depth(), &targets.mu2, "mu2")?);
    Ok(EntropyProgram {
        reference: tree.p0.clone(),
        equalities: eqs,
        inequalities: Vec::new(),
    })
}

/// Log-contract rows. With `c(q) = log X_T1 - log X_T2` on path `q`, the
/// mass-weighted value `m_u V_u = Σ_{q through u} p c(q)` is linear in `p`, so
/// for a frozen set of nodes with `V_u > K` the call condition
/// `Σ_u m_u (V_u - K) <= ∫(x - K)+ dμ3` is a linear row. The mean row
/// `Σ p c = ∫x dμ3` comes first: on a bounded support the convex-lower order
/// forces equal means (take `x` and `(K - x)+` for large `K`), and given the
/// mean the put conditions are the call conditions by parity.
fn vix_rows(tree: &PathTree, v: &[(usize, f64)], mu3: &GridMeasure) -> Result<(LinearConstraint, Vec<LinearConstraint>)> {
    let l1 = tree.vix_level()?;
    let last = tree.depth();
    let c: Vec<f64> = (0..tree.n_paths())
        .map(|q| tree.x_at(q, l1).ln() - tree.x_at(q, last).ln())
        .collect();
    let mean = LinearConstraint::new(c.iter().copied().enumerate().collect(), mu3.mean(), "mean of V");
    // at or below min V a call is the mean row shifted by K, and Jensen
    // makes it slack
    let floor = v.iter().fold(f64::INFINITY, |m, a| m.min(a.1));
    let mut rows = Vec::new();
    for &k in mu3.nodes().iter().filter(|&&k| k > floor) {
        let mut calls = Vec::new();
        for &(u, val) in v {
            let (a, b) = tree.nodes[u].span;
            if val > k {
                calls.extend((a..b).map(|q| (q, c[q] - k)));
            }
        }
        if !calls.is_empty() {
            rows.push(LinearConstraint::new(calls, mu3.call(k), format!("call on V at {k}")));
        }
    }
    Ok((mean, rows))
}

/// Largest violation of `law(V) <=_{c,l} μ3` at the `μ3` strikes, over
/// calls, puts and the mean.
fn order_violation(tree: &PathTree, p: &[f64], mu3: &GridMeasure) -> Result<f64> {
    let v = tree.log_contract(p)?;
    let atoms: Vec<(f64, f64)> = v
        .iter()
        .map(|&(u, val)| {
            let (a, b) = tree.nodes[u].span;
            (val, p[a..b].iter().sum::<f64>())
        })
        .collect();
    let mut worst = (atoms.iter().map(|(x, w)| x * w).sum::<f64>() - mu3.mean()).abs();
    for &k in mu3.nodes() {
        let call: f64 = atoms.iter().map(|(x, w)| w * (x - k).max(0.0)).sum();
        let put: f64 = atoms.iter().map(|(x, w)| w * (k - x).max(0.0)).sum();
        worst = worst.max(call - mu3.call(k)).max(put - mu3.put(k));
    }
    Ok(worst.max(0.0))
}

/// Minimises the relative entropy to the reference tree measure under the
/// martingale and marginal constraints, and, when `μ3` is given, the
/// log-contract order constraints by a fixed point on `V`.
pub fn solve_discrete_sb(tree: &PathTree, targets: &SbTargets) -> Result<SbOracleResult> {
    let base = sb_program(tree, targets)?;
    let Some(mu3) = &targets.mu3 else {
        let s = solve_entropy_primal(&base)?;
        return Ok(SbOracleResult {
            value: s.value,
            p: s.p,
            kkt: s.kkt,
            newton_steps: s.newton_steps,
            vix: None,
            upper_bound_only: false,
        });
    };
    let free = solve_entropy_primal(&base)?;
    let mut v = tree.log_contract(&free.p)?;
    let mut steps = free.newton_steps;
    let mut last_change = f64::INFINITY;
    for it in 1..=FIXED_POINT_CAP {
        let mut prog = base.clone();
        let (mean, calls) = vix_rows(tree, &v, mu3)?;
        prog.equalities.push(mean);
        prog.inequalities = calls;
        let s = solve_entropy_primal(&prog)?;
        steps += s.newton_steps;
        let next = tree.log_contract(&s.p)?;
        last_change = v.iter().zip(&next).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max);
        v = next;
        if last_change < FIXED_POINT_TOL || it == FIXED_POINT_CAP {
            let converged = last_change < FIXED_POINT_TOL;
            return Ok(SbOracleResult {
                value: s.value,
                p: s.p,
                kkt: s.kkt,
                newton_steps: steps,
                vix: Some(FixedPointReport {
                    iterations: it,
                    last_change,
                    converged,
                }),
                upper_bound_only: !converged,
            });
        }
    }
    Err(Error::Numerical(format!("log-contract fixed point failed, last change {last_change:.3e}")))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AttainmentReport {
    pub martingale_residual: f64,
    pub marginal_residual: f64,
    /// Largest violation of the call, put and mean conditions on `V`.
    pub order_residual: f64,
    pub martingale: bool,
    pub marginals: bool,
    pub order: bool,
    pub pass: bool,
}

/// Checks that `p` is a martingale measure on the tree with the target
/// marginals and, with `μ3`, that the law of `V` lies below it in the
/// convex-lower order at the `μ3` strikes.
pub fn check_attainment(p: &[f64], tree: &PathTree, targets: &SbTargets) -> Result<AttainmentReport> {
    if p.len() != tree.n_paths() {
        return Err(Error::GridMismatch(format!("{} probabilities for {} paths", p.len(), tree.n_paths())));
    }
    let martingale_residual = tree
        .martingale_rows()
        .iter()
        .map(|r| r.eval(p).abs())
        .fold(0.0, f64::max);
    let prog = sb_program(tree, targets)?;
    let total: f64 = p.iter().sum();
    let marginal_residual = prog
        .equalities
        .iter()
        .filter(|r| r.label.starts_with("mu"))
        .map(|r| (r.eval(p) - r.rhs).abs())
        .fold((total - 1.0).abs(), f64::max);
    let order_residual = match &targets.mu3 {
        None => 0.0,
        Some(mu3) => order_violation(tree, p, mu3)?,
    };
    let martingale = martingale_residual <= ATTAINMENT_TOL;
    let marginals = marginal_residual <= ATTAINMENT_TOL;
    let order = order_residual <= ATTAINMENT_TOL;
    Ok(AttainmentReport {
        martingale_residual,
        marginal_residual,
        order_residual,
        martingale,
        marginals,
        order,
        pass: martingale && marginals && order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Grid1D;
    use crate::primal_oracle::entropy::solve_entropy_dual;
    use crate::svm_models::make_heston;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heston_tree(steps: (usize, usize)) -> PathTree {
        let model = make_heston(1.5, 0.04, 0.3, -0.5, (0.01, 1.0)).unwrap();
        PathTree::trinomial(&model, 1.0, 0.04, (0.0, 0.5, 1.0), steps).unwrap()
    }

    fn targets_from(tree: &PathTree, p: &[f64], n: usize) -> SbTargets {
        let (lo1, hi1) = tree.x_range(tree.t1_level.unwrap());
        let (lo2, hi2) = tree.x_range(tree.depth());
        let g1 = Grid1D::uniform(lo1 - 1e-9, hi1 + 1e-9, n).unwrap();
        let g2 = Grid1D::uniform(lo2 - 1e-9, hi2 + 1e-9, n).unwrap();
        SbTargets {
            mu1: Some(tree.x_marginal(p, tree.t1_level.unwrap(), &g1).unwrap()),
            mu2: tree.x_marginal(p, tree.depth(), &g2).unwrap(),
            mu3: None,
        }
    }

    #[test]
    fn reference_tree_is_a_martingale() {
        let tree = heston_tree((2, 2));
        assert_eq!(tree.n_paths(), 81);
        assert!((tree.p0.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let r = check_attainment(&tree.p0, &tree, &targets_from(&tree, &tree.p0, 7)).unwrap();
        assert!(r.martingale_residual < 1e-15, "{r:?}");
    }

    #[test]
    fn reference_targets_cost_nothing() {
        let tree = heston_tree((2, 2));
        let t = targets_from(&tree, &tree.p0, 7);
        let r = solve_discrete_sb(&tree, &t).unwrap();
        assert!(r.value.abs() < 1e-10, "{}", r.value);
        assert!(r.p.iter().zip(&tree.p0).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(check_attainment(&r.p, &tree, &t).unwrap().pass);
    }

    #[test]
    fn tilted_targets_attained_and_dual_matches() {
        let tree = heston_tree((2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = tree.perturbed_martingale_measure(0.5, &mut rng);
        let t = targets_from(&tree, &q, 9);
        let r = solve_discrete_sb(&tree, &t).unwrap();
        assert!(r.value > 0.0);
        assert!(r.value <= crate::primal_oracle::entropy::relative_entropy(&q, &tree.p0) + 1e-10);
        let rep = check_attainment(&r.p, &tree, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        let d = solve_entropy_dual(&sb_program(&tree, &t).unwrap(), 1e-12, 200_000).unwrap();
        assert!((d.value - r.value).abs() < 1e-6, "{} vs {}", d.value, r.value);
    }

    #[test]
    fn corrupted_measure_fails_martingale_check() {
        let tree = heston_tree((1, 2));
        let t = targets_from(&tree, &tree.p0, 5);
        let mut p = tree.p0.clone();
        p[0] += 1e-3;
        p[1] -= 1e-3;
        let rep = check_attainment(&p, &tree, &t).unwrap();
        assert!(!rep.martingale && !rep.pass);
    }

    #[test]
    fn slack_vix_constraint_changes_nothing() {
        let tree = heston_tree((2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = tree.perturbed_martingale_measure(0.4, &mut rng);
        let mut t = targets_from(&tree, &q, 9);
        let free = solve_discrete_sb(&tree, &t).unwrap();
        // extreme spread with the same mean dominates any law of V
        let v = tree.log_contract(&free.p).unwrap();
        let mean: f64 = v.iter().map(|&(u, x)| x * free.p[tree.nodes[u].span.0..tree.nodes[u].span.1].iter().sum::<f64>()).sum();
        let top = 50.0 * mean;
        let g = Grid1D::uniform(0.0, top, 21).unwrap();
        t.mu3 = Some(GridMeasure::from_atoms(g, &[(0.0, 1.0 - mean / top), (top, mean / top)]).unwrap());
        let r = solve_discrete_sb(&tree, &t).unwrap();
        assert!(r.vix.unwrap().converged);
        assert!((r.value - free.value).abs() < 1e-8, "{} vs {}", r.value, free.value);
    }

    #[test]
    fn active_vix_constraint_is_met() {
        let tree = heston_tree((2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = tree.perturbed_martingale_measure(0.3, &mut rng);
        let mut t = targets_from(&tree, &q, 9);
        let free = solve_discrete_sb(&tree, &t).unwrap();
        // squeeze the unconstrained law of V slightly toward its mean
        let v = tree.log_contract(&free.p).unwrap();
        let atoms: Vec<(f64, f64)> = v.iter().map(|&(u, x)| (x, free.p[tree.nodes[u].span.0..tree.nodes[u].span.1].iter().sum::<f64>())).collect();
        let mean: f64 = atoms.iter().map(|(x, w)| x * w).sum();
        let squeezed: Vec<(f64, f64)> = atoms.iter().map(|&(x, w)| (mean + 0.97 * (x - mean), w)).collect();
        let hi = atoms.iter().fold(0.0f64, |s, a| s.max(a.0)) * 1.5;
        let g = Grid1D::uniform(0.0, hi, 21).unwrap();
        t.mu3 = Some(GridMeasure::project_atoms(g, &squeezed).unwrap());
        let r = solve_discrete_sb(&tree, &t).unwrap();
        let fp = r.vix.unwrap();
        assert!(fp.converged, "{fp:?}");
        assert!(r.value >= free.value - 1e-10);
        let rep = check_attainment(&r.p, &tree, &t).unwrap();
        assert!(rep.order_residual <= ATTAINMENT_TOL, "{rep:?}");
    }
}
