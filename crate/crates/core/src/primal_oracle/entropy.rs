//! Relative-entropy minimisation over a finite probability vector,
//! `min Σ p log(p/p0)` subject to `Σ p = 1`, `A p = c`, `G p <= h`.
//!
//! The primal is solved by an infeasible-start Newton method with a slack
//! barrier for the inequalities; the exponential-family dual
//! `λ·c − ν·h − log Σ p0 exp(Aᵀλ − Gᵀν)`, `ν >= 0`, is maximised
//! independently by cyclic coordinate ascent.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub label: String,
}

impl LinearConstraint {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) -> Self {
        Self {
            coeffs,
            rhs,
            label: label.into(),
        }
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, a)| a * p[i]).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct EntropyProgram {
    /// Reference probabilities, all positive, summing to one.
    pub reference: Vec<f64>,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
}

/// First-order optimality residuals of a primal solution.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct KktReport {
    /// `max |A p - c|`, including the normalisation.
    pub equality: f64,
    /// `max (G p - h)+`.
    pub inequality: f64,
    /// Spread of `log(p/p0) - Aᵀλ + Gᵀν` over the support, which is zero
    /// at a stationary point.
    pub stationarity: f64,
    /// `max ν_k (h_k - G_k p)`.
    pub complementarity: f64,
    /// Most negative inequality multiplier (zero when all are admissible).
    pub dual_sign: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.equality
            .max(self.inequality)
            .max(self.stationarity)
            .max(self.complementarity)
            .max(-self.dual_sign)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropySolution {
    pub p: Vec<f64>,
    /// `Σ p log(p/p0)`.
    pub value: f64,
    pub equality_multipliers: Vec<f64>,
    pub inequality_multipliers: Vec<f64>,
    pub kkt: KktReport,
    pub newton_steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualSolution {
    pub value: f64,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    /// Exponential-family measure at the final multipliers.
    pub p: Vec<f64>,
    pub sweeps: usize,
    /// Largest projected partial derivative at exit.
    pub gradient: f64,
}

pub fn relative_entropy(p: &[f64], p0: &[f64]) -> f64 {
    p.iter()
        .zip(p0)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &r)| q * (q / r).ln())
        .sum()
}

impl EntropyProgram {
    fn validate(&self) -> Result<()> {
        let n = self.reference.len();
        if n == 0 || self.reference.iter().any(|&q| !(q > 0.0)) {
            return Err(Error::InvalidMeasure("reference probabilities must be positive".into()));
        }
        let total: f64 = self.reference.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidMeasure(format!("reference mass {total}")));
        }
        let bad = self
            .equalities
            .iter()
            .chain(&self.inequalities)
            .any(|c| c.coeffs.iter().any(|&(i, a)| i >= n || !a.is_finite()) || !c.rhs.is_finite());
        if bad {
            return Err(Error::InvalidParameter {
                name: "constraint",
                value: f64::NAN,
                constraint: "indices in range and finite coefficients".into(),
            });
        }
        Ok(())
    }

    /// Equalities with the normalisation prepended, dependent rows removed.
    /// A dependent row whose right-hand side disagrees is infeasible.
    fn independent_equalities(&self) -> Result<(Vec<LinearConstraint>, Vec<usize>)> {
        let n = self.reference.len();
        let mut all = vec![LinearConstraint::new((0..n).map(|i| (i, 1.0)).collect(), 1.0, "total mass")];
        all.extend(self.equalities.iter().cloned());
        let mut basis: Vec<(Vec<f64>, f64, usize)> = Vec::new();
        let mut kept = Vec::new();
        let mut keep_idx = Vec::new();
        for (k, c) in all.iter().enumerate() {
            let mut row = vec![0.0; n];
            for &(i, a) in &c.coeffs {
                row[i] += a;
            }
            let scale = row.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
            let mut rhs = c.rhs;
            for (b, brhs, piv) in &basis {
                let f = row[*piv];
                if f != 0.0 {
                    row.iter_mut().zip(b).for_each(|(x, y)| *x -= f * y);
                    rhs -= f * brhs;
                }
            }
            let (piv, big) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
            if big <= 1e-10 * scale {
                if rhs.abs() > 1e-9 * (1.0 + c.rhs.abs()) {
                    return Err(Error::Infeasible(format!(
                        "constraint '{}' contradicts the others by {rhs:.3e}",
                        c.label
                    )));
                }
                continue;
            }
            let p = row[piv];
            row.iter_mut().for_each(|x| *x /= p);
            basis.push((row, rhs / p, piv));
            kept.push(c.clone());
            keep_idx.push(k);
        }
        Ok((kept, keep_idx))
    }
}

fn dense_rows(rows: &[LinearConstraint], n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(rows.len(), n);
    for (k, c) in rows.iter().enumerate() {
        for &(i, v) in &c.coeffs {
            a[(k, i)] += v;
        }
    }
    a
}

fn solve_spd(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.solve(&rhs));
    }
    m.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Newton system in entropy program".into()))
}

/// Infeasible-start Newton on `(p, s)` for the barrier problem
/// `Σ p log(p/p0) − μ Σ log s`, `A p = c`, `G p + s = h`, with `μ` driven
/// to zero.
pub fn solve_entropy_primal(prog: &EntropyProgram) -> Result<EntropySolution> {
    prog.validate()?;
    let n = prog.reference.len();
    let (eqs, _) = prog.independent_equalities()?;
    let me = eqs.len();
    let mi = prog.inequalities.len();
    let nv = n + mi;
    // stacked constraint matrix over (p, s)
    let mut a = DMatrix::zeros(me + mi, nv);
    a.view_mut((0, 0), (me, n)).copy_from(&dense_rows(&eqs, n));
    if mi > 0 {
        a.view_mut((me, 0), (mi, n)).copy_from(&dense_rows(&prog.inequalities, n));
        for k in 0..mi {
            a[(me + k, n + k)] = 1.0;
        }
    }
    let b = DVector::from_iterator(me + mi, eqs.iter().chain(&prog.inequalities).map(|c| c.rhs));
    let p0 = &prog.reference;
    let mut x = DVector::from_iterator(nv, p0.iter().cloned().chain(std::iter::repeat(1.0).take(mi)));
    if mi > 0 {
        for k in 0..mi {
            let slack = prog.inequalities[k].rhs - prog.inequalities[k].eval(p0);
            x[n + k] = slack.max(1e-2);
        }
    }
    let mut lambda = DVector::zeros(me + mi);
    let mut mu = if mi > 0 { 1e-2 } else { 0.0 };
    let mut steps = 0;
    let grad = |x: &DVector<f64>, mu: f64| -> DVector<f64> {
        DVector::from_iterator(
            nv,
            (0..nv).map(|j| {
                if j < n {
                    (x[j] / p0[j]).ln() + 1.0
                } else {
                    -mu / x[j]
                }
            }),
        )
    };
    let residual = |x: &DVector<f64>, l: &DVector<f64>, mu: f64| -> (DVector<f64>, DVector<f64>) {
        let rd = grad(x, mu) + a.transpose() * l;
        let rp = &a * x - &b;
        (rd, rp)
    };
    loop {
        let mut norm = f64::INFINITY;
        for _ in 0..200 {
            let (rd, rp) = residual(&x, &lambda, mu);
            norm = rd.norm().max(rp.norm());
            if norm < 1e-12 {
                break;
            }
            // Hessian is diagonal: 1/p on probabilities, μ/s² on slacks.
            let hinv = DVector::from_iterator(nv, (0..nv).map(|j| if j < n { x[j] } else { x[j] * x[j] / mu.max(1e-300) }));
            let ah = DMatrix::from_fn(me + mi, nv, |r, c| a[(r, c)] * hinv[c]);
            let schur = &ah * a.transpose();
            let rhs = &rp - &ah * &rd;
            let dl = solve_spd(schur, rhs)?;
            let dx = -hinv.component_mul(&(&rd + a.transpose() * &dl));
            let mut t: f64 = 1.0;
            for j in 0..nv {
                if dx[j] < 0.0 {
                    t = t.min(-0.99 * x[j] / dx[j]);
                }
            }
            loop {
                let xn = &x + t * &dx;
                let ln = &lambda + t * &dl;
                let (rdn, rpn) = residual(&xn, &ln, mu);
                if rdn.norm().max(rpn.norm()) <= (1.0 - 0.01 * t) * norm || t < 1e-12 {
                    x = xn;
                    lambda = ln;
                    break;
                }
                t *= 0.5;
            }
            steps += 1;
        }
        if norm > 1e-9 {
            let rp = &a * &x - &b;
            return Err(if rp.amax() > 1e-7 {
                Error::Infeasible(format!("entropy program constraints unmet by {:.3e}", rp.amax()))
            } else {
                Error::Numerical(format!("entropy Newton stalled at residual {norm:.3e}"))
            });
        }
        if mu < 1e-13 {
            break;
        }
        mu *= 0.1;
    }
    let p: Vec<f64> = (0..n).map(|i| x[i].max(0.0)).collect();
    // With Lagrangian ∇f + Aᵀλ = 0 the exponential-family multipliers are -λ.
    let eq_mult: Vec<f64> = (0..me).map(|k| -lambda[k]).collect();
    let ineq_mult: Vec<f64> = (0..mi).map(|k| lambda[me + k]).collect();
    let kkt = kkt_report(prog, &eqs, &p, &eq_mult, &ineq_mult);
    Ok(EntropySolution {
        value: relative_entropy(&p, p0),
        p,
        equality_multipliers: eq_mult,
        inequality_multipliers: ineq_mult,
        kkt,
        newton_steps: steps,
    })
}

fn kkt_report(prog: &EntropyProgram, eqs: &[LinearConstraint], p: &[f64], lambda: &[f64], nu: &[f64]) -> KktReport {
    let n = p.len();
    let mut theta = vec![0.0; n];
    // skip the normalisation multiplier, which only shifts theta
    for (c, &l) in eqs.iter().zip(lambda).skip(1) {
        for &(i, a) in &c.coeffs {
            theta[i] += l * a;
        }
    }
    for (c, &v) in prog.inequalities.iter().zip(nu) {
        for &(i, a) in &c.coeffs {
            theta[i] -= v * a;
        }
    }
    let gaps: Vec<f64> = (0..n)
        .filter(|&i| p[i] > 0.0)
        .map(|i| (p[i] / prog.reference[i]).ln() - theta[i])
        .collect();
    let lo = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = p.iter().sum();
    let equality = prog
        .equalities
        .iter()
        .map(|c| (c.eval(p) - c.rhs).abs())
        .fold((total - 1.0).abs(), f64::max);
    let inequality = prog.inequalities.iter().map(|c| (c.eval(p) - c.rhs).max(0.0)).fold(0.0, f64::max);
    let complementarity = prog
        .inequalities
        .iter()
        .zip(nu)
        .map(|(c, &v)| (v * (c.rhs - c.eval(p))).abs())
        .fold(0.0, f64::max);
    KktReport {
        equality,
        inequality,
        stationarity: hi - lo,
        complementarity,
        dual_sign: nu.iter().cloned().fold(0.0, f64::min),
    }
}

/// Log-sum-exp state `w_i = p0_i exp(θ_i)` kept with its total.
struct Family {
    w: Vec<f64>,
    total: f64,
}

impl Family {
    fn new(p0: &[f64]) -> Self {
        Self {
            w: p0.to_vec(),
            total: p0.iter().sum(),
        }
    }

    /// Total mass after shifting `θ` by `δ a` on the row's support.
    fn shifted_total(&self, row: &LinearConstraint, delta: f64) -> (f64, f64, f64) {
        let (mut z, mut m1, mut m2) = (self.total, 0.0, 0.0);
        for &(i, a) in &row.coeffs {
            let e = self.w[i] * (delta * a).exp();
            z += e - self.w[i];
            m1 += e * a;
            m2 += e * a * a;
        }
        (z, m1, m2)
    }

    fn apply(&mut self, row: &LinearConstraint, delta: f64) {
        for &(i, a) in &row.coeffs {
            let e = self.w[i] * (delta * a).exp();
            self.total += e - self.w[i];
            self.w[i] = e;
        }
    }

    fn renormalise(&mut self) -> f64 {
        let z: f64 = self.w.iter().sum();
        self.w.iter_mut().for_each(|v| *v /= z);
        self.total = 1.0;
        z.ln()
    }
}

/// Maximises the one-dimensional dual `sign·(rhs·δ) − log Z(δ)` along a row,
/// returning the step. For inequalities the multiplier `ν` must stay
/// nonnegative, where `θ` moves by `−ν a`.
fn line_maximise(fam: &Family, row: &LinearConstraint, sign: f64, lower: f64) -> f64 {
    // d/dδ [sign rhs δ - log Z] with θ += sign δ a
    let slope = |d: f64| {
        let (z, m1, m2) = fam.shifted_total(row, sign * d);
        let mean = m1 / z;
        (sign * (row.rhs - mean), m2 / z - mean * mean)
    };
    let mut d = 0.0f64;
    for _ in 0..60 {
        let (g, var) = slope(d);
        if g.abs() < 1e-15 {
            break;
        }
        let mut step = if var > 1e-300 { g / var } else { g.signum() };
        // safeguard: keep the derivative sign consistent (concave in δ)
        let mut tries = 0;
        loop {
            let next = (d + step).max(lower);
            let (gn, _) = slope(next);
            if gn.signum() == g.signum() || gn.abs() < g.abs() || tries > 50 {
                d = next;
                break;
            }
            step *= 0.5;
            tries += 1;
        }
        if d == lower && g < 0.0 {
            break;
        }
    }
    d
}

/// Cyclic coordinate ascent on the multipliers until every projected
/// partial derivative is below `tol`.
pub fn solve_entropy_dual(prog: &EntropyProgram, tol: f64, max_sweeps: usize) -> Result<DualSolution> {
    prog.validate()?;
    let p0 = &prog.reference;
    let me = prog.equalities.len();
    let mi = prog.inequalities.len();
    let mut lambda = vec![0.0; me];
    let mut nu = vec![0.0; mi];
    let mut fam = Family::new(p0);
    let mut sweeps = 0;
    let mut gradient = f64::INFINITY;
    while sweeps < max_sweeps {
        for (k, row) in prog.equalities.iter().enumerate() {
            let d = line_maximise(&fam, row, 1.0, f64::NEG_INFINITY);
            if d != 0.0 {
                fam.apply(row, d);
                lambda[k] += d;
            }
        }
        for (k, row) in prog.inequalities.iter().enumerate() {
            // ν_k -> ν_k + δ, δ >= -ν_k, θ moves by -δ a, objective term -δ h
            let d = line_maximise(&fam, row, -1.0, -nu[k]);
            if d != 0.0 {
                fam.apply(row, -d);
                nu[k] += d;
            }
        }
        fam.renormalise();
        sweeps += 1;
        let p: Vec<f64> = fam.w.clone();
        let eq = prog.equalities.iter().map(|c| (c.eval(&p) - c.rhs).abs()).fold(0.0, f64::max);
        let iq = prog
            .inequalities
            .iter()
            .zip(&nu)
            .map(|(c, &v)| {
                let g = c.eval(&p) - c.rhs;
                if v > 0.0 {
                    g.abs()
                } else {
                    g.max(0.0)
                }
            })
            .fold(0.0, f64::max);
        gradient = eq.max(iq);
        if gradient < tol {
            break;
        }
    }
    let p = fam.w.clone();
    let mut theta = vec![0.0; p0.len()];
    for (c, &l) in prog.equalities.iter().zip(&lambda) {
        for &(i, a) in &c.coeffs {
            theta[i] += l * a;
        }
    }
    for (c, &v) in prog.inequalities.iter().zip(&nu) {
        for &(i, a) in &c.coeffs {
            theta[i] -= v * a;
        }
    }
    let log_z = p0.iter().zip(&theta).map(|(q, t)| q * t.exp()).sum::<f64>().ln();
    let value = prog.equalities.iter().zip(&lambda).map(|(c, l)| l * c.rhs).sum::<f64>()
        - prog.inequalities.iter().zip(&nu).map(|(c, v)| v * c.rhs).sum::<f64>()
        - log_z;
    Ok(DualSolution {
        value,
        lambda,
        nu,
        p,
        sweeps,
        gradient,
    })
}
