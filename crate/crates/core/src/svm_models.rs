//! Coefficients of the two-factor model
//!
//! ```text
//! dX = x σ̃(Y) dW
//! dY = b(X, Y) dt + τ1(X, Y) dW + τ2(X, Y) dW⊥
//! ```
//!
//! with the truncated Heston and SABR members of the catalogue and sampled
//! checks of the regularity assumptions the duality results rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model coefficients. `Custom` is tabulated in `y` and interpolated linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum SvmModel {
    /// `b = κ(θ - y)`, `σ̃ = √Id`, `τ1 = ρξ√Id`, `τ2 = ξ√(1-ρ²)√Id`, with
    /// `Id(y)` clamped to `[y_lo, y_hi]`.
    Heston {
        kappa: f64,
        theta: f64,
        xi: f64,
        rho: f64,
        y_lo: f64,
        y_hi: f64,
    },
    /// `σ̃ = exp(Id)`, `τ1 = 0`, `τ2` constant, `b = -τ2²/2`.
    Sabr { tau2: f64, y_lo: f64, y_hi: f64 },
    /// Constant coefficients; `σ̃ ≡ s` gives geometric Brownian motion in `X`.
    Constant {
        sigma_tilde: f64,
        b: f64,
        tau1: f64,
        tau2: f64,
    },
    #[serde(rename = "custom-tabulated")]
    Custom {
        y: Vec<f64>,
        sigma_tilde: Vec<f64>,
        b: Vec<f64>,
        tau1: Vec<f64>,
        tau2: Vec<f64>,
    },
}

/// A model together with its deterministic initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmSpec {
    #[serde(flatten)]
    pub model: SvmModel,
    pub x0: f64,
    pub y0: f64,
}

fn interp(ys: &[f64], vs: &[f64], y: f64) -> f64 {
    if y <= ys[0] {
        return vs[0];
    }
    let last = ys.len() - 1;
    if y >= ys[last] {
        return vs[last];
    }
    let i = ys.partition_point(|&v| v <= y) - 1;
    let t = (y - ys[i]) / (ys[i + 1] - ys[i]);
    (1.0 - t) * vs[i] + t * vs[i + 1]
}

/// Truncated Heston model.
pub fn make_heston(kappa: f64, theta: f64, xi: f64, rho: f64, truncation: (f64, f64)) -> Result<SvmModel> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: rho,
            constraint: "must lie in (-1, 1)".into(),
        });
    }
    for (name, v) in [("kappa", kappa), ("theta", theta), ("xi", xi)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter {
                name,
                value: v,
                constraint: "must be positive".into(),
            });
        }
    }
    let (y_lo, y_hi) = truncation;
    if !(y_lo > 0.0) {
        return Err(Error::InvalidParameter {
            name: "y_lo",
            value: y_lo,
            constraint: "truncation floor must be positive".into(),
        });
    }
    if !(y_hi > y_lo) {
        return Err(Error::InvalidParameter {
            name: "y_hi",
            value: y_hi,
            constraint: format!("must exceed the floor {y_lo}"),
        });
    }
    Ok(SvmModel::Heston {
        kappa,
        theta,
        xi,
        rho,
        y_lo,
        y_hi,
    })
}

/// Truncated SABR model. A zero `tau2` is accepted; the assumption report
/// then shows `lambda0 = inf`.
pub fn make_sabr(tau2: f64, truncation: (f64, f64)) -> Result<SvmModel> {
    crate::error::ensure_finite("tau2", tau2)?;
    let (y_lo, y_hi) = truncation;
    if !(y_hi > y_lo) {
        return Err(Error::InvalidParameter {
            name: "y_hi",
            value: y_hi,
            constraint: format!("must exceed {y_lo}"),
        });
    }
    Ok(SvmModel::Sabr { tau2, y_lo, y_hi })
}

impl SvmModel {
    pub fn sigma_tilde(&self, y: f64) -> f64 {
        match self {
            Self::Heston { y_lo, y_hi, .. } => y.clamp(*y_lo, *y_hi).sqrt(),
            Self::Sabr { y_lo, y_hi, .. } => y.clamp(*y_lo, *y_hi).exp(),
            Self::Constant { sigma_tilde, .. } => *sigma_tilde,
            Self::Custom { y: ys, sigma_tilde, .. } => interp(ys, sigma_tilde, y),
        }
    }

    /// `σ(x, y) = x σ̃(y)`.
    pub fn sigma(&self, x: f64, y: f64) -> f64 {
        x * self.sigma_tilde(y)
    }

    pub fn drift(&self, _x: f64, y: f64) -> f64 {
        match self {
            Self::Heston { kappa, theta, .. } => kappa * (theta - y),
            Self::Sabr { tau2, .. } => -0.5 * tau2 * tau2,
            Self::Constant { b, .. } => *b,
            Self::Custom { y: ys, b, .. } => interp(ys, b, y),
        }
    }

    pub fn tau1(&self, _x: f64, y: f64) -> f64 {
        match self {
            Self::Heston { xi, rho, y_lo, y_hi, .. } => rho * xi * y.clamp(*y_lo, *y_hi).sqrt(),
            Self::Sabr { .. } => 0.0,
            Self::Constant { tau1, .. } => *tau1,
            Self::Custom { y: ys, tau1, .. } => interp(ys, tau1, y),
        }
    }

    pub fn tau2(&self, _x: f64, y: f64) -> f64 {
        match self {
            Self::Heston { xi, rho, y_lo, y_hi, .. } => {
                xi * (1.0 - rho * rho).sqrt() * y.clamp(*y_lo, *y_hi).sqrt()
            }
            Self::Sabr { tau2, .. } => *tau2,
            Self::Constant { tau2, .. } => *tau2,
            Self::Custom { y: ys, tau2, .. } => interp(ys, tau2, y),
        }
    }

    /// Whether `τ2` is the same at every state.
    pub fn tau2_is_constant(&self) -> bool {
        match self {
            Self::Sabr { .. } | Self::Constant { .. } => true,
            Self::Heston { .. } => false,
            Self::Custom { tau2, .. } => tau2.windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// `sup σ̃` over `y_range`, exact for the catalogue's monotone `σ̃`.
    pub fn sigma_tilde_max(&self, y_range: (f64, f64)) -> f64 {
        let n = 257;
        (0..n)
            .map(|i| y_range.0 + (y_range.1 - y_range.0) * i as f64 / (n - 1) as f64)
            .map(|y| self.sigma_tilde(y).abs())
            .chain([self.sigma_tilde(y_range.0).abs(), self.sigma_tilde(y_range.1).abs()])
            .fold(0.0, f64::max)
    }
}

/// Which assumption set to check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    A3,
    A4,
}

/// Rectangle of sample points for the checks.
#[derive(Clone, Copy, Debug)]
pub struct SampleGrid {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub n: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzEstimate {
    pub coarse: f64,
    pub fine: f64,
    /// The estimate does not grow under a four-fold refinement.
    pub stable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub which: Assumption,
    pub lip_sigma_tilde: LipschitzEstimate,
    pub lip_b: LipschitzEstimate,
    pub lip_tau1: LipschitzEstimate,
    pub lip_tau2: LipschitzEstimate,
    /// Smallest `λ0` with `|Db| + |Dτ2| <= λ0 |τ2|` on the samples.
    pub lambda0: f64,
    /// Smallest `C` with `|τ1| + |τ2| + |b| <= C (1 + |y|)`.
    pub growth_constant: f64,
    pub sigma_tilde_sup: f64,
    pub sigma_tilde_bounded: bool,
    pub lip_b_exp: LipschitzEstimate,
    pub clauses: Vec<(String, bool)>,
    pub pass: bool,
    pub warnings: Vec<String>,
}

fn lattice(range: (f64, f64), n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Largest difference quotient of `f` along lines of a lattice with `n`
/// points per axis in the refined direction and `m` lines.
fn lipschitz_lines(f: &dyn Fn(f64, f64) -> f64, xr: (f64, f64), yr: (f64, f64), n: usize, m: usize) -> f64 {
    let mut best: f64 = 0.0;
    let xs = lattice(xr, n);
    let ys = lattice(yr, n);
    for &y in &lattice(yr, m) {
        for w in xs.windows(2) {
            best = best.max((f(w[1], y) - f(w[0], y)).abs() / (w[1] - w[0]));
        }
    }
    for &x in &lattice(xr, m) {
        for w in ys.windows(2) {
            best = best.max((f(x, w[1]) - f(x, w[0])).abs() / (w[1] - w[0]));
        }
    }
    best
}

const MAX_REFINEMENTS: usize = 6;

/// Refines four-fold until the estimate stops growing. A function with an
/// unbounded derivative never settles.
fn lipschitz_estimate(f: &dyn Fn(f64, f64) -> f64, xr: (f64, f64), yr: (f64, f64), n: usize) -> LipschitzEstimate {
    let m = n.min(9);
    let mut k = n;
    let mut coarse = lipschitz_lines(f, xr, yr, k, m);
    let mut fine = coarse;
    for level in 0..MAX_REFINEMENTS {
        if level > 0 {
            coarse = fine;
        }
        k = 4 * k - 3;
        fine = lipschitz_lines(f, xr, yr, k, m);
        if fine.is_finite() && fine <= 1.25 * coarse + 1e-12 {
            return LipschitzEstimate {
                coarse,
                fine,
                stable: true,
            };
        }
    }
    LipschitzEstimate {
        coarse,
        fine,
        stable: false,
    }
}

/// Sampled check of the regularity, ratio and growth conditions.
pub fn check_assumptions(model: &SvmModel, which: Assumption, grid: SampleGrid) -> AssumptionReport {
    let n = grid.n.max(5);
    let (xr, yr) = (grid.x, grid.y);
    let st = |_: f64, y: f64| model.sigma_tilde(y);
    let b = |x: f64, y: f64| model.drift(x, y);
    let t1 = |x: f64, y: f64| model.tau1(x, y);
    let t2 = |x: f64, y: f64| model.tau2(x, y);
    let lip_sigma_tilde = lipschitz_estimate(&st, xr, yr, n);
    let lip_b = lipschitz_estimate(&b, xr, yr, n);
    let lip_tau1 = lipschitz_estimate(&t1, xr, yr, n);
    let lip_tau2 = lipschitz_estimate(&t2, xr, yr, n);

    let xs = lattice(xr, n);
    let ys = lattice(yr, n);
    let hx = 1e-6 * (1.0 + (xr.1 - xr.0).abs());
    let hy = 1e-6 * (1.0 + (yr.1 - yr.0).abs());
    let grad = |f: &dyn Fn(f64, f64) -> f64, x: f64, y: f64| {
        let gx = (f(x + hx, y) - f(x - hx, y)) / (2.0 * hx);
        let gy = (f(x, y + hy) - f(x, y - hy)) / (2.0 * hy);
        gx.hypot(gy)
    };
    let mut lambda0: f64 = 0.0;
    let mut growth_constant: f64 = 0.0;
    let mut warnings = Vec::new();
    for &x in &xs {
        for &y in &ys {
            let num = grad(&b, x, y) + grad(&t2, x, y);
            let den = t2(x, y).abs();
            let ratio = if den > 0.0 {
                num / den
            } else if num > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            };
            lambda0 = lambda0.max(ratio);
            let g = (t1(x, y).abs() + t2(x, y).abs() + b(x, y).abs()) / (1.0 + y.abs());
            growth_constant = growth_constant.max(g);
        }
    }
    if ys.iter().any(|&y| xs.iter().any(|&x| t2(x, y) == 0.0)) {
        warnings.push("tau2 vanishes on the sample grid; the ratio bound degenerates".to_string());
        if lambda0 == 0.0 {
            lambda0 = f64::INFINITY;
        }
    }

    let sigma_tilde_sup = ys.iter().map(|&y| model.sigma_tilde(y).abs()).fold(0.0, f64::max);
    let width = yr.1 - yr.0;
    let wide = (yr.0 - width, yr.1 + width);
    let wide_sup = lattice(wide, 3 * n)
        .iter()
        .map(|&y| model.sigma_tilde(y).abs())
        .fold(0.0, f64::max);
    let sigma_tilde_bounded = sigma_tilde_sup.is_finite() && wide_sup <= sigma_tilde_sup * (1.0 + 1e-9) + 1e-12;

    let b_exp = |w: f64, y: f64| model.drift(w.exp(), y);
    let wr = (xr.0.max(1e-12).ln(), xr.1.max(1e-12).ln());
    let lip_b_exp = lipschitz_estimate(&b_exp, wr, yr, n);

    let mut clauses = vec![
        ("sigma_tilde Lipschitz".to_string(), lip_sigma_tilde.stable),
        ("b Lipschitz".to_string(), lip_b.stable),
        ("tau1 Lipschitz".to_string(), lip_tau1.stable),
        ("tau2 Lipschitz".to_string(), lip_tau2.stable),
        ("ratio bound lambda0 finite".to_string(), lambda0.is_finite()),
        ("linear growth".to_string(), growth_constant.is_finite()),
    ];
    if which == Assumption::A4 {
        clauses.push(("sigma_tilde bounded".to_string(), sigma_tilde_bounded));
        clauses.push(("b(e^w, y) Lipschitz".to_string(), lip_b_exp.stable));
    }
    let pass = clauses.iter().all(|(_, ok)| *ok);
    AssumptionReport {
        which,
        lip_sigma_tilde,
        lip_b,
        lip_tau1,
        lip_tau2,
        lambda0,
        growth_constant,
        sigma_tilde_sup,
        sigma_tilde_bounded,
        lip_b_exp,
        clauses,
        pass,
        warnings,
    }
}
