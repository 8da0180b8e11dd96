//! Running costs `L(b)` on `b >= 0` and their tabulated Hamiltonians
//! `H(a) = sup_{b >= 0} { -a b - L(b) }`.
//!
//! `H` is stored on an `a`-grid together with the maximiser `b*(a)`, so
//! `H'(a) = -b*(a)` is read from the table rather than differentiated.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Grid1D;

/// Defaults for table construction.
pub const DEFAULT_B_POINTS: usize = 4001;
pub const DEFAULT_A_POINTS: usize = 2001;

/// Catalogue of convex costs on `[0, ∞)`.
#[derive(Clone)]
pub enum Lagrangian {
    /// `b^2 / gamma`
    Quadratic { gamma: f64 },
    /// `b^p / p`
    Power { p: f64 },
    /// `b log b - b + 1`, equal to `1` at `b = 0`
    EntropicLike,
    /// Piecewise-linear through `(b, L)` samples; constant extension past the ends.
    Tabulated { b: Vec<f64>, l: Vec<f64> },
    /// Arbitrary closure, for programmatic use.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Lagrangian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Quadratic { gamma } => write!(f, "Quadratic {{ gamma: {gamma} }}"),
            Self::Power { p } => write!(f, "Power {{ p: {p} }}"),
            Self::EntropicLike => write!(f, "EntropicLike"),
            Self::Tabulated { b, .. } => write!(f, "Tabulated({} points)", b.len()),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Lagrangian {
    pub fn eval(&self, b: f64) -> f64 {
        match self {
            Self::Quadratic { gamma } => b * b / gamma,
            Self::Power { p } => b.powf(*p) / p,
            Self::EntropicLike => {
                if b <= 0.0 {
                    1.0
                } else {
                    b * b.ln() - b + 1.0
                }
            }
            Self::Tabulated { b: bs, l } => {
                if b <= bs[0] {
                    return l[0];
                }
                let last = bs.len() - 1;
                if b >= bs[last] {
                    return l[last];
                }
                let i = bs.partition_point(|&x| x <= b) - 1;
                let t = (b - bs[i]) / (bs[i + 1] - bs[i]);
                (1.0 - t) * l[i] + t * l[i + 1]
            }
            Self::Custom(f) => f(b),
        }
    }

    /// Catalogue lookup by configuration key.
    pub fn from_key(key: &str, param: Option<f64>) -> Result<Self> {
        match key {
            "quadratic" => {
                let gamma = param.unwrap_or(1.0);
                if !(gamma > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "gamma",
                        value: gamma,
                        constraint: "must be positive".into(),
                    });
                }
                Ok(Self::Quadratic { gamma })
            }
            "power" => {
                let p = param.unwrap_or(2.0);
                if !(p >= 1.0) {
                    return Err(Error::InvalidParameter {
                        name: "p",
                        value: p,
                        constraint: "must be at least 1".into(),
                    });
                }
                Ok(Self::Power { p })
            }
            "entropic_like" => Ok(Self::EntropicLike),
            other => Err(Error::Domain(format!("unknown Lagrangian key `{other}`"))),
        }
    }

    /// Reads a `b,L` CSV with a header row.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            b: f64,
            #[serde(rename = "L")]
            l: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let (mut b, mut l) = (Vec::new(), Vec::new());
        for row in rdr.deserialize() {
            let row: Row = row?;
            b.push(row.b);
            l.push(row.l);
        }
        Grid1D::new(b.clone())?;
        Ok(Self::Tabulated { b, l })
    }
}

/// Sampled certificate for the cost assumptions.
#[derive(Clone, Debug, Serialize)]
pub struct CostCertificate {
    /// Estimated `C` in `L(b) >= C b^p - C'`.
    pub coercivity_constant: f64,
    pub coercivity_offset: f64,
    pub coercive: bool,
    /// Largest midpoint-convexity defect on sampled triples.
    pub max_convexity_defect: f64,
    pub convex: bool,
}

/// A cost with its declared coercivity exponent and sampled certificate.
#[derive(Clone, Debug)]
pub struct LagrangianSpec {
    pub cost: Lagrangian,
    pub p: f64,
    pub certificate: CostCertificate,
}

impl LagrangianSpec {
    /// Certifies `cost` on `n` samples of `[0, b_max]`.
    pub fn new(cost: Lagrangian, p: f64, b_max: f64, n: usize) -> Result<Self> {
        if !(p >= 2.0) {
            return Err(Error::InvalidParameter {
                name: "p",
                value: p,
                constraint: "coercivity exponent must be at least 2".into(),
            });
        }
        if !(b_max > 0.0) || n < 3 {
            return Err(Error::InvalidParameter {
                name: "b_max",
                value: b_max,
                constraint: "need b_max > 0 and at least 3 samples".into(),
            });
        }
        let h = b_max / (n - 1) as f64;
        let l: Vec<f64> = (0..n).map(|i| cost.eval(h * i as f64)).collect();
        let max_convexity_defect = (1..n - 1)
            .map(|i| l[i] - 0.5 * (l[i - 1] + l[i + 1]))
            .fold(0.0, f64::max);

        let ratio = |b: f64| cost.eval(b) / b.powf(p);
        let c_hi = ratio(b_max);
        let c_mid = ratio(0.5 * b_max);
        let coercivity_constant = c_hi.min(c_mid);
        let coercivity_offset = (0..n)
            .map(|i| {
                let b = h * i as f64;
                coercivity_constant * b.powf(p) - l[i]
            })
            .fold(0.0, f64::max);
        let certificate = CostCertificate {
            coercivity_constant,
            coercivity_offset,
            coercive: c_hi > 0.0 && c_hi >= 0.75 * c_mid,
            max_convexity_defect,
            convex: max_convexity_defect <= 1e-10,
        };
        Ok(Self {
            cost,
            p,
            certificate,
        })
    }

    /// Catalogue cost certified on `[0, b_max]`. The exponent defaults to 2,
    /// or to `p` for the power family.
    pub fn from_key(key: &str, param: Option<f64>, b_max: f64) -> Result<Self> {
        let cost = Lagrangian::from_key(key, param)?;
        let p = match &cost {
            Lagrangian::Power { p } => p.max(2.0),
            _ => 2.0,
        };
        Self::new(cost, p, b_max, DEFAULT_B_POINTS)
    }

    pub fn eval(&self, b: f64) -> f64 {
        self.cost.eval(b)
    }
}

/// Tabulated Hamiltonian with maximisers.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    a: Vec<f64>,
    h: Vec<f64>,
    b_star: Vec<f64>,
    b_max: f64,
    n_b: usize,
    capped: bool,
    spec: LagrangianSpec,
    /// Cost on the `b`-grid `j * b_max / (n_b - 1)`.
    costs: Vec<f64>,
}

/// Brute-force discrete sup over the `b`-grid; ties go to the smallest `b`.
fn discrete_sup(bs: &[f64], ls: &[f64], a: f64) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (j, (&b, &l)) in bs.iter().zip(ls).enumerate() {
        let v = -a * b - l;
        if v > best {
            best = v;
            arg = j;
        }
    }
    (best, arg)
}

/// Builds the `H` table on `a_grid` by maximising over `n_b` points of `[0, b_max]`.
///
/// Fails with [`Error::Truncation`] when a maximiser lands on `b_max`, since
/// the sup over `b >= 0` would then be cut off by the grid.
pub fn legendre(spec: &LagrangianSpec, a_grid: &[f64], b_max: f64, n_b: usize) -> Result<Hamiltonian> {
    tabulate(spec, a_grid, b_max, n_b, true)
}

/// Like [`legendre`] but for controls restricted to `[0, b_max]`: a
/// maximiser on the cap is accepted.
pub fn legendre_capped(spec: &LagrangianSpec, a_grid: &[f64], b_max: f64, n_b: usize) -> Result<Hamiltonian> {
    tabulate(spec, a_grid, b_max, n_b, false)
}

fn tabulate(spec: &LagrangianSpec, a_grid: &[f64], b_max: f64, n_b: usize, guard: bool) -> Result<Hamiltonian> {
    Grid1D::new(a_grid.to_vec())?;
    if !(b_max > 0.0) || n_b < 3 {
        return Err(Error::InvalidParameter {
            name: "b_max",
            value: b_max,
            constraint: "need b_max > 0 and n_b >= 3".into(),
        });
    }
    let db = b_max / (n_b - 1) as f64;
    let bs: Vec<f64> = (0..n_b).map(|j| db * j as f64).collect();
    let ls: Vec<f64> = bs.iter().map(|&b| spec.eval(b)).collect();
    if let Some(l) = ls.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numerical(format!("cost evaluates to {l} on [0, b_max]")));
    }
    let mut h = Vec::with_capacity(a_grid.len());
    let mut b_star = Vec::with_capacity(a_grid.len());
    for &a in a_grid {
        let (v, j) = discrete_sup(&bs, &ls, a);
        if guard && j == n_b - 1 {
            return Err(Error::Truncation {
                a,
                suggested_b_max: 2.0 * b_max,
            });
        }
        h.push(v);
        b_star.push(bs[j]);
    }
    let table = Hamiltonian {
        a: a_grid.to_vec(),
        h,
        b_star,
        b_max,
        n_b,
        capped: !guard,
        spec: spec.clone(),
        costs: ls,
    };
    table.check_shape()?;
    Ok(table)
}

/// Symmetric `a`-grid `[-half_width, half_width]`.
pub fn symmetric_a_grid(half_width: f64, n: usize) -> Vec<f64> {
    let step = 2.0 * half_width / (n - 1) as f64;
    (0..n).map(|i| -half_width + step * i as f64).collect()
}

impl Hamiltonian {
    fn check_shape(&self) -> Result<()> {
        let tol = 1e-9 * (1.0 + self.h.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for i in 1..self.a.len() {
            if self.h[i] > self.h[i - 1] + tol {
                return Err(Error::Numerical(format!("H increases at a = {}", self.a[i])));
            }
            if self.b_star[i] > self.b_star[i - 1] {
                return Err(Error::Numerical(format!("b* increases at a = {}", self.a[i])));
            }
        }
        for i in 1..self.a.len() - 1 {
            let s0 = (self.h[i] - self.h[i - 1]) / (self.a[i] - self.a[i - 1]);
            let s1 = (self.h[i + 1] - self.h[i]) / (self.a[i + 1] - self.a[i]);
            if s1 < s0 - tol / (self.a[i + 1] - self.a[i]) {
                return Err(Error::Numerical(format!("H not convex at a = {}", self.a[i])));
            }
        }
        Ok(())
    }

    pub fn a_grid(&self) -> &[f64] {
        &self.a
    }

    pub fn values(&self) -> &[f64] {
        &self.h
    }

    pub fn maximisers(&self) -> &[f64] {
        &self.b_star
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    pub fn spec(&self) -> &LagrangianSpec {
        &self.spec
    }

    /// Largest maximiser in the table; bounds every control the table can produce.
    pub fn max_control(&self) -> f64 {
        self.b_star.iter().fold(0.0, |m, &b| m.max(b))
    }

    pub fn range(&self) -> (f64, f64) {
        (self.a[0], self.a[self.a.len() - 1])
    }

    fn locate(&self, a: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.range();
        if !(a >= lo && a <= hi) {
            return Err(Error::OutOfRange { value: a, lo, hi });
        }
        let i = self.a.partition_point(|&x| x <= a).saturating_sub(1).min(self.a.len() - 2);
        let t = (a - self.a[i]) / (self.a[i + 1] - self.a[i]);
        Ok((i, t))
    }

    /// Piecewise-linear interpolant of `H`.
    pub fn eval(&self, a: f64) -> Result<f64> {
        let (i, t) = self.locate(a)?;
        Ok((1.0 - t) * self.h[i] + t * self.h[i + 1])
    }

    /// Interpolated maximiser `b*(a) >= 0`.
    pub fn argmax(&self, a: f64) -> Result<f64> {
        let (i, t) = self.locate(a)?;
        Ok((1.0 - t) * self.b_star[i] + t * self.b_star[i + 1])
    }

    /// Exact maximiser over the `b`-grid with its value `-a b - L(b)`. Ties
    /// go to the smallest `b`. The search starts from the interpolated
    /// maximiser and climbs, which is exact because `b -> -a b - L(b)` is
    /// concave. Above the table the answer stays `b = 0` once it is `0` at
    /// the top entry, so only that case is extended.
    pub fn control_value(&self, a: f64) -> Result<(f64, f64)> {
        let (_, hi) = self.range();
        if a > hi && self.b_star[self.a.len() - 1] == 0.0 && self.control_value(hi)?.0 == 0.0 {
            return Ok((0.0, -self.costs[0]));
        }
        let guess = self.argmax(a)?;
        let db = self.b_max / (self.n_b - 1) as f64;
        let f = |j: usize| -a * (db * j as f64) - self.costs[j];
        let mut j = ((guess / db).round() as usize).min(self.n_b - 1);
        while j + 1 < self.n_b && f(j + 1) > f(j) {
            j += 1;
        }
        while j > 0 && f(j - 1) >= f(j) {
            j -= 1;
        }
        Ok((db * j as f64, f(j)))
    }

    /// Discrete `H(a)`: the sup over the `b`-grid.
    pub fn sup_value(&self, a: f64) -> Result<f64> {
        Ok(self.control_value(a)?.1)
    }

    /// Discrete Legendre transform back to the cost, over the `a`-table.
    pub fn conjugate(&self, b: f64) -> f64 {
        self.a
            .iter()
            .zip(&self.h)
            .map(|(&a, &h)| -a * b - h)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same cost and range with both grids refined by a factor two.
    pub fn refined(&self) -> Result<Hamiltonian> {
        let mut a = Vec::with_capacity(2 * self.a.len() - 1);
        for w in self.a.windows(2) {
            a.push(w[0]);
            a.push(0.5 * (w[0] + w[1]));
        }
        a.push(self.a[self.a.len() - 1]);
        tabulate(&self.spec, &a, self.b_max, 2 * self.n_b - 1, !self.capped)
    }

    fn max_slope_jump(&self) -> f64 {
        let slopes: Vec<f64> = (0..self.a.len() - 1)
            .map(|i| (self.h[i + 1] - self.h[i]) / (self.a[i + 1] - self.a[i]))
            .collect();
        slopes.windows(2).map(|s| (s[1] - s[0]).abs()).fold(0.0, f64::max)
    }
}

/// `-H'(a) = b*(a)`, read from the stored maximisers.
pub fn h_prime(h: &Hamiltonian, a: f64) -> Result<f64> {
    Ok(-h.argmax(a)?)
}

/// Result of the numerical `C^1` test.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmoothnessReport {
    pub coarse_jump: f64,
    pub fine_jump: f64,
    pub smooth: bool,
}

/// `H` counts as `C^1` when the largest slope jump between consecutive
/// table segments shrinks by at least a factor `2 / 1.5` under refinement.
pub fn check_a2(h: &Hamiltonian) -> Result<SmoothnessReport> {
    let fine = h.refined()?;
    let coarse_jump = h.max_slope_jump();
    let fine_jump = fine.max_slope_jump();
    let smooth = coarse_jump < 1e-12 || fine_jump <= 0.75 * coarse_jump;
    Ok(SmoothnessReport {
        coarse_jump,
        fine_jump,
        smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> LagrangianSpec {
        LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 10.0, 1001).unwrap()
    }

    /// Brute force over a fine `b` grid, independent of the table code.
    fn brute_sup(l: impl Fn(f64) -> f64, a: f64, b_max: f64, n: usize) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for j in 0..n {
            let b = b_max * j as f64 / (n - 1) as f64;
            let v = -a * b - l(b);
            if v > best.0 {
                best = (v, b);
            }
        }
        best
    }

    #[test]
    fn quadratic_examples() {
        let spec = quad();
        let (v, b) = brute_sup(|b| b * b, -2.0, 10.0, 4001);
        assert!((v - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let h = legendre(&spec, &symmetric_a_grid(4.0, 401), 10.0, 4001).unwrap();
        assert!((h.eval(-2.0).unwrap() - v).abs() < 1e-12);
        assert!((h_prime(&h, -2.0).unwrap() + b).abs() < 1e-12);
        assert_eq!(h.eval(3.0).unwrap(), 0.0);
        assert_eq!(h.argmax(3.0).unwrap(), 0.0);
        assert_eq!(h_prime(&h, 1.0).unwrap(), 0.0);
        assert!(matches!(h_prime(&h, 5.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn half_quadratic_at_zero() {
        let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 2.0 }, 2.0, 10.0, 101).unwrap();
        let h = legendre(&spec, &symmetric_a_grid(1.0, 21), 10.0, 1001).unwrap();
        assert_eq!(h.eval(0.0).unwrap(), 0.0);
    }

    #[test]
    fn uniformly_elliptic_cost() {
        let lambda = 0.5;
        let cost = Lagrangian::Custom(Arc::new(move |b| 0.5 * b * b - lambda * b));
        let spec = LagrangianSpec::new(cost, 2.0, 20.0, 101).unwrap();
        let h = legendre(&spec, &symmetric_a_grid(5.0, 201), 20.0, 4001).unwrap();
        for &a in h.a_grid().iter().filter(|&&a| a < -lambda) {
            let (_, b) = brute_sup(|b| 0.5 * b * b - lambda * b, a, 20.0, 4001);
            assert!((h_prime(&h, a).unwrap() + b).abs() < 1e-12);
            assert!(h_prime(&h, a).unwrap() <= -lambda);
        }
    }

    #[test]
    fn truncation_is_reported() {
        let spec = quad();
        match legendre(&spec, &symmetric_a_grid(40.0, 101), 10.0, 1001) {
            Err(Error::Truncation { suggested_b_max, .. }) => assert!(suggested_b_max > 10.0),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn smoothness_check() {
        let h = legendre(&quad(), &symmetric_a_grid(4.0, 201), 10.0, 2001).unwrap();
        assert!(check_a2(&h).unwrap().smooth);
        // L(b) = b on [0, 5]: H(a) = max(0, -5 (a + 1)) keeps its kink at a = -1
        let lin = LagrangianSpec::new(Lagrangian::Custom(Arc::new(|b| b)), 2.0, 5.0, 11).unwrap();
        let hk = legendre_capped(&lin, &symmetric_a_grid(2.0, 201), 5.0, 101).unwrap();
        let r = check_a2(&hk).unwrap();
        assert!(!r.smooth, "{r:?}");
        assert!(r.fine_jump > 0.9 * r.coarse_jump);
    }

    #[test]
    fn flat_table_is_smooth() {
        // L = b^2 only sees a > 0, where H vanishes identically
        let grid = [1.0, 2.0, 3.0];
        let h = legendre(&quad(), &grid, 1.0, 11).unwrap();
        assert_eq!(h.values(), &[0.0, 0.0, 0.0]);
        assert!(check_a2(&h).unwrap().smooth);
    }

    #[test]
    fn certificates() {
        assert!(quad().certificate.coercive && quad().certificate.convex);
        let ent = LagrangianSpec::from_key("entropic_like", None, 20.0).unwrap();
        assert!(ent.certificate.convex);
        assert!(!ent.certificate.coercive);
        let cube = LagrangianSpec::from_key("power", Some(3.0), 20.0).unwrap();
        assert!(cube.certificate.coercive);
        let concave = LagrangianSpec::new(Lagrangian::Custom(Arc::new(|b: f64| -b * b)), 2.0, 1.0, 11).unwrap();
        assert!(!concave.certificate.convex);
        assert!(Lagrangian::from_key("cubic", None).is_err());
    }

    #[test]
    fn tabulated_cost_interpolates() {
        let t = Lagrangian::Tabulated {
            b: vec![0.0, 1.0, 2.0],
            l: vec![0.0, 1.0, 4.0],
        };
        assert_eq!(t.eval(0.5), 0.5);
        assert_eq!(t.eval(1.5), 2.5);
        assert_eq!(t.eval(3.0), 4.0);
    }
}
