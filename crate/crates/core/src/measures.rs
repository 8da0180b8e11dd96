//! Atomic probability measures on one-dimensional grids.
//!
//! Measures here are finite sums of point masses sitting on grid nodes, so
//! every integral is an exact weighted sum. Convex order is tested with the
//! call-function family `(x - K)+` on the union of both node sets, which is
//! complete for piecewise-linear convex test functions.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for call-function inequalities and mean equality.
pub const ORDER_TOL: f64 = 1e-10;
/// Tolerance on total mass for a strictly constructed measure.
pub const MASS_TOL: f64 = 1e-12;
/// Negative weights above this are clipped to zero when renormalising.
pub const CLIP_TOL: f64 = 1e-14;

/// Strictly increasing finite nodes, at least three of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid1D {
    nodes: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Grid1D {
    type Error = Error;

    fn try_from(nodes: Vec<f64>) -> Result<Self> {
        Grid1D::new(nodes)
    }
}

impl From<Grid1D> for Vec<f64> {
    fn from(g: Grid1D) -> Self {
        g.nodes
    }
}

impl Grid1D {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        if let Some(x) = nodes.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite node {x}")));
        }
        if let Some(w) = nodes.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "nodes not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { nodes })
    }

    /// `n` equally spaced nodes covering `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n < 3 {
            return Err(Error::InvalidGrid(format!(
                "uniform grid needs lo < hi and n >= 3 (got [{lo}, {hi}], n = {n})"
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        nodes[n - 1] = hi;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Spacing `x[i+1] - x[i]`.
    pub fn spacing(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.len() - 1)
            .map(|i| self.spacing(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.len() - 1)
            .map(|i| self.spacing(i))
            .fold(0.0, f64::max)
    }

    /// Index of the node equal to `x` within `tol`, if any.
    pub fn find_node(&self, x: f64, tol: f64) -> Option<usize> {
        let i = self.nodes.partition_point(|&n| n < x - tol);
        (i < self.len() && (self.nodes[i] - x).abs() <= tol).then_some(i)
    }

    /// Cell `i` with `x[i] <= x <= x[i+1]` and the weight on `x[i]` of the
    /// linear interpolant. Points outside the grid are an error.
    pub fn locate(&self, x: f64) -> Result<(usize, f64)> {
        if x < self.lo() || x > self.hi() || !x.is_finite() {
            return Err(Error::OutOfRange {
                value: x,
                lo: self.lo(),
                hi: self.hi(),
            });
        }
        let i = self
            .nodes
            .partition_point(|&n| n <= x)
            .saturating_sub(1)
            .min(self.len() - 2);
        let theta = (self.nodes[i + 1] - x) / self.spacing(i);
        Ok((i, theta.clamp(0.0, 1.0)))
    }

    /// Piecewise-linear interpolation of nodal `values` at `x`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> Result<f64> {
        let (i, theta) = self.locate(x)?;
        Ok(theta * values[i] + (1.0 - theta) * values[i + 1])
    }

    /// Samples `f` at every node.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    /// Same interior nodes with `extra` equally spaced nodes appended on
    /// each side, keeping the end spacings.
    pub fn extended(&self, extra: usize) -> Grid1D {
        let h_lo = self.spacing(0);
        let h_hi = self.spacing(self.len() - 2);
        let mut nodes: Vec<f64> = (1..=extra)
            .rev()
            .map(|k| self.lo() - h_lo * k as f64)
            .collect();
        nodes.extend_from_slice(&self.nodes);
        nodes.extend((1..=extra).map(|k| self.hi() + h_hi * k as f64));
        Grid1D { nodes }
    }
}

/// Probability weights attached to the nodes of a [`Grid1D`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    grid: Grid1D,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridMeasureRepr {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Serialize for GridMeasure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridMeasureRepr {
            nodes: self.grid.nodes.clone(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GridMeasureRepr::deserialize(d)?;
        let grid = Grid1D::new(repr.nodes).map_err(serde::de::Error::custom)?;
        GridMeasure::new(grid, repr.weights).map_err(serde::de::Error::custom)
    }
}

impl GridMeasure {
    pub fn new(grid: Grid1D, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} weights for {} nodes",
                weights.len(),
                grid.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure(format!("weight {w} is not a finite nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("total mass {total} differs from 1")));
        }
        Ok(Self { grid, weights })
    }

    /// Clips weights in `[-CLIP_TOL, 0)` to zero and renormalises. Larger
    /// negative weights or a vanishing total are errors.
    pub fn normalized(grid: Grid1D, mut weights: Vec<f64>) -> Result<Self> {
        for w in weights.iter_mut() {
            if *w < 0.0 {
                if *w < -CLIP_TOL {
                    return Err(Error::InvalidMeasure(format!("negative weight {w}")));
                }
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidMeasure(format!("total mass {total}")));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(grid, weights)
    }

    /// Point masses placed on existing grid nodes.
    pub fn from_atoms(grid: Grid1D, atoms: &[(f64, f64)]) -> Result<Self> {
        let mut weights = vec![0.0; grid.len()];
        for &(x, w) in atoms {
            let i = grid
                .find_node(x, 1e-12 * (1.0 + x.abs()))
                .ok_or_else(|| Error::InvalidMeasure(format!("atom {x} is not a grid node")))?;
            weights[i] += w;
        }
        Self::new(grid, weights)
    }

    /// Point masses at arbitrary locations inside the grid, each split
    /// between its two neighbouring nodes so the mean is preserved.
    pub fn project_atoms(grid: Grid1D, atoms: &[(f64, f64)]) -> Result<Self> {
        let mut weights = vec![0.0; grid.len()];
        for &(x, w) in atoms {
            let (i, theta) = grid.locate(x)?;
            weights[i] += w * theta;
            weights[i + 1] += w * (1.0 - theta);
        }
        Self::normalized(grid, weights)
    }

    /// Weights proportional to `density(x) * cell width` (trapezoidal).
    pub fn from_density(grid: Grid1D, density: impl Fn(f64) -> f64) -> Result<Self> {
        let n = grid.len();
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i > 0 { grid.spacing(i - 1) } else { 0.0 };
                let right = if i + 1 < n { grid.spacing(i) } else { 0.0 };
                density(grid.nodes[i]) * 0.5 * (left + right)
            })
            .collect();
        Self::normalized(grid, weights)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn nodes(&self) -> &[f64] {
        self.grid.nodes()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes()
            .iter()
            .zip(&self.weights)
            .map(|(&x, w)| w * f(x))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expect(|x| (x - m) * (x - m))
    }

    pub fn call(&self, strike: f64) -> f64 {
        self.expect(|x| (x - strike).max(0.0))
    }

    pub fn put(&self, strike: f64) -> f64 {
        self.expect(|x| (strike - x).max(0.0))
    }

    /// Atoms with positive weight.
    pub fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes()
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
            .filter(|(_, w)| *w > 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Outcome of an order test: whether it holds and the worst violation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrderReport {
    pub holds: bool,
    pub max_violation: f64,
    /// Strike (or `NaN` for the mean test) where the worst violation sits.
    pub worst_strike: f64,
}

fn union_strikes(mu: &GridMeasure, nu: &GridMeasure) -> Vec<f64> {
    let mut ks: Vec<f64> = mu.nodes().iter().chain(nu.nodes()).copied().collect();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    ks
}

/// `mu <=_c nu`: equal means and `∫(x-K)+ dmu <= ∫(x-K)+ dnu` on all strikes.
pub fn convex_order(mu: &GridMeasure, nu: &GridMeasure) -> OrderReport {
    let mut worst = (mu.mean() - nu.mean()).abs();
    let mut worst_strike = f64::NAN;
    for k in union_strikes(mu, nu) {
        let v = mu.call(k) - nu.call(k);
        if v > worst {
            worst = v;
            worst_strike = k;
        }
    }
    OrderReport {
        holds: worst <= ORDER_TOL,
        max_violation: worst.max(0.0),
        worst_strike,
    }
}

/// `mu <=_{c,l} nu` on `[0, ∞)`, tested with `(x-K)+` and `(K-x)+` for
/// `K` in `{0} ∪ nodes`. No separate mean condition is imposed.
pub fn convex_order_lower(mu: &GridMeasure, nu: &GridMeasure) -> Result<OrderReport> {
    for m in [mu, nu] {
        if m.grid().lo() < 0.0 {
            return Err(Error::Domain(format!(
                "lower convex order needs support in [0, inf), found node {}",
                m.grid().lo()
            )));
        }
    }
    let mut ks = union_strikes(mu, nu);
    ks.insert(0, 0.0);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_strike = f64::NAN;
    for k in ks {
        for v in [mu.call(k) - nu.call(k), mu.put(k) - nu.put(k)] {
            if v > worst {
                worst = v;
                worst_strike = k;
            }
        }
    }
    Ok(OrderReport {
        holds: worst <= ORDER_TOL,
        max_violation: worst.max(0.0),
        worst_strike,
    })
}

/// Wasserstein-2 distance through the monotone (quantile) coupling.
pub fn wasserstein2(mu: &GridMeasure, nu: &GridMeasure) -> f64 {
    let a: Vec<(f64, f64)> = mu.support().collect();
    let b: Vec<(f64, f64)> = nu.support().collect();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b[j].1;
        }
    }
    cost.max(0.0).sqrt()
}

/// Call prices of one maturity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallCurve {
    pub maturity: f64,
    pub strikes: Vec<f64>,
    pub prices: Vec<f64>,
    /// Optional forward for the `C >= (F - K)+` check.
    #[serde(default)]
    pub forward: Option<f64>,
}

/// Tolerance for the static-arbitrage checks on call curves.
pub const ARBITRAGE_TOL: f64 = 1e-8;

#[derive(Deserialize)]
struct CsvRow {
    strike: f64,
    price: f64,
}

impl CallCurve {
    pub fn new(maturity: f64, strikes: Vec<f64>, prices: Vec<f64>) -> Self {
        Self {
            maturity,
            strikes,
            prices,
            forward: None,
        }
    }

    /// Reads a `strike,price` CSV with a header row.
    pub fn from_csv_reader(maturity: f64, reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            strikes.push(row.strike);
            prices.push(row.price);
        }
        Ok(Self::new(maturity, strikes, prices))
    }

    pub fn from_csv_path(maturity: f64, path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(maturity, file)
    }

    fn slopes(&self) -> Vec<f64> {
        self.strikes
            .windows(2)
            .zip(self.prices.windows(2))
            .map(|(k, c)| (c[1] - c[0]) / (k[1] - k[0]))
            .collect()
    }

    /// Static no-arbitrage checks: at least three increasing strikes,
    /// nonnegative nonincreasing convex prices with slopes in `[-1, 0]`,
    /// and `C >= (F-K)+` when a forward is known.
    pub fn validate(&self) -> Result<()> {
        let n = self.strikes.len();
        if n < 3 || self.prices.len() != n {
            return Err(Error::InsufficientStrikes(n.min(self.prices.len())));
        }
        if let Some(w) = self.strikes.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Arbitrage {
                strike: w[1],
                reason: "strikes not strictly increasing".into(),
            });
        }
        for (&k, &c) in self.strikes.iter().zip(&self.prices) {
            if !(c >= -ARBITRAGE_TOL) {
                return Err(Error::Arbitrage {
                    strike: k,
                    reason: format!("negative price {c}"),
                });
            }
            if let Some(f) = self.forward {
                if c < (f - k).max(0.0) - ARBITRAGE_TOL {
                    return Err(Error::Arbitrage {
                        strike: k,
                        reason: format!("price {c} below intrinsic value {}", (f - k).max(0.0)),
                    });
                }
            }
        }
        let s = self.slopes();
        if s[0] < -1.0 - ARBITRAGE_TOL {
            return Err(Error::Arbitrage {
                strike: self.strikes[0],
                reason: format!("call slope {} below -1", s[0]),
            });
        }
        for (i, &si) in s.iter().enumerate() {
            if si > ARBITRAGE_TOL {
                return Err(Error::Arbitrage {
                    strike: self.strikes[i + 1],
                    reason: format!("prices increase in strike (slope {si})"),
                });
            }
        }
        for i in 1..s.len() {
            if s[i] < s[i - 1] - ARBITRAGE_TOL {
                return Err(Error::Arbitrage {
                    strike: self.strikes[i],
                    reason: format!("butterfly spread is negative (slopes {} then {})", s[i - 1], s[i]),
                });
            }
        }
        Ok(())
    }
}

/// Call prices of `mu` at every strike.
pub fn call_prices(mu: &GridMeasure, strikes: &[f64]) -> Vec<f64> {
    strikes.iter().map(|&k| mu.call(k)).collect()
}

/// Recovers an atomic law on `grid` from call prices by second differences.
///
/// Prices are interpolated linearly in strike onto the grid nodes, which must
/// lie inside the quoted strike range. The mass below the first node and
/// above the last one is placed on the end nodes.
pub fn breeden_litzenberger(curve: &CallCurve, grid: &Grid1D) -> Result<GridMeasure> {
    curve.validate()?;
    let kgrid = Grid1D::new(curve.strikes.clone())?;
    let c: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| kgrid.interpolate(&curve.prices, x))
        .collect::<Result<_>>()?;
    let n = grid.len();
    let slopes: Vec<f64> = (0..n - 1).map(|i| (c[i + 1] - c[i]) / grid.spacing(i)).collect();
    let mut w = vec![0.0; n];
    w[0] = 1.0 + slopes[0];
    for i in 1..n - 1 {
        w[i] = slopes[i] - slopes[i - 1];
    }
    w[n - 1] = -slopes[n - 2];
    // validated curves give weights >= -tol; snap that noise to zero
    for (i, wi) in w.iter_mut().enumerate() {
        if *wi < 0.0 {
            if *wi < -10.0 * ARBITRAGE_TOL {
                return Err(Error::Arbitrage {
                    strike: grid.nodes()[i],
                    reason: format!("recovered negative mass {wi}"),
                });
            }
            *wi = 0.0;
        }
    }
    GridMeasure::normalized(grid.clone(), w)
}
