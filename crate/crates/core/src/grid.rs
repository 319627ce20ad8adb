//! Densities on a fixed one-dimensional state grid.
//!
//! A [`DensityGrid`] stores node values of a density over a [`StateGrid`]
//! carrying trapezoidal quadrature weights. Every integral in the crate
//! (mass, moments, conditional means) is a weighted sum over the nodes.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::numeric::{compensated_sum, dot};
use crate::vol::VolStructure;

/// Ordered evaluation nodes with trapezoidal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

/// Uniform grid on `[xmin, xmax]` with `n` nodes.
pub fn make_grid(xmin: f64, xmax: f64, n: usize) -> Result<StateGrid> {
    StateGrid::uniform(xmin, xmax, n)
}

impl StateGrid {
    pub fn uniform(xmin: f64, xmax: f64, n: usize) -> Result<Self> {
        if !(xmin.is_finite() && xmax.is_finite()) || xmin >= xmax {
            return argument(format!("grid bounds must satisfy xmin < xmax, got [{xmin}, {xmax}]"));
        }
        if n < 3 {
            return argument(format!("grid needs at least 3 points, got {n}"));
        }
        let h = (xmax - xmin) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| xmin + i as f64 * h).collect();
        points[n - 1] = xmax;
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Self {
            points,
            weights,
            uniform: true,
        })
    }

    /// Trapezoidal grid over arbitrary strictly increasing nodes.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return argument(format!("grid needs at least 3 points, got {n}"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return argument("grid points must be finite");
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return argument(format!(
                "grid points must be strictly increasing (index {} -> {}: {} -> {})",
                i,
                i + 1,
                points[i],
                points[i + 1]
            ));
        }
        let mut weights = vec![0.0; n];
        for i in 0..n - 1 {
            let half = 0.5 * (points[i + 1] - points[i]);
            weights[i] += half;
            weights[i + 1] += half;
        }
        let h0 = points[1] - points[0];
        let uniform = points.windows(2).all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-9 * h0.abs());
        Ok(Self {
            points,
            weights,
            uniform,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xmin(&self) -> f64 {
        self.points[0]
    }

    pub fn xmax(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Spacing of a uniform grid; `None` otherwise.
    pub fn step(&self) -> Option<f64> {
        self.uniform
            .then(|| (self.xmax() - self.xmin()) / (self.len() - 1) as f64)
    }

    /// Trapezoidal integral of node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        dot(&self.weights, values)
    }

    /// Index `i` of the cell `[x_i, x_{i+1}]` containing `x`, if inside the grid.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.xmin() && x <= self.xmax()) {
            return None;
        }
        let n = self.len();
        let i = self.points.partition_point(|&p| p <= x);
        Some(i.saturating_sub(1).min(n - 2))
    }
}

/// Node values of a probability density on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    grid: Arc<StateGrid>,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(grid: Arc<StateGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return argument(format!(
                "density has {} values but grid has {} points",
                values.len(),
                grid.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return argument(format!(
                "density value at node {i} is {} (must be finite and >= 0)",
                values[i]
            ));
        }
        Ok(Self { grid, values })
    }

    /// Build from a function evaluated at the nodes (no normalization).
    pub fn from_fn(grid: Arc<StateGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    /// Gaussian density evaluated at the nodes and normalized by quadrature.
    pub fn gaussian(grid: Arc<StateGrid>, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return argument(format!("gaussian std must be positive, got {std}"));
        }
        let d = Self::from_fn(grid, |x| {
            let z = (x - mean) / std;
            (-0.5 * z * z).exp()
        })?;
        d.normalize()
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<StateGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<StateGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn points(&self) -> &[f64] {
        self.grid.points()
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Rescale to unit mass. Densities already within 1e-14 of unit mass are
    /// returned unchanged, which makes the operation idempotent.
    pub fn normalize(&self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Degenerate(format!(
                "cannot normalize density with total mass {mass}"
            )));
        }
        if (mass - 1.0).abs() <= 1e-14 {
            return Ok(self.clone());
        }
        let scale = 1.0 / mass;
        Ok(Self {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|v| v * scale).collect(),
        })
    }

    /// Quadrature of `x^k f(x)`.
    pub fn moment(&self, k: u32) -> f64 {
        let pts = self.grid.points();
        let w = self.grid.weights();
        match k {
            0 => self.mass(),
            1 => compensated_sum((0..pts.len()).map(|i| w[i] * pts[i] * self.values[i])),
            _ => compensated_sum((0..pts.len()).map(|i| w[i] * pts[i].powi(k as i32) * self.values[i])),
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let pts = self.grid.points();
        let w = self.grid.weights();
        compensated_sum((0..pts.len()).map(|i| w[i] * (pts[i] - m) * (pts[i] - m) * self.values[i]))
    }

    /// Linear interpolation of the node values; zero outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        let Some(i) = self.grid.cell_of(x) else {
            return 0.0;
        };
        let pts = self.grid.points();
        let (a, b) = (pts[i], pts[i + 1]);
        let u = (x - a) / (b - a);
        self.values[i] * (1.0 - u) + self.values[i + 1] * u
    }

    /// Largest absolute node difference and the grid point where it occurs.
    /// Both densities must live on the same grid.
    pub fn sup_distance(&self, other: &DensityGrid) -> Result<(f64, f64)> {
        if self.grid.points() != other.grid.points() {
            return argument("sup distance requires densities on the same grid");
        }
        let mut best = (0.0, self.grid.xmin());
        for ((a, b), x) in self.values.iter().zip(&other.values).zip(self.grid.points()) {
            let d = (a - b).abs();
            if d > best.0 {
                best = (d, *x);
            }
        }
        Ok(best)
    }

    /// Cumulative trapezoidal masses at the nodes (first entry 0).
    pub fn cumulative(&self) -> Vec<f64> {
        let pts = self.grid.points();
        let mut out = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 0..pts.len() - 1 {
            acc += 0.5 * (pts[i + 1] - pts[i]) * (self.values[i] + self.values[i + 1]);
            out.push(acc);
        }
        out
    }

    /// CSV `x,f` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,f")?;
        for (x, f) in self.grid.points().iter().zip(&self.values) {
            writeln!(out, "{x:.16e},{f:.16e}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Read an `x,f` CSV (as written by [`DensityGrid::write_csv`]).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        expect_header(rdr.headers()?, &["x", "f"])?;
        let mut xs = Vec::new();
        let mut fs = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            xs.push(parse_field(&rec, 0, row)?);
            fs.push(parse_field(&rec, 1, row)?);
        }
        let grid = Arc::new(StateGrid::from_points(xs)?);
        Self::new(grid, fs)
    }
}

/// Conditional mean of the volatility, `∫ v(t,x) f(x) dx`.
pub fn mean_vol(d: &DensityGrid, v: &VolStructure, t: f64) -> Result<f64> {
    let pts = d.points();
    let w = d.grid().weights();
    let vals = d.values();
    let mut terms = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        terms.push(w[i] * v.eval(t, pts[i])? * vals[i]);
    }
    Ok(compensated_sum(terms))
}

pub(crate) fn expect_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse(format!(
            "expected CSV header {:?}, found {:?}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

pub(crate) fn parse_field(rec: &csv::StringRecord, col: usize, row: usize) -> Result<f64> {
    let raw = rec
        .get(col)
        .ok_or_else(|| Error::Parse(format!("row {}: missing column {}", row + 1, col + 1)))?;
    raw.parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {}: cannot parse {raw:?} as a number", row + 1)))
}

/// Strike-indexed call prices observed at time zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSnapshot {
    pub strikes: Vec<f64>,
    pub call_prices: Vec<f64>,
    pub maturity: f64,
}

/// A static-arbitrage violation found in a [`MarketSnapshot`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Price increases between two consecutive strikes.
    Increasing {
        row: usize,
        strikes: (f64, f64),
        prices: (f64, f64),
    },
    /// Negative butterfly over a strike triple.
    Concave {
        row: usize,
        strikes: (f64, f64, f64),
        butterfly: f64,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Increasing { row, strikes, prices } => write!(
                f,
                "row {row}: price increases from {} to {} between strikes {} and {}",
                prices.0, prices.1, strikes.0, strikes.1
            ),
            Violation::Concave {
                row,
                strikes,
                butterfly,
            } => write!(
                f,
                "row {row}: convexity violated on strikes ({}, {}, {}), butterfly {butterfly:e}",
                strikes.0, strikes.1, strikes.2
            ),
        }
    }
}

impl MarketSnapshot {
    pub fn new(strikes: Vec<f64>, call_prices: Vec<f64>, maturity: f64) -> Result<Self> {
        if strikes.len() != call_prices.len() {
            return argument("strikes and prices differ in length");
        }
        if strikes.len() < 3 {
            return argument(format!("need at least 3 strikes, got {}", strikes.len()));
        }
        if strikes.iter().chain(&call_prices).any(|v| !v.is_finite()) {
            return argument("strikes and prices must be finite");
        }
        if let Some(i) = strikes.windows(2).position(|w| w[1] <= w[0]) {
            return argument(format!(
                "strikes must be strictly increasing (rows {} and {}: {} then {})",
                i + 1,
                i + 2,
                strikes[i],
                strikes[i + 1]
            ));
        }
        Ok(Self {
            strikes,
            call_prices,
            maturity,
        })
    }

    /// Absolute slack allowed in the no-arbitrage checks.
    fn tolerance(&self) -> f64 {
        let scale = self.call_prices.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        1e-10 * scale
    }

    /// Static no-arbitrage check: prices non-increasing and convex in strike.
    /// Rows are 1-based data rows.
    pub fn violations(&self) -> Vec<Violation> {
        let tol = self.tolerance();
        let (k, c) = (&self.strikes, &self.call_prices);
        let mut out = Vec::new();
        for i in 0..k.len() - 1 {
            if c[i + 1] > c[i] + tol {
                out.push(Violation::Increasing {
                    row: i + 2,
                    strikes: (k[i], k[i + 1]),
                    prices: (c[i], c[i + 1]),
                });
            }
        }
        for i in 1..k.len() - 1 {
            let (h0, h1) = (k[i] - k[i - 1], k[i + 1] - k[i]);
            // Butterfly weights valid for non-uniform strikes.
            let bf = c[i - 1] / h0 - c[i] * (1.0 / h0 + 1.0 / h1) + c[i + 1] / h1;
            if bf < -tol / h0.min(h1) {
                out.push(Violation::Concave {
                    row: i + 1,
                    strikes: (k[i - 1], k[i], k[i + 1]),
                    butterfly: bf,
                });
            }
        }
        out
    }

    /// Read `strike,price` CSV.
    pub fn read_csv<R: Read>(input: R, maturity: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        expect_header(rdr.headers()?, &["strike", "price"])?;
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse(format!(
                    "row {}: expected 2 fields, found {}",
                    row + 1,
                    rec.len()
                )));
            }
            strikes.push(parse_field(&rec, 0, row)?);
            prices.push(parse_field(&rec, 1, row)?);
        }
        Self::new(strikes, prices, maturity)
    }

    pub fn load_csv(path: impl AsRef<Path>, maturity: f64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, maturity)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "strike,price")?;
        for (k, c) in self.strikes.iter().zip(&self.call_prices) {
            writeln!(out, "{k:.16e},{c:.16e}")?;
        }
        Ok(())
    }
}

/// Density recovered from call prices together with truncation diagnostics.
#[derive(Debug, Clone)]
pub struct RecoveredDensity {
    pub density: DensityGrid,
    /// Mass removed by clipping negative second differences.
    pub clipped_mass: f64,
    /// Mass missing from the strike range before renormalization.
    pub truncated_mass: f64,
    /// Set when either of the above exceeds 1e-4.
    pub flagged: bool,
}

pub const RECOVERY_FLAG_THRESHOLD: f64 = 1e-4;

/// Second strike-derivative of call prices, clipped at zero and renormalized.
/// Strikes must be uniformly spaced; end nodes are extrapolated linearly.
pub fn breeden_litzenberger(m: &MarketSnapshot) -> Result<RecoveredDensity> {
    let n = m.strikes.len();
    if n < 3 {
        return argument("need at least 3 strikes");
    }
    if let Some(v) = m.violations().into_iter().next() {
        return Err(Error::Arbitrage(v.to_string()));
    }
    let grid = StateGrid::from_points(m.strikes.clone())?;
    let Some(h) = grid.step() else {
        return argument("Breeden-Litzenberger recovery requires uniformly spaced strikes");
    };
    let c = &m.call_prices;
    let noise = 64.0 * f64::EPSILON * c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut raw = vec![0.0; n];
    for i in 1..n - 1 {
        let d2 = c[i + 1] - 2.0 * c[i] + c[i - 1];
        raw[i] = if d2.abs() <= noise { 0.0 } else { d2 / (h * h) };
    }
    raw[0] = 2.0 * raw[1] - raw[2];
    raw[n - 1] = 2.0 * raw[n - 2] - raw[n - 3];

    let w = grid.weights();
    let clipped_mass: f64 = raw.iter().zip(w).filter(|(v, _)| **v < 0.0).map(|(v, w)| -v * w).sum();
    let values: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let mass = grid.integrate(&values);
    if !(mass > 1e-9) {
        return Err(Error::Degenerate(format!(
            "recovered density has total mass {mass:e}; prices carry no curvature"
        )));
    }
    let density = DensityGrid::from_parts_unchecked(Arc::new(grid), values).normalize()?;
    let truncated_mass = (1.0 - mass).max(0.0);
    Ok(RecoveredDensity {
        density,
        clipped_mass,
        truncated_mass,
        flagged: clipped_mass > RECOVERY_FLAG_THRESHOLD || truncated_mass > RECOVERY_FLAG_THRESHOLD,
    })
}
