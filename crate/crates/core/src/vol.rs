//! Deterministic volatility structures `v(t, x)` on `[0, T) x R`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::grid::{expect_header, parse_field, StateGrid};

/// Piecewise-linear table, clamped outside its knots. A single knot is a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1d {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl Table1d {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return argument("table needs matching, non-empty knots and values");
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return argument("table entries must be finite");
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return argument("table knots must be strictly increasing");
        }
        Ok(Self { knots, values })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            knots: vec![0.0],
            values: vec![value],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (k, v) = (&self.knots, &self.values);
        let n = k.len();
        if n == 1 || x <= k[0] {
            return v[0];
        }
        if x >= k[n - 1] {
            return v[n - 1];
        }
        let i = k.partition_point(|&p| p <= x) - 1;
        let u = (x - k[i]) / (k[i + 1] - k[i]);
        v[i] + u * (v[i + 1] - v[i])
    }
}

/// Bilinear table over `(t, x)`, clamped outside its range.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2d {
    times: Vec<f64>,
    states: Vec<f64>,
    /// Row-major: `values[i * states.len() + j]` is `v(times[i], states[j])`.
    values: Vec<f64>,
}

impl Table2d {
    pub fn new(times: Vec<f64>, states: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || states.is_empty() || values.len() != times.len() * states.len() {
            return argument("table dimensions do not match");
        }
        for axis in [&times, &states] {
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return argument("table axes must be strictly increasing");
            }
        }
        if times.iter().chain(&states).chain(&values).any(|v| !v.is_finite()) {
            return argument("table entries must be finite");
        }
        Ok(Self { times, states, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64) {
        let n = axis.len();
        if n == 1 || x <= axis[0] {
            return (0, 0, 0.0);
        }
        if x >= axis[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let i = axis.partition_point(|&p| p <= x) - 1;
        (i, i + 1, (x - axis[i]) / (axis[i + 1] - axis[i]))
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let m = self.states.len();
        let (i0, i1, u) = Self::bracket(&self.times, t);
        let (j0, j1, w) = Self::bracket(&self.states, x);
        let at = |i: usize, j: usize| self.values[i * m + j];
        let lo = at(i0, j0) * (1.0 - w) + at(i0, j1) * w;
        let hi = at(i1, j0) * (1.0 - w) + at(i1, j1) * w;
        lo * (1.0 - u) + hi * u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolKind {
    /// `v(t, x) = sigma * T * x / (T - t)`.
    Semilinear { sigma: f64 },
    /// `v(t, x) = h(x)`.
    StateTable(Table1d),
    /// `v(t, x) = c(t) * h(x)`.
    Separable { time: Table1d, state: Table1d },
    /// General bilinear table in `(t, x)`.
    Tabulated(Table2d),
}

/// A deterministic volatility structure with its time horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct VolStructure {
    kind: VolKind,
    horizon: f64,
}

/// `v(t,x) = c(t) h(x)` view used by the fast filter paths.
#[derive(Debug, Clone, Copy)]
pub struct Factored<'a> {
    vol: &'a VolStructure,
}

impl Factored<'_> {
    pub fn time_factor(&self, t: f64) -> f64 {
        match &self.vol.kind {
            VolKind::Semilinear { sigma } => {
                let big_t = self.vol.horizon;
                sigma * big_t / (big_t - t)
            }
            VolKind::StateTable(_) => 1.0,
            VolKind::Separable { time, .. } => time.eval(t),
            VolKind::Tabulated(_) => unreachable!("tabulated structures are not factored"),
        }
    }

    pub fn state_factor(&self, x: f64) -> f64 {
        match &self.vol.kind {
            VolKind::Semilinear { .. } => x,
            VolKind::StateTable(h) | VolKind::Separable { state: h, .. } => h.eval(x),
            VolKind::Tabulated(_) => unreachable!("tabulated structures are not factored"),
        }
    }

    /// `(∫c, ∫c²)` over `[t0, t1]`; exact for every factored kind.
    pub fn time_integrals(&self, t0: f64, t1: f64) -> (f64, f64) {
        match &self.vol.kind {
            VolKind::Semilinear { sigma } => {
                let big_t = self.vol.horizon;
                let (a, b) = (big_t - t0, big_t - t1);
                let s = sigma * big_t;
                (s * (a / b).ln(), s * s * (t1 - t0) / (a * b))
            }
            VolKind::StateTable(_) => (t1 - t0, t1 - t0),
            VolKind::Separable { time, .. } => piecewise_integrals(time.knots(), t0, t1, |t| time.eval(t)),
            VolKind::Tabulated(_) => unreachable!("tabulated structures are not factored"),
        }
    }
}

/// `(∫f, ∫f²)` over `[t0, t1]` for `f` linear between `knots`: Simpson on each
/// knot-free piece, which is exact for linear and quadratic integrands.
fn piecewise_integrals(knots: &[f64], t0: f64, t1: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    if t1 <= t0 {
        return (0.0, 0.0);
    }
    let mut cuts = vec![t0];
    cuts.extend(knots.iter().copied().filter(|&k| k > t0 && k < t1));
    cuts.push(t1);
    let (mut iv, mut iv2) = (0.0, 0.0);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
        let h6 = (b - a) / 6.0;
        iv += h6 * (fa + 4.0 * fm + fb);
        iv2 += h6 * (fa * fa + 4.0 * fm * fm + fb * fb);
    }
    (iv, iv2)
}

impl VolStructure {
    pub fn semilinear(sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return argument(format!("semilinear sigma must be finite and >= 0, got {sigma}"));
        }
        Self::with_horizon(VolKind::Semilinear { sigma }, horizon)
    }

    /// `v ≡ value` on `[0, horizon)`.
    pub fn constant(value: f64, horizon: f64) -> Result<Self> {
        if !value.is_finite() {
            return argument("constant volatility must be finite");
        }
        Self::with_horizon(VolKind::StateTable(Table1d::constant(value)), horizon)
    }

    pub fn state_table(table: Table1d, horizon: f64) -> Result<Self> {
        Self::with_horizon(VolKind::StateTable(table), horizon)
    }

    pub fn separable(time: Table1d, state: Table1d, horizon: f64) -> Result<Self> {
        Self::with_horizon(VolKind::Separable { time, state }, horizon)
    }

    pub fn tabulated(table: Table2d, horizon: f64) -> Result<Self> {
        Self::with_horizon(VolKind::Tabulated(table), horizon)
    }

    fn with_horizon(kind: VolKind, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return argument(format!("volatility horizon must be positive, got {horizon}"));
        }
        Ok(Self { kind, horizon })
    }

    /// Load a `t,x,v` CSV describing a full rectangular table.
    pub fn read_table_csv<R: Read>(input: R, horizon: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        expect_header(rdr.headers()?, &["t", "x", "v"])?;
        let mut cells: BTreeMap<(u64, u64), f64> = BTreeMap::new();
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let (t, x, v) = (
                parse_field(&rec, 0, row)?,
                parse_field(&rec, 1, row)?,
                parse_field(&rec, 2, row)?,
            );
            if cells.insert((ordered_bits(t), ordered_bits(x)), v).is_some() {
                return Err(Error::Parse(format!(
                    "row {}: duplicate entry for (t={t}, x={x})",
                    row + 1
                )));
            }
            times.push(t);
            states.push(x);
        }
        for axis in [&mut times, &mut states] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        if cells.len() != times.len() * states.len() {
            return Err(Error::Parse(format!(
                "table has {} entries, expected {} x {} full grid",
                cells.len(),
                times.len(),
                states.len()
            )));
        }
        let mut values = Vec::with_capacity(cells.len());
        for &t in &times {
            for &x in &states {
                values.push(cells[&(ordered_bits(t), ordered_bits(x))]);
            }
        }
        Self::tabulated(Table2d::new(times, states, values)?, horizon)
    }

    pub fn load_table_csv(path: impl AsRef<Path>, horizon: f64) -> Result<Self> {
        Self::read_table_csv(std::fs::File::open(path)?, horizon)
    }

    pub fn kind(&self) -> &VolKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_semilinear(&self) -> bool {
        matches!(self.kind, VolKind::Semilinear { .. })
    }

    pub fn factored(&self) -> Option<Factored<'_>> {
        match self.kind {
            VolKind::Tabulated(_) => None,
            _ => Some(Factored { vol: self }),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t < self.horizon {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                horizon: self.horizon,
            })
        }
    }

    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.eval_unchecked(t, x))
    }

    /// Evaluation without the domain check; callers validate `t` once per mesh.
    pub(crate) fn eval_unchecked(&self, t: f64, x: f64) -> f64 {
        match &self.kind {
            VolKind::Tabulated(tab) => tab.eval(t, x),
            _ => {
                let f = Factored { vol: self };
                f.time_factor(t) * f.state_factor(x)
            }
        }
    }

    /// `(∫ v(s,x) ds, ∫ v(s,x)² ds)` over `[t0, t1]`.
    pub fn integrate(&self, t0: f64, t1: f64, x: f64) -> Result<(f64, f64)> {
        if !(t0 >= 0.0) || t1 < t0 {
            return argument(format!(
                "integration bounds must satisfy 0 <= t0 <= t1, got [{t0}, {t1}]"
            ));
        }
        self.check_time(t1)?;
        if t1 == t0 {
            return Ok((0.0, 0.0));
        }
        Ok(match &self.kind {
            VolKind::Tabulated(tab) => piecewise_integrals(tab.times(), t0, t1, |t| tab.eval(t, x)),
            _ => {
                let f = Factored { vol: self };
                let h = f.state_factor(x);
                let (c1, c2) = f.time_integrals(t0, t1);
                (h * c1, h * h * c2)
            }
        })
    }
}

impl VolStructure {
    /// `∫ [v(s,b) − v(s,a)]² ds` over `[t0, t1]`.
    pub fn integrate_spread_sq(&self, t0: f64, t1: f64, a: f64, b: f64) -> Result<f64> {
        if !(t0 >= 0.0) || t1 < t0 {
            return argument(format!(
                "integration bounds must satisfy 0 <= t0 <= t1, got [{t0}, {t1}]"
            ));
        }
        self.check_time(t1)?;
        if t1 == t0 {
            return Ok(0.0);
        }
        Ok(match &self.kind {
            VolKind::Tabulated(tab) => piecewise_integrals(tab.times(), t0, t1, |t| tab.eval(t, b) - tab.eval(t, a)).1,
            _ => {
                let f = Factored { vol: self };
                let dh = f.state_factor(b) - f.state_factor(a);
                dh * dh * f.time_integrals(t0, t1).1
            }
        })
    }
}

fn ordered_bits(x: f64) -> u64 {
    // Distinct finite values map to distinct keys; -0.0 is folded into 0.0.
    (if x == 0.0 { 0.0 } else { x }).to_bits()
}

/// `integrate_v` in free-function form.
pub fn integrate_v(v: &VolStructure, t0: f64, t1: f64, x: f64) -> Result<(f64, f64)> {
    v.integrate(t0, t1, x)
}

/// Normalizing functions `γ(t)` for the terminal-measurability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaPreset {
    /// `1 / ln(T / (T - t))`
    Logarithmic,
    /// `(T - t)^exponent`
    Power { exponent: f64 },
    /// `1 / t`
    Reciprocal,
}

impl GammaPreset {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            GammaPreset::Logarithmic => 1.0 / (horizon / (horizon - t)).ln(),
            GammaPreset::Power { exponent } => (horizon - t).powf(exponent),
            GammaPreset::Reciprocal => 1.0 / t,
        }
    }

    /// `lim_{t -> T} γ(t)`, known in closed form for each preset.
    pub fn terminal_limit(&self, horizon: f64) -> f64 {
        match *self {
            GammaPreset::Logarithmic => 0.0,
            GammaPreset::Power { exponent } if exponent > 0.0 => 0.0,
            GammaPreset::Power { exponent: 0.0 } => 1.0,
            GammaPreset::Power { .. } => f64::INFINITY,
            GammaPreset::Reciprocal => 1.0 / horizon,
        }
    }
}

/// Outcome of [`check_terminal_measurability`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurabilityCertificate {
    pub gamma_limit_ok: bool,
    /// `(x, g(x))` with `g(x) ≈ lim γ(t) ∫₀ᵗ v(s,x) ds`.
    pub g_samples: Vec<(f64, f64)>,
    /// Every per-node sequence settled within tolerance.
    pub converged: bool,
    pub invertible: bool,
}

/// First and last exponent `k` of the probe times `t = T(1 - 2^-k)`.
const PROBE_K: (i32, i32) = (4, 20);

/// Probe `γ(t) ∫₀ᵗ v(s,x) ds` as `t -> T` on every grid node and certify that
/// the limit exists and is strictly monotone in `x`.
pub fn check_terminal_measurability(
    v: &VolStructure,
    gamma: GammaPreset,
    grid: &StateGrid,
) -> Result<MeasurabilityCertificate> {
    let big_t = v.horizon();
    if !big_t.is_finite() {
        return argument("terminal measurability needs a finite horizon");
    }
    let probes: Vec<f64> = (PROBE_K.0..=PROBE_K.1).map(|k| big_t * (1.0 - 2f64.powi(-k))).collect();
    let mut g_samples = Vec::with_capacity(grid.len());
    let mut converged = true;
    for &x in grid.points() {
        let mut seq = Vec::with_capacity(probes.len());
        for &t in &probes {
            let (iv, _) = v.integrate(0.0, t, x)?;
            seq.push(gamma.eval(t, big_t) * iv);
        }
        let n = seq.len();
        let (a, b, c) = (seq[n - 3], seq[n - 2], seq[n - 1]);
        let (d1, d2) = (b - a, c - b);
        // Aitken extrapolation of the tail when the sequence is still moving.
        let denom = d2 - d1;
        let limit = if d2 != 0.0 && denom.abs() > 1e-300 && (d2 / denom).is_finite() {
            c - d2 * d2 / denom
        } else {
            c
        };
        if !limit.is_finite() || (limit - c).abs() > 1e-3 * (1.0 + limit.abs()) {
            converged = false;
        }
        g_samples.push((x, limit));
    }
    let scale = g_samples.iter().fold(1.0f64, |m, (_, g)| m.max(g.abs()));
    let tol = 1e-6 * scale;
    let increasing = g_samples.windows(2).all(|w| w[1].1 - w[0].1 > tol);
    let decreasing = g_samples.windows(2).all(|w| w[0].1 - w[1].1 > tol);
    Ok(MeasurabilityCertificate {
        gamma_limit_ok: gamma.terminal_limit(big_t) == 0.0,
        g_samples,
        converged,
        invertible: converged && (increasing || decreasing),
    })
}
