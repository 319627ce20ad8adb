//! Option prices from densities, the binary-density closed form, and
//! normal (Bachelier) implied volatilities.
//!
//! Prices integrate the hinge payoff exactly against the piecewise-linear
//! interpolant of the grid density, splitting the cell that contains the
//! strike. The exact piecewise-linear mean differs from the trapezoid mean
//! by `D = h²(f_0 − f_n)/6`; calls give up `D (1 − F(K))` and puts gain
//! `D F(K)`, with `F` the interpolant's CDF, so that `C − P = A − K` holds to
//! rounding with `A = moment(d, 1)` and the prices stay continuous at the
//! grid ends.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::exec::Execution;
use crate::grid::DensityGrid;
use crate::mesh::TimeMesh;
use crate::numeric::{norm_cdf, norm_pdf};
use crate::vol::VolStructure;

struct LinearPrices {
    call: f64,
    put: f64,
    mean: f64,
    /// Interpolant mass left of the strike.
    below: f64,
}

/// Exact hinge integrals and mean for the piecewise-linear interpolant.
fn linear_interpolant_prices(d: &DensityGrid, strike: f64) -> LinearPrices {
    let x = d.points();
    let f = d.values();
    let mut p = LinearPrices {
        call: 0.0,
        put: 0.0,
        mean: 0.0,
        below: 0.0,
    };
    for i in 0..x.len() - 1 {
        let (a, b, fa, fb) = (x[i], x[i + 1], f[i], f[i + 1]);
        let h = b - a;
        let m = 0.5 * (a + b);
        let fm = 0.5 * (fa + fb);
        // Simpson is exact for the quadratic integrands below.
        p.mean += h / 6.0 * (a * fa + 4.0 * m * fm + b * fb);
        if strike <= a {
            p.call += h / 6.0 * ((a - strike) * fa + 4.0 * (m - strike) * fm + (b - strike) * fb);
        } else if strike >= b {
            p.put += h / 6.0 * ((strike - a) * fa + 4.0 * (strike - m) * fm + (strike - b) * fb);
            p.below += h * fm;
        } else {
            let fk = fa + (fb - fa) * (strike - a) / h;
            let (l, r) = (strike - a, b - strike);
            p.call += r * r * (fk / 6.0 + fb / 3.0);
            p.put += l * l * (fk / 6.0 + fa / 3.0);
            p.below += 0.5 * l * (fa + fk);
        }
    }
    p
}

/// Call and put prices `(C, P)` at strike `K`.
pub fn call_put_prices(d: &DensityGrid, strike: f64) -> (f64, f64) {
    let grid = d.grid();
    let mass = d.mass();
    let mean = d.moment(1);
    if strike <= grid.xmin() {
        return (mean - strike * mass, 0.0);
    }
    if strike >= grid.xmax() {
        return (0.0, strike * mass - mean);
    }
    let p = linear_interpolant_prices(d, strike);
    let gap = p.mean - mean;
    let w = if mass > 0.0 {
        (p.below / mass).clamp(0.0, 1.0)
    } else {
        0.5
    };
    (p.call - gap * (1.0 - w), p.put + gap * w)
}

/// `∫ (x − K)⁺ f(x) dx`.
pub fn call_price(d: &DensityGrid, strike: f64) -> f64 {
    call_put_prices(d, strike).0
}

/// `∫ (K − x)⁺ f(x) dx`.
pub fn put_price(d: &DensityGrid, strike: f64) -> f64 {
    call_put_prices(d, strike).1
}

/// `C − P − (A − K)` from one density.
pub fn put_call_parity_check(d: &DensityGrid, strike: f64) -> f64 {
    let (c, p) = call_put_prices(d, strike);
    c - p - (d.moment(1) - strike)
}

/// Normal-model call price `(F−K)N(d) + s φ(d)` with `s = σ√τ`.
pub fn bachelier_call(forward: f64, strike: f64, vol: f64, tau: f64) -> f64 {
    let s = vol * tau.max(0.0).sqrt();
    if s <= 0.0 {
        return (forward - strike).max(0.0);
    }
    let d = (forward - strike) / s;
    (forward - strike) * norm_cdf(d) + s * norm_pdf(d)
}

/// Two-atom initial density `q1 δ(x − x1) + q2 δ(x − x2)` with volatility `v`.
#[derive(Debug, Clone)]
pub struct BinaryModel {
    pub x1: f64,
    pub x2: f64,
    pub q1: f64,
    pub q2: f64,
    pub vol: VolStructure,
}

impl BinaryModel {
    pub fn new(x1: f64, x2: f64, q1: f64, q2: f64, vol: VolStructure) -> Result<Self> {
        if !(x1.is_finite() && x2.is_finite() && x1 < x2) {
            return argument(format!("binary atoms must satisfy x1 < x2, got ({x1}, {x2})"));
        }
        if !(q1 > 0.0 && q2 > 0.0) || (q1 + q2 - 1.0).abs() > 1e-12 {
            return argument(format!(
                "binary weights must be positive and sum to 1, got ({q1}, {q2})"
            ));
        }
        Ok(Self { x1, x2, q1, q2, vol })
    }

    pub fn initial_mean(&self) -> f64 {
        self.q1 * self.x1 + self.q2 * self.x2
    }
}

/// Intermediate quantities of the binary closed form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClosedFormParts {
    pub s: f64,
    pub t: f64,
    pub strike: f64,
    /// `q1 𝓔_s(x1) + q2 𝓔_s(x2)`.
    pub lambda_s: f64,
    pub e_s1: f64,
    pub e_s2: f64,
    /// `𝓔_s(x2) / 𝓔_s(x1)`.
    pub r_0s: f64,
    /// `∫ₛᵗ [v(u,x2) − v(u,x1)]² du`.
    pub v_st: f64,
    /// Posterior weight of `x1` at `s`.
    pub p1: f64,
    /// `E[A_T | F_s]`.
    pub forward: f64,
    /// `None` when the strike is outside `(x1, x2)` or `v_st = 0`.
    pub y_star: Option<f64>,
    pub d_minus: Option<f64>,
    pub d_plus: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BinaryPrice {
    pub price: f64,
    pub parts: ClosedFormParts,
}

/// Observed information up to time `s = mesh.end()`.
#[derive(Debug, Clone, Copy)]
pub struct InfoHistory<'a> {
    pub mesh: &'a TimeMesh,
    pub info: &'a [f64],
}

/// Price at `s` of the call on `A_t` for the binary model.
///
/// `history = None` prices at `s = 0`.
pub fn binary_call_closed_form(
    m: &BinaryModel,
    strike: f64,
    t: f64,
    history: Option<InfoHistory<'_>>,
) -> Result<BinaryPrice> {
    if !strike.is_finite() {
        return argument("strike must be finite");
    }
    let (ln_e1, ln_e2, s) = match history {
        None => (0.0, 0.0, 0.0),
        Some(h) => {
            if h.info.len() != h.mesh.len() {
                return argument(format!(
                    "information path has {} points but the mesh has {}",
                    h.info.len(),
                    h.mesh.len()
                ));
            }
            let s = h.mesh.end();
            (log_exponential(&m.vol, h, m.x1)?, log_exponential(&m.vol, h, m.x2)?, s)
        }
    };
    if !(t >= s) {
        return argument(format!("option time t = {t} precedes the valuation time s = {s}"));
    }
    let v_st = m.vol.integrate_spread_sq(s, t, m.x1, m.x2)?;
    let ln_r = ln_e2 - ln_e1;
    let p1 = 1.0 / (1.0 + (m.q2 / m.q1) * ln_r.exp());
    let p2 = 1.0 / (1.0 + (m.q1 / m.q2) * (-ln_r).exp());
    let forward = p1 * m.x1 + p2 * m.x2;
    let mut parts = ClosedFormParts {
        s,
        t,
        strike,
        lambda_s: m.q1 * ln_e1.exp() + m.q2 * ln_e2.exp(),
        e_s1: ln_e1.exp(),
        e_s2: ln_e2.exp(),
        r_0s: ln_r.exp(),
        v_st,
        p1,
        forward,
        y_star: None,
        d_minus: None,
        d_plus: None,
    };
    if strike <= m.x1 || strike >= m.x2 || v_st == 0.0 {
        return Ok(BinaryPrice {
            price: (forward - strike).max(0.0),
            parts,
        });
    }
    // Exercise when the likelihood ratio over (s, t] exceeds q1(K−x1) / (q2(x2−K) R_0s).
    let sv = v_st.sqrt();
    let ln_threshold = (m.q1 * (strike - m.x1) / (m.q2 * (m.x2 - strike))).ln() - ln_r;
    let y_star = (ln_threshold + 0.5 * v_st) / sv;
    let d_minus = -y_star;
    let d_plus = d_minus + sv;
    let price = (m.x1 - strike) * p1 * norm_cdf(d_minus) + (m.x2 - strike) * p2 * norm_cdf(d_plus);
    parts.y_star = Some(y_star);
    parts.d_minus = Some(d_minus);
    parts.d_plus = Some(d_plus);
    Ok(BinaryPrice {
        price: price.max((forward - strike).max(0.0)),
        parts,
    })
}

/// `ln 𝓔_s(x) = Σ v(t_j,x) ΔI_j − ½ ∫₀ˢ v(u,x)² du`.
fn log_exponential(v: &VolStructure, h: InfoHistory<'_>, x: f64) -> Result<f64> {
    let times = h.mesh.times();
    let mut acc = 0.0;
    for (t, w) in times.iter().zip(h.info.windows(2)) {
        acc += v.eval(*t, x)? * (w[1] - w[0]);
    }
    Ok(acc - 0.5 * v.integrate(0.0, h.mesh.end(), x)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolFlag {
    Ok,
    AtIntrinsic,
    BelowIntrinsic,
}

impl fmt::Display for VolFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VolFlag::Ok => "ok",
            VolFlag::AtIntrinsic => "at_intrinsic",
            VolFlag::BelowIntrinsic => "below_intrinsic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpliedVol {
    pub vol: f64,
    pub flag: VolFlag,
}

/// Normal-model volatility reproducing `price`. Bracketing bisection with
/// Newton steps taken whenever they stay inside the bracket.
pub fn implied_normal_vol(price: f64, forward: f64, strike: f64, tau: f64) -> Result<ImpliedVol> {
    if !(price.is_finite() && forward.is_finite() && strike.is_finite()) {
        return argument(format!(
            "non-finite input to implied vol: price {price}, F {forward}, K {strike}"
        ));
    }
    if !(tau > 0.0) {
        return argument(format!("time to expiry must be positive, got {tau}"));
    }
    let intrinsic = (forward - strike).max(0.0);
    let tol = 4.0 * f64::EPSILON * forward.abs().max(strike.abs()).max(1.0);
    if price < intrinsic - tol {
        return Ok(ImpliedVol {
            vol: 0.0,
            flag: VolFlag::BelowIntrinsic,
        });
    }
    if price <= intrinsic + tol {
        return Ok(ImpliedVol {
            vol: 0.0,
            flag: VolFlag::AtIntrinsic,
        });
    }
    let sqrt_tau = tau.sqrt();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while bachelier_call(forward, strike, hi, tau) < price {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Degenerate(format!("no volatility reproduces price {price}")));
        }
    }
    let mut vol = 0.5 * (lo + hi);
    for _ in 0..200 {
        let diff = bachelier_call(forward, strike, vol, tau) - price;
        if diff == 0.0 {
            break;
        }
        if diff > 0.0 {
            hi = vol;
        } else {
            lo = vol;
        }
        let s = vol * sqrt_tau;
        let vega = sqrt_tau * norm_pdf((forward - strike) / s);
        let newton = vol - diff / vega;
        let next = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - vol).abs();
        vol = next;
        if step <= 1e-14 * vol || hi - lo <= 1e-15 * vol {
            break;
        }
    }
    Ok(ImpliedVol { vol, flag: VolFlag::Ok })
}

/// One `(t, K)` entry of a smile table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmileCell {
    pub t: f64,
    pub strike: f64,
    pub price: f64,
    pub vol: f64,
    pub flag: VolFlag,
}

/// Implied normal vols for every `(t, K)`; forward `= moment(d_t, 1)`, `τ = T − t`.
/// With `relative_strikes` each strike is an offset from the forward.
/// Cells come back ordered by time, then strike.
pub fn smile(
    slices: &[(f64, &DensityGrid)],
    strikes: &[f64],
    horizon: f64,
    relative_strikes: bool,
    exec: Execution,
) -> Result<Vec<SmileCell>> {
    for (t, d) in slices {
        if !(*t >= 0.0 && *t < horizon) {
            return Err(Error::Domain { t: *t, horizon });
        }
        if (d.mass() - 1.0).abs() > 1e-8 {
            return argument(format!("density at t = {t} is not normalized (mass {})", d.mass()));
        }
    }
    let n_k = strikes.len();
    exec.try_map(slices.len() * n_k, |idx| {
        let (t, d) = slices[idx / n_k];
        let forward = d.moment(1);
        let k = strikes[idx % n_k];
        let strike = if relative_strikes { forward + k } else { k };
        let price = call_price(d, strike);
        let iv = implied_normal_vol(price, forward, strike, horizon - t)?;
        Ok(SmileCell {
            t,
            strike,
            price,
            vol: iv.vol,
            flag: iv.flag,
        })
    })
}

/// CSV `t,K,price,implied_normal_vol,flag`.
pub fn write_smile_csv<W: Write>(cells: &[SmileCell], mut out: W) -> Result<()> {
    writeln!(out, "t,K,price,implied_normal_vol,flag")?;
    for c in cells {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{}",
            c.t, c.strike, c.price, c.vol, c.flag
        )?;
    }
    Ok(())
}
