//! Semilinear volatility `σ T x / (T − t)` and its Brownian-bridge form.
//!
//! The observation is `ξ_t = σ A_T t + β_t` with `β` a standard Brownian
//! bridge on `[0, T]`. The conditional density depends on the path only
//! through `(t, ξ_t)`:
//!
//! ```text
//! f_t(x) ∝ f0(x) exp[ T/(T−t) (σ ξ_t x − ½ σ² x² t) ]
//! ```
//!
//! A Gaussian `f0` with variance `1/(T σ²)` gives the Bachelier model.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{argument, Error, Result};
use crate::exec::PathRng;
use crate::filter::{density_from_log_weights, draw_terminal, information_from_increments, DensityFilter};
use crate::grid::{DensityGrid, StateGrid};
use crate::mesh::TimeMesh;
use crate::vol::VolStructure;

/// Standard Brownian bridge on `[0, horizon]` sampled by exact Gaussian transitions.
pub fn simulate_bridge(horizon: f64, mesh: &TimeMesh, rng: &mut PathRng) -> Result<Vec<f64>> {
    if !(horizon > 0.0) {
        return argument("bridge horizon must be positive");
    }
    if mesh.end() > horizon {
        return Err(Error::Domain { t: mesh.end(), horizon });
    }
    let times = mesh.times();
    let mut beta = Vec::with_capacity(times.len());
    beta.push(0.0);
    let mut b = 0.0;
    for k in 0..mesh.steps() {
        let (t, dt) = (times[k], mesh.dt(k));
        let remaining = horizon - t;
        let after = if times[k + 1] == horizon { 0.0 } else { remaining - dt };
        let mean = b * after / remaining;
        let var = dt * after / remaining;
        // Draw even when pinned so stream positions do not depend on the mesh end.
        let z = rng.normal();
        b = if after == 0.0 { 0.0 } else { mean + var.sqrt() * z };
        beta.push(b);
    }
    Ok(beta)
}

/// One bridge-information scenario.
#[derive(Debug, Clone)]
pub struct BridgeScenario {
    pub sigma: f64,
    pub horizon: f64,
    pub terminal: f64,
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub mesh: TimeMesh,
}

impl BridgeScenario {
    /// Draw `A_T ~ f0` and a bridge, then form `ξ = σ A_T t + β`.
    pub fn simulate(
        f0: &DensityGrid,
        sigma: f64,
        horizon: f64,
        mesh: &TimeMesh,
        seed: u64,
        path_index: u64,
    ) -> Result<Self> {
        let mut rng = PathRng::new(seed, path_index);
        let terminal = draw_terminal(f0, &mut rng)?;
        let beta = simulate_bridge(horizon, mesh, &mut rng)?;
        Ok(Self::from_bridge(sigma, horizon, terminal, beta, mesh.clone()))
    }

    pub fn from_bridge(sigma: f64, horizon: f64, terminal: f64, beta: Vec<f64>, mesh: TimeMesh) -> Self {
        let xi = mesh
            .times()
            .iter()
            .zip(&beta)
            .map(|(t, b)| sigma * terminal * t + b)
            .collect();
        Self {
            sigma,
            horizon,
            terminal,
            beta,
            xi,
            mesh,
        }
    }

    /// CSV `t,beta,xi,W,A`.
    pub fn write_csv<W: Write>(&self, track: &BridgeTrack, mut out: W) -> Result<()> {
        writeln!(out, "t,beta,xi,W,A")?;
        for k in 0..self.mesh.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.mesh.times()[k],
                self.beta[k],
                self.xi[k],
                track.innovation[k],
                track.asset[k]
            )?;
        }
        Ok(())
    }
}

/// Conditional density given `ξ_t` for the semilinear structure.
pub fn semilinear_density(f0: &DensityGrid, sigma: f64, horizon: f64, xi: f64, t: f64) -> Result<DensityGrid> {
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::Domain { t, horizon });
    }
    let scale = horizon / (horizon - t);
    let logw = f0
        .points()
        .iter()
        .zip(f0.values())
        .map(|(&x, &f)| f.ln() + scale * (sigma * xi * x - 0.5 * sigma * sigma * x * x * t))
        .collect();
    density_from_log_weights(f0.grid(), logw)
}

/// Innovation path and conditional means along a bridge scenario.
#[derive(Debug, Clone)]
pub struct BridgeTrack {
    pub innovation: Vec<f64>,
    /// `E[A_T | ξ_t]`; at `t = T` this is the revealed terminal value.
    pub asset: Vec<f64>,
}

/// `W_t = ξ_t − ∫₀ᵗ (σ T E[A_T|ξ_s] − ξ_s)/(T − s) ds`, left-endpoint sums.
pub fn bridge_innovation(scenario: &BridgeScenario, f0: &DensityGrid) -> Result<BridgeTrack> {
    let times = scenario.mesh.times();
    let (sigma, big_t) = (scenario.sigma, scenario.horizon);
    let n = times.len();
    let mut asset = Vec::with_capacity(n);
    for (&t, &xi) in times.iter().zip(&scenario.xi) {
        if t >= big_t {
            asset.push(scenario.terminal);
        } else {
            asset.push(semilinear_density(f0, sigma, big_t, xi, t)?.moment(1));
        }
    }
    let mut innovation = Vec::with_capacity(n);
    innovation.push(scenario.xi[0]);
    let mut drift = 0.0;
    for k in 0..n - 1 {
        let t = times[k];
        drift += (sigma * big_t * asset[k] - scenario.xi[k]) / (big_t - t) * scenario.mesh.dt(k);
        innovation.push(scenario.xi[k + 1] - drift);
    }
    Ok(BridgeTrack { innovation, asset })
}

/// Initial density `N(0, 1/(T σ²))` that turns the semilinear model into Bachelier.
pub fn bachelier_initial_density(sigma: f64, horizon: f64, grid: Arc<StateGrid>) -> Result<DensityGrid> {
    if !(sigma > 0.0 && horizon > 0.0) {
        return argument("Bachelier initial density needs sigma > 0 and T > 0");
    }
    DensityGrid::gaussian(grid, 0.0, 1.0 / (sigma * horizon.sqrt()))
}

/// Bachelier conditional density: Gaussian with mean `γ W_t` and variance `γ² (T − t)`.
pub fn bachelier_density(gamma: f64, w: f64, t: f64, horizon: f64, grid: Arc<StateGrid>) -> Result<DensityGrid> {
    if !(gamma > 0.0) {
        return argument(format!("gamma must be positive, got {gamma}"));
    }
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::Domain { t, horizon });
    }
    DensityGrid::gaussian(grid, gamma * w, gamma * (horizon - t).sqrt())
}

/// Increasing `C¹` maps used by [`transform_density`].
#[derive(Debug, Clone, PartialEq)]
pub enum Bijection {
    Exp,
    /// `scale * x + shift`, `scale > 0`.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// Piecewise-linear interpolation of sampled pairs.
    Table {
        xs: Vec<f64>,
        zs: Vec<f64>,
    },
}

impl Bijection {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Bijection::Exp => x.exp(),
            Bijection::Affine { scale, shift } => scale * x + shift,
            Bijection::Table { xs, zs } => interp(xs, zs, x),
        }
    }

    pub fn inverse(&self, z: f64) -> f64 {
        match self {
            Bijection::Exp => z.ln(),
            Bijection::Affine { scale, shift } => (z - shift) / scale,
            Bijection::Table { xs, zs } => interp(zs, xs, z),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Bijection::Exp => x.exp(),
            Bijection::Affine { scale, .. } => *scale,
            Bijection::Table { xs, zs } => {
                let n = xs.len();
                let i = xs.partition_point(|&p| p < x);
                let slope = |j: usize| (zs[j + 1] - zs[j]) / (xs[j + 1] - xs[j]);
                if i == 0 {
                    slope(0)
                } else if i >= n {
                    slope(n - 2)
                } else if xs[i] == x && i + 1 < n {
                    0.5 * (slope(i - 1) + slope(i))
                } else {
                    slope(i - 1)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Bijection::Exp => Ok(()),
            Bijection::Affine { scale, shift } => {
                if *scale > 0.0 && scale.is_finite() && shift.is_finite() {
                    Ok(())
                } else {
                    argument("affine map needs a finite positive scale")
                }
            }
            Bijection::Table { xs, zs } => {
                if xs.len() < 2 || xs.len() != zs.len() {
                    return argument("bijection table needs at least two matching samples");
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) || zs.windows(2).any(|w| w[1] <= w[0]) {
                    return argument("bijection table samples must be strictly increasing");
                }
                Ok(())
            }
        }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let i = xs.partition_point(|&p| p <= x).clamp(1, n - 1);
    let (x0, x1) = (xs[i - 1], xs[i]);
    ys[i - 1] + (x - x0) / (x1 - x0) * (ys[i] - ys[i - 1])
}

/// Density of `ψ(X)`: `g(z) = f(ψ⁻¹(z)) / ψ'(ψ⁻¹(z))` on the image nodes `z_i = ψ(x_i)`.
pub fn transform_density(d: &DensityGrid, psi: &Bijection) -> Result<DensityGrid> {
    psi.validate()?;
    if let Bijection::Table { xs, .. } = psi {
        if xs[0] > d.grid().xmin() || xs[xs.len() - 1] < d.grid().xmax() {
            return argument(format!(
                "bijection table covers [{}, {}] but the grid spans [{}, {}]",
                xs[0],
                xs[xs.len() - 1],
                d.grid().xmin(),
                d.grid().xmax()
            ));
        }
    }
    let pts = d.points();
    let zs: Vec<f64> = pts.iter().map(|&x| psi.apply(x)).collect();
    if let Some(i) = zs.windows(2).position(|w| !(w[1] > w[0])) {
        return argument(format!(
            "map is not strictly increasing on the grid (nodes {} and {} map to {} and {})",
            i,
            i + 1,
            zs[i],
            zs[i + 1]
        ));
    }
    let mut values = Vec::with_capacity(pts.len());
    for (&x, &f) in pts.iter().zip(d.values()) {
        let jac = psi.derivative(x);
        if !(jac > 0.0) {
            return argument(format!("map derivative {jac} at x = {x} is not positive"));
        }
        values.push(f / jac);
    }
    DensityGrid::new(Arc::new(StateGrid::from_points(zs)?), values)
}

/// Filter vs bridge discrepancy on shared noise.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub times: Vec<f64>,
    pub sup_norm: Vec<f64>,
    pub linf_location: Vec<f64>,
}

impl EquivalenceReport {
    pub fn max_sup_norm(&self) -> f64 {
        self.sup_norm.iter().copied().fold(0.0, f64::max)
    }
}

/// Bridge observation built from the noise of the filtering model:
/// `ξ_t = (T − t) Σ_{j<k} ΔB_j/(T − t_j) + σ X t` (left-endpoint sum,
/// closed-form drift).
pub fn xi_from_noise(sigma: f64, horizon: f64, terminal: f64, increments: &[f64], mesh: &TimeMesh) -> Vec<f64> {
    let times = mesh.times();
    let mut xi = Vec::with_capacity(times.len());
    xi.push(0.0);
    let mut acc = 0.0;
    for (k, db) in increments.iter().enumerate() {
        acc += db / (horizon - times[k]);
        let t = times[k + 1];
        xi.push((horizon - t) * acc + sigma * terminal * t);
    }
    xi
}

/// Compare the filtering density driven by `I = B + ∫v(s,X)ds` with the
/// closed-form bridge density driven by `ξ` built from the same `B`, at the
/// requested mesh indices.
pub fn equivalence_check(
    f0: &DensityGrid,
    sigma: f64,
    horizon: f64,
    increments: &[f64],
    terminal: f64,
    mesh: &TimeMesh,
    at: &[usize],
) -> Result<EquivalenceReport> {
    let v = VolStructure::semilinear(sigma, horizon)?;
    mesh.check_against(&v, 0.0)?;
    let path = information_from_increments(terminal, &v, mesh, increments)?;
    let xi = xi_from_noise(sigma, horizon, terminal, increments, mesh);
    let times = mesh.times();
    let mut wanted = at.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.last().is_some_and(|&k| k >= mesh.len()) {
        return argument("comparison index beyond the mesh");
    }
    let mut report = EquivalenceReport {
        times: Vec::new(),
        sup_norm: Vec::new(),
        linf_location: Vec::new(),
    };
    let mut filter = DensityFilter::new(f0, &v);
    let mut k = 0;
    for &target in &wanted {
        while k < target {
            filter.advance(times[k + 1], path.info[k + 1] - path.info[k])?;
            k += 1;
        }
        let a = filter.density()?;
        let b = semilinear_density(f0, sigma, horizon, xi[k], times[k])?;
        let (d, loc) = a.sup_distance(&b)?;
        report.times.push(times[k]);
        report.sup_norm.push(d);
        report.linf_location.push(loc);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::numeric::norm_pdf;

    fn grid(a: f64, b: f64, n: usize) -> Arc<StateGrid> {
        Arc::new(make_grid(a, b, n).unwrap())
    }

    #[test]
    fn bridge_starts_and_ends_pinned() {
        let mesh = TimeMesh::uniform(2.0, 64).unwrap();
        let beta = simulate_bridge(2.0, &mesh, &mut PathRng::new(1, 0)).unwrap();
        assert_eq!(beta[0], 0.0);
        assert_eq!(beta[64], 0.0);
        assert!(beta[32] != 0.0);
    }

    #[test]
    fn bridge_rejects_mesh_past_horizon() {
        let mesh = TimeMesh::uniform(1.5, 10).unwrap();
        assert!(matches!(
            simulate_bridge(1.0, &mesh, &mut PathRng::new(1, 0)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn bridge_midpoint_variance() {
        let big_t = 1.0;
        let mesh = TimeMesh::uniform(big_t, 8).unwrap();
        let mids: Vec<f64> = (0..10_000)
            .map(|i| simulate_bridge(big_t, &mesh, &mut PathRng::new(5, i)).unwrap()[4])
            .collect();
        let var = mids.iter().map(|x| x * x).sum::<f64>() / mids.len() as f64;
        assert!((var - big_t / 4.0).abs() < 0.05 * big_t / 4.0, "var {var}");
    }

    #[test]
    fn semilinear_density_at_zero_is_f0() {
        let f0 = DensityGrid::from_fn(grid(-4.0, 4.0, 161), |x| (-(x - 0.5f64).powi(2)).exp() + 0.2)
            .unwrap()
            .normalize()
            .unwrap();
        let d = semilinear_density(&f0, 1.3, 1.0, 0.0, 0.0).unwrap();
        assert!(d.sup_distance(&f0).unwrap().0 < 1e-15);
    }

    #[test]
    fn semilinear_density_symmetry() {
        let f0 = DensityGrid::from_fn(grid(-4.0, 4.0, 161), |x| (-x * x).exp() * (1.0 + x * x))
            .unwrap()
            .normalize()
            .unwrap();
        let d = semilinear_density(&f0, 1.0, 1.0, 0.0, 0.6).unwrap();
        let v = d.values();
        for i in 0..v.len() {
            assert!((v[i] - v[v.len() - 1 - i]).abs() < 1e-13);
        }
    }

    #[test]
    fn semilinear_density_gaussian_case() {
        let g = grid(-8.0, 8.0, 2001);
        let f0 = bachelier_initial_density(1.0, 1.0, Arc::clone(&g)).unwrap();
        let d = semilinear_density(&f0, 1.0, 1.0, 0.3, 0.5).unwrap();
        let sd = 0.5f64.sqrt();
        let mut worst = 0.0f64;
        for (x, f) in d.points().iter().zip(d.values()) {
            worst = worst.max((f - norm_pdf((x - 0.3) / sd) / sd).abs());
        }
        assert!(worst < 1e-6, "{worst:e}");
        assert!(matches!(
            semilinear_density(&f0, 1.0, 1.0, 0.3, 1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn markov_in_xi() {
        let f0 = DensityGrid::from_fn(grid(-5.0, 5.0, 201), |x| {
            (-(x - 1.0f64).powi(2)).exp() + (-(x + 2.0f64).powi(2)).exp()
        })
        .unwrap()
        .normalize()
        .unwrap();
        let mesh = TimeMesh::uniform(1.0, 10).unwrap();
        let a = BridgeScenario::from_bridge(
            1.0,
            1.0,
            0.5,
            vec![0.0, 0.1, 0.2, 0.1, 0.0, 0.3, 0.1, 0.0, 0.2, 0.1, 0.0],
            mesh.clone(),
        );
        let b = BridgeScenario::from_bridge(
            1.0,
            1.0,
            0.5,
            vec![0.0, -0.4, 0.9, 0.3, 0.0, 0.3, 0.2, 0.1, 0.0, 0.0, 0.0],
            mesh,
        );
        assert_eq!(a.xi[5], b.xi[5]);
        let da = semilinear_density(&f0, 1.0, 1.0, a.xi[5], 0.5).unwrap();
        let db = semilinear_density(&f0, 1.0, 1.0, b.xi[5], 0.5).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn bachelier_innovation_is_xi() {
        let g = grid(-8.0, 8.0, 2001);
        let f0 = bachelier_initial_density(1.0, 1.0, g).unwrap();
        let mesh = TimeMesh::uniform(0.9, 90).unwrap();
        let sc = BridgeScenario::simulate(&f0, 1.0, 1.0, &mesh, 3, 0).unwrap();
        let track = bridge_innovation(&sc, &f0).unwrap();
        assert_eq!(track.innovation[0], 0.0);
        for (w, xi) in track.innovation.iter().zip(&sc.xi) {
            assert!((w - xi).abs() < 1e-8, "{w} vs {xi}");
        }
    }

    #[test]
    fn bachelier_density_examples() {
        let g = grid(-8.0, 8.0, 2001);
        let d = bachelier_density(1.0, 0.0, 0.0, 1.0, Arc::clone(&g)).unwrap();
        assert!((d.moment(2) - 1.0).abs() < 1e-9);
        let d = bachelier_density(1.0, 0.3, 0.5, 1.0, Arc::clone(&g)).unwrap();
        assert!((d.mean() - 0.3).abs() < 1e-12);
        assert!((d.variance() - 0.5).abs() < 1e-9);
        let d = bachelier_density(1.0, 0.0, 1.0 - 1e-3, 1.0, g.clone()).unwrap();
        assert!((d.variance().sqrt() - 1e-3f64.sqrt()).abs() < 1e-6);
        assert!(matches!(
            bachelier_density(1.0, 0.0, 1.0, 1.0, g),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn transform_identity_and_scaling() {
        let d = DensityGrid::gaussian(grid(-6.0, 6.0, 601), 0.2, 1.1).unwrap();
        let same = transform_density(&d, &Bijection::Affine { scale: 1.0, shift: 0.0 }).unwrap();
        assert_eq!(same.values(), d.values());
        let doubled = transform_density(&d, &Bijection::Affine { scale: 2.0, shift: 0.0 }).unwrap();
        assert_eq!(doubled.points()[0], -12.0);
        assert_eq!(doubled.points()[600], 12.0);
        for (a, b) in doubled.values().iter().zip(d.values()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!((doubled.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_rejects_non_monotone_table() {
        let d = DensityGrid::gaussian(grid(-1.0, 1.0, 21), 0.0, 0.5).unwrap();
        let bad = Bijection::Table {
            xs: vec![-1.0, 0.0, 1.0],
            zs: vec![0.0, 1.0, 0.5],
        };
        assert!(matches!(transform_density(&d, &bad), Err(Error::Argument(_))));
        // A table that does not cover the grid is rejected too.
        let short = Bijection::Table {
            xs: vec![-0.5, 0.5],
            zs: vec![0.0, 1.0],
        };
        assert!(matches!(transform_density(&d, &short), Err(Error::Argument(_))));
    }

    #[test]
    fn transform_preserves_first_moment_under_map() {
        // Trapezoid mass on the image of a uniform grid under exp is sinh(h)/h.
        let d = DensityGrid::gaussian(grid(-6.0, 6.0, 6001), 0.1, 0.4).unwrap();
        let g = transform_density(&d, &Bijection::Exp).unwrap();
        let lhs: f64 = d
            .points()
            .iter()
            .zip(d.values())
            .zip(d.grid().weights())
            .map(|((x, f), w)| x.exp() * f * w)
            .sum();
        assert!((lhs - g.moment(1)).abs() < 1e-4);
        assert!((g.mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equivalence_degenerate_sigma_zero() {
        let f0 = DensityGrid::gaussian(grid(-6.0, 6.0, 241), 0.3, 1.0).unwrap();
        let mesh = TimeMesh::uniform(0.5, 50).unwrap();
        let inc = PathRng::new(2, 0).brownian_increments((0..50).map(|k| mesh.dt(k)));
        let rep = equivalence_check(&f0, 0.0, 1.0, &inc, 0.4, &mesh, &[0, 25, 50]).unwrap();
        assert!(rep.max_sup_norm() < 1e-15);
    }

    #[test]
    fn equivalence_is_close_on_fine_mesh() {
        let g = grid(-8.0, 8.0, 1601);
        let f0 = bachelier_initial_density(1.0, 1.0, g).unwrap();
        let mesh = TimeMesh::uniform(0.5, 5000).unwrap();
        let mut rng = PathRng::new(17, 0);
        let x = draw_terminal(&f0, &mut rng).unwrap();
        let inc = rng.brownian_increments((0..5000).map(|k| mesh.dt(k)));
        let rep = equivalence_check(&f0, 1.0, 1.0, &inc, x, &mesh, &[5000]).unwrap();
        assert!(rep.sup_norm[0] <= 1e-4, "{:?}", rep);
    }
}
