//! Weak-solution construction for deterministic volatility structures.
//!
//! A terminal value `X ~ f0` is hidden behind the information process
//! `I_t = B_t + ∫₀ᵗ v(s,X) ds`. The conditional density of `X` given the
//! observed path is
//!
//! ```text
//! f_t(x) ∝ f0(x) exp( ∫₀ᵗ v(s,x) dI_s − ½ ∫₀ᵗ v(s,x)² ds )
//! ```
//!
//! with the stochastic integral taken as a left-endpoint (Itô) sum on the
//! simulation mesh and the `ds` integral in closed form. The innovation
//! `W_t = I_t − ∫₀ᵗ ⟨v_s⟩ ds` drives the master equation
//! `df_t(x) = f_t(x) [v(t,x) − ⟨v_t⟩] dW_t`, which is also integrated
//! directly by an Euler scheme for cross-validation.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::exec::PathRng;
use crate::grid::{DensityGrid, StateGrid};
use crate::mesh::TimeMesh;
use crate::numeric::compensated_sum;
use crate::vol::VolStructure;

/// Inverse-CDF draw from the piecewise-linear CDF of `f0`.
pub fn draw_terminal(f0: &DensityGrid, rng: &mut PathRng) -> Result<f64> {
    let u = rng.uniform();
    sample_inverse_cdf(f0, u)
}

/// Quantile of the piecewise-linear CDF at level `u` in (0, 1).
pub fn sample_inverse_cdf(f0: &DensityGrid, u: f64) -> Result<f64> {
    let cum = f0.cumulative();
    let total = cum[cum.len() - 1];
    if !(total > 0.0) {
        return Err(Error::Degenerate("cannot sample from a density with zero mass".into()));
    }
    let target = u * total;
    let pts = f0.points();
    let i = cum.partition_point(|&c| c <= target).clamp(1, cum.len() - 1) - 1;
    let span = cum[i + 1] - cum[i];
    let frac = if span > 0.0 { (target - cum[i]) / span } else { 0.5 };
    Ok(pts[i] + frac * (pts[i + 1] - pts[i]))
}

/// Observation path `I` together with its driving noise `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationPath {
    pub info: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Simulate `B` on the mesh and add the closed-form drift `∫₀ᵗ v(s,X) ds`.
pub fn simulate_information(x: f64, v: &VolStructure, mesh: &TimeMesh, rng: &mut PathRng) -> Result<InformationPath> {
    let increments = rng.brownian_increments((0..mesh.steps()).map(|k| mesh.dt(k)));
    information_from_increments(x, v, mesh, &increments)
}

/// Build `I` from given Brownian increments (shared-noise experiments).
pub fn information_from_increments(
    x: f64,
    v: &VolStructure,
    mesh: &TimeMesh,
    increments: &[f64],
) -> Result<InformationPath> {
    if increments.len() != mesh.steps() {
        return argument(format!(
            "{} increments for a mesh of {} steps",
            increments.len(),
            mesh.steps()
        ));
    }
    let mut noise = Vec::with_capacity(mesh.len());
    let mut info = Vec::with_capacity(mesh.len());
    noise.push(0.0);
    info.push(0.0);
    let mut b = 0.0;
    for (k, db) in increments.iter().enumerate() {
        b += db;
        let (iv, _) = v.integrate(0.0, mesh.times()[k + 1], x)?;
        noise.push(b);
        info.push(b + iv);
    }
    Ok(InformationPath { info, noise })
}

enum Accumulator {
    /// `v = c(t) h(x)`: the Itô sum is `h(x) Σ c(t_j) ΔI_j`.
    Factored { h: Vec<f64>, h2: Vec<f64>, sum: f64 },
    /// Per-node sums for general structures.
    Full { sum: Vec<f64>, iv2: Vec<f64> },
}

/// Incremental evaluation of the Bayes-formula density along a path.
pub struct DensityFilter<'a> {
    vol: &'a VolStructure,
    grid: Arc<StateGrid>,
    log_f0: Vec<f64>,
    acc: Accumulator,
    time: f64,
}

impl<'a> DensityFilter<'a> {
    pub fn new(f0: &DensityGrid, vol: &'a VolStructure) -> Self {
        let grid = Arc::clone(f0.grid());
        let log_f0 = f0.values().iter().map(|v| v.ln()).collect();
        let acc = match vol.factored() {
            Some(fac) => {
                let h: Vec<f64> = grid.points().iter().map(|&x| fac.state_factor(x)).collect();
                let h2 = h.iter().map(|v| v * v).collect();
                Accumulator::Factored { h, h2, sum: 0.0 }
            }
            None => Accumulator::Full {
                sum: vec![0.0; grid.len()],
                iv2: vec![0.0; grid.len()],
            },
        };
        Self {
            vol,
            grid,
            log_f0,
            acc,
            time: 0.0,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Absorb the observation increment `dI` over `[self.time(), t_next]`.
    pub fn advance(&mut self, t_next: f64, d_info: f64) -> Result<()> {
        let t = self.time;
        if !(t_next > t) {
            return argument(format!("filter must move forward in time ({t} -> {t_next})"));
        }
        self.vol.check_time(t_next)?;
        match &mut self.acc {
            Accumulator::Factored { sum, .. } => {
                let c = self.vol.factored().expect("factored accumulator").time_factor(t);
                *sum += c * d_info;
            }
            Accumulator::Full { sum, iv2 } => {
                for (i, &x) in self.grid.points().iter().enumerate() {
                    sum[i] += self.vol.eval_unchecked(t, x) * d_info;
                    iv2[i] += self.vol.integrate(t, t_next, x)?.1;
                }
            }
        }
        self.time = t_next;
        Ok(())
    }

    /// Log of the unnormalized density at the current time.
    pub fn log_weights(&self) -> Vec<f64> {
        match &self.acc {
            Accumulator::Factored { h, h2, sum } => {
                let fac = self.vol.factored().expect("factored accumulator");
                let (_, c2) = fac.time_integrals(0.0, self.time);
                self.log_f0
                    .iter()
                    .zip(h.iter().zip(h2))
                    .map(|(lf, (h, h2))| lf + h * sum - 0.5 * h2 * c2)
                    .collect()
            }
            Accumulator::Full { sum, iv2 } => self
                .log_f0
                .iter()
                .zip(sum.iter().zip(iv2))
                .map(|(lf, (s, q))| lf + s - 0.5 * q)
                .collect(),
        }
    }

    pub fn density(&self) -> Result<DensityGrid> {
        density_from_log_weights(&self.grid, self.log_weights())
    }
}

/// Exponentiate with a max shift and normalize.
pub(crate) fn density_from_log_weights(grid: &Arc<StateGrid>, mut logw: Vec<f64>) -> Result<DensityGrid> {
    let max = logw
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate("all conditional weights underflow".into()));
    }
    for v in logw.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
    }
    DensityGrid::from_parts_unchecked(Arc::clone(grid), logw).normalize()
}

/// Conditional density at mesh index `k` given the information path.
pub fn conditional_density(
    f0: &DensityGrid,
    v: &VolStructure,
    info: &[f64],
    mesh: &TimeMesh,
    k: usize,
) -> Result<DensityGrid> {
    if k >= mesh.len() || info.len() < k + 1 {
        return argument(format!(
            "index {k} beyond path of length {}",
            info.len().min(mesh.len())
        ));
    }
    let times = mesh.times();
    let mut filter = DensityFilter::new(f0, v);
    for j in 0..k {
        filter.advance(times[j + 1], info[j + 1] - info[j])?;
    }
    filter.density()
}

/// Conditional density from the noise `B` and the terminal value `X`:
/// exponent `∫[v(s,x) − v(s,X)] dB − ½∫[v(s,x) − v(s,X)]² ds`.
///
/// The cross term `∫ v(s,x) v(s,X) ds` is discretized as
/// `Σ v(t_j,x) ∫_{t_j}^{t_{j+1}} v(s,X) ds`, the same sum that appears when
/// the drift of `I` is fed through the Itô sum of [`conditional_density`].
/// The two routines therefore agree to rounding on a shared path.
pub fn alt_conditional_density(
    f0: &DensityGrid,
    v: &VolStructure,
    noise: &[f64],
    x_terminal: f64,
    mesh: &TimeMesh,
    k: usize,
) -> Result<DensityGrid> {
    if k >= mesh.len() || noise.len() < k + 1 {
        return argument(format!(
            "index {k} beyond path of length {}",
            noise.len().min(mesh.len())
        ));
    }
    let times = mesh.times();
    let t = times[k];
    v.check_time(t)?;
    let pts = f0.points();
    let (_, iv2_terminal) = v.integrate(0.0, t, x_terminal)?;
    let mut logw: Vec<f64> = Vec::with_capacity(pts.len());
    // Per-step pieces shared by every node.
    let mut steps = Vec::with_capacity(k);
    for j in 0..k {
        let db = noise[j + 1] - noise[j];
        let drift = v.integrate(times[j], times[j + 1], x_terminal)?.0;
        let v_terminal = v.eval_unchecked(times[j], x_terminal);
        steps.push((times[j], db, drift, v_terminal));
    }
    for (i, &x) in pts.iter().enumerate() {
        let lf = f0.values()[i].ln();
        let (_, iv2_x) = v.integrate(0.0, t, x)?;
        let mut terms = Vec::with_capacity(2 * k + 2);
        for &(tj, db, drift, v_terminal) in &steps {
            let vx = v.eval_unchecked(tj, x);
            terms.push((vx - v_terminal) * db);
            terms.push(vx * drift);
        }
        terms.push(-0.5 * iv2_x);
        terms.push(-0.5 * iv2_terminal);
        logw.push(lf + compensated_sum(terms));
    }
    density_from_log_weights(f0.grid(), logw)
}

/// Conditional covariance of `X` and `v(t, X)`: the coefficient in `dA = V dW`.
pub fn absolute_volatility(d: &DensityGrid, v: &VolStructure, t: f64) -> Result<f64> {
    v.check_time(t)?;
    let s = moments_with_vol(d, |x| v.eval_unchecked(t, x));
    Ok(s.x_vol - s.mean * s.vol)
}

struct VolMoments {
    mean: f64,
    vol: f64,
    x_vol: f64,
}

fn moments_with_vol(d: &DensityGrid, vol_at: impl Fn(f64) -> f64) -> VolMoments {
    let pts = d.points();
    let w = d.grid().weights();
    let f = d.values();
    let (mut m, mut mv, mut mxv) = (
        Vec::with_capacity(pts.len()),
        Vec::with_capacity(pts.len()),
        Vec::with_capacity(pts.len()),
    );
    for i in 0..pts.len() {
        let wf = w[i] * f[i];
        let vi = vol_at(pts[i]);
        m.push(wf * pts[i]);
        mv.push(wf * vi);
        mxv.push(wf * pts[i] * vi);
    }
    VolMoments {
        mean: compensated_sum(m),
        vol: compensated_sum(mv),
        x_vol: compensated_sum(mxv),
    }
}

/// `W[k] = I[k] − Σ_{j<k} ⟨v⟩_j Δt_j` from the conditional mean volatilities.
pub fn innovation_path(info: &[f64], mean_vols: &[f64], mesh: &TimeMesh) -> Result<Vec<f64>> {
    if info.len() != mesh.len() || mean_vols.len() + 1 < mesh.len() {
        return argument("innovation needs I at every mesh time and ⟨v⟩ at every step start");
    }
    let mut w = Vec::with_capacity(mesh.len());
    w.push(info[0]);
    let mut drift = 0.0;
    for k in 0..mesh.steps() {
        drift += mean_vols[k] * mesh.dt(k);
        w.push(info[k + 1] - drift);
    }
    Ok(w)
}

/// Which densities a simulated bundle keeps.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DensityKeep {
    #[default]
    All,
    None,
    /// Mesh indices, ascending.
    At(Vec<usize>),
}

impl DensityKeep {
    fn wants(&self, k: usize) -> bool {
        match self {
            DensityKeep::All => true,
            DensityKeep::None => false,
            DensityKeep::At(idx) => idx.binary_search(&k).is_ok(),
        }
    }
}

/// One simulated scenario of the filtering model.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub mesh: TimeMesh,
    pub info: Vec<f64>,
    pub noise: Vec<f64>,
    pub innovation: Vec<f64>,
    /// `(mesh index, density)` for the kept times.
    pub densities: Vec<(usize, DensityGrid)>,
    pub asset: Vec<f64>,
    pub abs_vol: Vec<f64>,
    pub mean_vol: Vec<f64>,
    pub terminal: f64,
    pub seed: u64,
    pub path_index: u64,
}

impl PathBundle {
    pub fn density_at(&self, k: usize) -> Option<&DensityGrid> {
        self.densities.iter().find(|(i, _)| *i == k).map(|(_, d)| d)
    }

    /// CSV `t,I,W,A,V`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,I,W,A,V")?;
        for k in 0..self.mesh.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.mesh.times()[k],
                self.info[k],
                self.innovation[k],
                self.asset[k],
                self.abs_vol[k]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Initial density, volatility structure and mesh of a filtering experiment.
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub f0: DensityGrid,
    pub vol: VolStructure,
    pub mesh: TimeMesh,
}

impl FilterModel {
    /// `eps_t` is the distance the mesh must keep from the horizon.
    pub fn new(f0: DensityGrid, vol: VolStructure, mesh: TimeMesh, eps_t: f64) -> Result<Self> {
        mesh.check_against(&vol, eps_t)?;
        let mass = f0.mass();
        if (mass - 1.0).abs() > 1e-9 {
            return argument(format!("initial density must be normalized (mass {mass})"));
        }
        Ok(Self { f0, vol, mesh })
    }

    /// Draw `X` and the Brownian increments for path `path_index`.
    pub fn draw_noise(&self, seed: u64, path_index: u64) -> Result<(f64, Vec<f64>)> {
        let mut rng = PathRng::new(seed, path_index);
        let x = draw_terminal(&self.f0, &mut rng)?;
        let inc = rng.brownian_increments((0..self.mesh.steps()).map(|k| self.mesh.dt(k)));
        Ok((x, inc))
    }

    pub fn simulate(&self, seed: u64, path_index: u64, keep: &DensityKeep) -> Result<PathBundle> {
        let (x, inc) = self.draw_noise(seed, path_index)?;
        let mut bundle = self.run_path(x, &inc, keep)?;
        bundle.seed = seed;
        bundle.path_index = path_index;
        Ok(bundle)
    }

    /// Filter a path with given terminal value and Brownian increments.
    pub fn run_path(&self, x: f64, increments: &[f64], keep: &DensityKeep) -> Result<PathBundle> {
        let mesh = &self.mesh;
        let path = information_from_increments(x, &self.vol, mesh, increments)?;
        let times = mesh.times();
        let n = mesh.len();
        let mut filter = DensityFilter::new(&self.f0, &self.vol);
        let mut asset = Vec::with_capacity(n);
        let mut abs_vol = Vec::with_capacity(n);
        let mut mean_vol = Vec::with_capacity(n);
        let mut densities = Vec::new();
        for k in 0..n {
            let d = filter.density()?;
            let t = times[k];
            let s = moments_with_vol(&d, |y| self.vol.eval_unchecked(t, y));
            asset.push(s.mean);
            mean_vol.push(s.vol);
            abs_vol.push(s.x_vol - s.mean * s.vol);
            if keep.wants(k) {
                densities.push((k, d));
            }
            if k + 1 < n {
                filter.advance(times[k + 1], path.info[k + 1] - path.info[k])?;
            }
        }
        let innovation = innovation_path(&path.info, &mean_vol, mesh)?;
        Ok(PathBundle {
            mesh: mesh.clone(),
            info: path.info,
            noise: path.noise,
            innovation,
            densities,
            asset,
            abs_vol,
            mean_vol,
            terminal: x,
            seed: 0,
            path_index: 0,
        })
    }
}

/// Options for [`master_equation_euler`].
#[derive(Debug, Clone, Copy)]
pub struct EulerOptions {
    /// Rescale to unit mass after every step.
    pub renormalize: bool,
}

impl Default for EulerOptions {
    fn default() -> Self {
        Self { renormalize: true }
    }
}

/// Density path of the Euler master-equation scheme with diagnostics.
#[derive(Debug, Clone)]
pub struct EulerPath {
    pub densities: Vec<DensityGrid>,
    /// Mass after each step, before any renormalization (index 0 is `f0`).
    pub mass_before_renorm: Vec<f64>,
    /// Total mass removed by clipping negative node values.
    pub clipped_mass: f64,
    /// Steps on which more than 1% of nodes needed clipping.
    pub unstable_steps: usize,
}

impl EulerPath {
    pub fn stability_warning(&self) -> bool {
        self.unstable_steps > 0
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.mass_before_renorm
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Explicit Euler for `df = f [v − ⟨v⟩] dW`, clipping negative values at zero.
pub fn master_equation_euler(
    f0: &DensityGrid,
    v: &VolStructure,
    w: &[f64],
    mesh: &TimeMesh,
    opts: EulerOptions,
) -> Result<EulerPath> {
    if w.len() != mesh.len() {
        return argument(format!("W has {} points, mesh has {}", w.len(), mesh.len()));
    }
    let times = mesh.times();
    let grid = Arc::clone(f0.grid());
    let pts = grid.points();
    let weights = grid.weights();
    let mut f = f0.values().to_vec();
    let mut densities = Vec::with_capacity(mesh.len());
    densities.push(f0.clone());
    let mut masses = vec![f0.mass()];
    let mut clipped_mass = 0.0;
    let mut unstable_steps = 0;
    let mut vol = vec![0.0; pts.len()];
    for k in 0..mesh.steps() {
        let t = times[k];
        v.check_time(t)?;
        for (vi, &x) in vol.iter_mut().zip(pts) {
            *vi = v.eval_unchecked(t, x);
        }
        let mean = compensated_sum((0..pts.len()).map(|i| weights[i] * vol[i] * f[i]));
        let dw = w[k + 1] - w[k];
        let mut clipped_nodes = 0usize;
        for i in 0..pts.len() {
            let next = f[i] * (1.0 + (vol[i] - mean) * dw);
            if next < 0.0 {
                clipped_mass -= weights[i] * next;
                clipped_nodes += 1;
                f[i] = 0.0;
            } else {
                f[i] = next;
            }
        }
        if clipped_nodes * 100 > pts.len() {
            unstable_steps += 1;
        }
        let mass = grid.integrate(&f);
        masses.push(mass);
        if opts.renormalize {
            if !(mass > 0.0) {
                return Err(Error::Degenerate(format!(
                    "Euler density lost all mass at t = {}",
                    times[k + 1]
                )));
            }
            let s = 1.0 / mass;
            f.iter_mut().for_each(|v| *v *= s);
        }
        densities.push(DensityGrid::from_parts_unchecked(Arc::clone(&grid), f.clone()));
    }
    Ok(EulerPath {
        densities,
        mass_before_renorm: masses,
        clipped_mass,
        unstable_steps,
    })
}
