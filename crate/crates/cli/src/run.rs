//! Scenario execution and artifact writing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cdm::bridge::{
    bachelier_density, bridge_innovation, equivalence_check, semilinear_density, xi_from_noise, BridgeScenario,
    BridgeTrack,
};
use cdm::filter::{DensityKeep, FilterModel, PathBundle};
use cdm::numeric::{norm_pdf, MeanEstimate};
use cdm::pricing::{
    binary_call_closed_form, put_call_parity_check, smile, write_smile_csv, BinaryModel, SmileCell, VolFlag,
};
use cdm::vol::VolKind;
use cdm::{DensityGrid, TimeMesh};
use serde::Serialize;

use crate::config::{build, BridgeNoise, Built, InvariantKind, ModelKind, ScenarioConfig};
use crate::error::{CliError, Result};
use crate::manifest::{
    file_sha256, Artifact, CheckStatus, InvariantRecord, Metric, RunManifest, Status, SCHEMA_VERSION,
};

/// Collects artifacts, metrics and invariant results while a scenario runs.
struct Recorder<'a> {
    cfg: &'a ScenarioConfig,
    out: PathBuf,
    artifacts: Vec<Artifact>,
    metrics: BTreeMap<String, Metric>,
    invariants: Vec<InvariantRecord>,
}

impl<'a> Recorder<'a> {
    fn write(
        &mut self,
        name: &str,
        stochastic: bool,
        body: impl FnOnce(&mut BufWriter<File>) -> cdm::Result<()>,
    ) -> Result<()> {
        let path = self.out.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: file_sha256(&path)?,
            stochastic,
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, stochastic: bool, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, stochastic, |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn metric(&mut self, name: impl Into<String>, value: f64, stochastic: bool, tolerance: f64) {
        let tolerance = tolerance.is_finite().then_some(tolerance);
        self.metrics.insert(
            name.into(),
            Metric {
                value,
                stochastic,
                tolerance,
            },
        );
    }

    fn wants(&self, kind: InvariantKind) -> bool {
        self.cfg.invariants.checks.contains(&kind)
    }

    fn check(&mut self, kind: InvariantKind, passed: bool, detail: String) {
        if self.wants(kind) {
            let status = if passed {
                CheckStatus::Passed
            } else {
                CheckStatus::Failed
            };
            self.invariants.push(InvariantRecord {
                name: kind_name(kind),
                status,
                detail,
            });
        }
    }

    /// Mark every declared check that was not evaluated as skipped.
    fn finish_checks(&mut self) {
        for &kind in &self.cfg.invariants.checks {
            let name = kind_name(kind);
            if !self.invariants.iter().any(|r| r.name == name) {
                self.invariants.push(InvariantRecord {
                    name,
                    status: CheckStatus::Skipped,
                    detail: "not applicable to this model or configuration".into(),
                });
            }
        }
    }
}

fn kind_name(kind: InvariantKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct Summary {
    model: ModelKind,
    base_seed: u64,
    paths: usize,
    /// Path `i` draws from the stream `(base_seed, i)`.
    rng_streams: &'static str,
    mesh_end: f64,
    steps: usize,
    metrics: BTreeMap<String, f64>,
}

/// Run a validated config, writing artifacts and `manifest.json` into `out`.
///
/// Runtime failures still write a manifest carrying the failure record.
pub fn run_scenario(cfg: &ScenarioConfig, base: &Path, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let built = build(cfg, base)?;
    std::fs::create_dir_all(out)?;
    let mut rec = Recorder {
        cfg,
        out: out.to_path_buf(),
        artifacts: Vec::new(),
        metrics: BTreeMap::new(),
        invariants: Vec::new(),
    };
    let outcome = match cfg.model {
        ModelKind::Filter => run_filter(&mut rec, &built),
        ModelKind::Bridge => run_bridge(&mut rec, &built),
        ModelKind::Bachelier => run_bachelier(&mut rec, &built),
        ModelKind::Binary => run_binary(&mut rec, &built),
    };
    let outcome = outcome.and_then(|()| {
        let summary = Summary {
            model: cfg.model,
            base_seed: cfg.seeds.base,
            paths: cfg.seeds.paths,
            rng_streams: "stream = path index",
            mesh_end: built.mesh.end(),
            steps: built.mesh.steps(),
            metrics: rec.metrics.iter().map(|(k, m)| (k.clone(), m.value)).collect(),
        };
        let stochastic = cfg.model != ModelKind::Binary;
        rec.write_json("summary.json", stochastic, &summary)
    });
    rec.finish_checks();

    let failed: Vec<String> = rec
        .invariants
        .iter()
        .filter(|r| r.status == CheckStatus::Failed)
        .map(|r| r.name.clone())
        .collect();
    let (status, failure) = match &outcome {
        Err(e) => (Status::Degenerate, Some(e.to_string())),
        Ok(()) if !failed.is_empty() => (Status::InvariantFailure, Some(format!("failed: {}", failed.join(", ")))),
        Ok(()) => (Status::Ok, None),
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg)?,
        seed: cfg.seeds.base,
        paths: cfg.seeds.paths,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status,
        failure,
        invariants: rec.invariants,
        metrics: rec.metrics,
        artifacts: rec.artifacts,
    };
    manifest.save(out)?;
    match outcome {
        Err(e) => Err(e),
        Ok(()) if !failed.is_empty() => Err(CliError::Invariant(format!(
            "{} (see {})",
            failed.join(", "),
            out.join("manifest.json").display()
        ))),
        Ok(()) => Ok(manifest),
    }
}

/// Sorted, deduplicated mesh indices for snapshot and smile times.
fn indices(mesh: &TimeMesh, times: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = times.iter().map(|&t| mesh.index_of(t)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

struct Plan {
    snapshots: Vec<usize>,
    smile: Vec<usize>,
    /// Everything path 0 has to keep, always including the last index.
    keep: Vec<usize>,
}

fn plan(cfg: &ScenarioConfig, mesh: &TimeMesh) -> Plan {
    let snapshots = indices(mesh, &cfg.output.density_times);
    let smile = cfg.smile.as_ref().map(|s| indices(mesh, &s.times)).unwrap_or_default();
    let mut keep: Vec<usize> = snapshots
        .iter()
        .chain(&smile)
        .copied()
        .chain([0, mesh.steps()])
        .collect();
    keep.sort_unstable();
    keep.dedup();
    Plan { snapshots, smile, keep }
}

fn density_name(t: f64) -> String {
    format!("density_t{t:.6}.csv")
}

/// Snapshots, smile and the density invariants shared by every path model.
fn report_densities(
    rec: &mut Recorder<'_>,
    built: &Built,
    plan: &Plan,
    densities: &[(usize, DensityGrid)],
    stochastic: bool,
) -> Result<Vec<SmileCell>> {
    let times = built.mesh.times();
    for &k in &plan.snapshots {
        let (_, d) = densities.iter().find(|(i, _)| *i == k).expect("snapshot kept");
        rec.write(&density_name(times[k]), stochastic, |w| d.write_csv(w))?;
    }
    let tol = rec.cfg.invariants.tolerance;
    let mass_err = densities
        .iter()
        .map(|(_, d)| (d.mass() - 1.0).abs())
        .fold(0.0, f64::max);
    rec.metric("max_mass_error", mass_err, false, tol);
    rec.check(
        InvariantKind::Mass,
        mass_err <= tol,
        format!("max |mass - 1| = {mass_err:.3e} (tol {tol:e})"),
    );
    let bad = densities
        .iter()
        .map(|(_, d)| d.values().iter().filter(|v| !(**v >= 0.0 && v.is_finite())).count())
        .sum::<usize>();
    rec.check(
        InvariantKind::Positivity,
        bad == 0,
        format!("{bad} negative or non-finite nodes"),
    );

    let mut cells = Vec::new();
    if let Some(sm) = &rec.cfg.smile {
        let slices: Vec<(f64, &DensityGrid)> = plan
            .smile
            .iter()
            .map(|&k| {
                (
                    times[k],
                    &densities.iter().find(|(i, _)| *i == k).expect("smile kept").1,
                )
            })
            .collect();
        cells = smile(
            &slices,
            &sm.strikes,
            built.vol.horizon(),
            sm.relative,
            rec.cfg.execution,
        )?;
        rec.write("smile.csv", stochastic, |w| write_smile_csv(&cells, w))?;
    }
    let mut parity = 0.0f64;
    for (_, d) in densities {
        let (f, s) = (d.moment(1), d.variance().max(0.0).sqrt());
        let strikes: Vec<f64> = if cells.is_empty() {
            [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|z| f + z * s).collect()
        } else {
            cells.iter().map(|c| c.strike).collect()
        };
        for k in strikes {
            parity = parity.max(put_call_parity_check(d, k).abs() / (1.0 + k.abs()));
        }
    }
    rec.metric("max_parity_error", parity, false, tol);
    rec.check(
        InvariantKind::Parity,
        parity <= tol,
        format!("max |C - P - (F - K)| / (1 + |K|) = {parity:.3e}"),
    );
    Ok(cells)
}

/// Martingale check of the last conditional mean across paths against `A_0`.
fn report_martingale(rec: &mut Recorder<'_>, finals: &[f64], a0: f64) {
    let est = MeanEstimate::from_samples(finals);
    rec.metric("initial_mean", a0, false, 1e-12);
    rec.metric("final_asset_mean", est.mean, true, 1e-9);
    if finals.len() < 2 {
        return;
    }
    rec.metric("final_asset_se", est.std_error, true, 1e-9);
    let scale = 1e-9 * (1.0 + a0.abs());
    let (passed, detail) = if est.std_error <= scale {
        let gap = (est.mean - a0).abs();
        (gap <= scale, format!("degenerate spread; |mean - A_0| = {gap:.3e}"))
    } else {
        let z = est.z_score(a0);
        rec.metric("martingale_z", z, true, f64::INFINITY);
        let bound = rec.cfg.invariants.z_bound;
        (
            z.abs() <= bound,
            format!("mean {:.6} vs A_0 {a0:.6}, z = {z:+.2} (bound {bound})", est.mean),
        )
    };
    rec.check(InvariantKind::Martingale, passed, detail);
}

fn flat_smile(rec: &mut Recorder<'_>, cells: &[SmileCell], target: Option<f64>) {
    let vols: Vec<f64> = cells.iter().filter(|c| c.flag == VolFlag::Ok).map(|c| c.vol).collect();
    if vols.is_empty() {
        return;
    }
    let hi = vols.iter().copied().fold(f64::MIN, f64::max);
    let lo = vols.iter().copied().fold(f64::MAX, f64::min);
    let tol = rec.cfg.invariants.flat_smile_tolerance;
    rec.metric("smile_vol_spread", hi - lo, true, tol);
    let mut detail = format!("implied vols in [{lo:.6}, {hi:.6}] over {} cells", vols.len());
    let mut passed = hi - lo <= tol;
    if let Some(g) = target {
        let dev = vols.iter().map(|v| (v - g).abs()).fold(0.0, f64::max);
        passed &= dev <= tol;
        detail.push_str(&format!(", max |vol - gamma| = {dev:.3e}"));
    }
    rec.check(InvariantKind::FlatSmile, passed, detail);
}

fn path_name(i: usize) -> String {
    format!("path_{i:05}.csv")
}

fn run_filter(rec: &mut Recorder<'_>, built: &Built) -> Result<()> {
    let cfg = rec.cfg;
    let model = FilterModel::new(built.f0.clone(), built.vol.clone(), built.mesh.clone(), cfg.eps())?;
    let plan = plan(cfg, &built.mesh);
    let keep0 = DensityKeep::At(plan.keep.clone());
    let files = cfg.output.path_files;
    let results = cfg.execution.try_map(cfg.seeds.paths, |i| {
        let keep = if i == 0 { &keep0 } else { &DensityKeep::None };
        let b = model.simulate(cfg.seeds.base, i as u64, keep)?;
        let last = b.asset[b.asset.len() - 1];
        Ok::<_, cdm::Error>((if i < files || i == 0 { Some(b) } else { None }, last))
    })?;
    let finals: Vec<f64> = results.iter().map(|r| r.1).collect();
    let bundles: Vec<PathBundle> = results.into_iter().filter_map(|r| r.0).collect();
    for b in bundles.iter().take(files) {
        rec.write(&path_name(b.path_index as usize), true, |w| b.write_csv(w))?;
    }
    let cells = report_densities(rec, built, &plan, &bundles[0].densities, true)?;
    report_martingale(rec, &finals, built.f0.moment(1));
    flat_smile(rec, &cells, None);
    Ok(())
}

/// `(scenario, track)` for one bridge path, plus the filter noise when shared.
fn bridge_path(
    built: &Built,
    cfg: &ScenarioConfig,
    sigma: f64,
    i: usize,
) -> cdm::Result<(BridgeScenario, Option<Vec<f64>>)> {
    let horizon = built.vol.horizon();
    match cfg.bridge.noise {
        BridgeNoise::Exact => Ok((
            BridgeScenario::simulate(&built.f0, sigma, horizon, &built.mesh, cfg.seeds.base, i as u64)?,
            None,
        )),
        BridgeNoise::Shared => {
            let model = FilterModel::new(built.f0.clone(), built.vol.clone(), built.mesh.clone(), cfg.eps())?;
            let (x, inc) = model.draw_noise(cfg.seeds.base, i as u64)?;
            let xi = xi_from_noise(sigma, horizon, x, &inc, &built.mesh);
            let beta = built
                .mesh
                .times()
                .iter()
                .zip(&xi)
                .map(|(t, z)| z - sigma * x * t)
                .collect();
            Ok((
                BridgeScenario::from_bridge(sigma, horizon, x, beta, built.mesh.clone()),
                Some(inc),
            ))
        }
    }
}

fn semilinear_sigma(built: &Built) -> Result<f64> {
    match built.vol.kind() {
        VolKind::Semilinear { sigma } => Ok(*sigma),
        _ => Err(CliError::config("vol.kind", "model needs a semilinear structure")),
    }
}

fn run_bridge(rec: &mut Recorder<'_>, built: &Built) -> Result<()> {
    let cfg = rec.cfg;
    let sigma = semilinear_sigma(built)?;
    let horizon = built.vol.horizon();
    let plan = plan(cfg, &built.mesh);
    let files = cfg.output.path_files;
    let results = cfg.execution.try_map(cfg.seeds.paths, |i| {
        let (sc, inc) = bridge_path(built, cfg, sigma, i)?;
        let track = bridge_innovation(&sc, &built.f0)?;
        let last = track.asset[track.asset.len() - 1];
        Ok::<_, cdm::Error>((
            if i < files || i == 0 {
                Some((sc, track, inc))
            } else {
                None
            },
            last,
        ))
    })?;
    let finals: Vec<f64> = results.iter().map(|r| r.1).collect();
    let kept: Vec<(BridgeScenario, BridgeTrack, Option<Vec<f64>>)> = results.into_iter().filter_map(|r| r.0).collect();
    for (i, (sc, track, _)) in kept.iter().enumerate().take(files) {
        rec.write(&path_name(i), true, |w| sc.write_csv(track, w))?;
    }
    let (sc0, _, inc0) = &kept[0];
    let times = built.mesh.times();
    let densities = plan
        .keep
        .iter()
        .map(|&k| Ok((k, semilinear_density(&built.f0, sigma, horizon, sc0.xi[k], times[k])?)))
        .collect::<cdm::Result<Vec<_>>>()?;
    let cells = report_densities(rec, built, &plan, &densities, true)?;
    report_martingale(rec, &finals, built.f0.moment(1));
    flat_smile(rec, &cells, None);

    if let Some(inc) = inc0 {
        let steps = built.mesh.steps();
        let at = if plan.snapshots.is_empty() {
            vec![steps / 4, steps / 2, 3 * steps / 4, steps]
        } else {
            plan.snapshots.clone()
        };
        let report = equivalence_check(&built.f0, sigma, horizon, inc, sc0.terminal, &built.mesh, &at)?;
        rec.write_json("equivalence.json", true, &report)?;
        let sup = report.max_sup_norm();
        let tol = cfg.invariants.equivalence_tolerance;
        rec.metric("equivalence_sup_norm", sup, false, tol);
        rec.check(
            InvariantKind::Equivalence,
            sup <= tol,
            format!(
                "filter vs bridge sup-norm {sup:.3e} over {} times (tol {tol:e})",
                report.times.len()
            ),
        );
    }
    Ok(())
}

fn run_bachelier(rec: &mut Recorder<'_>, built: &Built) -> Result<()> {
    let cfg = rec.cfg;
    let sigma = semilinear_sigma(built)?;
    let horizon = built.vol.horizon();
    let gamma = 1.0 / (sigma * horizon);
    let plan = plan(cfg, &built.mesh);
    let files = cfg.output.path_files;
    let results = cfg.execution.try_map(cfg.seeds.paths, |i| {
        let sc = BridgeScenario::simulate(&built.f0, sigma, horizon, &built.mesh, cfg.seeds.base, i as u64)?;
        // Here the innovation coincides with the bridge observation.
        let track = BridgeTrack {
            innovation: sc.xi.clone(),
            asset: sc.xi.iter().map(|x| gamma * x).collect(),
        };
        let last = track.asset[track.asset.len() - 1];
        Ok::<_, cdm::Error>((if i < files || i == 0 { Some((sc, track)) } else { None }, last))
    })?;
    let finals: Vec<f64> = results.iter().map(|r| r.1).collect();
    let kept: Vec<(BridgeScenario, BridgeTrack)> = results.into_iter().filter_map(|r| r.0).collect();
    for (i, (sc, track)) in kept.iter().enumerate().take(files) {
        rec.write(&path_name(i), true, |w| sc.write_csv(track, w))?;
    }
    let sc0 = &kept[0].0;
    let times = built.mesh.times();
    let densities = plan
        .keep
        .iter()
        .map(|&k| {
            Ok((
                k,
                bachelier_density(gamma, sc0.xi[k], times[k], horizon, Arc::clone(&built.grid))?,
            ))
        })
        .collect::<cdm::Result<Vec<_>>>()?;
    let cells = report_densities(rec, built, &plan, &densities, true)?;
    rec.metric("gamma", gamma, false, 1e-12);
    report_martingale(rec, &finals, built.f0.moment(1));
    flat_smile(rec, &cells, Some(gamma));
    Ok(())
}

fn run_binary(rec: &mut Recorder<'_>, built: &Built) -> Result<()> {
    let cfg = rec.cfg;
    let spec = cfg.binary.as_ref().expect("validated");
    let model = BinaryModel::new(spec.x1, spec.x2, spec.q1, 1.0 - spec.q1, built.vol.clone())?;
    let prices = spec
        .strikes
        .iter()
        .map(|&k| binary_call_closed_form(&model, k, spec.t, None))
        .collect::<cdm::Result<Vec<_>>>()?;
    rec.write_json("closed_form.json", false, &prices)?;
    rec.metric("binary_price", prices[0].price, false, 1e-12);
    for (i, p) in prices.iter().enumerate() {
        rec.metric(format!("binary_price_k{i}"), p.price, false, 1e-12);
    }
    if spec.oracle_paths == 0 {
        return Ok(());
    }
    // Narrow Gaussians in place of the atoms, filtered up to the option time.
    let (w, q1, q2) = (spec.width, spec.q1, 1.0 - spec.q1);
    let f0 = DensityGrid::from_fn(Arc::clone(&built.grid), |x| {
        q1 * norm_pdf((x - spec.x1) / w) / w + q2 * norm_pdf((x - spec.x2) / w) / w
    })?
    .normalize()?;
    let mesh = TimeMesh::uniform(spec.t, cfg.time.steps)?;
    let oracle = FilterModel::new(f0.clone(), built.vol.clone(), mesh, cfg.eps())?;
    let finals = cfg.execution.try_map(spec.oracle_paths, |i| {
        let b = oracle.simulate(cfg.seeds.base, i as u64, &DensityKeep::None)?;
        Ok::<_, cdm::Error>(b.asset[b.asset.len() - 1])
    })?;
    let mut worst = 0.0f64;
    for (i, (p, &k)) in prices.iter().zip(&spec.strikes).enumerate() {
        let payoffs: Vec<f64> = finals.iter().map(|a| (a - k).max(0.0)).collect();
        let est = MeanEstimate::from_samples(&payoffs);
        rec.metric(format!("oracle_price_k{i}"), est.mean, true, f64::INFINITY);
        rec.metric(format!("oracle_se_k{i}"), est.std_error, true, f64::INFINITY);
        worst = worst.max(est.z_score(p.price).abs());
    }
    rec.metric("oracle_max_z", worst, true, f64::INFINITY);
    report_martingale(rec, &finals, f0.moment(1));
    Ok(())
}
