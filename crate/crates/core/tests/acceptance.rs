//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdm::bridge::{
    bachelier_density, bachelier_initial_density, equivalence_check, semilinear_density, transform_density, Bijection,
    BridgeScenario,
};
use cdm::filter::{
    draw_terminal, information_from_increments, master_equation_euler, DensityFilter, DensityKeep, EulerOptions,
    FilterModel,
};
use cdm::grid::breeden_litzenberger;
use cdm::numeric::{norm_cdf, norm_pdf, MeanEstimate};
use cdm::pricing::{binary_call_closed_form, call_price, implied_normal_vol, BinaryModel, VolFlag};
use cdm::vol::Table1d;
use cdm::{make_grid, DensityGrid, Execution, MarketSnapshot, PathRng, StateGrid, TimeMesh, VolStructure};

type Outcome = Result<(bool, String), String>;

fn grid(a: f64, b: f64, n: usize) -> Arc<StateGrid> {
    Arc::new(make_grid(a, b, n).unwrap())
}

fn mixture(g: Arc<StateGrid>) -> DensityGrid {
    DensityGrid::from_fn(g, |x| {
        0.6 * norm_pdf((x + 1.0) / 0.5) / 0.5 + 0.4 * norm_pdf((x - 1.5) / 0.8) / 0.8
    })
    .unwrap()
    .normalize()
    .unwrap()
}

fn c1_bachelier_equivalence() -> Outcome {
    let (sigma, big_t) = (0.8, 1.5);
    let gamma = 1.0 / (sigma * big_t);
    let eps = 1e-3 * big_t;
    let g = grid(-8.0, 8.0, 2001);
    let f0 = bachelier_initial_density(sigma, big_t, Arc::clone(&g)).map_err(|e| e.to_string())?;
    let mesh = TimeMesh::uniform(big_t - eps, 19).map_err(|e| e.to_string())?;
    let sc = BridgeScenario::simulate(&f0, sigma, big_t, &mesh, 11, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (k, &t) in mesh.times().iter().enumerate() {
        let a = semilinear_density(&f0, sigma, big_t, sc.xi[k], t).map_err(|e| e.to_string())?;
        let b = bachelier_density(gamma, sc.xi[k], t, big_t, Arc::clone(&g)).map_err(|e| e.to_string())?;
        worst = worst.max(a.sup_distance(&b).map_err(|e| e.to_string())?.0);
    }
    Ok((worst <= 1e-6, format!("sup-norm {worst:.3e} over 20 times (tol 1e-6)")))
}

fn c2_filter_bridge_equivalence() -> Outcome {
    let (sigma, big_t) = (1.0, 1.0);
    let g = grid(-6.0, 6.0, 1201);
    let f0 = mixture(g);
    let fine = TimeMesh::uniform(0.5, 5000).map_err(|e| e.to_string())?;
    let mut rng = PathRng::new(2, 0);
    let x = draw_terminal(&f0, &mut rng).map_err(|e| e.to_string())?;
    let base = rng.brownian_increments((0..fine.steps()).map(|k| fine.dt(k)));
    let mut errs = Vec::new();
    for factor in [4usize, 2, 1] {
        let mesh = fine.coarsen(factor).map_err(|e| e.to_string())?;
        let inc: Vec<f64> = base.chunks(factor).map(|c| c.iter().sum()).collect();
        let n = mesh.steps();
        let rep = equivalence_check(&f0, sigma, big_t, &inc, x, &mesh, &[n / 2, n]).map_err(|e| e.to_string())?;
        errs.push((mesh.max_step(), rep.max_sup_norm()));
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0].1 / w[1].1).log2()).collect();
    let finest = errs[2].1;
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        // The error is c1 dt + c2 dt^2, so the estimate is 1 + O(dt); compare at two decimals.
        finest <= 1e-4 && (100.0 * min_order).round() >= 100.0,
        format!(
            "sup-norm {:.3e} at dt=1e-4 (tol 1e-4); errors {:?}; orders {:?} (min {:.6}, need >= 1.00 at two decimals)",
            finest,
            errs.iter().map(|e| format!("{:.2e}", e.1)).collect::<Vec<_>>(),
            orders.iter().map(|o| format!("{o:.6}")).collect::<Vec<_>>(),
            min_order
        ),
    ))
}

/// `A_t` for a two-bump initial density under `v(t, x) = x`.
fn binary_oracle(strike: f64, t: f64, paths: usize) -> Result<MeanEstimate, String> {
    let g = grid(-0.3, 1.3, 1601);
    let v = VolStructure::state_table(Table1d::new(vec![-1.0, 2.0], vec![-1.0, 2.0]).unwrap(), 10.0)
        .map_err(|e| e.to_string())?;
    let mesh = TimeMesh::uniform(t, 1).map_err(|e| e.to_string())?;
    let model = |w: f64| -> Result<FilterModel, String> {
        let f0 = DensityGrid::from_fn(Arc::clone(&g), |x| {
            0.5 * norm_pdf(x / w) + 0.5 * norm_pdf((x - 1.0) / w)
        })
        .and_then(|d| d.normalize())
        .map_err(|e| e.to_string())?;
        FilterModel::new(f0, v.clone(), mesh.clone(), 0.0).map_err(|e| e.to_string())
    };
    let (wide, narrow) = (model(0.02)?, model(0.01)?);
    let payoff = |m: &FilterModel, i: usize| -> Result<f64, String> {
        let b = m
            .simulate(31, i as u64, &DensityKeep::None)
            .map_err(|e| e.to_string())?;
        Ok((b.asset[1] - strike).max(0.0))
    };
    let samples = Execution::Parallel.try_map(paths, |i| {
        let (a, b) = (payoff(&wide, i)?, payoff(&narrow, i)?);
        Ok::<f64, String>((4.0 * b - a) / 3.0)
    })?;
    Ok(MeanEstimate::from_samples(&samples))
}

fn c3_binary_closed_form() -> Outcome {
    let v = VolStructure::state_table(Table1d::new(vec![-1.0, 2.0], vec![-1.0, 2.0]).unwrap(), 10.0)
        .map_err(|e| e.to_string())?;
    let m = BinaryModel::new(0.0, 1.0, 0.5, 0.5, v).map_err(|e| e.to_string())?;
    let worked = binary_call_closed_form(&m, 0.5, 1.0, None)
        .map_err(|e| e.to_string())?
        .price;
    let hand = 0.25 * (norm_cdf(0.5) - norm_cdf(-0.5));
    let mut ok = (worked - hand).abs() < 1e-12 && (worked - 0.09573).abs() < 5e-6;
    let mut detail = format!("worked example {worked:.6} (0.09573)");
    for (strike, big_v) in [(0.5, 1.0), (0.3, 0.5), (0.7, 2.0)] {
        let cf = binary_call_closed_form(&m, strike, big_v, None)
            .map_err(|e| e.to_string())?
            .price;
        let mc = binary_oracle(strike, big_v, 100_000)?;
        let z = mc.z_score(cf);
        ok &= z.abs() <= 3.0;
        detail.push_str(&format!(
            "; K={strike} V={big_v}: cf {cf:.5} mc {:.5}±{:.5} z={z:+.2}",
            mc.mean, mc.std_error
        ));
    }
    Ok((ok, detail))
}

fn c4_martingale() -> Outcome {
    let big_t = 1.0;
    let v = VolStructure::semilinear(1.0, big_t).map_err(|e| e.to_string())?;
    let f0 = mixture(grid(-6.0, 6.0, 601));
    let mesh = TimeMesh::uniform(0.75, 750).map_err(|e| e.to_string())?;
    let checks = [250usize, 500, 750];
    let nodes: Vec<usize> = [-1.5, -0.5, 0.5, 1.5, 2.5]
        .iter()
        .map(|&x| f0.points().iter().position(|&p| (p - x).abs() < 1e-9).unwrap())
        .collect();
    let model = FilterModel::new(f0.clone(), v.clone(), mesh.clone(), 1e-3).map_err(|e| e.to_string())?;
    let per_path = Execution::Parallel
        .try_map(10_000, |i| {
            let (x, inc) = model.draw_noise(77, i as u64)?;
            let path = information_from_increments(x, &v, &mesh, &inc)?;
            let mut filter = DensityFilter::new(&f0, &v);
            let mut out = Vec::with_capacity(checks.len() * (nodes.len() + 1));
            let mut k = 0;
            for &target in &checks {
                while k < target {
                    filter.advance(mesh.times()[k + 1], path.info[k + 1] - path.info[k])?;
                    k += 1;
                }
                let d = filter.density()?;
                out.extend(nodes.iter().map(|&j| d.values()[j]));
                out.push(d.moment(1));
            }
            Ok::<_, cdm::Error>(out)
        })
        .map_err(|e| e.to_string())?;
    let width = nodes.len() + 1;
    let mut worst = 0.0f64;
    let mut asset_worst = 0.0f64;
    for c in 0..checks.len() * width {
        let col: Vec<f64> = per_path.iter().map(|r| r[c]).collect();
        let est = MeanEstimate::from_samples(&col);
        if c % width == nodes.len() {
            asset_worst = asset_worst.max(est.z_score(f0.moment(1)).abs());
        } else {
            worst = worst.max(est.z_score(f0.values()[nodes[c % width]]).abs());
        }
    }
    Ok((
        worst <= 3.0 && asset_worst <= 3.0,
        format!("max |z| density {worst:.2} over 5 nodes x 3 times, asset {asset_worst:.2} (tol 3 SE, 1e4 paths)"),
    ))
}

fn c5_normalization_drift() -> Outcome {
    let v = VolStructure::semilinear(1.0, 1.0).map_err(|e| e.to_string())?;
    let f0 = mixture(grid(-6.0, 6.0, 601));
    let mesh = TimeMesh::uniform(0.9, 900).map_err(|e| e.to_string())?;
    let drifts = Execution::Parallel
        .try_map(20, |i| {
            let inc = PathRng::new(5, i as u64).brownian_increments((0..mesh.steps()).map(|k| mesh.dt(k)));
            let mut w = vec![0.0];
            for d in inc {
                w.push(w[w.len() - 1] + d);
            }
            let path = master_equation_euler(&f0, &v, &w, &mesh, EulerOptions { renormalize: false })?;
            Ok::<_, cdm::Error>(path.max_mass_drift())
        })
        .map_err(|e| e.to_string())?;
    let worst = drifts.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-3,
        format!("max |mass - 1| {worst:.3e} over 20 paths, dt=1e-3 on [0, 0.9T] (tol 1e-3)"),
    ))
}

fn c6_terminal_convergence() -> Outcome {
    let v = VolStructure::semilinear(1.0, 1.0).map_err(|e| e.to_string())?;
    let f0 = mixture(grid(-8.0, 8.0, 4001));
    let mesh = TimeMesh::uniform(0.999, 99_900).map_err(|e| e.to_string())?;
    let checks = [mesh.index_of(0.9), mesh.index_of(0.99), mesh.steps()];
    let model = FilterModel::new(f0.clone(), v.clone(), mesh.clone(), 1e-3).map_err(|e| e.to_string())?;
    let errors = Execution::Parallel
        .try_map(1000, |i| {
            let (x, inc) = model.draw_noise(99, i as u64)?;
            let path = information_from_increments(x, &v, &mesh, &inc)?;
            let mut filter = DensityFilter::new(&f0, &v);
            let mut out = Vec::new();
            let mut k = 0;
            for &target in &checks {
                while k < target {
                    filter.advance(mesh.times()[k + 1], path.info[k + 1] - path.info[k])?;
                    k += 1;
                }
                out.push((filter.density()?.moment(1) - x).abs());
            }
            Ok::<_, cdm::Error>(out)
        })
        .map_err(|e| e.to_string())?;
    let medians: Vec<f64> = (0..checks.len())
        .map(|c| {
            let mut col: Vec<f64> = errors.iter().map(|r| r[c]).collect();
            col.sort_by(f64::total_cmp);
            0.5 * (col[col.len() / 2 - 1] + col[col.len() / 2])
        })
        .collect();
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.3e}")).collect();
    Ok((
        ok,
        format!("median |A - X| at eps = 0.1, 0.01, 0.001 (x T): {}", shown.join(", ")),
    ))
}

fn c7_breeden_litzenberger() -> Outcome {
    let d = DensityGrid::gaussian(grid(-8.0, 8.0, 16_001), 0.0, 1.0).map_err(|e| e.to_string())?;
    let mut errs = Vec::new();
    for n in [81usize, 161] {
        let strikes: Vec<f64> = (0..n).map(|i| -4.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
        let prices = strikes.iter().map(|&k| call_price(&d, k)).collect();
        let snap = MarketSnapshot::new(strikes, prices, 1.0).map_err(|e| e.to_string())?;
        let rec = breeden_litzenberger(&snap).map_err(|e| e.to_string())?;
        let err = rec
            .density
            .points()
            .iter()
            .zip(rec.density.values())
            .map(|(x, f)| (f - norm_pdf(*x)).abs())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    let order = (errs[0] / errs[1]).log2();
    Ok((
        errs[0] <= 1e-3 && order >= 1.8,
        format!(
            "L-inf {:.3e} at step 0.1 (tol 1e-3), {:.3e} at 0.05, order {order:.3} (need >= 1.8)",
            errs[0], errs[1]
        ),
    ))
}

fn c8_smile() -> Outcome {
    let (gamma, big_t) = (1.0, 1.0);
    let g = grid(-10.0, 10.0, 4001);
    let f0 = bachelier_initial_density(1.0 / (gamma * big_t), big_t, Arc::clone(&g)).map_err(|e| e.to_string())?;
    let mesh = TimeMesh::uniform(0.9, 900).map_err(|e| e.to_string())?;
    let sc = BridgeScenario::simulate(&f0, 1.0 / (gamma * big_t), big_t, &mesh, 8, 0).map_err(|e| e.to_string())?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut bad_flags = 0;
    let mut lognormal_err = 0.0f64;
    for k in (0..10).map(|i| i * 100) {
        let t = mesh.times()[k];
        // W = ξ in the Bachelier case.
        let d = bachelier_density(gamma, sc.xi[k], t, big_t, Arc::clone(&g)).map_err(|e| e.to_string())?;
        let forward = d.moment(1);
        let tau = big_t - t;
        for j in 0..21 {
            let strike = forward + (-2.0 + 0.2 * j as f64) * gamma * tau.sqrt();
            let iv = implied_normal_vol(call_price(&d, strike), forward, strike, tau).map_err(|e| e.to_string())?;
            if iv.flag != VolFlag::Ok {
                bad_flags += 1;
            }
            lo = lo.min(iv.vol);
            hi = hi.max(iv.vol);
        }
        let ln = transform_density(&d, &Bijection::Exp).map_err(|e| e.to_string())?;
        let (m, s) = (gamma * sc.xi[k], gamma * tau.sqrt());
        for (z, gz) in ln.points().iter().zip(ln.values()) {
            let exact = norm_pdf((z.ln() - m) / s) / (s * z);
            lognormal_err = lognormal_err.max((gz - exact).abs());
        }
    }
    let spread = hi - lo;
    Ok((
        spread <= 1e-4 && bad_flags == 0 && lognormal_err <= 1e-6,
        format!(
            "smile max-min {spread:.3e} over 21 strikes x 10 times (tol 1e-4), vol range [{lo:.6}, {hi:.6}]; \
             log-normal sup-norm {lognormal_err:.3e} (tol 1e-6)"
        ),
    ))
}

fn c9_innovation() -> Outcome {
    let v = VolStructure::semilinear(1.0, 1.0).map_err(|e| e.to_string())?;
    let f0 = mixture(grid(-6.0, 6.0, 801));
    let mesh = TimeMesh::uniform(0.9, 90_000).map_err(|e| e.to_string())?;
    let model = FilterModel::new(f0, v, mesh, 1e-3).map_err(|e| e.to_string())?;
    let stats = Execution::Parallel
        .try_map(16, |i| {
            let b = model.simulate(123, i as u64, &DensityKeep::None)?;
            let dw: Vec<f64> = b.innovation.windows(2).map(|w| w[1] - w[0]).collect();
            let qv: f64 = dw.iter().map(|x| x * x).sum();
            let cross: f64 = dw.windows(2).map(|w| w[0] * w[1]).sum();
            let sq: f64 = dw[..dw.len() - 1].iter().map(|x| x * x).sum();
            Ok::<_, cdm::Error>((qv, cross, sq, dw.len() - 1))
        })
        .map_err(|e| e.to_string())?;
    let qv_worst = stats.iter().map(|s| (s.0 / 0.9 - 1.0).abs()).fold(0.0, f64::max);
    let (cross, sq, n) = stats
        .iter()
        .fold((0.0, 0.0, 0usize), |a, s| (a.0 + s.1, a.1 + s.2, a.2 + s.3));
    let rho = cross / sq;
    let bound = 3.0 / (n as f64).sqrt();
    let batch_max = stats
        .iter()
        .map(|s| (s.1 / s.2).abs() * (s.3 as f64).sqrt())
        .fold(0.0, f64::max);
    Ok((
        qv_worst <= 0.05 && rho.abs() < bound,
        format!(
            "max |QV/0.9T - 1| {qv_worst:.3e} (tol 5%); pooled lag-1 rho {rho:+.2e} (bound {bound:.2e}, N={n}); \
             max per-batch |rho| sqrt(n) {batch_max:.2}"
        ),
    ))
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            "1 Bachelier equivalence",
            c1_bachelier_equivalence,
            Some(Duration::from_secs(5)),
        ),
        (
            "2 filter/bridge equivalence",
            c2_filter_bridge_equivalence,
            Some(Duration::from_secs(120)),
        ),
        (
            "3 binary closed form",
            c3_binary_closed_form,
            Some(Duration::from_secs(300)),
        ),
        ("4 martingale suite", c4_martingale, Some(Duration::from_secs(180))),
        ("5 normalization drift", c5_normalization_drift, None),
        ("6 terminal convergence", c6_terminal_convergence, None),
        ("7 Breeden-Litzenberger round trip", c7_breeden_litzenberger, None),
        ("8 smile sanity", c8_smile, None),
        ("9 innovation Brownianity", c9_innovation, None),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.parse::<u32>().is_ok()).collect();
    let mut failures = 0;
    for (name, run, budget) in criteria {
        if !only.is_empty() && !only.iter().any(|n| name.split(' ').next() == Some(n.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        let limit = budget.map(|b| format!(" / limit {}s", b.as_secs())).unwrap_or_default();
        println!(
            "{} [criterion {name}] {detail} ({:.2}s{limit})",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
