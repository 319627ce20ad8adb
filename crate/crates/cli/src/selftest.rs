//! Quick invariant suite run by `cdm selftest`.

use std::sync::Arc;

use cdm::bridge::equivalence_check;
use cdm::filter::{DensityKeep, FilterModel};
use cdm::numeric::{norm_pdf, MeanEstimate};
use cdm::pricing::{
    bachelier_call, binary_call_closed_form, call_price, implied_normal_vol, put_call_parity_check, BinaryModel,
};
use cdm::vol::Table1d;
use cdm::{breeden_litzenberger, make_grid, DensityGrid, Execution, MarketSnapshot, StateGrid, TimeMesh, VolStructure};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = cdm::Result<(bool, String)>;
type Case = (&'static str, fn() -> Outcome);

fn grid(a: f64, b: f64, n: usize) -> cdm::Result<Arc<StateGrid>> {
    Ok(Arc::new(make_grid(a, b, n)?))
}

fn mixture(g: Arc<StateGrid>) -> cdm::Result<DensityGrid> {
    DensityGrid::from_fn(g, |x| {
        0.4 * norm_pdf((x + 1.0) / 0.5) / 0.5 + 0.6 * norm_pdf((x - 1.2) / 0.7) / 0.7
    })?
    .normalize()
}

fn quadrature() -> Outcome {
    let d = DensityGrid::from_fn(grid(-8.0, 8.0, 801)?, |x| (-0.5 * x * x).exp())?.normalize()?;
    let peak = d.interpolate(0.0);
    let err = (peak - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs();
    Ok((
        err < 1e-10 && (d.mass() - 1.0).abs() < 1e-14,
        format!("peak error {err:.2e}"),
    ))
}

fn pricing_identities() -> Outcome {
    let d = mixture(grid(-8.0, 8.0, 1601)?)?;
    let strikes: Vec<f64> = (0..41).map(|i| -3.0 + 0.15 * i as f64).collect();
    let parity = strikes
        .iter()
        .map(|&k| put_call_parity_check(&d, k).abs())
        .fold(0.0, f64::max);
    let c: Vec<f64> = strikes.iter().map(|&k| call_price(&d, k)).collect();
    let convex = c.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -1e-12);
    let decreasing = c.windows(2).all(|w| w[1] <= w[0] + 1e-14);
    Ok((
        parity < 1e-12 && convex && decreasing,
        format!("parity {parity:.2e}, convex {convex}, decreasing {decreasing}"),
    ))
}

fn implied_vol_round_trip() -> Outcome {
    let mut worst = 0.0f64;
    for &(f, k, vol, tau) in &[(0.0, 0.0, 1.0, 1.0), (0.3, -0.5, 0.4, 2.0), (1.0, 1.8, 0.7, 0.25)] {
        let iv = implied_normal_vol(bachelier_call(f, k, vol, tau), f, k, tau)?;
        worst = worst.max((iv.vol / vol - 1.0).abs());
    }
    Ok((worst < 1e-8, format!("max relative error {worst:.2e}")))
}

fn binary_worked_example() -> Outcome {
    let v = VolStructure::state_table(Table1d::new(vec![-1.0, 2.0], vec![-1.0, 2.0])?, 10.0)?;
    let m = BinaryModel::new(0.0, 1.0, 0.5, 0.5, v)?;
    let p = binary_call_closed_form(&m, 0.5, 1.0, None)?.price;
    Ok(((p - 0.09573).abs() < 5e-6, format!("price {p:.6}")))
}

fn breeden_litzenberger_bachelier() -> Outcome {
    let strikes: Vec<f64> = (0..161).map(|i| -8.0 + 0.1 * i as f64).collect();
    let prices = strikes.iter().map(|&k| bachelier_call(0.2, k, 1.0, 1.0)).collect();
    let rec = breeden_litzenberger(&MarketSnapshot::new(strikes, prices, 1.0)?)?;
    let (m, v) = (rec.density.moment(1), rec.density.variance());
    let ok = (m - 0.2).abs() < 1e-3 && (v - 1.0).abs() < 1e-2 && !rec.flagged;
    Ok((ok, format!("mean {m:.5}, variance {v:.5}")))
}

fn filter_bridge_equivalence() -> Outcome {
    let f0 = mixture(grid(-6.0, 6.0, 401)?)?;
    let v = VolStructure::semilinear(1.0, 1.0)?;
    let mesh = TimeMesh::uniform(0.5, 2000)?;
    let model = FilterModel::new(f0.clone(), v, mesh.clone(), 1e-3)?;
    let (x, inc) = model.draw_noise(11, 0)?;
    let r = equivalence_check(&f0, 1.0, 1.0, &inc, x, &mesh, &[500, 1000, 2000])?;
    let sup = r.max_sup_norm();
    Ok((sup < 2e-3, format!("sup-norm {sup:.2e} at dt = 2.5e-4")))
}

fn martingale_and_determinism() -> Outcome {
    let f0 = mixture(grid(-6.0, 6.0, 241)?)?;
    let v = VolStructure::semilinear(1.0, 1.0)?;
    let model = FilterModel::new(f0.clone(), v, TimeMesh::uniform(0.8, 80)?, 1e-3)?;
    let run = |exec: Execution| {
        exec.try_map(400, |i| {
            Ok::<_, cdm::Error>(model.simulate(3, i as u64, &DensityKeep::None)?.asset[80])
        })
    };
    let (seq, par) = (run(Execution::Sequential)?, run(Execution::Parallel)?);
    let est = MeanEstimate::from_samples(&par);
    let z = est.z_score(f0.moment(1));
    Ok((
        seq == par && z.abs() < 4.0,
        format!("z = {z:+.2}, sequential == parallel: {}", seq == par),
    ))
}

pub fn run_all() -> Vec<Check> {
    let cases: [Case; 7] = [
        ("quadrature", quadrature),
        ("pricing identities", pricing_identities),
        ("implied vol round trip", implied_vol_round_trip),
        ("binary worked example", binary_worked_example),
        ("breeden-litzenberger", breeden_litzenberger_bachelier),
        ("filter/bridge equivalence", filter_bridge_equivalence),
        ("martingale and determinism", martingale_and_determinism),
    ];
    cases
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
