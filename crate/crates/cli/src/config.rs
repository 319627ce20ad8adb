//! Scenario configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cdm::bridge::bachelier_initial_density;
use cdm::vol::{Table1d, VolKind};
use cdm::{make_grid, DensityGrid, Execution, TimeMesh, VolStructure};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable that replaces `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "CDM_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Filter,
    Bridge,
    Bachelier,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub grid: GridSpec,
    pub time: TimeSpec,
    #[serde(default)]
    pub vol: VolSpec,
    /// Defaults to a standard Gaussian, or the Bachelier prior for the bachelier model.
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub smile: Option<SmileSpec>,
    #[serde(default)]
    pub binary: Option<BinarySpec>,
    #[serde(default)]
    pub bridge: BridgeSpec,
    #[serde(default)]
    pub invariants: InvariantSpec,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub xmin: f64,
    pub xmax: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            xmin: -6.0,
            xmax: 6.0,
            points: 601,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub horizon: f64,
    pub steps: usize,
    /// Distance kept from the horizon; defaults to `1e-3 * horizon`.
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolSpec {
    Semilinear {
        sigma: f64,
    },
    Constant {
        value: f64,
    },
    StateTable {
        knots: Vec<f64>,
        values: Vec<f64>,
    },
    Separable {
        time_knots: Vec<f64>,
        time_values: Vec<f64>,
        state_knots: Vec<f64>,
        state_values: Vec<f64>,
    },
    /// CSV `t,x,v` on a full rectangular grid.
    TableCsv {
        path: PathBuf,
    },
}

impl Default for VolSpec {
    fn default() -> Self {
        VolSpec::Semilinear { sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Gaussian {
        mean: f64,
        std: f64,
    },
    Mixture {
        components: Vec<Component>,
    },
    /// `N(0, 1/(T σ²))` for the semilinear `σ`.
    Bachelier,
    /// Breeden-Litzenberger recovery from a `strike,price` file.
    Market {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSpec {
    pub base: u64,
    pub paths: usize,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self { base: 42, paths: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Density snapshots of path 0, snapped to the nearest mesh time.
    pub density_times: Vec<f64>,
    /// Number of per-path CSV files written (paths 0, 1, ...).
    pub path_files: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            density_times: Vec::new(),
            path_files: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmileSpec {
    pub strikes: Vec<f64>,
    /// Strikes are offsets from the forward at each time.
    #[serde(default = "yes")]
    pub relative: bool,
    pub times: Vec<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarySpec {
    pub x1: f64,
    pub x2: f64,
    pub q1: f64,
    pub strikes: Vec<f64>,
    /// Option time `t` (valuation at 0).
    pub t: f64,
    /// Monte Carlo paths for the narrow-Gaussian oracle; 0 disables it.
    #[serde(default)]
    pub oracle_paths: usize,
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeNoise {
    /// Exact Brownian-bridge transitions.
    #[default]
    Exact,
    /// `ξ` built from the filtering model's `(B, X)`, with the filter run alongside.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    #[serde(default)]
    pub noise: BridgeNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantKind {
    Mass,
    Positivity,
    Parity,
    Martingale,
    Equivalence,
    FlatSmile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantSpec {
    pub checks: Vec<InvariantKind>,
    /// Mass and parity tolerance.
    pub tolerance: f64,
    /// Filter vs bridge sup-norm tolerance.
    pub equivalence_tolerance: f64,
    pub flat_smile_tolerance: f64,
    /// `|z|` bound for the martingale check.
    pub z_bound: f64,
}

impl Default for InvariantSpec {
    fn default() -> Self {
        Self {
            checks: vec![
                InvariantKind::Mass,
                InvariantKind::Positivity,
                InvariantKind::Parity,
                InvariantKind::Martingale,
            ],
            tolerance: 1e-9,
            equivalence_tolerance: 1e-2,
            flat_smile_tolerance: 1e-3,
            z_bound: 4.0,
        }
    }
}

/// Read a config file, apply `key=value` overrides and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(&path.display().to_string(), e))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("parse: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let de = toml::Value::Table(table);
    let cfg: ScenarioConfig =
        serde_path_to_error::deserialize(de).map_err(|e| CliError::config(&e.path().to_string(), e.inner()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is read as a TOML value, or as a string if that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(&parts[..=i].join("."), "is not a table"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ScenarioConfig {
    pub fn eps(&self) -> f64 {
        self.time.eps.unwrap_or(1e-3 * self.time.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.time;
        if !(t.horizon > 0.0 && t.horizon.is_finite()) {
            return Err(CliError::config("time.horizon", "must be positive"));
        }
        if t.steps == 0 {
            return Err(CliError::config("time.steps", "must be at least 1"));
        }
        let eps = self.eps();
        if !(eps > 0.0 && eps < t.horizon) {
            return Err(CliError::config(
                "time.eps",
                format!("must lie in (0, {}), got {eps}", t.horizon),
            ));
        }
        if self.seeds.paths == 0 {
            return Err(CliError::config("seeds.paths", "must be at least 1"));
        }
        if !(self.grid.xmin < self.grid.xmax) || self.grid.points < 3 {
            return Err(CliError::config("grid", "need xmin < xmax and at least 3 points"));
        }
        for (i, &s) in self.output.density_times.iter().enumerate() {
            if !(s >= 0.0 && s <= t.horizon - eps) {
                return Err(CliError::config(
                    &format!("output.density_times[{i}]"),
                    "must lie in [0, T - eps]",
                ));
            }
        }
        if let Some(sm) = &self.smile {
            if sm.strikes.is_empty() {
                return Err(CliError::config("smile.strikes", "must not be empty"));
            }
            for (i, &s) in sm.times.iter().enumerate() {
                if !(s >= 0.0 && s <= t.horizon - eps) {
                    return Err(CliError::config(
                        &format!("smile.times[{i}]"),
                        "must lie in [0, T - eps]",
                    ));
                }
            }
        }
        if matches!(self.model, ModelKind::Bridge | ModelKind::Bachelier)
            && !matches!(self.vol, VolSpec::Semilinear { .. })
        {
            return Err(CliError::config(
                "vol.kind",
                "bridge and bachelier models need a semilinear structure",
            ));
        }
        if self.model == ModelKind::Bachelier && !matches!(self.vol, VolSpec::Semilinear { sigma } if sigma > 0.0) {
            return Err(CliError::config("vol.sigma", "bachelier model needs sigma > 0"));
        }
        if self.model == ModelKind::Binary {
            let Some(b) = &self.binary else {
                return Err(CliError::config("binary", "section required for the binary model"));
            };
            if !(b.x1 < b.x2) {
                return Err(CliError::config("binary.x2", "must exceed binary.x1"));
            }
            if !(b.q1 > 0.0 && b.q1 < 1.0) {
                return Err(CliError::config("binary.q1", "must lie in (0, 1)"));
            }
            if !(b.t > 0.0 && b.t <= t.horizon - eps) {
                return Err(CliError::config("binary.t", "must lie in (0, T - eps]"));
            }
            if b.strikes.is_empty() {
                return Err(CliError::config("binary.strikes", "must not be empty"));
            }
            if !(b.width > 0.0) {
                return Err(CliError::config("binary.width", "must be positive"));
            }
        }
        if self.model == ModelKind::Bachelier && !matches!(self.initial, None | Some(InitialSpec::Bachelier)) {
            return Err(CliError::config(
                "initial.kind",
                "bachelier model uses the bachelier prior",
            ));
        }
        if let Some(InitialSpec::Mixture { components }) = &self.initial {
            if components.is_empty() {
                return Err(CliError::config("initial.components", "must not be empty"));
            }
            for (i, c) in components.iter().enumerate() {
                if !(c.weight > 0.0 && c.std > 0.0) {
                    return Err(CliError::config(
                        &format!("initial.components[{i}]"),
                        "need weight > 0 and std > 0",
                    ));
                }
            }
        }
        if let Some(InitialSpec::Gaussian { std, .. }) = self.initial {
            if !(std > 0.0) {
                return Err(CliError::config("initial.std", "must be positive"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Numerical objects built from a validated config.
pub struct Built {
    pub grid: Arc<cdm::StateGrid>,
    pub vol: VolStructure,
    pub mesh: TimeMesh,
    pub f0: DensityGrid,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn build(cfg: &ScenarioConfig, base: &Path) -> Result<Built> {
    let horizon = cfg.time.horizon;
    let grid =
        Arc::new(make_grid(cfg.grid.xmin, cfg.grid.xmax, cfg.grid.points).map_err(|e| CliError::config("grid", e))?);
    let vol = match &cfg.vol {
        VolSpec::Semilinear { sigma } => VolStructure::semilinear(*sigma, horizon),
        VolSpec::Constant { value } => VolStructure::constant(*value, horizon),
        VolSpec::StateTable { knots, values } => {
            Table1d::new(knots.clone(), values.clone()).and_then(|t| VolStructure::state_table(t, horizon))
        }
        VolSpec::Separable {
            time_knots,
            time_values,
            state_knots,
            state_values,
        } => Table1d::new(time_knots.clone(), time_values.clone()).and_then(|tt| {
            Table1d::new(state_knots.clone(), state_values.clone())
                .and_then(|st| VolStructure::separable(tt, st, horizon))
        }),
        VolSpec::TableCsv { path } => {
            let p = resolve(base, path);
            if !p.exists() {
                return Err(CliError::config("vol.path", format!("{} does not exist", p.display())));
            }
            VolStructure::load_table_csv(&p, horizon)
        }
    }
    .map_err(|e| CliError::config("vol", e))?;
    let end = horizon - cfg.eps();
    let mesh = TimeMesh::uniform(end, cfg.time.steps).map_err(|e| CliError::config("time", e))?;
    let initial = cfg.initial.clone().unwrap_or(match cfg.model {
        ModelKind::Bachelier => InitialSpec::Bachelier,
        _ => InitialSpec::Gaussian { mean: 0.0, std: 1.0 },
    });
    let f0 = match &initial {
        InitialSpec::Gaussian { mean, std } => DensityGrid::gaussian(Arc::clone(&grid), *mean, *std),
        InitialSpec::Mixture { components } => DensityGrid::from_fn(Arc::clone(&grid), |x| {
            components
                .iter()
                .map(|c| c.weight * (-0.5 * ((x - c.mean) / c.std).powi(2)).exp() / c.std)
                .sum()
        })
        .and_then(|d| d.normalize()),
        InitialSpec::Bachelier => match vol.kind() {
            VolKind::Semilinear { sigma } => bachelier_initial_density(*sigma, horizon, Arc::clone(&grid)),
            _ => {
                return Err(CliError::config(
                    "initial.kind",
                    "bachelier initial density needs semilinear vol",
                ))
            }
        },
        InitialSpec::Market { path } => {
            let p = resolve(base, path);
            if !p.exists() {
                return Err(CliError::config(
                    "initial.path",
                    format!("{} does not exist", p.display()),
                ));
            }
            let report = crate::ingest::ingest_market(&p, horizon)?;
            DensityGrid::from_fn(Arc::clone(&grid), |x| report.recovered.density.interpolate(x))
                .and_then(|d| d.normalize())
        }
    }
    .map_err(|e| CliError::config("initial", e))?;
    Ok(Built { grid, vol, mesh, f0 })
}

/// Resolve the output directory: env override, else `output.dir` relative to `base`.
pub fn output_dir(cfg: &ScenarioConfig, base: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => resolve(base, &cfg.output.dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model = \"filter\"\n[time]\nhorizon = 1.0\nsteps = 10\n";

    #[test]
    fn defaults_fill_in() {
        let c = parse_config(MINIMAL, &[]).unwrap();
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(c.eps(), 1e-3);
        assert_eq!(c.seeds.paths, 1);
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = parse_config(
            MINIMAL,
            &[
                "seeds.paths=7".into(),
                "vol.kind=constant".into(),
                "vol.value=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seeds.paths, 7);
        assert_eq!(c.vol, VolSpec::Constant { value: 0.5 });
        let c = parse_config(MINIMAL, &["output.dir=results/a".into()]).unwrap();
        assert_eq!(c.output.dir, PathBuf::from("results/a"));
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse_config(MINIMAL, &["time.steps=-3".into()]).unwrap_err();
        assert!(e.to_string().contains("time.steps"), "{e}");
        let e = parse_config(MINIMAL, &["time.eps=2.0".into()]).unwrap_err();
        assert!(e.to_string().contains("time.eps"), "{e}");
        let e = parse_config(MINIMAL, &["grid.typo=1".into()]).unwrap_err();
        assert!(e.to_string().contains("grid"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = parse_config(MINIMAL, &[]).unwrap();
        let b = parse_config(MINIMAL, &["output.dir=elsewhere".into()]).unwrap();
        let c = parse_config(MINIMAL, &["seeds.base=1".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
