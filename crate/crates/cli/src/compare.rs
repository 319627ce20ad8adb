//! Field-by-field comparison of two run manifests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cdm::DensityGrid;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE, SCHEMA_VERSION};

pub const DEFAULT_DENSITY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct Difference {
    pub field: String,
    pub a: f64,
    pub b: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub stochastic: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactNorm {
    pub path: String,
    pub sup_norm: f64,
    pub location: f64,
    pub tolerance: f64,
    pub within: bool,
    pub stochastic: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactChange {
    pub path: String,
    pub stochastic: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantChange {
    pub name: String,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub config_hash_equal: bool,
    /// Dotted paths of config fields that differ.
    pub config_differences: Vec<String>,
    /// Metrics whose difference exceeds tolerance.
    pub differences: Vec<Difference>,
    /// Metrics present in only one manifest.
    pub unmatched_metrics: Vec<String>,
    pub invariant_changes: Vec<InvariantChange>,
    /// Density snapshots present in both runs.
    pub artifact_sup_norms: Vec<ArtifactNorm>,
    /// Other artifacts whose content differs.
    pub changed_artifacts: Vec<ArtifactChange>,
    /// True when some deterministic quantity is out of tolerance.
    pub deterministic_mismatch: bool,
}

impl CompareReport {
    pub fn is_empty(&self) -> bool {
        self.config_differences.is_empty()
            && self.differences.is_empty()
            && self.unmatched_metrics.is_empty()
            && self.invariant_changes.is_empty()
            && self.changed_artifacts.is_empty()
            && self.artifact_sup_norms.iter().all(|a| a.sup_norm == 0.0)
    }
}

/// Accepts a manifest file or the directory holding `manifest.json`.
fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load(p: &Path) -> Result<(RunManifest, PathBuf)> {
    let path = manifest_path(p);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Ingest(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Ingest(format!("{}: {e}", path.display())))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(SCHEMA_VERSION)) {
        return Err(CliError::Ingest(format!(
            "{}: schema version {version:?}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    let m: RunManifest =
        serde_json::from_value(raw).map_err(|e| CliError::Ingest(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, dir))
}

fn json_diff(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(u, v, &path, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

fn read_density(path: &Path) -> Result<DensityGrid> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Ingest(format!("{}: {e}", path.display())))?;
    DensityGrid::read_csv(std::io::BufReader::new(file))
        .map_err(|e| CliError::Ingest(format!("{}: {e}", path.display())))
}

pub fn compare_runs(a: &Path, b: &Path, density_tolerance: f64) -> Result<CompareReport> {
    let (ma, da) = load(a)?;
    let (mb, db) = load(b)?;

    let mut config_differences = Vec::new();
    json_diff(&ma.config, &mb.config, "", &mut config_differences);
    config_differences.retain(|p| p != "output.dir");

    let mut differences = Vec::new();
    let mut unmatched_metrics = Vec::new();
    let names: BTreeSet<&String> = ma.metrics.keys().chain(mb.metrics.keys()).collect();
    for name in names {
        let (Some(x), Some(y)) = (ma.metrics.get(name), mb.metrics.get(name)) else {
            unmatched_metrics.push(name.clone());
            continue;
        };
        let tolerance = match (x.tolerance, y.tolerance) {
            (Some(a), Some(b)) => a.max(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => 0.0,
        };
        let abs_diff = (x.value - y.value).abs();
        let same = x.value == y.value || (x.value.is_nan() && y.value.is_nan());
        if !same && !(abs_diff <= tolerance) {
            differences.push(Difference {
                field: name.clone(),
                a: x.value,
                b: y.value,
                abs_diff,
                tolerance,
                stochastic: x.stochastic || y.stochastic,
            });
        }
    }

    let mut invariant_changes = Vec::new();
    for ra in &ma.invariants {
        let sb = mb
            .invariants
            .iter()
            .find(|r| r.name == ra.name)
            .map(|r| format!("{:?}", r.status));
        let sa = format!("{:?}", ra.status);
        let sb = sb.unwrap_or_else(|| "absent".into());
        if sa != sb {
            invariant_changes.push(InvariantChange {
                name: ra.name.clone(),
                a: sa,
                b: sb,
            });
        }
    }
    for rb in &mb.invariants {
        if !ma.invariants.iter().any(|r| r.name == rb.name) {
            invariant_changes.push(InvariantChange {
                name: rb.name.clone(),
                a: "absent".into(),
                b: format!("{:?}", rb.status),
            });
        }
    }

    let mut artifact_sup_norms = Vec::new();
    let mut changed_artifacts = Vec::new();
    for xa in &ma.artifacts {
        let Some(xb) = mb.artifacts.iter().find(|x| x.path == xa.path) else {
            continue;
        };
        let stochastic = xa.stochastic || xb.stochastic;
        if xa.path.starts_with("density_t") {
            let (fa, fb) = (read_density(&da.join(&xa.path))?, read_density(&db.join(&xb.path))?);
            let (sup_norm, location) = fa
                .sup_distance(&fb)
                .map_err(|e| CliError::Ingest(format!("{}: {e}", xa.path)))?;
            artifact_sup_norms.push(ArtifactNorm {
                path: xa.path.clone(),
                sup_norm,
                location,
                tolerance: density_tolerance,
                within: sup_norm <= density_tolerance,
                stochastic,
            });
        } else if xa.sha256 != xb.sha256 && xa.path != "summary.json" {
            changed_artifacts.push(ArtifactChange {
                path: xa.path.clone(),
                stochastic,
            });
        }
    }

    let deterministic_mismatch = differences.iter().any(|d| !d.stochastic)
        || artifact_sup_norms.iter().any(|a| !a.within && !a.stochastic)
        || changed_artifacts.iter().any(|a| !a.stochastic);
    Ok(CompareReport {
        schema_version: SCHEMA_VERSION,
        config_hash_equal: ma.config_hash == mb.config_hash,
        config_differences,
        differences,
        unmatched_metrics,
        invariant_changes,
        artifact_sup_norms,
        changed_artifacts,
        deterministic_mismatch,
    })
}
