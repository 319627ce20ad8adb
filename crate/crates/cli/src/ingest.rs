//! Market snapshot ingestion with a static-arbitrage report.

use std::path::Path;

use cdm::grid::RecoveredDensity;
use cdm::{breeden_litzenberger, MarketSnapshot};
use serde::Serialize;

use crate::error::{CliError, Result};

pub struct Ingested {
    pub snapshot: MarketSnapshot,
    pub recovered: RecoveredDensity,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub strike_min: f64,
    pub strike_max: f64,
    pub maturity: f64,
    pub convexity: &'static str,
    pub recovered_mean: f64,
    pub recovered_std: f64,
    pub clipped_mass: f64,
    pub truncated_mass: f64,
    pub flagged: bool,
}

impl Ingested {
    pub fn report(&self) -> IngestReport {
        let s = &self.snapshot;
        let d = &self.recovered.density;
        IngestReport {
            rows: s.strikes.len(),
            strike_min: s.strikes[0],
            strike_max: s.strikes[s.strikes.len() - 1],
            maturity: s.maturity,
            convexity: "pass",
            recovered_mean: d.moment(1),
            recovered_std: d.variance().max(0.0).sqrt(),
            clipped_mass: self.recovered.clipped_mass,
            truncated_mass: self.recovered.truncated_mass,
            flagged: self.recovered.flagged,
        }
    }
}

/// Load `strike,price`, reject schema and static-arbitrage violations, and
/// recover the implied density.
pub fn ingest_market(path: &Path, maturity: f64) -> Result<Ingested> {
    let ingest_err = |e: cdm::Error| CliError::Ingest(format!("{}: {e}", path.display()));
    let snapshot = MarketSnapshot::load_csv(path, maturity).map_err(ingest_err)?;
    let violations = snapshot.violations();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Ingest(format!(
            "{}: {} static-arbitrage violation(s)\n  {}",
            path.display(),
            list.len(),
            list.join("\n  ")
        )));
    }
    let recovered = breeden_litzenberger(&snapshot).map_err(ingest_err)?;
    Ok(Ingested { snapshot, recovered })
}
