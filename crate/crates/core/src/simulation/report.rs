use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{SimulationError, SimulationReport};

pub const LEDGER_DIR: &str = "ledger";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a super::ScenarioConfig,
    agents: &'a [super::AgentInfo],
    #[serde(flatten)]
    summary: &'a super::Summary,
}

/// Write `reputations.csv`, `events.csv`, `detection.csv`,
/// `aggregation.csv`, `summary.json` and the ledger export under `ledger/`.
pub fn write_report(report: &SimulationReport, dir: &Path) -> Result<(), SimulationError> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("reputations.csv"), &report.reputations)?;
    write_csv(&dir.join("events.csv"), &report.events)?;
    write_csv(&dir.join("detection.csv"), &report.detection)?;
    write_csv(&dir.join("aggregation.csv"), &report.aggregation)?;
    let summary = SummaryFile {
        config: &report.config,
        agents: &report.agents,
        summary: &report.summary,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    report.ledger.export_dir(&dir.join(LEDGER_DIR))?;
    Ok(())
}
