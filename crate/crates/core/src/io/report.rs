//! Run reports: a JSON summary (any serializable report) plus per-level
//! optimizer traces as CSV.

use crate::error::{Error, Result};
use crate::ipalm::ConvergenceReport;
use std::path::Path;

pub fn save_run_report<T: serde::Serialize>(path: &Path, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Optimizer trace: `iteration, energy, L_p, L_c, L_u, backtracks`.
pub fn save_convergence_csv(path: &Path, report: &ConvergenceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    w.write_record(["iteration", "energy", "L_p", "L_c", "L_u", "backtracks"])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    for (i, rec) in report.iterations.iter().enumerate() {
        w.write_record([
            i.to_string(),
            rec.energy.to_string(),
            rec.lipschitz[0].to_string(),
            rec.lipschitz[1].to_string(),
            rec.lipschitz[2].to_string(),
            rec.backtracks.iter().sum::<usize>().to_string(),
        ])
        .map_err(|e| Error::file_format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
