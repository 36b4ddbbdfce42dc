//! Counterfactual bias-trial orchestration: datasets, training and
//! mitigation per (scenario, method, seed), evaluation, saliency and reports.

pub mod artifact;
pub mod config;
pub mod error;
pub mod report;
pub mod trial;

use log::info;

pub use config::{Cell, Method, TrialConfig};
pub use error::{Error, Result};
pub use report::{emit_report, Format, TrialReport};
pub use trial::Trial;

use crate::error::Context;
use crate::report::ReportRow;
use crate::trial::{EvalRecord, FitRecord, SaliencyRecord};

fn row(fit: &FitRecord, eval: &EvalRecord, sal: &SaliencyRecord) -> ReportRow {
    let c = fit.cell;
    ReportRow {
        scenario: c.scenario,
        method: c.method,
        seed: c.seed,
        init_checksum: fit.init_checksum.clone(),
        metrics: eval.metrics,
        disparity: eval.disparity,
        saliency: sal.scores.clone(),
        unlearn: fit.unlearn.clone(),
        flags: eval.flags.clone(),
    }
}

/// Runs every cell of the configuration (reusing valid artifacts when
/// `resume` is set) and assembles the report.
pub fn run_trial(cfg: TrialConfig, resume: bool) -> Result<TrialReport> {
    let mut trial = Trial::new(cfg, resume)?;
    let cells = trial.cfg.cells();
    let mut rows = Vec::with_capacity(cells.len());
    for (i, &cell) in cells.iter().enumerate() {
        info!("[{}/{}] {cell}", i + 1, cells.len());
        let eval = trial.evaluate(cell)?;
        let sal = trial.saliency(cell)?;
        let (fit, _) = trial.fit(cell)?;
        rows.push(row(&fit.body, &eval.body, &sal.body));
    }
    check_shared_init(&rows)?;
    TrialReport::assemble(trial.cfg.clone(), rows)
}

/// Assembles the report from artifacts already on disk.
pub fn collect_report(cfg: TrialConfig) -> Result<TrialReport> {
    let trial = Trial::new(cfg, true)?;
    let mut rows = Vec::new();
    for cell in trial.cfg.cells() {
        let (fit, eval, sal) = trial::read_cell(&trial, cell).in_cell(cell)?;
        rows.push(row(&fit.body, &eval.body, &sal.body));
    }
    check_shared_init(&rows)?;
    TrialReport::assemble(trial.cfg.clone(), rows)
}

/// Every scenario must start a given seed from the same parameters.
fn check_shared_init(rows: &[ReportRow]) -> Result<()> {
    for r in rows {
        if let Some(other) = rows.iter().find(|o| o.seed == r.seed && o.init_checksum != r.init_checksum) {
            return Err(biastrial_core::Error::Numeric(format!(
                "initial parameters differ between {} and {}",
                r.cell(),
                other.cell()
            ))
            .into());
        }
    }
    Ok(())
}
