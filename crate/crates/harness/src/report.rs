//! Trial report assembly and emission (CSV, JSON, plot tables).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use biastrial_core::fairmetrics::{mean_std, relative_to, DisparityReport, GroupMetrics, MeanStd};
use biastrial_core::phantom::RegionRole;
use biastrial_core::simba_gen::ScenarioKind;
use serde::{Deserialize, Serialize};

use crate::artifact::content_hash;
use crate::config::{Cell, Method, TrialConfig};
use crate::error::{Error, Result};
use crate::trial::{RegionScore, UnlearnSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: ScenarioKind,
    pub method: Method,
    pub seed: u64,
    pub init_checksum: String,
    pub metrics: GroupMetrics,
    /// Carries relative deltas on every non-baseline row when requested.
    pub disparity: Option<DisparityReport>,
    pub saliency: Vec<RegionScore>,
    pub unlearn: Option<UnlearnSummary>,
    pub flags: Vec<String>,
}

impl ReportRow {
    pub fn cell(&self) -> Cell {
        Cell { scenario: self.scenario, method: self.method, seed: self.seed }
    }

    pub fn score(&self, role: RegionRole) -> Option<f64> {
        self.saliency.iter().find(|s| s.role == role).and_then(|s| s.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub config: TrialConfig,
    pub rows: Vec<ReportRow>,
    /// SHA-256 over the rows.
    pub hash: String,
}

impl TrialReport {
    /// Sorts rows into (scenario, method, seed) order, fills relative deltas
    /// against the No-Bias row of the same method and seed, and seals.
    pub fn assemble(config: TrialConfig, mut rows: Vec<ReportRow>) -> Result<Self> {
        rows.sort_by_key(|r| r.cell());
        for w in rows.windows(2) {
            if w[0].cell() == w[1].cell() {
                return Err(Error::config(format!("duplicate report row {}", w[0].cell())));
            }
        }
        if config.relative {
            let baselines: BTreeMap<(Method, u64), Option<DisparityReport>> = rows
                .iter()
                .filter(|r| r.scenario == ScenarioKind::NoBias)
                .map(|r| ((r.method, r.seed), r.disparity))
                .collect();
            for row in rows.iter_mut().filter(|r| r.scenario != ScenarioKind::NoBias) {
                let base = baselines.get(&(row.method, row.seed)).ok_or_else(|| {
                    Error::MissingBaseline(format!("no no-bias run for {} seed {}", row.method, row.seed))
                })?;
                match (&mut row.disparity, base) {
                    (Some(d), Some(b)) => *d = relative_to(d, b)?,
                    _ => row.flags.push("relative disparity undefined".into()),
                }
            }
        }
        let hash = content_hash(&rows);
        Ok(Self { config, rows, hash })
    }

    pub fn row(&self, scenario: ScenarioKind, method: Method, seed: u64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method && r.seed == seed)
    }

    pub fn rows_for(&self, scenario: ScenarioKind, method: Method) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.scenario == scenario && r.method == method)
    }

    /// Mean and sample std across seeds of a per-row quantity, skipping rows
    /// where it is undefined.
    pub fn aggregate(&self, scenario: ScenarioKind, method: Method, f: impl Fn(&ReportRow) -> Option<f64>) -> Option<MeanStd> {
        let v: Vec<f64> = self.rows_for(scenario, method).filter_map(f).collect();
        (!v.is_empty()).then(|| mean_std(&v))
    }

    /// Flat rows of the report CSV, three per cell (bias, non-bias, overall).
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut out = Vec::with_capacity(self.rows.len() * 3);
        for r in &self.rows {
            let d = r.disparity.as_ref();
            for (group, rates) in [("bias", &r.metrics.bias), ("non-bias", &r.metrics.non_bias), ("overall", &r.metrics.overall)] {
                out.push(CsvRow {
                    scenario: r.scenario.name().into(),
                    method: r.method.name().into(),
                    seed: r.seed,
                    group: group.into(),
                    acc: rates.accuracy,
                    tpr: rates.tpr,
                    fpr: rates.fpr,
                    d_tpr: d.map(|d| d.delta.d_tpr),
                    d_fpr: d.map(|d| d.delta.d_fpr),
                    rel_d_tpr: d.and_then(|d| d.relative).map(|x| x.d_tpr),
                    rel_d_fpr: d.and_then(|d| d.relative).map(|x| x.d_fpr),
                });
            }
        }
        out
    }

    pub fn saliency_rows(&self) -> Vec<SaliencyCsvRow> {
        let mut out = Vec::new();
        for r in &self.rows {
            for s in &r.saliency {
                out.push(SaliencyCsvRow {
                    scenario: r.scenario.name().into(),
                    method: r.method.name().into(),
                    seed: r.seed,
                    region: s.region.clone(),
                    score: s.score,
                });
            }
        }
        out
    }

    /// Relative (or raw, without a baseline) disparities by method and
    /// scenario, mean and std across seeds.
    pub fn disparity_plot_rows(&self) -> Vec<DisparityPlotRow> {
        let mut out = Vec::new();
        for &method in &self.config.methods {
            for &scenario in &self.config.scenarios {
                if self.rows_for(scenario, method).next().is_none() {
                    continue;
                }
                let agg = |f: fn(&DisparityReport) -> Option<f64>| {
                    self.aggregate(scenario, method, |r| r.disparity.as_ref().and_then(f))
                };
                let d_tpr = agg(|d| Some(d.delta.d_tpr));
                let d_fpr = agg(|d| Some(d.delta.d_fpr));
                let rel_tpr = agg(|d| d.relative.map(|x| x.d_tpr));
                let rel_fpr = agg(|d| d.relative.map(|x| x.d_fpr));
                out.push(DisparityPlotRow {
                    method: method.name().into(),
                    scenario: scenario.name().into(),
                    n: self.rows_for(scenario, method).count(),
                    d_tpr_mean: d_tpr.map(|m| m.mean),
                    d_tpr_std: d_tpr.map(|m| m.std),
                    d_fpr_mean: d_fpr.map(|m| m.mean),
                    d_fpr_std: d_fpr.map(|m| m.std),
                    rel_d_tpr_mean: rel_tpr.map(|m| m.mean),
                    rel_d_tpr_std: rel_tpr.map(|m| m.std),
                    rel_d_fpr_mean: rel_fpr.map(|m| m.mean),
                    rel_d_fpr_std: rel_fpr.map(|m| m.std),
                });
            }
        }
        out
    }

    /// Saliency scores by region, method and scenario with the No-Bias naive
    /// band of the same region.
    pub fn saliency_plot_rows(&self) -> Vec<SaliencyPlotRow> {
        let mut regions: Vec<(i32, String)> = Vec::new();
        for r in &self.rows {
            for s in &r.saliency {
                if !regions.iter().any(|(l, _)| *l == s.label) {
                    regions.push((s.label, s.region.clone()));
                }
            }
        }
        regions.sort();
        let score_of = |label: i32| move |r: &ReportRow| r.saliency.iter().find(|s| s.label == label).and_then(|s| s.score);
        let mut out = Vec::new();
        for (label, region) in regions {
            let base = self.aggregate(ScenarioKind::NoBias, Method::Naive, score_of(label));
            for &method in &self.config.methods {
                for &scenario in &self.config.scenarios {
                    let Some(m) = self.aggregate(scenario, method, score_of(label)) else { continue };
                    out.push(SaliencyPlotRow {
                        region: region.clone(),
                        method: method.name().into(),
                        scenario: scenario.name().into(),
                        n: m.n,
                        score_mean: m.mean,
                        score_std: m.std,
                        baseline_mean: base.map(|b| b.mean),
                        baseline_std: base.map(|b| b.std),
                    });
                }
            }
        }
        out
    }
}

/// One line of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub group: String,
    pub acc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub d_tpr: Option<f64>,
    pub d_fpr: Option<f64>,
    pub rel_d_tpr: Option<f64>,
    pub rel_d_fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyCsvRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub region: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityPlotRow {
    pub method: String,
    pub scenario: String,
    pub n: usize,
    pub d_tpr_mean: Option<f64>,
    pub d_tpr_std: Option<f64>,
    pub d_fpr_mean: Option<f64>,
    pub d_fpr_std: Option<f64>,
    pub rel_d_tpr_mean: Option<f64>,
    pub rel_d_tpr_std: Option<f64>,
    pub rel_d_fpr_mean: Option<f64>,
    pub rel_d_fpr_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPlotRow {
    pub region: String,
    pub method: String,
    pub scenario: String,
    pub n: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub baseline_mean: Option<f64>,
    pub baseline_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Csv,
    Json,
    PlotData,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "plotdata" => Ok(Format::PlotData),
            _ => Err(Error::config(format!("unknown report format '{s}'"))),
        }
    }
}

pub const REPORT_CSV: &str = "trial_report.csv";
pub const SALIENCY_CSV: &str = "saliency_scores.csv";
pub const REPORT_JSON: &str = "trial_report.json";
pub const DISPARITY_PLOT_CSV: &str = "plot_disparities.csv";
pub const SALIENCY_PLOT_CSV: &str = "plot_saliency.csv";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Writes the requested formats into `dir` and returns the files written.
pub fn emit_report(report: &TrialReport, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::config("cannot emit an empty report"));
    }
    let mut written = Vec::new();
    if formats.is_empty() {
        return Ok(written);
    }
    std::fs::create_dir_all(dir)?;
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    for f in formats {
        match f {
            Format::Csv => {
                write_csv(&dir.join(REPORT_CSV), &report.csv_rows())?;
                write_csv(&dir.join(SALIENCY_CSV), &report.saliency_rows())?;
                written.extend([dir.join(REPORT_CSV), dir.join(SALIENCY_CSV)]);
            }
            Format::Json => {
                std::fs::write(dir.join(REPORT_JSON), serde_json::to_vec_pretty(report)?)?;
                written.push(dir.join(REPORT_JSON));
            }
            Format::PlotData => {
                write_csv(&dir.join(DISPARITY_PLOT_CSV), &report.disparity_plot_rows())?;
                write_csv(&dir.join(SALIENCY_PLOT_CSV), &report.saliency_plot_rows())?;
                written.extend([dir.join(DISPARITY_PLOT_CSV), dir.join(SALIENCY_PLOT_CSV)]);
            }
        }
    }
    Ok(written)
}
