//! Subgroup confusion statistics and TPR/FPR disparity metrics.
//!
//! The disease class is the positive class. Disparities are always bias group
//! minus non-bias group; relative disparities subtract the matching no-bias
//! counterfactual run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simba_gen::BiasGroup;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        Self::ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// Rates for one subgroup. `None` marks a rate whose denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub counts: Confusion,
    pub accuracy: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

impl From<Confusion> for Rates {
    fn from(c: Confusion) -> Self {
        Self { counts: c, accuracy: c.accuracy(), tpr: c.tpr(), fpr: c.fpr() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub bias: Rates,
    pub non_bias: Rates,
    pub overall: Rates,
}

impl GroupMetrics {
    pub fn group(&self, g: BiasGroup) -> &Rates {
        match g {
            BiasGroup::Bias => &self.bias,
            BiasGroup::NonBias => &self.non_bias,
        }
    }

    /// Any group with no members, or with an undefined rate.
    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, r) in [("bias", &self.bias), ("non-bias", &self.non_bias)] {
            if r.counts.total() == 0 {
                out.push(format!("{name} group is empty"));
            }
            if r.tpr.is_none() {
                out.push(format!("{name} TPR undefined (no positives)"));
            }
            if r.fpr.is_none() {
                out.push(format!("{name} FPR undefined (no negatives)"));
            }
        }
        out
    }
}

/// Thresholds probabilities (ties count as positive) and tallies confusion
/// counts per bias group and pooled.
pub fn group_confusion(
    probabilities: &[f64],
    labels: &[bool],
    groups: &[BiasGroup],
    threshold: f64,
) -> Result<GroupMetrics> {
    if probabilities.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::Config(format!(
            "misaligned inputs: {} probabilities, {} labels, {} groups",
            probabilities.len(),
            labels.len(),
            groups.len()
        )));
    }
    let mut bias = Confusion::default();
    let mut non_bias = Confusion::default();
    let mut overall = Confusion::default();
    for ((&p, &y), &g) in probabilities.iter().zip(labels).zip(groups) {
        let predicted = p >= threshold;
        overall.add(predicted, y);
        match g {
            BiasGroup::Bias => bias.add(predicted, y),
            BiasGroup::NonBias => non_bias.add(predicted, y),
        }
    }
    Ok(GroupMetrics { bias: bias.into(), non_bias: non_bias.into(), overall: overall.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disparity {
    pub d_tpr: f64,
    pub d_fpr: f64,
}

/// Per-seed disparities, optionally relative to a no-bias baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub seed: u64,
    pub delta: Disparity,
    pub relative: Option<Disparity>,
}

/// `TPR_bias - TPR_nonbias` and `FPR_bias - FPR_nonbias`.
pub fn disparities(metrics: &GroupMetrics, seed: u64) -> Result<DisparityReport> {
    let get = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::Undefined(format!("{what} undefined")));
    let d_tpr = get(metrics.bias.tpr, "bias-group TPR")? - get(metrics.non_bias.tpr, "non-bias-group TPR")?;
    let d_fpr = get(metrics.bias.fpr, "bias-group FPR")? - get(metrics.non_bias.fpr, "non-bias-group FPR")?;
    Ok(DisparityReport { seed, delta: Disparity { d_tpr, d_fpr }, relative: None })
}

/// Attaches the baseline-relative disparity for one seed.
pub fn relative_to(report: &DisparityReport, baseline: &DisparityReport) -> Result<DisparityReport> {
    if report.seed != baseline.seed {
        return Err(Error::Pairing(format!("seed {} paired with baseline seed {}", report.seed, baseline.seed)));
    }
    Ok(DisparityReport {
        relative: Some(Disparity {
            d_tpr: report.delta.d_tpr - baseline.delta.d_tpr,
            d_fpr: report.delta.d_fpr - baseline.delta.d_fpr,
        }),
        ..*report
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample (n - 1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDisparity {
    pub per_seed: Vec<DisparityReport>,
    pub d_tpr: MeanStd,
    pub d_fpr: MeanStd,
    pub rel_d_tpr: MeanStd,
    pub rel_d_fpr: MeanStd,
}

/// Pairs reports with baselines by seed, computes relative disparities and
/// aggregates across seeds.
pub fn relative_and_aggregate(reports: &[DisparityReport], baselines: &[DisparityReport]) -> Result<AggregateDisparity> {
    if reports.len() != baselines.len() {
        return Err(Error::Pairing(format!("{} reports vs {} baselines", reports.len(), baselines.len())));
    }
    let mut per_seed = Vec::with_capacity(reports.len());
    for r in reports {
        let b = baselines
            .iter()
            .find(|b| b.seed == r.seed)
            .ok_or_else(|| Error::Pairing(format!("no baseline for seed {}", r.seed)))?;
        per_seed.push(relative_to(r, b)?);
    }
    let col = |f: &dyn Fn(&DisparityReport) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateDisparity {
        d_tpr: col(&|r| r.delta.d_tpr),
        d_fpr: col(&|r| r.delta.d_fpr),
        rel_d_tpr: col(&|r| r.relative.unwrap().d_tpr),
        rel_d_fpr: col(&|r| r.relative.unwrap().d_fpr),
        per_seed,
    })
}
