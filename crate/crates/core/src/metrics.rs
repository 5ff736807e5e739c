//! LCC, SRCC and MSE at utterance and system level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelConfig, ModelParams};

fn check_lengths(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < min {
        return Err(Error::TooShort {
            needed: min,
            got: x.len(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson product-moment correlation. Errors on a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y, 2)?;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemStats {
    pub mean_pred: f64,
    pub mean_label: f64,
    pub count: usize,
}

/// Per-system means of predictions and labels.
pub fn system_aggregate<S: AsRef<str>>(
    preds: &[f64],
    labels: &[f64],
    system_ids: &[S],
) -> Result<BTreeMap<String, SystemStats>> {
    check_lengths(preds, labels, 0)?;
    if system_ids.len() != preds.len() {
        return Err(Error::LengthMismatch(system_ids.len(), preds.len()));
    }
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((p, l), s) in preds.iter().zip(labels).zip(system_ids) {
        let s = s.as_ref();
        if s.is_empty() {
            return Err(Error::InvalidConfig("empty system id".into()));
        }
        let e = sums.entry(s).or_insert((0.0, 0.0, 0));
        e.0 += p;
        e.1 += l;
        e.2 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(s, (p, l, n))| {
            (
                s.to_string(),
                SystemStats {
                    mean_pred: p / n as f64,
                    mean_label: l / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub lcc: f64,
    pub srcc: f64,
    pub mse: f64,
}

impl LevelMetrics {
    pub fn compute(preds: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            lcc: pearson(preds, labels)?,
            srcc: spearman(preds, labels)?,
            mse: mse(preds, labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_pairs: usize,
    pub utterance: LevelMetrics,
    pub system: LevelMetrics,
    pub per_system: BTreeMap<String, SystemStats>,
    /// Classification only: metrics of the probability-weighted score.
    /// `None` entries mark levels where a metric was undefined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_score: Option<ExpectedScoreMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedScoreMetrics {
    pub utterance: Option<LevelMetrics>,
    pub system: Option<LevelMetrics>,
}

impl MetricsReport {
    /// Builds both metric levels from aligned prediction/label/system lists.
    pub fn from_predictions<S: AsRef<str>>(
        preds: &[f64],
        labels: &[f64],
        system_ids: &[S],
    ) -> Result<Self> {
        let utterance = LevelMetrics::compute(preds, labels)?;
        let per_system = system_aggregate(preds, labels, system_ids)?;
        let system = system_level(&per_system)?;
        Ok(Self {
            num_pairs: preds.len(),
            utterance,
            system,
            per_system,
            expected_score: None,
        })
    }

    /// Per-system rows as CSV.
    pub fn per_system_csv(&self) -> String {
        let mut out = String::from("system_id,mean_pred,mean_label,count\n");
        for (s, st) in &self.per_system {
            let _ = writeln!(out, "{s},{},{},{}", st.mean_pred, st.mean_label, st.count);
        }
        out
    }
}

fn system_level(per_system: &BTreeMap<String, SystemStats>) -> Result<LevelMetrics> {
    if per_system.len() < 2 {
        return Err(Error::TooFewSystems(per_system.len()));
    }
    let preds: Vec<f64> = per_system.values().map(|s| s.mean_pred).collect();
    let labels: Vec<f64> = per_system.values().map(|s| s.mean_label).collect();
    LevelMetrics::compute(&preds, &labels)
}

/// Model output for one evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub system_id: String,
    pub label: f64,
    pub prediction: f64,
    /// Probability-weighted score (equals `prediction` in regression).
    pub expected: f64,
}

/// Scores every pair of `ds`, in dataset order.
pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
) -> Result<Vec<PairPrediction>> {
    ds.samples()
        .par_iter()
        .map(|s| {
            let out = forward(&s.test, &s.reference, params, cfg)?;
            Ok(PairPrediction {
                pair_id: s.pair.pair_id.clone(),
                system_id: s.pair.system_id.clone(),
                label: s.pair.score,
                prediction: out.score(),
                expected: out.expected_score(),
            })
        })
        .collect()
}

/// Builds a report from stored predictions.
pub fn report(predictions: &[PairPrediction], mode: Mode) -> Result<MetricsReport> {
    let preds: Vec<f64> = predictions.iter().map(|p| p.prediction).collect();
    let labels: Vec<f64> = predictions.iter().map(|p| p.label).collect();
    let systems: Vec<&str> = predictions.iter().map(|p| p.system_id.as_str()).collect();
    let mut report = MetricsReport::from_predictions(&preds, &labels, &systems)?;
    if mode == Mode::Classification {
        let expected: Vec<f64> = predictions.iter().map(|p| p.expected).collect();
        let per_system = system_aggregate(&expected, &labels, &systems)?;
        report.expected_score = Some(ExpectedScoreMetrics {
            utterance: LevelMetrics::compute(&expected, &labels).ok(),
            system: system_level(&per_system).ok(),
        });
    }
    Ok(report)
}

/// Runs the model over `ds` and reports both metric levels. In
/// classification mode the argmax class is the prediction.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, ds: &Dataset) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    report(&predict(params, cfg, ds)?, cfg.mode)
}
