//! Masked MAE / MAPE / RMSE with optional low-flow filtering.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Default low-flow threshold for grid-style evaluation.
pub const DEFAULT_FLOW_FILTER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every retained truth value is zero.
    pub mape_percent: Option<f64>,
    pub count: usize,
    pub mape_count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    mape_count: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if truth != 0.0 {
            self.ape += (e / truth).abs();
            self.mape_count += 1;
        }
    }

    fn finish(&self) -> Option<MetricSet> {
        (self.count > 0).then(|| MetricSet {
            mae: self.abs / self.count as f64,
            rmse: (self.sq / self.count as f64).sqrt(),
            mape_percent: (self.mape_count > 0).then(|| self.ape / self.mape_count as f64 * 100.0),
            count: self.count,
            mape_count: self.mape_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: usize,
    pub overall: Option<MetricSet>,
    /// One entry per predicted step.
    pub horizons: Vec<Option<MetricSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricSet,
    pub channels: Vec<ChannelReport>,
    pub total_points: usize,
    pub filter_threshold: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `channel,horizon,mae,mape_percent,rmse,count` rows; horizon is 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,horizon,mae,mape_percent,rmse,count\n");
        for ch in &self.channels {
            for (h, m) in ch.horizons.iter().enumerate() {
                match m {
                    Some(m) => out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        ch.channel,
                        h + 1,
                        m.mae,
                        m.mape_percent.map(|v| v.to_string()).unwrap_or_default(),
                        m.rmse,
                        m.count
                    )),
                    None => out.push_str(&format!("{},{},,,,0\n", ch.channel, h + 1)),
                }
            }
        }
        out
    }
}

/// Scores `pred` against `truth`, both `(T', N, C)` or `(B, T', N, C)`.
///
/// Missing truth values are skipped. With `filter_threshold`, truth values
/// below it are skipped for all metrics (per channel). Retained zero truths
/// count for MAE/RMSE but not MAPE.
pub fn evaluate(
    pred: &Tensor,
    truth: &Tensor,
    missing: &[bool],
    filter_threshold: Option<f64>,
) -> Result<EvalReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "evaluate",
            format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    if missing.len() != truth.len() {
        return Err(Error::shape("evaluate", "missing mask length differs".to_string()));
    }
    let (horizon, nodes, channels) = match pred.shape() {
        &[h, n, c] | &[_, h, n, c] => (h, n, c),
        s => return Err(Error::shape("evaluate", format!("expected rank 3 or 4, got {s:?}"))),
    };
    let per_horizon = nodes * channels;
    let mut cells = vec![Accumulator::default(); channels * horizon];
    let mut chans = vec![Accumulator::default(); channels];
    let mut all = Accumulator::default();
    for (i, ((&p, &t), &m)) in pred.data().iter().zip(truth.data()).zip(missing).enumerate() {
        if m || filter_threshold.is_some_and(|th| t < th) {
            continue;
        }
        let c = i % channels;
        let h = (i / per_horizon) % horizon;
        cells[c * horizon + h].push(p, t);
        chans[c].push(p, t);
        all.push(p, t);
    }
    let overall = all
        .finish()
        .ok_or_else(|| Error::Data("no points left to evaluate after masking".into()))?;
    let channels = (0..channels)
        .map(|c| ChannelReport {
            channel: c,
            overall: chans[c].finish(),
            horizons: (0..horizon).map(|h| cells[c * horizon + h].finish()).collect(),
        })
        .collect();
    Ok(EvalReport {
        overall,
        channels,
        total_points: truth.len(),
        filter_threshold,
    })
}
