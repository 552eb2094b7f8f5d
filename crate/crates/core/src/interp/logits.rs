use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitStat {
    Mean,
    Median,
}

/// Per-class statistic of the logits: row `c` summarizes every trace
/// labelled `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSummary {
    pub stat: LogitStat,
    /// `None` for classes without traces.
    pub rows: Vec<Option<Array1<f64>>>,
    pub counts: Vec<usize>,
}

impl LogitSummary {
    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    /// Mean over rows `classes` (present ones only) of the per-row average
    /// logit of `outputs`.
    pub fn group_mean(&self, classes: std::ops::RangeInclusive<usize>, outputs: std::ops::RangeInclusive<usize>) -> Option<f64> {
        let vals: Vec<f64> = classes
            .filter_map(|c| self.rows.get(c).and_then(Option::as_ref))
            .map(|r| {
                let o = outputs.clone();
                let len = o.clone().count() as f64;
                o.map(|j| r[j]).sum::<f64>() / len
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn summarize_logits(
    logits: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    stat: LogitStat,
) -> Result<LogitSummary> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::Shape(format!("label {l} outside {n_classes} classes")))?
            .push(i);
    }
    let width = logits.ncols();
    let rows = members
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return None;
            }
            Some(Array1::from_shape_fn(width, |j| {
                let mut col: Vec<f64> = idx.iter().map(|&i| logits[[i, j]]).collect();
                match stat {
                    LogitStat::Mean => crate::metrics::pairwise_sum(&col) / col.len() as f64,
                    LogitStat::Median => median(&mut col),
                }
            }))
        })
        .collect();
    Ok(LogitSummary {
        stat,
        rows,
        counts: members.iter().map(Vec::len).collect(),
    })
}

/// Runs `model` over `traces` and summarizes the logits per label.
pub fn logit_summary(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    labels: &[usize],
    stat: LogitStat,
) -> Result<LogitSummary> {
    let logits = model.logits(traces)?;
    summarize_logits(logits.view(), labels, model.spec.n_classes, stat)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
