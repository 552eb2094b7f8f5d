//! Evaluation metrics: perceived information, per-sample SNR, key rank and
//! accuracy.
//!
//! Reductions over traces use [`pairwise_sum`] so that results do not depend
//! on how the traces are chunked.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::aes::HW_COUNTS;
use crate::dataset::{label, LeakageModel};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms in metrics.
pub const PROB_FLOOR: f64 = 1e-36;

/// Floor applied to the SNR noise denominator.
pub const SNR_NOISE_FLOOR: f64 = 1e-12;

/// Sum by recursive halving. Deterministic for a given input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    probs: Vec<f64>,
}

impl ClassPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain("prior has negative or NaN entries".into()));
        }
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("prior sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// `C(8, h) / 256`, the Hamming weight distribution of a uniform byte.
    pub fn binomial_hw() -> Self {
        Self {
            probs: HW_COUNTS.iter().map(|&c| c as f64 / 256.0).collect(),
        }
    }

    pub fn for_model(model: LeakageModel) -> Self {
        match model {
            LeakageModel::Hw => Self::binomial_hw(),
            LeakageModel::Id => Self::uniform(256),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        let terms: Vec<f64> = self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .collect();
        pairwise_sum(&terms)
    }
}

/// `H(prior) + mean_i log2 max(probs[i][label_i], floor)`, in bits.
pub fn perceived_information(
    probs: ArrayView2<f64>,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if probs.ncols() != prior.len() {
        return Err(Error::Shape(format!(
            "{} classes in predictions, {} in prior",
            probs.ncols(),
            prior.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("no traces".into()));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (row, &l) in probs.rows().into_iter().zip(labels) {
        if l >= prior.len() {
            return Err(Error::Shape(format!("label {l} outside {} classes", prior.len())));
        }
        terms.push(row[l].max(PROB_FLOOR).log2());
    }
    Ok(prior.entropy_bits() + pairwise_sum(&terms) / labels.len() as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.iter().copied()) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the first maximum.
pub fn argmax<I: IntoIterator<Item = f64>>(xs: I) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in xs.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-sample signal-to-noise ratio: variance across classes of the class
/// means divided by the mean across classes of the within-class variance.
///
/// Every class present in `partition` must hold at least two traces.
pub fn snr(traces: ArrayView2<f64>, partition: &[usize]) -> Result<Array1<f64>> {
    if traces.nrows() != partition.len() {
        return Err(Error::Shape(format!(
            "{} traces but {} partition values",
            traces.nrows(),
            partition.len()
        )));
    }
    let mut classes: Vec<usize> = partition.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 distinct classes, got {}",
            classes.len()
        )));
    }
    let index_of = |v: usize| classes.binary_search(&v).unwrap();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, &c) in partition.iter().enumerate() {
        members[index_of(c)].push(i);
    }
    if let Some(pos) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::Partition(format!(
            "class {} has {} trace(s), need at least 2",
            classes[pos],
            members[pos].len()
        )));
    }

    let n_samples = traces.ncols();
    let n_classes = classes.len() as f64;
    let mut out = Array1::<f64>::zeros(n_samples);
    let mut col = Vec::new();
    let mut means = vec![0.0; classes.len()];
    let mut vars = vec![0.0; classes.len()];
    for s in 0..n_samples {
        for (c, rows) in members.iter().enumerate() {
            col.clear();
            col.extend(rows.iter().map(|&r| traces[[r, s]]));
            let m = pairwise_sum(&col) / col.len() as f64;
            for x in col.iter_mut() {
                *x = (*x - m) * (*x - m);
            }
            means[c] = m;
            vars[c] = pairwise_sum(&col) / col.len() as f64;
        }
        let grand = pairwise_sum(&means) / n_classes;
        let dev: Vec<f64> = means.iter().map(|m| (m - grand) * (m - grand)).collect();
        let signal = pairwise_sum(&dev) / n_classes;
        let noise = (pairwise_sum(&vars) / n_classes).max(SNR_NOISE_FLOOR);
        out[s] = signal / noise;
    }
    Ok(out)
}

/// Rank of the true key after accumulating `1..=n` attack traces.
///
/// Each hypothesis `kh` scores `sum_i ln max(probs[i][label(p_i, kh)], floor)`;
/// rank 0 is the best score. Ties are broken by ascending key value.
pub fn key_rank(
    probs: ArrayView2<f64>,
    plaintexts: &[u8],
    true_key: u8,
    model: LeakageModel,
) -> Result<Vec<usize>> {
    if probs.nrows() != plaintexts.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} plaintexts",
            probs.nrows(),
            plaintexts.len()
        )));
    }
    if probs.ncols() != model.n_classes() {
        return Err(Error::Shape(format!(
            "{} classes in predictions, leakage model has {}",
            probs.ncols(),
            model.n_classes()
        )));
    }
    let mut scores = [0.0f64; 256];
    let mut curve = Vec::with_capacity(plaintexts.len());
    for (row, &p) in probs.rows().into_iter().zip(plaintexts) {
        for (kh, s) in scores.iter_mut().enumerate() {
            *s += row[label(p, kh as u8, model)].max(PROB_FLOOR).ln();
        }
        curve.push(rank_of(&scores, true_key));
    }
    Ok(curve)
}

fn rank_of(scores: &[f64; 256], key: u8) -> usize {
    let target = scores[key as usize];
    scores
        .iter()
        .enumerate()
        .filter(|&(kh, &s)| s > target || (s == target && kh < key as usize))
        .count()
}

/// First trace count at which the rank reaches 0 and stays there.
pub fn traces_to_rank_zero(curve: &[usize]) -> Option<usize> {
    let last_nonzero = curve.iter().rposition(|&r| r != 0);
    match last_nonzero {
        None if curve.is_empty() => None,
        None => Some(1),
        Some(i) if i + 1 < curve.len() => Some(i + 2),
        Some(_) => None,
    }
}

/// Row-wise softmax of `logits`, stable under large magnitudes.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
