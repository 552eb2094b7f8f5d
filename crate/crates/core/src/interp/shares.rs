use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::patch::PatchSpec;
use crate::aes::HW_COUNTS;
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    /// Hamming weight, 0..=8.
    Hw,
    /// Cluster id of a 2-bit share value, 0..=3.
    Bits2,
}

/// Per-trace estimate of one share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareEstimate {
    pub kind: EstimateKind,
    pub values: Vec<u8>,
    /// The per-trace score the values were derived from.
    pub scores: Vec<f64>,
    pub source: PatchSpec,
}

impl ShareEstimate {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let bins = match self.kind {
            EstimateKind::Hw => 9,
            EstimateKind::Bits2 => 4,
        };
        let mut h = vec![0; bins];
        for &v in &self.values {
            h[v as usize] += 1;
        }
        h
    }

    /// Replaces every HW value `h` with `8 - h`.
    pub fn flipped(&self) -> Self {
        assert_eq!(self.kind, EstimateKind::Hw, "only HW estimates can be flipped");
        Self {
            values: self.values.iter().map(|&h| 8 - h).collect(),
            scores: self.scores.iter().map(|s| -s).collect(),
            ..self.clone()
        }
    }
}

/// Which extreme the complementary share was pinned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pin {
    /// Pinned share has HW 0: the output HW follows the free share.
    Low,
    /// Pinned share has HW 8: the output HW is 8 minus the free share's.
    High,
}

/// Number of traces per HW bin for `n` traces: binomial fractions
/// `C(8, h) / 256` rounded with the largest-remainder method, ties to the
/// lower HW.
pub fn hw_bin_counts(n: usize) -> [usize; 9] {
    let mut counts = [0usize; 9];
    let mut rem = [0usize; 9];
    for h in 0..9 {
        let exact = n * HW_COUNTS[h] as usize;
        counts[h] = exact / 256;
        rem[h] = exact % 256;
    }
    let short = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &h in order.iter().take(short) {
        counts[h] += 1;
    }
    counts
}

/// `sum(logits[5..=8]) - sum(logits[0..=3])` per row.
pub fn high_low_score(logits: ArrayView2<f64>) -> Result<Vec<f64>> {
    if logits.ncols() != 9 {
        return Err(Error::Shape(format!(
            "HW logits need 9 columns, got {}",
            logits.ncols()
        )));
    }
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| (5..=8).map(|j| r[j]).sum::<f64>() - (0..=3).map(|j| r[j]).sum::<f64>())
        .collect())
}

/// Assigns HW bins by rank of `scores`: the lowest `C(8,0)/256` fraction
/// gets HW 0, the next `C(8,1)/256` HW 1, and so on. Ties keep trace order.
/// With [`Pin::High`] the result is reported as `8 - bin`.
pub fn recover_share_hw_from_scores(
    scores: &[f64],
    pin: Pin,
    source: PatchSpec,
) -> Result<ShareEstimate> {
    let n = scores.len();
    if n < 256 {
        return Err(Error::InsufficientTraces { needed: 256, got: n });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("score of trace {i} is {}", scores[i])));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut values = vec![0u8; n];
    let mut pos = 0;
    for (h, &c) in hw_bin_counts(n).iter().enumerate() {
        for &i in &order[pos..pos + c] {
            values[i] = match pin {
                Pin::Low => h as u8,
                Pin::High => 8 - h as u8,
            };
        }
        pos += c;
    }
    Ok(ShareEstimate {
        kind: EstimateKind::Hw,
        values,
        scores: scores.to_vec(),
        source,
    })
}

/// HW estimate of the free share from logits computed with the other share
/// pinned.
pub fn recover_share_hw(
    patched_logits: ArrayView2<f64>,
    pin: Pin,
    source: PatchSpec,
) -> Result<ShareEstimate> {
    recover_share_hw_from_scores(&high_low_score(patched_logits)?, pin, source)
}

/// SNR of the traces partitioned by a share estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareValidation {
    pub snr: Array1<f64>,
    pub argmax: usize,
    pub peak: f64,
}

pub fn validate_shares(estimate: &[u8], traces: ArrayView2<f64>) -> Result<ShareValidation> {
    let partition: Vec<usize> = estimate.iter().map(|&v| v as usize).collect();
    let snr = metrics::snr(traces, &partition)?;
    let (argmax, peak) = snr
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    Ok(ShareValidation { snr, argmax, peak })
}

/// Fixes the orientation of an HW estimate without ground truth.
///
/// Assumes leakage grows with the Hamming weight: at the sample where the
/// estimate has its highest SNR, the mean trace value should increase with
/// the estimate. If it decreases instead the estimate is flipped to `8 - h`.
pub fn orient_hw_estimate(estimate: ShareEstimate, traces: ArrayView2<f64>) -> Result<(ShareEstimate, bool)> {
    let v = validate_shares(&estimate.values, traces)?;
    let col = traces.column(v.argmax);
    let n = estimate.len() as f64;
    let mean_h = estimate.values.iter().map(|&h| h as f64).sum::<f64>() / n;
    let mean_t = col.sum() / n;
    let cov: f64 = estimate
        .values
        .iter()
        .zip(col.iter())
        .map(|(&h, &t)| (h as f64 - mean_h) * (t - mean_t))
        .sum();
    if cov < 0.0 {
        Ok((estimate.flipped(), true))
    } else {
        Ok((estimate, false))
    }
}

/// Fraction of positions where `estimate` equals `truth`.
pub fn agreement(estimate: &[u8], truth: &[u8]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::Shape(format!(
            "{} estimates for {} true values",
            estimate.len(),
            truth.len()
        )));
    }
    let hits = estimate.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / estimate.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::hamming_weight;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn bin_counts_for_exact_multiples() {
        assert_eq!(hw_bin_counts(256), HW_COUNTS.map(|c| c as usize));
        assert_eq!(hw_bin_counts(512), HW_COUNTS.map(|c| 2 * c as usize));
        let c = hw_bin_counts(300);
        assert_eq!(c.iter().sum::<usize>(), 300);
        // 300/256 * (1, 8, 28, 56, 70, ...) = 1.17, 9.38, 32.8, 65.6, 82.0
        assert_eq!(c, [1, 9, 33, 66, 82, 66, 33, 9, 1]);
    }

    #[test]
    fn oracle_scores_recover_every_byte() {
        let truth: Vec<u8> = (0..=255u8).map(hamming_weight).collect();
        let scores: Vec<f64> = truth.iter().map(|&h| h as f64).collect();
        let est = recover_share_hw_from_scores(&scores, Pin::Low, PatchSpec::identity(0)).unwrap();
        assert_eq!(est.values, truth);
        let hi = recover_share_hw_from_scores(&scores, Pin::High, PatchSpec::identity(0)).unwrap();
        assert!(hi.values.iter().zip(&truth).all(|(&a, &b)| a == 8 - b));
    }

    #[test]
    fn too_few_traces() {
        assert!(matches!(
            recover_share_hw_from_scores(&[0.0; 255], Pin::Low, PatchSpec::identity(0)),
            Err(Error::InsufficientTraces { needed: 256, got: 255 })
        ));
    }

    #[test]
    fn score_is_high_minus_low() {
        let logits = Array2::from_shape_fn((1, 9), |(_, j)| j as f64);
        assert_eq!(high_low_score(logits.view()).unwrap(), vec![26.0 - 6.0]);
    }

    fn leaky_traces(n: usize, flip: bool) -> (Array2<f64>, Vec<u8>) {
        let mut r = rng::seeded(2);
        let hw: Vec<u8> = (0..n).map(|_| hamming_weight(r.random())).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let signal = if j == 4 { hw[i] as f64 } else { 0.0 };
            signal + 0.5 * r.sample::<f64, _>(StandardNormal)
        });
        let est = if flip { hw.iter().map(|&h| 8 - h).collect() } else { hw.clone() };
        (x, est)
    }

    #[test]
    fn validation_finds_the_leaking_sample() {
        let (x, hw) = leaky_traces(5000, false);
        let v = validate_shares(&hw, x.view()).unwrap();
        assert_eq!(v.argmax, 4);
        assert_eq!(v.snr.len(), 6);
    }

    #[test]
    fn random_estimates_have_low_snr() {
        let mut r = rng::seeded(3);
        let x = Array2::from_shape_fn((50_000, 8), |_| r.sample::<f64, _>(StandardNormal));
        let est: Vec<u8> = (0..50_000).map(|_| hamming_weight(r.random())).collect();
        assert!(validate_shares(&est, x.view()).unwrap().peak < 0.05);
    }

    #[test]
    fn orientation_flips_reversed_estimates() {
        let (x, reversed) = leaky_traces(3000, true);
        let est = ShareEstimate {
            kind: EstimateKind::Hw,
            values: reversed.clone(),
            scores: vec![0.0; 3000],
            source: PatchSpec::identity(0),
        };
        let (fixed, flipped) = orient_hw_estimate(est, x.view()).unwrap();
        assert!(flipped);
        assert!(fixed.values.iter().zip(&reversed).all(|(&a, &b)| a == 8 - b));
        let (same, flipped) = orient_hw_estimate(fixed.clone(), x.view()).unwrap();
        assert!(!flipped);
        assert_eq!(same, fixed);
    }

    #[test]
    fn agreement_counts_matches() {
        assert_eq!(agreement(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 0.5);
        assert!(agreement(&[1], &[1, 2]).is_err());
    }
}
