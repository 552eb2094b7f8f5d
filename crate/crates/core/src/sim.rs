//! Synthetic side-channel traces of a Boolean-masked first-round S-box.
//!
//! Each trace is i.i.d. Gaussian noise plus, at every configured point of
//! interest, a deterministic function of one share. The per-trace share values
//! are returned separately as [`GroundTruth`] and are never needed by the
//! analysis code.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aes::{hamming_weight, mask_shares, sbox};
use crate::error::{Error, Result};
use crate::rng;

/// Which intermediate value a point of interest leaks.
///
/// With order `d` the S-box output `s` is split into
/// `[m_1, ..., m_{d-1}, s ^ m_1 ^ ... ^ m_{d-1}]`. `MaskR` is `m_1`,
/// `ExtraShare(i)` is `m_{i+1}` for `1 <= i <= d - 2`, and `MaskedSboxOut` is
/// the last share. `MaskedSboxIn` is `(p ^ k)` masked by the same combined mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareRole {
    MaskR,
    MaskedSboxOut,
    MaskedSboxIn,
    ExtraShare(usize),
}

impl ShareRole {
    /// Index into the output sharing, or `None` for the masked S-box input.
    pub fn share_index(self, order: usize) -> Option<usize> {
        match self {
            ShareRole::MaskR => Some(0),
            ShareRole::MaskedSboxOut => Some(order - 1),
            ShareRole::ExtraShare(i) => Some(i),
            ShareRole::MaskedSboxIn => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakFn {
    Hw,
    /// `v / 255 - 0.5`
    IdentityScaled,
    /// Sum of the selected bits.
    BitSubset(Vec<u8>),
}

impl LeakFn {
    pub fn eval(&self, v: u8) -> f64 {
        match self {
            LeakFn::Hw => hamming_weight(v) as f64,
            LeakFn::IdentityScaled => v as f64 / 255.0 - 0.5,
            LeakFn::BitSubset(bits) => bits.iter().map(|&b| ((v >> b) & 1) as f64).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakagePoint {
    pub sample_index: usize,
    pub share_role: ShareRole,
    pub leak_fn: LeakFn,
    pub scale: f64,
}

impl LeakagePoint {
    pub fn new(sample_index: usize, share_role: ShareRole, leak_fn: LeakFn, scale: f64) -> Self {
        Self {
            sample_index,
            share_role,
            leak_fn,
            scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    Fixed(u8),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_traces: usize,
    pub trace_length: usize,
    pub order: usize,
    pub key_mode: KeyMode,
    pub noise_sigma: f64,
    pub points: Vec<LeakagePoint>,
    pub seed: u64,
}

impl SimConfig {
    /// Two-share Hamming-weight leakage over 20 samples. Each share leaks at
    /// six consecutive samples with scales 1.0 down to 0.5; the mask (samples
    /// 2..=7) is handled before the masked S-box output (samples 10..=15).
    pub fn hw_default(n_traces: usize, seed: u64) -> Self {
        const SCALES: [f64; 6] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
        let mut points = Vec::with_capacity(12);
        for (start, role) in [(2, ShareRole::MaskR), (10, ShareRole::MaskedSboxOut)] {
            for (i, &scale) in SCALES.iter().enumerate() {
                points.push(LeakagePoint::new(start + i, role, LeakFn::Hw, scale));
            }
        }
        Self {
            n_traces,
            trace_length: 20,
            order: 2,
            key_mode: KeyMode::Fixed(0x2b),
            noise_sigma: 0.5,
            points,
            seed,
        }
    }

    /// Leakage of the two least significant bits of the mask (samples 2..=4),
    /// the masked S-box input (12..=14) and the masked S-box output
    /// (22..=24), over 30 samples. Per share: the sum of both bits at scale
    /// 1.0, then bit 0 and bit 1 alone at scale 0.8.
    pub fn bitwise_default(n_traces: usize, seed: u64) -> Self {
        let mut points = Vec::with_capacity(9);
        for (start, role) in [
            (2, ShareRole::MaskR),
            (12, ShareRole::MaskedSboxIn),
            (22, ShareRole::MaskedSboxOut),
        ] {
            points.push(LeakagePoint::new(start, role, LeakFn::BitSubset(vec![0, 1]), 1.0));
            points.push(LeakagePoint::new(start + 1, role, LeakFn::BitSubset(vec![0]), 0.8));
            points.push(LeakagePoint::new(start + 2, role, LeakFn::BitSubset(vec![1]), 0.8));
        }
        Self {
            n_traces,
            trace_length: 30,
            order: 2,
            key_mode: KeyMode::Random,
            noise_sigma: 0.5,
            points,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 2 {
            return Err(Error::InvalidOrder(self.order));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Domain(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.n_traces == 0 || self.trace_length == 0 {
            return Err(Error::Config(
                "n_traces and trace_length must be positive".into(),
            ));
        }
        let mut covered = vec![false; self.order];
        for (i, pt) in self.points.iter().enumerate() {
            if pt.sample_index >= self.trace_length {
                return Err(Error::Config(format!(
                    "point {i}: sample index {} outside trace of length {}",
                    pt.sample_index, self.trace_length
                )));
            }
            if !pt.scale.is_finite() {
                return Err(Error::Config(format!("point {i}: non-finite scale")));
            }
            if let LeakFn::BitSubset(bits) = &pt.leak_fn {
                if bits.is_empty() || bits.iter().any(|&b| b > 7) {
                    return Err(Error::Config(format!(
                        "point {i}: bit subset must be a non-empty subset of 0..=7"
                    )));
                }
            }
            if let ShareRole::ExtraShare(e) = pt.share_role {
                if e == 0 || e + 2 > self.order {
                    return Err(Error::Config(format!(
                        "point {i}: extra share {e} does not exist for order {}",
                        self.order
                    )));
                }
            }
            if let Some(s) = pt.share_role.share_index(self.order) {
                covered[s] = true;
            }
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!(
                "share {missing} has no leakage point; the target cannot be recovered"
            )));
        }
        Ok(())
    }

    /// Sample indices at which `role` leaks, strongest first.
    pub fn points_of(&self, role: ShareRole) -> Vec<usize> {
        let mut pts: Vec<&LeakagePoint> =
            self.points.iter().filter(|p| p.share_role == role).collect();
        pts.sort_by(|a, b| b.scale.abs().total_cmp(&a.scale.abs()));
        pts.iter().map(|p| p.sample_index).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    /// `n_traces x trace_length`
    pub samples: Array2<f64>,
    pub plaintext: Vec<u8>,
    pub key: Vec<u8>,
}

impl TraceSet {
    pub fn n_traces(&self) -> usize {
        self.samples.nrows()
    }

    pub fn trace_length(&self) -> usize {
        self.samples.ncols()
    }

    /// `sbox(p ^ k)` per trace.
    pub fn sbox_outputs(&self) -> Vec<u8> {
        self.plaintext
            .iter()
            .zip(&self.key)
            .map(|(&p, &k)| sbox(p ^ k))
            .collect()
    }

    /// Row subset in the given order.
    pub fn select(&self, rows: &[usize]) -> TraceSet {
        TraceSet {
            samples: self.samples.select(ndarray::Axis(0), rows),
            plaintext: rows.iter().map(|&r| self.plaintext[r]).collect(),
            key: rows.iter().map(|&r| self.key[r]).collect(),
        }
    }
}

/// Hidden per-trace share values. Only validation code should read this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    /// `n_traces x order`, output sharing of `sbox(p ^ k)`.
    pub shares: Array2<u8>,
    /// `(p ^ k)` masked with the combined mask.
    pub masked_input: Vec<u8>,
}

impl GroundTruth {
    pub fn order(&self) -> usize {
        self.shares.ncols()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.shares.column(0).to_vec()
    }

    pub fn masked_output(&self) -> Vec<u8> {
        self.shares.column(self.order() - 1).to_vec()
    }

    pub fn role_values(&self, role: ShareRole) -> Vec<u8> {
        match role.share_index(self.order()) {
            Some(s) => self.shares.column(s).to_vec(),
            None => self.masked_input.clone(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> GroundTruth {
        GroundTruth {
            shares: self.shares.select(ndarray::Axis(0), rows),
            masked_input: rows.iter().map(|&r| self.masked_input[r]).collect(),
        }
    }
}

/// Generates traces. Trace `i` only consumes stream `i` of the seeded
/// generator, so the output does not depend on generation order.
pub fn simulate(cfg: &SimConfig) -> Result<(TraceSet, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_traces;
    let len = cfg.trace_length;
    let mut samples = Array2::<f64>::zeros((n, len));
    let mut plaintext = Vec::with_capacity(n);
    let mut key = Vec::with_capacity(n);
    let mut shares = Array2::<u8>::zeros((n, cfg.order));
    let mut masked_input = Vec::with_capacity(n);

    for (i, mut row) in samples.rows_mut().into_iter().enumerate() {
        let mut r = rng::stream(cfg.seed, i as u64);
        let p: u8 = r.random();
        let k = match cfg.key_mode {
            KeyMode::Fixed(k) => k,
            KeyMode::Random => r.random(),
        };
        let sv = mask_shares(sbox(p ^ k), cfg.order, &mut r)?;
        let combined_mask = sv.shares()[..cfg.order - 1]
            .iter()
            .fold(0u8, |acc, s| acc ^ s);
        let min = (p ^ k) ^ combined_mask;

        for x in row.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *x = cfg.noise_sigma * z;
        }
        for pt in &cfg.points {
            let v = match pt.share_role.share_index(cfg.order) {
                Some(s) => sv.shares()[s],
                None => min,
            };
            row[pt.sample_index] += pt.scale * pt.leak_fn.eval(v);
        }

        plaintext.push(p);
        key.push(k);
        for (j, &s) in sv.shares().iter().enumerate() {
            shares[[i, j]] = s;
        }
        masked_input.push(min);
    }

    Ok((
        TraceSet {
            samples,
            plaintext,
            key,
        },
        GroundTruth {
            shares,
            masked_input,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_point(leak_fn: LeakFn, role: ShareRole) -> SimConfig {
        SimConfig {
            n_traces: 300,
            trace_length: 8,
            order: 2,
            key_mode: KeyMode::Fixed(0),
            noise_sigma: 0.0,
            points: vec![
                LeakagePoint::new(3, role, leak_fn, 1.5),
                LeakagePoint::new(
                    5,
                    if role == ShareRole::MaskR {
                        ShareRole::MaskedSboxOut
                    } else {
                        ShareRole::MaskR
                    },
                    LeakFn::Hw,
                    1.0,
                ),
            ],
            seed: 11,
        }
    }

    #[test]
    fn noiseless_hw_point() {
        let cfg = single_point(LeakFn::Hw, ShareRole::MaskR);
        let (ts, gt) = simulate(&cfg).unwrap();
        let mask = gt.mask();
        for i in 0..ts.n_traces() {
            assert_eq!(ts.samples[[i, 3]], 1.5 * hamming_weight(mask[i]) as f64);
            assert_eq!(ts.samples[[i, 0]], 0.0);
        }
        assert_eq!(1.5 * LeakFn::Hw.eval(0xff), 12.0);
    }

    #[test]
    fn bit_subset_sums_selected_bits() {
        assert_eq!(LeakFn::BitSubset(vec![0, 1]).eval(0b11), 2.0);
        assert_eq!(LeakFn::BitSubset(vec![0, 1]).eval(0b1110_0001), 1.0);
        assert_eq!(LeakFn::BitSubset(vec![7]).eval(0x80), 1.0);
        assert_eq!(LeakFn::IdentityScaled.eval(0), -0.5);
        assert_eq!(LeakFn::IdentityScaled.eval(255), 0.5);

        let cfg = single_point(LeakFn::BitSubset(vec![0, 1]), ShareRole::MaskedSboxOut);
        let (ts, gt) = simulate(&cfg).unwrap();
        let out = gt.masked_output();
        for i in 0..ts.n_traces() {
            let expect = 1.5 * ((out[i] & 1) + ((out[i] >> 1) & 1)) as f64;
            assert_eq!(ts.samples[[i, 3]], expect);
        }
    }

    #[test]
    fn shares_recombine_to_sbox_output() {
        let mut cfg = SimConfig::hw_default(500, 3);
        cfg.order = 3;
        cfg.key_mode = KeyMode::Random;
        cfg.points
            .push(LeakagePoint::new(19, ShareRole::ExtraShare(1), LeakFn::Hw, 1.0));
        let (ts, gt) = simulate(&cfg).unwrap();
        let y = ts.sbox_outputs();
        for i in 0..ts.n_traces() {
            let x = gt.shares.row(i).iter().fold(0u8, |a, s| a ^ s);
            assert_eq!(x, y[i]);
            let combined = gt.shares[[i, 0]] ^ gt.shares[[i, 1]];
            assert_eq!(gt.masked_input[i], ts.plaintext[i] ^ ts.key[i] ^ combined);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SimConfig::hw_default(200, 99);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 100;
        assert_ne!(a.0.samples, simulate(&other).unwrap().0.samples);
    }

    #[test]
    fn trace_streams_are_independent_of_count() {
        let a = simulate(&SimConfig::hw_default(50, 5)).unwrap();
        let b = simulate(&SimConfig::hw_default(80, 5)).unwrap();
        assert_eq!(
            a.0.samples,
            b.0.samples.slice(ndarray::s![..50, ..]).to_owned()
        );
    }

    #[test]
    fn config_errors() {
        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.noise_sigma = -0.1;
        assert!(matches!(simulate(&cfg), Err(Error::Domain(_))));

        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.order = 1;
        assert!(matches!(simulate(&cfg), Err(Error::InvalidOrder(1))));

        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.points[0].sample_index = 20;
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));

        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.points.retain(|p| p.share_role != ShareRole::MaskR);
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));

        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.points[0].leak_fn = LeakFn::BitSubset(vec![]);
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));

        let mut cfg = SimConfig::hw_default(10, 0);
        cfg.points
            .push(LeakagePoint::new(1, ShareRole::ExtraShare(1), LeakFn::Hw, 1.0));
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn strongest_points_first() {
        let cfg = SimConfig::hw_default(10, 0);
        assert_eq!(cfg.points_of(ShareRole::MaskR), vec![2, 3, 4, 5, 6, 7]);
        assert_eq!(cfg.points_of(ShareRole::MaskedSboxOut), vec![10, 11, 12, 13, 14, 15]);
        let bits = SimConfig::bitwise_default(10, 0);
        assert_eq!(bits.points_of(ShareRole::MaskedSboxIn), vec![12, 13, 14]);
    }
}
