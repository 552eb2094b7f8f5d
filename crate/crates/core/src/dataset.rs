//! Labels, bit and 16-class derivations, and the on-disk trace formats.
//!
//! # Trace file (`.traces`)
//!
//! All integers little-endian.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `MSTRACE\0` |
//! | 8 | 4 | format version (`u32`, currently 1) |
//! | 12 | 8 | `n_traces` (`u64`) |
//! | 20 | 8 | `trace_length` (`u64`) |
//! | 28 | 1 | sample dtype, `1` = IEEE-754 binary64 LE |
//! | 29 | 1 | leakage model, `0` = HW, `1` = ID |
//! | 30 | 1 | split, `0` = profiling, `1` = attack |
//! | 31 | 1 | reserved, `0` |
//! | 32 | `8 n L` | samples, row-major |
//! | … | `n` | plaintext bytes |
//! | … | `n` | key bytes |
//! | … | 4 | CRC-32 (IEEE) of every preceding byte |
//!
//! # Share sidecar (`.shares`)
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `MSSHARE\0` |
//! | 8 | 4 | format version (`u32`, currently 1) |
//! | 12 | 8 | `n_traces` (`u64`) |
//! | 20 | 4 | masking order `d` (`u32`) |
//! | 24 | `n d` | output shares, row-major |
//! | … | `n` | masked S-box input |
//! | … | 4 | CRC-32 of every preceding byte |
//!
//! Labels are not stored; they are recomputed from the metadata on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aes::{hamming_weight, sbox, sbox_inv};
use crate::error::{Error, Result};
use crate::sim::{GroundTruth, TraceSet};

pub const TRACE_MAGIC: &[u8; 8] = b"MSTRACE\0";
pub const SHARE_MAGIC: &[u8; 8] = b"MSSHARE\0";
pub const FORMAT_VERSION: u32 = 1;
pub const TRACE_EXTENSION: &str = "traces";
pub const SHARE_EXTENSION: &str = "shares";

const TRACE_HEADER_LEN: usize = 32;
const SHARE_HEADER_LEN: usize = 24;
const DTYPE_F64_LE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageModel {
    /// Hamming weight, 9 classes.
    Hw,
    /// Identity, 256 classes.
    Id,
}

impl LeakageModel {
    pub fn n_classes(self) -> usize {
        match self {
            LeakageModel::Hw => 9,
            LeakageModel::Id => 256,
        }
    }

    fn code(self) -> u8 {
        match self {
            LeakageModel::Hw => 0,
            LeakageModel::Id => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(LeakageModel::Hw),
            1 => Ok(LeakageModel::Id),
            _ => Err(Error::Domain(format!("unknown leakage model code {c}"))),
        }
    }

    /// Label of a value already passed through the S-box.
    pub fn apply(self, y: u8) -> usize {
        match self {
            LeakageModel::Hw => hamming_weight(y) as usize,
            LeakageModel::Id => y as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Profiling,
    Attack,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Profiling => 0,
            Split::Attack => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Profiling),
            1 => Ok(Split::Attack),
            _ => Err(Error::Domain(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    SboxInput,
    SboxOutput,
}

pub fn label(p: u8, k: u8, model: LeakageModel) -> usize {
    model.apply(sbox(p ^ k))
}

/// Bit `bit` of `p ^ k` (input side) or of `sbox(p ^ k)` (output side).
pub fn bit_label(p: u8, k: u8, side: Side, bit: u8) -> Result<u8> {
    if bit > 7 {
        return Err(Error::Domain(format!("bit index {bit} outside 0..=7")));
    }
    let v = match side {
        Side::SboxInput => p ^ k,
        Side::SboxOutput => sbox(p ^ k),
    };
    Ok((v >> bit) & 1)
}

/// Joint class of the two input LSBs and the two output LSBs of an S-box
/// output `y`: `4 * (sbox_inv(y) mod 4) + (y mod 4)`.
pub fn class16(y: u8) -> u8 {
    4 * (sbox_inv(y) & 3) + (y & 3)
}

/// Members of each of the 16 classes, in ascending order.
pub fn class16_members() -> [Vec<u8>; 16] {
    let mut out: [Vec<u8>; 16] = Default::default();
    for y in 0..=255u8 {
        out[class16(y) as usize].push(y);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub traces: TraceSet,
    pub labels: Vec<usize>,
    pub leakage_model: LeakageModel,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(traces: TraceSet, leakage_model: LeakageModel, split: Split) -> Self {
        let labels = traces
            .plaintext
            .iter()
            .zip(&traces.key)
            .map(|(&p, &k)| label(p, k, leakage_model))
            .collect();
        Self {
            traces,
            labels,
            leakage_model,
            split,
        }
    }

    pub fn n_traces(&self) -> usize {
        self.traces.n_traces()
    }

    pub fn n_classes(&self) -> usize {
        self.leakage_model.n_classes()
    }

    pub fn bit_labels(&self, side: Side, bit: u8) -> Result<Vec<usize>> {
        self.traces
            .plaintext
            .iter()
            .zip(&self.traces.key)
            .map(|(&p, &k)| bit_label(p, k, side, bit).map(usize::from))
            .collect()
    }

    pub fn class16_labels(&self) -> Vec<usize> {
        self.traces
            .sbox_outputs()
            .into_iter()
            .map(|y| class16(y) as usize)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_traces();
        let len = self.traces.trace_length();
        let mut buf = Vec::with_capacity(TRACE_HEADER_LEN + 8 * n * len + 2 * n + 4);
        buf.extend_from_slice(TRACE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(len as u64).to_le_bytes());
        buf.push(DTYPE_F64_LE);
        buf.push(self.leakage_model.code());
        buf.push(self.split.code());
        buf.push(0);
        for v in self.traces.samples.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.traces.plaintext);
        buf.extend_from_slice(&self.traces.key);
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, TRACE_MAGIC, "trace", TRACE_HEADER_LEN)?;
        let n = r.u64()? as usize;
        let len = r.u64()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64_LE {
            return Err(Error::Domain(format!("unsupported sample dtype {dtype}")));
        }
        let model_code = r.u8()?;
        let split_code = r.u8()?;
        r.u8()?;
        let payload = n
            .checked_mul(len)
            .and_then(|x| x.checked_mul(8))
            .and_then(|x| x.checked_add(2 * n))
            .ok_or_else(|| Error::Truncated("header sizes overflow".into()))?;
        r.expect_total(payload)?;
        r.verify_crc()?;
        let leakage_model = LeakageModel::from_code(model_code)?;
        let split = Split::from_code(split_code)?;

        let mut samples = Vec::with_capacity(n * len);
        for _ in 0..n * len {
            samples.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let plaintext = r.take(n)?.to_vec();
        let key = r.take(n)?.to_vec();
        let samples = Array2::from_shape_vec((n, len), samples)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(LabeledDataset::new(
            TraceSet {
                samples,
                plaintext,
                key,
            },
            leakage_model,
            split,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `trace,plaintext,key,label` rows.
    pub fn write_metadata_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "trace,plaintext,key,label")?;
        for (i, ((p, k), l)) in self
            .traces
            .plaintext
            .iter()
            .zip(&self.traces.key)
            .zip(&self.labels)
            .enumerate()
        {
            writeln!(w, "{i},{p},{k},{l}")?;
        }
        Ok(())
    }
}

impl GroundTruth {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.shares.nrows();
        let d = self.shares.ncols();
        let mut buf = Vec::with_capacity(SHARE_HEADER_LEN + n * (d + 1) + 4);
        buf.extend_from_slice(SHARE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend(self.shares.iter());
        buf.extend_from_slice(&self.masked_input);
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, SHARE_MAGIC, "share sidecar", SHARE_HEADER_LEN)?;
        let n = r.u64()? as usize;
        let d = r.u32()? as usize;
        let payload = d
            .checked_add(1)
            .and_then(|x| x.checked_mul(n))
            .ok_or_else(|| Error::Truncated("header sizes overflow".into()))?;
        r.expect_total(payload)?;
        r.verify_crc()?;
        let shares = Array2::from_shape_vec((n, d), r.take(n * d)?.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let masked_input = r.take(n)?.to_vec();
        Ok(GroundTruth {
            shares,
            masked_input,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Path of the share sidecar that belongs to a trace file.
pub fn sidecar_path(trace_path: &Path) -> std::path::PathBuf {
    trace_path.with_extension(SHARE_EXTENSION)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Cursor over a framed binary file: magic, `u32` version, header fields,
/// payload, CRC-32 footer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    header_len: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(
        bytes: &'a [u8],
        magic: &[u8; 8],
        what: &'static str,
        header_len: usize,
    ) -> Result<Self> {
        if bytes.len() < header_len + 4 {
            return Err(Error::Truncated(format!(
                "{} bytes is shorter than the {what} header",
                bytes.len()
            )));
        }
        if &bytes[..8] != magic {
            return Err(Error::Magic(what));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(Self {
            bytes,
            pos: 12,
            header_len,
        })
    }

    /// Checks the file length against the payload size declared in the header.
    pub(crate) fn expect_total(&self, payload: usize) -> Result<()> {
        let expected = self
            .header_len
            .checked_add(payload)
            .and_then(|x| x.checked_add(4))
            .ok_or_else(|| Error::Truncated("header sizes overflow".into()))?;
        if self.bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "expected {expected} bytes, found {}",
                self.bytes.len()
            )));
        }
        if self.bytes.len() > expected {
            return Err(Error::Truncated(format!(
                "expected {expected} bytes, found {} (trailing data)",
                self.bytes.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn verify_crc(&self) -> Result<()> {
        let body = &self.bytes[..self.bytes.len() - 4];
        let stored = u32::from_le_bytes(self.bytes[self.bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len() - 4)
            .ok_or_else(|| Error::Truncated(format!("read past end at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::HW_COUNTS;
    use crate::sim::{simulate, SimConfig};

    #[test]
    fn label_examples() {
        for p in [0u8, 0x17, 0xff] {
            assert_eq!(label(p, p, LeakageModel::Id), 0x63);
            assert_eq!(label(p, p, LeakageModel::Hw), 4);
        }
        let k = 0x2b;
        let mut seen = [0u32; 256];
        for p in 0..=255u8 {
            seen[label(p, k, LeakageModel::Id)] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn bit_label_examples() {
        assert_eq!(bit_label(0x01, 0x00, Side::SboxInput, 0).unwrap(), 1);
        assert_eq!(bit_label(0x5a, 0x5a, Side::SboxOutput, 0).unwrap(), 1);
        assert_eq!(bit_label(0x5a, 0x5a, Side::SboxOutput, 7).unwrap(), 0);
        assert!(matches!(
            bit_label(0, 0, Side::SboxInput, 8),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn class16_partition() {
        assert_eq!(class16(0x63), 3);
        let members = class16_members();
        let mut all: Vec<u8> = members.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..=255u8).collect::<Vec<_>>());
        // the two bit pairs are not independent under the S-box, so class
        // sizes vary around 16
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        assert_eq!(sizes, [21, 15, 16, 12, 12, 20, 16, 16, 17, 11, 16, 20, 14, 18, 16, 16]);
        // y = 0x00 has sbox_inv(0) = 0x52, 0x52 mod 4 = 2
        assert_eq!(class16(0x00), 8);
        let zero_class: Vec<u8> = (0..=255u8)
            .filter(|&y| y % 4 == 0 && sbox_inv(y) % 4 == 0)
            .collect();
        assert_eq!(members[0], zero_class);
    }

    #[test]
    fn class16_consistent_with_bit_labels() {
        for z in 0..=255u8 {
            let y = sbox(z);
            let c = class16(y);
            let out_lsb = bit_label(z, 0, Side::SboxOutput, 0).unwrap()
                + 2 * bit_label(z, 0, Side::SboxOutput, 1).unwrap();
            let in_lsb = bit_label(z, 0, Side::SboxInput, 0).unwrap()
                + 2 * bit_label(z, 0, Side::SboxInput, 1).unwrap();
            assert_eq!(c % 4, out_lsb);
            assert_eq!(c / 4, in_lsb);
        }
    }

    #[test]
    fn hw_label_histogram_is_binomial() {
        const CRITICAL_8_DOF: f64 = 26.124_481_558;
        let mut cfg = SimConfig::hw_default(100_000, 31);
        cfg.key_mode = crate::sim::KeyMode::Random;
        cfg.trace_length = 100;
        let (ts, _) = simulate(&cfg).unwrap();
        let ds = LabeledDataset::new(ts, LeakageModel::Hw, Split::Profiling);
        let mut hist = [0f64; 9];
        for &l in &ds.labels {
            hist[l] += 1.0;
        }
        let n = ds.n_traces() as f64;
        let chi2: f64 = (0..9)
            .map(|h| {
                let e = n * HW_COUNTS[h] as f64 / 256.0;
                (hist[h] - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < CRITICAL_8_DOF, "chi2 = {chi2}");
    }

    fn small() -> (LabeledDataset, GroundTruth) {
        let (ts, gt) = simulate(&SimConfig::hw_default(40, 8)).unwrap();
        (LabeledDataset::new(ts, LeakageModel::Hw, Split::Attack), gt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, gt) = small();
        let back = LabeledDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), ds.to_bytes());
        assert_eq!(GroundTruth::from_bytes(&gt.to_bytes()).unwrap(), gt);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.traces");
        ds.save(&path).unwrap();
        assert_eq!(LabeledDataset::load(&path).unwrap(), ds);
        gt.save(&sidecar_path(&path)).unwrap();
        assert_eq!(GroundTruth::load(&sidecar_path(&path)).unwrap(), gt);
    }

    #[test]
    fn load_errors_are_distinct() {
        let (ds, gt) = small();
        assert!(matches!(
            LabeledDataset::from_bytes(&[]),
            Err(Error::Truncated(_))
        ));

        let mut bytes = ds.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));

        let mut bytes = ds.to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes),
            Err(Error::Version { found: 2, .. })
        ));

        let bytes = ds.to_bytes();
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated(_))
        ));

        assert!(matches!(
            LabeledDataset::from_bytes(&gt.to_bytes()),
            Err(Error::Magic(_))
        ));
    }

    #[test]
    fn metadata_csv() {
        let (ds, _) = small();
        let mut out = Vec::new();
        ds.write_metadata_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert!(text.starts_with("trace,plaintext,key,label\n0,"));
    }
}
