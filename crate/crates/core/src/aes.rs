//! First-round AES byte primitives and Boolean share arithmetic.
//!
//! Only the S-box of the first round is modelled. Everything here is a pure
//! function over constant tables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward AES S-box.
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const fn invert_table(table: &[u8; 256]) -> [u8; 256] {
    let mut inv = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        inv[table[i] as usize] = i as u8;
        i += 1;
    }
    inv
}

/// Inverse AES S-box, derived from [`SBOX`] at compile time.
pub const INV_SBOX: [u8; 256] = invert_table(&SBOX);

#[inline]
pub fn sbox(x: u8) -> u8 {
    SBOX[x as usize]
}

#[inline]
pub fn sbox_inv(y: u8) -> u8 {
    INV_SBOX[y as usize]
}

#[inline]
pub fn hamming_weight(x: u8) -> u8 {
    x.count_ones() as u8
}

/// Binomial coefficient C(8, k), i.e. the number of bytes with Hamming weight `k`.
pub const HW_COUNTS: [u32; 9] = [1, 8, 28, 56, 70, 56, 28, 8, 1];

/// A byte split into `d` Boolean shares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareVector {
    shares: Vec<u8>,
    secret: u8,
}

impl ShareVector {
    /// Builds a share vector from explicit shares; the secret is their XOR.
    pub fn from_shares(shares: Vec<u8>) -> Result<Self> {
        if shares.len() < 2 {
            return Err(Error::InvalidOrder(shares.len()));
        }
        let secret = shares.iter().fold(0, |acc, s| acc ^ s);
        Ok(Self { shares, secret })
    }

    pub fn shares(&self) -> &[u8] {
        &self.shares
    }

    pub fn secret(&self) -> u8 {
        self.secret
    }

    pub fn order(&self) -> usize {
        self.shares.len()
    }

    pub fn recombine(&self) -> u8 {
        self.shares.iter().fold(0, |acc, s| acc ^ s)
    }
}

/// Splits `secret` into `d` shares. The first `d - 1` shares are uniform
/// draws; the last one closes the XOR.
pub fn mask_shares<R: Rng + ?Sized>(secret: u8, d: usize, rng: &mut R) -> Result<ShareVector> {
    if d < 2 {
        return Err(Error::InvalidOrder(d));
    }
    let mut shares = Vec::with_capacity(d);
    let mut acc = secret;
    for _ in 0..d - 1 {
        let s: u8 = rng.random();
        acc ^= s;
        shares.push(s);
    }
    shares.push(acc);
    Ok(ShareVector { shares, secret })
}

/// Joint Hamming-weight histogram of two shares `(s1, s2)` whose XOR has a
/// fixed Hamming weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwCooccurrence {
    pub target_hw: u8,
    /// `counts[i][j]` = number of pairs with `HW(s1) = i`, `HW(s2) = j`.
    pub counts: [[u32; 9]; 9],
}

impl HwCooccurrence {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| c as u64).sum()
    }

    pub fn get(&self, hw_s1: usize, hw_s2: usize) -> u32 {
        self.counts[hw_s1][hw_s2]
    }
}

/// Exhaustively enumerates all 65536 share pairs and counts those whose XOR
/// has Hamming weight `target_hw`.
pub fn hw_cooccurrence(target_hw: u8) -> Result<HwCooccurrence> {
    if target_hw > 8 {
        return Err(Error::Domain(format!(
            "target Hamming weight {target_hw} outside 0..=8"
        )));
    }
    let mut counts = [[0u32; 9]; 9];
    for s1 in 0..=255u8 {
        for s2 in 0..=255u8 {
            if hamming_weight(s1 ^ s2) == target_hw {
                counts[hamming_weight(s1) as usize][hamming_weight(s2) as usize] += 1;
            }
        }
    }
    Ok(HwCooccurrence { target_hw, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent S-box construction: multiplicative inverse in GF(2^8)
    // followed by the AES affine map.
    fn gf_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        while b != 0 {
            if b & 1 != 0 {
                p ^= a;
            }
            let hi = a & 0x80;
            a <<= 1;
            if hi != 0 {
                a ^= 0x1b;
            }
            b >>= 1;
        }
        p
    }

    fn gf_inv(a: u8) -> u8 {
        if a == 0 {
            return 0;
        }
        (1..=255u8).find(|&b| gf_mul(a, b) == 1).unwrap()
    }

    fn affine(b: u8) -> u8 {
        b ^ b.rotate_left(1) ^ b.rotate_left(2) ^ b.rotate_left(3) ^ b.rotate_left(4) ^ 0x63
    }

    #[test]
    fn sbox_table_matches_field_construction() {
        for x in 0..=255u8 {
            assert_eq!(sbox(x), affine(gf_inv(x)), "x = {x:#04x}");
        }
    }

    #[test]
    fn sbox_examples() {
        assert_eq!(sbox(0x00), 0x63);
        assert_eq!(sbox_inv(sbox(0x42)), 0x42);
        let mut seen = [false; 256];
        for x in 0..=255u8 {
            seen[sbox(x) as usize] = true;
            assert_eq!(sbox_inv(sbox(x)), x);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn hamming_weight_examples() {
        assert_eq!(hamming_weight(0x00), 0);
        assert_eq!(hamming_weight(0xff), 8);
        assert_eq!(hamming_weight(0xa5), 4);
        let mut hist = [0u32; 9];
        for x in 0..=255u8 {
            hist[hamming_weight(x) as usize] += 1;
        }
        assert_eq!(hist, HW_COUNTS);
    }

    #[test]
    fn mask_shares_recombine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zero = mask_shares(0x00, 2, &mut rng).unwrap();
        assert_eq!(zero.shares()[0], zero.shares()[1]);
        let v = mask_shares(0x5a, 2, &mut rng).unwrap();
        assert_eq!(v.shares()[0] ^ v.shares()[1], 0x5a);
        let v3 = mask_shares(0x13, 3, &mut rng).unwrap();
        assert_eq!(v3.order(), 3);
        assert_eq!(v3.recombine(), 0x13);
        assert_eq!(v3.secret(), 0x13);
    }

    #[test]
    fn mask_shares_rejects_low_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mask_shares(1, 1, &mut rng),
            Err(Error::InvalidOrder(1))
        ));
        assert!(matches!(
            mask_shares(1, 0, &mut rng),
            Err(Error::InvalidOrder(0))
        ));
    }

    #[test]
    fn first_share_is_uniform() {
        // chi-square with 255 dof, critical value at alpha = 0.001
        const CRITICAL: f64 = 330.519_743_634;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 200_000;
        let mut hist = [0u64; 256];
        for i in 0..n {
            let v = mask_shares((i % 256) as u8, 2, &mut rng).unwrap();
            hist[v.shares()[0] as usize] += 1;
        }
        let expected = n as f64 / 256.0;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < CRITICAL, "chi2 = {chi2}");
    }

    #[test]
    fn cooccurrence_table_values() {
        let m0 = hw_cooccurrence(0).unwrap();
        let diag: Vec<u32> = (0..9).map(|k| m0.get(k, k)).collect();
        assert_eq!(diag, HW_COUNTS.to_vec());
        assert_eq!(hw_cooccurrence(4).unwrap().get(4, 4), 2520);
        assert_eq!(hw_cooccurrence(7).unwrap().get(4, 3), 280);
        assert_eq!(hw_cooccurrence(1).unwrap().get(2, 3), 168);
        assert_eq!(hw_cooccurrence(3).unwrap().get(3, 4), 1680);
        let total: u64 = (0..=8).map(|t| hw_cooccurrence(t).unwrap().total()).sum();
        assert_eq!(total, 65536);
        assert!(matches!(hw_cooccurrence(9), Err(Error::Domain(_))));
    }

    #[test]
    fn cooccurrence_invariants() {
        for t in 0..=8u8 {
            let m = hw_cooccurrence(t).unwrap();
            assert_eq!(m.total(), 256 * HW_COUNTS[t as usize] as u64);
            for i in 0..9 {
                for j in 0..9 {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    if m.get(i, j) > 0 {
                        assert_eq!((i + j) % 2, t as usize % 2);
                        match t {
                            0 | 1 => assert!(i.abs_diff(j) <= 1),
                            7 | 8 => assert!((i + j).abs_diff(8) <= 1),
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn parity_identity_exhaustive() {
        for s1 in 0..=255u8 {
            for s2 in 0..=255u8 {
                assert_eq!(
                    (hamming_weight(s1) + hamming_weight(s2)) % 2,
                    hamming_weight(s1 ^ s2) % 2
                );
            }
        }
    }
}
