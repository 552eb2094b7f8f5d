//! Model checkpoints.
//!
//! All integers and floats little-endian; floats are IEEE-754 binary64.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `MSCKPT\0\0` |
//! | 8 | 4 | format version (`u32`, currently 1) |
//! | 12 | 1 | activation, `0` = relu, `1` = elu |
//! | 13 | 1 | init, `0` = he_uniform, `1` = random_uniform |
//! | 14 | 1 | optimizer state present (`0`/`1`) |
//! | 15 | 1 | reserved, `0` |
//! | 16 | 8 | epoch (`u64`, 0 = untrained) |
//! | 24 | 8 | input width `I` (`u64`) |
//! | 32 | 8 | `n_classes` (`u64`) |
//! | 40 | 8 | hidden layer count `H` (`u64`) |
//! | 48 | `8 H` | hidden widths (`u64` each) |
//! | … | `8 I` | input shift |
//! | … | `8 I` | input scale |
//! | … | | per dense layer, input side first: weights `fan_in x fan_out` row-major, then `fan_out` biases |
//! | … | | optimizer block, if present (below) |
//! | … | 4 | CRC-32 (IEEE) of every preceding byte |
//!
//! Optimizer block: step (`u64`), learning rate, beta1, beta2, epsilon
//! (`f64` each), then for each layer the first moments of weights and
//! biases followed by the second moments of weights and biases, in the same
//! shapes as the parameters.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::adam::Adam;
use super::model::{Activation, Dense, Init, MlpModel, MlpSpec};
use crate::dataset::{write_atomic, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSCKPT\0\0";
pub const CHECKPOINT_EXTENSION: &str = "ckpt";
const HEADER_LEN: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub model: MlpModel,
    pub optimizer: Option<Adam>,
}

fn put_f64s<'a>(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.n_parameters() * 3 + 64);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&crate::dataset::FORMAT_VERSION.to_le_bytes());
        buf.push(m.spec.activation.code());
        buf.push(m.spec.init.code());
        buf.push(u8::from(self.optimizer.is_some()));
        buf.push(0);
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&(m.spec.input_width as u64).to_le_bytes());
        buf.extend_from_slice(&(m.spec.n_classes as u64).to_le_bytes());
        buf.extend_from_slice(&(m.spec.n_hidden() as u64).to_le_bytes());
        for &w in &m.spec.layer_widths {
            buf.extend_from_slice(&(w as u64).to_le_bytes());
        }
        put_f64s(&mut buf, &m.input_shift);
        put_f64s(&mut buf, &m.input_scale);
        for l in &m.layers {
            put_f64s(&mut buf, &l.weights);
            put_f64s(&mut buf, &l.bias);
        }
        if let Some(opt) = &self.optimizer {
            buf.extend_from_slice(&opt.step.to_le_bytes());
            put_f64s(
                &mut buf,
                &[opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon],
            );
            for i in 0..m.layers.len() {
                put_f64s(&mut buf, &opt.m_weights[i]);
                put_f64s(&mut buf, &opt.m_biases[i]);
                put_f64s(&mut buf, &opt.v_weights[i]);
                put_f64s(&mut buf, &opt.v_biases[i]);
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, CHECKPOINT_MAGIC, "checkpoint", HEADER_LEN)?;
        let act_code = r.u8()?;
        let init_code = r.u8()?;
        let has_opt = r.u8()?;
        r.u8()?;
        let epoch = r.u64()?;
        let input_width = r.u64()? as usize;
        let n_classes = r.u64()? as usize;
        let n_hidden = r.u64()? as usize;
        if n_hidden > bytes.len() / 8 {
            return Err(Error::Truncated(format!(
                "{n_hidden} hidden layers cannot fit in {} bytes",
                bytes.len()
            )));
        }
        let mut widths = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            widths.push(r.u64()? as usize);
        }
        let spec = MlpSpec {
            input_width,
            layer_widths: widths,
            activation: Activation::from_code(act_code)?,
            init: Init::from_code(init_code)?,
            n_classes,
        };
        let dims = spec.layer_dims();
        let n_params = dims
            .iter()
            .try_fold(0usize, |acc, &(i, o)| {
                i.checked_mul(o)?.checked_add(o)?.checked_add(acc)
            })
            .ok_or_else(|| Error::Truncated("header sizes overflow".into()))?;
        let opt_len = match has_opt {
            0 => 0,
            1 => 40 + 16 * n_params,
            c => return Err(Error::Domain(format!("bad optimizer flag {c}"))),
        };
        let payload = 8 * n_hidden + 16 * input_width + 8 * n_params + opt_len;
        r.expect_total(payload)?;
        r.verify_crc()?;
        spec.validate()?;

        let vec = |r: &mut Reader, n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| r.f64()).collect()
        };
        let input_shift = Array1::from(vec(&mut r, input_width)?);
        let input_scale = Array1::from(vec(&mut r, input_width)?);
        let mat = |r: &mut Reader, (i, o): (usize, usize)| -> Result<Array2<f64>> {
            Array2::from_shape_vec((i, o), vec(r, i * o)?).map_err(|e| Error::Shape(e.to_string()))
        };
        let mut layers = Vec::with_capacity(dims.len());
        for &d in &dims {
            let weights = mat(&mut r, d)?;
            let bias = Array1::from((0..d.1).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            layers.push(Dense { weights, bias });
        }
        let model = MlpModel {
            spec,
            layers,
            input_shift,
            input_scale,
        };
        let optimizer = if has_opt == 1 {
            let step = r.u64()?;
            let mut opt = Adam::new(&model, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            opt.step = step;
            for (i, &d) in dims.iter().enumerate() {
                opt.m_weights[i] = mat(&mut r, d)?;
                opt.m_biases[i] = Array1::from((0..d.1).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                opt.v_weights[i] = mat(&mut r, d)?;
                opt.v_biases[i] = Array1::from((0..d.1).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            }
            Some(opt)
        } else {
            None
        };
        Ok(Checkpoint {
            epoch,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;

    fn sample() -> Checkpoint {
        let mut model = init_model(&MlpSpec::hw_default(20), 7).unwrap();
        model.input_shift.fill(0.25);
        model.layers[2].bias[3] = -1.5;
        let mut opt = Adam::new(&model, 0.0025, 0.9, 0.999, 1e-7);
        opt.step = 17;
        opt.v_weights[1][[2, 2]] = 3.0;
        Checkpoint {
            epoch: 17,
            model,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);

        let x = Array2::from_shape_fn((5, 20), |(i, j)| (i * j) as f64 * 0.1);
        assert_eq!(back.model.logits(x.view()).unwrap(), c.model.logits(x.view()).unwrap());

        let bare = Checkpoint {
            optimizer: None,
            ..c
        };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 100] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Truncated(_))
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Magic(_))));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Version { .. })));
    }
}
