use ndarray::{Array2, ArrayView2, Axis};

use super::probe::{probe_train, ProbeConfig};
use crate::dataset::class16_members;
use crate::error::{Error, Result};
use crate::metrics::{self, pairwise_sum, ClassPrior, PROB_FLOOR};
use crate::nn::MlpModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe16Explanation {
    pub probe_accuracy: f64,
    /// PI of the expanded probe distribution against the 256-class labels.
    pub transformed_pi: f64,
    /// PI of the model on the same rows.
    pub model_pi: f64,
    /// Mean `-sum_y p_model(y) log2 q(y)` over rows.
    pub cross_entropy_bits: f64,
    /// Mean `KL(p_model || q)` in bits.
    pub kl_bits: f64,
    pub rows: usize,
}

/// Spreads each class-`i` probability evenly over the members of `Y_i`.
pub fn expand_class16(probs16: ArrayView2<f64>) -> Result<Array2<f64>> {
    if probs16.ncols() != 16 {
        return Err(Error::Shape(format!("expected 16 columns, got {}", probs16.ncols())));
    }
    let members = class16_members();
    let mut out = Array2::zeros((probs16.nrows(), 256));
    for (c, ys) in members.iter().enumerate() {
        let share = 1.0 / ys.len() as f64;
        for &y in ys {
            out.column_mut(y as usize).assign(&probs16.column(c).mapv(|p| p * share));
        }
    }
    Ok(out)
}

/// Compares an expanded 16-class distribution with the model's 256-class
/// softmax on the same rows.
pub fn explain_with_probs(
    probs16: ArrayView2<f64>,
    model_probs: ArrayView2<f64>,
    labels: &[usize],
    probe_accuracy: f64,
) -> Result<Probe16Explanation> {
    let q = expand_class16(probs16)?;
    if model_probs.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "model probabilities {:?} vs expanded probe {:?}",
            model_probs.dim(),
            q.dim()
        )));
    }
    let prior = ClassPrior::uniform(256);
    let mut ce = Vec::with_capacity(q.nrows());
    let mut kl = Vec::with_capacity(q.nrows());
    for (p, qr) in model_probs.rows().into_iter().zip(q.rows()) {
        let mut c = 0.0;
        let mut h = 0.0;
        for (&pi, &qi) in p.iter().zip(qr.iter()) {
            if pi > 0.0 {
                c -= pi * qi.max(PROB_FLOOR).log2();
                h -= pi * pi.log2();
            }
        }
        ce.push(c);
        kl.push(c - h);
    }
    let n = q.nrows() as f64;
    Ok(Probe16Explanation {
        probe_accuracy,
        transformed_pi: metrics::perceived_information(q.view(), labels, &prior)?,
        model_pi: metrics::perceived_information(model_probs, labels, &prior)?,
        cross_entropy_bits: pairwise_sum(&ce) / n,
        kl_bits: pairwise_sum(&kl) / n,
        rows: q.nrows(),
    })
}

/// Trains a 16-class probe on the activations of `layer` and scores its
/// expansion on the probe's held-out rows. `labels` are 256-class ID labels.
pub fn probe16_explanation(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    labels: &[usize],
    layer: usize,
    cfg: &ProbeConfig,
) -> Result<Probe16Explanation> {
    if model.spec.n_classes != 256 {
        return Err(Error::Shape(format!(
            "probe16 needs a 256-class model, got {}",
            model.spec.n_classes
        )));
    }
    let acts = model.hidden_activations(traces, layer)?;
    let class16: Vec<usize> = {
        let inv = {
            let mut t = [0u8; 256];
            for (c, ys) in class16_members().iter().enumerate() {
                for &y in ys {
                    t[y as usize] = c as u8;
                }
            }
            t
        };
        labels
            .iter()
            .map(|&l| {
                inv.get(l)
                    .map(|&c| c as usize)
                    .ok_or_else(|| Error::Shape(format!("label {l} outside 256 classes")))
            })
            .collect::<Result<_>>()?
    };
    let probe = probe_train(acts.view(), &class16, 16, cfg)?;
    let rows = &probe.holdout_rows;
    let q16 = probe.predict_proba(acts.select(Axis(0), rows).view())?;
    let p = model.predict_proba(traces.select(Axis(0), rows).view())?;
    let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    explain_with_probs(q16.view(), p.view(), &y, probe.holdout_accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_probs(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        let mut p = Array2::from_shape_fn((n, c), |_| r.random::<f64>() + 0.01);
        for mut row in p.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        p
    }

    #[test]
    fn expansion_preserves_mass() {
        let q = expand_class16(random_probs(20, 16, 1).view()).unwrap();
        for row in q.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_probe_of_blockwise_uniform_model_has_zero_kl() {
        let p16 = random_probs(50, 16, 2);
        let model = expand_class16(p16.view()).unwrap();
        let labels: Vec<usize> = (0..50).map(|i| i * 5 % 256).collect();
        let e = explain_with_probs(p16.view(), model.view(), &labels, 1.0).unwrap();
        assert!(e.kl_bits.abs() < 1e-12, "{}", e.kl_bits);
        let entropy = model
            .rows()
            .into_iter()
            .map(|r| -r.iter().map(|&p| p * p.log2()).sum::<f64>())
            .sum::<f64>()
            / 50.0;
        assert!((e.cross_entropy_bits - entropy).abs() < 1e-12);
        assert!((e.transformed_pi - e.model_pi).abs() < 1e-12);
    }

    #[test]
    fn uniform_probe_has_zero_pi() {
        let p16 = Array2::from_elem((30, 16), 1.0 / 16.0);
        let model = random_probs(30, 256, 3);
        let labels: Vec<usize> = (0..30).collect();
        let e = explain_with_probs(p16.view(), model.view(), &labels, 0.0).unwrap();
        // every class gets 1/16 * 1/|Y_i|, not exactly 1/256; the mean over labels
        // is compared against an oracle
        let members = class16_members();
        let mut size = [0usize; 256];
        for ys in &members {
            for &y in ys {
                size[y as usize] = ys.len();
            }
        }
        let oracle = 8.0 + labels.iter().map(|&l| (1.0 / (16.0 * size[l] as f64)).log2()).sum::<f64>() / 30.0;
        assert!((e.transformed_pi - oracle).abs() < 1e-12);
    }

    #[test]
    fn uniform_probe_over_uniform_labels_averages_to_zero_pi() {
        // one trace per class: the |Y_i| weighting cancels over the full byte range
        let p16 = Array2::from_elem((256, 16), 1.0 / 16.0);
        let model = random_probs(256, 256, 4);
        let labels: Vec<usize> = (0..256).collect();
        let e = explain_with_probs(p16.view(), model.view(), &labels, 0.0).unwrap();
        // sum_i |Y_i| * log2(1 / (16 |Y_i|)) / 256 + 8 = 4 - sum_i |Y_i| log2|Y_i| / 256
        let sizes: Vec<f64> = class16_members().iter().map(|y| y.len() as f64).collect();
        let oracle = 4.0 - sizes.iter().map(|s| s * s.log2()).sum::<f64>() / 256.0;
        assert!((e.transformed_pi - oracle).abs() < 1e-12);
        assert!(oracle.abs() < 0.05, "{oracle}");
    }
}
