use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{init_model, Activation, Adam, Init, MlpModel, MlpSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch Adam steps.
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of rows held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on fixed features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// A network without hidden layers; its input standardization is fitted
    /// on the training rows.
    pub model: MlpModel,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    /// Row indices of the held-out part, in the order used.
    pub holdout_rows: Vec<usize>,
}

impl LinearProbe {
    pub fn predict_proba(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.model.predict_proba(features)
    }
}

/// Seeded train/holdout split of `n` rows; the holdout has
/// `round(n * holdout)` rows (at least one, leaving at least one for
/// training).
pub fn split_rows(n: usize, holdout: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 rows, got {n}")));
    }
    if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
        return Err(Error::Config(format!("holdout fraction {holdout} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(rng::derive_seed(seed, "probe-split")));
    let n_hold = ((n as f64 * holdout).round() as usize).clamp(1, n - 1);
    let hold = idx.split_off(n - n_hold);
    Ok((idx, hold))
}

pub fn probe_train(
    features: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::DegenerateLabels(format!(
            "all {} labels equal {:?}",
            labels.len(),
            first
        )));
    }
    if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::Shape(format!("labels must lie in 0..{n_classes}")));
    }
    let (train_rows, hold_rows) = split_rows(labels.len(), cfg.holdout, cfg.seed)?;
    let x_train = features.select(Axis(0), &train_rows);
    let y_train: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();

    let spec = MlpSpec {
        input_width: features.ncols(),
        layer_widths: vec![],
        activation: Activation::Relu,
        init: Init::RandomUniform,
        n_classes,
    };
    let mut model = init_model(&spec, rng::derive_seed(cfg.seed, "probe-init"))?;
    model.fit_input_standardization(x_train.view())?;
    let mut opt = Adam::new(&model, cfg.learning_rate, 0.9, 0.999, 1e-7);
    for step in 0..cfg.steps {
        let (loss, grads) = model.loss_and_gradients(x_train.view(), &y_train)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: step,
                grad_norms: grads.layer_norms(),
            });
        }
        opt.apply(&mut model, &grads);
    }

    let acc = |rows: &[usize]| -> Result<f64> {
        let x = features.select(Axis(0), rows);
        let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let p = model.predict_proba(x.view())?;
        metrics::accuracy(p.view(), &y)
    };
    let train_accuracy = acc(&train_rows)?;
    let holdout_accuracy = acc(&hold_rows)?;
    Ok(LinearProbe {
        model,
        train_accuracy,
        holdout_accuracy,
        holdout_rows: hold_rows,
    })
}
