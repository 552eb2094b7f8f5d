use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::MlpModel;
use crate::error::{Error, Result};
use crate::metrics::{self, ClassPrior};
use crate::rng;

/// Train PI and accuracy are scored on at most this many profiling traces,
/// a seeded subset fixed for the whole run.
pub const TRAIN_EVAL_CAP: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l1_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl TrainConfig {
    pub fn hw_default(seed: u64) -> Self {
        Self {
            learning_rate: 0.0025,
            l1_lambda: 7.5e-5,
            batch_size: 400,
            epochs: 100,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
        }
    }

    pub fn id_default(seed: u64) -> Self {
        Self {
            learning_rate: 0.0005,
            l1_lambda: 0.0,
            ..Self::hw_default(seed)
        }
    }

    pub fn validate(&self, n_traces: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "l1_lambda must be >= 0, got {}",
                self.l1_lambda
            )));
        }
        if self.batch_size == 0 || self.batch_size > n_traces {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..={n_traces}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Borrowed samples with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub samples: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(samples: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples for {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch cross-entropy (nats) seen during the epoch.
    pub train_loss: f64,
    /// `l1_lambda * sum |W|` at the end of the epoch.
    pub l1_penalty: f64,
    /// On the profiling set, or a fixed subset of [`TRAIN_EVAL_CAP`] traces.
    pub train_pi: f64,
    pub train_accuracy: f64,
    pub test_pi: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Evaluates PI (bits) and accuracy of `model` on `data`.
pub fn evaluate(model: &MlpModel, data: Batch<'_>, prior: &ClassPrior) -> Result<(f64, f64)> {
    let probs = predict_chunked(model, data.samples)?;
    let pi = metrics::perceived_information(probs.view(), data.labels, prior)?;
    let acc = metrics::accuracy(probs.view(), data.labels)?;
    Ok((pi, acc))
}

/// Softmax output over `samples`, computed in fixed-size chunks.
pub fn predict_chunked(model: &MlpModel, samples: ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
    const CHUNK: usize = 4096;
    let mut parts = Vec::new();
    for chunk in samples.axis_chunks_iter(Axis(0), CHUNK) {
        parts.push(model.predict_proba(chunk)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Ok(ndarray::Array2::zeros((0, model.spec.n_classes)));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Trains `model` in place. The input standardization of `model` is left as
/// is; call [`MlpModel::fit_input_standardization`] beforehand if wanted.
///
/// `on_epoch` runs after every epoch with the stats, the model and the
/// optimizer state; it is where checkpoints are written. An error returned
/// from it stops training.
pub fn train<F>(
    model: &mut MlpModel,
    train_set: Batch<'_>,
    test_set: Option<Batch<'_>>,
    prior: &ClassPrior,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(&EpochStats, &MlpModel, &Adam) -> Result<()>,
{
    cfg.validate(train_set.len())?;
    if prior.len() != model.spec.n_classes {
        return Err(Error::Shape(format!(
            "prior has {} classes, model has {}",
            prior.len(),
            model.spec.n_classes
        )));
    }
    let mut opt = Adam::new(
        model,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_epsilon,
    );
    let shuffle_seed = rng::derive_seed(cfg.seed, "shuffle");
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let eval_subset = (n > TRAIN_EVAL_CAP).then(|| {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng::seeded(rng::derive_seed(cfg.seed, "train-eval")));
        rows.truncate(TRAIN_EVAL_CAP);
        rows.sort_unstable();
        let labels: Vec<usize> = rows.iter().map(|&i| train_set.labels[i]).collect();
        (train_set.samples.select(Axis(0), &rows), labels)
    });

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));
        let mut batch_losses = Vec::with_capacity(n.div_ceil(cfg.batch_size));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = train_set.samples.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, mut grads) = model.loss_and_gradients(xb.view(), &yb)?;
            if cfg.l1_lambda > 0.0 {
                for (g, layer) in grads.weights.iter_mut().zip(&model.layers) {
                    ndarray::Zip::from(g)
                        .and(&layer.weights)
                        .for_each(|g, &w| *g += cfg.l1_lambda * sign(w));
                }
            }
            if !loss.is_finite() || grads.layer_norms().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    grad_norms: grads.layer_norms(),
                });
            }
            opt.apply(model, &grads);
            batch_losses.push(loss);
        }
        let train_loss = metrics::pairwise_sum(&batch_losses) / batch_losses.len() as f64;
        let (train_pi, train_accuracy) = match &eval_subset {
            Some((x, y)) => evaluate(model, Batch::new(x.view(), y)?, prior)?,
            None => evaluate(model, train_set, prior)?,
        };
        let (test_pi, test_accuracy) = match test_set {
            Some(t) => {
                let (pi, acc) = evaluate(model, t, prior)?;
                (Some(pi), Some(acc))
            }
            None => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            l1_penalty: cfg.l1_lambda * model.l1_norm(),
            train_pi,
            train_accuracy,
            test_pi,
            test_accuracy,
        };
        log::debug!(
            "epoch {epoch}: loss {train_loss:.5} train PI {train_pi:.4} test PI {:?}",
            test_pi
        );
        on_epoch(&stats, model, &opt)?;
        history.epochs.push(stats);
    }
    Ok(history)
}

#[inline]
fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Activation, Init, MlpSpec};
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, _)| {
            let centre = if labels[i] == 0 { -2.0 } else { 2.0 };
            centre + 0.5 * r.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    fn small_spec(n_classes: usize) -> MlpSpec {
        MlpSpec {
            input_width: 4,
            layer_widths: vec![8, 8],
            activation: Activation::Relu,
            init: Init::HeUniform,
            n_classes,
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            l1_lambda: 0.0,
            batch_size: 50,
            epochs,
            ..TrainConfig::hw_default(11)
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(400, 1);
        let mut m = init_model(&small_spec(2), 2).unwrap();
        let prior = ClassPrior::uniform(2);
        let data = Batch::new(x.view(), &y).unwrap();
        let h = train(&mut m, data, None, &prior, &cfg(50), |_, _, _| Ok(())).unwrap();
        let last = h.epochs.last().unwrap();
        assert!(last.train_accuracy > 0.99, "{last:?}");
        assert_eq!(h.epochs.len(), 50);
    }

    #[test]
    fn same_seed_same_curve() {
        let (x, y) = blobs(200, 3);
        let prior = ClassPrior::uniform(2);
        let data = Batch::new(x.view(), &y).unwrap();
        let run = || {
            let mut m = init_model(&small_spec(2), 4).unwrap();
            let h = train(&mut m, data, Some(data), &prior, &cfg(5), |_, _, _| Ok(())).unwrap();
            (h, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn large_l1_shrinks_weights() {
        let mut r = rng::seeded(9);
        let x = Array2::from_shape_fn((200, 4), |_| r.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..200).map(|_| r.random_range(0..2)).collect();
        let mut m = init_model(&small_spec(2), 5).unwrap();
        let prior = ClassPrior::uniform(2);
        let data = Batch::new(x.view(), &y).unwrap();
        let mut norms = vec![m.l1_norm()];
        let c = TrainConfig {
            l1_lambda: 1.0,
            learning_rate: 0.002,
            ..cfg(30)
        };
        train(&mut m, data, None, &prior, &c, |_, model, _| {
            norms.push(model.l1_norm());
            Ok(())
        })
        .unwrap();
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "{norms:?}");
        }
        assert!(*norms.last().unwrap() < 0.6 * norms[0], "{norms:?}");
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::hw_default(0);
        assert!(c.validate(400).is_ok());
        assert!(matches!(c.validate(399), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..c.clone()
        };
        assert!(bad.validate(1000).is_err());
        let bad = TrainConfig {
            l1_lambda: -1.0,
            ..c
        };
        assert!(bad.validate(1000).is_err());
    }

    #[test]
    fn diverging_training_reports_diagnostics() {
        let (mut x, y) = blobs(100, 1);
        x[[3, 2]] = f64::NAN;
        let mut m = init_model(&small_spec(2), 2).unwrap();
        let prior = ClassPrior::uniform(2);
        let data = Batch::new(x.view(), &y).unwrap();
        let err = train(&mut m, data, None, &prior, &cfg(2), |_, _, _| Ok(())).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, grad_norms, .. } => {
                assert_eq!(epoch, 1);
                assert_eq!(grad_norms.len(), 3);
            }
            e => panic!("unexpected {e:?}"),
        }
    }
}
