use ndarray::ArrayView2;

use super::model::MlpModel;
use crate::error::Result;

/// Largest relative error between backprop and central finite differences
/// of the mean cross-entropy, over every weight and bias:
/// `|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`.
///
/// Costs two forward passes per parameter; meant for small models.
pub fn grad_check(
    model: &MlpModel,
    batch: ArrayView2<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let (_, analytic) = model.loss_and_gradients(batch, labels)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut compare = |ga: f64, gn: f64| {
        let err = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-12);
        worst = worst.max(err);
    };
    for l in 0..model.layers.len() {
        let (rows, cols) = model.layers[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let w0 = model.layers[l].weights[[i, j]];
                probe.layers[l].weights[[i, j]] = w0 + epsilon;
                let up = probe.mean_cross_entropy(batch, labels)?;
                probe.layers[l].weights[[i, j]] = w0 - epsilon;
                let down = probe.mean_cross_entropy(batch, labels)?;
                probe.layers[l].weights[[i, j]] = w0;
                compare(analytic.weights[l][[i, j]], (up - down) / (2.0 * epsilon));
            }
        }
        for j in 0..model.layers[l].bias.len() {
            let b0 = model.layers[l].bias[j];
            probe.layers[l].bias[j] = b0 + epsilon;
            let up = probe.mean_cross_entropy(batch, labels)?;
            probe.layers[l].bias[j] = b0 - epsilon;
            let down = probe.mean_cross_entropy(batch, labels)?;
            probe.layers[l].bias[j] = b0;
            compare(analytic.biases[l][j], (up - down) / (2.0 * epsilon));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Activation, Init, MlpSpec};
    use crate::rng;
    use ndarray::{concatenate, Array2, Axis};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spec(act: Activation) -> MlpSpec {
        MlpSpec {
            input_width: 5,
            layer_widths: vec![6, 4],
            activation: act,
            init: Init::HeUniform,
            n_classes: 3,
        }
    }

    fn data(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let x = Array2::from_shape_fn((8, 5), |_| r.sample::<f64, _>(StandardNormal));
        let y = (0..8).map(|_| r.random_range(0..3)).collect();
        (x, y)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for (act, seed) in [(Activation::Relu, 1), (Activation::Elu, 2)] {
            let mut m = init_model(&spec(act), seed).unwrap();
            // nonzero biases exercise the bias path
            for l in &mut m.layers {
                l.bias.fill(0.05);
            }
            let (x, y) = data(seed + 10);
            let err = grad_check(&m, x.view(), &y, 1e-5).unwrap();
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let m = init_model(&spec(Activation::Relu), 3).unwrap();
        let x = Array2::zeros((4, 5));
        let (_, g) = m.loss_and_gradients(x.view(), &[0, 1, 2, 0]).unwrap();
        assert!(g.weights[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_the_summed_gradient() {
        let m = init_model(&spec(Activation::Elu), 4).unwrap();
        let (x, y) = data(5);
        let one = x.slice(ndarray::s![0..1, ..]);
        let two = concatenate(Axis(0), &[one, one]).unwrap();
        let (_, g1) = m.loss_and_gradients(one, &y[..1]).unwrap();
        let (_, g2) = m.loss_and_gradients(two.view(), &[y[0], y[0]]).unwrap();
        // gradients are batch means: sum over [s, s] is 2 * mean
        for (a, b) in g1.weights.iter().zip(&g2.weights) {
            for (&single, &mean) in a.iter().zip(b) {
                assert!((2.0 * mean - 2.0 * single).abs() <= 1e-12 * (1.0 + single.abs()));
            }
        }
        for (a, b) in g1.biases.iter().zip(&g2.biases) {
            for (&single, &mean) in a.iter().zip(b) {
                assert!((2.0 * mean - 2.0 * single).abs() <= 1e-12 * (1.0 + single.abs()));
            }
        }
    }
}
