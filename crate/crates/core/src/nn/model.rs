use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// ELU with `alpha = 1`.
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    // exp - 1 is twice as fast as exp_m1; the absolute error is below 1e-16
                    x.exp() - 1.0
                }
            }
        }
    }

    /// Derivative at pre-activation `x`, given `y = apply(x)`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Elu => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Elu),
            _ => Err(Error::Domain(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`
    HeUniform,
    /// `U(-0.05, 0.05)`
    RandomUniform,
}

impl Init {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::RandomUniform => 0.05,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Init::HeUniform => 0,
            Init::RandomUniform => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Init::HeUniform),
            1 => Ok(Init::RandomUniform),
            _ => Err(Error::Domain(format!("unknown init code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_width: usize,
    /// Widths of the hidden layers.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    pub n_classes: usize,
}

impl MlpSpec {
    /// 4 x 40 ReLU, He-uniform.
    pub fn hw_default(input_width: usize) -> Self {
        Self {
            input_width,
            layer_widths: vec![40; 4],
            activation: Activation::Relu,
            init: Init::HeUniform,
            n_classes: 9,
        }
    }

    /// 6 x 100 ELU, uniform(-0.05, 0.05).
    pub fn id_default(input_width: usize) -> Self {
        Self {
            input_width,
            layer_widths: vec![100; 6],
            activation: Activation::Elu,
            init: Init::RandomUniform,
            n_classes: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_widths.len() + 1);
        let mut fan_in = self.input_width;
        for &w in self.layer_widths.iter().chain(std::iter::once(&self.n_classes)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn n_hidden(&self) -> usize {
        self.layer_widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Dense network: hidden layers with a shared activation, then a linear
/// output layer producing logits. Inputs are standardized with a fixed
/// per-feature shift and scale before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
    pub input_shift: Array1<f64>,
    pub input_scale: Array1<f64>,
}

/// Everything a forward pass computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// Pre-activation values of each hidden layer, when requested.
    pub pre_activations: Option<Vec<Array2<f64>>>,
    /// Post-activation values of each hidden layer (`batch x width`).
    pub activations: Vec<Array2<f64>>,
    /// Output layer, before softmax.
    pub logits: Array2<f64>,
}

impl ForwardRecord {
    pub fn probabilities(&self) -> Array2<f64> {
        metrics::softmax(self.logits.view())
    }
}

/// Parameter gradients, laid out like [`MlpModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    /// Euclidean norm of each layer's weight and bias gradient.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (w.iter().chain(b.iter()).map(|g| g * g).sum::<f64>()).sqrt())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }
}

/// Draws a fresh model. Biases start at zero.
pub fn init_model(spec: &MlpSpec, seed: u64) -> Result<MlpModel> {
    spec.validate()?;
    let mut r = rng::seeded(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = spec.init.bound(fan_in);
            let weights = Array2::from_shape_fn((fan_in, fan_out), |_| r.random_range(-bound..bound));
            Dense {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpModel {
        spec: spec.clone(),
        layers,
        input_shift: Array1::zeros(spec.input_width),
        input_scale: Array1::ones(spec.input_width),
    })
}

impl MlpModel {
    pub fn n_hidden(&self) -> usize {
        self.spec.n_hidden()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Sets the input standardization to the per-feature mean and inverse
    /// standard deviation of `samples`. Constant features keep scale 1.
    pub fn fit_input_standardization(&mut self, samples: ArrayView2<f64>) -> Result<()> {
        self.check_input(samples)?;
        let n = samples.nrows() as f64;
        let mean = samples.sum_axis(Axis(0)) / n;
        let mut scale = Array1::ones(mean.len());
        for (j, col) in samples.columns().into_iter().enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                scale[j] = 1.0 / var.sqrt();
            }
        }
        self.input_shift = mean;
        self.input_scale = scale;
        Ok(())
    }

    fn check_input(&self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.spec.input_width {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.ncols(),
                self.spec.input_width
            )));
        }
        Ok(())
    }

    fn standardize(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let mut x = batch.to_owned();
        x -= &self.input_shift;
        x *= &self.input_scale;
        x
    }

    fn affine(&self, layer: usize, input: ArrayView2<f64>) -> Array2<f64> {
        let l = &self.layers[layer];
        let mut z = input.dot(&l.weights);
        z += &l.bias;
        z
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardRecord> {
        self.forward_capture(batch, false)
    }

    /// Forward pass keeping every hidden layer's activations, and the
    /// pre-activations too when `capture_pre` is set.
    pub fn forward_capture(&self, batch: ArrayView2<f64>, capture_pre: bool) -> Result<ForwardRecord> {
        self.check_input(batch)?;
        let act = self.spec.activation;
        let mut pre_acts = capture_pre.then(Vec::new);
        let mut acts = Vec::with_capacity(self.n_hidden());
        let mut h = self.standardize(batch);
        for layer in 0..self.n_hidden() {
            let z = self.affine(layer, h.view());
            h = z.mapv(|v| act.apply(v));
            if let Some(p) = pre_acts.as_mut() {
                p.push(z);
            }
            acts.push(h.clone());
        }
        let logits = self.affine(self.n_hidden(), h.view());
        Ok(ForwardRecord {
            pre_activations: pre_acts,
            activations: acts,
            logits,
        })
    }

    /// Logits only.
    pub fn logits(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut h = self.standardize(batch);
        for layer in 0..self.n_hidden() {
            h = self.affine(layer, h.view()).mapv(|v| self.spec.activation.apply(v));
        }
        Ok(self.affine(self.n_hidden(), h.view()))
    }

    pub fn predict_proba(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(metrics::softmax(self.logits(batch)?.view()))
    }

    /// Post-activation output of hidden layer `layer`.
    pub fn hidden_activations(&self, batch: ArrayView2<f64>, layer: usize) -> Result<Array2<f64>> {
        self.check_layer(layer)?;
        self.check_input(batch)?;
        let mut h = self.standardize(batch);
        for l in 0..=layer {
            h = self.affine(l, h.view()).mapv(|v| self.spec.activation.apply(v));
        }
        Ok(h)
    }

    /// Resumes the forward pass from the post-activation output of hidden
    /// layer `layer` and returns logits.
    pub fn forward_from(&self, layer: usize, activations: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_layer(layer)?;
        let width = self.spec.layer_widths[layer];
        if activations.ncols() != width {
            return Err(Error::Shape(format!(
                "layer {layer} has width {width}, got {} columns",
                activations.ncols()
            )));
        }
        let mut h = activations.to_owned();
        for l in layer + 1..self.n_hidden() {
            h = self.affine(l, h.view()).mapv(|v| self.spec.activation.apply(v));
        }
        Ok(self.affine(self.n_hidden(), h.view()))
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_hidden() {
            return Err(Error::Shape(format!(
                "hidden layer {layer} does not exist (model has {})",
                self.n_hidden()
            )));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy (nats) and its gradient with respect to
    /// every parameter. Regularization is not included.
    pub fn loss_and_gradients(
        &self,
        batch: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Gradients)> {
        if batch.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} rows for {} labels",
                batch.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.spec.n_classes) {
            return Err(Error::Shape(format!(
                "label {bad} outside {} classes",
                self.spec.n_classes
            )));
        }
        let rec = self.forward_capture(batch, true)?;
        let pre = rec.pre_activations.as_ref().unwrap();
        let n = labels.len() as f64;
        let input = self.standardize(batch);

        // softmax and log-sum-exp per row
        let mut delta = rec.logits.clone();
        let mut loss = 0.0;
        for (mut row, &l) in delta.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            row.mapv_inplace(|v| (v - lse).exp());
            row[l] -= 1.0;
        }
        loss /= n;
        delta /= n;

        let mut grads = Gradients::zeros_like(self);
        for layer in (0..self.layers.len()).rev() {
            let below = if layer == 0 {
                input.view()
            } else {
                rec.activations[layer - 1].view()
            };
            grads.weights[layer] = below.t().dot(&delta);
            grads.biases[layer] = delta.sum_axis(Axis(0));
            if layer > 0 {
                let mut back = delta.dot(&self.layers[layer].weights.t());
                let z = &pre[layer - 1];
                let a = &rec.activations[layer - 1];
                ndarray::Zip::from(&mut back)
                    .and(z)
                    .and(a)
                    .for_each(|g, &zv, &av| *g *= self.spec.activation.derivative(zv, av));
                delta = back;
            }
        }
        Ok((loss, grads))
    }

    /// Sum of absolute weight values (biases excluded).
    pub fn l1_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w.abs()).sum::<f64>())
            .sum()
    }

    /// Mean cross-entropy in nats over `batch`, evaluated in chunks.
    pub fn mean_cross_entropy(&self, batch: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(batch)?;
        let terms: Vec<f64> = logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &l)| {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
            })
            .collect();
        Ok(metrics::pairwise_sum(&terms) / labels.len() as f64)
    }
}
