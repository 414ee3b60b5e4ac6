//! Dense-layer network engine: forward pass, backpropagation, SGD update and
//! loss functions. Every chain node runs this on its assigned slice of the
//! model; the monolithic trainer used as a test oracle runs it on the full
//! layer stack.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward called without a cached forward pass")]
    NoCachedForward,
    #[error("invalid layer specification: {0}")]
    InvalidSpec(String),
}

fn shape_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> NnError {
    NnError::Shape {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerType {
    FullyConnected,
}

/// Hyperparameters of one dense layer. `dropout` is accepted in model
/// configurations for forward compatibility but is not applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_type: LayerType,
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

impl LayerSpec {
    pub fn dense(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            layer_type: LayerType::FullyConnected,
            input_width,
            output_width,
            activation,
            dropout: None,
        }
    }

    /// Weight count only, the quantity the layer-distribution algorithm
    /// allocates by. Biases are tracked separately.
    pub fn parameter_count(&self) -> u64 {
        self.input_width as u64 * self.output_width as u64
    }

    pub fn bias_count(&self) -> u64 {
        self.output_width as u64
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_width == 0 || self.output_width == 0 {
            return Err(NnError::InvalidSpec(format!(
                "layer widths must be >= 1, got {}x{}",
                self.input_width, self.output_width
            )));
        }
        Ok(())
    }
}

/// A batch of row vectors flowing forward along the computation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActivationBatch<T> {
    pub values: Matrix<T>,
    pub epoch: u32,
    pub batch_number: u32,
}

impl<T: Scalar> ActivationBatch<T> {
    pub fn new(values: Matrix<T>, epoch: u32, batch_number: u32) -> Self {
        Self { values, epoch, batch_number }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// A batch of loss gradients flowing backward along the chain; `values` holds
/// the derivative of the loss with respect to the receiving network's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GradientBatch<T> {
    pub values: Matrix<T>,
    pub epoch: u32,
    pub batch_number: u32,
}

impl<T: Scalar> GradientBatch<T> {
    pub fn new(values: Matrix<T>, epoch: u32, batch_number: u32) -> Self {
        Self { values, epoch, batch_number }
    }
}

/// One-hot label rows accompanying an activation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LabelBatch<T> {
    pub values: Matrix<T>,
}

impl<T: Scalar> LabelBatch<T> {
    pub fn new(values: Matrix<T>) -> Self {
        Self { values }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }
}

impl Activation {
    fn apply<T: Scalar>(self, z: &mut Matrix<T>) {
        match self {
            Activation::Identity => {}
            Activation::ReLU => {
                for v in z.as_mut_slice() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            Activation::Sigmoid => {
                for v in z.as_mut_slice() {
                    *v = T::one() / (T::one() + (-*v).exp());
                }
            }
            Activation::Softmax => {
                for i in 0..z.rows() {
                    let row = z.row_mut(i);
                    let mut max = row[0];
                    for &v in row.iter() {
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
    }

    /// Converts the gradient w.r.t. the layer output into the gradient
    /// w.r.t. the pre-activation, given the cached post-activation output.
    fn backprop<T: Scalar>(self, output: &Matrix<T>, upstream: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::ReLU => {
                let mut out = upstream.clone();
                for (d, &o) in out.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    if o <= T::zero() {
                        *d = T::zero();
                    }
                }
                out
            }
            Activation::Sigmoid => {
                let mut out = upstream.clone();
                for (d, &o) in out.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *d = *d * o * (T::one() - o);
                }
                out
            }
            Activation::Softmax => {
                // dz_i = p_i * (g_i - sum_j g_j p_j), row-wise.
                let mut out = Matrix::zeros(upstream.rows(), upstream.cols());
                for i in 0..upstream.rows() {
                    let g = upstream.row(i);
                    let p = output.row(i);
                    let mut dot = T::zero();
                    for (&gj, &pj) in g.iter().zip(p) {
                        dot += gj * pj;
                    }
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = p[j] * (g[j] - dot);
                    }
                }
                out
            }
        }
    }
}

/// One dense layer with its weights (`input_width x output_width`) and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenseLayer<T> {
    pub spec: LayerSpec,
    pub weights: Matrix<T>,
    #[serde(with = "crate::matrix::scalar_vec")]
    pub biases: Vec<T>,
}

/// Deterministic layer initialization: weights uniform in
/// `(-1/sqrt(input_width), +1/sqrt(input_width))`, biases zero. The same
/// `(spec, seed)` pair always produces bit-identical layers.
pub fn init_weights<T: Scalar>(spec: &LayerSpec, seed: u64) -> DenseLayer<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (spec.input_width as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    let mut data = Vec::with_capacity(spec.input_width * spec.output_width);
    for _ in 0..spec.input_width * spec.output_width {
        data.push(T::from_f64(dist.sample(&mut rng)));
    }
    DenseLayer {
        weights: Matrix::from_vec(spec.input_width, spec.output_width, data),
        biases: vec![T::zero(); spec.output_width],
        spec: spec.clone(),
    }
}

/// Parameter gradients of a single layer from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T> {
    pub weights: Matrix<T>,
    pub biases: Vec<T>,
}

/// A contiguous stack of dense layers owned by one node, plus the
/// activations cached between a forward and the matching backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitNetwork<T> {
    layers: Vec<DenseLayer<T>>,
    cache: Option<ForwardCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache<T> {
    /// `activations[0]` is the network input; `activations[k + 1]` the
    /// post-activation output of layer `k`.
    activations: Vec<Matrix<T>>,
    epoch: u32,
    batch_number: u32,
}

impl<T: Scalar> SplitNetwork<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        for pair in layers.windows(2) {
            if pair[0].spec.output_width != pair[1].spec.input_width {
                return Err(shape_err(
                    "adjacent layers",
                    pair[0].spec.output_width,
                    pair[1].spec.input_width,
                ));
            }
        }
        for layer in &layers {
            layer.spec.validate()?;
        }
        Ok(Self { layers, cache: None })
    }

    /// Builds the node's partial network from layer specs, seeding each layer
    /// from `(weight_seed, global layer index)` so that any split of the same
    /// model initializes identically to the unsplit model.
    pub fn init(specs: &[LayerSpec], weight_seed: u64, layer_index_base: usize) -> Result<Self, NnError> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| init_weights(spec, derive_layer_seed(weight_seed, layer_index_base + i)))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer<T>> {
        self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec.input_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.output_width)
    }

    pub fn has_cached_forward(&self) -> bool {
        self.cache.is_some()
    }

    /// Forward pass over the whole slice, caching every intermediate
    /// activation for the next backward pass.
    pub fn forward(&mut self, input: &ActivationBatch<T>) -> Result<ActivationBatch<T>, NnError> {
        if input.width() != self.input_width() {
            return Err(shape_err("forward input", self.input_width(), input.width()));
        }
        if !input.values.all_finite() {
            return Err(NnError::NonFinite("forward input"));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.values.clone());
        for layer in &self.layers {
            let mut z = activations.last().unwrap().matmul(&layer.weights);
            z.add_row_broadcast(&layer.biases);
            layer.spec.activation.apply(&mut z);
            activations.push(z);
        }
        let output = activations.last().unwrap().clone();
        self.cache = Some(ForwardCache {
            activations,
            epoch: input.epoch,
            batch_number: input.batch_number,
        });
        Ok(ActivationBatch::new(output, input.epoch, input.batch_number))
    }

    /// Forward pass without caching or state changes; used for validation
    /// and by test oracles that re-evaluate the loss at perturbed parameters.
    pub fn forward_inference(&self, input: &Matrix<T>) -> Result<Matrix<T>, NnError> {
        if input.cols() != self.input_width() {
            return Err(shape_err("forward input", self.input_width(), input.cols()));
        }
        if !input.all_finite() {
            return Err(NnError::NonFinite("forward input"));
        }
        let mut current = input.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weights);
            z.add_row_broadcast(&layer.biases);
            layer.spec.activation.apply(&mut z);
            current = z;
        }
        Ok(current)
    }

    /// Pure gradient computation against the cached forward pass: returns the
    /// gradient w.r.t. the network input and the per-layer parameter
    /// gradients, leaving all state untouched.
    pub fn backward_gradients(
        &self,
        upstream: &GradientBatch<T>,
    ) -> Result<(GradientBatch<T>, Vec<LayerGradients<T>>), NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCachedForward)?;
        let output = cache.activations.last().unwrap();
        if upstream.values.shape() != output.shape() {
            return Err(shape_err(
                "backward upstream gradient",
                format!("{:?}", output.shape()),
                format!("{:?}", upstream.values.shape()),
            ));
        }
        if !upstream.values.all_finite() {
            return Err(NnError::NonFinite("upstream gradient"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_out = upstream.values.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let layer_input = &cache.activations[k];
            let layer_output = &cache.activations[k + 1];
            let d_z = layer.spec.activation.backprop(layer_output, &d_out);
            let d_weights = layer_input.transpose_matmul(&d_z);
            let d_biases = d_z.column_sums();
            d_out = d_z.matmul_transpose(&layer.weights);
            grads.push(LayerGradients {
                weights: d_weights,
                biases: d_biases,
            });
        }
        grads.reverse();
        Ok((
            GradientBatch::new(d_out, upstream.epoch, upstream.batch_number),
            grads,
        ))
    }

    /// Backpropagation with SGD update: every weight and bias moves by
    /// `-lr * gradient`, the cache is cleared, and the gradient with respect
    /// to the network input is returned for the previous node in the chain.
    pub fn backward(&mut self, upstream: &GradientBatch<T>, lr: T) -> Result<GradientBatch<T>, NnError> {
        let (input_grad, grads) = self.backward_gradients(upstream)?;
        for (layer, grad) in self.layers.iter_mut().zip(&grads) {
            for (w, &g) in layer.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
                *w -= lr * g;
            }
            for (b, &g) in layer.biases.iter_mut().zip(&grad.biases) {
                *b -= lr * g;
            }
            if !layer.weights.all_finite() || !layer.biases.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite("updated parameters"));
            }
        }
        self.cache = None;
        Ok(input_grad)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Scalar>(&self) -> SplitNetwork<U> {
        SplitNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    spec: l.spec.clone(),
                    weights: l.weights.cast(),
                    biases: l.biases.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            cache: None,
        }
    }
}

/// Per-layer seed derivation; keyed by the layer's index in the full model so
/// a slice initializes exactly as the unsplit network does.
pub fn derive_layer_seed(weight_seed: u64, layer_index: usize) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(b"layer-weights");
    hasher.update(weight_seed.to_be_bytes());
    hasher.update((layer_index as u64).to_be_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    CrossEntropySoftmax,
}

/// Mean squared error: `(1/2) * sum((predicted - actual)^2) / batch_size`.
/// The half-sum follows the textbook form; dividing by the batch size keeps
/// the learning rate independent of the batch size.
pub fn loss_mse<T: Scalar>(predicted: &ActivationBatch<T>, actual: &LabelBatch<T>) -> Result<T, NnError> {
    if predicted.values.shape() != actual.values.shape() {
        return Err(shape_err(
            "mse loss",
            format!("{:?}", predicted.values.shape()),
            format!("{:?}", actual.values.shape()),
        ));
    }
    let mut sum = T::zero();
    for (&p, &a) in predicted.values.as_slice().iter().zip(actual.values.as_slice()) {
        let d = p - a;
        sum += d * d;
    }
    let half = T::from_f64(0.5);
    Ok(half * sum / T::from_f64(predicted.batch_size() as f64))
}

const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood over the batch. `predicted` rows must already
/// be probabilities; probabilities below 1e-12 are clamped so a zero at the
/// true class yields a large but finite loss.
pub fn loss_cross_entropy<T: Scalar>(
    predicted: &ActivationBatch<T>,
    actual: &LabelBatch<T>,
) -> Result<T, NnError> {
    if predicted.values.shape() != actual.values.shape() {
        return Err(shape_err(
            "cross-entropy loss",
            format!("{:?}", predicted.values.shape()),
            format!("{:?}", actual.values.shape()),
        ));
    }
    let floor = T::from_f64(PROBABILITY_FLOOR);
    let mut sum = T::zero();
    for i in 0..predicted.values.rows() {
        for (&p, &y) in predicted.values.row(i).iter().zip(actual.values.row(i)) {
            if y > T::zero() {
                sum -= y * p.max(floor).ln();
            }
        }
    }
    Ok(sum / T::from_f64(predicted.batch_size() as f64))
}

/// Loss value for the terminal node. For `CrossEntropySoftmax` the network
/// output is taken as logits and the softmax is applied here, paired with
/// [`loss_gradient`]'s fused form.
pub fn loss_value<T: Scalar>(
    kind: LossKind,
    predicted: &ActivationBatch<T>,
    actual: &LabelBatch<T>,
) -> Result<T, NnError> {
    match kind {
        LossKind::Mse => loss_mse(predicted, actual),
        LossKind::CrossEntropySoftmax => {
            let mut probs = predicted.values.clone();
            Activation::Softmax.apply(&mut probs);
            loss_cross_entropy(
                &ActivationBatch::new(probs, predicted.epoch, predicted.batch_number),
                actual,
            )
        }
    }
}

/// Gradient of the chosen loss with respect to the terminal network's output.
/// MSE: `(predicted - actual) / batch_size`. CrossEntropySoftmax, fused over
/// the softmax: `(softmax(predicted) - actual) / batch_size`.
pub fn loss_gradient<T: Scalar>(
    kind: LossKind,
    predicted: &ActivationBatch<T>,
    actual: &LabelBatch<T>,
) -> Result<GradientBatch<T>, NnError> {
    if predicted.values.shape() != actual.values.shape() {
        return Err(shape_err(
            "loss gradient",
            format!("{:?}", predicted.values.shape()),
            format!("{:?}", actual.values.shape()),
        ));
    }
    let scale = T::one() / T::from_f64(predicted.batch_size() as f64);
    let values = match kind {
        LossKind::Mse => {
            let mut out = predicted.values.clone();
            for (v, &a) in out.as_mut_slice().iter_mut().zip(actual.values.as_slice()) {
                *v = (*v - a) * scale;
            }
            out
        }
        LossKind::CrossEntropySoftmax => {
            let mut out = predicted.values.clone();
            Activation::Softmax.apply(&mut out);
            for (v, &a) in out.as_mut_slice().iter_mut().zip(actual.values.as_slice()) {
                *v = (*v - a) * scale;
            }
            out
        }
    };
    Ok(GradientBatch::new(values, predicted.epoch, predicted.batch_number))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch<T: Scalar>(rows: &[Vec<T>]) -> ActivationBatch<T> {
        ActivationBatch::new(Matrix::from_rows(rows), 0, 0)
    }

    fn labels<T: Scalar>(rows: &[Vec<T>]) -> LabelBatch<T> {
        LabelBatch::new(Matrix::from_rows(rows))
    }

    fn identity_layer(width: usize, activation: Activation) -> DenseLayer<f64> {
        let mut weights = Matrix::zeros(width, width);
        for i in 0..width {
            weights.set(i, i, 1.0);
        }
        DenseLayer {
            spec: LayerSpec::dense(width, width, activation),
            weights,
            biases: vec![0.0; width],
        }
    }

    #[test]
    fn forward_identity_weights_identity_activation() {
        let mut net = SplitNetwork::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        let out = net.forward(&batch(&[vec![3.0, -1.0]])).unwrap();
        assert_eq!(out.values.row(0), &[3.0, -1.0]);
    }

    #[test]
    fn forward_identity_weights_relu() {
        let mut net = SplitNetwork::new(vec![identity_layer(2, Activation::ReLU)]).unwrap();
        let out = net.forward(&batch(&[vec![3.0, -1.0]])).unwrap();
        assert_eq!(out.values.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn forward_rejects_width_mismatch_and_nonfinite() {
        let mut net = SplitNetwork::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert!(matches!(
            net.forward(&batch(&[vec![1.0, 2.0, 3.0]])),
            Err(NnError::Shape { .. })
        ));
        assert!(matches!(
            net.forward(&batch(&[vec![f64::NAN, 0.0]])),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn forward_composes_layer_by_layer() {
        // Oracle: applying the three single-layer networks in sequence must
        // give exactly the composed three-layer forward.
        let specs = [
            LayerSpec::dense(3, 4, Activation::ReLU),
            LayerSpec::dense(4, 4, Activation::Sigmoid),
            LayerSpec::dense(4, 2, Activation::Identity),
        ];
        let layers: Vec<DenseLayer<f64>> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| init_weights(s, derive_layer_seed(99, i)))
            .collect();
        let mut composed = SplitNetwork::new(layers.clone()).unwrap();
        let input = batch(&[vec![0.3, -0.8, 1.2], vec![-0.1, 0.4, 0.9]]);
        let expected = {
            let mut current = input.clone();
            for layer in layers {
                let mut single = SplitNetwork::new(vec![layer]).unwrap();
                current = single.forward(&current).unwrap();
            }
            current
        };
        let got = composed.forward(&input).unwrap();
        assert_eq!(got.values, expected.values);
    }

    #[test]
    fn backward_zero_gradient_is_a_fixpoint() {
        let spec = LayerSpec::dense(3, 2, Activation::Sigmoid);
        let mut net = SplitNetwork::new(vec![init_weights::<f64>(&spec, 7)]).unwrap();
        let before = net.layers()[0].clone();
        net.forward(&batch(&[vec![0.5, -0.5, 1.0]])).unwrap();
        let grad = GradientBatch::new(Matrix::zeros(1, 2), 0, 0);
        let returned = net.backward(&grad, 0.1).unwrap();
        assert_eq!(net.layers()[0], before);
        assert!(returned.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_scalar_hand_case() {
        // w = [[1]], b = [0], input [2], upstream [1], lr 0.1:
        // dw = 2 * 1 = 2, new w = 1 - 0.1 * 2 = 0.8; returned grad = 1 * 1 = 1.
        let layer = DenseLayer {
            spec: LayerSpec::dense(1, 1, Activation::Identity),
            weights: Matrix::from_rows(&[vec![1.0_f64]]),
            biases: vec![0.0],
        };
        let mut net = SplitNetwork::new(vec![layer]).unwrap();
        net.forward(&batch(&[vec![2.0]])).unwrap();
        let grad = GradientBatch::new(Matrix::from_rows(&[vec![1.0]]), 0, 0);
        let returned = net.backward(&grad, 0.1).unwrap();
        assert!((net.layers()[0].weights.get(0, 0) - 0.8).abs() < 1e-15);
        assert!((returned.values.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_cached_forward_and_matching_shape() {
        let spec = LayerSpec::dense(2, 2, Activation::Identity);
        let mut net = SplitNetwork::new(vec![init_weights::<f64>(&spec, 1)]).unwrap();
        let grad = GradientBatch::new(Matrix::zeros(1, 2), 0, 0);
        assert!(matches!(net.backward(&grad, 0.1), Err(NnError::NoCachedForward)));
        net.forward(&batch(&[vec![1.0, 2.0]])).unwrap();
        let bad = GradientBatch::new(Matrix::zeros(1, 3), 0, 0);
        assert!(matches!(net.backward(&bad, 0.1), Err(NnError::Shape { .. })));
    }

    #[test]
    fn loss_mse_cases() {
        let zero = loss_mse(&batch(&[vec![1.0, 2.0]]), &labels(&[vec![1.0, 2.0]])).unwrap();
        assert_eq!(zero, 0.0);
        let scalar = loss_mse(&batch(&[vec![2.0]]), &labels(&[vec![0.0]])).unwrap();
        assert_eq!(scalar, 2.0);
        // Two rows [1], [3] against [0], [0]: 0.5 * (1 + 9) / 2 = 2.5.
        let two = loss_mse(&batch(&[vec![1.0], vec![3.0]]), &labels(&[vec![0.0], vec![0.0]])).unwrap();
        assert_eq!(two, 2.5);
        assert!(matches!(
            loss_mse(&batch(&[vec![1.0]]), &labels(&[vec![1.0, 2.0]])),
            Err(NnError::Shape { .. })
        ));
    }

    #[test]
    fn loss_cross_entropy_cases() {
        let exact: f64 = loss_cross_entropy(
            &batch(&[vec![1.0, 0.0, 0.0]]),
            &labels(&[vec![1.0, 0.0, 0.0]]),
        )
        .unwrap();
        assert!(exact.abs() <= 1e-12);

        let uniform = loss_cross_entropy(
            &batch(&[vec![0.1; 10]]),
            &labels(&[{
                let mut row = vec![0.0; 10];
                row[3] = 1.0;
                row
            }]),
        )
        .unwrap();
        assert!((uniform - 10.0_f64.ln()).abs() < 1e-12);

        // Independent scalar arithmetic: -(ln 0.7 + ln 0.8) / 2.
        let two_rows = loss_cross_entropy(
            &batch(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]]),
            &labels(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
        )
        .unwrap();
        let expected = -(0.7_f64.ln() + 0.8_f64.ln()) / 2.0;
        assert!((two_rows - expected).abs() < 1e-15);

        // Zero probability at the true class clamps instead of producing NaN.
        let clamped: f64 = loss_cross_entropy(
            &batch(&[vec![0.0, 1.0]]),
            &labels(&[vec![1.0, 0.0]]),
        )
        .unwrap();
        assert!(clamped.is_finite());
        assert!((clamped - (-PROBABILITY_FLOOR.ln())).abs() < 1e-6);
    }

    #[test]
    fn loss_gradient_mse_cases() {
        let zero = loss_gradient(
            LossKind::Mse,
            &batch(&[vec![1.0, 2.0]]),
            &labels(&[vec![1.0, 2.0]]),
        )
        .unwrap();
        assert!(zero.values.as_slice().iter().all(|&v| v == 0.0));

        let scalar = loss_gradient(LossKind::Mse, &batch(&[vec![2.0]]), &labels(&[vec![0.0]])).unwrap();
        assert_eq!(scalar.values.get(0, 0), 2.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Central finite differences of the loss evaluated through the same
        // loss_value route, which is independent of the gradient code path.
        let h = 1e-6;
        for kind in [LossKind::Mse, LossKind::CrossEntropySoftmax] {
            let predicted = batch(&[vec![0.4_f64, -1.2, 0.7], vec![2.0, 0.1, -0.3]]);
            let actual = labels(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
            let grad = loss_gradient(kind, &predicted, &actual).unwrap();
            for i in 0..predicted.values.rows() {
                for j in 0..predicted.values.cols() {
                    let mut plus = predicted.clone();
                    plus.values.set(i, j, plus.values.get(i, j) + h);
                    let mut minus = predicted.clone();
                    minus.values.set(i, j, minus.values.get(i, j) - h);
                    let numeric = (loss_value(kind, &plus, &actual).unwrap()
                        - loss_value(kind, &minus, &actual).unwrap())
                        / (2.0 * h);
                    let analytic = grad.values.get(i, j);
                    assert!(
                        (numeric - analytic).abs() < 1e-6,
                        "{kind:?} ({i},{j}): numeric {numeric} analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn init_weights_deterministic_and_seed_sensitive() {
        let spec = LayerSpec::dense(5, 4, Activation::ReLU);
        let a: DenseLayer<f32> = init_weights(&spec, 42);
        let b: DenseLayer<f32> = init_weights(&spec, 42);
        assert_eq!(a, b);
        let c: DenseLayer<f32> = init_weights(&spec, 43);
        assert_ne!(a.weights, c.weights);
        assert!(a.biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weights_sample_mean_near_zero() {
        let spec = LayerSpec::dense(1000, 1000, Activation::Identity);
        let layer: DenseLayer<f64> = init_weights(&spec, 7);
        let mean: f64 = layer.weights.as_slice().iter().sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let bound = 1.0 / 1000.0_f64.sqrt();
        assert!(layer.weights.as_slice().iter().all(|v| v.abs() < bound));
    }
}
