//! Training-engine properties: composition of split forwards, one-step
//! split/monolithic agreement, the zero-learning-rate fixpoint, and loss
//! positivity.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitchain_core::matrix::Matrix;
use splitchain_core::nn::{
    derive_layer_seed, init_weights, loss_gradient, loss_mse, ActivationBatch, Activation,
    DenseLayer, GradientBatch, LabelBatch, LayerSpec, LossKind, SplitNetwork,
};

fn random_specs(rng: &mut ChaCha8Rng, max_layers: usize, max_width: usize) -> Vec<LayerSpec> {
    let layers = rng.gen_range(1..=max_layers);
    let mut widths = vec![rng.gen_range(1..=max_width)];
    for _ in 0..layers {
        widths.push(rng.gen_range(1..=max_width));
    }
    let activations = [
        Activation::ReLU,
        Activation::Sigmoid,
        Activation::Identity,
        Activation::Softmax,
    ];
    widths
        .windows(2)
        .map(|w| LayerSpec::dense(w[0], w[1], activations[rng.gen_range(0..activations.len())]))
        .collect()
}

fn layers_for(specs: &[LayerSpec], seed: u64) -> Vec<DenseLayer<f64>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| init_weights(s, derive_layer_seed(seed, i)))
        .collect()
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Splitting a network at any cut point never changes the forward pass.
    #[test]
    fn forward_composes_across_any_cut(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = random_specs(&mut rng, 4, 8);
        let layers = layers_for(&specs, seed);
        let batch = ActivationBatch::new(random_batch(&mut rng, 3, specs[0].input_width), 0, 0);

        let mut whole = SplitNetwork::new(layers.clone()).unwrap();
        let expected = whole.forward(&batch).unwrap();

        for cut in 1..layers.len() {
            let mut head = SplitNetwork::new(layers[..cut].to_vec()).unwrap();
            let mut tail = SplitNetwork::new(layers[cut..].to_vec()).unwrap();
            let mid = head.forward(&batch).unwrap();
            let out = tail.forward(&mid).unwrap();
            prop_assert_eq!(&out.values, &expected.values, "cut at {}", cut);
        }
    }

    /// One SGD step through two chained slices equals one step on the
    /// concatenated network, within 1e-9 on every parameter.
    #[test]
    fn one_step_split_equals_monolithic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = random_specs(&mut rng, 4, 8);
        if specs.len() < 2 {
            return Ok(());
        }
        let layers = layers_for(&specs, seed);
        let out_width = specs.last().unwrap().output_width;
        let batch = ActivationBatch::new(random_batch(&mut rng, 4, specs[0].input_width), 0, 0);
        let upstream = GradientBatch::new(random_batch(&mut rng, 4, out_width), 0, 0);
        let lr = 0.05;

        let mut whole = SplitNetwork::new(layers.clone()).unwrap();
        whole.forward(&batch).unwrap();
        let whole_input_grad = whole.backward(&upstream, lr).unwrap();

        let cut = specs.len() / 2;
        let mut head = SplitNetwork::new(layers[..cut].to_vec()).unwrap();
        let mut tail = SplitNetwork::new(layers[cut..].to_vec()).unwrap();
        let mid = head.forward(&batch).unwrap();
        tail.forward(&mid).unwrap();
        let handoff = tail.backward(&upstream, lr).unwrap();
        let split_input_grad = head.backward(&handoff, lr).unwrap();

        let split_layers: Vec<&DenseLayer<f64>> =
            head.layers().iter().chain(tail.layers()).collect();
        for (w, s) in whole.layers().iter().zip(split_layers) {
            for (a, b) in w.weights.as_slice().iter().zip(s.weights.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9, "weight {a} vs {b}");
            }
            for (a, b) in w.biases.iter().zip(&s.biases) {
                prop_assert!((a - b).abs() < 1e-9, "bias {a} vs {b}");
            }
        }
        for (a, b) in whole_input_grad
            .values
            .as_slice()
            .iter()
            .zip(split_input_grad.values.as_slice())
        {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    /// Zero learning rate leaves every parameter untouched, step after step.
    #[test]
    fn zero_learning_rate_is_a_fixpoint(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = random_specs(&mut rng, 3, 6);
        let layers = layers_for(&specs, seed);
        let mut net = SplitNetwork::new(layers.clone()).unwrap();
        let out_width = specs.last().unwrap().output_width;
        for _ in 0..3 {
            let batch = ActivationBatch::new(random_batch(&mut rng, 2, specs[0].input_width), 0, 0);
            let upstream = GradientBatch::new(random_batch(&mut rng, 2, out_width), 0, 0);
            net.forward(&batch).unwrap();
            net.backward(&upstream, 0.0).unwrap();
        }
        prop_assert_eq!(net.layers(), &layers[..]);
    }

    /// Mean squared error is non-negative and zero exactly at equality.
    #[test]
    fn mse_is_positive_definite(
        rows in 1usize..4,
        cols in 1usize..4,
        cells in prop::collection::vec(-10.0f64..10.0, 18),
    ) {
        let predicted = Matrix::from_vec(rows, cols, cells[..rows * cols].to_vec());
        let actual = Matrix::from_vec(rows, cols, cells[rows * cols..2 * rows * cols].to_vec());
        let loss = loss_mse(
            &ActivationBatch::new(predicted.clone(), 0, 0),
            &LabelBatch::new(actual.clone()),
        )
        .unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, predicted == actual);

        let self_loss = loss_mse(
            &ActivationBatch::new(predicted.clone(), 0, 0),
            &LabelBatch::new(predicted),
        )
        .unwrap();
        prop_assert_eq!(self_loss, 0.0);
    }
}

/// Every parameter gradient agrees with a central finite difference of the
/// loss, evaluated through the inference path that never touches the
/// backward code.
#[test]
fn gradients_match_finite_differences_on_random_networks() {
    let h = 1e-5;
    let rel_tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(90210);
    for case in 0..12 {
        let specs = random_specs(&mut rng, 3, 8);
        let mut net = SplitNetwork::new(layers_for(&specs, 1000 + case)).unwrap();
        let rows = rng.gen_range(1..4);
        let input = random_batch(&mut rng, rows, specs[0].input_width);
        let out_width = specs.last().unwrap().output_width;
        let kind = if case % 2 == 0 { LossKind::Mse } else { LossKind::CrossEntropySoftmax };
        let mut labels = Matrix::zeros(rows, out_width);
        for r in 0..rows {
            labels.set(r, rng.gen_range(0..out_width), 1.0);
        }
        let labels = LabelBatch::new(labels);

        let batch = ActivationBatch::new(input.clone(), 0, 0);
        let output = net.forward(&batch).unwrap();
        let upstream = loss_gradient(kind, &output, &labels).unwrap();
        let (_, grads) = net.backward_gradients(&upstream).unwrap();

        let loss_at = |net: &SplitNetwork<f64>| -> f64 {
            let out = net.forward_inference(&input).unwrap();
            splitchain_core::nn::loss_value(kind, &ActivationBatch::new(out, 0, 0), &labels).unwrap()
        };

        for (li, grad) in grads.iter().enumerate() {
            for wi in 0..grad.weights.as_slice().len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                {
                    let l = &mut plus.network_layer(li).weights;
                    l.as_mut_slice()[wi] += h;
                }
                {
                    let l = &mut minus.network_layer(li).weights;
                    l.as_mut_slice()[wi] -= h;
                }
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = grad.weights.as_slice()[wi];
                let scale = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (numeric - analytic).abs() / scale < rel_tol,
                    "case {case} layer {li} weight {wi}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }
}

/// Test-only access to a mutable layer.
trait LayerAccess {
    fn network_layer(&mut self, i: usize) -> &mut DenseLayer<f64>;
}

impl LayerAccess for SplitNetwork<f64> {
    fn network_layer(&mut self, i: usize) -> &mut DenseLayer<f64> {
        &mut self.layers_mut()[i]
    }
}
