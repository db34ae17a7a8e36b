//! Dense feed-forward regression network with hand-written backpropagation.
//!
//! Hidden layers apply ReLU; the output layer is affine. Weights are stored
//! per layer with shape `(out_dim, in_dim)`, so a layer computes
//! `z = W a + b`. The loss is the mean absolute error, whose subgradient at
//! zero error is taken to be zero.
//!
//! Two evaluation paths exist: [`forward`]/[`backward`] work on one sample and
//! keep every intermediate vector, while [`forward_batch`]/[`backward_batch`]
//! process a row-major mini-batch with matrix products and are what the
//! trainer uses.

mod adam;

pub use adam::{adam_step, adam_step_masked, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Layer widths used for shaft-power regression: 7 inputs, three hidden layers, one output.
pub const DEFAULT_ARCHITECTURE: [usize; 5] = [7, 128, 64, 32, 1];

/// Network parameters: one weight matrix and bias vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer_dims needs at least an input and an output width, got {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!(
            "every layer width must be >= 1, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// All-zero parameters for the given architecture.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds parameters from explicit tensors, inferring and validating the layer widths.
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *layer_dims.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but the previous layer has {} outputs",
                    w.ncols(),
                    layer_dims.last().unwrap()
                )));
            }
            if b.len() != w.nrows() {
                return Err(Error::Shape(format!(
                    "layer {i} bias has length {} but weights have {} rows",
                    b.len(),
                    w.nrows()
                )));
            }
            layer_dims.push(w.nrows());
        }
        check_dims(&layer_dims)?;
        let params = Self {
            layer_dims,
            weights,
            biases,
        };
        if !params.is_finite() {
            return Err(Error::Numerical("parameters contain NaN or Inf".into()));
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// True when layer `layer` has bit-identical weights and biases in both parameter sets.
    pub fn layer_bits_equal(&self, other: &Self, layer: usize) -> bool {
        let bits_eq = |x: &f64, y: &f64| x.to_bits() == y.to_bits();
        let (wa, wb) = (&self.weights[layer], &other.weights[layer]);
        let (ba, bb) = (&self.biases[layer], &other.biases[layer]);
        wa.dim() == wb.dim()
            && ba.len() == bb.len()
            && wa.iter().zip(wb.iter()).all(|(x, y)| bits_eq(x, y))
            && ba.iter().zip(bb.iter()).all(|(x, y)| bits_eq(x, y))
    }

    /// Re-draws one layer with the Glorot-uniform scheme and zero biases.
    pub fn reinit_layer(&mut self, layer: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer as u64 + 1);
        glorot_fill(&mut self.weights[layer], &mut rng);
        self.biases[layer].fill(0.0);
    }
}

fn glorot_fill(w: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let (fan_out, fan_in) = w.dim();
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

/// Glorot-uniform weights, zero biases; the same seed always yields the same parameters.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in &mut params.weights {
        glorot_fill(w, &mut rng);
    }
    Ok(params)
}

/// Every intermediate of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `z` of each layer.
    pub pre_activations: Vec<Array1<f64>>,
    /// Input followed by each layer's output; the last entry is the (linear) network output.
    pub activations: Vec<Array1<f64>>,
    pub prediction: f64,
}

/// Per-parameter derivatives, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            d_weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            d_biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.d_biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn is_congruent(&self, params: &MlpParams) -> bool {
        self.d_weights.len() == params.weights.len()
            && self.d_biases.len() == params.biases.len()
            && self.d_weights.iter().zip(&params.weights).all(|(g, w)| g.dim() == w.dim())
            && self.d_biases.iter().zip(&params.biases).all(|(g, b)| g.len() == b.len())
    }

    /// `self += scale * other`
    pub fn scaled_add(&mut self, scale: f64, other: &Gradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            a.scaled_add(scale, b);
        }
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Subgradient of `|e|` with the zero-error convention `sign(0) = 0`.
#[inline]
fn abs_subgradient(error: f64) -> f64 {
    if error > 0.0 {
        1.0
    } else if error < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("input contains NaN or Inf".into()));
    }
    let last = params.num_layers() - 1;
    let mut activations = vec![Array1::from(x.to_vec())];
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    for (i, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let z = w.dot(activations.last().unwrap()) + b;
        let a = if i == last { z.clone() } else { z.mapv(relu) };
        pre_activations.push(z);
        activations.push(a);
    }
    let prediction = pre_activations[last][0];
    if !prediction.is_finite() {
        return Err(Error::Numerical("forward pass produced a non-finite output".into()));
    }
    Ok(ForwardTrace {
        pre_activations,
        activations,
        prediction,
    })
}

/// Mean absolute error between predictions and targets.
pub fn mae_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    crate::metrics::mae(targets, predictions)
}

/// Gradient of `|prediction - target|` for one sample.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, target: f64) -> Result<Gradients> {
    let n_layers = params.num_layers();
    if trace.pre_activations.len() != n_layers || trace.activations.len() != n_layers + 1 {
        return Err(Error::Shape("trace does not match the network depth".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut delta = Array1::from_elem(1, abs_subgradient(trace.prediction - target));
    for i in (0..n_layers).rev() {
        let a_prev = &trace.activations[i];
        if a_prev.len() != params.layer_dims[i] {
            return Err(Error::Shape(format!("trace activation {i} has the wrong width")));
        }
        for (r, &d) in delta.iter().enumerate() {
            grads.d_weights[i].row_mut(r).scaled_add(d, a_prev);
        }
        grads.d_biases[i].assign(&delta);
        if i > 0 {
            let back = params.weights[i].t().dot(&delta);
            let z_prev = &trace.pre_activations[i - 1];
            delta = Array1::from_iter(
                back.iter()
                    .zip(z_prev)
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 }),
            );
        }
    }
    Ok(grads)
}

/// Intermediates of a mini-batch forward pass; rows are samples.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub pre_activations: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
}

impl BatchCache {
    pub fn predictions(&self) -> Vec<f64> {
        self.pre_activations.last().unwrap().column(0).to_vec()
    }
}

pub fn forward_batch(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<BatchCache> {
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let last = params.num_layers() - 1;
    let mut activations = vec![x.to_owned()];
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    for (i, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let z = activations.last().unwrap().dot(&w.t()) + b;
        if i == last {
            activations.push(z.clone());
        } else {
            activations.push(z.mapv(relu));
        }
        pre_activations.push(z);
    }
    Ok(BatchCache {
        pre_activations,
        activations,
    })
}

/// Network outputs for every row of `x`, evaluated in bounded-size chunks.
pub fn predict_batch(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    const CHUNK: usize = 4096;
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let chunk = x.slice(ndarray::s![start..end, ..]);
        out.extend(forward_batch(params, chunk)?.predictions());
        start = end;
    }
    Ok(out)
}

/// Mean-over-batch MAE gradient. Layers with `trainable[i] == false` get zero
/// gradients, and backpropagation stops below the lowest trainable layer.
/// Returns the gradients together with the batch MAE.
pub fn backward_batch(
    params: &MlpParams,
    cache: &BatchCache,
    targets: &[f64],
    trainable: &[bool],
) -> Result<(Gradients, f64)> {
    let n_layers = params.num_layers();
    if trainable.len() != n_layers {
        return Err(Error::Shape(format!(
            "freeze mask has {} entries for {} layers",
            trainable.len(),
            n_layers
        )));
    }
    let output = cache.pre_activations.last().unwrap();
    let batch = output.nrows();
    if batch == 0 || targets.len() != batch {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {} rows",
            targets.len(),
            batch
        )));
    }
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut delta = Array2::zeros((batch, 1));
    for (r, &y) in targets.iter().enumerate() {
        let err = output[[r, 0]] - y;
        loss += err.abs();
        delta[[r, 0]] = abs_subgradient(err) * inv;
    }
    loss *= inv;

    let mut grads = Gradients::zeros_like(params);
    let Some(lowest) = trainable.iter().position(|&t| t) else {
        return Ok((grads, loss));
    };
    for i in (lowest..n_layers).rev() {
        if trainable[i] {
            grads.d_weights[i] = delta.t().dot(&cache.activations[i]);
            grads.d_biases[i] = delta.sum_axis(Axis(0));
        }
        if i > lowest {
            let mut back = delta.dot(&params.weights[i]);
            ndarray::Zip::from(&mut back)
                .and(&cache.pre_activations[i - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = back;
        }
    }
    Ok((grads, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent evaluation with explicit loops.
    fn naive_predict(params: &MlpParams, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let last = params.num_layers() - 1;
        for (i, (w, b)) in params.weights().iter().zip(params.biases()).enumerate() {
            let mut z = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                let mut s = b[r];
                for c in 0..w.ncols() {
                    s += w[[r, c]] * a[c];
                }
                z[r] = if i == last { s } else { s.max(0.0) };
            }
            a = z;
        }
        a[0]
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&[2, 3, 1], 42).unwrap();
        let b = init_params(&[2, 3, 1], 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&[2, 3, 1], 43).unwrap());
    }

    #[test]
    fn default_architecture_shapes() {
        let p = init_params(&DEFAULT_ARCHITECTURE, 0).unwrap();
        let shapes: Vec<_> = p.weights().iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(128, 7), (64, 128), (32, 64), (1, 32)]);
        assert_eq!(p.biases().iter().map(|b| b.len()).collect::<Vec<_>>(), vec![128, 64, 32, 1]);
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_glorot_bound() {
        let p = init_params(&[2, 3, 1], 42).unwrap();
        assert!(p.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(p.weights()[0].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn bad_layer_dims_rejected() {
        assert!(matches!(init_params(&[], 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[3, 0, 1], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_predicts_zero() {
        let p = MlpParams::zeros(&[3, 4, 1]).unwrap();
        assert_eq!(forward(&p, &[1.0, -5.0, 3.0]).unwrap().prediction, 0.0);
    }

    #[test]
    fn affine_single_layer() {
        let p = MlpParams::from_parts(vec![array![[1.0, 1.0]]], vec![array![0.5]]).unwrap();
        assert_eq!(forward(&p, &[1.0, 2.0]).unwrap().prediction, 3.5);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_params(&[3, 4, 1], 11).unwrap();
        for _ in 0..50 {
            let x = random_vec(&mut rng, 3);
            let got = forward(&p, &x).unwrap().prediction;
            let want = naive_predict(&p, &x);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(&[3, 4, 1], 0).unwrap();
        assert!(matches!(forward(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn trace_layout() {
        let p = init_params(&[3, 5, 4, 1], 3).unwrap();
        let x = [0.3, -0.2, 1.5];
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.activations[0].to_vec(), x.to_vec());
        assert_eq!(t.prediction, t.pre_activations.last().unwrap()[0]);
        for a in &t.activations[1..t.activations.len() - 1] {
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let p = init_params(&[3, 4, 1], 5).unwrap();
        let t = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let g = backward(&p, &t, t.prediction).unwrap();
        assert!(g.d_weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.d_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_bias_gradient_is_error_sign() {
        let p = init_params(&[3, 4, 1], 5).unwrap();
        let t = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let over = backward(&p, &t, t.prediction - 1.0).unwrap();
        assert_eq!(over.d_biases.last().unwrap()[0], 1.0);
        let under = backward(&p, &t, t.prediction + 1.0).unwrap();
        assert_eq!(under.d_biases.last().unwrap()[0], -1.0);
    }

    #[test]
    fn mae_loss_examples() {
        assert_eq!(mae_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!(mae_loss(&[], &[]).is_err());
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = init_params(&[4, 6, 5, 1], 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..9).map(|_| random_vec(&mut rng, 4)).collect();
        let targets = random_vec(&mut rng, 9);
        let x = Array2::from_shape_fn((9, 4), |(r, c)| rows[r][c]);

        let mut mean = Gradients::zeros_like(&p);
        let mut loss = 0.0;
        for (row, &y) in rows.iter().zip(&targets) {
            let t = forward(&p, row).unwrap();
            loss += (t.prediction - y).abs() / 9.0;
            mean.scaled_add(1.0 / 9.0, &backward(&p, &t, y).unwrap());
        }
        let cache = forward_batch(&p, x.view()).unwrap();
        let (g, batch_loss) = backward_batch(&p, &cache, &targets, &[true; 3]).unwrap();
        assert!((batch_loss - loss).abs() < 1e-12);
        for (a, b) in g.d_weights.iter().zip(&mean.d_weights) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        for (a, b) in g.d_biases.iter().zip(&mean.d_biases) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn frozen_layers_get_zero_batch_gradient() {
        let p = init_params(&[3, 5, 4, 1], 1).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(r, c)| (r * 3 + c) as f64 * 0.1 - 0.4);
        let cache = forward_batch(&p, x.view()).unwrap();
        let (g, _) = backward_batch(&p, &cache, &[5.0; 4], &[false, false, true]).unwrap();
        assert!(g.d_weights[0].iter().chain(g.d_weights[1].iter()).all(|&v| v == 0.0));
        assert!(g.d_weights[2].iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn predict_batch_matches_single_sample(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = init_params(&[5, 7, 3, 1], seed).unwrap();
            let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-3.0..3.0));
            let batch = predict_batch(&p, x.view()).unwrap();
            for (r, &b) in batch.iter().enumerate() {
                let single = forward(&p, x.row(r).as_slice().unwrap()).unwrap().prediction;
                prop_assert!((b - single).abs() <= 1e-12 * single.abs().max(1.0));
            }
        }
    }
}
