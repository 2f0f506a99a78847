//! Dense feed-forward regression networks with hand-written reverse mode
//! gradients, inverted dropout, batch normalization and Adam.
//!
//! Layer `l` computes `z = a W + b`, optionally batch-normalizes `z`, then
//! (hidden layers only) applies the activation and dropout. The final layer
//! is linear.

mod adam;
mod gradcheck;
mod persist;
mod schedule;
mod train;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use gradcheck::{compare_gradients, grad_check, relative_error};
pub use persist::MLP_FORMAT;
pub use schedule::{EpochRecord, ScheduleTracker, TrainHistory, TrainSchedule, Verdict};
pub use train::{fit_with_schedule, run_epoch, train};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed in terms of the pre-activation value.
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - v.tanh().powi(2),
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Output width of every dense layer, last one included.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Drop probability applied after each hidden layer.
    pub dropout_prob: f64,
    pub use_batchnorm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl MlpConfig {
    /// The winning drug-response architecture: 1500-1000-600-300-100-50-1
    /// ReLU layers, 10% dropout, Adam at 1e-4, batches of 256.
    pub fn drug_response(input_dim: usize) -> Self {
        Self {
            input_dim,
            layer_sizes: vec![1500, 1000, 600, 300, 100, 50, 1],
            activation: Activation::Relu,
            dropout_prob: 0.1,
            use_batchnorm: false,
            learning_rate: 1e-4,
            batch_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be non-empty and positive, got {:?}",
                self.layer_sizes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout on, batch statistics for batchnorm.
    Train,
    /// Deterministic: dropout off, running statistics.
    Eval,
    /// Dropout on, running statistics.
    McDropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `inputs × outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub batchnorm: Option<BatchNorm>,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// `Some((mean, biased var))` when batch statistics were used.
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    bn: Option<BnCache>,
    mask: Option<Array2<f64>>,
}

/// Activations retained by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: ForwardMode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.nrows())
    }
}

/// Parameter gradients in [`MlpModel::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl MlpModel {
    /// He-uniform weights, zero biases, identity batchnorm.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layer_sizes.len());
        let mut fan_in = config.input_dim;
        let n = config.layer_sizes.len();
        for (l, &width) in config.layer_sizes.iter().enumerate() {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let weights = Array2::from_shape_fn((fan_in, width), |_| rng.random_range(-bound..bound));
            let hidden = l + 1 < n;
            layers.push(Dense {
                weights,
                bias: Array1::zeros(width),
                batchnorm: (hidden && config.use_batchnorm).then(|| BatchNorm::new(width)),
            });
            fan_in = width;
        }
        Ok(Self { config, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Flat parameter views: per layer weights, bias, then gamma and beta
    /// when the layer is batch-normalized.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weights.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
            if let Some(bn) = &layer.batchnorm {
                out.push(bn.gamma.as_slice().expect("standard layout"));
                out.push(bn.beta.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut layer.batchnorm {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Runs the network on a `batch × input_dim` matrix. `seed` drives the
    /// dropout masks; it is ignored in eval mode.
    pub fn forward(&self, x: &Array2<f64>, mode: ForwardMode, seed: u64) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - self.config.dropout_prob;
        let dropout = mode != ForwardMode::Eval && self.config.dropout_prob > 0.0;
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights) + &layer.bias;
            let bn = layer.batchnorm.as_ref().map(|bn| {
                let (mean, var, batch_stats) = if mode == ForwardMode::Train {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = (&z - &mean).mapv(|d| d * d).mean_axis(Axis(0)).expect("non-empty batch");
                    (mean.clone(), var.clone(), Some((mean, var)))
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone(), None)
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = (&z - &mean) * &inv_std;
                z = &xhat * &bn.gamma + &bn.beta;
                BnCache {
                    xhat,
                    inv_std,
                    batch_stats,
                }
            });
            let input = std::mem::take(&mut a);
            if l == last {
                a = z.clone();
                caches.push(LayerCache {
                    input,
                    pre_activation: z,
                    bn,
                    mask: None,
                });
            } else {
                let act = self.config.activation;
                let mut h = z.mapv(|v| act.apply(v));
                let mask = dropout.then(|| {
                    let m = Array2::from_shape_fn(h.dim(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    m
                });
                a = h;
                caches.push(LayerCache {
                    input,
                    pre_activation: z,
                    bn,
                    mask,
                });
            }
        }
        Ok((a, ForwardCache { mode, layers: caches }))
    }

    /// Eval-mode outputs, all columns.
    pub fn outputs(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, ForwardMode::Eval, 0)?.0)
    }

    /// Eval-mode scalar predictions (first output column).
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.outputs(x)?.column(0).to_owned())
    }

    pub fn predict_one(&self, x: ArrayView1<f64>) -> Result<f64> {
        let batch = x.to_owned().insert_axis(Axis(0));
        Ok(self.predict(&batch)?[0])
    }

    /// Reverse-mode gradients of a loss whose gradient with respect to the
    /// network outputs is `grad_output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<Gradients> {
        let out_dim = (cache.batch_size(), self.output_dim());
        if cache.layers.len() != self.layers.len() || grad_output.dim() != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match forward pass {:?}",
                grad_output.dim(),
                out_dim
            )));
        }
        let last = self.layers.len() - 1;
        let act = self.config.activation;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lc = &cache.layers[l];
            if l != last {
                if let Some(mask) = &lc.mask {
                    g *= mask;
                }
                Zip::from(&mut g)
                    .and(&lc.pre_activation)
                    .for_each(|g, &z| *g *= act.derivative(z));
            }
            let mut bn_grads = None;
            if let (Some(bc), Some(bn)) = (&lc.bn, &layer.batchnorm) {
                let dgamma = (&g * &bc.xhat).sum_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0));
                let dxhat = &g * &bn.gamma;
                g = if bc.batch_stats.is_some() {
                    let b = g.nrows() as f64;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                    ((&dxhat * b - &sum_d) - &bc.xhat * &sum_dx) * &bc.inv_std / b
                } else {
                    dxhat * &bc.inv_std
                };
                bn_grads = Some((dgamma, dbeta));
            }
            let dw = lc.input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            if l > 0 {
                g = g.dot(&layer.weights.t());
            }
            let mut tensors = vec![flat2(dw), db.to_vec()];
            if let Some((dgamma, dbeta)) = bn_grads {
                tensors.push(dgamma.to_vec());
                tensors.push(dbeta.to_vec());
            }
            per_layer.push(tensors);
        }
        Ok(Gradients(per_layer.into_iter().rev().flatten().collect()))
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(BnCache {
                batch_stats: Some((mean, var)),
                ..
            })) = (&mut layer.batchnorm, &lc.bn)
            {
                let b = lc.input.nrows() as f64;
                let unbiased = if b > 1.0 { var * (b / (b - 1.0)) } else { var.clone() };
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn flat2(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

/// Mean squared error over the first output column.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mse;

/// Maps network outputs and targets to a scalar loss and its gradient with
/// respect to the outputs.
pub trait Objective {
    fn loss_and_grad(&self, outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<(f64, Array2<f64>)>;

    fn loss(&self, outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<f64> {
        Ok(self.loss_and_grad(outputs, targets)?.0)
    }
}

impl Objective for Mse {
    fn loss_and_grad(&self, outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<(f64, Array2<f64>)> {
        let loss = loss_mse(outputs, targets)?;
        let n = targets.len() as f64;
        let mut grad = Array2::zeros(outputs.dim());
        for (i, &t) in targets.iter().enumerate() {
            grad[[i, 0]] = 2.0 * (outputs[[i, 0]] - t) / n;
        }
        Ok((loss, grad))
    }

    fn loss(&self, outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<f64> {
        loss_mse(outputs, targets)
    }
}

pub fn loss_mse(outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    if outputs.nrows() != targets.len() || outputs.ncols() == 0 || targets.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "outputs {:?} vs {} targets",
            outputs.dim(),
            targets.len()
        )));
    }
    let loss = outputs
        .column(0)
        .iter()
        .zip(targets)
        .map(|(o, t)| (o - t).powi(2))
        .sum::<f64>()
        / targets.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("mse loss {loss}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn config(input: usize, sizes: &[usize], act: Activation) -> MlpConfig {
        MlpConfig {
            input_dim: input,
            layer_sizes: sizes.to_vec(),
            activation: act,
            dropout_prob: 0.0,
            use_batchnorm: false,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 1,
        }
    }

    fn batch(n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 6.0 - 1.0)
    }

    #[test]
    fn dropout_off_train_equals_eval() {
        let m = MlpModel::new(config(3, &[8, 4, 1], Activation::Relu)).unwrap();
        let x = batch(5, 3);
        let (a, _) = m.forward(&x, ForwardMode::Train, 3).unwrap();
        let (b, _) = m.forward(&x, ForwardMode::Eval, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut m = MlpModel::new(config(3, &[3], Activation::Relu)).unwrap();
        m.layers[0].weights = Array2::eye(3);
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(m.outputs(&x).unwrap(), x);
    }

    #[test]
    fn mc_dropout_is_seeded() {
        let mut cfg = config(3, &[16, 1], Activation::Relu);
        cfg.dropout_prob = 0.3;
        let m = MlpModel::new(cfg).unwrap();
        let x = batch(4, 3);
        let a = m.forward(&x, ForwardMode::McDropout, 5).unwrap().0;
        let b = m.forward(&x, ForwardMode::McDropout, 5).unwrap().0;
        let c = m.forward(&x, ForwardMode::McDropout, 6).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, m.outputs(&x).unwrap());
    }

    #[test]
    fn mc_dropout_uses_running_batchnorm_stats() {
        let mut cfg = config(2, &[4, 1], Activation::Relu);
        cfg.use_batchnorm = true;
        let mut m = MlpModel::new(cfg).unwrap();
        let bn = m.layers[0].batchnorm.as_mut().unwrap();
        bn.running_mean.fill(0.3);
        bn.running_var.fill(2.0);
        // With no dropout, mc_dropout must agree with eval, not train.
        let x = batch(6, 2);
        let mc = m.forward(&x, ForwardMode::McDropout, 1).unwrap().0;
        assert_eq!(mc, m.outputs(&x).unwrap());
        assert_ne!(mc, m.forward(&x, ForwardMode::Train, 1).unwrap().0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = MlpModel::new(config(3, &[1], Activation::Relu)).unwrap();
        assert!(m.forward(&batch(2, 4), ForwardMode::Eval, 0).is_err());
        let (_, cache) = m.forward(&batch(2, 3), ForwardMode::Eval, 0).unwrap();
        assert!(m.backward(&cache, &Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let m = MlpModel::new(config(2, &[1], Activation::Identity)).unwrap();
        let x = batch(4, 2);
        let (out, cache) = m.forward(&x, ForwardMode::Train, 0).unwrap();
        let (loss, g) = Mse.loss_and_grad(&out, out.column(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(m.backward(&cache, &g).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn single_weight_gradient() {
        let mut m = MlpModel::new(config(1, &[1], Activation::Identity)).unwrap();
        m.layers[0].weights[[0, 0]] = 2.0;
        let x = array![[1.0]];
        let (out, cache) = m.forward(&x, ForwardMode::Train, 0).unwrap();
        let (loss, g) = Mse.loss_and_grad(&out, array![0.0].view()).unwrap();
        assert_eq!(loss, 4.0);
        let grads = m.backward(&cache, &g).unwrap();
        assert_eq!(grads.0[0], vec![4.0]);
    }

    #[test]
    fn parameter_order_matches_gradients() {
        let mut cfg = config(3, &[5, 2], Activation::Tanh);
        cfg.use_batchnorm = true;
        let m = MlpModel::new(cfg).unwrap();
        let (out, cache) = m.forward(&batch(4, 3), ForwardMode::Train, 0).unwrap();
        let g = m.backward(&cache, &Array2::ones(out.dim())).unwrap();
        let shapes: Vec<usize> = m.parameters().iter().map(|p| p.len()).collect();
        assert_eq!(shapes, vec![15, 5, 5, 5, 10, 2]);
        assert_eq!(g.0.iter().map(Vec::len).collect::<Vec<_>>(), shapes);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut cfg = config(2, &[3, 1], Activation::Relu);
        cfg.use_batchnorm = true;
        let mut m = MlpModel::new(cfg).unwrap();
        let x = batch(8, 2) * 5.0 + 3.0;
        let (_, cache) = m.forward(&x, ForwardMode::Train, 0).unwrap();
        m.update_running_stats(&cache);
        let z = x.dot(&m.layers[0].weights) + &m.layers[0].bias;
        let mean = z.mean_axis(Axis(0)).unwrap();
        let bn = m.layers[0].batchnorm.as_ref().unwrap();
        for j in 0..3 {
            assert!((bn.running_mean[j] - 0.1 * mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = config(2, &[3, 1], Activation::Relu);
        cfg.dropout_prob = 1.0;
        assert!(MlpModel::new(cfg.clone()).is_err());
        cfg.dropout_prob = 0.1;
        cfg.layer_sizes = vec![3, 0];
        assert!(MlpModel::new(cfg).is_err());
    }

    #[test]
    fn drug_response_architecture() {
        let cfg = MlpConfig::drug_response(2173);
        assert_eq!(cfg.layer_sizes, [1500, 1000, 600, 300, 100, 50, 1]);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.dropout_prob, 0.1);
    }
}
