//! Fully connected ReLU regressor whose penultimate activations serve as the
//! fixed feature map for the ridge head.
//!
//! The network is `x → [Linear → ReLU] × H → Linear → ŷ`. Its output factors
//! exactly as `ŷ = φ(x)ᵀ[w_NN; b_NN]` where `φ(x)` is the last hidden
//! activation with a constant 1 appended.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GroupedDataset;
use crate::linalg::{dot, DenseMatrix};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("training loss became non-finite at epoch {epoch} (learning rate {learning_rate})")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("input dimension {found} does not match model input {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![100, 100, 50],
            activation: Activation::Relu,
            max_epochs: 500,
            patience: 20,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Config(m.to_string()));
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be non-empty with positive widths");
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return bad("patience must be positive and smaller than max_epochs");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }
}

/// Parameter gradients, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Fan-in scaled uniform initialization: `U(±√(6/fan_in))` for ReLU
    /// layers and `U(±√(3/fan_in))` for the linear output; biases start at 0.
    pub fn new(input_dim: usize, hidden_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_sizes);
        dims.push(1);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let gain = if l + 1 == n_layers { 3.0 } else { 6.0 };
                let limit = (gain / fan_in.max(1) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, FeatureError> {
        if layers.len() < 2 {
            return Err(FeatureError::Config(
                "need at least one hidden layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(FeatureError::Config("layer shapes do not chain".into()));
            }
        }
        let last = layers.last().expect("non-empty");
        if last.out_dim() != 1 {
            return Err(FeatureError::Config(
                "output layer must have width 1".into(),
            ));
        }
        if layers.iter().any(|l| l.bias.len() != l.out_dim()) {
            return Err(FeatureError::Config("bias length mismatch".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the last hidden layer.
    pub fn hidden_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim()
    }

    /// Penultimate activations (`batch × hidden_dim`).
    pub fn hidden(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (hidden, _) = self.layers.split_at(self.layers.len() - 1);
        let mut a = x.to_owned();
        for layer in hidden {
            a = layer.forward(&a.view());
            a.mapv_inplace(relu);
        }
        if a.is_standard_layout() {
            a
        } else {
            a.as_standard_layout().into_owned()
        }
    }

    /// Final-layer weights `w_NN`.
    pub fn output_weights(&self) -> Vec<f64> {
        self.layers
            .last()
            .expect("non-empty")
            .weights
            .row(0)
            .to_vec()
    }

    /// Final-layer bias `b_NN`.
    pub fn output_bias(&self) -> f64 {
        self.layers.last().expect("non-empty").bias[0]
    }

    /// Network outputs, computed as `φ(x)·w_NN + b_NN`.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Vec<f64> {
        let h = self.hidden(x);
        let w = self.output_weights();
        let b = self.output_bias();
        h.rows()
            .into_iter()
            .map(|row| dot(row.as_slice().expect("standard layout"), &w) + b)
            .collect()
    }

    /// Mean squared error `(1/B)·Σ(ŷ − y)²` and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &ArrayView2<f64>, y: &[f64]) -> (f64, Gradients) {
        let batch = x.nrows();
        let n_layers = self.layers.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&acts[l].view());
            if l + 1 < n_layers {
                z.mapv_inplace(relu);
            }
            acts.push(z);
        }
        let out = &acts[n_layers];
        let scale = 2.0 / batch as f64;
        let mut loss = 0.0;
        let mut delta = Array2::zeros((batch, 1));
        for i in 0..batch {
            let r = out[[i, 0]] - y[i];
            loss += r * r;
            delta[[i, 0]] = scale * r;
        }
        loss /= batch as f64;

        let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let a_prev = &acts[l];
            let weights = delta.t().dot(a_prev);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].weights);
                // ReLU derivative from the stored post-activation.
                ndarray::Zip::from(&mut next).and(a_prev).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
            grads.push(Layer { weights, bias });
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    pub fn mse(&self, x: &ArrayView2<f64>, y: &[f64]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let pred = self.predict(x);
        pred.iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / y.len() as f64
    }

    /// Binary checkpoint, little endian:
    /// `b"PARISMLP"`, `u32` version (1), `u32` layer count, then per layer
    /// `u32 out`, `u32 in`, `out·in` weights row-major as `f64`, `out` biases.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
            w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FeatureError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(FeatureError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let n_layers = read_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let out = read_u32(&mut r)? as usize;
            let inp = read_u32(&mut r)? as usize;
            let weights = (0..out * inp)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            let bias = (0..out)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((out, inp), weights)
                    .map_err(|e| FeatureError::Checkpoint(e.to_string()))?,
                bias: Array1::from(bias),
            });
        }
        Mlp::from_layers(layers)
    }

    /// All parameters, layer by layer, each layer's weights (row-major)
    /// before its biases. Gradients iterate in the same order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .copied()
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) {
        assert_eq!(
            values.len(),
            self.n_parameters(),
            "parameter count mismatch"
        );
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PARISMLP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, FeatureError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}

/// First/second moment state for the adaptive-moment update.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    fn update(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .params_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Validation MSE per epoch; entry 0 is the starting parameters.
    pub val_mse: Vec<f64>,
    pub train_mse: Vec<f64>,
    pub best_epoch: usize,
}

/// A trained network used as the feature map `φ(·)`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub model: Mlp,
    pub history: TrainingHistory,
}

impl FeatureExtractor {
    pub fn from_model(model: Mlp) -> Self {
        Self {
            model,
            history: TrainingHistory {
                val_mse: Vec::new(),
                train_mse: Vec::new(),
                best_epoch: 0,
            },
        }
    }

    /// `D` = last hidden width + 1 for the constant column.
    pub fn feature_dim(&self) -> usize {
        self.model.hidden_dim() + 1
    }

    pub fn w_nn(&self) -> Vec<f64> {
        self.model.output_weights()
    }

    pub fn b_nn(&self) -> f64 {
        self.model.output_bias()
    }

    /// Penultimate activations without the constant column.
    pub fn hidden_features(&self, inputs: &DenseMatrix) -> Result<DenseMatrix, FeatureError> {
        check_input(&self.model, inputs)?;
        let h = self.model.hidden(&inputs.view());
        let (rows, cols) = h.dim();
        Ok(
            DenseMatrix::from_row_major(rows, cols, h.into_raw_vec_and_offset().0)
                .expect("finite activations"),
        )
    }

    /// `N × D` features with the constant-1 column last.
    pub fn extract_features(&self, inputs: &DenseMatrix) -> Result<DenseMatrix, FeatureError> {
        Ok(self.hidden_features(inputs)?.with_constant_column(1.0))
    }

    pub fn predict(&self, inputs: &DenseMatrix) -> Result<Vec<f64>, FeatureError> {
        check_input(&self.model, inputs)?;
        Ok(self.model.predict(&inputs.view()))
    }
}

fn check_input(model: &Mlp, inputs: &DenseMatrix) -> Result<(), FeatureError> {
    if inputs.cols() != model.input_dim() {
        return Err(FeatureError::InputDim {
            expected: model.input_dim(),
            found: inputs.cols(),
        });
    }
    Ok(())
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train_mlp(
    train: &GroupedDataset,
    val: &GroupedDataset,
    config: &MlpConfig,
) -> Result<FeatureExtractor, FeatureError> {
    config.validate()?;
    let model = Mlp::new(train.input_dim(), &config.hidden_sizes, config.seed);
    train_from(model, train, val, config)
}

/// Mini-batch training with early stopping on validation MSE, starting from
/// `model`. Returns the parameters with the best validation loss seen,
/// counting the starting parameters as epoch 0. With an empty validation
/// set, training runs for `max_epochs` and keeps the final parameters.
pub fn train_from(
    mut model: Mlp,
    train: &GroupedDataset,
    val: &GroupedDataset,
    config: &MlpConfig,
) -> Result<FeatureExtractor, FeatureError> {
    config.validate()?;
    if train.is_empty() {
        return Err(FeatureError::EmptyTrainingSet);
    }
    check_input(&model, train.inputs())?;
    if !val.is_empty() {
        check_input(&model, val.inputs())?;
    }
    let x = train.inputs().view();
    let y = train.targets();
    let xv = val.inputs().view();
    let yv = val.targets();
    let use_val = !val.is_empty();

    let mut adam = Adam::new(model.n_parameters(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_x = Array2::zeros((0, 0));
    let mut batch_y = Vec::new();

    let mut best = model.clone();
    let mut best_loss = if use_val {
        model.mse(&xv, yv)
    } else {
        f64::INFINITY
    };
    let mut history = TrainingHistory {
        val_mse: vec![best_loss],
        train_mse: vec![model.mse(&x, y)],
        best_epoch: 0,
    };
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            gather_rows(&x, chunk, &mut batch_x);
            batch_y.clear();
            batch_y.extend(chunk.iter().map(|&i| y[i]));
            let (loss, grads) = model.loss_and_gradients(&batch_x.view(), &batch_y);
            if !loss.is_finite() {
                return Err(FeatureError::NonFiniteLoss {
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.update(&mut model, &grads);
        }
        history.train_mse.push(epoch_loss / train.len() as f64);

        if use_val {
            let val_loss = model.mse(&xv, yv);
            if !val_loss.is_finite() {
                return Err(FeatureError::NonFiniteLoss {
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            history.val_mse.push(val_loss);
            if val_loss < best_loss {
                best_loss = val_loss;
                best = model.clone();
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if !use_val {
        best = model;
    }
    log::debug!(
        "mlp trained: best epoch {} of {}, val mse {:.5}",
        history.best_epoch,
        history.train_mse.len() - 1,
        best_loss
    );
    Ok(FeatureExtractor {
        model: best,
        history,
    })
}

fn gather_rows(x: &ArrayView2<f64>, rows: &[usize], out: &mut Array2<f64>) {
    let cols = x.ncols();
    if out.dim() != (rows.len(), cols) {
        *out = Array2::zeros((rows.len(), cols));
    }
    for (k, &i) in rows.iter().enumerate() {
        out.slice_mut(s![k, ..]).assign(&x.row(i));
    }
}

/// Independently seeded members (`seed + i`); prediction is the member mean.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<FeatureExtractor>,
}

impl Ensemble {
    pub fn predict(&self, inputs: &DenseMatrix) -> Result<Vec<f64>, FeatureError> {
        let mut acc = vec![0.0; inputs.rows()];
        for m in &self.members {
            for (a, p) in acc.iter_mut().zip(m.predict(inputs)?) {
                *a += p;
            }
        }
        let k = self.members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

pub fn train_ensemble(
    train: &GroupedDataset,
    val: &GroupedDataset,
    config: &MlpConfig,
    n_members: usize,
) -> Result<Ensemble, FeatureError> {
    if n_members == 0 {
        return Err(FeatureError::Config(
            "ensemble needs at least one member".into(),
        ));
    }
    let members = (0..n_members as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = MlpConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            };
            train_mlp(train, val, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ensemble { members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupId;
    use ndarray::Array2;

    fn dataset(xs: &[f64], ys: &[f64]) -> GroupedDataset {
        let n = xs.len();
        GroupedDataset::new(
            DenseMatrix::from_row_major(n, 1, xs.to_vec()).unwrap(),
            ys.to_vec(),
            vec![GroupId::from("g"); n],
            (0..n).collect(),
        )
        .unwrap()
    }

    fn linear_toy(seed: u64, n: usize) -> (GroupedDataset, GroupedDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let xv: Vec<f64> = (0..n / 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let yv: Vec<f64> = xv.iter().map(|x| 3.0 * x).collect();
        (dataset(&xs, &ys), dataset(&xv, &yv))
    }

    fn tiny_config(seed: u64) -> MlpConfig {
        MlpConfig {
            hidden_sizes: vec![8, 8],
            max_epochs: 300,
            patience: 30,
            learning_rate: 1e-2,
            batch_size: 32,
            seed,
            ..MlpConfig::default()
        }
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn learns_linear_target() {
        let (train, val) = linear_toy(1, 200);
        let fx = train_mlp(&train, &val, &tiny_config(3)).unwrap();
        let pred = fx.predict(val.inputs()).unwrap();
        let rmse = crate::metrics::rmse(val.targets(), &pred).unwrap();
        assert!(rmse < 0.1 * std_dev(val.targets()), "rmse {rmse}");
        assert!(fx.history.train_mse.last().unwrap() < &fx.history.train_mse[0]);
    }

    #[test]
    fn constant_target() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 50.0 - 1.0).collect();
        let train = dataset(&xs, &vec![0.0; 100]);
        let val = dataset(&xs[..20], &[0.0; 20]);
        let fx = train_mlp(&train, &val, &tiny_config(4)).unwrap();
        let pred = fx.predict(val.inputs()).unwrap();
        assert!(crate::metrics::rmse(val.targets(), &pred).unwrap() < 0.05);
    }

    #[test]
    fn early_stop_returns_starting_parameters_when_validation_worsens() {
        let xs: Vec<f64> = (0..64).map(|i| i as f64 / 32.0 - 1.0).collect();
        let up: Vec<f64> = xs.iter().map(|x| 5.0 * x).collect();
        let down: Vec<f64> = xs.iter().map(|x| -5.0 * x).collect();
        let cfg = MlpConfig {
            patience: 1,
            ..tiny_config(5)
        };
        let fx = train_mlp(&dataset(&xs, &up), &dataset(&xs, &down), &cfg).unwrap();
        assert_eq!(fx.history.best_epoch, 0);
        assert_eq!(fx.history.val_mse.len(), 2);
        assert_eq!(fx.model, Mlp::new(1, &cfg.hidden_sizes, cfg.seed));
    }

    #[test]
    fn divergence_is_reported() {
        let (train, val) = linear_toy(2, 64);
        let mut big = train.clone();
        big = big
            .with_targets(big.targets().iter().map(|t| t * 1e200).collect())
            .unwrap();
        let err = train_mlp(&big, &val, &tiny_config(1)).unwrap_err();
        assert!(matches!(err, FeatureError::NonFiniteLoss { .. }));
    }

    #[test]
    fn seed_determinism() {
        let (train, val) = linear_toy(6, 100);
        let cfg = MlpConfig {
            max_epochs: 20,
            patience: 5,
            ..tiny_config(9)
        };
        let a = train_mlp(&train, &val, &cfg).unwrap();
        let b = train_mlp(&train, &val, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn feature_extraction() {
        let mut model = Mlp::new(3, &[4, 5], 1);
        for l in model.layers_mut() {
            l.weights.fill(0.0);
        }
        let fx = FeatureExtractor::from_model(model);
        let inputs = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]).unwrap();
        let phi = fx.extract_features(&inputs).unwrap();
        assert_eq!(phi.shape(), (2, 6));
        for i in 0..2 {
            assert_eq!(phi.row(i), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        }

        let fx = FeatureExtractor::from_model(Mlp::new(3, &[4, 5], 2));
        let same = DenseMatrix::from_rows(&[[0.3, -0.2, 0.9]; 5]).unwrap();
        let phi = fx.extract_features(&same).unwrap();
        for i in 1..5 {
            assert_eq!(phi.row(i), phi.row(0));
        }
        assert!(fx.extract_features(&DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn output_decomposes_through_features() {
        let fx = FeatureExtractor::from_model(Mlp::new(4, &[6, 5], 8));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = DenseMatrix::from_row_major(10, 4, data).unwrap();
        let phi = fx.extract_features(&x).unwrap();
        let mut w = fx.w_nn();
        w.push(fx.b_nn());
        let via_features = phi.matvec(&w).unwrap();
        let direct = fx.predict(&x).unwrap();
        for (a, b) in via_features.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Mlp::new(5, &[7, 3], 42);
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"PARISMLP");
        let back = Mlp::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert!(Mlp::read_checkpoint(&buf[..20]).is_err());
    }

    #[test]
    fn ensembles() {
        let (train, val) = linear_toy(7, 120);
        let cfg = MlpConfig {
            max_epochs: 30,
            patience: 5,
            ..tiny_config(11)
        };
        let one = train_ensemble(&train, &val, &cfg, 1).unwrap();
        let single = train_mlp(&train, &val, &cfg).unwrap();
        assert_eq!(one.members[0].model, single.model);
        assert_eq!(
            one.predict(val.inputs()).unwrap(),
            single.predict(val.inputs()).unwrap()
        );
        assert!(train_ensemble(&train, &val, &cfg, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::default().validate().is_ok());
        let bad = MlpConfig {
            hidden_sizes: vec![],
            ..MlpConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MlpConfig {
            patience: 0,
            ..MlpConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Perturbs parameter `idx` (flattened in layer, weight-then-bias order).
    fn perturbed(model: &Mlp, idx: usize, h: f64) -> Mlp {
        let mut m = model.clone();
        *m.params_mut().nth(idx).unwrap() += h;
        m
    }

    fn min_abs_preactivation(model: &Mlp, x: &Array2<f64>) -> f64 {
        let mut a = x.clone();
        let mut smallest = f64::INFINITY;
        for layer in &model.layers()[..model.layers().len() - 1] {
            a = layer.forward(&a.view());
            smallest = a.iter().fold(smallest, |m, v| m.min(v.abs()));
            a.mapv_inplace(relu);
        }
        smallest
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-5;
        let (model, x, y) = (0..)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let model = Mlp::new(3, &[6, 5], seed);
                let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.5..1.5));
                let y: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (model, x, y)
            })
            .find(|(m, x, _)| min_abs_preactivation(m, x) > 1e-3)
            .unwrap();
        let (_, grads) = model.loss_and_gradients(&x.view(), &y);
        let analytic: Vec<f64> = grads.iter().copied().collect();
        assert_eq!(analytic.len(), 3 * 6 + 6 + 6 * 5 + 5 + 5 + 1);
        for (i, &g) in analytic.iter().enumerate() {
            let up = perturbed(&model, i, h).loss_and_gradients(&x.view(), &y).0;
            let down = perturbed(&model, i, -h).loss_and_gradients(&x.view(), &y).0;
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale > 1e-6 {
                assert!(
                    (g - numeric).abs() / scale <= 1e-4,
                    "param {i}: {g} vs {numeric}"
                );
            } else {
                assert!((g - numeric).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gradients_shapes() {
        let model = Mlp::new(3, &[4], 0);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.1);
        let (_, g) = model.loss_and_gradients(&x.view(), &[0.0; 5]);
        assert_eq!(g.layers[0].weights.dim(), (4, 3));
        assert_eq!(g.layers[1].weights.dim(), (1, 4));
    }
}
