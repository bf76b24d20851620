//! Training data from the true bicycle model and mini-batch Adam fitting of
//! the surrogate network.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{bicycle_derivative, true_step, BicycleParams, ControlInput, VehicleState};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Gradients, MlpModel, Normalization, INPUT_DIM, OUTPUT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_trajectories: usize,
    pub steps_per_trajectory: usize,
    pub dt: f64,
    pub accel_range: [f64; 2],
    pub steer_range: [f64; 2],
    /// Number of steps each random control is held.
    pub hold_steps: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub heading_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by geometric decay; `None` keeps it constant.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    /// Acceptance bound on the per-output validation RMSE, checked by the CLI.
    #[serde(default)]
    pub rmse_threshold: Option<[f64; OUTPUT_DIM]>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_trajectories: 400,
            steps_per_trajectory: 100,
            dt: 0.1,
            accel_range: [-4.0, 2.5],
            steer_range: [-0.5, 0.5],
            hold_steps: 5,
            x_range: [-20.0, 420.0],
            y_range: [-30.0, 110.0],
            heading_range: [-std::f64::consts::PI, std::f64::consts::PI],
            speed_range: [0.0, 15.0],
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            learning_rate: 1e-3,
            final_learning_rate: Some(1e-5),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            epochs: 60,
            validation_fraction: 0.1,
            rng_seed: 0,
            rmse_threshold: None,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::config(name, "must be a finite [lo, hi] pair with lo <= hi"));
    }
    Ok(())
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories", "must be positive"));
        }
        if self.steps_per_trajectory == 0 {
            return Err(Error::config("steps_per_trajectory", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.hold_steps == 0 {
            return Err(Error::config("hold_steps", "must be positive"));
        }
        check_range("accel_range", self.accel_range)?;
        check_range("steer_range", self.steer_range)?;
        check_range("x_range", self.x_range)?;
        check_range("y_range", self.y_range)?;
        check_range("heading_range", self.heading_range)?;
        check_range("speed_range", self.speed_range)?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.final_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Samples `(state ‖ control) -> true derivative`, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub train_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and splits it at random.
    pub fn new(
        inputs: DMatrix<f64>,
        targets: DMatrix<f64>,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if inputs.nrows() != INPUT_DIM {
            return Err(Error::dimension("dataset inputs", INPUT_DIM, inputs.nrows()));
        }
        if targets.nrows() != OUTPUT_DIM {
            return Err(Error::dimension("dataset targets", OUTPUT_DIM, targets.nrows()));
        }
        if inputs.ncols() != targets.ncols() {
            return Err(Error::dimension("dataset samples", inputs.ncols(), targets.ncols()));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("dataset holds non-finite values".into()));
        }
        let n = inputs.ncols();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
        let n_val = if n > 1 {
            ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        let validation_idx = order[..n_val].to_vec();
        let train_idx = order[n_val..].to_vec();
        Ok(Dataset {
            inputs,
            targets,
            train_idx,
            validation_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
    }

    pub fn train_inputs(&self) -> DMatrix<f64> {
        Self::columns(&self.inputs, &self.train_idx)
    }

    pub fn train_targets(&self) -> DMatrix<f64> {
        Self::columns(&self.targets, &self.train_idx)
    }

    pub fn validation_inputs(&self) -> DMatrix<f64> {
        Self::columns(&self.inputs, &self.validation_idx)
    }

    pub fn validation_targets(&self) -> DMatrix<f64> {
        Self::columns(&self.targets, &self.validation_idx)
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Rolls out the true model under random piecewise-constant controls and
/// labels every visited `(state, control)` with its exact derivative.
pub fn generate_dataset(config: &TrainingConfig, params: &BicycleParams) -> Result<Dataset> {
    config.validate()?;
    params.validate()?;
    let n = config.n_trajectories * config.steps_per_trajectory;
    let mut inputs = DMatrix::zeros(INPUT_DIM, n);
    let mut targets = DMatrix::zeros(OUTPUT_DIM, n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut col = 0;
    for _ in 0..config.n_trajectories {
        let mut state = VehicleState::new(
            uniform(&mut rng, config.x_range),
            uniform(&mut rng, config.y_range),
            uniform(&mut rng, config.heading_range),
            uniform(&mut rng, config.speed_range),
        );
        let mut control = ControlInput::default();
        for step in 0..config.steps_per_trajectory {
            if step % config.hold_steps == 0 {
                control = ControlInput::new(
                    uniform(&mut rng, config.accel_range),
                    uniform(&mut rng, config.steer_range),
                );
            }
            let d = bicycle_derivative(&state, &control, params)?;
            let s = state.to_array();
            for r in 0..4 {
                inputs[(r, col)] = s[r];
                targets[(r, col)] = d[r];
            }
            inputs[(4, col)] = control.accel;
            inputs[(5, col)] = control.steer;
            col += 1;
            state = true_step(&state, &control, params, config.dt)?;
        }
    }
    Dataset::new(inputs, targets, config.validation_fraction, config.rng_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MlpModel,
    pub history: Vec<EpochLoss>,
    /// Per-output root-mean-square error on the validation split, in raw units.
    pub validation_rmse: [f64; OUTPUT_DIM],
}

/// Mean squared error over all entries of normalized predictions.
fn normalized_mse(model: &MlpModel, inputs_n: &DMatrix<f64>, targets_n: &DMatrix<f64>) -> f64 {
    if inputs_n.ncols() == 0 {
        return 0.0;
    }
    let out = model.forward_normalized(inputs_n);
    (out - targets_n).norm_squared() / targets_n.len() as f64
}

/// Per-output RMSE of the raw predictions.
pub fn rmse(model: &MlpModel, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<[f64; OUTPUT_DIM]> {
    let pred = model.forward_batch(inputs)?;
    let n = inputs.ncols().max(1) as f64;
    let mut out = [0.0; OUTPUT_DIM];
    for (r, o) in out.iter_mut().enumerate() {
        *o = ((pred.row(r) - targets.row(r)).norm_squared() / n).sqrt();
    }
    Ok(out)
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        Adam {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, g: &Gradients, lr: f64, config: &TrainingConfig) {
        self.t += 1;
        let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                g.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                g.bias[l].as_slice(),
                self.m.bias[l].as_mut_slice(),
                self.v.bias[l].as_mut_slice(),
            );
        }
    }
}

/// Gradient of the batch mean squared error (normalized space), summed into `grads`.
fn batch_gradient(model: &MlpModel, inputs_n: &DMatrix<f64>, targets_n: &DMatrix<f64>, grads: &mut Gradients) -> f64 {
    let cache = model.forward_cached(inputs_n);
    let out = cache.outputs.last().expect("nonempty");
    let residual = out - targets_n;
    let count = residual.len() as f64;
    let loss = residual.norm_squared() / count;
    model.backward(&cache, residual * (2.0 / count), grads);
    loss
}

/// Fits `model` by mini-batch Adam on normalized targets. Input and output
/// normalizations are refit on the training split first.
pub fn train(model: &MlpModel, data: &Dataset, config: &TrainingConfig) -> Result<TrainReport> {
    config.validate()?;
    model.validate()?;
    if data.train_idx.is_empty() {
        return Err(Error::config("dataset", "training split is empty"));
    }
    let mut model = model.clone();
    let train_in = data.train_inputs();
    let train_out = data.train_targets();
    model.input_norm = Normalization::fit(&train_in);
    model.output_norm = Normalization::fit(&train_out);
    let x = model.input_norm.normalize_batch(&train_in);
    let y = model.output_norm.normalize_batch(&train_out);
    let xv = model.input_norm.normalize_batch(&data.validation_inputs());
    let yv = model.output_norm.normalize_batch(&data.validation_targets());

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
    let mut adam = Adam::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    let decay = match config.final_learning_rate {
        Some(last) if config.epochs > 1 => {
            (last / config.learning_rate).powf(1.0 / (config.epochs - 1) as f64)
        }
        _ => 1.0,
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate * decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = DMatrix::from_fn(INPUT_DIM, batch.len(), |r, c| x[(r, batch[c])]);
            let yb = DMatrix::from_fn(y.nrows(), batch.len(), |r, c| y[(r, batch[c])]);
            grads.weights.iter_mut().for_each(|w| w.fill(0.0));
            grads.bias.iter_mut().for_each(|b| b.fill(0.0));
            let loss = batch_gradient(&model, &xb, &yb, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            adam.step(&mut model, &grads, lr, config);
        }
        let train_loss = normalized_mse(&model, &x, &y);
        let validation = normalized_mse(&model, &xv, &yv);
        if !train_loss.is_finite() || !validation.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            validation,
        });
    }
    let validation_rmse = if data.validation_idx.is_empty() {
        [0.0; OUTPUT_DIM]
    } else {
        rmse(&model, &data.validation_inputs(), &data.validation_targets())?
    };
    Ok(TrainReport {
        model,
        history,
        validation_rmse,
    })
}

/// Fresh network with the configured architecture.
pub fn initial_model(config: &TrainingConfig) -> MlpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(2));
    MlpModel::new_random(&config.hidden, config.activation, &mut rng)
}

/// Largest `|g_bp - g_fd| / max(1, |g_fd|)` over all parameters for the
/// normalized squared error of one sample `(input, target)` given in raw units.
pub fn gradient_check(model: &MlpModel, input: &[f64], target: &[f64]) -> Result<f64> {
    if input.len() != INPUT_DIM || target.len() != OUTPUT_DIM {
        return Err(Error::dimension("gradient check sample", INPUT_DIM + OUTPUT_DIM, input.len() + target.len()));
    }
    let x = model
        .input_norm
        .normalize_batch(&DMatrix::from_column_slice(INPUT_DIM, 1, input));
    let y = model
        .output_norm
        .normalize_batch(&DMatrix::from_column_slice(OUTPUT_DIM, 1, target));
    let mut grads = Gradients::zeros_like(model);
    batch_gradient(model, &x, &y, &mut grads);

    let loss = |m: &MlpModel| normalized_mse(m, &x, &y);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut check = |probe: &mut MlpModel, get: &dyn Fn(&mut MlpModel) -> &mut f64, g_bp: f64| {
        let theta = *get(probe);
        let h = 1e-6 * theta.abs().max(1.0);
        *get(probe) = theta + h;
        let up = loss(probe);
        *get(probe) = theta - h;
        let down = loss(probe);
        *get(probe) = theta;
        let g_fd = (up - down) / (2.0 * h);
        worst = worst.max((g_bp - g_fd).abs() / g_fd.abs().max(1.0));
    };
    for l in 0..model.layers.len() {
        let (rows, cols) = model.layers[l].weights.shape();
        for c in 0..cols {
            for r in 0..rows {
                check(&mut probe, &|m: &mut MlpModel| &mut m.layers[l].weights[(r, c)], grads.weights[l][(r, c)]);
            }
        }
        for r in 0..rows {
            check(&mut probe, &|m: &mut MlpModel| &mut m.layers[l].bias[r], grads.bias[l][r]);
        }
    }
    Ok(worst)
}

/// Evaluates a trained model on a fresh held-out dataset.
pub fn holdout_rmse(model: &MlpModel, config: &TrainingConfig, params: &BicycleParams, seed: u64) -> Result<[f64; OUTPUT_DIM]> {
    let mut cfg = config.clone();
    cfg.rng_seed = seed;
    let data = generate_dataset(&cfg, params)?;
    rmse(model, &data.inputs, &data.targets)
}
