//! MSE loss, Adam and the training loop.
//!
//! Mini-batches are split into fixed chunks of [`CHUNK`] samples. Each chunk
//! runs one batched forward/backward pass and the chunk gradients are summed
//! in chunk order, so a run is reproducible for a given seed no matter how
//! many threads execute the chunks.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{FeatureTensor, SplitAssignment, StimulusSet};
use crate::encoder::{gelu, gelu_derivative, init_params, EncoderConfig, EncoderGrads, EncoderParams};
use crate::metrics::{accuracy, NcUnits};
use crate::{par, Error, Result};

/// Samples per gradient chunk.
pub const CHUNK: usize = 8;

/// Mean squared error over voxels and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse of empty vectors"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Adam hyperparameters. `adam_step` accepts `beta = 0`; [`TrainConfig`]
/// requires both betas strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

fn same_shapes(a: &EncoderParams, b: &EncoderParams) -> bool {
    a.tensors()
        .iter()
        .zip(b.tensors().iter())
        .all(|(x, y)| x.1 == y.1)
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    config.validate()?;
    if !same_shapes(params, grads) || !same_shapes(params, &state.m) || !same_shapes(params, &state.v)
    {
        return Err(Error::shape("parameter, gradient and state shapes differ"));
    }
    state.t += 1;
    let t = state.t as i32;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = *config;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g_all = grads.tensors();
    let m_all = state.m.slices_mut();
    let v_all = state.v.slices_mut();
    for (((theta, (_, _, g)), m), v) in params.slices_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.beta1 == 0.0 || self.beta2 == 0.0 {
            return Err(Error::invalid("training betas must lie strictly inside (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's training batches.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn stack_inputs(features: &[&FeatureTensor]) -> Array2<f64> {
    let (q, d) = (features[0].queries(), features[0].dim());
    let mut x = Array2::zeros((features.len() * q, d));
    for (i, f) in features.iter().enumerate() {
        x.slice_mut(ndarray::s![i * q..(i + 1) * q, ..])
            .zip_mut_with(&f.view(), |dst, &src| *dst = f64::from(src));
    }
    x
}

fn check_batch(params: &EncoderParams, features: &[&FeatureTensor]) -> Result<EncoderConfig> {
    let cfg = params.config();
    if features.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    for f in features {
        if (f.queries(), f.dim()) != (cfg.queries, cfg.dim) {
            return Err(Error::shape(format!(
                "features {}x{}, encoder expects {}x{}",
                f.queries(),
                f.dim(),
                cfg.queries,
                cfg.dim
            )));
        }
    }
    Ok(cfg)
}

struct BatchTrace {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    condensed: Array2<f64>,
}

fn batch_forward(params: &EncoderParams, features: &[&FeatureTensor]) -> Result<(Array2<f64>, BatchTrace)> {
    let cfg = check_batch(params, features)?;
    let x = stack_inputs(features);
    let pre = x.dot(&params.w1) + &params.b1;
    let hidden = pre.mapv(gelu);
    let per_query = hidden.dot(&params.w2) + &params.b2;
    let condensed = per_query
        .to_shape((features.len(), cfg.condensed_len()))
        .map_err(|e| Error::shape(e.to_string()))?
        .into_owned();
    let pred = condensed.dot(&params.w_head) + &params.b_head;
    Ok((
        pred,
        BatchTrace {
            x,
            pre,
            hidden,
            condensed,
        },
    ))
}

/// Predictions for several stimuli at once, one row per stimulus.
pub fn predict_batch(params: &EncoderParams, features: &[&FeatureTensor]) -> Result<Array2<f64>> {
    let chunks: Vec<&[&FeatureTensor]> = features.chunks(CHUNK).collect();
    let parts = par::map(&chunks, |c| batch_forward(params, c).map(|(p, _)| p));
    let mut rows = Vec::with_capacity(features.len());
    for part in parts {
        rows.extend(part?.rows().into_iter().map(|r| r.to_owned()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(crate::data_io::stack_rows(&views))
}

/// Summed per-sample MSE and its gradient for one chunk.
fn chunk_gradient(
    params: &EncoderParams,
    features: &[&FeatureTensor],
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, EncoderGrads)> {
    let cfg = params.config();
    let (pred, tr) = batch_forward(params, features)?;
    if targets.dim() != pred.dim() {
        return Err(Error::shape(format!(
            "targets {:?}, predictions {:?}",
            targets.dim(),
            pred.dim()
        )));
    }
    let v = cfg.voxels as f64;
    let resid = &pred - &targets;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / v;
    let d_pred = resid * (2.0 / v);

    let mut g = params.zeros_like();
    g.w_head.assign(&tr.condensed.t().dot(&d_pred));
    g.b_head = d_pred.sum_axis(Axis(0));
    let d_per_query = d_pred
        .dot(&params.w_head.t())
        .to_shape((features.len() * cfg.queries, cfg.query_out))
        .map_err(|e| Error::shape(e.to_string()))?
        .into_owned();
    g.w2.assign(&tr.hidden.t().dot(&d_per_query));
    g.b2 = d_per_query.sum_axis(Axis(0));
    let mut d_pre = d_per_query.dot(&params.w2.t());
    ndarray::Zip::from(&mut d_pre)
        .and(&tr.pre)
        .for_each(|d, &a| *d *= gelu_derivative(a));
    g.w1.assign(&tr.x.t().dot(&d_pre));
    g.b1 = d_pre.sum_axis(Axis(0));
    Ok((loss, g))
}

/// Mean per-sample MSE over the batch and its parameter gradient.
pub fn batch_gradient(
    params: &EncoderParams,
    features: &[&FeatureTensor],
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, EncoderGrads)> {
    check_batch(params, features)?;
    if targets.nrows() != features.len() {
        return Err(Error::shape("one target row per stimulus required"));
    }
    let jobs: Vec<(usize, &[&FeatureTensor])> = features
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let parts = par::map(&jobs, |&(start, c)| {
        chunk_gradient(
            params,
            c,
            targets.slice(ndarray::s![start..start + c.len(), ..]),
        )
    });
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    let n = features.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

fn validation_accuracy(
    params: &EncoderParams,
    set: &StimulusSet,
    indices: &[usize],
) -> Result<f64> {
    let feats: Vec<&FeatureTensor> = indices.iter().map(|&i| set.features(i)).collect();
    let pred = predict_batch(params, &feats)?;
    let ground = set.response_matrix(indices);
    Ok(accuracy(ground.view(), pred.view(), set.noise_ceiling(), NcUnits::Fraction)?.0.accuracy)
}

/// Trains from a seeded initialization and returns the best-validation checkpoint.
pub fn train(
    set: &StimulusSet,
    split: &SplitAssignment,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    let params = init_params(encoder, config.seed)?;
    train_from(set, split, params, config)
}

/// Like [`train`] but starting from given parameters.
pub fn train_from(
    set: &StimulusSet,
    split: &SplitAssignment,
    mut params: EncoderParams,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let train_idx = set.indices_of(&split.train)?;
    let val_idx = set.indices_of(&split.validation)?;
    if train_idx.is_empty() {
        return Err(Error::invalid("training partition is empty"));
    }
    if val_idx.len() < 2 {
        return Err(Error::invalid(
            "validation partition needs at least two stimuli for correlation",
        ));
    }
    let cfg = params.config();
    if set.feature_shape() != (cfg.queries, cfg.dim) || set.num_voxels() != cfg.voxels {
        return Err(Error::shape(format!(
            "dataset features {:?} with {} voxels do not fit encoder {cfg:?}",
            set.feature_shape(),
            set.num_voxels()
        )));
    }

    let adam = config.adam();
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_0000_0001);
    let mut order = train_idx.clone();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut since_improvement = 0usize;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let feats: Vec<&FeatureTensor> = batch.iter().map(|&i| set.features(i)).collect();
            let targets = set.response_matrix(batch);
            let (loss, grads) = batch_gradient(&params, &feats, targets.view())?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_accuracy = validation_accuracy(&params, set, &val_idx)?;
        log::debug!("epoch {epoch}: loss {train_loss:.6e}, validation accuracy {val_accuracy:.3}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy > best.0 {
            best = (val_accuracy, epoch, params.clone());
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= config.patience.max(1) {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }

    let (best_val_accuracy, best_epoch, best_params) = best;
    Ok((
        best_params,
        TrainReport {
            epochs,
            best_epoch,
            best_val_accuracy,
            stopped_early,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Predictions for the listed stimuli; rows follow `indices`.
pub fn predict_indices(params: &EncoderParams, set: &StimulusSet, indices: &[usize]) -> Result<Array2<f64>> {
    let feats: Vec<&FeatureTensor> = indices.iter().map(|&i| set.features(i)).collect();
    if feats.is_empty() {
        return Ok(Array2::zeros((0, params.config().voxels)));
    }
    predict_batch(params, &feats)
}
