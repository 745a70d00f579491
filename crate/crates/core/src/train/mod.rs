//! Adam training of the student networks and the test metrics.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_sequences, zscore_normalize, NormStats, Sample};
use crate::models::{
    backbone_forward, forward, head_forward, ModelError, ModelParams, OdeConfig, Variant, STEERING_SCALE,
};
use crate::sim::Frame;
use crate::tensor::{GradTape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Bias-corrected Adam update in place; `t` counts from 1.
pub fn adam_step(param: &mut [f32], grad: &[f32], moments: &mut Moments, t: u64, cfg: &AdamConfig, lr: f32) -> Result<()> {
    let n = param.len();
    if grad.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(TrainError::Contract(format!(
            "adam shapes disagree: param {n}, grad {}, moments {}/{}",
            grad.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if t == 0 {
        return Err(TrainError::Contract("adam step index starts at 1".into()));
    }
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m as f64 / bc1;
        let v_hat = v as f64 / bc2;
        param[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.epsilon as f64)) as f32;
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub ode: Option<OdeConfig>,
    pub lr_decay: Option<StepDecay>,
    /// Keep backbone weights fixed and train the head on cached features.
    pub freeze_backbone: bool,
    /// Abort when a batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Cnn)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (batch_size, epochs) = match variant {
            Variant::Cnn => (128, 15),
            _ => (256, 100),
        };
        Self {
            variant,
            batch_size,
            epochs,
            adam: AdamConfig::default(),
            seed: 0,
            ode: None,
            lr_decay: None,
            freeze_backbone: false,
            divergence_factor: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.batch_size > 0
            && self.epochs > 0
            && a.learning_rate > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0
            && self.divergence_factor > 1.0
            && self.lr_decay.is_none_or(|d| d.every > 0 && d.factor > 0.0);
        if !ok {
            return Err(TrainError::Contract(format!("invalid training config {self:?}")));
        }
        if let Some(o) = &self.ode {
            o.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> u32 {
        crc32fast::hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn learning_rate(&self, epoch: usize) -> f32 {
        match self.lr_decay {
            Some(d) => self.adam.learning_rate * d.factor.powi((epoch / d.every) as i32),
            None => self.adam.learning_rate,
        }
    }
}

/// One training target: frame indices (oldest first) and a label in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub frames: Vec<usize>,
    pub label_deg: f32,
}

/// Frames shared by a list of single-frame or 3-frame examples.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub frames: Vec<Arc<Frame>>,
    pub examples: Vec<Example>,
}

impl ExampleSet {
    pub fn singles(samples: &[Sample]) -> Self {
        Self {
            frames: samples.iter().map(|s| s.frame.clone()).collect(),
            examples: samples.iter().enumerate().map(|(i, s)| Example { frames: vec![i], label_deg: s.steering }).collect(),
        }
    }

    /// Consecutive-tick windows labeled by the last frame.
    pub fn sequences(samples: &[Sample]) -> Self {
        Self {
            frames: samples.iter().map(|s| s.frame.clone()).collect(),
            examples: assemble_sequences(samples)
                .into_iter()
                .map(|q| Example { frames: q.frames.to_vec(), label_deg: samples[q.frames[2]].steering })
                .collect(),
        }
    }

    pub fn for_variant(samples: &[Sample], variant: Variant) -> Self {
        match variant {
            Variant::Cnn => Self::singles(samples),
            _ => Self::sequences(samples),
        }
    }

    /// Examples at `indices`, sharing frames.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { frames: self.frames.clone(), examples: indices.iter().map(|&i| self.examples[i].clone()).collect() }
    }

    /// Last-frame view, for scoring a single-frame model on sequence data.
    pub fn last_frames(&self) -> Self {
        Self {
            frames: self.frames.clone(),
            examples: self
                .examples
                .iter()
                .map(|e| Example { frames: vec![*e.frames.last().expect("non-empty window")], label_deg: e.label_deg })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn content_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for e in &self.examples {
            h.update(&e.label_deg.to_le_bytes());
            for &f in &e.frames {
                let fr = &self.frames[f];
                h.update(&(fr.width as u32).to_le_bytes());
                h.update(&fr.pixels);
            }
        }
        h.finalize()
    }

    fn check_window(&self, variant: Variant) -> Result<()> {
        if let Some(e) = self.examples.iter().find(|e| e.frames.len() != variant.window()) {
            return Err(TrainError::Contract(format!(
                "{variant} needs {}-frame examples, found one with {}",
                variant.window(),
                e.frames.len()
            )));
        }
        Ok(())
    }
}

/// Normalized frame tensors or cached backbone features, per frame index.
enum Inputs {
    Frames(HashMap<usize, Tensor>),
    Features(HashMap<usize, Tensor>),
}

fn used_frames<'a>(sets: impl IntoIterator<Item = &'a ExampleSet>) -> Vec<usize> {
    let mut v: Vec<usize> = sets.into_iter().flat_map(|s| s.examples.iter().flat_map(|e| e.frames.iter().copied())).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn prepare(params: &ModelParams, set: &ExampleSet, features: bool) -> Result<Inputs> {
    let stats = &params.meta.norm_stats;
    let mut map = HashMap::new();
    for i in used_frames([set]) {
        let x = zscore_normalize(&set.frames[i], stats);
        let v = if features { Tensor::from_vec(params.features(&x)?) } else { x };
        map.insert(i, v);
    }
    Ok(if features { Inputs::Features(map) } else { Inputs::Frames(map) })
}

/// Normalized prediction for one example.
fn predict(params: &ModelParams, inputs: &Inputs, e: &Example) -> Result<f32> {
    let mut tape = GradTape::new();
    let y = match inputs {
        Inputs::Frames(m) => {
            let p = params.bind(&mut tape, |_| false);
            let xs: Vec<_> = e.frames.iter().map(|i| tape.constant(m[i].clone())).collect();
            forward(&mut tape, &p, &xs)?
        }
        Inputs::Features(m) => {
            let p = params.bind(&mut tape, |_| false);
            let fs: Vec<_> = e.frames.iter().map(|i| tape.constant(m[i].clone())).collect();
            head_forward(&mut tape, &p, &fs)?
        }
    };
    Ok(tape.value(y).data()[0])
}

/// Test metrics; MSE in normalized units and degrees².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mse_normalized: f64,
    pub mse_deg2: f64,
    pub within_5deg_fraction: f64,
}

/// Scores normalized predictions against labels in degrees.
pub fn score(predictions: &[f32], labels_deg: &[f32]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != labels_deg.len() {
        return Err(TrainError::Contract(format!(
            "cannot score {} predictions against {} labels",
            predictions.len(),
            labels_deg.len()
        )));
    }
    let scale = STEERING_SCALE as f64;
    let (mut sq, mut within) = (0.0f64, 0usize);
    for (&p, &l) in predictions.iter().zip(labels_deg) {
        let d = p as f64 - (l / STEERING_SCALE) as f64;
        sq += d * d;
        // Slack covers f32 rounding of normalized values (about 1e-5 degrees).
        if (d * scale).abs() <= 5.0 + 1e-4 {
            within += 1;
        }
    }
    let n = predictions.len() as f64;
    let mse = sq / n;
    Ok(Metrics { count: predictions.len(), mse_normalized: mse, mse_deg2: mse * (scale * scale), within_5deg_fraction: within as f64 / n })
}

pub fn predict_set(params: &ModelParams, set: &ExampleSet) -> Result<Vec<f32>> {
    set.check_window(params.variant())?;
    let inputs = prepare(params, set, false)?;
    set.examples.iter().map(|e| predict(params, &inputs, e)).collect()
}

pub fn evaluate_metrics(params: &ModelParams, set: &ExampleSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(TrainError::Contract("empty evaluation set".into()));
    }
    let preds = predict_set(params, set)?;
    let labels: Vec<f32> = set.examples.iter().map(|e| e.label_deg).collect();
    score(&preds, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: u32,
    pub dataset_hash: u32,
    pub param_count: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (lowest validation loss).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Loss on the training split before the first update.
    pub initial_train_loss: f64,
    pub test: Option<Metrics>,
    /// Left out of the JSON so reports of identical runs are byte-equal.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Trains from `init` (fresh He-uniform weights when `None`), keeping the
/// checkpoint with the lowest validation MSE.
pub fn train_model(
    cfg: &TrainConfig,
    stats: &NormStats,
    init: Option<ModelParams>,
    train: &ExampleSet,
    val: &ExampleSet,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Contract("training and validation splits must be non-empty".into()));
    }
    train.check_window(cfg.variant)?;
    val.check_window(cfg.variant)?;
    let started = Instant::now();
    let mut params = match init {
        Some(p) => {
            if p.variant() != cfg.variant {
                return Err(ModelError::VariantMismatch { expected: cfg.variant.to_string(), found: p.variant().to_string() }.into());
            }
            p
        }
        None => ModelParams::init(cfg.variant, cfg.ode, stats.clone(), cfg.seed)?,
    };
    params.meta.config_hash = Some(cfg.hash());
    let frozen = cfg.freeze_backbone;
    let train_in = prepare(&params, train, frozen)?;
    let val_in = prepare(&params, val, frozen)?;
    let trainable: Vec<bool> = params.tensors.iter().map(|(n, _)| !(frozen && n.starts_with("backbone."))).collect();
    let mut moments: Vec<Moments> = params.tensors.iter().map(|(_, t)| Moments::zeros(t.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_eed0_f7a1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mean_loss = |p: &ModelParams, set: &ExampleSet, inputs: &Inputs| -> Result<f64> {
        let mut s = 0.0f64;
        for e in &set.examples {
            let d = predict(p, inputs, e)? as f64 - (e.label_deg / STEERING_SCALE) as f64;
            s += d * d;
        }
        Ok(s / set.len() as f64)
    };
    let initial = mean_loss(&params, train, &train_in)?;
    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut first_batch_loss: Option<f64> = None;
    let mut t = 0u64;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate(epoch - 1);
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut seen) = (0.0f64, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f32>> = params.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let e = &train.examples[i];
                let target = e.label_deg / STEERING_SCALE;
                let mut tape = GradTape::new();
                let bound = params.bind(&mut tape, |n| !(frozen && n.starts_with("backbone.")));
                let y = match &train_in {
                    Inputs::Frames(m) => {
                        let xs: Vec<_> = e.frames.iter().map(|k| tape.constant(m[k].clone())).collect();
                        let feats = xs.iter().map(|&x| backbone_forward(&mut tape, &bound, x)).collect::<std::result::Result<Vec<_>, _>>()?;
                        head_forward(&mut tape, &bound, &feats)?
                    }
                    Inputs::Features(m) => {
                        let fs: Vec<_> = e.frames.iter().map(|k| tape.constant(m[k].clone())).collect();
                        head_forward(&mut tape, &bound, &fs)?
                    }
                };
                let target = tape.constant(Tensor::from_vec(vec![target]));
                let loss = tape.mse(y, target).map_err(ModelError::from)?;
                batch_loss += tape.value(loss).data()[0] as f64;
                let g = tape.backward(loss).map_err(ModelError::from)?;
                for (k, acc) in grads.iter_mut().enumerate() {
                    if !trainable[k] {
                        continue;
                    }
                    if let Some(gk) = g.raw(bound.vars[k]) {
                        acc.iter_mut().zip(gk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let bl = batch_loss / batch.len() as f64;
            let reference = *first_batch_loss.get_or_insert(bl.max(1e-12));
            if !bl.is_finite() || bl > cfg.divergence_factor * reference {
                return Err(TrainError::Diverged { epoch, step, loss: bl });
            }
            epoch_loss += batch_loss;
            seen += batch.len();
            t += 1;
            let inv = 1.0 / batch.len() as f32;
            for (k, (_, tensor)) in params.tensors.iter_mut().enumerate() {
                if !trainable[k] {
                    continue;
                }
                grads[k].iter_mut().for_each(|g| *g *= inv);
                let mut data = tensor.data().to_vec();
                adam_step(&mut data, &grads[k], &mut moments[k], t, &cfg.adam, lr)?;
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Diverged { epoch, step, loss: f64::NAN });
                }
                *tensor = Tensor::new(tensor.shape().to_vec(), data).map_err(ModelError::from)?;
            }
        }
        let val_loss = mean_loss(&params, val, &val_in)?;
        logs.push(EpochLog { epoch, train_loss: epoch_loss / seen as f64, val_loss, learning_rate: lr });
        if val_loss < best.1 {
            best = (params.clone(), val_loss, epoch);
        }
    }
    let (params, best_val_loss, best_epoch) = best;
    let report = TrainReport {
        variant: cfg.variant,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dataset_hash: train.content_hash() ^ val.content_hash().rotate_left(1),
        param_count: params.param_count(),
        epochs: logs,
        best_epoch,
        best_val_loss,
        initial_train_loss: initial,
        test: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
