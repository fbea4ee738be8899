//! Cross-entropy training: Adam with L2 decay, an exponentially decaying
//! learning rate and fixed-length crop batching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::params::{ParamKind, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_frames_min: usize,
    pub crop_frames_max: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    /// L2 coefficient, applied to [`ParamKind::Weight`] tensors only.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_frames_min: 50,
            crop_frames_max: 100,
            lr_start: 1e-3,
            lr_end: 1e-4,
            total_steps: 400,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 7,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop_frames_min == 0 || self.crop_frames_min > self.crop_frames_max {
            return bad(format!(
                "crop range {}..={} is empty",
                self.crop_frames_min, self.crop_frames_max
            ));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon <= 0.0 {
            return bad("adam betas must be in [0, 1) and epsilon positive".into());
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: geometric interpolation from
    /// `lr_start` at the first step to `lr_end` at the last.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_start;
        }
        let frac = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `weight_decay · param` is added to the
/// gradient of every weight tensor before the moments are updated.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    let grads = grads.params("");
    let mut params = params.params_mut("");
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads) {
        if p.data.len() != g.data.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let grad = g.data[i] + decay * p.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * grad;
            v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<Matrix>,
    pub labels: Vec<usize>,
    /// Corpus indices of the utterances in the batch.
    pub indices: Vec<usize>,
}

/// `length` consecutive frames starting at `offset`; shorter utterances are
/// repeated from their first frame instead.
pub fn crop(x: &Matrix, length: usize, offset: usize) -> Matrix {
    let t = x.nrows();
    if t >= length {
        x.slice(ndarray::s![offset..offset + length, ..]).to_owned()
    } else {
        Matrix::from_shape_fn((length, x.ncols()), |(i, c)| x[[i % t, c]])
    }
}

/// One epoch of shuffled batches, every batch cropped to a single length.
pub fn make_batches(
    utterances: &[Matrix],
    labels: &[usize],
    cfg: &TrainConfig,
    epoch_seed: u64,
    min_frames: usize,
) -> Result<Vec<Batch>> {
    cfg.validate()?;
    if utterances.is_empty() || utterances.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} utterances with {} labels",
            utterances.len(),
            labels.len()
        )));
    }
    if cfg.crop_frames_min < min_frames {
        return Err(Error::ReceptiveField {
            frames: cfg.crop_frames_min,
            minimum: min_frames,
        });
    }
    if let Some(i) = utterances.iter().position(|u| u.nrows() < min_frames) {
        return Err(Error::InvalidArgument(format!(
            "utterance {i} has {} frames, fewer than the minimum {min_frames}",
            utterances[i].nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let length = rng.random_range(cfg.crop_frames_min..=cfg.crop_frames_max);
            let features = chunk
                .iter()
                .map(|&i| {
                    let t = utterances[i].nrows();
                    let offset = if t > length { rng.random_range(0..=t - length) } else { 0 };
                    crop(&utterances[i], length, offset)
                })
                .collect();
            Batch {
                features,
                labels: chunk.iter().map(|&i| labels[i]).collect(),
                indices: chunk.to_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Tab-separated `step lr loss accuracy` lines.
    pub fn to_tsv(&self) -> String {
        self.steps.iter().map(format_step).collect()
    }

    /// `(mean loss, mean accuracy)` per epoch, weighted by step.
    pub fn epoch_means(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for s in &self.steps {
            if out.len() <= s.epoch {
                out.resize(s.epoch + 1, (0.0, 0.0, 0));
            }
            let e = &mut out[s.epoch];
            e.0 += s.loss;
            e.1 += s.accuracy;
            e.2 += 1;
        }
        out.into_iter()
            .filter(|e| e.2 > 0)
            .map(|(l, a, n)| (l / n as f64, a / n as f64))
            .collect()
    }
}

pub fn format_step(s: &StepRecord) -> String {
    format!("{}\t{:.6e}\t{:.6}\t{:.4}\n", s.step, s.lr, s.loss, s.accuracy)
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains `model` for `cfg.total_steps` steps. `on_step` sees every log
/// record; `checkpoint` is called every `checkpoint_every` steps and after
/// the last step.
pub fn train(
    model: &mut Model,
    utterances: &[Matrix],
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
    mut checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(&l) = labels.iter().find(|&&l| l >= model.config.num_speakers) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {} output classes",
            model.config.num_speakers
        )));
    }
    let hyper = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        epsilon: cfg.adam_epsilon,
    };
    let min_frames = model.config.min_frames();
    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.total_steps {
        let batches = make_batches(utterances, labels, cfg, epoch_seed(cfg.seed, epoch), min_frames)?;
        for batch in batches {
            if step == cfg.total_steps {
                break;
            }
            let lr = cfg.learning_rate(step);
            let (loss, correct, grads) = model.train_step(&batch.features, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            adam_step(model, &grads, &mut state, lr, cfg.weight_decay, hyper)?;
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss,
                accuracy: correct as f64 / batch.labels.len() as f64,
            };
            on_step(&record);
            log.steps.push(record);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
                checkpoint(step, model)?;
            }
        }
        epoch += 1;
    }
    checkpoint(step, model)?;
    Ok(log)
}
