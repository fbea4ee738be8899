//! The x-vector network and its adaptive variants.
//!
//! Five frame-level layers (dilated convolutions, ReLU, normalization),
//! statistics pooling, utterance-level affine layers and a softmax output.
//! The embedding is the pre-activation output of the first utterance-level
//! affine layer.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    abn_backward, abn_forward, acnn_layer, acnn_layer_backward, bn_backward, bn_forward, pooling_stats,
    stats_pooling_backward, AbnCache, AbnParams, AcnnForward, AcnnParams, BatchStats, BnCache, BnState, Mode,
    PooledStats, RunningStats,
};
use crate::numerics::{conv1d, conv1d_backward, relu, relu_backward, softmax_cross_entropy, ConvParams, Matrix, Tensor3};
use crate::params::{join, Param, ParamMut, Parameters};
use crate::records::{Record, RecordFile};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AXCK";

/// Which frame-level layers are adaptive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Acnn,
    Abn,
    AcnnAbn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Acnn, Variant::Abn, Variant::AcnnAbn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Acnn => "acnn",
            Variant::Abn => "abn",
            Variant::AcnnAbn => "acnn-abn",
        }
    }

    pub fn uses_acnn(self) -> bool {
        matches!(self, Variant::Acnn | Variant::AcnnAbn)
    }

    pub fn uses_abn(self) -> bool {
        matches!(self, Variant::Abn | Variant::AcnnAbn)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (baseline, acnn, abn, acnn-abn)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub frame_layer_dims: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub dilations: Vec<usize>,
    pub utterance_layer_dims: Vec<usize>,
    pub num_speakers: usize,
    pub variant: Variant,
    /// 1-based index of the adaptive convolution layer.
    pub acnn_layer_index: usize,
    /// Hidden size of the attention maps in both adaptive blocks.
    pub attention_hidden: usize,
    /// Number of component filters in the adaptive convolution pool.
    pub pool_size: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 30,
            frame_layer_dims: vec![512, 512, 512, 512, 1536],
            kernel_sizes: vec![5, 3, 3, 1, 1],
            dilations: vec![1, 2, 3, 1, 1],
            utterance_layer_dims: vec![512, 512],
            num_speakers: 7185,
            variant: Variant::Baseline,
            acnn_layer_index: 4,
            attention_hidden: 256,
            pool_size: 4,
            bn_momentum: crate::layers::DEFAULT_MOMENTUM,
            bn_epsilon: crate::layers::DEFAULT_EPSILON,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.frame_layer_dims.len();
        if n != 5 || self.kernel_sizes.len() != 5 || self.dilations.len() != 5 {
            return Err(Error::Config(format!(
                "frame-level lists must all have 5 entries (dims {}, kernels {}, dilations {})",
                n,
                self.kernel_sizes.len(),
                self.dilations.len()
            )));
        }
        if self.num_speakers < 2 {
            return Err(Error::Config("at least 2 speakers are required".into()));
        }
        if !(1..=5).contains(&self.acnn_layer_index) {
            return Err(Error::Config(format!(
                "acnn_layer_index {} outside 1..=5",
                self.acnn_layer_index
            )));
        }
        if self.utterance_layer_dims.is_empty() {
            return Err(Error::Config("at least one utterance-level layer is required".into()));
        }
        let zero = [self.input_dim, self.attention_hidden, self.pool_size]
            .iter()
            .chain(&self.frame_layer_dims)
            .chain(&self.kernel_sizes)
            .chain(&self.dilations)
            .chain(&self.utterance_layer_dims)
            .any(|&v| v == 0);
        if zero {
            return Err(Error::Config("dimensions, kernels and dilations must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn_momentum must be in (0,1) and bn_epsilon positive".into()));
        }
        Ok(())
    }

    /// Frames consumed by the frame-level receptive field.
    pub fn receptive_shrink(&self) -> usize {
        self.kernel_sizes
            .iter()
            .zip(&self.dilations)
            .map(|(k, d)| (k - 1) * d)
            .sum()
    }

    /// Shortest utterance the network accepts.
    pub fn min_frames(&self) -> usize {
        self.receptive_shrink() + 1
    }

    pub fn embedding_dim(&self) -> usize {
        self.utterance_layer_dims[0]
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.frame_layer_dims[4]
    }

    fn layer_is_acnn(&self, layer: usize) -> bool {
        self.variant.uses_acnn() && layer + 1 == self.acnn_layer_index
    }

    fn layer_is_abn(&self, layer: usize) -> bool {
        self.variant.uses_abn() && !self.layer_is_acnn(layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameConv {
    Static(ConvParams),
    Adaptive(AcnnParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameNorm {
    Batch(BnState),
    Adaptive { stats: RunningStats, params: AbnParams },
}

impl FrameNorm {
    fn stats_mut(&mut self) -> &mut RunningStats {
        match self {
            FrameNorm::Batch(bn) => &mut bn.stats,
            FrameNorm::Adaptive { stats, .. } => stats,
        }
    }

    fn stats(&self) -> &RunningStats {
        match self {
            FrameNorm::Batch(bn) => &bn.stats,
            FrameNorm::Adaptive { stats, .. } => stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLayer {
    pub conv: FrameConv,
    pub norm: FrameNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceLayer {
    pub affine: ConvParams,
    pub bn: BnState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Logits,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ArchConfig,
    pub frame: Vec<FrameLayer>,
    pub utterance: Vec<UtteranceLayer>,
    pub output: ConvParams,
    /// Replaces the regressed mixing coefficients of the adaptive
    /// convolution when set. Not persisted.
    pub beta_override: Option<Array1<f64>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, kernel: usize, c_in: usize, c_out: usize, dilation: usize) -> ConvParams {
        let std = (2.0 / (kernel * c_in) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = ndarray::Array3::from_shape_simple_fn((kernel, c_in, c_out), || normal.sample(&mut self.rng));
        ConvParams {
            weights,
            bias: Array1::zeros(c_out),
            dilation,
        }
    }

    fn vector(&mut self, len: usize) -> Array1<f64> {
        let normal = Normal::new(0.0, (2.0 / len as f64).sqrt()).expect("positive std");
        Array1::from_shape_simple_fn(len, || normal.sample(&mut self.rng))
    }
}

impl Model {
    /// Deterministically initialized network for `config`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (mom, eps) = (config.bn_momentum, config.bn_epsilon);
        let hid = config.attention_hidden;
        let mut frame = Vec::with_capacity(5);
        let mut c_in = config.input_dim;
        for l in 0..5 {
            let c_out = config.frame_layer_dims[l];
            let (k, d) = (config.kernel_sizes[l], config.dilations[l]);
            let conv = if config.layer_is_acnn(l) {
                FrameConv::Adaptive(AcnnParams {
                    value: init.he(1, c_in, hid, 1),
                    score: init.he(1, c_in, hid, 1),
                    score_vector: init.vector(hid),
                    mix: init.he(1, 2 * hid, config.pool_size, 1),
                    pool: (0..config.pool_size).map(|_| init.he(k, c_in, c_out, d)).collect(),
                })
            } else {
                FrameConv::Static(init.he(k, c_in, c_out, d))
            };
            let norm = if config.layer_is_abn(l) {
                // zero generators: the layer starts out as plain BN
                let mut gamma_gen = ConvParams::zeros(1, hid, c_out, 1);
                gamma_gen.bias.fill(1.0);
                FrameNorm::Adaptive {
                    stats: RunningStats::new(c_out, mom, eps),
                    params: AbnParams {
                        context: init.he(1, c_out, hid, 1),
                        gamma_gen,
                        beta_gen: ConvParams::zeros(1, hid, c_out, 1),
                    },
                }
            } else {
                FrameNorm::Batch(BnState::new(c_out, mom, eps))
            };
            frame.push(FrameLayer { conv, norm });
            c_in = c_out;
        }
        let mut utterance = Vec::new();
        let mut c_in = config.pooled_dim();
        for &c_out in &config.utterance_layer_dims {
            utterance.push(UtteranceLayer {
                affine: init.he(1, c_in, c_out, 1),
                bn: BnState::new(c_out, mom, eps),
            });
            c_in = c_out;
        }
        let mut output = init.he(1, c_in, config.num_speakers, 1);
        // unit-variance inputs; keep the initial softmax near uniform
        output.weights.mapv_inplace(|w| w * 0.25);
        Ok(Self {
            config: config.clone(),
            frame,
            utterance,
            output,
            beta_override: None,
        })
    }

    /// Total number of trainable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Gradient container: same structure, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g.beta_override = None;
        g
    }

    pub fn adaptive_layers(&self) -> Vec<usize> {
        self.frame
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.conv, FrameConv::Adaptive(_)))
            .map(|(i, _)| i + 1)
            .collect()
    }

    fn check_batch(&self, batch: &[Matrix]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let min = self.config.min_frames();
        for x in batch {
            if x.ncols() != self.config.input_dim {
                return Err(Error::Shape(format!(
                    "features have {} dimensions, model expects {}",
                    x.ncols(),
                    self.config.input_dim
                )));
            }
            if x.nrows() < min {
                return Err(Error::ReceptiveField {
                    frames: x.nrows(),
                    minimum: min,
                });
            }
        }
        Ok(())
    }

    /// Runs the network, keeping everything the backward pass needs.
    pub fn forward_pass(&self, batch: &[Matrix], mode: Mode, head: Head) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let mut frames = Vec::with_capacity(self.frame.len());
        let mut batch_stats = Vec::new();
        let mut h: Vec<Matrix> = batch.to_vec();
        for layer in &self.frame {
            let (conv_out, conv_cache) = match &layer.conv {
                FrameConv::Static(p) => {
                    let out = h.par_iter().map(|x| conv1d(x.view(), p)).collect::<Result<Vec<_>>>()?;
                    (out, None)
                }
                FrameConv::Adaptive(p) => {
                    let beta = self.beta_override.as_ref().map(|b| b.view());
                    let fwd = h
                        .par_iter()
                        .map(|x| acnn_layer(x.view(), p, beta))
                        .collect::<Result<Vec<_>>>()?;
                    (fwd.iter().map(|f| f.output.clone()).collect(), Some(fwd))
                }
            };
            let act: Vec<Matrix> = conv_out.iter().map(relu).collect();
            let (out, norm_cache, stats) = match &layer.norm {
                FrameNorm::Batch(bn) => {
                    let (y, c, s) = bn_forward(&act, bn, mode)?;
                    (y, NormCache::Batch(c), s)
                }
                FrameNorm::Adaptive { stats, params } => {
                    let (y, c, s) = abn_forward(&act, params, stats, mode)?;
                    (y, NormCache::Adaptive(c), s)
                }
            };
            batch_stats.push(stats);
            frames.push(FrameCache {
                input: std::mem::replace(&mut h, out),
                conv_out,
                conv_cache,
                act,
                norm: norm_cache,
            });
        }
        let pooled_stats: Vec<PooledStats> = h.iter().map(|x| pooling_stats(x.view())).collect::<Result<_>>()?;
        let rows: Vec<Array1<f64>> = pooled_stats.iter().map(|s| s.concat()).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let mut u = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut utt = Vec::with_capacity(self.utterance.len());
        for (i, layer) in self.utterance.iter().enumerate() {
            let pre = conv1d(u.view(), &layer.affine)?;
            if i == 0 && head == Head::Embedding {
                return Ok(ForwardPass {
                    output: pre,
                    output_input: Array2::zeros((0, 0)),
                    frames,
                    last_frame: h,
                    pooled_stats,
                    utterance: utt,
                    batch_stats,
                    head,
                });
            }
            let act = relu(&pre);
            let (y, cache, stats) = bn_forward(std::slice::from_ref(&act), &layer.bn, mode)?;
            batch_stats.push(stats);
            utt.push(UttCache {
                input: std::mem::replace(&mut u, y.into_iter().next().expect("one block")),
                pre,
                norm: cache,
            });
        }
        let logits = conv1d(u.view(), &self.output)?;
        Ok(ForwardPass {
            output: logits,
            output_input: u,
            frames,
            last_frame: h,
            pooled_stats,
            utterance: utt,
            batch_stats,
            head,
        })
    }

    /// Forward pass. In training mode the running statistics are updated.
    pub fn forward(&mut self, batch: &[Matrix], mode: Mode, head: Head) -> Result<Matrix> {
        let pass = self.forward_pass(batch, mode, head)?;
        if mode == Mode::Train {
            self.commit_stats(&pass.batch_stats);
        }
        Ok(pass.output)
    }

    /// Inference-mode forward; a pure function of parameters and input.
    pub fn infer(&self, batch: &[Matrix], head: Head) -> Result<Matrix> {
        Ok(self.forward_pass(batch, Mode::Infer, head)?.output)
    }

    /// Embedding of a single (uncropped) utterance.
    pub fn embed(&self, features: &Matrix) -> Result<Array1<f64>> {
        Ok(self.infer(std::slice::from_ref(features), Head::Embedding)?.row(0).to_owned())
    }

    pub fn commit_stats(&mut self, stats: &[Option<BatchStats>]) {
        let targets = self
            .frame
            .iter_mut()
            .map(|l| l.norm.stats_mut())
            .chain(self.utterance.iter_mut().map(|l| &mut l.bn.stats));
        for (target, s) in targets.zip(stats) {
            if let Some(s) = s {
                target.update(s);
            }
        }
    }

    /// Backpropagates `d_logits` through a logits-head pass, adding the
    /// parameter gradients to `grads`.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &Matrix, grads: &mut Model) -> Result<()> {
        if pass.head != Head::Logits {
            return Err(Error::InvalidArgument("backward needs a logits-head forward pass".into()));
        }
        let g = conv1d_backward(pass.output_input.view(), &self.output, d_logits.view())?;
        grads.output.weights += &g.d_weights;
        grads.output.bias += &g.d_bias;
        let mut d_u = g.d_input;
        for (i, layer) in self.utterance.iter().enumerate().rev() {
            let cache = &pass.utterance[i];
            let d_act = bn_backward(&layer.bn, &cache.norm, std::slice::from_ref(&d_u), &mut grads.utterance[i].bn)?
                .pop()
                .expect("one block");
            let d_pre = relu_backward(&cache.pre, &d_act);
            let g = conv1d_backward(cache.input.view(), &layer.affine, d_pre.view())?;
            grads.utterance[i].affine.weights += &g.d_weights;
            grads.utterance[i].affine.bias += &g.d_bias;
            d_u = g.d_input;
        }
        let mut d_h: Vec<Matrix> = pass
            .last_frame
            .iter()
            .zip(&pass.pooled_stats)
            .zip(d_u.outer_iter())
            .map(|((h, st), d)| stats_pooling_backward(h.view(), st, d))
            .collect();
        for (l, layer) in self.frame.iter().enumerate().rev() {
            let cache = &pass.frames[l];
            let grad_layer = &mut grads.frame[l];
            let d_act = match (&layer.norm, &cache.norm, &mut grad_layer.norm) {
                (FrameNorm::Batch(bn), NormCache::Batch(c), FrameNorm::Batch(g)) => bn_backward(bn, c, &d_h, g)?,
                (FrameNorm::Adaptive { params, .. }, NormCache::Adaptive(c), FrameNorm::Adaptive { params: g, .. }) => {
                    abn_backward(&cache.act, params, c, &d_h, g)?
                }
                _ => return Err(Error::Shape("gradient container does not match the model".into())),
            };
            let d_conv: Vec<Matrix> = cache
                .conv_out
                .iter()
                .zip(&d_act)
                .map(|(pre, g)| relu_backward(pre, g))
                .collect();
            d_h = match (&layer.conv, &mut grad_layer.conv) {
                (FrameConv::Static(p), FrameConv::Static(g)) => {
                    let parts = cache
                        .input
                        .par_iter()
                        .zip(d_conv.par_iter())
                        .map(|(x, d)| conv1d_backward(x.view(), p, d.view()))
                        .collect::<Result<Vec<_>>>()?;
                    let mut d_in = Vec::with_capacity(parts.len());
                    for part in parts {
                        g.weights += &part.d_weights;
                        g.bias += &part.d_bias;
                        d_in.push(part.d_input);
                    }
                    d_in
                }
                (FrameConv::Adaptive(p), FrameConv::Adaptive(g)) => {
                    let fwd = cache.conv_cache.as_ref().expect("adaptive cache");
                    let parts = cache
                        .input
                        .par_iter()
                        .zip(fwd.par_iter())
                        .zip(d_conv.par_iter())
                        .map(|((x, f), d)| {
                            let mut local = p.zeros_like();
                            let dx = acnn_layer_backward(x.view(), p, f, d.view(), &mut local)?;
                            Ok((dx, local))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut d_in = Vec::with_capacity(parts.len());
                    for (dx, local) in parts {
                        g.accumulate(&local);
                        d_in.push(dx);
                    }
                    d_in
                }
                _ => return Err(Error::Shape("gradient container does not match the model".into())),
            };
        }
        Ok(())
    }

    /// One training-mode forward/backward on a labeled batch. Running
    /// statistics are updated; returns mean loss, correct count and grads.
    pub fn train_step(&mut self, batch: &[Matrix], labels: &[usize]) -> Result<(f64, usize, Model)> {
        let pass = self.forward_pass(batch, Mode::Train, Head::Logits)?;
        let (loss, d_logits, correct) = softmax_cross_entropy(pass.output.view(), labels)?;
        let mut grads = self.zeros_like();
        self.backward(&pass, &d_logits, &mut grads)?;
        self.commit_stats(&pass.batch_stats);
        Ok((loss, correct, grads))
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        let frame = self.frame.iter().enumerate().map(|(i, l)| {
            let kind = match l.norm {
                FrameNorm::Batch(_) => "bn",
                FrameNorm::Adaptive { .. } => "abn",
            };
            (format!("frame{}.{kind}", i + 1), l.norm.stats())
        });
        let utt = self
            .utterance
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("utt{}.bn", i + 1), &l.bn.stats));
        frame.chain(utt).collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut RunningStats)> {
        let mut out = Vec::new();
        for (i, l) in self.frame.iter_mut().enumerate() {
            let kind = match l.norm {
                FrameNorm::Batch(_) => "bn",
                FrameNorm::Adaptive { .. } => "abn",
            };
            out.push((format!("frame{}.{kind}", i + 1), l.norm.stats_mut()));
        }
        for (i, l) in self.utterance.iter_mut().enumerate() {
            out.push((format!("utt{}.bn", i + 1), &mut l.bn.stats));
        }
        out
    }

    pub fn to_records(&self) -> RecordFile {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        let mut file = RecordFile::new(CHECKPOINT_MAGIC, header);
        for p in self.params("") {
            file.push(Record::new(p.name, p.shape, p.data.to_vec()));
        }
        for (name, stats) in self.buffers() {
            let c = stats.channels();
            file.push(Record::new(format!("{name}.running_mean"), vec![c], stats.mean.to_vec()));
            file.push(Record::new(format!("{name}.running_var"), vec![c], stats.var.to_vec()));
            file.push(Record::new(
                format!("{name}.initialized"),
                vec![1],
                vec![if stats.initialized { 1.0 } else { 0.0 }],
            ));
        }
        file
    }

    pub fn from_records(file: &RecordFile, path: &Path) -> Result<Self> {
        let config: ArchConfig = serde_json::from_str(&file.header)
            .map_err(|e| Error::format(path, format!("bad config header: {e}")))?;
        let mut model = Model::build(&config, 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<&Record> {
            let r = file
                .get(name)
                .ok_or_else(|| Error::format(path, format!("missing record `{name}`")))?;
            if r.shape != shape {
                return Err(Error::format(
                    path,
                    format!("record `{name}` has shape {:?}, expected {:?}", r.shape, shape),
                ));
            }
            Ok(r)
        };
        for p in model.params_mut("") {
            p.data.copy_from_slice(&fetch(&p.name, &p.shape)?.data);
        }
        for (name, stats) in model.buffers_mut() {
            let c = stats.channels();
            stats.mean = Array1::from(fetch(&format!("{name}.running_mean"), &[c])?.data.clone());
            stats.var = Array1::from(fetch(&format!("{name}.running_var"), &[c])?.data.clone());
            stats.initialized = fetch(&format!("{name}.initialized"), &[1])?.data[0] != 0.0;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_records().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&RecordFile::read(path, CHECKPOINT_MAGIC)?, path)
    }
}

impl Parameters for FrameLayer {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        let mut out = match &self.conv {
            FrameConv::Static(p) => p.params(&join(prefix, "conv")),
            FrameConv::Adaptive(p) => p.params(&join(prefix, "acnn")),
        };
        out.extend(match &self.norm {
            FrameNorm::Batch(bn) => bn.params(&join(prefix, "bn")),
            FrameNorm::Adaptive { params, .. } => params.params(&join(prefix, "abn")),
        });
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = match &mut self.conv {
            FrameConv::Static(p) => p.params_mut(&join(prefix, "conv")),
            FrameConv::Adaptive(p) => p.params_mut(&join(prefix, "acnn")),
        };
        out.extend(match &mut self.norm {
            FrameNorm::Batch(bn) => bn.params_mut(&join(prefix, "bn")),
            FrameNorm::Adaptive { params, .. } => params.params_mut(&join(prefix, "abn")),
        });
        out
    }
}

impl Parameters for Model {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.frame.iter().enumerate() {
            out.extend(l.params(&join(prefix, &format!("frame{}", i + 1))));
        }
        for (i, l) in self.utterance.iter().enumerate() {
            let p = join(prefix, &format!("utt{}", i + 1));
            out.extend(l.affine.params(&join(&p, "affine")));
            out.extend(l.bn.params(&join(&p, "bn")));
        }
        out.extend(self.output.params(&join(prefix, "output")));
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.frame.iter_mut().enumerate() {
            out.extend(l.params_mut(&join(prefix, &format!("frame{}", i + 1))));
        }
        for (i, l) in self.utterance.iter_mut().enumerate() {
            let p = join(prefix, &format!("utt{}", i + 1));
            out.extend(l.affine.params_mut(&join(&p, "affine")));
            out.extend(l.bn.params_mut(&join(&p, "bn")));
        }
        out.extend(self.output.params_mut(&join(prefix, "output")));
        out
    }
}

enum NormCache {
    Batch(BnCache),
    Adaptive(AbnCache),
}

struct FrameCache {
    input: Vec<Matrix>,
    conv_out: Vec<Matrix>,
    conv_cache: Option<Vec<AcnnForward>>,
    act: Vec<Matrix>,
    norm: NormCache,
}

struct UttCache {
    input: Matrix,
    pre: Matrix,
    norm: BnCache,
}

/// Output of [`Model::forward_pass`] plus the intermediate values needed by
/// [`Model::backward`].
pub struct ForwardPass {
    pub output: Matrix,
    output_input: Matrix,
    frames: Vec<FrameCache>,
    last_frame: Vec<Matrix>,
    pooled_stats: Vec<PooledStats>,
    utterance: Vec<UttCache>,
    batch_stats: Vec<Option<BatchStats>>,
    head: Head,
}

impl ForwardPass {
    /// Output of the last frame-level layer, one matrix per utterance.
    pub fn frame_output(&self) -> &[Matrix] {
        &self.last_frame
    }

    pub fn batch_stats(&self) -> &[Option<BatchStats>] {
        &self.batch_stats
    }
}

/// Splits a `B × T × D` tensor into per-utterance matrices.
pub fn split_batch(batch: &Tensor3) -> Vec<Matrix> {
    batch.outer_iter().map(|m| m.to_owned()).collect()
}

/// Utterance-level head applied to already pooled vectors (`B × 2C`),
/// returning embeddings. Used to probe the network at the pooling boundary.
pub fn embed_pooled(model: &Model, pooled: &Matrix) -> Result<Matrix> {
    conv1d(pooled.view(), &model.utterance[0].affine)
}
