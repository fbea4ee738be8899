//! Network building blocks: batch normalization, statistics pooling, the
//! adaptive convolution block and the adaptive batch normalization block.
//!
//! Batched frame-level tensors are passed as one `T × C` matrix per
//! utterance. Normalization statistics are shared across the whole batch,
//! everything else is computed per utterance.

use ndarray::{s, Array1, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics::{
    conv1d, conv1d_backward, softmax, softmax_backward, tanh_backward, weighted_stats_backward,
    weighted_stats_unchecked, ConvParams, Matrix, WeightedStats,
};
use crate::params::{view, view_mut, join, Param, ParamKind, ParamMut, Parameters};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running normalization statistics, updated only in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// False until a training update or an explicit assignment.
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
            momentum,
            epsilon,
            initialized: false,
        }
    }

    pub fn with_values(mean: Array1<f64>, var: Array1<f64>, momentum: f64, epsilon: f64) -> Self {
        Self {
            mean,
            var,
            momentum,
            epsilon,
            initialized: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average towards the batch statistics.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        self.mean.zip_mut_with(&batch.mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.var.zip_mut_with(&batch.var, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.initialized = true;
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Conventional batch normalization: running statistics plus a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub stats: RunningStats,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl BnState {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            stats: RunningStats::new(channels, momentum, epsilon),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }
}

impl Parameters for BnState {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        vec![
            view(prefix, "gamma", ParamKind::Affine, &self.gamma),
            view(prefix, "beta", ParamKind::Affine, &self.beta),
        ]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            view_mut(prefix, "gamma", ParamKind::Affine, &mut self.gamma),
            view_mut(prefix, "beta", ParamKind::Affine, &mut self.beta),
        ]
    }
}

/// Intermediate values of the normalization step.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub x_hat: Matrix,
    inv_std: Array1<f64>,
    mode: Mode,
}

/// Normalizes `rows × C` data per channel.
///
/// Training mode uses the statistics of `x` itself and returns them so the
/// caller can commit them to the running averages; inference mode uses the
/// running statistics.
pub fn normalize(x: ArrayView2<f64>, stats: &RunningStats, mode: Mode) -> Result<(NormCache, Option<BatchStats>)> {
    if x.ncols() != stats.channels() {
        return Err(Error::Shape(format!(
            "normalization over {} channels applied to {} channels",
            stats.channels(),
            x.ncols()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("normalization of an empty batch".into()));
    }
    let (mean, var, batch) = match mode {
        Mode::Train => {
            let mean = x.mean_axis(Axis(0)).expect("nonempty");
            let var = x.var_axis(Axis(0), 0.0);
            let batch = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(batch))
        }
        Mode::Infer => {
            if !stats.initialized {
                return Err(Error::UninitializedStats);
            }
            (stats.mean.clone(), stats.var.clone(), None)
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + stats.epsilon).sqrt());
    let mut x_hat = x.to_owned();
    for mut row in x_hat.outer_iter_mut() {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    Ok((NormCache { x_hat, inv_std, mode }, batch))
}

/// Gradient of [`normalize`] with respect to its input.
pub fn normalize_backward(cache: &NormCache, d_xhat: ArrayView2<f64>) -> Matrix {
    match cache.mode {
        Mode::Infer => &d_xhat * &cache.inv_std,
        Mode::Train => {
            let n = d_xhat.nrows() as f64;
            let sum = d_xhat.sum_axis(Axis(0));
            let dot = (&d_xhat * &cache.x_hat).sum_axis(Axis(0));
            let mut dx = d_xhat.to_owned();
            for (mut row, xh) in dx.outer_iter_mut().zip(cache.x_hat.outer_iter()) {
                for c in 0..row.len() {
                    row[c] = cache.inv_std[c] / n * (n * row[c] - sum[c] - xh[c] * dot[c]);
                }
            }
            dx
        }
    }
}

fn apply_affine(x_hat: ArrayView2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Matrix {
    let mut y = x_hat.to_owned();
    for mut row in y.outer_iter_mut() {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = g * *v + b;
        }
    }
    y
}

/// Batch normalization of `rows × C` data; in training mode the running
/// statistics are updated in place.
pub fn batch_norm(x: ArrayView2<f64>, state: &mut BnState, mode: Mode) -> Result<Matrix> {
    let (cache, batch) = normalize(x, &state.stats, mode)?;
    if let Some(b) = batch {
        state.stats.update(&b);
    }
    Ok(apply_affine(cache.x_hat.view(), &state.gamma, &state.beta))
}

/// Stacks per-utterance frame matrices into one `Σ T_u × C` matrix.
pub fn stack_rows(xs: &[Matrix]) -> Result<Matrix> {
    let views: Vec<_> = xs.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn split_rows(m: &Matrix, lens: &[usize]) -> Vec<Matrix> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let part = m.slice(s![start..start + len, ..]).to_owned();
            start += len;
            part
        })
        .collect()
}

/// Cached state of a batched conventional BN forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    norm: NormCache,
    lens: Vec<usize>,
}

/// Batch normalization over every frame of every utterance.
pub fn bn_forward(xs: &[Matrix], state: &BnState, mode: Mode) -> Result<(Vec<Matrix>, BnCache, Option<BatchStats>)> {
    let lens: Vec<usize> = xs.iter().map(|x| x.nrows()).collect();
    let stacked = stack_rows(xs)?;
    let (norm, batch) = normalize(stacked.view(), &state.stats, mode)?;
    let y = apply_affine(norm.x_hat.view(), &state.gamma, &state.beta);
    Ok((split_rows(&y, &lens), BnCache { norm, lens }, batch))
}

/// Backward of [`bn_forward`]; affine gradients are written to `grads`.
pub fn bn_backward(state: &BnState, cache: &BnCache, d_ys: &[Matrix], grads: &mut BnState) -> Result<Vec<Matrix>> {
    let dy = stack_rows(d_ys)?;
    grads.gamma += &(&dy * &cache.norm.x_hat).sum_axis(Axis(0));
    grads.beta += &dy.sum_axis(Axis(0));
    let d_xhat = &dy * &state.gamma;
    let dx = normalize_backward(&cache.norm, d_xhat.view());
    Ok(split_rows(&dx, &cache.lens))
}

/// Mean and standard deviation over frames, concatenated as `[mean, std]`.
pub fn stats_pooling(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    Ok(pooling_stats(h)?.concat())
}

/// Uniform-weight statistics; keep the result for [`stats_pooling_backward`].
pub fn pooling_stats(h: ArrayView2<f64>) -> Result<PooledStats> {
    let t = h.nrows();
    if t == 0 {
        return Err(Error::InvalidArgument("pooling over zero frames".into()));
    }
    let w = Array1::from_elem(t, 1.0 / t as f64);
    Ok(PooledStats(weighted_stats_unchecked(h, w.view())))
}

#[derive(Clone, Debug)]
pub struct PooledStats(pub WeightedStats);

impl PooledStats {
    pub fn concat(&self) -> Array1<f64> {
        ndarray::concatenate(Axis(0), &[self.0.mean.view(), self.0.std.view()]).expect("same rank")
    }
}

pub fn stats_pooling_backward(h: ArrayView2<f64>, stats: &PooledStats, d_pooled: ArrayView1<f64>) -> Matrix {
    let c = h.ncols();
    let t = h.nrows();
    let w = Array1::from_elem(t, 1.0 / t as f64);
    weighted_stats_backward(h, w.view(), &stats.0, d_pooled.slice(s![..c]), d_pooled.slice(s![c..])).0
}

fn row(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

/// Parameters of an adaptive convolution layer.
///
/// The attention maps are width-1 convolutions. The mixing regression maps
/// the `2H` context to `N` unconstrained coefficients, one per pool filter.
#[derive(Clone, Debug, PartialEq)]
pub struct AcnnParams {
    /// `C_in → H` value map.
    pub value: ConvParams,
    /// `C_in → H` attention score map, followed by tanh.
    pub score: ConvParams,
    /// Projects the `H` score activations to a scalar per frame.
    pub score_vector: Array1<f64>,
    /// `2H → N` regression producing the mixing coefficients.
    pub mix: ConvParams,
    /// Component filters, all with the same shape and dilation.
    pub pool: Vec<ConvParams>,
}

impl AcnnParams {
    pub fn hidden(&self) -> usize {
        self.score_vector.len()
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .pool
            .first()
            .ok_or_else(|| Error::Shape("adaptive convolution needs at least one pool filter".into()))?;
        if let Some(bad) = self.pool.iter().position(|p| !p.same_shape(first) || p.bias.len() != first.bias.len()) {
            return Err(Error::Shape(format!("pool filter {bad} differs in shape from filter 0")));
        }
        let h = self.hidden();
        let c_in = first.c_in();
        let maps_ok = [&self.value, &self.score]
            .iter()
            .all(|m| m.kernel() == 1 && m.c_in() == c_in && m.c_out() == h);
        if !maps_ok {
            return Err(Error::Shape(format!("attention maps must be width-1 {c_in}→{h} convolutions")));
        }
        if self.mix.kernel() != 1 || self.mix.c_in() != 2 * h || self.mix.c_out() != self.pool.len() {
            return Err(Error::Shape(format!(
                "mixing regression must map {} → {}",
                2 * h,
                self.pool.len()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &ConvParams| ConvParams::zeros(p.kernel(), p.c_in(), p.c_out(), p.dilation);
        Self {
            value: z(&self.value),
            score: z(&self.score),
            score_vector: Array1::zeros(self.score_vector.len()),
            mix: z(&self.mix),
            pool: self.pool.iter().map(z).collect(),
        }
    }

    /// Parameters a static convolution of the pool's shape would have.
    pub fn static_equivalent_params(&self) -> usize {
        self.pool.first().map_or(0, |p| p.num_params())
    }
}

impl Parameters for AcnnParams {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        let mut out = self.value.params(&join(prefix, "value"));
        out.extend(self.score.params(&join(prefix, "score")));
        out.push(view(prefix, "score_vector", ParamKind::Weight, &self.score_vector));
        out.extend(self.mix.params(&join(prefix, "mix")));
        for (i, p) in self.pool.iter().enumerate() {
            out.extend(p.params(&join(prefix, &format!("pool{i}"))));
        }
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.value.params_mut(&join(prefix, "value"));
        out.extend(self.score.params_mut(&join(prefix, "score")));
        out.push(view_mut(prefix, "score_vector", ParamKind::Weight, &mut self.score_vector));
        out.extend(self.mix.params_mut(&join(prefix, "mix")));
        for (i, p) in self.pool.iter_mut().enumerate() {
            out.extend(p.params_mut(&join(prefix, &format!("pool{i}"))));
        }
        out
    }
}

/// Attention context of one utterance plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct AcnnContext {
    /// `[μ, σ]`, length `2H`.
    pub context: Array1<f64>,
    /// Frame attention weights, a probability vector.
    pub weights: Array1<f64>,
    values: Matrix,
    score_act: Matrix,
    stats: WeightedStats,
}

/// Attentive statistics of the value vectors: scores `vᵀ tanh(h W_α + b_α)`
/// are softmax-normalized over frames and weight the mean and standard
/// deviation of `e = h W_e + b_e`.
pub fn acnn_context(h: ArrayView2<f64>, p: &AcnnParams) -> Result<AcnnContext> {
    if h.nrows() == 0 {
        return Err(Error::InvalidArgument("attention over zero frames".into()));
    }
    let values = conv1d(h, &p.value)?;
    let score_act = conv1d(h, &p.score)?.mapv(f64::tanh);
    let scores = score_act.dot(&p.score_vector);
    let weights = softmax(scores.view())?;
    let stats = weighted_stats_unchecked(values.view(), weights.view());
    let context = ndarray::concatenate(Axis(0), &[stats.mean.view(), stats.std.view()]).expect("same rank");
    Ok(AcnnContext {
        context,
        weights,
        values,
        score_act,
        stats,
    })
}

/// Backward of [`acnn_context`]. Attention-map gradients are added to
/// `grads`; returns the gradient with respect to `h`.
pub fn acnn_context_backward(
    h: ArrayView2<f64>,
    p: &AcnnParams,
    ctx: &AcnnContext,
    d_context: ArrayView1<f64>,
    grads: &mut AcnnParams,
) -> Result<Matrix> {
    let hid = p.hidden();
    let (d_values, d_weights) = weighted_stats_backward(
        ctx.values.view(),
        ctx.weights.view(),
        &ctx.stats,
        d_context.slice(s![..hid]),
        d_context.slice(s![hid..]),
    );
    let d_scores = softmax_backward(ctx.weights.view(), d_weights.view());
    grads.score_vector += &ctx.score_act.t().dot(&d_scores);
    let d_act = d_scores.insert_axis(Axis(1)).dot(&row(p.score_vector.view()));
    let d_pre = tanh_backward(&ctx.score_act, &d_act);

    let score_g = conv1d_backward(h, &p.score, d_pre.view())?;
    grads.score.weights += &score_g.d_weights;
    grads.score.bias += &score_g.d_bias;
    let value_g = conv1d_backward(h, &p.value, d_values.view())?;
    grads.value.weights += &value_g.d_weights;
    grads.value.bias += &value_g.d_bias;
    Ok(score_g.d_input + value_g.d_input)
}

/// Mixing coefficients `β = W_β c + b_β` (no normalization).
pub fn acnn_mixing(context: ArrayView1<f64>, p: &AcnnParams) -> Result<Array1<f64>> {
    Ok(conv1d(row(context), &p.mix)?.row(0).to_owned())
}

/// `W̃ = Σ β_i W_i`, `b̃ = Σ β_i b_i`.
pub fn mix_filters(beta: ArrayView1<f64>, pool: &[ConvParams]) -> Result<ConvParams> {
    let first = pool
        .first()
        .ok_or_else(|| Error::Shape("empty filter pool".into()))?;
    if beta.len() != pool.len() {
        return Err(Error::Shape(format!(
            "{} mixing coefficients for {} pool filters",
            beta.len(),
            pool.len()
        )));
    }
    let mut out = ConvParams::zeros(first.kernel(), first.c_in(), first.c_out(), first.dilation);
    for (b, p) in beta.iter().zip(pool) {
        if !p.same_shape(first) {
            return Err(Error::Shape("pool filters differ in shape".into()));
        }
        out.weights.scaled_add(*b, &p.weights);
        out.bias.scaled_add(*b, &p.bias);
    }
    Ok(out)
}

/// Generates the per-utterance filter from a context vector.
pub fn acnn_filters(context: ArrayView1<f64>, p: &AcnnParams) -> Result<(ConvParams, Array1<f64>)> {
    p.validate()?;
    let beta = acnn_mixing(context, p)?;
    Ok((mix_filters(beta.view(), &p.pool)?, beta))
}

/// Forward state of one utterance through an adaptive convolution.
#[derive(Clone, Debug)]
pub struct AcnnForward {
    pub output: Matrix,
    pub beta: Array1<f64>,
    pub filters: ConvParams,
    /// Absent when the mixing coefficients were overridden.
    pub context: Option<AcnnContext>,
}

/// Context → filter generation → convolution, for one utterance.
///
/// `beta_override` replaces the regressed mixing coefficients; the
/// attention path is then skipped.
pub fn acnn_layer(h: ArrayView2<f64>, p: &AcnnParams, beta_override: Option<ArrayView1<f64>>) -> Result<AcnnForward> {
    p.validate()?;
    let (context, beta) = match beta_override {
        Some(b) => (None, b.to_owned()),
        None => {
            let ctx = acnn_context(h, p)?;
            let beta = acnn_mixing(ctx.context.view(), p)?;
            (Some(ctx), beta)
        }
    };
    let filters = mix_filters(beta.view(), &p.pool)?;
    let output = conv1d(h, &filters)?;
    Ok(AcnnForward {
        output,
        beta,
        filters,
        context,
    })
}

/// Backward of [`acnn_layer`]; parameter gradients are added to `grads`.
pub fn acnn_layer_backward(
    h: ArrayView2<f64>,
    p: &AcnnParams,
    fwd: &AcnnForward,
    d_out: ArrayView2<f64>,
    grads: &mut AcnnParams,
) -> Result<Matrix> {
    let conv_g = conv1d_backward(h, &fwd.filters, d_out)?;
    let mut d_h = conv_g.d_input;
    let mut d_beta = Array1::zeros(p.pool.len());
    for (i, (pool_p, pool_g)) in p.pool.iter().zip(grads.pool.iter_mut()).enumerate() {
        d_beta[i] = (&conv_g.d_weights * &pool_p.weights).sum() + conv_g.d_bias.dot(&pool_p.bias);
        pool_g.weights.scaled_add(fwd.beta[i], &conv_g.d_weights);
        pool_g.bias.scaled_add(fwd.beta[i], &conv_g.d_bias);
    }
    if let Some(ctx) = &fwd.context {
        let mix_g = conv1d_backward(row(ctx.context.view()), &p.mix, row(d_beta.view()))?;
        grads.mix.weights += &mix_g.d_weights;
        grads.mix.bias += &mix_g.d_bias;
        d_h += &acnn_context_backward(h, p, ctx, mix_g.d_input.row(0), grads)?;
    }
    Ok(d_h)
}

/// Parameters of adaptive batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AbnParams {
    /// `C → H` context map, followed by tanh.
    pub context: ConvParams,
    /// `H → C` scale generator.
    pub gamma_gen: ConvParams,
    /// `H → C` shift generator.
    pub beta_gen: ConvParams,
}

impl AbnParams {
    pub fn channels(&self) -> usize {
        self.context.c_in()
    }

    pub fn hidden(&self) -> usize {
        self.context.c_out()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels(), self.hidden());
        let gens_ok = [&self.gamma_gen, &self.beta_gen]
            .iter()
            .all(|g| g.kernel() == 1 && g.c_in() == h && g.c_out() == c);
        if self.context.kernel() != 1 || !gens_ok {
            return Err(Error::Shape(format!(
                "adaptive normalization expects a width-1 {c}→{h} context map and {h}→{c} generators"
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &ConvParams| ConvParams::zeros(p.kernel(), p.c_in(), p.c_out(), p.dilation);
        Self {
            context: z(&self.context),
            gamma_gen: z(&self.gamma_gen),
            beta_gen: z(&self.beta_gen),
        }
    }

    /// Per-utterance `(γ, β)` from a context vector.
    pub fn generate(&self, context: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let gamma = conv1d(row(context), &self.gamma_gen)?.row(0).to_owned();
        let beta = conv1d(row(context), &self.beta_gen)?.row(0).to_owned();
        Ok((gamma, beta))
    }
}

impl Parameters for AbnParams {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        let mut out = self.context.params(&join(prefix, "context"));
        out.extend(self.gamma_gen.params(&join(prefix, "gamma_gen")));
        out.extend(self.beta_gen.params(&join(prefix, "beta_gen")));
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.context.params_mut(&join(prefix, "context"));
        out.extend(self.gamma_gen.params_mut(&join(prefix, "gamma_gen")));
        out.extend(self.beta_gen.params_mut(&join(prefix, "beta_gen")));
        out
    }
}

#[derive(Clone, Debug)]
pub struct AbnContext {
    /// Length `H`.
    pub context: Array1<f64>,
    /// Frame weights, a probability vector.
    pub weights: Array1<f64>,
    activations: Matrix,
}

/// `e_t = tanh(W_e h_t + b_e)`, frame weights are the softmax over frames of
/// `mean(e_t)`, and the context is `Σ_t α_t e_t`.
pub fn abn_context(h: ArrayView2<f64>, p: &AbnParams) -> Result<AbnContext> {
    if h.nrows() == 0 {
        return Err(Error::InvalidArgument("attention over zero frames".into()));
    }
    let activations = conv1d(h, &p.context)?.mapv(f64::tanh);
    let importance = activations.mean_axis(Axis(1)).expect("hidden size is nonzero");
    let weights = softmax(importance.view())?;
    let context = weights.dot(&activations);
    Ok(AbnContext {
        context,
        weights,
        activations,
    })
}

pub fn abn_context_backward(
    h: ArrayView2<f64>,
    p: &AbnParams,
    ctx: &AbnContext,
    d_context: ArrayView1<f64>,
    grads: &mut AbnParams,
) -> Result<Matrix> {
    let hid = p.hidden() as f64;
    let d_weights = ctx.activations.dot(&d_context);
    let d_importance = softmax_backward(ctx.weights.view(), d_weights.view());
    let mut d_act = ctx.weights.view().insert_axis(Axis(1)).dot(&row(d_context));
    for (mut r, &g) in d_act.outer_iter_mut().zip(&d_importance) {
        r += g / hid;
    }
    let d_pre = tanh_backward(&ctx.activations, &d_act);
    let g = conv1d_backward(h, &p.context, d_pre.view())?;
    grads.context.weights += &g.d_weights;
    grads.context.bias += &g.d_bias;
    Ok(g.d_input)
}

/// Cached state of [`abn_forward`].
#[derive(Clone, Debug)]
pub struct AbnCache {
    norm: NormCache,
    lens: Vec<usize>,
    contexts: Vec<AbnContext>,
    affine: Vec<(Array1<f64>, Array1<f64>)>,
}

/// Normalizes the batch like BN but applies per-utterance generated
/// `γ_u = W_γ c_u + b_γ`, `β_u = W_β c_u + b_β` instead of a fixed affine.
pub fn abn_apply(
    xs: &[Matrix],
    stats: &RunningStats,
    contexts: &[ArrayView1<f64>],
    p: &AbnParams,
    mode: Mode,
) -> Result<(Vec<Matrix>, Option<BatchStats>)> {
    let (ys, _, _, batch) = abn_apply_inner(xs, stats, contexts, p, mode)?;
    Ok((ys, batch))
}

type AbnApplyParts = (Vec<Matrix>, NormCache, Vec<(Array1<f64>, Array1<f64>)>, Option<BatchStats>);

fn abn_apply_inner(
    xs: &[Matrix],
    stats: &RunningStats,
    contexts: &[ArrayView1<f64>],
    p: &AbnParams,
    mode: Mode,
) -> Result<AbnApplyParts> {
    p.validate()?;
    if contexts.len() != xs.len() {
        return Err(Error::Shape(format!(
            "{} contexts for a batch of {} utterances",
            contexts.len(),
            xs.len()
        )));
    }
    let lens: Vec<usize> = xs.iter().map(|x| x.nrows()).collect();
    let stacked = stack_rows(xs)?;
    let (norm, batch) = normalize(stacked.view(), stats, mode)?;
    let affine = contexts
        .iter()
        .map(|c| p.generate(*c))
        .collect::<Result<Vec<_>>>()?;
    let mut ys = Vec::with_capacity(xs.len());
    let mut start = 0;
    for (len, (gamma, beta)) in lens.iter().zip(&affine) {
        ys.push(apply_affine(norm.x_hat.slice(s![start..start + len, ..]), gamma, beta));
        start += len;
    }
    Ok((ys, norm, affine, batch))
}

/// Adaptive batch normalization of a batch, with each utterance's context
/// computed from its own input frames.
pub fn abn_forward(
    xs: &[Matrix],
    p: &AbnParams,
    stats: &RunningStats,
    mode: Mode,
) -> Result<(Vec<Matrix>, AbnCache, Option<BatchStats>)> {
    let contexts = xs
        .iter()
        .map(|x| abn_context(x.view(), p))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = contexts.iter().map(|c| c.context.view()).collect();
    let (ys, norm, affine, batch) = abn_apply_inner(xs, stats, &views, p, mode)?;
    let lens = xs.iter().map(|x| x.nrows()).collect();
    Ok((
        ys,
        AbnCache {
            norm,
            lens,
            contexts,
            affine,
        },
        batch,
    ))
}

pub fn abn_backward(
    xs: &[Matrix],
    p: &AbnParams,
    cache: &AbnCache,
    d_ys: &[Matrix],
    grads: &mut AbnParams,
) -> Result<Vec<Matrix>> {
    let mut d_xhat_parts = Vec::with_capacity(xs.len());
    let mut d_xs_ctx = Vec::with_capacity(xs.len());
    let mut start = 0;
    for (u, dy) in d_ys.iter().enumerate() {
        let len = cache.lens[u];
        let x_hat = cache.norm.x_hat.slice(s![start..start + len, ..]);
        start += len;
        let (gamma, _) = &cache.affine[u];
        let d_gamma = (dy * &x_hat).sum_axis(Axis(0));
        let d_beta = dy.sum_axis(Axis(0));
        d_xhat_parts.push(dy * gamma);

        let ctx = &cache.contexts[u];
        let c_row = row(ctx.context.view());
        let gg = conv1d_backward(c_row, &p.gamma_gen, row(d_gamma.view()))?;
        let gb = conv1d_backward(c_row, &p.beta_gen, row(d_beta.view()))?;
        grads.gamma_gen.weights += &gg.d_weights;
        grads.gamma_gen.bias += &gg.d_bias;
        grads.beta_gen.weights += &gb.d_weights;
        grads.beta_gen.bias += &gb.d_bias;
        let d_context = gg.d_input.row(0).to_owned() + gb.d_input.row(0);
        d_xs_ctx.push(abn_context_backward(xs[u].view(), p, ctx, d_context.view(), grads)?);
    }
    let d_xhat = stack_rows(&d_xhat_parts)?;
    let dx = normalize_backward(&cache.norm, d_xhat.view());
    let mut out = split_rows(&dx, &cache.lens);
    for (o, c) in out.iter_mut().zip(d_xs_ctx) {
        *o += &c;
    }
    Ok(out)
}
