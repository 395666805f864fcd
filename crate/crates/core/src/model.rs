//! Toy conditional denoiser and DDPM machinery.
//!
//! The noise predictor is
//!
//! ```text
//! h    = W_in·x_t + W_time·τ(t)
//! q    = W_Q·h
//! k_j  = W_K·E(c_j),  v_j = W_V·E(c_j)        j ∈ {style, object}
//! w    = softmax(q·k_j / √d_k)
//! ctx  = Σ_j w_j v_j
//! ε̂    = W_out·relu(W_mlp1·[h; ctx] + b_mlp1) + b_out
//! ```
//!
//! with `τ` a sinusoidal time embedding. Gradients are written out by hand.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_key, tags, RngStream};
use crate::tensor::{dot, matvec_into, matvec_t_acc, outer_acc, Tensor};
use crate::unlearning::UnlearnRequest;
use crate::world::{sample_image, Classifiers, Prompt, World};

/// Identifier of the sampler recorded in checkpoints.
pub const SAMPLER_ID: &str = "ddpm-ancestral-posterior-variance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub mlp_hidden: usize,
}

impl ModelDims {
    pub fn for_world(world: &World) -> Self {
        Self {
            data_dim: world.data_dim(),
            embed_dim: world.embed_dim(),
            ..Self::default()
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            data_dim: 32,
            embed_dim: 16,
            time_dim: 16,
            hidden: 64,
            key_dim: 32,
            value_dim: 32,
            mlp_hidden: 256,
        }
    }
}

/// Parameter blocks of the denoiser, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Block {
    #[serde(rename = "W_in")]
    WIn,
    #[serde(rename = "W_time")]
    WTime,
    #[serde(rename = "W_Q")]
    WQ,
    #[serde(rename = "W_K")]
    WK,
    #[serde(rename = "W_V")]
    WV,
    #[serde(rename = "W_mlp1")]
    WMlp1,
    #[serde(rename = "b_mlp1")]
    BMlp1,
    #[serde(rename = "W_out")]
    WOut,
    #[serde(rename = "b_out")]
    BOut,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::WIn,
        Block::WTime,
        Block::WQ,
        Block::WK,
        Block::WV,
        Block::WMlp1,
        Block::BMlp1,
        Block::WOut,
        Block::BOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::WIn => "W_in",
            Block::WTime => "W_time",
            Block::WQ => "W_Q",
            Block::WK => "W_K",
            Block::WV => "W_V",
            Block::WMlp1 => "W_mlp1",
            Block::BMlp1 => "b_mlp1",
            Block::WOut => "W_out",
            Block::BOut => "b_out",
        }
    }

    pub fn from_name(name: &str) -> Option<Block> {
        Block::ALL.iter().copied().find(|b| b.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `W_K` and `W_V` map concept embeddings to keys and values.
    pub fn is_projection(self) -> bool {
        matches!(self, Block::WK | Block::WV)
    }

    pub fn shape(self, d: &ModelDims) -> Vec<usize> {
        match self {
            Block::WIn => vec![d.hidden, d.data_dim],
            Block::WTime => vec![d.hidden, d.time_dim],
            Block::WQ => vec![d.key_dim, d.hidden],
            Block::WK => vec![d.key_dim, d.embed_dim],
            Block::WV => vec![d.value_dim, d.embed_dim],
            Block::WMlp1 => vec![d.mlp_hidden, d.hidden + d.value_dim],
            Block::BMlp1 => vec![d.mlp_hidden],
            Block::WOut => vec![d.data_dim, d.mlp_hidden],
            Block::BOut => vec![d.data_dim],
        }
    }
}

/// Named parameter blocks; also used for gradients and update deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    blocks: Vec<Tensor>,
}

impl DenoiserParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            blocks: Block::ALL.iter().map(|b| Tensor::zeros(&b.shape(&dims))).collect(),
        }
    }

    /// Gaussian init with variance `1/fan_in` for weights; zero biases.
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(dims);
        for b in Block::ALL {
            if matches!(b, Block::BMlp1 | Block::BOut) {
                continue;
            }
            let t = p.block_mut(b);
            let fan_in = t.cols() as f64;
            let s = 1.0 / math::sqrt(fan_in);
            for v in t.data_mut() {
                *v = s * rng.standard_normal();
            }
        }
        p
    }

    pub fn from_tensors(dims: ModelDims, blocks: Vec<Tensor>) -> Result<Self> {
        if blocks.len() != Block::ALL.len() {
            bail!(Shape, "expected {} blocks, got {}", Block::ALL.len(), blocks.len());
        }
        for (b, t) in Block::ALL.iter().zip(&blocks) {
            if t.shape() != b.shape(&dims).as_slice() {
                bail!(Shape, "block {} has shape {:?}, expected {:?}", b.name(), t.shape(), b.shape(&dims));
            }
        }
        Ok(Self { dims, blocks })
    }

    pub fn block(&self, b: Block) -> &Tensor {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut Tensor {
        &mut self.blocks[b.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.blocks
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            bail!(Shape, "parameter dims differ: {:?} vs {:?}", self.dims, other.dims);
        }
        Ok(())
    }

    /// `self − other`, block by block.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims: self.dims, blocks })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.blocks {
            t.scale(alpha);
        }
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        for t in &self.blocks {
            t.check_finite(what)?;
        }
        Ok(())
    }

    /// Iterate `(block, flat index, value)` over every scalar in storage order.
    pub fn iter_coords(&self) -> impl Iterator<Item = (Block, usize, f64)> + '_ {
        Block::ALL
            .iter()
            .flat_map(move |&b| self.block(b).data().iter().enumerate().map(move |(i, &v)| (b, i, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Precondition, "schedule needs at least one step");
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            bail!(Precondition, "betas must lie in (0, 1)");
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Precondition, "betas must be strictly increasing");
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noising(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= schedule.steps() {
        bail!(Precondition, "step {t} outside schedule of {} steps", schedule.steps());
    }
    if x0.len() != eps.len() {
        bail!(Shape, "x0 has {} entries, eps has {}", x0.len(), eps.len());
    }
    Ok(noise_with_alpha_bar(x0, schedule.alpha_bar[t], eps))
}

pub(crate) fn noise_with_alpha_bar(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let a = math::sqrt(alpha_bar);
    let s = math::sqrt(1.0 - alpha_bar);
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Sinusoidal embedding of step `t` out of `steps`, positions rescaled to a
/// 1000-step horizon.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let pos = t as f64 * 1000.0 / steps as f64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = math::pow(10_000.0, -(i as f64) / half.max(1) as f64);
        out[2 * i] = math::sin(pos * freq);
        out[2 * i + 1] = math::cos(pos * freq);
    }
    out
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Activations {
    x: Vec<f64>,
    te: Vec<f64>,
    h: Vec<f64>,
    q: Vec<f64>,
    k: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
    w: [f64; 2],
    cat: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    out: Vec<f64>,
}

impl Activations {
    fn new(d: &ModelDims) -> Self {
        Self {
            x: vec![0.0; d.data_dim],
            te: vec![0.0; d.time_dim],
            h: vec![0.0; d.hidden],
            q: vec![0.0; d.key_dim],
            k: [vec![0.0; d.key_dim], vec![0.0; d.key_dim]],
            v: [vec![0.0; d.value_dim], vec![0.0; d.value_dim]],
            w: [0.0; 2],
            cat: vec![0.0; d.hidden + d.value_dim],
            z: vec![0.0; d.mlp_hidden],
            a: vec![0.0; d.mlp_hidden],
            out: vec![0.0; d.data_dim],
        }
    }
}

/// Embeddings of the prompt's two tokens: style then object.
fn tokens<'w>(world: &'w World, prompt: &Prompt) -> [&'w [f64]; 2] {
    [world.embedding(prompt.style_id), world.embedding(prompt.object_id)]
}

fn forward(p: &DenoiserParams, x_t: &[f64], tok: [&[f64]; 2], te: &[f64], act: &mut Activations) {
    let d = &p.dims;
    act.x.copy_from_slice(x_t);
    act.te.copy_from_slice(te);
    matvec_into(p.block(Block::WIn).data(), d.data_dim, x_t, &mut act.h);
    let mut ht = vec![0.0; d.hidden];
    matvec_into(p.block(Block::WTime).data(), d.time_dim, te, &mut ht);
    for (a, b) in act.h.iter_mut().zip(&ht) {
        *a += b;
    }
    matvec_into(p.block(Block::WQ).data(), d.hidden, &act.h, &mut act.q);
    let inv = 1.0 / math::sqrt(d.key_dim as f64);
    let mut s = [0.0; 2];
    for j in 0..2 {
        matvec_into(p.block(Block::WK).data(), d.embed_dim, tok[j], &mut act.k[j]);
        matvec_into(p.block(Block::WV).data(), d.embed_dim, tok[j], &mut act.v[j]);
        s[j] = dot(&act.q, &act.k[j]) * inv;
    }
    let m = s[0].max(s[1]);
    let e0 = math::exp(s[0] - m);
    let e1 = math::exp(s[1] - m);
    act.w = [e0 / (e0 + e1), e1 / (e0 + e1)];
    act.cat[..d.hidden].copy_from_slice(&act.h);
    for (i, c) in act.cat[d.hidden..].iter_mut().enumerate() {
        *c = act.w[0] * act.v[0][i] + act.w[1] * act.v[1][i];
    }
    matvec_into(p.block(Block::WMlp1).data(), d.hidden + d.value_dim, &act.cat, &mut act.z);
    for ((z, b), a) in act.z.iter_mut().zip(p.block(Block::BMlp1).data()).zip(&mut act.a) {
        *z += b;
        *a = z.max(0.0);
    }
    matvec_into(p.block(Block::WOut).data(), d.mlp_hidden, &act.a, &mut act.out);
    for (o, b) in act.out.iter_mut().zip(p.block(Block::BOut).data()) {
        *o += b;
    }
}

/// Accumulate `∂/∂θ (dout · ε̂)` into `g`.
fn backward(p: &DenoiserParams, act: &Activations, tok: [&[f64]; 2], dout: &[f64], g: &mut DenoiserParams) {
    let d = p.dims;
    outer_acc(g.block_mut(Block::WOut).data_mut(), dout, &act.a);
    for (gb, v) in g.block_mut(Block::BOut).data_mut().iter_mut().zip(dout) {
        *gb += v;
    }
    let mut da = vec![0.0; d.mlp_hidden];
    matvec_t_acc(p.block(Block::WOut).data(), d.mlp_hidden, dout, &mut da);
    for (dz, z) in da.iter_mut().zip(&act.z) {
        if *z <= 0.0 {
            *dz = 0.0;
        }
    }
    let dz = da;
    outer_acc(g.block_mut(Block::WMlp1).data_mut(), &dz, &act.cat);
    for (gb, v) in g.block_mut(Block::BMlp1).data_mut().iter_mut().zip(&dz) {
        *gb += v;
    }
    let mut dcat = vec![0.0; d.hidden + d.value_dim];
    matvec_t_acc(p.block(Block::WMlp1).data(), d.hidden + d.value_dim, &dz, &mut dcat);
    let (dh_mlp, dctx) = dcat.split_at(d.hidden);

    // attention
    let dw = [dot(dctx, &act.v[0]), dot(dctx, &act.v[1])];
    let mean_dw = act.w[0] * dw[0] + act.w[1] * dw[1];
    let ds = [act.w[0] * (dw[0] - mean_dw), act.w[1] * (dw[1] - mean_dw)];
    let inv = 1.0 / math::sqrt(d.key_dim as f64);
    let mut dq = vec![0.0; d.key_dim];
    for j in 0..2 {
        let dv: Vec<f64> = dctx.iter().map(|c| act.w[j] * c).collect();
        outer_acc(g.block_mut(Block::WV).data_mut(), &dv, tok[j]);
        let dk: Vec<f64> = act.q.iter().map(|q| ds[j] * inv * q).collect();
        outer_acc(g.block_mut(Block::WK).data_mut(), &dk, tok[j]);
        for (a, k) in dq.iter_mut().zip(&act.k[j]) {
            *a += ds[j] * inv * k;
        }
    }
    outer_acc(g.block_mut(Block::WQ).data_mut(), &dq, &act.h);
    let mut dh = dh_mlp.to_vec();
    matvec_t_acc(p.block(Block::WQ).data(), d.hidden, &dq, &mut dh);
    outer_acc(g.block_mut(Block::WIn).data_mut(), &dh, &act.x);
    outer_acc(g.block_mut(Block::WTime).data_mut(), &dh, &act.te);
}

/// Noise prediction `ε̂_θ(x_t, prompt, t)`.
pub fn predict_noise(
    params: &DenoiserParams,
    x_t: &[f64],
    prompt: &Prompt,
    t: usize,
    schedule: &NoiseSchedule,
    world: &World,
) -> Result<Vec<f64>> {
    let d = &params.dims;
    if x_t.len() != d.data_dim || world.embed_dim() != d.embed_dim || world.data_dim() != d.data_dim {
        bail!(Shape, "input or world dimensions do not match the model");
    }
    world.check_prompt(prompt)?;
    if t >= schedule.steps() {
        bail!(Precondition, "step {t} outside schedule");
    }
    let mut act = Activations::new(d);
    let te = time_embedding(t, schedule.steps(), d.time_dim);
    forward(params, x_t, tokens(world, prompt), &te, &mut act);
    Ok(act.out)
}

/// One regression example: the model's output at `(x_t, prompt, t)` is
/// pulled towards `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionItem {
    pub x_t: Vec<f64>,
    pub prompt: Prompt,
    pub t: usize,
    pub target: Vec<f64>,
}

/// Mean over items of `‖target − ε̂_θ(x_t, prompt, t)‖²` and its gradient.
pub fn regression_loss_and_grads(
    params: &DenoiserParams,
    items: &[RegressionItem],
    schedule: &NoiseSchedule,
    world: &World,
) -> Result<(f64, DenoiserParams)> {
    if items.is_empty() {
        bail!(Precondition, "empty batch");
    }
    let d = params.dims;
    let mut grads = params.zeros_like();
    let mut act = Activations::new(&d);
    let mut loss = 0.0;
    let scale = 1.0 / items.len() as f64;
    let mut dout = vec![0.0; d.data_dim];
    for it in items {
        let te = time_embedding(it.t, schedule.steps(), d.time_dim);
        let tok = tokens(world, &it.prompt);
        forward(params, &it.x_t, tok, &te, &mut act);
        for ((g, o), y) in dout.iter_mut().zip(&act.out).zip(&it.target) {
            let r = o - y;
            loss += r * r;
            *g = 2.0 * r * scale;
        }
        backward(params, &act, tok, &dout, &mut grads);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("regression loss"));
    }
    grads.check_finite("gradient")?;
    Ok((loss, grads))
}

/// Loss only; used by finite-difference checks.
pub fn regression_loss(
    params: &DenoiserParams,
    items: &[RegressionItem],
    schedule: &NoiseSchedule,
    world: &World,
) -> f64 {
    let d = params.dims;
    let mut act = Activations::new(&d);
    let mut loss = 0.0;
    for it in items {
        let te = time_embedding(it.t, schedule.steps(), d.time_dim);
        forward(params, &it.x_t, tokens(world, &it.prompt), &te, &mut act);
        loss += act.out.iter().zip(&it.target).map(|(o, y)| (o - y) * (o - y)).sum::<f64>();
    }
    loss / items.len() as f64
}

/// A clean sample with the noise and step used to corrupt it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseExample {
    pub x0: Vec<f64>,
    pub prompt: Prompt,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl DenoiseExample {
    pub fn draw(world: &World, prompt: Prompt, schedule: &NoiseSchedule, rng: &mut RngStream) -> Self {
        let x0 = sample_image(world, &prompt, rng);
        let t = rng.below(schedule.steps());
        let eps = rng.normal_vec(world.data_dim());
        Self { x0, prompt, t, eps }
    }

    pub fn to_item(&self, schedule: &NoiseSchedule) -> RegressionItem {
        RegressionItem {
            x_t: noise_with_alpha_bar(&self.x0, schedule.alpha_bar[self.t], &self.eps),
            prompt: self.prompt,
            t: self.t,
            target: self.eps.clone(),
        }
    }
}

/// Standard denoising objective on `batch` and its gradient.
pub fn retention_loss_and_grads(
    params: &DenoiserParams,
    batch: &[DenoiseExample],
    schedule: &NoiseSchedule,
    world: &World,
) -> Result<(f64, DenoiserParams)> {
    let items: Vec<RegressionItem> = batch.iter().map(|b| b.to_item(schedule)).collect();
    regression_loss_and_grads(params, &items, schedule, world)
}

pub fn retention_loss(params: &DenoiserParams, batch: &[DenoiseExample], schedule: &NoiseSchedule, world: &World) -> f64 {
    let items: Vec<RegressionItem> = batch.iter().map(|b| b.to_item(schedule)).collect();
    regression_loss(params, &items, schedule, world)
}

/// DDPM ancestral sampling from `x_T ~ N(0, I)` with posterior variance
/// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
pub fn sample(
    params: &DenoiserParams,
    prompt: &Prompt,
    schedule: &NoiseSchedule,
    world: &World,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let d = params.dims;
    world.check_prompt(prompt)?;
    let tok = tokens(world, prompt);
    let mut act = Activations::new(&d);
    let mut x = rng.normal_vec(d.data_dim);
    let steps = schedule.steps();
    for t in (0..steps).rev() {
        let te = time_embedding(t, steps, d.time_dim);
        forward(params, &x, tok, &te, &mut act);
        let beta = schedule.beta[t];
        let ab = schedule.alpha_bar[t];
        let coef = beta / math::sqrt(1.0 - ab);
        let inv_sqrt_alpha = 1.0 / math::sqrt(1.0 - beta);
        for (xi, e) in x.iter_mut().zip(&act.out) {
            *xi = (*xi - coef * e) * inv_sqrt_alpha;
        }
        if t > 0 {
            let var = beta * (1.0 - schedule.alpha_bar[t - 1]) / (1.0 - ab);
            let sd = math::sqrt(var);
            for xi in x.iter_mut() {
                *xi += sd * rng.standard_normal();
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampling state"));
        }
    }
    Ok(x)
}

/// Trained weights plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub world_hash: String,
    pub lineage: Vec<UnlearnRequest>,
    pub sampler: String,
}

impl ModelCheckpoint {
    pub fn check_world(&self, world: &World) -> Result<()> {
        let h = world.digest();
        if self.world_hash != h {
            return Err(Error::WorldMismatch(format!(
                "checkpoint world {} vs world {}",
                short(&self.world_hash),
                short(&h)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // the 1000-step linear 1e-4..0.02 schedule rescaled to 32 steps
        Self {
            steps: 32,
            beta_start: 1e-4 * 1000.0 / 32.0,
            beta_end: 0.02 * 1000.0 / 32.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// Samples drawn per (style, object) pair for the generation gate.
    pub gate_samples_per_pair: usize,
    pub gate_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            gate_samples_per_pair: 50,
            gate_accuracy: 0.98,
            seed: 11,
        }
    }
}

/// Per-head generation accuracy of a checkpoint over every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub style_accuracy: f64,
    pub object_accuracy: f64,
    pub worst_pair_style: f64,
    pub worst_pair_object: f64,
    pub samples_per_pair: usize,
    pub threshold: f64,
    pub passed: bool,
}

/// Sample every pair `samples_per_pair` times and classify both heads.
pub fn generation_gate(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    world: &World,
    classifiers: &Classifiers,
    samples_per_pair: usize,
    threshold: f64,
    seed: u64,
) -> Result<GateReport> {
    let mut style_hits = 0usize;
    let mut object_hits = 0usize;
    let mut worst_s = 1.0f64;
    let mut worst_o = 1.0f64;
    let prompts = world.all_prompts();
    for p in &prompts {
        let mut hs = 0usize;
        let mut ho = 0usize;
        for k in 0..samples_per_pair {
            let mut rng = RngStream::new(
                seed,
                stream_key(&[tags::GATE, p.style_id as u64, p.object_id as u64, k as u64]),
            );
            let x = sample(params, p, schedule, world, &mut rng)?;
            hs += usize::from(classifiers.style.classify(&x) == p.style_id);
            ho += usize::from(classifiers.object.classify(&x) == p.object_id);
        }
        worst_s = worst_s.min(hs as f64 / samples_per_pair as f64);
        worst_o = worst_o.min(ho as f64 / samples_per_pair as f64);
        style_hits += hs;
        object_hits += ho;
    }
    let total = (prompts.len() * samples_per_pair) as f64;
    Ok(GateReport {
        style_accuracy: style_hits as f64 / total,
        object_accuracy: object_hits as f64 / total,
        worst_pair_style: worst_s,
        worst_pair_object: worst_o,
        samples_per_pair,
        threshold,
        passed: worst_s >= threshold && worst_o >= threshold,
    })
}

/// Train `θ†` without a gate check. Returns the checkpoint.
pub fn train_unchecked(
    world: &World,
    dims: ModelDims,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<ModelCheckpoint> {
    let mut init_rng = RngStream::new(config.seed, stream_key(&[tags::INIT]));
    let mut params = DenoiserParams::init(dims, &mut init_rng);
    let mut rng = RngStream::new(config.seed, stream_key(&[tags::TRAIN]));
    let mut opt = Optimizer::new(config.optimizer, config.lr, params.tensors());
    let prompts = world.all_prompts();
    for step in 0..config.steps {
        if config.lr_schedule == LrSchedule::Cosine {
            let frac = step as f64 / config.steps as f64;
            let lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + math::cos(core::f64::consts::PI * frac)));
            opt.set_lr(lr);
        }
        let batch: Vec<DenoiseExample> = (0..config.batch_size)
            .map(|_| {
                let p = prompts[rng.below(prompts.len())];
                DenoiseExample::draw(world, p, schedule, &mut rng)
            })
            .collect();
        let (_, grads) = retention_loss_and_grads(&params, &batch, schedule, world)?;
        let delta = opt.step(grads.tensors());
        for (p, d) in params.tensors_mut().iter_mut().zip(&delta) {
            p.axpy(1.0, d)?;
        }
    }
    params.check_finite("trained parameters")?;
    Ok(ModelCheckpoint {
        params,
        schedule: schedule.clone(),
        world_hash: world.digest(),
        lineage: Vec::new(),
        sampler: SAMPLER_ID.into(),
    })
}

/// Train `θ†` and require the generation gate.
pub fn train_base(
    world: &World,
    classifiers: &Classifiers,
    dims: ModelDims,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, GateReport)> {
    let ckpt = train_unchecked(world, dims, schedule, config)?;
    let report = generation_gate(
        &ckpt.params,
        schedule,
        world,
        classifiers,
        config.gate_samples_per_pair,
        config.gate_accuracy,
        config.seed,
    )?;
    if !report.passed {
        let hint = if config.steps == 0 { "untrained model: " } else { "" };
        bail!(
            Gate,
            "{hint}worst-pair generation accuracy style {:.3}, object {:.3}, need {}",
            report.worst_pair_style,
            report.worst_pair_object,
            config.gate_accuracy
        );
    }
    Ok((ckpt, report))
}
