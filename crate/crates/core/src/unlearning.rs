//! Unlearning losses and the three continual-unlearning strategies.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::addons::{apply_mask, penalty_and_grad, selft_mask, ties_merge, AddonConfig, AddonKind, ParamMask};
use crate::error::{bail, Result};
use crate::gradproj::{concept_subspace, project_in_place, select_auxiliary, ProjectionPoint, Subspace};
use crate::model::{
    noise_with_alpha_bar, predict_noise, regression_loss_and_grads, Block, DenoiserParams, ModelCheckpoint,
    NoiseSchedule, RegressionItem,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_key, tags, RngStream};
use crate::world::{cosine_similarity, sample_image, Domain, Prompt, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Regress the target prompt onto the anchor's data.
    AnchorData,
    /// Regress the target prompt onto the frozen base model's anchor prediction.
    AnchorTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sequential,
    Simultaneous,
    Independent,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::Simultaneous => "simultaneous",
            Strategy::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        [Strategy::Sequential, Strategy::Simultaneous, Strategy::Independent]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// One erasure request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub target: usize,
    pub anchor: usize,
    pub loss_variant: LossVariant,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl UnlearnRequest {
    pub fn validate(&self, world: &World) -> Result<()> {
        let seq = &world.splits.unlearn_sequence;
        if !seq.contains(&self.target) {
            bail!(Precondition, "target {} is not in the unlearn sequence", self.target);
        }
        if self.anchor == self.target {
            bail!(Precondition, "anchor equals target {}", self.target);
        }
        if seq.contains(&self.anchor) {
            bail!(Precondition, "anchor {} is itself scheduled for unlearning", self.anchor);
        }
        if world.domain_of(self.anchor)? != world.domain_of(self.target)? {
            bail!(Precondition, "anchor {} and target {} are in different domains", self.anchor, self.target);
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!(Precondition, "learning rate must be positive");
        }
        if self.batch_size == 0 {
            bail!(Precondition, "batch_size must be positive");
        }
        Ok(())
    }
}

/// Budget shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSettings {
    pub strategy: Strategy,
    pub loss_variant: LossVariant,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Per-request anchors, parallel to the unlearn sequence; lowest-similarity
    /// held-in concept when absent.
    #[serde(default)]
    pub anchors: Option<Vec<usize>>,
    /// Blocks the optimizer may change; the rest stay at their initial values.
    pub trainable: Vec<Block>,
    pub seed: u64,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sequential,
            loss_variant: LossVariant::AnchorData,
            steps: 400,
            lr: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            anchors: None,
            trainable: vec![Block::WK, Block::WV],
            seed: 23,
        }
    }
}

/// Held-in concepts of `domain`: those never scheduled for unlearning.
pub fn held_in(world: &World, domain: Domain) -> Vec<usize> {
    world
        .ids(domain)
        .into_iter()
        .filter(|c| !world.splits.unlearn_sequence.contains(c))
        .collect()
}

/// The held-in concept of the target's domain least similar to it.
pub fn default_anchor(world: &World, target: usize) -> Result<usize> {
    let domain = world.domain_of(target)?;
    let te = world.embedding(target);
    let mut best: Option<(f64, usize)> = None;
    for c in held_in(world, domain) {
        let s = cosine_similarity(world.embedding(c), te)?;
        if best.map_or(true, |(bs, _)| s < bs) {
            best = Some((s, c));
        }
    }
    match best {
        Some((_, c)) => Ok(c),
        None => bail!(Precondition, "no held-in concept available as anchor for {target}"),
    }
}

/// Requests for the world's unlearn sequence under `settings`.
pub fn build_requests(world: &World, settings: &UnlearnSettings) -> Result<Vec<UnlearnRequest>> {
    let seq = &world.splits.unlearn_sequence;
    if let Some(a) = &settings.anchors {
        if a.len() != seq.len() {
            bail!(Config, "{} anchors given for {} requests", a.len(), seq.len());
        }
    }
    let mut out = Vec::with_capacity(seq.len());
    for (i, &target) in seq.iter().enumerate() {
        let anchor = match &settings.anchors {
            Some(a) => a[i],
            None => default_anchor(world, target)?,
        };
        let r = UnlearnRequest {
            target,
            anchor,
            loss_variant: settings.loss_variant,
            steps: settings.steps,
            lr: settings.lr,
            batch_size: settings.batch_size,
        };
        r.validate(world)?;
        out.push(r);
    }
    Ok(out)
}

/// Draw one unlearning batch. Item `i` serves request `i mod n`. The clean
/// sample comes from the anchor paired with a random held-in partner; the
/// prompt replaces the anchor with the target. Teacher targets come from
/// `teacher` under the anchor prompt at the same `x_t`.
pub fn draw_unlearn_batch(
    requests: &[UnlearnRequest],
    batch_size: usize,
    world: &World,
    schedule: &NoiseSchedule,
    teacher: Option<&DenoiserParams>,
    rng: &mut RngStream,
) -> Result<Vec<RegressionItem>> {
    if requests.is_empty() {
        bail!(Precondition, "no unlearning targets");
    }
    if batch_size == 0 {
        bail!(Precondition, "batch_size must be positive");
    }
    let mut partners_by_domain: [Option<Vec<usize>>; 2] = [None, None];
    let mut items = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let r = &requests[i % requests.len()];
        if r.anchor == r.target {
            bail!(Precondition, "anchor equals target {}", r.target);
        }
        let domain = world.domain_of(r.target)?;
        let slot = usize::from(domain == Domain::Object);
        let partners = partners_by_domain[slot].get_or_insert_with(|| held_in(world, domain.other()));
        if partners.is_empty() {
            bail!(Precondition, "no held-in partner concepts");
        }
        let partner = partners[rng.below(partners.len())];
        let anchor_prompt = Prompt::pairing(domain, r.anchor, partner);
        let target_prompt = Prompt::pairing(domain, r.target, partner);
        let x0 = sample_image(world, &anchor_prompt, rng);
        let t = rng.below(schedule.steps());
        let eps = rng.normal_vec(world.data_dim());
        let x_t = noise_with_alpha_bar(&x0, schedule.alpha_bar[t], &eps);
        let target = match r.loss_variant {
            LossVariant::AnchorData => eps,
            LossVariant::AnchorTeacher => {
                let Some(teacher) = teacher else {
                    bail!(Precondition, "anchor_teacher loss needs a teacher model");
                };
                predict_noise(teacher, &x_t, &anchor_prompt, t, schedule, world)?
            }
        };
        items.push(RegressionItem {
            x_t,
            prompt: target_prompt,
            t,
            target,
        });
    }
    Ok(items)
}

/// Unlearning loss on a freshly drawn batch and its gradient.
pub fn unlearn_loss_and_grads(
    params: &DenoiserParams,
    requests: &[UnlearnRequest],
    world: &World,
    schedule: &NoiseSchedule,
    teacher: Option<&DenoiserParams>,
    rng: &mut RngStream,
) -> Result<(f64, DenoiserParams)> {
    let batch = requests.first().map_or(0, |r| r.batch_size);
    let items = draw_unlearn_batch(requests, batch, world, schedule, teacher, rng)?;
    regression_loss_and_grads(params, &items, schedule, world)
}

/// Fixed inputs of a run.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnContext<'a> {
    pub world: &'a World,
    /// The pre-trained model; the teacher and the reset point.
    pub theta_dagger: &'a ModelCheckpoint,
    pub optimizer: OptimizerKind,
    /// Blocks the optimizer may change.
    pub trainable: &'a [Block],
    pub seed: u64,
}

impl UnlearnContext<'_> {
    /// Stream for the `n`-th request (1-based) of a sequence.
    pub fn request_stream(&self, n: usize) -> RngStream {
        RngStream::new(self.seed, stream_key(&[tags::REQUEST, n as u64]))
    }
}

/// Diagnostics of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub targets: Vec<usize>,
    pub steps: usize,
    pub final_loss: f64,
    pub mask_cardinality: Option<usize>,
    pub auxiliary: Vec<usize>,
    pub subspace_rank: Option<usize>,
}

fn project_projection_blocks(p: &mut DenoiserParams, s: &Subspace) -> Result<()> {
    for b in Block::ALL.into_iter().filter(|b| b.is_projection()) {
        project_in_place(p.block_mut(b), s)?;
    }
    Ok(())
}

fn freeze(p: &mut DenoiserParams, trainable: &[Block]) {
    for b in Block::ALL.into_iter().filter(|b| !trainable.contains(b)) {
        p.block_mut(b).scale(0.0);
    }
}

/// Optimize the unlearning loss for `requests` jointly from `init` for
/// `steps` iterations, with the sequential add-ons of `addons` applied.
fn optimize(
    init: &ModelCheckpoint,
    requests: &[UnlearnRequest],
    steps: usize,
    addons: &AddonConfig,
    ctx: &UnlearnContext<'_>,
    rng: &mut RngStream,
) -> Result<(ModelCheckpoint, RequestTrace)> {
    let world = ctx.world;
    init.check_world(world)?;
    if ctx.trainable.is_empty() {
        bail!(Precondition, "no trainable blocks");
    }
    for r in requests {
        r.validate(world)?;
    }
    let last = requests.last().expect("non-empty requests");
    let schedule = &init.schedule;
    let teacher = Some(&ctx.theta_dagger.params);
    let targets: Vec<usize> = requests.iter().map(|r| r.target).collect();

    let mut subspace = None;
    let mut auxiliary = Vec::new();
    if addons.has(AddonKind::Gradproj) {
        let mut unlearned: Vec<usize> = init.lineage.iter().map(|r| r.target).collect();
        unlearned.extend(&targets);
        for &t in &targets {
            for c in select_auxiliary(world, t, addons.gradproj_m, &unlearned)? {
                if !auxiliary.contains(&c) {
                    auxiliary.push(c);
                }
            }
        }
        subspace = Some(concept_subspace(world, &auxiliary, addons.gradproj_tol)?);
    }
    let penalty = addons.penalty();

    let mut params = init.params.clone();
    let mut mask: Option<ParamMask> = None;
    if addons.has(AddonKind::Selft) && steps > 0 {
        let mut srng = RngStream::new(rng.seed(), stream_key(&[tags::SELFT, rng.stream_id()]));
        let (_, g) = unlearn_loss_and_grads(&params, requests, world, schedule, teacher, &mut srng)?;
        mask = Some(selft_mask(&params, &g, ctx.trainable, addons.selft_k_percent)?);
    }

    let mut opt = Optimizer::new(ctx.optimizer, last.lr, params.tensors());
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        let items = draw_unlearn_batch(requests, last.batch_size, world, schedule, teacher, rng)?;
        let (loss, mut grads) = regression_loss_and_grads(&params, &items, schedule, world)?;
        final_loss = loss;
        if let Some((norm, lambda)) = penalty {
            let (pv, pg) = penalty_and_grad(&params, &init.params, norm, lambda)?;
            final_loss += pv;
            grads.axpy(1.0, &pg)?;
        }
        freeze(&mut grads, ctx.trainable);
        if let (Some(s), ProjectionPoint::Gradient) = (&subspace, addons.projection_point) {
            project_projection_blocks(&mut grads, s)?;
        }
        let mut delta = DenoiserParams::from_tensors(params.dims, opt.step(grads.tensors()))?;
        freeze(&mut delta, ctx.trainable);
        if let Some(m) = &mask {
            apply_mask(&mut delta, m)?;
        }
        if let (Some(s), ProjectionPoint::Update) = (&subspace, addons.projection_point) {
            project_projection_blocks(&mut delta, s)?;
        }
        params.axpy(1.0, &delta)?;
    }
    params.check_finite("unlearned parameters")?;

    let mut lineage = init.lineage.clone();
    lineage.extend(requests.iter().cloned());
    let trace = RequestTrace {
        targets,
        steps,
        final_loss,
        mask_cardinality: mask.as_ref().map(|m| m.cardinality),
        auxiliary,
        subspace_rank: subspace.as_ref().map(Subspace::rank),
    };
    Ok((
        ModelCheckpoint {
            params,
            schedule: init.schedule.clone(),
            world_hash: init.world_hash.clone(),
            lineage,
            sampler: init.sampler.clone(),
        },
        trace,
    ))
}

/// Run one request from `init` and append it to the lineage.
pub fn run_request(
    init: &ModelCheckpoint,
    request: &UnlearnRequest,
    addons: &AddonConfig,
    ctx: &UnlearnContext<'_>,
    rng: &mut RngStream,
) -> Result<(ModelCheckpoint, RequestTrace)> {
    optimize(init, core::slice::from_ref(request), request.steps, addons, ctx, rng)
}

/// The checkpoint after request `n` of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEntry {
    pub n: usize,
    pub checkpoint: ModelCheckpoint,
    /// Optimizer steps spent producing this checkpoint.
    pub optimizer_steps: usize,
    /// Optimizer steps spent on the whole trajectory so far.
    pub optimizer_steps_cumulative: usize,
    pub trace: RequestTrace,
}

/// Produce `θ*_1 .. θ*_N` under `strategy`. `on_entry` sees each checkpoint
/// as soon as it exists.
pub fn run_sequence_with<F>(
    requests: &[UnlearnRequest],
    strategy: Strategy,
    addons: &AddonConfig,
    ctx: &UnlearnContext<'_>,
    mut on_entry: F,
) -> Result<()>
where
    F: FnMut(SequenceEntry) -> Result<()>,
{
    if requests.is_empty() {
        bail!(Precondition, "empty request sequence");
    }
    addons.validate(strategy)?;
    let domain = ctx.world.domain_of(requests[0].target)?;
    addons.validate_pool(ctx.world.ids(domain).len(), requests.len())?;
    for r in requests {
        r.validate(ctx.world)?;
    }
    let base = ctx.theta_dagger;
    let mut cumulative = 0usize;
    match strategy {
        Strategy::Sequential => {
            let mut current = base.clone();
            for (i, r) in requests.iter().enumerate() {
                let n = i + 1;
                let mut rng = ctx.request_stream(n);
                let (ck, trace) = run_request(&current, r, addons, ctx, &mut rng)?;
                cumulative += r.steps;
                current = ck.clone();
                on_entry(SequenceEntry {
                    n,
                    checkpoint: ck,
                    optimizer_steps: r.steps,
                    optimizer_steps_cumulative: cumulative,
                    trace,
                })?;
            }
        }
        Strategy::Simultaneous => {
            for n in 1..=requests.len() {
                let joint = &requests[..n];
                let steps: usize = joint.iter().map(|r| r.steps).sum();
                let mut rng = ctx.request_stream(n);
                let (ck, trace) = optimize(base, joint, steps, addons, ctx, &mut rng)?;
                cumulative += steps;
                on_entry(SequenceEntry {
                    n,
                    checkpoint: ck,
                    optimizer_steps: steps,
                    optimizer_steps_cumulative: cumulative,
                    trace,
                })?;
            }
        }
        Strategy::Independent => {
            let mut candidates = Vec::with_capacity(requests.len());
            for (i, r) in requests.iter().enumerate() {
                let n = i + 1;
                let mut rng = ctx.request_stream(n);
                let (ck, trace) = run_request(base, r, addons, ctx, &mut rng)?;
                cumulative += r.steps;
                candidates.push(ck.clone());
                let out = if addons.has(AddonKind::Merge) {
                    ties_merge(base, &candidates, ctx.trainable, addons.merge_k_percent)?
                } else {
                    ck
                };
                on_entry(SequenceEntry {
                    n,
                    checkpoint: out,
                    optimizer_steps: r.steps,
                    optimizer_steps_cumulative: cumulative,
                    trace,
                })?;
            }
        }
    }
    Ok(())
}

/// Collecting form of [`run_sequence_with`].
pub fn run_sequence(
    requests: &[UnlearnRequest],
    strategy: Strategy,
    addons: &AddonConfig,
    ctx: &UnlearnContext<'_>,
) -> Result<Vec<SequenceEntry>> {
    let mut out = Vec::with_capacity(requests.len());
    run_sequence_with(requests, strategy, addons, ctx, |e| {
        out.push(e);
        Ok(())
    })?;
    Ok(out)
}
