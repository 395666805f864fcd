//! Diagnostic studies: smoothness estimates, the Taylor bound on retention
//! loss, and the similarity correlations behind interference.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::addons::AddonConfig;
use crate::bench::{concept_cells, per_concept_accuracy, CellLabeler, EvalProtocol};
use crate::error::{bail, Result};
use crate::math;
use crate::model::{retention_loss, retention_loss_and_grads, Block, DenoiseExample, DenoiserParams, ModelCheckpoint};
use crate::numerics::global_l2_norm;
use crate::rng::{stream_key, tags, RngStream};
use crate::tensor::Tensor;
use crate::unlearning::{default_anchor, run_request, UnlearnContext, UnlearnRequest, UnlearnSettings};
use crate::world::{cosine_similarity, Classifiers, Prompt, World};

/// Pearson correlation; `None` when either variable has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Paired observations and their correlations. Flat data (zero variance in
/// either variable) reports both coefficients as 0 with `flat` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub ids: Vec<usize>,
    pub pairs: Vec<(f64, f64)>,
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
    pub flat: bool,
}

impl CorrelationReport {
    pub fn new(ids: Vec<usize>, pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.len() < 3 {
            bail!(Precondition, "correlation needs at least 3 pairs, got {}", pairs.len());
        }
        if ids.len() != pairs.len() {
            bail!(Precondition, "ids and pairs differ in length");
        }
        if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(crate::Error::NonFinite("correlation input"));
        }
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let p = pearson(&xs, &ys);
        let s = spearman(&xs, &ys);
        let n = pairs.len();
        Ok(Self {
            ids,
            pairs,
            pearson: p.unwrap_or(0.0),
            spearman: s.unwrap_or(0.0),
            n,
            flat: p.is_none(),
        })
    }

    pub fn y_of(&self, id: usize) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|k| self.pairs[k].1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRow {
    pub noise_scale: f64,
    pub m_mean: f64,
    pub m_std: f64,
    pub trials: usize,
    /// Mean `‖θ − θ†‖` of the perturbations.
    pub perturbation_norm: f64,
    /// Set when some trial produced a non-finite gradient.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessTable {
    pub rows: Vec<SmoothnessRow>,
    pub perturbation: String,
}

impl SmoothnessTable {
    /// Row whose perturbation norm is closest to `delta_norm`.
    pub fn nearest(&self, delta_norm: f64) -> Option<&SmoothnessRow> {
        self.rows
            .iter()
            .filter(|r| !r.flagged)
            .min_by(|a, b| (a.perturbation_norm - delta_norm).abs().total_cmp(&(b.perturbation_norm - delta_norm).abs()))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, math::sqrt(var))
}

/// Smoothness ratios `‖∇L(θ + σz) − ∇L(θ)‖ / ‖σz‖` for isotropic Gaussian
/// `z`, for any gradient function. Trial `k` at scale index `i` draws `z`
/// from stream `(SMOOTHNESS, i, k)` of `seed`.
pub fn estimate_smoothness_with<G>(mut grad: G, base: &[Tensor], scales: &[f64], trials: usize, seed: u64) -> Result<SmoothnessTable>
where
    G: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if trials < 2 {
        bail!(Precondition, "smoothness needs at least 2 trials");
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        bail!(Precondition, "scales must be positive");
    }
    if scales.windows(2).any(|w| w[1] <= w[0]) {
        bail!(Precondition, "scales must be strictly increasing");
    }
    let g0 = grad(base)?;
    let mut rows = Vec::with_capacity(scales.len());
    for (i, &sigma) in scales.iter().enumerate() {
        let mut ratios = Vec::with_capacity(trials);
        let mut norms = Vec::with_capacity(trials);
        let mut flagged = false;
        for k in 0..trials {
            let mut rng = RngStream::new(seed, stream_key(&[tags::SMOOTHNESS, i as u64, k as u64]));
            let mut theta: Vec<Tensor> = base.to_vec();
            let mut dsq = 0.0;
            for t in &mut theta {
                for v in t.data_mut() {
                    let d = sigma * rng.standard_normal();
                    *v += d;
                    dsq += d * d;
                }
            }
            let dn = math::sqrt(dsq);
            let g = match grad(&theta) {
                Ok(g) => g,
                Err(crate::Error::NonFinite(_)) => {
                    flagged = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let diff: Vec<Tensor> = g.iter().zip(&g0).map(|(a, b)| a.sub(b)).collect::<Result<_>>()?;
            match global_l2_norm(&diff) {
                Ok(gn) => {
                    ratios.push(gn / dn);
                    norms.push(dn);
                }
                Err(_) => flagged = true,
            }
        }
        let (m_mean, m_std) = if ratios.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&ratios) };
        rows.push(SmoothnessRow {
            noise_scale: sigma,
            m_mean,
            m_std,
            trials,
            perturbation_norm: if norms.is_empty() { f64::NAN } else { mean_std(&norms).0 },
            flagged: flagged || ratios.len() < 2,
        });
    }
    Ok(SmoothnessTable {
        rows,
        perturbation: "isotropic gaussian".into(),
    })
}

/// Retained prompts: pairs whose concepts are never scheduled for unlearning.
pub fn retained_prompts(world: &World) -> Vec<Prompt> {
    let seq = &world.splits.unlearn_sequence;
    world
        .all_prompts()
        .into_iter()
        .filter(|p| !seq.contains(&p.style_id) && !seq.contains(&p.object_id))
        .collect()
}

/// Fixed retention batch of `batch_size` examples over retained prompts.
pub fn retention_batch(world: &World, schedule: &crate::model::NoiseSchedule, batch_size: usize, seed: u64) -> Result<Vec<DenoiseExample>> {
    let prompts = retained_prompts(world);
    if prompts.is_empty() || batch_size == 0 {
        bail!(Precondition, "empty retention batch");
    }
    let mut rng = RngStream::new(seed, stream_key(&[tags::RETENTION_BATCH]));
    Ok((0..batch_size)
        .map(|_| {
            let p = prompts[rng.below(prompts.len())];
            DenoiseExample::draw(world, p, schedule, &mut rng)
        })
        .collect())
}

/// Smoothness table of the retention loss around `theta_dagger`.
pub fn estimate_smoothness(
    theta_dagger: &ModelCheckpoint,
    world: &World,
    scales: &[f64],
    trials: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SmoothnessTable> {
    theta_dagger.check_world(world)?;
    let batch = retention_batch(world, &theta_dagger.schedule, batch_size, seed)?;
    let dims = theta_dagger.params.dims;
    let schedule = &theta_dagger.schedule;
    estimate_smoothness_with(
        |t| {
            let p = DenoiserParams::from_tensors(dims, t.to_vec())?;
            Ok(retention_loss_and_grads(&p, &batch, schedule, world)?.1.into_tensors())
        },
        theta_dagger.params.tensors(),
        scales,
        trials,
        seed,
    )
}

/// Actual retention-loss change against its second-order bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRecord {
    pub loss_dagger: f64,
    pub loss_star: f64,
    pub delta_loss_abs: f64,
    pub delta_norm: f64,
    pub grad_norm: f64,
    pub m_hat: f64,
    pub bound: f64,
    /// `|ΔL| / bound`, 0 when the bound is 0.
    pub ratio: f64,
    pub violated: bool,
}

/// `|L(θ*) − L(θ†)|` against `‖∇L(θ†)‖‖Δ‖ + (M/2)‖Δ‖²` on a fixed
/// retention batch.
pub fn taylor_bound_report(
    theta_dagger: &ModelCheckpoint,
    theta_star: &ModelCheckpoint,
    world: &World,
    m_hat: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TaylorRecord> {
    if !(m_hat >= 0.0) {
        bail!(Precondition, "M_hat must be >= 0");
    }
    theta_dagger.params.check_compatible(&theta_star.params)?;
    let schedule = &theta_dagger.schedule;
    let batch = retention_batch(world, schedule, batch_size, seed)?;
    let (loss_dagger, g) = retention_loss_and_grads(&theta_dagger.params, &batch, schedule, world)?;
    let loss_star = retention_loss(&theta_star.params, &batch, schedule, world);
    if !loss_star.is_finite() {
        return Err(crate::Error::NonFinite("retention loss"));
    }
    let grad_norm = global_l2_norm(g.tensors())?;
    let delta_norm = global_l2_norm(theta_star.params.sub(&theta_dagger.params)?.tensors())?;
    let delta_loss_abs = (loss_star - loss_dagger).abs();
    let bound = grad_norm * delta_norm + 0.5 * m_hat * delta_norm * delta_norm;
    let ratio = if bound == 0.0 { 0.0 } else { delta_loss_abs / bound };
    Ok(TaylorRecord {
        loss_dagger,
        loss_star,
        delta_loss_abs,
        delta_norm,
        grad_norm,
        m_hat,
        bound,
        ratio,
        violated: delta_loss_abs > bound,
    })
}

/// `θ† + σz` for a standard normal `z` from `rng`.
pub fn perturb(theta: &ModelCheckpoint, sigma: f64, rng: &mut RngStream) -> ModelCheckpoint {
    let mut out = theta.clone();
    for t in out.params.tensors_mut() {
        for v in t.data_mut() {
            *v += sigma * rng.standard_normal();
        }
    }
    out
}

/// Result of one similarity/retention study.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStudy {
    pub report: CorrelationReport,
    pub request: UnlearnRequest,
    pub checkpoint: ModelCheckpoint,
}

/// Unlearn `target` from `θ†` once, then correlate each retained same-domain
/// concept's similarity to the target with its retention accuracy.
pub fn similarity_retention_study(
    ctx: &UnlearnContext<'_>,
    target: usize,
    settings: &UnlearnSettings,
    addons: &AddonConfig,
    protocol: &EvalProtocol,
    classifiers: &Classifiers,
    labeler: &dyn CellLabeler,
) -> Result<SimilarityStudy> {
    let world = ctx.world;
    let domain = world.domain_of(target)?;
    let request = UnlearnRequest {
        target,
        anchor: default_anchor(world, target)?,
        loss_variant: settings.loss_variant,
        steps: settings.steps,
        lr: settings.lr,
        batch_size: settings.batch_size,
    };
    let retained: Vec<usize> = world.ids(domain).into_iter().filter(|&c| c != target).collect();
    if retained.len() < 3 {
        bail!(Precondition, "similarity study needs at least 3 retained concepts");
    }
    let mut rng = RngStream::new(ctx.seed, stream_key(&[tags::STUDY, target as u64]));
    let (ck, _) = run_request(ctx.theta_dagger, &request, addons, ctx, &mut rng)?;
    let partners = protocol.heldout(domain.other());
    let cells = concept_cells(domain, &retained, partners, protocol.seeds_per_cell);
    let labels = labeler.label_cells(&ck, world, classifiers, &cells, protocol.eval_seed)?;
    let acc = per_concept_accuracy(domain, &cells, &labels);
    let te = world.embedding(target);
    let mut pairs = Vec::with_capacity(acc.len());
    let mut ids = Vec::with_capacity(acc.len());
    for (c, a) in acc {
        ids.push(c);
        pairs.push((cosine_similarity(world.embedding(c), te)?, a));
    }
    Ok(SimilarityStudy {
        report: CorrelationReport::new(ids, pairs)?,
        request,
        checkpoint: ck,
    })
}

/// Correlate each retained concept's similarity to `target` with the shift
/// `‖ΔW_K E(c)‖ + ‖ΔW_V E(c)‖` of its key and value.
pub fn kv_shift_study(before: &ModelCheckpoint, after: &ModelCheckpoint, target: usize, world: &World) -> Result<CorrelationReport> {
    if before.world_hash != after.world_hash {
        return Err(crate::Error::WorldMismatch("kv-shift checkpoints come from different worlds".into()));
    }
    before.params.check_compatible(&after.params)?;
    let domain = world.domain_of(target)?;
    let dk = after.params.block(Block::WK).sub(before.params.block(Block::WK))?;
    let dv = after.params.block(Block::WV).sub(before.params.block(Block::WV))?;
    let unlearned: Vec<usize> = after.lineage.iter().map(|r| r.target).collect();
    let te = world.embedding(target);
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for c in world.ids(domain) {
        if c == target || unlearned.contains(&c) {
            continue;
        }
        let e = world.embedding(c);
        let shift = crate::tensor::norm(&dk.matvec(e)?) + crate::tensor::norm(&dv.matvec(e)?);
        ids.push(c);
        pairs.push((cosine_similarity(e, te)?, shift));
    }
    CorrelationReport::new(ids, pairs)
}
