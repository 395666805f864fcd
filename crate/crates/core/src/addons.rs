//! Add-on regularizers: update-norm penalties, SelFT importance masks and
//! TIES merging.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::gradproj::ProjectionPoint;
use crate::math;
use crate::model::{Block, DenoiserParams, ModelCheckpoint};
use crate::unlearning::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddonKind {
    L1,
    L2,
    Selft,
    Merge,
    Gradproj,
}

impl AddonKind {
    pub const ALL: [AddonKind; 5] = [
        AddonKind::L1,
        AddonKind::L2,
        AddonKind::Selft,
        AddonKind::Merge,
        AddonKind::Gradproj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AddonKind::L1 => "l1",
            AddonKind::L2 => "l2",
            AddonKind::Selft => "selft",
            AddonKind::Merge => "merge",
            AddonKind::Gradproj => "gradproj",
        }
    }

    pub fn parse(s: &str) -> Option<AddonKind> {
        AddonKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Which add-ons are active and their knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddonConfig {
    #[serde(default)]
    pub kinds: Vec<AddonKind>,
    /// Penalty weight; `None` picks the per-norm default.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_selft_k")]
    pub selft_k_percent: f64,
    #[serde(default = "default_merge_k")]
    pub merge_k_percent: f64,
    #[serde(default = "default_gradproj_m", rename = "gradproj_M")]
    pub gradproj_m: usize,
    #[serde(default = "default_gradproj_tol")]
    pub gradproj_tol: f64,
    #[serde(default)]
    pub projection_point: ProjectionPoint,
}

fn default_selft_k() -> f64 {
    10.0
}
fn default_merge_k() -> f64 {
    20.0
}
fn default_gradproj_m() -> usize {
    3
}
fn default_gradproj_tol() -> f64 {
    1e-10
}

pub const DEFAULT_LAMBDA_L1: f64 = 1e-3;
pub const DEFAULT_LAMBDA_L2: f64 = 1e-2;

impl Default for AddonConfig {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            lambda: None,
            selft_k_percent: default_selft_k(),
            merge_k_percent: default_merge_k(),
            gradproj_m: default_gradproj_m(),
            gradproj_tol: default_gradproj_tol(),
            projection_point: ProjectionPoint::Update,
        }
    }
}

impl AddonConfig {
    pub fn with_kinds(kinds: &[AddonKind]) -> Self {
        let mut c = Self::default();
        c.kinds = kinds.to_vec();
        c.kinds.sort_unstable();
        c.kinds.dedup();
        c
    }

    pub fn has(&self, kind: AddonKind) -> bool {
        self.kinds.contains(&kind)
    }

    /// Label such as `none` or `gradproj+l2`.
    pub fn label(&self) -> String {
        if self.kinds.is_empty() {
            return "none".into();
        }
        let mut k = self.kinds.clone();
        k.sort_unstable();
        k.dedup();
        let parts: Vec<&str> = k.iter().map(|k| k.as_str()).collect();
        parts.join("+")
    }

    /// Active penalty norm and weight, if any.
    pub fn penalty(&self) -> Option<(PenaltyNorm, f64)> {
        if self.has(AddonKind::L1) {
            Some((PenaltyNorm::L1, self.lambda.unwrap_or(DEFAULT_LAMBDA_L1)))
        } else if self.has(AddonKind::L2) {
            Some((PenaltyNorm::L2, self.lambda.unwrap_or(DEFAULT_LAMBDA_L2)))
        } else {
            None
        }
    }

    /// Knob ranges and strategy compatibility.
    pub fn validate(&self, strategy: Strategy) -> Result<()> {
        if self.has(AddonKind::L1) && self.has(AddonKind::L2) {
            bail!(Config, "l1 and l2 add-ons are mutually exclusive");
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                bail!(Config, "lambda must be finite and >= 0, got {l}");
            }
        }
        for (name, k) in [("selft_k_percent", self.selft_k_percent), ("merge_k_percent", self.merge_k_percent)] {
            if !(k > 0.0 && k <= 100.0) {
                bail!(Config, "{name} must lie in (0, 100], got {k}");
            }
        }
        if !(self.gradproj_tol.is_finite() && self.gradproj_tol >= 0.0) {
            bail!(Config, "gradproj_tol must be finite and >= 0");
        }
        for &k in &self.kinds {
            let needed = if k == AddonKind::Merge { Strategy::Independent } else { Strategy::Sequential };
            if strategy != needed {
                bail!(
                    Config,
                    "add-on {} requires strategy {}, got {}",
                    k.as_str(),
                    needed.as_str(),
                    strategy.as_str()
                );
            }
        }
        Ok(())
    }

    /// `gradproj_M` must fit the auxiliary pool at the last request, which
    /// excludes every unlearned concept of the `domain_size` available.
    pub fn validate_pool(&self, domain_size: usize, requests: usize) -> Result<()> {
        if !self.has(AddonKind::Gradproj) {
            return Ok(());
        }
        let pool = domain_size.saturating_sub(requests);
        if self.gradproj_m > pool {
            bail!(
                Config,
                "gradproj_M = {} exceeds the auxiliary pool of {pool} concepts left after {requests} requests",
                self.gradproj_m
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyNorm {
    L1,
    L2,
}

/// `λ Σ |θ_d − ref_d|^p` and its (sub)gradient in `θ`. The L1 subgradient
/// at zero is zero.
pub fn penalty_and_grad(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    norm: PenaltyNorm,
    lambda: f64,
) -> Result<(f64, DenoiserParams)> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        bail!(Precondition, "lambda must be finite and >= 0");
    }
    let diff = params.sub(reference)?;
    let mut grads = diff.zeros_like();
    let mut value = 0.0;
    for (g, d) in grads.tensors_mut().iter_mut().zip(diff.tensors()) {
        for (gi, &di) in g.data_mut().iter_mut().zip(d.data()) {
            match norm {
                PenaltyNorm::L1 => {
                    value += di.abs();
                    *gi = if di > 0.0 {
                        lambda
                    } else if di < 0.0 {
                        -lambda
                    } else {
                        0.0
                    };
                }
                PenaltyNorm::L2 => {
                    value += di * di;
                    *gi = 2.0 * lambda * di;
                }
            }
        }
    }
    Ok((lambda * value, grads))
}

/// Number of entries kept by a top-`k_percent` selection over `total`.
pub fn top_k_count(total: usize, k_percent: f64) -> usize {
    let x = k_percent * total as f64 / 100.0;
    let r = math::round(x);
    let n = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { math::ceil(x) };
    (n as usize).clamp(1, total.max(1)).min(total)
}

/// Keep the top `k_percent` of `scores`; equal scores go to the lower index.
pub fn top_k_mask(scores: &[f64], k_percent: f64) -> Vec<bool> {
    let keep = top_k_count(scores.len(), k_percent);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

/// `blocks` sorted by name without repeats; the order used to break ties in
/// global rankings.
fn name_order(blocks: &[Block]) -> Vec<Block> {
    let mut b = blocks.to_vec();
    b.sort_by_key(|b| b.name());
    b.dedup();
    b
}

fn flatten_by_name<F: Fn(Block, usize) -> f64>(params: &DenoiserParams, blocks: &[Block], f: F) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_params());
    for b in name_order(blocks) {
        for i in 0..params.block(b).len() {
            out.push(f(b, i));
        }
    }
    out
}

fn scatter_by_name(like: &DenoiserParams, blocks: &[Block], flat: &[f64]) -> DenoiserParams {
    let mut out = like.zeros_like();
    let mut off = 0;
    for b in name_order(blocks) {
        let t = out.block_mut(b);
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    out
}

/// Binary mask over every parameter (entries are 0.0 or 1.0).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    pub mask: DenoiserParams,
    pub cardinality: usize,
}

impl ParamMask {
    pub fn is_selected(&self, b: Block, i: usize) -> bool {
        self.mask.block(b).data()[i] != 0.0
    }
}

/// SelFT importance mask: the top `k_percent` of `|g_d · θ_d|` over the
/// coordinates of `blocks`, ties ordered by (block name, index). Coordinates
/// outside `blocks` are never selected.
pub fn selft_mask(params: &DenoiserParams, grads: &DenoiserParams, blocks: &[Block], k_percent: f64) -> Result<ParamMask> {
    params.check_compatible(grads)?;
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        bail!(Precondition, "k_percent must lie in (0, 100]");
    }
    if blocks.is_empty() {
        bail!(Precondition, "no blocks to select from");
    }
    let scores = flatten_by_name(params, blocks, |b, i| (grads.block(b).data()[i] * params.block(b).data()[i]).abs());
    if scores.iter().all(|&s| s == 0.0) {
        bail!(Precondition, "all importance scores are zero");
    }
    let sel = top_k_mask(&scores, k_percent);
    let flat: Vec<f64> = sel.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let cardinality = sel.iter().filter(|&&s| s).count();
    Ok(ParamMask {
        mask: scatter_by_name(params, blocks, &flat),
        cardinality,
    })
}

/// Elementwise product of an update with a mask.
pub fn apply_mask(delta: &mut DenoiserParams, mask: &ParamMask) -> Result<()> {
    delta.check_compatible(&mask.mask)?;
    for (d, m) in delta.tensors_mut().iter_mut().zip(mask.mask.tensors()) {
        for (di, &mi) in d.data_mut().iter_mut().zip(m.data()) {
            if mi == 0.0 {
                *di = 0.0;
            }
        }
    }
    Ok(())
}

/// Trim each task vector to its top entries (flattened in name order).
pub fn trim_task_vector(tau: &[f64], k_percent: f64) -> Vec<f64> {
    let scores: Vec<f64> = tau.iter().map(|v| v.abs()).collect();
    let keep = top_k_mask(&scores, k_percent);
    tau.iter().zip(keep).map(|(&v, k)| if k { v } else { 0.0 }).collect()
}

/// Elect a sign per coordinate and average the agreeing entries. Inputs are
/// trimmed task vectors of equal length. A tie in summed magnitude elects `+`.
pub fn elect_and_mean(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let n = trimmed.first().map_or(0, Vec::len);
    let mut merged = vec![0.0; n];
    for (d, m) in merged.iter_mut().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for t in trimmed {
            let v = t[d];
            if v > 0.0 {
                pos += v;
            } else if v < 0.0 {
                neg -= v;
            }
        }
        if pos == 0.0 && neg == 0.0 {
            continue;
        }
        let plus = pos >= neg;
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in trimmed {
            let v = t[d];
            if (plus && v > 0.0) || (!plus && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        *m = sum / count as f64;
    }
    merged
}

/// TIES merge of `candidates` relative to `theta_dagger`. Task vectors are
/// taken over `blocks`; the remaining blocks keep `theta_dagger`'s values.
pub fn ties_merge(
    theta_dagger: &ModelCheckpoint,
    candidates: &[ModelCheckpoint],
    blocks: &[Block],
    k_percent: f64,
) -> Result<ModelCheckpoint> {
    if candidates.is_empty() {
        bail!(Precondition, "ties_merge needs at least one candidate");
    }
    if blocks.is_empty() {
        bail!(Precondition, "no blocks to merge");
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        bail!(Precondition, "k_percent must lie in (0, 100]");
    }
    let base = &theta_dagger.params;
    let mut trimmed = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.world_hash != theta_dagger.world_hash {
            return Err(crate::Error::WorldMismatch("merge candidate from a different world".into()));
        }
        base.check_compatible(&c.params)?;
        let tau = flatten_by_name(base, blocks, |b, i| c.params.block(b).data()[i] - base.block(b).data()[i]);
        trimmed.push(trim_task_vector(&tau, k_percent));
    }
    let merged = elect_and_mean(&trimmed);
    let mut params = base.clone();
    params.axpy(1.0, &scatter_by_name(base, blocks, &merged))?;
    let mut lineage = theta_dagger.lineage.clone();
    for c in candidates {
        for r in &c.lineage[theta_dagger.lineage.len().min(c.lineage.len())..] {
            lineage.push(r.clone());
        }
    }
    Ok(ModelCheckpoint {
        params,
        schedule: theta_dagger.schedule.clone(),
        world_hash: theta_dagger.world_hash.clone(),
        lineage,
        sampler: theta_dagger.sampler.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_count_rounding() {
        assert_eq!(top_k_count(4, 25.0), 1);
        assert_eq!(top_k_count(1000, 10.0), 100);
        assert_eq!(top_k_count(7, 10.0), 1);
        assert_eq!(top_k_count(7, 100.0), 7);
        assert_eq!(top_k_count(3, 50.0), 2);
    }

    #[test]
    fn selects_largest_score() {
        let params = [1.0f64; 4];
        let grads = [3.0, 1.0, 2.0, 0.0];
        let scores: Vec<f64> = params.iter().zip(grads).map(|(p, g)| (p * g).abs()).collect();
        assert_eq!(top_k_mask(&scores, 25.0), vec![true, false, false, false]);
        assert!(top_k_mask(&scores, 100.0).iter().all(|&m| m));
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_k_mask(&[1.0, 2.0, 2.0, 2.0], 50.0), vec![false, true, true, false]);
    }

    #[test]
    fn election_follows_magnitude() {
        let m = elect_and_mean(&[vec![2.0, 0.0, 1.0], vec![-1.0, 0.0, 3.0]]);
        assert_eq!(m, vec![2.0, 0.0, 2.0]);
        let m = elect_and_mean(&[vec![-1.0], vec![-3.0], vec![2.0]]);
        assert_eq!(m, vec![-2.0]);
    }

    #[test]
    fn addon_strategy_compatibility() {
        let merge = AddonConfig::with_kinds(&[AddonKind::Merge]);
        assert!(merge.validate(Strategy::Sequential).is_err());
        assert!(merge.validate(Strategy::Independent).is_ok());
        let both = AddonConfig::with_kinds(&[AddonKind::L1, AddonKind::L2]);
        assert!(both.validate(Strategy::Sequential).is_err());
        let gp = AddonConfig::with_kinds(&[AddonKind::Gradproj, AddonKind::L2]);
        assert!(gp.validate(Strategy::Sequential).is_ok());
        assert!(gp.validate(Strategy::Simultaneous).is_err());
        assert_eq!(gp.label(), "l2+gradproj");
        assert!(AddonConfig::default().validate(Strategy::Simultaneous).is_ok());
    }
}
