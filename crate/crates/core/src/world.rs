//! The synthetic "styles × objects" concept universe.
//!
//! Styles act on data as linear transforms and objects as base vectors, so a
//! prompt `(s, o)` has data mean `μ = A_s · b_o`. Concretely
//!
//! ```text
//! b_o = κ·u0 + Ψ·E(o)
//! A_s = I + (Φ·E(s))·u0ᵀ + η·G_s
//! ```
//!
//! with `u0` a unit "canvas" direction orthogonal to the ranges of `Φ` and `Ψ`,
//! which makes `μ_{s,o} ≈ κ·u0 + κ·Φ·E(s) + Ψ·E(o)` plus a small
//! style/object interaction. Embeddings are unit vectors drawn around three
//! cluster centres per domain; styles and objects occupy orthogonal halves of
//! the embedding space.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::linalg;
use crate::math;
use crate::optim::Adam;
use crate::rng::{tags, RngStream};
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Style,
    Object,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Style => Domain::Object,
            Domain::Object => Domain::Style,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Style => "style",
            Domain::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub domain: Domain,
    pub name: String,
    pub embedding: Tensor,
}

/// A prompt "A {object} image in {style} style", by global concept id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub style_id: usize,
    pub object_id: usize,
}

impl Prompt {
    /// Prompt containing `concept` (of `domain`) paired with `partner` from
    /// the other domain.
    pub fn pairing(domain: Domain, concept: usize, partner: usize) -> Prompt {
        match domain {
            Domain::Style => Prompt {
                style_id: concept,
                object_id: partner,
            },
            Domain::Object => Prompt {
                style_id: partner,
                object_id: concept,
            },
        }
    }

    pub fn id_in(&self, domain: Domain) -> usize {
        match domain {
            Domain::Style => self.style_id,
            Domain::Object => self.object_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub styles: usize,
    pub objects: usize,
    pub embed_dim: usize,
    pub data_dim: usize,
    pub noise_sigma: f64,
    pub similarity_spread: f64,
    pub seed: u64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
}

fn default_clusters() -> usize {
    3
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            styles: 12,
            objects: 8,
            embed_dim: 16,
            data_dim: 32,
            noise_sigma: 0.05,
            similarity_spread: 0.85,
            seed: 7,
            clusters: 3,
        }
    }
}

/// How the concept pool is partitioned for a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub unlearn_domain: Domain,
    /// Length of the generated unlearn sequence when none is given explicitly.
    pub unlearn_count: usize,
    #[serde(default)]
    pub unlearn_sequence: Option<Vec<usize>>,
    #[serde(default)]
    pub heldout_styles: Option<Vec<usize>>,
    #[serde(default)]
    pub heldout_objects: Option<Vec<usize>>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            unlearn_domain: Domain::Style,
            unlearn_count: 8,
            unlearn_sequence: None,
            heldout_styles: None,
            heldout_objects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub unlearn_domain: Domain,
    pub unlearn_sequence: Vec<usize>,
    pub heldout_styles: Vec<usize>,
    pub heldout_objects: Vec<usize>,
}

impl Splits {
    pub fn heldout(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Style => &self.heldout_styles,
            Domain::Object => &self.heldout_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub styles: Vec<Concept>,
    pub objects: Vec<Concept>,
    pub style_transforms: Vec<Tensor>,
    pub object_bases: Vec<Tensor>,
    pub noise_sigma: f64,
    pub splits: Splits,
    pub seed: u64,
}

// Data-generation constants.
const CANVAS_SCALE: f64 = 1.0;
const STYLE_SCALE: f64 = 2.0;
const OBJECT_SCALE: f64 = 2.0;
const INTERACTION: f64 = 0.05;
const MAX_CONDITION: f64 = 10.0;
const MAX_SIMILARITY: f64 = 0.97;
const ATTEMPTS: u64 = 64;

pub fn generate_world(config: &WorldConfig, split: &SplitSpec) -> Result<World> {
    if config.styles < 4 || config.objects < 2 {
        bail!(
            Precondition,
            "need at least 4 styles and 2 objects, got {} and {}",
            config.styles,
            config.objects
        );
    }
    if config.embed_dim < 4 || config.data_dim < config.embed_dim {
        bail!(
            Precondition,
            "need embed_dim >= 4 and data_dim >= embed_dim, got {} and {}",
            config.embed_dim,
            config.data_dim
        );
    }
    if !(config.noise_sigma >= 0.0) || !(0.0..1.0).contains(&config.similarity_spread) {
        bail!(Precondition, "noise_sigma must be >= 0 and similarity_spread in [0, 1)");
    }
    if config.clusters == 0 {
        bail!(Precondition, "clusters must be positive");
    }
    let splits = resolve_splits(config, split)?;
    let mut last = String::new();
    for attempt in 0..ATTEMPTS {
        let mut rng = RngStream::new(config.seed, crate::rng::stream_key(&[tags::WORLD, attempt]));
        match try_generate(config, &splits, &mut rng) {
            Ok(w) => return Ok(w),
            Err(reason) => last = reason,
        }
    }
    Err(Error::Infeasible(format!(
        "no world satisfied the invariants after {ATTEMPTS} attempts; last failure: {last}"
    )))
}

/// Splits for `spec`, with defaults filled in and validated.
pub fn resolve_splits(config: &WorldConfig, spec: &SplitSpec) -> Result<Splits> {
    let styles: Vec<usize> = (0..config.styles).collect();
    let objects: Vec<usize> = (config.styles..config.styles + config.objects).collect();
    let (pool, other) = match spec.unlearn_domain {
        Domain::Style => (&styles, &objects),
        Domain::Object => (&objects, &styles),
    };
    let sequence = match &spec.unlearn_sequence {
        Some(seq) => seq.clone(),
        None => {
            if spec.unlearn_count == 0 || spec.unlearn_count >= pool.len() {
                bail!(
                    Config,
                    "unlearn_count {} must be in 1..{}",
                    spec.unlearn_count,
                    pool.len()
                );
            }
            let mut perm = pool.clone();
            let mut rng = RngStream::new(config.seed, crate::rng::stream_key(&[tags::WORLD, 999]));
            for i in (1..perm.len()).rev() {
                let j = rng.below(i + 1);
                perm.swap(i, j);
            }
            perm.truncate(spec.unlearn_count);
            perm
        }
    };
    let same_rest: Vec<usize> = pool.iter().copied().filter(|c| !sequence.contains(c)).collect();
    let (def_styles, def_objects) = match spec.unlearn_domain {
        Domain::Style => (same_rest, other.clone()),
        Domain::Object => (other.clone(), same_rest),
    };
    let splits = Splits {
        unlearn_domain: spec.unlearn_domain,
        unlearn_sequence: sequence,
        heldout_styles: spec.heldout_styles.clone().unwrap_or(def_styles),
        heldout_objects: spec.heldout_objects.clone().unwrap_or(def_objects),
    };
    validate_splits(config, &splits)?;
    Ok(splits)
}

pub fn validate_splits(config: &WorldConfig, splits: &Splits) -> Result<()> {
    let is_style = |c: usize| c < config.styles;
    let is_object = |c: usize| c >= config.styles && c < config.styles + config.objects;
    let in_domain = |c: usize, d: Domain| match d {
        Domain::Style => is_style(c),
        Domain::Object => is_object(c),
    };
    if splits.unlearn_sequence.is_empty() {
        bail!(Config, "unlearn_sequence is empty");
    }
    for &c in &splits.unlearn_sequence {
        if !in_domain(c, splits.unlearn_domain) {
            bail!(Config, "unlearn_sequence id {c} is not a {} concept", splits.unlearn_domain.as_str());
        }
    }
    let mut seen = splits.unlearn_sequence.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != splits.unlearn_sequence.len() {
        bail!(Config, "unlearn_sequence contains duplicates");
    }
    for &c in &splits.heldout_styles {
        if !is_style(c) {
            bail!(Config, "heldout_styles id {c} is not a style");
        }
    }
    for &c in &splits.heldout_objects {
        if !is_object(c) {
            bail!(Config, "heldout_objects id {c} is not an object");
        }
    }
    if splits.heldout_styles.is_empty() || splits.heldout_objects.is_empty() {
        bail!(Config, "held-out sets must be non-empty");
    }
    for &c in splits.heldout_styles.iter().chain(&splits.heldout_objects) {
        if splits.unlearn_sequence.contains(&c) {
            bail!(Config, "split disjointness violated: concept {c} is both unlearned and held out");
        }
    }
    Ok(())
}

fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let s = scale / math::sqrt(rows as f64);
    (0..rows * cols).map(|_| s * rng.standard_normal()).collect()
}

fn orthonormal_basis(rng: &mut RngStream, dim: usize) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..dim).map(|_| rng.normal_vec(dim)).collect();
    linalg::pivoted_qr_basis(&cols, dim, 1e-12)
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    for x in v {
        *x /= n;
    }
}

/// Unit embeddings in `span(basis)`: `clusters` centres along basis
/// directions, members jittered inside the same subspace.
fn cluster_embeddings(
    rng: &mut RngStream,
    basis: &[Vec<f64>],
    count: usize,
    clusters: usize,
    dim: usize,
) -> Vec<Vec<f64>> {
    let k = basis.len();
    (0..count)
        .map(|i| {
            let cluster = i % clusters.min(k);
            let jitter = 0.3 + 0.5 * rng.uniform();
            let mut coeffs: Vec<f64> = (0..k)
                .map(|_| jitter * rng.standard_normal() / math::sqrt(k as f64))
                .collect();
            coeffs[cluster] += 1.0;
            let mut v = vec![0.0; dim];
            for (c, b) in coeffs.iter().zip(basis) {
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi += c * bi;
                }
            }
            normalize(&mut v);
            v
        })
        .collect()
}

fn similarity_range(embs: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let c = dot(&embs[i], &embs[j]);
            lo = lo.min(c);
            hi = hi.max(c);
        }
    }
    (lo, hi)
}

fn try_generate(config: &WorldConfig, splits: &Splits, rng: &mut RngStream) -> core::result::Result<World, String> {
    let e = config.embed_dim;
    let d = config.data_dim;
    let basis = orthonormal_basis(rng, e);
    let half = e / 2;
    let (style_basis, object_basis) = basis.split_at(half);
    let style_embs = cluster_embeddings(rng, style_basis, config.styles, config.clusters, e);
    let object_embs = cluster_embeddings(rng, object_basis, config.objects, config.clusters, e);
    for (name, embs) in [("style", &style_embs), ("object", &object_embs)] {
        let (lo, hi) = similarity_range(embs);
        if embs.len() >= 3 && (lo > 0.0 || hi < config.similarity_spread) {
            return Err(format!(
                "{name} similarities span [{lo:.3}, {hi:.3}], need [0, {}]",
                config.similarity_spread
            ));
        }
        if hi > MAX_SIMILARITY {
            return Err(format!("{name} embeddings nearly coincide (cos {hi:.4})"));
        }
    }

    let mut u0 = rng.normal_vec(d);
    normalize(&mut u0);
    let mut phi = gaussian_matrix(rng, d, e, STYLE_SCALE);
    let mut psi = gaussian_matrix(rng, d, e, OBJECT_SCALE);
    for m in [&mut phi, &mut psi] {
        // remove the u0 component from every column
        for c in 0..e {
            let p: f64 = (0..d).map(|r| m[r * e + c] * u0[r]).sum();
            for r in 0..d {
                m[r * e + c] -= p * u0[r];
            }
        }
    }

    let mut transforms = Vec::with_capacity(config.styles);
    for emb in &style_embs {
        let mut a = gaussian_matrix(rng, d, d, INTERACTION);
        let mut sig = vec![0.0; d];
        crate::tensor::matvec_into(&phi, e, emb, &mut sig);
        for r in 0..d {
            a[r * d + r] += 1.0;
            for c in 0..d {
                a[r * d + c] += sig[r] * u0[c];
            }
        }
        let cond = linalg::condition_number(&a, d);
        if cond > MAX_CONDITION {
            return Err(format!("style transform condition number {cond:.2} exceeds {MAX_CONDITION}"));
        }
        transforms.push(Tensor::from_vec(&[d, d], a).map_err(|e| format!("{e}"))?);
    }
    let mut bases = Vec::with_capacity(config.objects);
    for emb in &object_embs {
        let mut b = vec![0.0; d];
        crate::tensor::matvec_into(&psi, e, emb, &mut b);
        for (bi, ui) in b.iter_mut().zip(&u0) {
            *bi += CANVAS_SCALE * ui;
        }
        bases.push(Tensor::vector(&b).map_err(|e| format!("{e}"))?);
    }

    let mk = |id: usize, domain: Domain, idx: usize, emb: &Vec<f64>| Concept {
        id,
        domain,
        name: format!("{}-{idx:02}", domain.as_str()),
        embedding: Tensor::vector(emb).expect("finite embedding"),
    };
    let styles: Vec<Concept> = style_embs
        .iter()
        .enumerate()
        .map(|(i, v)| mk(i, Domain::Style, i, v))
        .collect();
    let objects: Vec<Concept> = object_embs
        .iter()
        .enumerate()
        .map(|(i, v)| mk(config.styles + i, Domain::Object, i, v))
        .collect();
    let world = World {
        config: config.clone(),
        styles,
        objects,
        style_transforms: transforms,
        object_bases: bases,
        noise_sigma: config.noise_sigma,
        splits: splits.clone(),
        seed: config.seed,
    };
    let sep = world.min_mean_separation();
    if sep < 4.0 * config.noise_sigma {
        return Err(format!(
            "closest pair means are {sep:.4} apart, need at least 4·sigma = {:.4}",
            4.0 * config.noise_sigma
        ));
    }
    Ok(world)
}

impl World {
    pub fn num_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn concept(&self, id: usize) -> Result<&Concept> {
        let s = self.styles.len();
        if id < s {
            Ok(&self.styles[id])
        } else if id < s + self.objects.len() {
            Ok(&self.objects[id - s])
        } else {
            bail!(Precondition, "unknown concept id {id}")
        }
    }

    pub fn domain_of(&self, id: usize) -> Result<Domain> {
        Ok(self.concept(id)?.domain)
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        self.concept(id).expect("valid concept id").embedding.data()
    }

    pub fn ids(&self, domain: Domain) -> Vec<usize> {
        match domain {
            Domain::Style => self.styles.iter().map(|c| c.id).collect(),
            Domain::Object => self.objects.iter().map(|c| c.id).collect(),
        }
    }

    pub fn check_prompt(&self, p: &Prompt) -> Result<()> {
        if self.domain_of(p.style_id)? != Domain::Style || self.domain_of(p.object_id)? != Domain::Object {
            bail!(Precondition, "prompt {:?} does not pair a style with an object", p);
        }
        Ok(())
    }

    /// Data mean `μ_{s,o} = A_s · b_o`.
    pub fn mean(&self, prompt: &Prompt) -> Vec<f64> {
        let s = prompt.style_id;
        let o = prompt.object_id - self.styles.len();
        let mut out = vec![0.0; self.data_dim()];
        crate::tensor::matvec_into(
            self.style_transforms[s].data(),
            self.data_dim(),
            self.object_bases[o].data(),
            &mut out,
        );
        out
    }

    pub fn all_prompts(&self) -> Vec<Prompt> {
        let mut out = Vec::with_capacity(self.styles.len() * self.objects.len());
        for s in &self.styles {
            for o in &self.objects {
                out.push(Prompt {
                    style_id: s.id,
                    object_id: o.id,
                });
            }
        }
        out
    }

    pub fn min_mean_separation(&self) -> f64 {
        let means: Vec<Vec<f64>> = self.all_prompts().iter().map(|p| self.mean(p)).collect();
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let d2: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(math::sqrt(d2));
            }
        }
        best
    }

    /// SHA-256 over a canonical little-endian encoding of the world, hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [c.styles, c.objects, c.embed_dim, c.data_dim, c.clusters] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(c.seed.to_le_bytes());
        for v in [c.noise_sigma, c.similarity_spread] {
            h.update(v.to_le_bytes());
        }
        for concept in self.styles.iter().chain(&self.objects) {
            h.update((concept.id as u64).to_le_bytes());
            h.update(concept.name.as_bytes());
            for v in concept.embedding.data() {
                h.update(v.to_le_bytes());
            }
        }
        for t in self.style_transforms.iter().chain(&self.object_bases) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update([self.splits.unlearn_domain as u8]);
        for list in [
            &self.splits.unlearn_sequence,
            &self.splits.heldout_styles,
            &self.splits.heldout_objects,
        ] {
            h.update((list.len() as u64).to_le_bytes());
            for v in list {
                h.update((*v as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Re-check the invariants of a world loaded from storage.
    pub fn validate(&self) -> Result<()> {
        validate_splits(&self.config, &self.splits)?;
        let e = self.embed_dim();
        for (i, c) in self.styles.iter().chain(&self.objects).enumerate() {
            if c.id != i || c.embedding.len() != e {
                bail!(Precondition, "concept {} has inconsistent id or embedding size", c.name);
            }
            if (c.embedding.norm() - 1.0).abs() > 1e-12 {
                bail!(Precondition, "embedding of {} is not unit norm", c.name);
            }
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Draw `μ_{s,o} + σ·z`.
pub fn sample_image(world: &World, prompt: &Prompt, rng: &mut RngStream) -> Vec<f64> {
    let mut x = world.mean(prompt);
    let sigma = world.noise_sigma;
    for v in &mut x {
        *v += sigma * rng.standard_normal();
    }
    x
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Shape, "cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        bail!(Precondition, "cosine similarity of a zero vector");
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Linear recognition model `F` for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub domain: Domain,
    /// Global concept ids, one per weight row, ascending.
    pub class_ids: Vec<usize>,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub n_per_pair: usize,
    pub iterations: usize,
    pub lr: f64,
    pub eval_per_pair: usize,
    pub min_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_per_pair: 20,
            iterations: 400,
            lr: 0.05,
            eval_per_pair: 20,
            min_accuracy: 0.99,
        }
    }
}

impl Classifier {
    /// Argmax class as a global concept id; ties go to the lowest id.
    pub fn classify(&self, x: &[f64]) -> usize {
        let cols = self.weights.cols();
        assert_eq!(x.len(), cols, "classify: input dimension");
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, row) in self.weights.data().chunks_exact(cols).enumerate() {
            let score = dot(row, x) + self.bias.data()[k];
            if score > best_score {
                best = k;
                best_score = score;
            }
        }
        self.class_ids[best]
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| self.classify(x) == l)
            .count();
        hits as f64 / xs.len() as f64
    }
}

pub fn classify(classifier: &Classifier, x: &[f64]) -> usize {
    classifier.classify(x)
}

fn labelled_sample(
    world: &World,
    domain: Domain,
    per_pair: usize,
    rng: &mut RngStream,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in world.all_prompts() {
        for _ in 0..per_pair {
            xs.push(sample_image(world, &p, rng));
            ys.push(p.id_in(domain));
        }
    }
    (xs, ys)
}

/// Multinomial logistic regression on sampled data, full-batch Adam.
pub fn train_classifier(
    world: &World,
    domain: Domain,
    config: &ClassifierConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    if config.n_per_pair < 10 {
        bail!(Precondition, "n_per_pair must be at least 10, got {}", config.n_per_pair);
    }
    let class_ids = world.ids(domain);
    let k = class_ids.len();
    let d = world.data_dim();
    let offset = class_ids[0];
    let (xs, ys) = labelled_sample(world, domain, config.n_per_pair, rng);
    let n = xs.len() as f64;

    let mut params = vec![Tensor::zeros(&[k, d]), Tensor::zeros(&[k])];
    let mut opt = Adam::new(config.lr, &params);
    let mut probs = vec![0.0; k];
    for _ in 0..config.iterations {
        let mut gw = Tensor::zeros(&[k, d]);
        let mut gb = Tensor::zeros(&[k]);
        for (x, &y) in xs.iter().zip(&ys) {
            for (c, p) in probs.iter_mut().enumerate() {
                *p = dot(params[0].row(c), x) + params[1].data()[c];
            }
            softmax_in_place(&mut probs);
            probs[y - offset] -= 1.0;
            crate::tensor::outer_acc(gw.data_mut(), &probs, x);
            for (g, p) in gb.data_mut().iter_mut().zip(&probs) {
                *g += p;
            }
        }
        gw.scale(1.0 / n);
        gb.scale(1.0 / n);
        let delta = opt.step(&[gw, gb]);
        for (p, dlt) in params.iter_mut().zip(&delta) {
            p.axpy(1.0, dlt)?;
        }
    }
    let mut it = params.into_iter();
    let classifier = Classifier {
        domain,
        class_ids,
        weights: it.next().expect("weights"),
        bias: it.next().expect("bias"),
    };
    classifier.weights.check_finite("classifier weights")?;

    let mut eval_rng = rng.derive(&[tags::CLASSIFIER_EVAL, domain as u64]);
    let (ex, ey) = labelled_sample(world, domain, config.eval_per_pair, &mut eval_rng);
    let acc = classifier.accuracy(&ex, &ey);
    if acc < config.min_accuracy {
        bail!(
            Gate,
            "{} classifier reached {:.4} held-out accuracy, below {}",
            domain.as_str(),
            acc,
            config.min_accuracy
        );
    }
    Ok(classifier)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = math::exp(*x - m);
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Both recognition models, trained on disjoint streams of `world.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifiers {
    pub style: Classifier,
    pub object: Classifier,
}

impl Classifiers {
    pub fn train(world: &World, config: &ClassifierConfig) -> Result<Self> {
        let mut rs = RngStream::new(world.seed, crate::rng::stream_key(&[tags::CLASSIFIER, 0]));
        let mut ro = RngStream::new(world.seed, crate::rng::stream_key(&[tags::CLASSIFIER, 1]));
        Ok(Self {
            style: train_classifier(world, Domain::Style, config, &mut rs)?,
            object: train_classifier(world, Domain::Object, config, &mut ro)?,
        })
    }

    pub fn head(&self, domain: Domain) -> &Classifier {
        match domain {
            Domain::Style => &self.style,
            Domain::Object => &self.object,
        }
    }
}
