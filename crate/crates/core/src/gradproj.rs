//! Semantic-aware gradient projection.
//!
//! Updates of `W_K` and `W_V` are right-multiplied by `I − QQᵀ`, where the
//! columns of `Q` span the embeddings of auxiliary concepts. Then
//! `ΔW·E(c) = 0` for every auxiliary `c`, so their keys and values do not
//! move.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::pivoted_qr_basis;
use crate::tensor::{dot, Tensor};
use crate::world::{cosine_similarity, World};

/// Where the projector is applied inside an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionPoint {
    /// Raw gradient, before the optimizer.
    Gradient,
    /// Update delta returned by the optimizer.
    #[default]
    Update,
}

/// Orthonormal basis of the span of some concept embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    /// Basis vectors, each of length `dim`.
    pub basis: Vec<Vec<f64>>,
    pub dim: usize,
    pub source_concept_ids: Vec<usize>,
    pub tol: f64,
}

impl Subspace {
    pub fn empty(dim: usize) -> Self {
        Self {
            basis: Vec::new(),
            dim,
            source_concept_ids: Vec::new(),
            tol: 0.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// The projector `QQᵀ` as a row-major `dim × dim` matrix.
    pub fn projector(&self) -> Vec<f64> {
        let n = self.dim;
        let mut p = vec![0.0; n * n];
        for q in &self.basis {
            for i in 0..n {
                for j in 0..n {
                    p[i * n + j] += q[i] * q[j];
                }
            }
        }
        p
    }
}

/// The `m` concepts of the target's domain most similar to it, excluding the
/// target and everything in `unlearned`. Ties go to the lower id.
pub fn select_auxiliary(world: &World, target: usize, m: usize, unlearned: &[usize]) -> Result<Vec<usize>> {
    let domain = world.domain_of(target)?;
    let te = world.embedding(target);
    let mut pool: Vec<(f64, usize)> = Vec::new();
    for c in world.ids(domain) {
        if c == target || unlearned.contains(&c) {
            continue;
        }
        pool.push((cosine_similarity(world.embedding(c), te)?, c));
    }
    if m > pool.len() {
        bail!(
            Config,
            "gradproj_M = {m} exceeds the auxiliary pool of {} concepts for target {target}",
            pool.len()
        );
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(pool.into_iter().take(m).map(|(_, c)| c).collect())
}

/// Rank-revealing orthonormalization of `embeddings` (each of length `dim`).
/// Directions with remaining norm at or below `tol` times the largest are
/// dropped.
pub fn build_subspace(embeddings: &[Tensor], dim: usize, tol: f64) -> Result<Subspace> {
    let mut cols = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.len() != dim {
            bail!(Shape, "embedding of length {} in a {dim}-dimensional subspace", e.len());
        }
        cols.push(e.data().to_vec());
    }
    Ok(Subspace {
        basis: pivoted_qr_basis(&cols, dim, tol),
        dim,
        source_concept_ids: Vec::new(),
        tol,
    })
}

/// Subspace spanned by the embeddings of `ids`.
pub fn concept_subspace(world: &World, ids: &[usize], tol: f64) -> Result<Subspace> {
    let embs = ids
        .iter()
        .map(|&c| {
            world.concept(c)?;
            Tensor::vector(world.embedding(c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = build_subspace(&embs, world.embed_dim(), tol)?;
    s.source_concept_ids = ids.to_vec();
    Ok(s)
}

/// `G (I − QQᵀ)` for a `rows × dim` matrix `G`.
pub fn project_update(g: &Tensor, subspace: &Subspace) -> Result<Tensor> {
    let mut out = g.clone();
    project_in_place(&mut out, subspace)?;
    Ok(out)
}

pub(crate) fn project_in_place(g: &mut Tensor, subspace: &Subspace) -> Result<()> {
    let cols = g.cols();
    if g.shape().len() != 2 || cols != subspace.dim {
        bail!(Shape, "cannot project {:?} with a {}-dimensional subspace", g.shape(), subspace.dim);
    }
    for row in g.data_mut().chunks_exact_mut(cols) {
        for q in &subspace.basis {
            let c = dot(row, q);
            for (r, qi) in row.iter_mut().zip(q) {
                *r -= c * qi;
            }
        }
    }
    Ok(())
}
