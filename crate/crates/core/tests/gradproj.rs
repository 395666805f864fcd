mod common;

use culb_core::addons::{AddonConfig, AddonKind};
use culb_core::gradproj::{build_subspace, concept_subspace, project_update, select_auxiliary, ProjectionPoint};
use culb_core::model::Block;
use culb_core::optim::OptimizerKind;
use culb_core::unlearning::{run_request, UnlearnContext};
use culb_core::{RngStream, Tensor};

/// `C (CᵀC)⁻¹ Cᵀ` with the Gram inverse from Gauss-Jordan elimination.
fn gram_projector(cols: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let k = cols.len();
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
    }
    let mut inv = vec![0.0; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
    }
    for c in 0..k {
        let p = (c..k).max_by(|&a, &b| g[a * k + c].abs().total_cmp(&g[b * k + c].abs())).unwrap();
        for j in 0..k {
            g.swap(c * k + j, p * k + j);
            inv.swap(c * k + j, p * k + j);
        }
        let d = g[c * k + c];
        for j in 0..k {
            g[c * k + j] /= d;
            inv[c * k + j] /= d;
        }
        for r in 0..k {
            if r != c {
                let f = g[r * k + c];
                for j in 0..k {
                    g[r * k + j] -= f * g[c * k + j];
                    inv[r * k + j] -= f * inv[c * k + j];
                }
            }
        }
    }
    let mut p = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += cols[i][a] * inv[i * k + j] * cols[j][b];
                }
            }
            p[a * dim + b] = s;
        }
    }
    p
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn projector_matches_gram_inverse_and_is_idempotent() {
    for trial in 0..20u64 {
        let mut rng = RngStream::new(trial, 77);
        let dim = 6 + (trial as usize % 10);
        let k = 1 + (trial as usize % (dim - 1));
        let cols: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(dim)).collect();
        let embs: Vec<Tensor> = cols.iter().map(|c| Tensor::vector(c).unwrap()).collect();
        let s = build_subspace(&embs, dim, 1e-10).unwrap();
        assert_eq!(s.rank(), k);
        let p = s.projector();
        let mut p2 = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                p2[i * dim + j] = (0..dim).map(|l| p[i * dim + l] * p[l * dim + j]).sum();
            }
        }
        assert!(max_abs_diff(&p, &p2) <= 1e-12, "idempotence");
        assert!(max_abs_diff(&p, &gram_projector(&cols, dim)) <= 1e-10, "gram inverse");
    }
}

#[test]
fn rank_deficient_spans_drop_dependent_columns() {
    let mut rng = RngStream::new(3, 3);
    let a = rng.normal_vec(8);
    let b = rng.normal_vec(8);
    let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
    let embs: Vec<Tensor> = [&a, &b, &c].iter().map(|v| Tensor::vector(v).unwrap()).collect();
    assert_eq!(build_subspace(&embs, 8, 1e-10).unwrap().rank(), 2);
}

#[test]
fn projected_update_annihilates_the_span() {
    let w = common::world();
    let target = w.splits.unlearn_sequence[0];
    let aux = select_auxiliary(&w, target, 3, &[target]).unwrap();
    let s = concept_subspace(&w, &aux, 1e-10).unwrap();
    let mut rng = RngStream::new(1, 1);
    let g = Tensor::from_vec(&[5, w.embed_dim()], rng.normal_vec(5 * w.embed_dim())).unwrap();
    let pg = project_update(&g, &s).unwrap();
    for &c in &aux {
        let v = pg.matvec(w.embedding(c)).unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1e-12));
    }
}

#[test]
fn keys_and_values_of_auxiliary_concepts_stay_fixed_over_a_request() {
    let w = common::world();
    let dims = common::small_dims(&w);
    let base = common::random_checkpoint(&w, dims, 8);
    let reqs = common::requests(&w, 25);
    let addons = AddonConfig::with_kinds(&[AddonKind::Gradproj]);
    assert_eq!(addons.projection_point, ProjectionPoint::Update);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let trainable = Block::ALL;
        let ctx = UnlearnContext {
            world: &w,
            theta_dagger: &base,
            optimizer,
            trainable: &trainable,
            seed: 1,
        };
        let (ck, trace) = run_request(&base, &reqs[0], &addons, &ctx, &mut ctx.request_stream(1)).unwrap();
        assert_eq!(trace.auxiliary.len(), 3);
        assert_eq!(trace.subspace_rank, Some(3));
        let dk = ck.params.block(Block::WK).sub(base.params.block(Block::WK)).unwrap();
        let dv = ck.params.block(Block::WV).sub(base.params.block(Block::WV)).unwrap();
        assert!(dk.norm() > 1e-3 && dv.norm() > 1e-3, "the request moved nothing");
        for &c in &trace.auxiliary {
            let e = w.embedding(c);
            let shift = l2(&dk.matvec(e).unwrap()) + l2(&dv.matvec(e).unwrap());
            assert!(shift <= 1e-8, "{optimizer:?} concept {c}: {shift:e}");
        }
    }
}

#[test]
fn auxiliary_selection_skips_unlearned_and_rejects_oversized_pools() {
    let w = common::world();
    let seq = &w.splits.unlearn_sequence;
    let aux = select_auxiliary(&w, seq[1], 3, &seq[..2]).unwrap();
    assert!(aux.iter().all(|c| !seq[..2].contains(c)));
    assert!(select_auxiliary(&w, seq[0], w.num_styles(), &[seq[0]]).is_err());
}
