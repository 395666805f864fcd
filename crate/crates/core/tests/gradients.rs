mod common;

use culb_core::addons::{penalty_and_grad, PenaltyNorm};
use culb_core::model::{regression_loss, regression_loss_and_grads, retention_loss, retention_loss_and_grads, Block, DenoiseExample, DenoiserParams};
use culb_core::numerics::{finite_diff_gradient, max_relative_error};
use culb_core::unlearning::{draw_unlearn_batch, LossVariant};
use culb_core::world::Prompt;
use culb_core::RngStream;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, analytic: &DenoiserParams, fd: &[culb_core::Tensor]) {
    for (b, (a, f)) in Block::ALL.iter().zip(analytic.tensors().iter().zip(fd)) {
        let err = max_relative_error(a.data(), f.data());
        assert!(err <= TOL, "{name}: block {} error {err:e}", b.name());
    }
}

#[test]
fn retention_gradient() {
    let w = common::world();
    let s = common::schedule();
    let dims = common::small_dims(&w);
    for point in 0..3 {
        let ck = common::random_checkpoint(&w, dims, 200 + point);
        let mut rng = RngStream::new(point, 9);
        let batch: Vec<DenoiseExample> = (0..4)
            .map(|i| DenoiseExample::draw(&w, Prompt { style_id: i, object_id: 12 + i }, &s, &mut rng))
            .collect();
        let (_, g) = retention_loss_and_grads(&ck.params, &batch, &s, &w).unwrap();
        let fd = finite_diff_gradient(
            |ts| retention_loss(&DenoiserParams::from_tensors(dims, ts.to_vec()).unwrap(), &batch, &s, &w),
            ck.params.tensors(),
            H,
        )
        .unwrap();
        check("retention", &g, &fd);
    }
}

#[test]
fn unlearning_gradients_for_both_variants() {
    let w = common::world();
    let s = common::schedule();
    let dims = common::small_dims(&w);
    let teacher = common::random_checkpoint(&w, dims, 99);
    for variant in [LossVariant::AnchorData, LossVariant::AnchorTeacher] {
        let mut reqs = common::requests(&w, 1);
        for r in &mut reqs {
            r.loss_variant = variant;
        }
        for point in 0..3 {
            let ck = common::random_checkpoint(&w, dims, 300 + point);
            let mut rng = RngStream::new(point, 4);
            let items = draw_unlearn_batch(&reqs[..2], 6, &w, &s, Some(&teacher.params), &mut rng).unwrap();
            let (_, g) = regression_loss_and_grads(&ck.params, &items, &s, &w).unwrap();
            let fd = finite_diff_gradient(
                |ts| regression_loss(&DenoiserParams::from_tensors(dims, ts.to_vec()).unwrap(), &items, &s, &w),
                ck.params.tensors(),
                H,
            )
            .unwrap();
            check(&format!("{variant:?}"), &g, &fd);
        }
    }
}

#[test]
fn penalty_gradients() {
    let w = common::world();
    let dims = common::small_dims(&w);
    for norm in [PenaltyNorm::L1, PenaltyNorm::L2] {
        for point in 0..3 {
            let reference = common::random_checkpoint(&w, dims, 400 + point).params;
            let theta = common::random_checkpoint(&w, dims, 500 + point).params;
            let lambda = 0.37;
            let (_, g) = penalty_and_grad(&theta, &reference, norm, lambda).unwrap();
            let fd = finite_diff_gradient(
                |ts| {
                    let p = DenoiserParams::from_tensors(dims, ts.to_vec()).unwrap();
                    penalty_and_grad(&p, &reference, norm, lambda).unwrap().0
                },
                theta.tensors(),
                H,
            )
            .unwrap();
            check(&format!("{norm:?}"), &g, &fd);
        }
    }
}

#[test]
fn teacher_targets_match_the_anchor_prompt_prediction() {
    let w = common::world();
    let s = common::schedule();
    let dims = common::small_dims(&w);
    let teacher = common::random_checkpoint(&w, dims, 11);
    let mut reqs = common::requests(&w, 1);
    reqs[0].loss_variant = LossVariant::AnchorTeacher;
    let mut rng = RngStream::new(5, 5);
    let items = draw_unlearn_batch(&reqs[..1], 4, &w, &s, Some(&teacher.params), &mut rng).unwrap();
    for it in &items {
        assert_eq!(it.prompt.style_id, reqs[0].target);
        let anchor = Prompt { style_id: reqs[0].anchor, ..it.prompt };
        let pred = culb_core::model::predict_noise(&teacher.params, &it.x_t, &anchor, it.t, &s, &w).unwrap();
        assert_eq!(pred, it.target);
    }
    assert!(draw_unlearn_batch(&reqs[..1], 4, &w, &s, None, &mut rng).is_err());
}
