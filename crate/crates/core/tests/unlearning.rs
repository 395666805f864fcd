mod common;

use culb_core::addons::{AddonConfig, AddonKind};
use culb_core::model::{Block, ModelCheckpoint};
use culb_core::optim::OptimizerKind;
use culb_core::unlearning::{run_request, run_sequence, Strategy, UnlearnContext};
use culb_core::world::World;

fn ctx<'a>(w: &'a World, base: &'a ModelCheckpoint, trainable: &'a [Block]) -> UnlearnContext<'a> {
    UnlearnContext {
        world: w,
        theta_dagger: base,
        optimizer: OptimizerKind::Adam,
        trainable,
        seed: 5,
    }
}

#[test]
fn zero_steps_only_extends_the_lineage() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 1);
    let mut reqs = common::requests(&w, 0);
    reqs[0].steps = 0;
    let c = ctx(&w, &base, &Block::ALL);
    let (ck, trace) = run_request(&base, &reqs[0], &AddonConfig::default(), &c, &mut c.request_stream(1)).unwrap();
    assert_eq!(ck.params, base.params);
    assert_eq!(ck.lineage, vec![reqs[0].clone()]);
    assert_eq!(trace.steps, 0);
}

#[test]
fn runs_are_deterministic() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 2);
    let reqs = common::requests(&w, 5);
    let c = ctx(&w, &base, &Block::ALL);
    for addons in [AddonConfig::default(), AddonConfig::with_kinds(&[AddonKind::Selft, AddonKind::Gradproj, AddonKind::L2])] {
        let a = run_sequence(&reqs[..3], Strategy::Sequential, &addons, &c).unwrap();
        let b = run_sequence(&reqs[..3], Strategy::Sequential, &addons, &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.checkpoint, y.checkpoint);
            assert_eq!(x.trace, y.trace);
        }
    }
}

#[test]
fn first_checkpoint_agrees_across_strategies() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 3);
    let reqs = common::requests(&w, 6);
    let c = ctx(&w, &base, &Block::ALL);
    let seq = run_sequence(&reqs[..3], Strategy::Sequential, &AddonConfig::default(), &c).unwrap();
    let sim = run_sequence(&reqs[..3], Strategy::Simultaneous, &AddonConfig::default(), &c).unwrap();
    let ind = run_sequence(&reqs[..3], Strategy::Independent, &AddonConfig::default(), &c).unwrap();
    assert_eq!(seq[0].checkpoint, sim[0].checkpoint);
    assert_eq!(seq[0].checkpoint, ind[0].checkpoint);
    let steps: Vec<usize> = sim.iter().map(|e| e.optimizer_steps_cumulative).collect();
    assert_eq!(steps, vec![6, 6 + 12, 6 + 12 + 18]);
    let steps: Vec<usize> = seq.iter().map(|e| e.optimizer_steps_cumulative).collect();
    assert_eq!(steps, vec![6, 12, 18]);
}

#[test]
fn lineage_records_every_request_in_order() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 4);
    let reqs = common::requests(&w, 2);
    let c = ctx(&w, &base, &Block::ALL);
    for strategy in [Strategy::Sequential, Strategy::Simultaneous] {
        let out = run_sequence(&reqs, strategy, &AddonConfig::default(), &c).unwrap();
        for e in &out {
            assert_eq!(e.checkpoint.lineage, reqs[..e.n].to_vec());
            assert_eq!(e.checkpoint.world_hash, base.world_hash);
        }
    }
    let merged = run_sequence(&reqs[..3], Strategy::Independent, &AddonConfig::with_kinds(&[AddonKind::Merge]), &c).unwrap();
    assert_eq!(merged[2].checkpoint.lineage, reqs[..3].to_vec());
}

#[test]
fn frozen_blocks_never_move() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 5);
    let reqs = common::requests(&w, 10);
    let trainable = [Block::WK, Block::WV];
    let c = ctx(&w, &base, &trainable);
    for addons in [
        AddonConfig::default(),
        AddonConfig::with_kinds(&[AddonKind::L1]),
        AddonConfig::with_kinds(&[AddonKind::Selft]),
        AddonConfig::with_kinds(&[AddonKind::Gradproj, AddonKind::L2]),
    ] {
        let out = run_sequence(&reqs[..2], Strategy::Sequential, &addons, &c).unwrap();
        let last = &out[1].checkpoint;
        for b in Block::ALL.into_iter().filter(|b| !trainable.contains(b)) {
            assert_eq!(last.params.block(b), base.params.block(b), "{} under {}", b.name(), addons.label());
        }
        assert!(trainable.iter().any(|&b| last.params.block(b) != base.params.block(b)));
    }
}

#[test]
fn selft_moves_only_masked_coordinates() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 6);
    let reqs = common::requests(&w, 10);
    let trainable = [Block::WK, Block::WV];
    let c = ctx(&w, &base, &trainable);
    let addons = AddonConfig::with_kinds(&[AddonKind::Selft]);
    let (ck, trace) = run_request(&base, &reqs[0], &addons, &c, &mut c.request_stream(1)).unwrap();
    let count: usize = trainable.iter().map(|&b| base.params.block(b).len()).sum();
    let expected = culb_core::addons::top_k_count(count, addons.selft_k_percent);
    assert_eq!(trace.mask_cardinality, Some(expected));
    let moved: usize = Block::ALL
        .iter()
        .map(|&b| {
            let x = ck.params.block(b).data();
            let y = base.params.block(b).data();
            x.iter().zip(y).filter(|(a, b)| a != b).count()
        })
        .sum();
    assert!(moved > 0 && moved <= expected);
}

#[test]
fn invalid_runs_are_rejected() {
    let w = common::world();
    let base = common::random_checkpoint(&w, common::small_dims(&w), 7);
    let reqs = common::requests(&w, 1);
    let c = ctx(&w, &base, &[]);
    assert!(run_request(&base, &reqs[0], &AddonConfig::default(), &c, &mut c.request_stream(1)).is_err());
    let c = ctx(&w, &base, &Block::ALL);
    let merge = AddonConfig::with_kinds(&[AddonKind::Merge]);
    assert!(run_sequence(&reqs, Strategy::Sequential, &merge, &c).is_err());
    let gp = AddonConfig::with_kinds(&[AddonKind::Gradproj]);
    assert!(run_sequence(&reqs, Strategy::Simultaneous, &gp, &c).is_err());
    let mut bad = reqs[0].clone();
    bad.anchor = bad.target;
    assert!(run_request(&base, &bad, &AddonConfig::default(), &c, &mut c.request_stream(1)).is_err());
    let mut foreign = base.clone();
    foreign.world_hash = "0".repeat(64);
    assert!(run_request(&foreign, &reqs[0], &AddonConfig::default(), &c, &mut c.request_stream(1)).is_err());
}
