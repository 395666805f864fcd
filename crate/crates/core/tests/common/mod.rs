#![allow(dead_code)]

use culb_core::model::{DenoiserParams, ModelCheckpoint, ModelDims, NoiseSchedule, ScheduleConfig, SAMPLER_ID};
use culb_core::unlearning::{build_requests, UnlearnRequest, UnlearnSettings};
use culb_core::world::{generate_world, SplitSpec, World, WorldConfig};
use culb_core::RngStream;

pub fn world() -> World {
    generate_world(&WorldConfig::default(), &SplitSpec::default()).unwrap()
}

pub fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

/// Narrow layers so finite differences stay cheap.
pub fn small_dims(world: &World) -> ModelDims {
    ModelDims {
        hidden: 8,
        key_dim: 6,
        value_dim: 5,
        mlp_hidden: 7,
        time_dim: 4,
        ..ModelDims::for_world(world)
    }
}

pub fn random_checkpoint(world: &World, dims: ModelDims, seed: u64) -> ModelCheckpoint {
    let mut rng = RngStream::new(seed, 1);
    ModelCheckpoint {
        params: DenoiserParams::init(dims, &mut rng),
        schedule: schedule(),
        world_hash: world.digest(),
        lineage: Vec::new(),
        sampler: SAMPLER_ID.into(),
    }
}

pub fn requests(world: &World, steps: usize) -> Vec<UnlearnRequest> {
    let settings = UnlearnSettings {
        steps,
        batch_size: 8,
        ..UnlearnSettings::default()
    };
    build_requests(world, &settings).unwrap()
}
