#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use culb::container::write_checkpoint;
use culb::pipeline::Experiment;
use culb_core::config::ExperimentConfig;
use culb_core::model::{train_unchecked, GateReport, ModelDims};

/// Narrow model, short runs, one seed per cell.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.dims = Some(ModelDims {
        data_dim: c.world.data_dim,
        embed_dim: c.world.embed_dim,
        time_dim: 4,
        hidden: 8,
        key_dim: 6,
        value_dim: 5,
        mlp_hidden: 7,
    });
    c.model.training.steps = 40;
    c.model.training.gate_samples_per_pair = 1;
    c.unlearn.steps = 3;
    c.unlearn.batch_size = 4;
    c.protocol.seeds_per_cell = 1;
    c.analysis.trials = 2;
    c.analysis.batch_size = 16;
    c
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    p
}

/// World plus an untrained-to-gate base model stamped as passing, so the
/// unlearning plumbing can run in milliseconds.
pub fn prepared(root: &Path, config: ExperimentConfig) -> Experiment {
    let e = Experiment::new(config).unwrap().with_root(root);
    let (world, _) = e.gen_world().unwrap();
    let schedule = e.config.model.schedule.build().unwrap();
    let ck = train_unchecked(&world, e.config.dims(), &schedule, &e.config.model.training).unwrap();
    let gate = GateReport {
        style_accuracy: 1.0,
        object_accuracy: 1.0,
        worst_pair_style: 1.0,
        worst_pair_object: 1.0,
        samples_per_pair: 1,
        threshold: 0.98,
        passed: true,
    };
    write_checkpoint(&e.base_path(), &ck, Some(&gate)).unwrap();
    e
}

pub fn culb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_culb")).args(args).output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}
