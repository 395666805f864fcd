//! Stages behind the CLI commands. Each stage reads its inputs from, and
//! writes its artifacts to, the experiment's output directory.

use std::path::{Path, PathBuf};

use culb_core::addons::AddonConfig;
use culb_core::analysis::{
    estimate_smoothness, kv_shift_study, perturb, similarity_retention_study, spearman, pearson, CorrelationReport,
    SimilarityStudy, SmoothnessTable, TaylorRecord, taylor_bound_report,
};
use culb_core::bench::{run_benchmark, BenchmarkInputs, CellLabeler, EvalProtocol, RunLog};
use culb_core::config::ExperimentConfig;
use culb_core::model::{train_base, Block, GateReport, ModelCheckpoint};
use culb_core::rng::{stream_key, tags, RngStream};
use culb_core::unlearning::{build_requests, Strategy, UnlearnContext};
use culb_core::world::{generate_world, Classifiers, World};
use serde::{Deserialize, Serialize};

use crate::container::{read_checkpoint, read_world, write_checkpoint, write_world};
use crate::error::{CliError, Result};
use crate::io::{read_json, sha256_hex, write_json, CsvDoc};

pub const WORLD_FILE: &str = "world.culb";
pub const BASE_FILE: &str = "base.culb";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HEATMAP_FILE: &str = "drift_heatmap.csv";
pub const RUNLOG_FILE: &str = "runlog.json";
pub const SMOOTHNESS_FILE: &str = "smoothness.csv";
pub const TAYLOR_FILE: &str = "taylor_report.json";
pub const SIMILARITY_FILE: &str = "similarity_retention.csv";
pub const KV_SHIFT_FILE: &str = "kv_shift.csv";

/// A validated config, its digest and the directory its artifacts live in.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub digest: String,
    pub root: PathBuf,
}

/// SHA-256 of the config's canonical JSON encoding.
pub fn config_digest(config: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let digest = config_digest(&config);
        let root = PathBuf::from(&config.output_dir);
        Ok(Self { config, digest, root })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_json(path)?)
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn world_path(&self) -> PathBuf {
        self.root.join(WORLD_FILE)
    }

    pub fn base_path(&self) -> PathBuf {
        self.root.join(BASE_FILE)
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn run_dir(&self, strategy: Strategy, addons: &AddonConfig) -> PathBuf {
        self.root.join("runs").join(format!("{}-{}", strategy.as_str(), addons.label()))
    }

    pub fn protocol(&self, world: &World) -> Result<EvalProtocol> {
        Ok(EvalProtocol::from_world(world, self.config.protocol.seeds_per_cell, self.config.protocol.eval_seed)?)
    }

    /// Generate the world and its classifiers and write them to `world.culb`.
    pub fn gen_world(&self) -> Result<(World, Classifiers)> {
        let world = generate_world(&self.config.world, &self.config.protocol.splits)?;
        let classifiers = Classifiers::train(&world, &self.config.model.classifier)?;
        write_world(&self.world_path(), &world, &classifiers)?;
        Ok((world, classifiers))
    }

    /// Read `world.culb` and check it was generated from this config.
    pub fn load_world(&self) -> Result<(World, Classifiers)> {
        let (world, classifiers) = read_world(&self.world_path())?;
        if world.config != self.config.world || world.splits != self.config.splits()? {
            return Err(culb_core::Error::WorldMismatch(format!(
                "{} was generated from a different world section",
                self.world_path().display()
            ))
            .into());
        }
        Ok((world, classifiers))
    }

    /// Train θ† and write `base.culb`. A failed gate writes nothing.
    pub fn train_base(&self) -> Result<(ModelCheckpoint, GateReport)> {
        let (world, classifiers) = self.load_world()?;
        let schedule = self.config.model.schedule.build()?;
        let (ck, gate) = train_base(&world, &classifiers, self.config.dims(), &schedule, &self.config.model.training)?;
        if !gate.passed {
            return Err(culb_core::Error::Gate(format!(
                "worst-pair generation accuracy style {:.3}, object {:.3}, need {}",
                gate.worst_pair_style, gate.worst_pair_object, gate.threshold
            ))
            .into());
        }
        write_checkpoint(&self.base_path(), &ck, Some(&gate))?;
        Ok((ck, gate))
    }

    pub fn load_base(&self, world: &World) -> Result<(ModelCheckpoint, GateReport)> {
        let path = self.base_path();
        let (ck, gate) = read_checkpoint(&path)?;
        ck.check_world(world)?;
        let gate = gate.ok_or_else(|| CliError::Invalid(format!("{} carries no gate report", path.display())))?;
        Ok((ck, gate))
    }

    /// Run the benchmark for `strategy` and `addons` and write its run
    /// directory: metrics, drift heatmap, run log and one checkpoint per
    /// request.
    pub fn unlearn(&self, strategy: Strategy, addons: &AddonConfig, labeler: &dyn CellLabeler) -> Result<(PathBuf, RunLog)> {
        let mut config = self.config.clone().with_strategy(strategy);
        config.addons = addons.clone();
        config.validate()?;
        let (world, classifiers) = self.load_world()?;
        let (base, gate) = self.load_base(&world)?;
        let requests = build_requests(&world, &config.unlearn)?;
        let protocol = self.protocol(&world)?;
        let dir = self.run_dir(strategy, addons);
        let ckpt_dir = dir.join("checkpoints");
        let inputs = BenchmarkInputs {
            config_digest: self.digest.clone(),
            world: &world,
            classifiers: &classifiers,
            theta_dagger: &base,
            gate: &gate,
            requests: &requests,
            strategy,
            addons,
            protocol: &protocol,
            optimizer: config.unlearn.optimizer,
            trainable: &config.unlearn.trainable,
            seed: config.unlearn.seed,
        };
        let mut store_err = None;
        let log = run_benchmark(&inputs, labeler, |n, ck| {
            let name = format!("theta_{n:02}.culb");
            if let Err(e) = write_checkpoint(&ckpt_dir.join(&name), ck, None) {
                store_err = Some(e);
                return Err(culb_core::Error::Precondition("checkpoint could not be stored".into()));
            }
            Ok(format!("checkpoints/{name}"))
        });
        if let Some(e) = store_err {
            return Err(e);
        }
        let log = log?;
        write_run(&dir, &log)?;
        Ok((dir, log))
    }

    /// Smoothness table around `checkpoint` (θ† when `None`).
    pub fn smoothness(&self, checkpoint: Option<&Path>) -> Result<SmoothnessTable> {
        let (world, _) = self.load_world()?;
        let ck = match checkpoint {
            Some(p) => read_checkpoint(p)?.0,
            None => self.load_base(&world)?.0,
        };
        let a = &self.config.analysis;
        let table = estimate_smoothness(&ck, &world, &a.scales, a.trials, a.batch_size, a.seed)?;
        let mut doc = CsvDoc::new(&["noise_scale", "M_mean", "M_std", "trials", "perturbation_norm", "flagged"])?;
        doc.comment("config_digest", &self.digest).comment("perturbation", &table.perturbation);
        for r in &table.rows {
            doc.row([
                r.noise_scale.to_string(),
                r.m_mean.to_string(),
                r.m_std.to_string(),
                r.trials.to_string(),
                r.perturbation_norm.to_string(),
                r.flagged.to_string(),
            ])?;
        }
        doc.write(&self.analysis_dir().join(SMOOTHNESS_FILE))?;
        Ok(table)
    }

    /// Taylor-bound diagnostics for every checkpoint of a run directory, plus
    /// the small-perturbation case around θ†.
    pub fn taylor(&self, run_dir: &Path) -> Result<TaylorReport> {
        let (world, _) = self.load_world()?;
        let (base, _) = self.load_base(&world)?;
        let log: RunLog = read_json(&run_dir.join(RUNLOG_FILE))?;
        let a = &self.config.analysis;
        let table = estimate_smoothness(&base, &world, &a.scales, a.trials, a.batch_size, a.seed)?;
        let mut checkpoints = Vec::with_capacity(log.checkpoints.len());
        for (rec, rel) in log.records.iter().zip(&log.checkpoints) {
            let (ck, _) = read_checkpoint(&run_dir.join(rel))?;
            ck.check_world(&world)?;
            let delta = crate::pipeline::param_distance(&ck, &base)?;
            let m_hat = table.nearest(delta).map(|r| r.m_mean).unwrap_or(0.0);
            let record = taylor_bound_report(&base, &ck, &world, m_hat, a.batch_size, a.seed)?;
            checkpoints.push(TaylorEntry { n: rec.n, record });
        }
        let xs: Vec<f64> = checkpoints.iter().map(|e| e.record.delta_norm).collect();
        let ys: Vec<f64> = checkpoints.iter().map(|e| e.record.delta_loss_abs).collect();
        let local = {
            let t = estimate_smoothness(&base, &world, &[a.taylor_scale], a.trials, a.batch_size, a.seed)?;
            let m_hat = t.rows[0].m_mean;
            let mut rng = RngStream::new(a.seed, stream_key(&[tags::TAYLOR, 0]));
            let star = perturb(&base, a.taylor_scale, &mut rng);
            taylor_bound_report(&base, &star, &world, if m_hat.is_finite() { m_hat } else { 0.0 }, a.batch_size, a.seed)?
        };
        let report = TaylorReport {
            config_digest: self.digest.clone(),
            run: log.strategy.as_str().to_string() + "-" + &log.addons.label(),
            checkpoints,
            spearman_delta_vs_loss: spearman(&xs, &ys).unwrap_or(0.0),
            pearson_delta_vs_loss: pearson(&xs, &ys).unwrap_or(0.0),
            perturbation_scale: a.taylor_scale,
            perturbation_case: local,
        };
        write_json(&self.analysis_dir().join(TAYLOR_FILE), &report)?;
        Ok(report)
    }

    /// Similarity-retention study for `target` (the study target from the
    /// config, else the first request).
    pub fn similarity(&self, target: Option<usize>, addons: &AddonConfig, labeler: &dyn CellLabeler) -> Result<SimilarityStudy> {
        let (world, classifiers) = self.load_world()?;
        let (base, _) = self.load_base(&world)?;
        let target = target
            .or(self.config.analysis.study_target)
            .or_else(|| world.splits.unlearn_sequence.first().copied())
            .ok_or_else(|| CliError::Invalid("no study target".into()))?;
        let protocol = self.protocol(&world)?;
        let ctx = UnlearnContext {
            world: &world,
            theta_dagger: &base,
            optimizer: self.config.unlearn.optimizer,
            trainable: &self.config.unlearn.trainable,
            seed: self.config.unlearn.seed,
        };
        let study = similarity_retention_study(&ctx, target, &self.config.unlearn, addons, &protocol, &classifiers, labeler)?;
        let name = format!("similarity_retention-{}.csv", addons.label());
        let name = if addons.kinds.is_empty() { SIMILARITY_FILE.to_string() } else { name };
        correlation_csv(&study.report, &["concept", "cosine_similarity", "retention_accuracy"], &self.digest, target)?
            .write(&self.analysis_dir().join(name))?;
        Ok(study)
    }

    /// Key/value shift between two checkpoints for every retained concept.
    pub fn kv_shift(&self, before: &Path, after: &Path, target: usize) -> Result<CorrelationReport> {
        let (world, _) = self.load_world()?;
        let (b, _) = read_checkpoint(before)?;
        let (a, _) = read_checkpoint(after)?;
        b.check_world(&world)?;
        let report = kv_shift_study(&b, &a, target, &world)?;
        correlation_csv(&report, &["concept", "cosine_similarity", "kv_shift"], &self.digest, target)?
            .write(&self.analysis_dir().join(KV_SHIFT_FILE))?;
        Ok(report)
    }
}

/// `‖θ − θ'‖₂` over all blocks.
pub fn param_distance(a: &ModelCheckpoint, b: &ModelCheckpoint) -> Result<f64> {
    let d = a.params.sub(&b.params)?;
    Ok(culb_core::numerics::global_l2_norm(d.tensors())?)
}

fn correlation_csv(r: &CorrelationReport, columns: &[&str], digest: &str, target: usize) -> Result<CsvDoc> {
    let mut doc = CsvDoc::new(columns)?;
    doc.comment("config_digest", digest)
        .comment("target", target)
        .comment("n", r.n)
        .comment("pearson", r.pearson)
        .comment("spearman", r.spearman)
        .comment("flat", r.flat);
    for (id, (x, y)) in r.ids.iter().zip(&r.pairs) {
        doc.row([id.to_string(), x.to_string(), y.to_string()])?;
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorEntry {
    pub n: usize,
    pub record: TaylorRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub config_digest: String,
    pub run: String,
    pub checkpoints: Vec<TaylorEntry>,
    pub spearman_delta_vs_loss: f64,
    pub pearson_delta_vs_loss: f64,
    pub perturbation_scale: f64,
    pub perturbation_case: TaylorRecord,
}

/// `metrics.csv` text for a run log.
pub fn metrics_csv(log: &RunLog) -> Result<Vec<u8>> {
    let mut doc = CsvDoc::new(&["n", "UA", "RA_I", "RA_C", "HM", "drift_total", "steps_cumulative"])?;
    doc.comment("config_digest", &log.config_digest)
        .comment("world_hash", &log.world_hash)
        .comment("strategy", log.strategy.as_str())
        .comment("addons", log.addons.label());
    for r in &log.records {
        doc.row([
            r.n.to_string(),
            r.ua.to_string(),
            r.ra_i.to_string(),
            r.ra_c.to_string(),
            r.hm.to_string(),
            r.drift_total.to_string(),
            r.optimizer_steps_cumulative.to_string(),
        ])?;
    }
    doc.into_bytes()
}

/// `drift_heatmap.csv` text: one row per request, one column per block.
pub fn heatmap_csv(log: &RunLog) -> Result<Vec<u8>> {
    let mut columns = vec!["n"];
    columns.extend(Block::ALL.iter().map(|b| b.name()));
    let mut doc = CsvDoc::new(&columns)?;
    doc.comment("config_digest", &log.config_digest);
    for r in &log.records {
        let mut row = vec![r.n.to_string()];
        for b in Block::ALL {
            row.push(r.drift_per_block.get(b.name()).copied().unwrap_or(0.0).to_string());
        }
        doc.row(row)?;
    }
    doc.into_bytes()
}

pub fn write_run(dir: &Path, log: &RunLog) -> Result<()> {
    crate::io::write_atomic(&dir.join(METRICS_FILE), &metrics_csv(log)?)?;
    crate::io::write_atomic(&dir.join(HEATMAP_FILE), &heatmap_csv(log)?)?;
    write_json(&dir.join(RUNLOG_FILE), log)
}

/// One run's contribution to a cross-run report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportColumn {
    pub label: String,
    pub hm: Vec<(usize, f64)>,
    /// HM divided by the baseline's HM at the same `n`.
    pub normalized: Option<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub world_hash: String,
    pub config_digests: Vec<String>,
    pub baseline: Option<String>,
    pub columns: Vec<ReportColumn>,
}

/// Compare runs by HM, normalizing by the first no-add-on run when present.
pub fn report(run_dirs: &[PathBuf], force: bool) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(CliError::Invalid("report needs at least one run directory".into()));
    }
    let logs = run_dirs
        .iter()
        .map(|d| read_json::<RunLog>(&d.join(RUNLOG_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let world_hash = logs[0].world_hash.clone();
    if let Some(l) = logs.iter().find(|l| l.world_hash != world_hash) {
        return Err(culb_core::Error::WorldMismatch(format!("runs come from worlds {} and {}", world_hash, l.world_hash)).into());
    }
    let mut digests: Vec<String> = logs.iter().map(|l| l.config_digest.clone()).collect();
    digests.sort();
    digests.dedup();
    if digests.len() > 1 && !force {
        return Err(CliError::Invalid(format!(
            "runs were produced by {} different configs; pass --force to aggregate anyway",
            digests.len()
        )));
    }
    let label = |l: &RunLog| format!("{}-{}", l.strategy.as_str(), l.addons.label());
    let hm = |l: &RunLog| l.records.iter().map(|r| (r.n, r.hm)).collect::<Vec<_>>();
    let base = logs.iter().position(|l| l.addons.kinds.is_empty()).filter(|_| logs.len() > 1);
    let columns = logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let normalized = base.filter(|&b| b != i).map(|b| {
                let bh = hm(&logs[b]);
                hm(l)
                    .into_iter()
                    .filter_map(|(n, v)| bh.iter().find(|(m, _)| *m == n).map(|(_, b)| (n, v / b)))
                    .collect()
            });
            ReportColumn {
                label: label(l),
                hm: hm(l),
                normalized,
            }
        })
        .collect();
    Ok(Report {
        world_hash,
        config_digests: digests,
        baseline: base.map(|b| label(&logs[b])),
        columns,
    })
}

impl Report {
    /// The report as CSV: `n`, one `HM[...]` column per run, then one
    /// `HM_norm[...]` column per non-baseline run.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut names = vec!["n".to_string()];
        names.extend(self.columns.iter().map(|c| format!("HM[{}]", c.label)));
        names.extend(
            self.columns
                .iter()
                .filter(|c| c.normalized.is_some())
                .map(|c| format!("HM_norm[{}]", c.label)),
        );
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut doc = CsvDoc::new(&refs)?;
        doc.comment("world_hash", &self.world_hash)
            .comment("config_digest", self.config_digests.join(","));
        if let Some(b) = &self.baseline {
            doc.comment("baseline", b);
        }
        let mut ns: Vec<usize> = self.columns.iter().flat_map(|c| c.hm.iter().map(|p| p.0)).collect();
        ns.sort_unstable();
        ns.dedup();
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for n in ns {
            let mut row = vec![n.to_string()];
            for c in &self.columns {
                row.push(cell(c.hm.iter().find(|p| p.0 == n).map(|p| p.1)));
            }
            for c in &self.columns {
                if let Some(norm) = &c.normalized {
                    row.push(cell(norm.iter().find(|p| p.0 == n).map(|p| p.1)));
                }
            }
            doc.row(row)?;
        }
        doc.into_bytes()
    }
}
