//! Evaluation protocol, metrics and benchmark orchestration.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::addons::AddonConfig;
use crate::error::{bail, Error, Result};
use crate::model::{sample, Block, DenoiserParams, GateReport, ModelCheckpoint, NoiseSchedule};
use crate::numerics::global_l2_norm;
use crate::rng::{stream_key, tags, RngStream};
use crate::unlearning::{run_sequence_with, RequestTrace, Strategy, UnlearnContext, UnlearnRequest};
use crate::world::{Classifiers, Domain, Prompt, World};

/// Which prompts are sampled and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub unlearn_domain: Domain,
    pub heldout_styles: Vec<usize>,
    pub heldout_objects: Vec<usize>,
    pub seeds_per_cell: usize,
    pub eval_seed: u64,
}

impl EvalProtocol {
    pub fn from_world(world: &World, seeds_per_cell: usize, eval_seed: u64) -> Result<Self> {
        let p = Self {
            unlearn_domain: world.splits.unlearn_domain,
            heldout_styles: world.splits.heldout_styles.clone(),
            heldout_objects: world.splits.heldout_objects.clone(),
            seeds_per_cell,
            eval_seed,
        };
        p.validate(world)?;
        Ok(p)
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        if self.seeds_per_cell == 0 {
            bail!(Config, "seeds_per_cell must be at least 1");
        }
        if self.heldout_styles.is_empty() || self.heldout_objects.is_empty() {
            bail!(Config, "held-out sets must be non-empty");
        }
        for c in self.heldout_styles.iter().chain(&self.heldout_objects) {
            world.concept(*c)?;
            if world.splits.unlearn_sequence.contains(c) {
                bail!(Config, "held-out concept {c} is in the unlearn sequence");
            }
        }
        Ok(())
    }

    pub fn heldout(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Style => &self.heldout_styles,
            Domain::Object => &self.heldout_objects,
        }
    }

    /// Other-domain partners paired with concepts of the unlearn domain.
    pub fn partners(&self) -> &[usize] {
        self.heldout(self.unlearn_domain.other())
    }

    /// Samples drawn per unlearned concept.
    pub fn samples_per_unlearned(&self) -> usize {
        self.seeds_per_cell * self.partners().len()
    }
}

/// One sampled generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub prompt: Prompt,
    pub seed_index: usize,
}

impl Cell {
    /// Stream keyed by content only, so evaluation order never matters.
    pub fn stream(&self, eval_seed: u64) -> RngStream {
        RngStream::new(
            eval_seed,
            stream_key(&[
                tags::EVAL_CELL,
                self.prompt.style_id as u64,
                self.prompt.object_id as u64,
                self.seed_index as u64,
            ]),
        )
    }
}

/// Labels assigned to one generation by both heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellLabels {
    pub style: usize,
    pub object: usize,
}

impl CellLabels {
    pub fn get(&self, domain: Domain) -> usize {
        match domain {
            Domain::Style => self.style,
            Domain::Object => self.object,
        }
    }
}

/// Sample and classify one cell.
pub fn label_cell(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    world: &World,
    classifiers: &Classifiers,
    cell: &Cell,
    eval_seed: u64,
) -> Result<CellLabels> {
    let mut rng = cell.stream(eval_seed);
    let x = sample(params, &cell.prompt, schedule, world, &mut rng)?;
    Ok(CellLabels {
        style: classifiers.style.classify(&x),
        object: classifiers.object.classify(&x),
    })
}

/// Labels a batch of cells; implementations may work in parallel but must
/// return labels in input order.
pub trait CellLabeler {
    fn label_cells(
        &self,
        checkpoint: &ModelCheckpoint,
        world: &World,
        classifiers: &Classifiers,
        cells: &[Cell],
        eval_seed: u64,
    ) -> Result<Vec<CellLabels>>;
}

/// Labels cells one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialLabeler;

impl CellLabeler for SerialLabeler {
    fn label_cells(
        &self,
        checkpoint: &ModelCheckpoint,
        world: &World,
        classifiers: &Classifiers,
        cells: &[Cell],
        eval_seed: u64,
    ) -> Result<Vec<CellLabels>> {
        cells
            .iter()
            .map(|c| label_cell(&checkpoint.params, &checkpoint.schedule, world, classifiers, c, eval_seed))
            .collect()
    }
}

/// Cells pairing each of `concepts` (of `domain`) with each partner.
pub fn concept_cells(domain: Domain, concepts: &[usize], partners: &[usize], seeds: usize) -> Vec<Cell> {
    let mut out = Vec::with_capacity(concepts.len() * partners.len() * seeds);
    for &c in concepts {
        for &p in partners {
            for k in 0..seeds {
                out.push(Cell {
                    prompt: Prompt::pairing(domain, c, p),
                    seed_index: k,
                });
            }
        }
    }
    out
}

/// Fraction of cells (grouped per concept) labelled as that concept in `domain`.
pub fn per_concept_accuracy(domain: Domain, cells: &[Cell], labels: &[CellLabels]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (c, l) in cells.iter().zip(labels) {
        let id = c.prompt.id_in(domain);
        let e = acc.entry(id).or_insert((0, 0));
        e.0 += usize::from(l.get(domain) == id);
        e.1 += 1;
    }
    acc.into_iter().map(|(id, (h, n))| (id, h as f64 / n as f64)).collect()
}

/// UA, RA-I and RA-C of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRates {
    pub ua: f64,
    pub ra_i: f64,
    pub ra_c: f64,
    pub unlearn_cells: usize,
    pub retention_cells: usize,
    /// Per unlearned concept: fraction NOT labelled as that concept.
    pub ua_per_concept: Vec<(usize, f64)>,
    /// Per held-out concept of the unlearn domain.
    pub ra_i_per_concept: Vec<(usize, f64)>,
}

/// Evaluate `checkpoint` after `unlearned` have been requested.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    unlearned: &[usize],
    protocol: &EvalProtocol,
    classifiers: &Classifiers,
    world: &World,
    labeler: &dyn CellLabeler,
) -> Result<EvalRates> {
    if unlearned.is_empty() {
        bail!(Precondition, "no unlearned concepts to evaluate");
    }
    checkpoint.check_world(world)?;
    if classifiers.style.weights.cols() != world.data_dim() || classifiers.object.weights.cols() != world.data_dim() {
        return Err(Error::WorldMismatch("classifier input size differs from the world".into()));
    }
    let dom = protocol.unlearn_domain;
    for &c in unlearned {
        if world.domain_of(c)? != dom {
            bail!(Precondition, "unlearned concept {c} is not in the unlearn domain");
        }
    }
    let s = protocol.seeds_per_cell;
    let ucells = concept_cells(dom, unlearned, protocol.partners(), s);
    let rcells = concept_cells(dom, protocol.heldout(dom), protocol.partners(), s);
    let mut cells = ucells.clone();
    cells.extend_from_slice(&rcells);
    let labels = labeler.label_cells(checkpoint, world, classifiers, &cells, protocol.eval_seed)?;
    if labels.len() != cells.len() {
        bail!(Precondition, "labeler returned {} labels for {} cells", labels.len(), cells.len());
    }
    let (ul, rl) = labels.split_at(ucells.len());
    let ua_per_concept: Vec<(usize, f64)> = per_concept_accuracy(dom, &ucells, ul)
        .into_iter()
        .map(|(c, a)| (c, 1.0 - a))
        .collect();
    let ua_hits = ucells
        .iter()
        .zip(ul)
        .filter(|(c, l)| l.get(dom) != c.prompt.id_in(dom))
        .count();
    let ri_hits = rcells
        .iter()
        .zip(rl)
        .filter(|(c, l)| l.get(dom) == c.prompt.id_in(dom))
        .count();
    let other = dom.other();
    let rc_hits = rcells
        .iter()
        .zip(rl)
        .filter(|(c, l)| l.get(other) == c.prompt.id_in(other))
        .count();
    Ok(EvalRates {
        ua: ua_hits as f64 / ucells.len() as f64,
        ra_i: ri_hits as f64 / rcells.len() as f64,
        ra_c: rc_hits as f64 / rcells.len() as f64,
        unlearn_cells: ucells.len(),
        retention_cells: rcells.len(),
        ua_per_concept,
        ra_i_per_concept: per_concept_accuracy(dom, &rcells, rl),
    })
}

/// `3 / (1/a + 1/b + 1/c)`, or 0 when any input is 0.
pub fn harmonic_mean(ua: f64, ra_i: f64, ra_c: f64) -> f64 {
    if ua <= 0.0 || ra_i <= 0.0 || ra_c <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / ua + 1.0 / ra_i + 1.0 / ra_c)
}

/// `‖θ − θ†‖₂` overall and per block.
pub fn drift(checkpoint: &ModelCheckpoint, theta_dagger: &ModelCheckpoint) -> Result<(f64, BTreeMap<String, f64>)> {
    let diff = checkpoint.params.sub(&theta_dagger.params)?;
    let total = global_l2_norm(diff.tensors())?;
    let per_block = Block::ALL
        .iter()
        .map(|&b| (b.name().to_string(), diff.block(b).norm()))
        .collect();
    Ok((total, per_block))
}

/// Metrics after request `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub n: usize,
    #[serde(rename = "UA")]
    pub ua: f64,
    #[serde(rename = "RA_I")]
    pub ra_i: f64,
    #[serde(rename = "RA_C")]
    pub ra_c: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    pub drift_total: f64,
    pub drift_per_block: BTreeMap<String, f64>,
    /// Steps spent producing this checkpoint alone.
    pub optimizer_steps: usize,
    pub optimizer_steps_cumulative: usize,
}

/// Full record of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_digest: String,
    pub world_seed: u64,
    pub world_hash: String,
    pub strategy: Strategy,
    pub addons: AddonConfig,
    pub requests: Vec<UnlearnRequest>,
    pub gate: GateReport,
    pub protocol: EvalProtocol,
    pub records: Vec<MetricsRecord>,
    pub traces: Vec<RequestTrace>,
    pub checkpoints: Vec<String>,
}

/// Everything a benchmark run reads.
pub struct BenchmarkInputs<'a> {
    pub config_digest: String,
    pub world: &'a World,
    pub classifiers: &'a Classifiers,
    pub theta_dagger: &'a ModelCheckpoint,
    pub gate: &'a GateReport,
    pub requests: &'a [UnlearnRequest],
    pub strategy: Strategy,
    pub addons: &'a AddonConfig,
    pub protocol: &'a EvalProtocol,
    pub optimizer: crate::optim::OptimizerKind,
    pub trainable: &'a [Block],
    pub seed: u64,
}

/// Run the sequence, evaluating after every request. `store` persists each
/// checkpoint and returns a reference recorded in the log.
pub fn run_benchmark<S>(inputs: &BenchmarkInputs<'_>, labeler: &dyn CellLabeler, mut store: S) -> Result<RunLog>
where
    S: FnMut(usize, &ModelCheckpoint) -> Result<String>,
{
    let world = inputs.world;
    if !inputs.gate.passed {
        bail!(
            Gate,
            "base model failed the generation gate (style {:.3}, object {:.3})",
            inputs.gate.worst_pair_style,
            inputs.gate.worst_pair_object
        );
    }
    inputs.theta_dagger.check_world(world)?;
    inputs.protocol.validate(world)?;
    let ctx = UnlearnContext {
        world,
        theta_dagger: inputs.theta_dagger,
        optimizer: inputs.optimizer,
        trainable: inputs.trainable,
        seed: inputs.seed,
    };
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut checkpoints = Vec::new();
    let targets: Vec<usize> = inputs.requests.iter().map(|r| r.target).collect();
    run_sequence_with(inputs.requests, inputs.strategy, inputs.addons, &ctx, |entry| {
        let rates = evaluate(
            &entry.checkpoint,
            &targets[..entry.n],
            inputs.protocol,
            inputs.classifiers,
            world,
            labeler,
        )?;
        let (drift_total, drift_per_block) = drift(&entry.checkpoint, inputs.theta_dagger)?;
        records.push(MetricsRecord {
            n: entry.n,
            ua: rates.ua,
            ra_i: rates.ra_i,
            ra_c: rates.ra_c,
            hm: harmonic_mean(rates.ua, rates.ra_i, rates.ra_c),
            drift_total,
            drift_per_block,
            optimizer_steps: entry.optimizer_steps,
            optimizer_steps_cumulative: entry.optimizer_steps_cumulative,
        });
        checkpoints.push(store(entry.n, &entry.checkpoint)?);
        traces.push(entry.trace);
        Ok(())
    })?;
    Ok(RunLog {
        config_digest: inputs.config_digest.clone(),
        world_seed: world.seed,
        world_hash: world.digest(),
        strategy: inputs.strategy,
        addons: inputs.addons.clone(),
        requests: inputs.requests.to_vec(),
        gate: inputs.gate.clone(),
        protocol: inputs.protocol.clone(),
        records,
        traces,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(1.0, 1.0, 1.0), 1.0);
        assert_eq!(harmonic_mean(0.0, 0.9, 0.9), 0.0);
        let want = 3.0 / (1.0 / 0.9 + 1.0 / 0.6 + 1.0 / 0.3);
        assert!((harmonic_mean(0.9, 0.6, 0.3) - want).abs() < 1e-15);
        assert!((harmonic_mean(0.9, 0.6, 0.3) - 0.4909).abs() < 1e-4);
    }

    #[test]
    fn cell_counts_follow_protocol() {
        let cells = concept_cells(Domain::Style, &[0], &[12, 13, 14, 15, 16, 17, 18, 19], 5);
        assert_eq!(cells.len(), 40);
        let cells = concept_cells(Domain::Object, &[30], &(0..12).collect::<Vec<_>>(), 5);
        assert_eq!(cells.len(), 60);
        assert!(cells.iter().all(|c| c.prompt.object_id == 30));
    }
}
