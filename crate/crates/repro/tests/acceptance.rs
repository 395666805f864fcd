//! Acceptance criteria, one line each. Runs the whole pipeline on the default
//! configuration in a temporary directory and exits nonzero if any criterion
//! fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use culb::container::{checkpoint_container, read_checkpoint, Container};
use culb::labeler::ParallelLabeler;
use culb::pipeline::{report, Experiment, METRICS_FILE};
use culb_core::addons::{penalty_and_grad, selft_mask, ties_merge, top_k_count, AddonConfig, AddonKind, PenaltyNorm};
use culb_core::analysis::{estimate_smoothness_with, spearman};
use culb_core::bench::{MetricsRecord, RunLog};
use culb_core::config::ExperimentConfig;
use culb_core::gradproj::concept_subspace;
use culb_core::model::{
    regression_loss, regression_loss_and_grads, retention_loss, retention_loss_and_grads, Block, DenoiseExample, DenoiserParams,
    ModelCheckpoint, ModelDims,
};
use culb_core::numerics::{finite_diff_gradient, max_relative_error};
use culb_core::unlearning::{build_requests, draw_unlearn_batch, unlearn_loss_and_grads, LossVariant, Strategy};
use culb_core::world::{Prompt, World};
use culb_core::{RngStream, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    lines: Vec<(u8, &'static str, Outcome, f64)>,
}

impl Suite {
    fn record(&mut self, id: u8, name: &'static str, started: Instant, o: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        println!(
            "[{}] {:>2} {name}: {} ({secs:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            id,
            o.detail
        );
        self.lines.push((id, name, o, secs));
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn kv_shift(before: &DenoiserParams, after: &DenoiserParams, e: &[f64]) -> f64 {
    let dk = after.block(Block::WK).sub(before.block(Block::WK)).unwrap();
    let dv = after.block(Block::WV).sub(before.block(Block::WV)).unwrap();
    l2(&dk.matvec(e).unwrap()) + l2(&dv.matvec(e).unwrap())
}

fn last(log: &RunLog) -> &MetricsRecord {
    log.records.last().expect("non-empty run")
}

fn checkpoint(dir: &Path, log: &RunLog, i: usize) -> ModelCheckpoint {
    read_checkpoint(&dir.join(&log.checkpoints[i])).unwrap().0
}

// ---------------------------------------------------------------- criterion 1

fn gradients(world: &World) -> Outcome {
    let dims = ModelDims {
        hidden: 8,
        key_dim: 6,
        value_dim: 5,
        mlp_hidden: 7,
        time_dim: 4,
        ..ModelDims::for_world(world)
    };
    let schedule = culb_core::model::ScheduleConfig::default().build().unwrap();
    let settings = culb_core::unlearning::UnlearnSettings::default();
    let reqs = build_requests(world, &settings).unwrap();
    let at = |seed: u64| DenoiserParams::init(dims, &mut RngStream::new(seed, 1));
    let from = |ts: &[Tensor]| DenoiserParams::from_tensors(dims, ts.to_vec()).unwrap();
    let err = |a: &DenoiserParams, f: &[Tensor]| {
        a.tensors()
            .iter()
            .zip(f)
            .map(|(x, y)| max_relative_error(x.data(), y.data()))
            .fold(0.0f64, f64::max)
    };
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut push = |name, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    let teacher = at(999);
    for point in 0..3u64 {
        let theta = at(10 + point);
        let mut rng = RngStream::new(point, 2);
        let batch: Vec<DenoiseExample> = (0..4)
            .map(|i| DenoiseExample::draw(world, Prompt { style_id: i, object_id: world.num_styles() + i }, &schedule, &mut rng))
            .collect();
        let (_, g) = retention_loss_and_grads(&theta, &batch, &schedule, world).unwrap();
        let fd = finite_diff_gradient(|ts| retention_loss(&from(ts), &batch, &schedule, world), theta.tensors(), 1e-5).unwrap();
        push("retention", err(&g, &fd));
        for (name, variant) in [("anchor_data", LossVariant::AnchorData), ("anchor_teacher", LossVariant::AnchorTeacher)] {
            let mut r = reqs[..2].to_vec();
            r.iter_mut().for_each(|r| r.loss_variant = variant);
            let items = draw_unlearn_batch(&r, 6, world, &schedule, Some(&teacher), &mut rng).unwrap();
            let (_, g) = regression_loss_and_grads(&theta, &items, &schedule, world).unwrap();
            let fd = finite_diff_gradient(|ts| regression_loss(&from(ts), &items, &schedule, world), theta.tensors(), 1e-5).unwrap();
            push(name, err(&g, &fd));
        }
        for (name, norm) in [("l1", PenaltyNorm::L1), ("l2", PenaltyNorm::L2)] {
            let reference = at(500 + point);
            let (_, g) = penalty_and_grad(&theta, &reference, norm, 0.3).unwrap();
            let fd = finite_diff_gradient(|ts| penalty_and_grad(&from(ts), &reference, norm, 0.3).unwrap().0, theta.tensors(), 1e-6).unwrap();
            push(name, err(&g, &fd));
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0f64, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(max <= 1e-4, format!("max relative error {}", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn gram_projector(cols: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let k = cols.len();
    let mut g = vec![0.0; k * k];
    let mut inv = vec![0.0; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
        for j in 0..k {
            g[i * k + j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
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
        for r in (0..k).filter(|&r| r != c) {
            let f = g[r * k + c];
            for j in 0..k {
                g[r * k + j] -= f * g[c * k + j];
                inv[r * k + j] -= f * inv[c * k + j];
            }
        }
    }
    let mut p = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            for i in 0..k {
                for j in 0..k {
                    p[a * dim + b] += cols[i][a] * inv[i * k + j] * cols[j][b];
                }
            }
        }
    }
    p
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Worst auxiliary key/value shift over every request of a gradproj run,
/// plus projector checks on each request's subspace.
fn lemma(world: &World, base: &ModelCheckpoint, dir: &Path, log: &RunLog) -> (Outcome, f64) {
    let mut worst_shift = 0.0f64;
    let mut first_shift = 0.0f64;
    let mut worst_idem = 0.0f64;
    let mut worst_gram = 0.0f64;
    let mut prev = base.clone();
    for (i, trace) in log.traces.iter().enumerate() {
        let ck = checkpoint(dir, log, i);
        for &c in &trace.auxiliary {
            let s = kv_shift(&prev.params, &ck.params, world.embedding(c));
            worst_shift = worst_shift.max(s);
            if i == 0 {
                first_shift = first_shift.max(s);
            }
        }
        let sub = concept_subspace(world, &trace.auxiliary, 1e-10).unwrap();
        let d = sub.dim;
        let p = sub.projector();
        let mut p2 = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                p2[a * d + b] = (0..d).map(|l| p[a * d + l] * p[l * d + b]).sum();
            }
        }
        worst_idem = worst_idem.max(max_abs_diff(&p, &p2));
        let cols: Vec<Vec<f64>> = trace.auxiliary.iter().map(|&c| world.embedding(c).to_vec()).collect();
        worst_gram = worst_gram.max(max_abs_diff(&p, &gram_projector(&cols, d)));
        prev = ck;
    }
    let pass = worst_shift <= 1e-8 && worst_idem <= 1e-12 && worst_gram <= 1e-10 && !log.traces.is_empty();
    (
        outcome(
            pass,
            format!(
                "aux kv shift {worst_shift:.1e} over {} requests, idempotence {worst_idem:.1e}, gram-inverse {worst_gram:.1e}",
                log.traces.len()
            ),
        ),
        first_shift,
    )
}

// ---------------------------------------------------------------- criterion 8

fn quadratic_oracle() -> (bool, String) {
    let n = 6;
    let lambdas = [0.5, 0.8, 1.1, 1.7, 2.4, 3.0];
    let mut rng = RngStream::new(8, 8);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v = rng.normal_vec(n);
        for u in &q {
            let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let nv = l2(&v);
        q.push(v.into_iter().map(|x| x / nv).collect());
    }
    let mut a = vec![0.0; n * n];
    for (l, u) in lambdas.iter().zip(&q) {
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] += l * u[i] * u[j];
            }
        }
    }
    let grad = |t: &[Tensor]| -> culb_core::Result<Vec<Tensor>> {
        let x = t[0].data();
        let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        Ok(vec![Tensor::vector(&g)?])
    };
    let base = vec![Tensor::vector(&rng.normal_vec(n)).unwrap()];
    let t = estimate_smoothness_with(grad, &base, &[0.01, 0.04, 0.8], 8, 3).unwrap();
    let ok = t.rows.iter().all(|r| r.m_mean >= lambdas[0] - 1e-12 && r.m_mean <= lambdas[n - 1] + 1e-12);
    let ms: Vec<String> = t.rows.iter().map(|r| format!("{:.3}", r.m_mean)).collect();
    (ok, format!("quadratic M [{}] within [{}, {}]", ms.join(", "), lambdas[0], lambdas[n - 1]))
}

// --------------------------------------------------------------- criterion 12

fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let less = xs.iter().filter(|y| *y < x).count() as f64;
            let eq = xs.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn oracles(world: &World, base: &ModelCheckpoint, trainable: &[Block]) -> Outcome {
    let mut failures = Vec::new();

    let reqs = build_requests(world, &culb_core::unlearning::UnlearnSettings::default()).unwrap();
    let mut selft_cases = 0;
    for (seed, blocks) in [(1u64, trainable.to_vec()), (2, Block::ALL.to_vec())] {
        let mut rng = RngStream::new(seed, 3);
        let (_, g) = unlearn_loss_and_grads(&base.params, &reqs[..1], world, &base.schedule, Some(&base.params), &mut rng).unwrap();
        for k in [1.0, 10.0, 50.0] {
            let mask = selft_mask(&base.params, &g, &blocks, k).unwrap();
            let mut entries: Vec<(f64, &str, usize, Block)> = Vec::new();
            for &b in &blocks {
                for i in 0..base.params.block(b).len() {
                    entries.push(((g.block(b).data()[i] * base.params.block(b).data()[i]).abs(), b.name(), i, b));
                }
            }
            entries.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(y.1)).then(x.2.cmp(&y.2)));
            let keep = top_k_count(entries.len(), k);
            let agree = mask.cardinality == keep && entries.iter().enumerate().all(|(j, e)| mask.is_selected(e.3, e.2) == (j < keep));
            if !agree {
                failures.push(format!("selft k={k}"));
            }
            selft_cases += 1;
        }
    }

    let mut hull_violations = 0;
    for trial in 0..1000u64 {
        let mut rng = RngStream::new(trial, 12);
        let n = 1 + rng.below(4);
        let blocks: &[Block] = if trial % 2 == 0 { trainable } else { &Block::ALL };
        let cands: Vec<ModelCheckpoint> = (0..n)
            .map(|_| {
                let mut c = base.clone();
                for &b in blocks {
                    for v in c.params.block_mut(b).data_mut() {
                        if rng.uniform() < 0.5 {
                            *v += 0.05 * rng.standard_normal();
                        }
                    }
                }
                c
            })
            .collect();
        let k = [5.0, 20.0, 60.0, 100.0][rng.below(4)];
        let m = ties_merge(base, &cands, blocks, k).unwrap();
        for b in Block::ALL {
            let o = base.params.block(b).data();
            for (i, &v) in m.params.block(b).data().iter().enumerate() {
                let d = v - o[i];
                let (lo, hi) = cands.iter().fold((0.0f64, 0.0f64), |(lo, hi), c| {
                    let t = c.params.block(b).data()[i] - o[i];
                    (lo.min(t), hi.max(t))
                });
                if d < lo - 1e-12 || d > hi + 1e-12 {
                    hull_violations += 1;
                }
            }
        }
    }
    if hull_violations > 0 {
        failures.push(format!("{hull_violations} hull violations"));
    }

    let mut worst_corr = 0.0f64;
    for trial in 0..1000u64 {
        let mut rng = RngStream::new(trial, 13);
        let n = 3 + rng.below(30);
        let xs: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        if let Some(s) = spearman(&xs, &ys) {
            worst_corr = worst_corr.max((s - brute_pearson(&brute_ranks(&xs), &brute_ranks(&ys))).abs());
        }
    }
    if worst_corr > 1e-9 {
        failures.push(format!("spearman error {worst_corr:.1e}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("selft {selft_cases} cases exact, TIES hull 1000 trials clean, correlation error {worst_corr:.1e}")
        } else {
            failures.join(", ")
        },
    )
}

// ----------------------------------------------------------------------- main

fn fmt_traj(log: &RunLog, f: impl Fn(&MetricsRecord) -> f64) -> String {
    let v: Vec<String> = log.records.iter().map(|r| format!("{:.2}", f(r))).collect();
    v.join(" ")
}

fn main() -> ExitCode {
    let total = Instant::now();
    let tmp = tempfile::tempdir().expect("temp dir");
    let config = ExperimentConfig::default();
    let labeler = ParallelLabeler::from_env().expect("thread pool");
    let mut suite = Suite { lines: Vec::new() };
    println!("acceptance: default configuration, {} worker thread(s)", labeler.threads());

    let exp = Experiment::new(config.clone()).unwrap().with_root(tmp.path().join("a"));
    let (world, _) = exp.gen_world().unwrap();

    let t = Instant::now();
    let g = gradients(&world);
    let under = t.elapsed().as_secs_f64() < 60.0;
    suite.record(1, "gradient correctness", t, outcome(g.pass && under, g.detail));

    let t = Instant::now();
    let (base, gate) = match exp.train_base() {
        Ok(x) => x,
        Err(e) => {
            suite.record(3, "base-model gate", t, outcome(false, e.to_string()));
            println!("acceptance: cannot continue without a base model");
            return ExitCode::FAILURE;
        }
    };
    let gate_secs = t.elapsed().as_secs_f64();
    suite.record(
        3,
        "base-model gate",
        t,
        outcome(
            gate.style_accuracy >= 0.98 && gate.object_accuracy >= 0.98 && gate_secs <= 900.0,
            format!(
                "style {:.4}, object {:.4} (worst pair {:.3} / {:.3})",
                gate.style_accuracy, gate.object_accuracy, gate.worst_pair_style, gate.worst_pair_object
            ),
        ),
    );

    let run = |s: Strategy, kinds: &[AddonKind]| -> (PathBuf, RunLog) {
        let t = Instant::now();
        let addons = AddonConfig::with_kinds(kinds);
        let r = exp.unlearn(s, &addons, &labeler).unwrap();
        println!(
            "  run {}-{} ({:.0}s): HM {} | RA-I {} | RA-C {} | drift {}",
            s.as_str(),
            addons.label(),
            t.elapsed().as_secs_f64(),
            fmt_traj(&r.1, |r| r.hm),
            fmt_traj(&r.1, |r| r.ra_i),
            fmt_traj(&r.1, |r| r.ra_c),
            fmt_traj(&r.1, |r| r.drift_total)
        );
        r
    };

    let t = Instant::now();
    let (gp_dir, gp) = run(Strategy::Sequential, &[AddonKind::Gradproj]);
    let (o, aux_first) = lemma(&world, &base, &gp_dir, &gp);
    suite.record(2, "lemma 1 exactness", t, o);

    let t4 = Instant::now();
    let (none_dir, none) = run(Strategy::Sequential, &[]);
    let (_, sim) = run(Strategy::Simultaneous, &[]);
    let steps = config.unlearn.steps;
    let n_req = sim.records.len();
    let expected_steps: usize = (1..=n_req).map(|n| n * steps).sum();
    let ua_ok = none.records.iter().all(|r| r.ua >= 0.85);
    let c4 = ua_ok && last(&none).ra_c <= 0.5 && last(&sim).ra_c >= 0.8 && last(&sim).optimizer_steps_cumulative == expected_steps;
    suite.record(
        4,
        "collapse reproduction",
        t4,
        outcome(
            c4 && t4.elapsed().as_secs_f64() <= 1800.0,
            format!(
                "sequential min UA {:.3} (need >= 0.85), final RA-C {:.3} (need <= 0.5); simultaneous final RA-C {:.3} (need >= 0.8), steps {} (expect {expected_steps})",
                none.records.iter().map(|r| r.ua).fold(1.0, f64::min),
                last(&none).ra_c,
                last(&sim).ra_c,
                last(&sim).optimizer_steps_cumulative
            ),
        ),
    );

    let t = Instant::now();
    let singles: Vec<(&str, RunLog)> = vec![
        ("l1", run(Strategy::Sequential, &[AddonKind::L1]).1),
        ("l2", run(Strategy::Sequential, &[AddonKind::L2]).1),
        ("selft", run(Strategy::Sequential, &[AddonKind::Selft]).1),
        ("merge", run(Strategy::Independent, &[AddonKind::Merge]).1),
        ("gradproj", gp.clone()),
    ];
    let d1 = none.records[0].drift_total;
    let d8 = last(&none).drift_total;
    let s1 = sim.records[0].drift_total;
    let s8 = last(&sim).drift_total;
    let higher: Vec<&str> = singles.iter().filter(|(_, l)| last(l).drift_total >= d8).map(|(n, _)| *n).collect();
    let drifts: Vec<String> = singles.iter().map(|(n, l)| format!("{n} {:.2}", last(l).drift_total)).collect();
    suite.record(
        5,
        "drift reproduction",
        t,
        outcome(
            d8 >= 2.0 * d1 && s8 <= 1.5 * s1 && higher.is_empty(),
            format!(
                "sequential {d1:.2} -> {d8:.2} (ratio {:.2}, need >= 2); simultaneous {s1:.2} -> {s8:.2} (ratio {:.2}, need <= 1.5); add-on finals {} vs none {d8:.2}{}",
                d8 / d1,
                s8 / s1,
                drifts.join(", "),
                if higher.is_empty() { String::new() } else { format!("; not reduced: {}", higher.join(", ")) }
            ),
        ),
    );

    let t = Instant::now();
    let combos: Vec<(&str, RunLog)> = vec![
        ("gradproj+l1", run(Strategy::Sequential, &[AddonKind::Gradproj, AddonKind::L1]).1),
        ("gradproj+l2", run(Strategy::Sequential, &[AddonKind::Gradproj, AddonKind::L2]).1),
        ("gradproj+selft", run(Strategy::Sequential, &[AddonKind::Gradproj, AddonKind::Selft]).1),
    ];
    let rac0 = last(&none).ra_c;
    let no_gain: Vec<&str> = singles.iter().filter(|(_, l)| last(l).ra_c <= rac0).map(|(n, _)| *n).collect();
    let gp_rai = last(&gp).ra_i;
    let best_other = singles
        .iter()
        .filter(|(n, _)| *n != "gradproj")
        .map(|(n, l)| (*n, last(l).ra_i))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let gp_hm = last(&gp).hm;
    let best_combo = combos.iter().map(|(n, l)| (*n, last(l).hm)).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let c6a = no_gain.is_empty();
    let c6b = gp_rai >= best_other.1 - 0.02;
    let c6c = best_combo.1 >= gp_hm - 0.02;
    let racs: Vec<String> = singles.iter().map(|(n, l)| format!("{n} {:.3}", last(l).ra_c)).collect();
    suite.record(
        6,
        "add-on retention gains",
        t,
        outcome(
            c6a && c6b && c6c,
            format!(
                "final RA-C {} vs none {rac0:.3} [{}]; gradproj RA-I {gp_rai:.3} vs best other {} {:.3} [{}]; best combination {} HM {:.3} vs gradproj {gp_hm:.3} [{}]",
                racs.join(", "),
                if c6a { "ok" } else { "no gain" },
                best_other.0,
                best_other.1,
                if c6b { "ok" } else { "not highest" },
                best_combo.0,
                best_combo.1,
                if c6c { "ok" } else { "below" }
            ),
        ),
    );

    let t = Instant::now();
    let sim_study = exp.similarity(None, &AddonConfig::default(), &labeler).unwrap();
    let target = world.splits.unlearn_sequence[0];
    let ck1 = none_dir.join(&none.checkpoints[0]);
    let kv = exp.kv_shift(&exp.base_path(), &ck1, target).unwrap();
    suite.record(
        7,
        "correlation studies",
        t,
        outcome(
            sim_study.report.spearman <= -0.3 && kv.spearman >= 0.3 && aux_first <= 1e-8,
            format!(
                "similarity-retention spearman {:.3} (need <= -0.3), kv-shift spearman {:.3} (need >= 0.3), gradproj auxiliary shift {aux_first:.1e}",
                sim_study.report.spearman, kv.spearman
            ),
        ),
    );

    let t = Instant::now();
    let table = exp.smoothness(None).unwrap();
    let ms: Vec<f64> = table.rows.iter().map(|r| r.m_mean).collect();
    let monotone = ms.iter().all(|m| *m > 0.0) && ms.windows(2).all(|w| w[1] >= w[0]);
    let scales_ok = table.rows.iter().map(|r| r.noise_scale).collect::<Vec<_>>() == vec![0.01, 0.04, 0.8]
        && table.rows.iter().all(|r| r.trials == 8 && !r.flagged);
    let (quad_ok, quad) = quadratic_oracle();
    suite.record(
        8,
        "smoothness table",
        t,
        outcome(
            monotone && scales_ok && quad_ok,
            format!("M_mean {:?} over sigma 0.01/0.04/0.8; {quad}", ms.iter().map(|m| (m * 1e3).round() / 1e3).collect::<Vec<_>>()),
        ),
    );

    let t = Instant::now();
    let taylor = exp.taylor(&none_dir).unwrap();
    let violated = taylor.checkpoints.iter().filter(|c| c.record.violated).count();
    suite.record(
        9,
        "taylor-bound diagnostics",
        t,
        outcome(
            taylor.spearman_delta_vs_loss >= 0.5 && !taylor.perturbation_case.violated,
            format!(
                "spearman(|delta|, |dL|) {:.3} (need >= 0.5); sigma=1e-4 case |dL| {:.2e} <= bound {:.2e}: {}; bound violated at {violated} of {} checkpoints",
                taylor.spearman_delta_vs_loss,
                taylor.perturbation_case.delta_loss_abs,
                taylor.perturbation_case.bound,
                !taylor.perturbation_case.violated,
                taylor.checkpoints.len()
            ),
        ),
    );

    let t = Instant::now();
    let rep = report(&[none_dir.clone(), gp_dir.clone()], false).unwrap();
    let norm = rep.columns[1].normalized.clone().unwrap_or_default();
    let mean = |ns: &[usize]| {
        let v: Vec<f64> = norm.iter().filter(|(n, _)| ns.contains(n)).map(|p| p.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let late = mean(&[6, 7, 8]);
    let early = mean(&[1, 2]);
    suite.record(
        10,
        "growing gains",
        t,
        outcome(late > early, format!("gradproj HM / baseline HM: mean n=6..8 {late:.3} vs n=1..2 {early:.3}")),
    );

    let t = Instant::now();
    let exp_b = Experiment::new(config.clone()).unwrap().with_root(tmp.path().join("b"));
    exp_b.gen_world().unwrap();
    exp_b.train_base().unwrap();
    let (none_b, _) = exp_b.unlearn(Strategy::Sequential, &AddonConfig::default(), &labeler).unwrap();
    let same = |a: &Path, b: &Path| std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    let metrics_same = same(&none_dir.join(METRICS_FILE), &none_b.join(METRICS_FILE));
    let world_same = same(&exp.world_path(), &exp_b.world_path());
    let base_same = same(&exp.base_path(), &exp_b.base_path());
    let bytes = std::fs::read(exp.base_path()).unwrap();
    let reencoded = Container::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    let (back, _) = read_checkpoint(&exp.base_path()).unwrap();
    let bit_exact = Block::ALL.iter().all(|&b| {
        back.params.block(b).data().iter().map(|v| v.to_bits()).eq(base.params.block(b).data().iter().map(|v| v.to_bits()))
    }) && checkpoint_container(&back, Some(&gate)).unwrap().to_bytes().unwrap() == bytes;
    suite.record(
        11,
        "determinism and persistence",
        t,
        outcome(
            metrics_same && world_same && base_same && reencoded == bytes && bit_exact,
            format!(
                "rerun metrics.csv identical: {metrics_same}, world.culb: {world_same}, base.culb: {base_same}; container round-trip bit-exact: {}",
                reencoded == bytes && bit_exact
            ),
        ),
    );

    let t = Instant::now();
    suite.record(12, "oracle equivalences", t, oracles(&world, &base, &config.unlearn.trainable));

    suite.lines.sort_by_key(|l| l.0);
    let failed: Vec<u8> = suite.lines.iter().filter(|l| !l.2.pass).map(|l| l.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s{}",
        suite.lines.len() - failed.len(),
        suite.lines.len(),
        total.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
