//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test -p qann-core --test acceptance`; pass
//! substrings after `--` to run only matching criteria. The process exits
//! non-zero on a failure only when `QANN_ACCEPTANCE_STRICT` is set, so the
//! report can be collected as part of an ordinary workspace test run.

mod common;

use std::time::{Duration, Instant};

use common::invariants;
use common::{end_to_end_grad_check, max_abs_diff, oracle_forward, random_example, random_params};
use qann_core::checkpoint::Checkpoint;
use qann_core::data::synth::{gen_splits, SynthConfig};
use qann_core::trainer::{
    evaluate, train_from, DevEvaluator, EvalKind, EvalPoint, Evaluator, Observer, TrainConfig, TrainOutcome,
    TrainState,
};
use qann_core::{forward_pass, Dataset, Example, ForwardOptions, ModelDims, ModelParams, Overrides, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion = fn(&mut Shared) -> Verdict;

/// Models trained by one criterion and reused by later ones.
#[derive(Default)]
struct Shared {
    one_hop: Option<(ModelParams, Dataset)>,
    two_hop: Vec<Option<(ModelParams, Dataset)>>,
}

const CRITERIA: [(&str, Criterion); 9] = [
    ("gradient-oracle", gradient_oracle),
    ("straight-line-oracle", straight_line_oracle),
    ("invariant-suite", invariant_suite),
    ("learning-1-hop", learning_one_hop),
    ("multi-hop-gap", multi_hop_gap),
    ("hop-sweep-stability", hop_sweep_stability),
    ("schedule-conformance", schedule_conformance),
    ("query-gate-ablation", query_gate_ablation),
    ("checkpoint-round-trip", checkpoint_round_trip),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run(&mut shared);
        ran += 1;
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("QANN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn gradient_oracle(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let report = end_to_end_grad_check(false, 1);
    let elapsed = start.elapsed();
    verdict(
        report.passed(1e-4) && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {:.2e} over {} entries (< 1e-4), {:.2}s (< 60s)",
            report.max_rel_error,
            report.entries_checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn straight_line_oracle(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let dims = ModelDims {
            vocab: 11,
            hidden: 4,
            identity_eo: trial % 4 == 3,
        };
        let p = random_params(&mut rng, dims, 0.3);
        let ex = random_example(&mut rng, 11, 2..=10, 1 + trial % 4);
        let hops = 1 + trial % 4;
        let got = forward_pass(&p, &ex, &ForwardOptions::eval(hops), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let want = oracle_forward(&p, &ex, hops, false);
        let mut diffs = vec![
            max_abs_diff(&got.scores, &want.scores),
            max_abs_diff(&got.probs, &want.probs),
            max_abs_diff(&got.q0, &want.q0),
            max_abs_diff(&got.a0, &want.a0),
        ];
        for (t, (g, w)) in got.traces.iter().zip(&want.hops).enumerate() {
            diffs.push(max_abs_diff(&g.alpha, &w.alpha));
            diffs.push(max_abs_diff(&g.g_q, &w.g_q));
            diffs.push((g.g_a - w.g_a).abs());
            diffs.push((g.eta - w.eta).abs());
            diffs.push(max_abs_diff(&got.answers[t], &w.answer));
        }
        worst = diffs.into_iter().fold(worst, f64::max);
    }
    verdict(worst <= 1e-10, format!("100 instances, max abs diff {worst:.2e} (<= 1e-10)"))
}

fn invariant_suite(_: &mut Shared) -> Verdict {
    let mut parts = Vec::new();
    let mut violations = 0;
    for (name, check) in invariants::ALL {
        let bad: Vec<String> = (0..1000u64)
            .filter_map(|seed| check(seed).err().map(|e| format!("seed {seed}: {e}")))
            .collect();
        if let Some(first) = bad.first() {
            parts.push(format!("{name}: {} violations, first {first}", bad.len()));
        }
        violations += bad.len();
    }
    let detail = if parts.is_empty() {
        format!("{} invariants x 1000 trials, 0 violations", invariants::ALL.len())
    } else {
        parts.join("; ")
    };
    verdict(violations == 0, detail)
}

/// Hyper-parameters shared by every learning criterion.
fn learning_config(hops: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 16,
        hops,
        lr0: 0.01,
        batch_size: 32,
        checkpoint_every: 100,
        dropout: 0.0,
        seed,
        max_epochs: 10,
        ..TrainConfig::default()
    }
}

/// Returns train, dev and test splits.
fn splits(cfg: &SynthConfig, n_train: usize) -> (Dataset, Dataset, Dataset) {
    let mut s = gen_splits(cfg, &[("train", n_train), ("dev", 500), ("test", 1000)]).unwrap().into_iter();
    (s.next().unwrap(), s.next().unwrap(), s.next().unwrap())
}

fn fit(config: &TrainConfig, train: &Dataset, dev: &Dataset) -> (TrainOutcome, Duration) {
    let start = Instant::now();
    let mut eval = DevEvaluator::new(&dev.examples, config.hops, None);
    let state = TrainState::fresh(config, train.vocab.len()).unwrap();
    let out = train_from(config, &train.examples, state, None, &mut eval, &mut ()).unwrap();
    (out, start.elapsed())
}

fn accuracy(p: &ModelParams, ds: &Dataset, hops: usize) -> f64 {
    evaluate(p, &ds.examples, hops).unwrap().accuracy
}

fn learning_one_hop(shared: &mut Shared) -> Verdict {
    let task = SynthConfig {
        n_entities: 20,
        n_relations: 4,
        n_distractor_facts: 3,
        chain_length: 1,
        seed: 1,
        ..SynthConfig::default()
    };
    let (train, dev, test) = splits(&task, 2000);
    let (out, took) = fit(&learning_config(1, 0), &train, &dev);
    let epochs = out.state.progress.epoch;
    let test_acc = accuracy(&out.best_params, &test, 1);
    let pass = out.best.dev_accuracy >= 0.95 && epochs <= 10 && took < Duration::from_secs(600);
    shared.one_hop = Some((out.best_params, test));
    verdict(
        pass,
        format!(
            "dev {:.3} (>= 0.95), test {test_acc:.3}, {epochs} epochs (<= 10), {:.0}s (< 600s)",
            out.best.dev_accuracy,
            took.as_secs_f64()
        ),
    )
}

/// Two-hop task: smaller than the one-hop task so that a single retrieval
/// cannot shortcut the chain yet the budget stays the same.
fn two_hop_task(seed: u64) -> SynthConfig {
    SynthConfig {
        n_entities: 10,
        n_relations: 2,
        n_distractor_facts: 2,
        chain_length: 2,
        seed,
        ..SynthConfig::default()
    }
}

const GAP_SEEDS: u64 = 5;

fn multi_hop_gap(shared: &mut Shared) -> Verdict {
    let mut lines = Vec::new();
    let mut passing = 0;
    shared.two_hop.clear();
    for seed in 0..GAP_SEEDS {
        let (train, dev, test) = splits(&two_hop_task(seed), 10_000);
        let (one, t1) = fit(&learning_config(1, seed), &train, &dev);
        let (two, t2) = fit(&learning_config(2, seed), &train, &dev);
        let acc_one = accuracy(&one.best_params, &test, 1);
        let acc_two = accuracy(&two.best_params, &test, 2);
        let two_at_one = accuracy(&two.best_params, &test, 1);
        let ok = acc_two - acc_one >= 0.20 && acc_two - two_at_one >= 0.15;
        passing += usize::from(ok);
        lines.push(format!(
            "seed {seed} {}: T2 {acc_two:.3} vs T1 {acc_one:.3}, T2@1 {two_at_one:.3} ({:.0}s+{:.0}s)",
            if ok { "ok" } else { "miss" },
            t1.as_secs_f64(),
            t2.as_secs_f64()
        ));
        shared.two_hop.push(Some((two.best_params, test)));
    }
    verdict(
        passing >= 4,
        format!(
            "{passing}/{GAP_SEEDS} seeds with gap >= 0.20 and T_eval=1 loss >= 0.15 (need 4); {}",
            lines.join("; ")
        ),
    )
}

fn hop_sweep_stability(shared: &mut Shared) -> Verdict {
    if shared.two_hop.is_empty() {
        multi_hop_gap(shared);
    }
    let mut lines = Vec::new();
    let mut first_range = f64::NAN;
    for (seed, slot) in shared.two_hop.iter().enumerate() {
        let (p, test) = slot.as_ref().expect("trained by multi-hop-gap");
        let accs: Vec<f64> = (2..=6).map(|t| accuracy(p, test, t)).collect();
        let hi = accs.iter().cloned().fold(f64::MIN, f64::max);
        let lo = accs.iter().cloned().fold(f64::MAX, f64::min);
        if seed == 0 {
            first_range = hi - lo;
        }
        let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
        lines.push(format!("seed {seed} [{}] range {:.3}", shown.join(" "), hi - lo));
    }
    verdict(
        first_range <= 0.05,
        format!("T_eval 2..6 on the seed-0 model, range {first_range:.3} (<= 0.05); {}", lines.join("; ")),
    )
}

/// Scripted dev accuracies, consumed in call order per evaluation kind.
struct Script {
    checkpoints: Vec<f64>,
    epochs: Vec<f64>,
    calls: Vec<EvalPoint>,
}

impl Evaluator for Script {
    fn dev_accuracy(&mut self, _: &ModelParams, point: EvalPoint) -> qann_core::Result<f64> {
        let n = self.calls.iter().filter(|p| p.kind == point.kind).count();
        self.calls.push(point);
        let s = match point.kind {
            EvalKind::Checkpoint => &self.checkpoints,
            EvalKind::Epoch => &self.epochs,
        };
        Ok(s[n.min(s.len() - 1)])
    }
}

struct Snapshots(Vec<(EvalPoint, ModelParams)>);

impl Observer for Snapshots {
    fn on_row(&mut self, row: &qann_core::trainer::MetricsRow, state: &TrainState) -> qann_core::Result<()> {
        let point = EvalPoint {
            kind: row.kind,
            step: row.step,
            epoch: row.epoch,
        };
        self.0.push((point, state.params.clone()));
        Ok(())
    }
}

fn scripted(checkpoints: Vec<f64>, epochs: Vec<f64>, max_epochs: usize) -> (TrainOutcome, Snapshots) {
    let task = SynthConfig {
        n_entities: 8,
        n_relations: 2,
        n_distractor_facts: 1,
        ..SynthConfig::default()
    };
    let train = gen_splits(&task, &[("train", 4)]).unwrap().remove(0);
    // four single-example steps per epoch, a checkpoint every two steps
    let config = TrainConfig {
        hidden: 4,
        batch_size: 1,
        checkpoint_every: 2,
        max_epochs,
        lr0: 0.004,
        ..TrainConfig::default()
    };
    let mut eval = Script {
        checkpoints,
        epochs,
        calls: Vec::new(),
    };
    let mut snaps = Snapshots(Vec::new());
    let state = TrainState::fresh(&config, train.vocab.len()).unwrap();
    let out = train_from(&config, &train.examples, state, None, &mut eval, &mut snaps).unwrap();
    (out, snaps)
}

fn schedule_conformance(_: &mut Shared) -> Verdict {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // monotone accuracies: never halved, runs to max_epochs
    let (out, _) = scripted(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![0.2, 0.4, 0.6], 3);
    let s = &out.state.progress.schedule;
    expect(s.halvings == 0 && s.lr == 0.004, "monotone run halved the rate");
    expect(!out.stopped_early && out.state.progress.epoch == 3, "monotone run stopped early");

    // a drop during the first epoch is ignored; [0.5, 0.4] afterwards halves once
    let (out, snaps) = scripted(vec![0.3, 0.2, 0.5, 0.4], vec![0.6, 0.55], 5);
    let s = &out.state.progress.schedule;
    expect(s.halvings == 1 && s.lr == 0.002, "post-epoch checkpoint drop did not halve exactly once");
    let lrs: Vec<f64> = out.metrics.iter().filter(|r| r.kind == EvalKind::Checkpoint).map(|r| r.lr).collect();
    expect(lrs == [0.004, 0.004, 0.004, 0.002], "halving happened at the wrong checkpoint");

    // epoch accuracies [0.6, 0.55]: stop after epoch 2, best is epoch 1
    expect(out.stopped_early && out.state.progress.epoch == 2, "epoch drop did not stop after epoch 2");
    expect(
        out.best.kind == EvalKind::Epoch && out.best.epoch == 0 && out.best.dev_accuracy == 0.6,
        "best snapshot is not the first epoch",
    );
    let first_epoch = snaps.0.iter().find(|(p, _)| p.kind == EvalKind::Epoch && p.epoch == 0);
    expect(
        first_epoch.is_some_and(|(_, params)| *params == out.best_params),
        "returned parameters are not the first-epoch snapshot",
    );

    let detail = if failures.is_empty() {
        "halving after epoch 1 only, stop on epoch drop, best = epoch 1".to_string()
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

/// Builds a model and example where the support attention favours a wrong
/// candidate while the initial answer `a₀` points at the gold one.
fn ablation_probe() -> Option<(ModelParams, Example, Vec<f64>)> {
    let (gold, wrong) = (3usize, 4usize);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            vocab: 8,
            hidden: 4,
            identity_eo: false,
        };
        let mut p = random_params(&mut rng, dims, 0.1);
        let doc = common::doc_of(vec![wrong, 5, wrong, 6, gold, 7, wrong]);
        let query = common::doc_of(vec![5, 0, 6]);
        let ex = Example::new(doc, query, vec![gold, wrong], gold).unwrap();

        // orthonormal output embeddings for the two candidates
        let mut e_o = Tensor::zeros(&[8, 4]);
        e_o.data_mut()[gold * 4] = 1.0;
        e_o.data_mut()[wrong * 4 + 1] = 1.0;
        p.e_o = Some(e_o);
        // constant answer gate of one half
        p.hop.u_a_g = Tensor::zeros(&[p.dims.gate_input_dim()]);
        p.hop.b_a = Tensor::scalar(0.0);

        let plain = forward_pass(&p, &ex, &ForwardOptions::eval(1), &mut ChaCha8Rng::seed_from_u64(0)).ok()?;
        let mass = |c: usize| -> f64 {
            plain.traces[0]
                .alpha
                .iter()
                .zip(&plain.support_symbols)
                .filter(|(_, &s)| s == c)
                .map(|(a, _)| a)
                .sum()
        };
        if mass(wrong) <= mass(gold) {
            continue;
        }
        // a₀ = U^a_q q₀ = e_o[gold], with the query gate saturated open
        let q0 = &plain.q0;
        let norm2: f64 = q0.iter().map(|x| x * x).sum();
        let mut u = Tensor::zeros(&[4, 4]);
        for j in 0..4 {
            u.data_mut()[j] = q0[j] / norm2;
        }
        p.hop.u_a_q = u;
        p.hop.g_a_q = Tensor::scalar(30.0);
        return Some((p, ex, vec![mass(gold), mass(wrong)]));
    }
    None
}

fn query_gate_ablation(_: &mut Shared) -> Verdict {
    let Some((p, ex, mass)) = ablation_probe() else {
        return verdict(false, "could not construct the probe example");
    };
    let run = |ablate: bool| {
        let opts = ForwardOptions {
            overrides: Overrides {
                ablate_query_gate: ablate,
                ..Overrides::default()
            },
            ..ForwardOptions::eval(1)
        };
        forward_pass(&p, &ex, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    };
    let (with, without) = (run(false), run(true));
    let flips = with.predicted_symbol(&ex) == ex.gold && without.predicted_symbol(&ex) != ex.gold;
    verdict(
        flips,
        format!(
            "attention mass gold {:.3} vs wrong {:.3}; prediction {} -> {} when ablated",
            mass[0],
            mass[1],
            if with.predicted_symbol(&ex) == ex.gold { "gold" } else { "wrong" },
            if without.predicted_symbol(&ex) == ex.gold { "gold" } else { "wrong" },
        ),
    )
}

fn checkpoint_round_trip(shared: &mut Shared) -> Verdict {
    let (params, test) = match &shared.one_hop {
        Some((p, t)) => (p.clone(), t.clone()),
        None => {
            // standalone run: a briefly trained small model
            let task = SynthConfig {
                n_entities: 10,
                ..SynthConfig::default()
            };
            let (train, dev, test) = splits(&task, 200);
            let (out, _) = fit(
                &TrainConfig {
                    max_epochs: 2,
                    ..learning_config(1, 0)
                },
                &train,
                &dev,
            );
            (out.best_params, test)
        }
    };
    let config = learning_config(1, 0);
    let mut state = TrainState::fresh(&config, test.vocab.len()).unwrap();
    state.params = params;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    Checkpoint::from_state(&config, &test.vocab, &state, None).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();

    let examples = &test.examples[..100];
    let identical = examples.iter().all(|ex| {
        let run = |p: &ModelParams| forward_pass(p, ex, &ForwardOptions::eval(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (a, b) = (run(&state.params), run(&back.params));
        a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()) && a == b
    });
    let same_eval = evaluate(&state.params, examples, 1).unwrap() == evaluate(&back.params, examples, 1).unwrap();
    verdict(
        identical && same_eval && back.vocab == test.vocab,
        format!("100 examples, scores bit-identical: {identical}, evaluation identical: {same_eval}"),
    )
}
