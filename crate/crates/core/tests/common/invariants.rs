//! Randomised checks of forward-pass invariants. Each takes a trial seed
//! and reports the first violation.

use super::{random_example, random_params};
use qann_core::tensor;
use qann_core::{forward_pass, Example, ForwardOptions, ForwardOutput, ModelDims, ModelParams, Overrides};
use qann_core::encoder::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = fn(u64) -> Result<(), String>;

pub const ALL: [(&str, Check); 7] = [
    ("alpha normalization", alpha_normalized),
    ("gate ranges", gate_ranges),
    ("answer telescoping", answer_telescopes),
    ("softmax shift and argmax invariance", shift_invariance),
    ("identity output-embedding reduction", identity_reduction),
    ("query-keep identity", query_keep),
    ("replay determinism", replay_determinism),
];

pub struct Instance {
    pub params: ModelParams,
    pub example: Example,
    pub hops: usize,
}

pub fn instance(seed: u64, identity_eo: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(8..14);
    let hidden = rng.gen_range(2..6);
    let dims = ModelDims {
        vocab,
        hidden,
        identity_eo,
    };
    let noise = rng.gen_range(0.0..1.0);
    let params = random_params(&mut rng, dims, noise);
    let n_cands = rng.gen_range(1..=4);
    let example = random_example(&mut rng, vocab, 1..=12, n_cands);
    Instance {
        params,
        example,
        hops: rng.gen_range(1..=5),
    }
}

fn run(inst: &Instance, overrides: Overrides) -> Result<ForwardOutput, String> {
    let opts = ForwardOptions {
        overrides,
        ..ForwardOptions::eval(inst.hops)
    };
    forward_pass(&inst.params, &inst.example, &opts, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn alpha_normalized(seed: u64) -> Result<(), String> {
    let inst = instance(seed, seed % 3 == 0);
    let out = run(&inst, Overrides::default())?;
    for (t, h) in out.traces.iter().enumerate() {
        let sum: f64 = h.alpha.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("hop {t}: alpha sums to {sum}"))?;
        ensure(h.alpha.iter().all(|&a| a >= 0.0), || format!("hop {t}: negative alpha"))?;
    }
    Ok(())
}

pub fn gate_ranges(seed: u64) -> Result<(), String> {
    let inst = instance(seed, seed % 3 == 0);
    let out = run(&inst, Overrides::default())?;
    for (t, h) in out.traces.iter().enumerate() {
        ensure(h.g_a > 0.0 && h.g_a < 1.0, || format!("hop {t}: g_a = {}", h.g_a))?;
        ensure(h.g_q.iter().all(|&g| g > 0.0 && g < 1.0), || format!("hop {t}: g_q = {:?}", h.g_q))?;
        ensure(h.eta > 0.0 && h.eta <= 1.0, || format!("hop {t}: eta = {}", h.eta))?;
    }
    Ok(())
}

pub fn answer_telescopes(seed: u64) -> Result<(), String> {
    let inst = instance(seed, seed % 3 == 0);
    let out = run(&inst, Overrides::default())?;
    let mut expect = out.a0.clone();
    for (h, y) in out.traces.iter().zip(&out.retrieved_answers) {
        for (e, v) in expect.iter_mut().zip(y) {
            *e += h.g_a * v;
        }
    }
    let got = out.answers.last().expect("at least one hop");
    for (g, e) in got.iter().zip(&expect) {
        let scale = g.abs().max(e.abs()).max(1.0);
        ensure((g - e).abs() <= 1e-12 * scale, || format!("a_T {g} vs telescoped {e}"))?;
    }
    Ok(())
}

pub fn shift_invariance(seed: u64) -> Result<(), String> {
    let inst = instance(seed, false);
    let out = run(&inst, Overrides::default())?;
    let shift = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).gen_range(-100.0..100.0);
    let shifted: Vec<f64> = out.scores.iter().map(|s| s + shift).collect();
    let probs = tensor::softmax(&shifted).ok_or("softmax of empty scores")?;
    let sum: f64 = probs.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-9, || format!("probs sum to {sum}"))?;
    ensure(probs.iter().all(|&p| p >= 0.0), || "negative probability".into())?;
    for (a, b) in probs.iter().zip(&out.probs) {
        ensure((a - b).abs() <= 1e-9, || format!("shift by {shift} moved a probability from {b} to {a}"))?;
    }
    let arg = tensor::argmax(&shifted).ok_or("argmax of empty scores")?;
    ensure(arg == out.prediction, || format!("prediction {} became {arg}", out.prediction))
}

pub fn identity_reduction(seed: u64) -> Result<(), String> {
    let inst = instance(seed, true);
    let overrides = Overrides {
        ablate_query_gate: true,
        answer_gate: Some(1.0),
        ..Overrides::default()
    };
    let out = run(&inst, overrides)?;
    // attention-sum: total attention each candidate receives over hops and positions
    for (ci, &c) in inst.example.candidates.iter().enumerate() {
        let mass: f64 = out
            .traces
            .iter()
            .map(|h| {
                h.alpha
                    .iter()
                    .zip(&out.support_symbols)
                    .filter(|(_, &s)| s == c)
                    .map(|(a, _)| a)
                    .sum::<f64>()
            })
            .sum();
        ensure((out.scores[ci] - mass).abs() <= 1e-12, || {
            format!("candidate {c}: score {} vs attention mass {mass}", out.scores[ci])
        })?;
    }
    Ok(())
}

pub fn query_keep(seed: u64) -> Result<(), String> {
    let mut inst = instance(seed, seed % 3 == 0);
    inst.hops = inst.hops.max(2);
    let out = run(
        &inst,
        Overrides {
            query_gate: Some(1.0),
            ..Overrides::default()
        },
    )?;
    // an unchanged query retrieves identically at every hop
    let first = &out.traces[0].alpha;
    for (t, h) in out.traces.iter().enumerate().skip(1) {
        ensure(&h.alpha == first, || format!("hop {t} attention differs with the query gate held at 1"))?;
    }
    Ok(())
}

pub fn replay_determinism(seed: u64) -> Result<(), String> {
    let inst = instance(seed, seed % 3 == 0);
    let opts = ForwardOptions {
        mode: Mode::Train { dropout: 0.3 },
        ..ForwardOptions::eval(inst.hops)
    };
    let once = |s: u64| {
        forward_pass(&inst.params, &inst.example, &opts, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())
    };
    let (a, b) = (once(seed)?, once(seed)?);
    ensure(a == b, || "two runs with one seed differ".into())
}
