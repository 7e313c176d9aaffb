//! Mini-batch training with Adam, dev-driven learning-rate halving and
//! epoch-level early stopping.
//!
//! Within a batch every example gets its own tape; examples run in parallel
//! over shared read-only parameters and their gradients are reduced in
//! example order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::hop::{self, ForwardOptions};
use crate::params::{InitOptions, ModelDims, ModelParams};
use crate::support::Example;
use crate::tensor::{self, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Hops used during training.
    pub hops: usize,
    pub lr0: f64,
    pub batch_size: usize,
    /// Optimizer steps between dev evaluations.
    pub checkpoint_every: usize,
    pub dropout: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub embed_init_stddev: f64,
    pub identity_eo: bool,
    /// Evaluate on only the first `n` dev examples.
    pub dev_subsample: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            hops: 1,
            lr0: 0.001,
            batch_size: 32,
            checkpoint_every: 100,
            dropout: 0.2,
            seed: 0,
            max_epochs: 10,
            embed_init_stddev: 0.1,
            identity_eo: false,
            dev_subsample: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("hops", self.hops),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.embed_init_stddev > 0.0) {
            return Err(Error::Config("embed_init_stddev must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.dev_subsample == Some(0) {
            return Err(Error::Config("dev_subsample must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            hidden: self.hidden,
            identity_eo: self.identity_eo,
        }
    }
}

/// SplitMix64 over a sequence of words; used to derive independent seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

pub fn init_params(config: &TrainConfig, vocab: usize) -> Result<ModelParams> {
    let opts = InitOptions {
        embed_stddev: config.embed_init_stddev,
        ..InitOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0]));
    ModelParams::init(config.dims(vocab), &opts, &mut rng)
}

/// `−log p(gold)` from raw scores, via log-sum-exp.
pub fn loss(scores: &[f64], gold_index: usize) -> Result<f64> {
    if gold_index >= scores.len() {
        return Err(Error::Data(format!(
            "gold index {gold_index} outside {} candidates",
            scores.len()
        )));
    }
    Ok(tensor::log_sum_exp(scores) - scores[gold_index])
}

/// Loss and parameter gradients (canonical order) for one example.
pub fn example_gradients(
    params: &ModelParams,
    example: &Example,
    hops: usize,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let opts = ForwardOptions {
        hops,
        mode,
        overrides: Default::default(),
    };
    let graph = hop::forward(&mut tape, &bound, example, &opts, &mut rng)?;
    let loss = tape.cross_entropy(graph.scores, example.gold_index())?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let out = bound
        .all
        .iter()
        .map(|&v| grads.take(v).expect("every parameter gets a gradient"))
        .collect();
    Ok((value, out))
}

/// Adam moments plus the step counter and current learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new<'t>(params: impl IntoIterator<Item = &'t Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            lr,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::shape("adam", self.m[i].shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((w, &g), m), v) in iter {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    let names = params.names();
    state.update(params.tensors_mut(), grads, &names)
}

/// Where a dev evaluation happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    /// Every `checkpoint_every` optimizer steps.
    Checkpoint,
    /// After the last batch of an epoch.
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPoint {
    pub kind: EvalKind,
    pub step: u64,
    /// 0-based epoch the evaluation belongs to.
    pub epoch: usize,
}

/// Supplies dev accuracies to the training loop.
pub trait Evaluator {
    fn dev_accuracy(&mut self, params: &ModelParams, point: EvalPoint) -> Result<f64>;
}

/// Accuracy on (a prefix of) a dev set at a fixed number of hops.
pub struct DevEvaluator<'d> {
    pub dev: &'d [Example],
    pub hops: usize,
}

impl<'d> DevEvaluator<'d> {
    pub fn new(dev: &'d [Example], hops: usize, subsample: Option<usize>) -> Self {
        let n = subsample.map_or(dev.len(), |n| n.min(dev.len()));
        Self { dev: &dev[..n], hops }
    }
}

impl Evaluator for DevEvaluator<'_> {
    fn dev_accuracy(&mut self, params: &ModelParams, _: EvalPoint) -> Result<f64> {
        Ok(evaluate(params, self.dev, self.hops)?.accuracy)
    }
}

/// Learning-rate and stopping state machine.
///
/// A checkpoint accuracy strictly below the previous checkpoint's halves the
/// rate once at least one epoch has completed. An epoch accuracy strictly
/// below the previous epoch's stops training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub prev_checkpoint: Option<f64>,
    pub prev_epoch: Option<f64>,
    pub halvings: u32,
    pub best: Option<BestInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestInfo {
    pub dev_accuracy: f64,
    pub step: u64,
    pub epoch: usize,
    pub kind: EvalKind,
}

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            prev_checkpoint: None,
            prev_epoch: None,
            halvings: 0,
            best: None,
        }
    }

    /// Returns whether the rate was halved.
    pub fn on_checkpoint(&mut self, accuracy: f64, epochs_completed: usize) -> bool {
        let dropped = self.prev_checkpoint.is_some_and(|p| accuracy < p);
        self.prev_checkpoint = Some(accuracy);
        if dropped && epochs_completed >= 1 {
            self.lr *= 0.5;
            self.halvings += 1;
            true
        } else {
            false
        }
    }

    /// Returns whether training should stop.
    pub fn on_epoch(&mut self, accuracy: f64) -> bool {
        let dropped = self.prev_epoch.is_some_and(|p| accuracy < p);
        self.prev_epoch = Some(accuracy);
        dropped
    }

    /// Records a candidate for the best snapshot; earlier wins ties.
    pub fn offer_best(&mut self, info: BestInfo) -> bool {
        let better = self.best.map_or(true, |b| info.dev_accuracy > b.dev_accuracy);
        if better {
            self.best = Some(info);
        }
        better
    }
}

/// Position in the training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    /// Current 0-based epoch.
    pub epoch: usize,
    /// Batches of the current epoch already applied.
    pub batch_in_epoch: usize,
    pub schedule: Schedule,
    pub finished: bool,
    /// Finished by the epoch-drop rule; a run finished by budget may be extended.
    #[serde(default)]
    pub stopped_early: bool,
    /// Loss sum and count since the last logged row.
    pub loss_sum: f64,
    pub loss_count: u64,
}

/// Everything needed to continue training bit-consistently.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, vocab: usize) -> Result<Self> {
        let params = init_params(config, vocab)?;
        let optimizer = OptimizerState::new(params.tensors(), config.lr0);
        Ok(Self {
            params,
            optimizer,
            progress: Progress {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                schedule: Schedule::new(config.lr0),
                finished: false,
                stopped_early: false,
                loss_sum: 0.0,
                loss_count: 0,
            },
        })
    }
}

/// One metrics-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: EvalKind,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

/// Training callbacks. Defaults do nothing.
pub trait Observer {
    fn on_row(&mut self, _row: &MetricsRow, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// Called when `state.params` becomes the best snapshot.
    fn on_best(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub best: BestInfo,
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    /// Stopped by the epoch rule rather than `max_epochs`.
    pub stopped_early: bool,
}

fn epoch_order(config: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 1, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Mean loss and mean gradients over a batch of example indices.
pub fn batch_gradients(
    params: &ModelParams,
    train: &[Example],
    batch: &[usize],
    config: &TrainConfig,
    step: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mode = Mode::Train {
        dropout: config.dropout,
    };
    let per_example: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|&i| {
            let seed = derive_seed(&[config.seed, 2, step, i as u64]);
            example_gradients(params, &train[i], config.hops, mode, seed)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_example.into_iter();
    let (mut loss, mut acc) = iter.next().expect("batch is non-empty");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for a in &mut acc {
        a.scale_in_place(scale);
    }
    Ok((loss * scale, acc))
}

/// Trains from a fresh state against a dev set.
pub fn train(config: &TrainConfig, train_set: &[Example], dev_set: &[Example], vocab: usize) -> Result<TrainOutcome> {
    if dev_set.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }
    let mut eval = DevEvaluator::new(dev_set, config.hops, config.dev_subsample);
    let state = TrainState::fresh(config, vocab)?;
    train_from(config, train_set, state, None, &mut eval, &mut ())
}

/// Runs (or continues) the training loop from `state`. `best_params` is the
/// best snapshot of a resumed run.
pub fn train_from(
    config: &TrainConfig,
    train_set: &[Example],
    mut state: TrainState,
    best_params: Option<ModelParams>,
    evaluator: &mut dyn Evaluator,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let max_symbol = train_set.iter().map(Example::max_symbol).max().unwrap_or(0);
    if max_symbol >= state.params.dims.vocab {
        return Err(Error::Config(format!(
            "symbol {max_symbol} outside vocabulary of {}",
            state.params.dims.vocab
        )));
    }
    let names = state.params.names();
    let mut best_params = match (best_params, state.progress.schedule.best) {
        (Some(p), Some(_)) => p,
        _ => state.params.clone(),
    };
    let mut metrics = Vec::new();
    let n_batches = train_set.len().div_ceil(config.batch_size);

    while !state.progress.finished && state.progress.epoch < config.max_epochs {
        let epoch = state.progress.epoch;
        let order = epoch_order(config, epoch, train_set.len());
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for batch in &batches[state.progress.batch_in_epoch..] {
            let step = state.progress.step;
            let (loss, grads) = batch_gradients(&state.params, train_set, batch, config, step)?;
            state.optimizer.lr = state.progress.schedule.lr;
            state.optimizer.update(state.params.tensors_mut(), &grads, &names)?;
            let p = &mut state.progress;
            p.step += 1;
            p.batch_in_epoch += 1;
            p.loss_sum += loss;
            p.loss_count += 1;

            if p.step % config.checkpoint_every as u64 == 0 {
                let point = EvalPoint {
                    kind: EvalKind::Checkpoint,
                    step: p.step,
                    epoch,
                };
                let acc = evaluator.dev_accuracy(&state.params, point)?;
                let p = &mut state.progress;
                p.schedule.on_checkpoint(acc, epoch);
                record(&mut state, point, acc, &mut best_params, &mut metrics, observer)?;
            }
        }
        debug_assert_eq!(state.progress.batch_in_epoch, n_batches);

        let point = EvalPoint {
            kind: EvalKind::Epoch,
            step: state.progress.step,
            epoch,
        };
        let acc = evaluator.dev_accuracy(&state.params, point)?;
        let p = &mut state.progress;
        let stop = p.schedule.on_epoch(acc);
        p.epoch += 1;
        p.batch_in_epoch = 0;
        if stop {
            p.finished = true;
            p.stopped_early = true;
        } else if p.epoch >= config.max_epochs {
            p.finished = true;
        }
        record(&mut state, point, acc, &mut best_params, &mut metrics, observer)?;
        log::info!(
            "epoch {} step {} lr {:.3e} dev {:.4}",
            epoch + 1,
            state.progress.step,
            state.progress.schedule.lr,
            acc
        );
    }
    state.progress.finished = true;
    let best = state.progress.schedule.best.ok_or_else(|| Error::Config("no evaluation was run".into()))?;
    Ok(TrainOutcome {
        best_params,
        best,
        stopped_early: state.progress.stopped_early,
        state,
        metrics,
    })
}

fn record(
    state: &mut TrainState,
    point: EvalPoint,
    acc: f64,
    best_params: &mut ModelParams,
    metrics: &mut Vec<MetricsRow>,
    observer: &mut dyn Observer,
) -> Result<()> {
    let p = &mut state.progress;
    let train_loss = if p.loss_count > 0 {
        p.loss_sum / p.loss_count as f64
    } else {
        f64::NAN
    };
    p.loss_sum = 0.0;
    p.loss_count = 0;
    let improved = p.schedule.offer_best(BestInfo {
        dev_accuracy: acc,
        step: point.step,
        epoch: point.epoch,
        kind: point.kind,
    });
    let row = MetricsRow {
        kind: point.kind,
        step: point.step,
        epoch: point.epoch,
        lr: p.schedule.lr,
        train_loss,
        dev_accuracy: acc,
    };
    if improved {
        *best_params = state.params.clone();
        observer.on_best(state)?;
    }
    observer.on_row(&row, state)?;
    metrics.push(row);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Predicted candidate index per example.
    pub predictions: Vec<usize>,
    pub correct: usize,
}

/// Deterministic accuracy with dropout off. An empty set scores 0.
pub fn evaluate(params: &ModelParams, examples: &[Example], hops: usize) -> Result<Evaluation> {
    let opts = ForwardOptions::eval(hops);
    let predictions: Vec<usize> = examples
        .par_iter()
        .map(|ex| {
            // eval mode draws no random numbers
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            hop::forward_pass(params, ex, &opts, &mut rng).map(|o| o.prediction)
        })
        .collect::<Result<_>>()?;
    let correct = examples
        .iter()
        .zip(&predictions)
        .filter(|(ex, &p)| ex.gold_index() == p)
        .count();
    let accuracy = if examples.is_empty() {
        0.0
    } else {
        correct as f64 / examples.len() as f64
    };
    Ok(Evaluation {
        accuracy,
        predictions,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_hand_values() {
        assert!((loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(loss(&[800.0, 0.0], 0).unwrap().abs() < 1e-12);
        assert!((loss(&[2.0, 0.0], 0).unwrap() - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((loss(&[2.0, 0.0], 0).unwrap() - 0.1269).abs() < 1e-4);
        assert!(matches!(loss(&[1.0], 1), Err(Error::Data(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut opt = OptimizerState::new(&w, 0.01);
        let g = vec![Tensor::vector(vec![3.0, -0.2, 1e-3])];
        opt.update(w.iter_mut().collect(), &g, &["w".into()]).unwrap();
        let moved: Vec<f64> = w[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| b - a).collect();
        for (d, sign) in moved.iter().zip([1.0, -1.0, 1.0]) {
            assert!((d - 0.01 * sign).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut w = vec![Tensor::vector(vec![1.0, 2.0])];
        let before = w.clone();
        let mut opt = OptimizerState::new(&w, 0.1);
        for _ in 0..3 {
            opt.update(w.iter_mut().collect(), &[Tensor::zeros(&[2])], &["w".into()]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_rejects_nan_by_name() {
        let mut w = vec![Tensor::vector(vec![1.0])];
        let mut opt = OptimizerState::new(&w, 0.1);
        let err = opt
            .update(w.iter_mut().collect(), &[Tensor::vector(vec![f64::NAN])], &["U_q_c".into()])
            .unwrap_err();
        assert!(err.to_string().contains("U_q_c"));
        assert_eq!(opt.step, 0);
        assert_eq!(w[0].data(), &[1.0]);
    }

    #[test]
    fn schedule_rules() {
        let mut s = Schedule::new(1.0);
        assert!(!s.on_checkpoint(0.5, 0));
        assert!(!s.on_checkpoint(0.4, 0)); // first epoch: no halving
        assert!(!s.on_checkpoint(0.5, 1));
        assert!(s.on_checkpoint(0.4, 1));
        assert!(!s.on_checkpoint(0.4, 1)); // equal is not a drop
        assert_eq!(s.lr, 0.5);
        assert!(!s.on_epoch(0.6));
        assert!(!s.on_epoch(0.6));
        assert!(s.on_epoch(0.55));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { hops: 0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { dev_subsample: Some(0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
