use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use qann_core::trainer::{self, BestInfo, DevEvaluator, EvalKind, MetricsRow, Observer, TrainState};
use qann_core::{Checkpoint, TrainConfig, Vocab};
use serde::Serialize;

use crate::error::{input_context, read_input, write_output, CliError, CliResult};
use crate::gen::create_dir;
use crate::inputs::{load_into, load_toml, split_path, Format};
use crate::manifest::RunManifest;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const METRICS_HEADER: &str = "kind\tstep\tepoch\tlr\ttrain_loss\tdev_accuracy";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML with training hyperparameters; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the train and dev splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: Format,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hops used in training.
    #[arg(long)]
    pub hops: Option<usize>,
    /// Score candidates by attention sum over one-hot outputs.
    #[arg(long)]
    pub identity_eo: bool,
    /// Evaluate on only the first N dev examples.
    #[arg(long, value_name = "N")]
    pub dev_subsample: Option<usize>,
    /// Continue the run in `--out`; `max_epochs` may be raised.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best: BestInfo,
    epochs_completed: usize,
    steps: u64,
    stopped_early: bool,
    rows: Vec<MetricsRow>,
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut config: TrainConfig = load_toml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(hops) = args.hops {
        config.hops = hops;
    }
    config.identity_eo |= args.identity_eo;
    if args.dev_subsample.is_some() {
        config.dev_subsample = args.dev_subsample;
    }
    config.validate()?;

    // one vocabulary over train then dev, so ids are stable across runs
    let mut vocab = Vocab::new();
    let train_path = split_path(&args.data, "train", args.format);
    let dev_path = split_path(&args.data, "dev", args.format);
    let train = load_into(&train_path, args.format, &mut vocab)?;
    let dev = load_into(&dev_path, args.format, &mut vocab)?;
    if dev.is_empty() {
        return Err(qann_core::Error::Data(format!("{} has no examples", dev_path.display())).into());
    }

    let mut manifest = RunManifest::new("train", &config, None::<TrainSummary>);
    manifest.input(&train_path)?;
    manifest.input(&dev_path)?;

    let out = &args.out;
    let manifest_path = out.join("manifest.json");
    let (state, best_params, mut rows) = if args.resume {
        let previous: serde_json::Value = serde_json::from_slice(&read_input(&manifest_path)?).map_err(qann_core::Error::from)?;
        if previous["inputs"] != serde_json::to_value(&manifest.inputs).map_err(qann_core::Error::from)? {
            return Err(CliError::Usage("training data differ from the run being resumed".into()));
        }
        resume_state(out, &config, &vocab)?
    } else {
        if out.join(LAST_CKPT).exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume or choose another --out",
                out.display()
            )));
        }
        create_dir(out)?;
        write_output(&out.join(METRICS_FILE), format!("{METRICS_HEADER}\n").as_bytes())?;
        (TrainState::fresh(&config, vocab.len())?, None, Vec::new())
    };
    // written up front so an interrupted run can be resumed against it
    manifest.save(&manifest_path)?;

    let mut writer = RunWriter {
        out,
        config: &config,
        vocab: &vocab,
    };
    let mut evaluator = DevEvaluator::new(&dev.examples, config.hops, config.dev_subsample);
    let outcome = trainer::train_from(&config, &train.examples, state, best_params, &mut evaluator, &mut writer)?;
    // a resumed run that had already finished writes no new checkpoint
    if !out.join(BEST_CKPT).exists() {
        writer.save_best(&outcome.state)?;
    }
    rows.extend(outcome.metrics);

    log::info!(
        "best dev accuracy {} at step {} ({:?})",
        outcome.best.dev_accuracy,
        outcome.best.step,
        outcome.best.kind
    );
    for name in [BEST_CKPT, LAST_CKPT, METRICS_FILE] {
        manifest.output(&out.join(name))?;
    }
    manifest.metrics = Some(TrainSummary {
        best: outcome.best,
        epochs_completed: outcome.state.progress.epoch,
        steps: outcome.state.progress.step,
        stopped_early: outcome.stopped_early,
        rows,
    });
    manifest.save(&manifest_path)
}

fn resume_state(out: &Path, config: &TrainConfig, vocab: &Vocab) -> CliResult<(TrainState, Option<qann_core::ModelParams>, Vec<MetricsRow>)> {
    let last_path = out.join(LAST_CKPT);
    let last = Checkpoint::load(&last_path).map_err(input_context(&last_path))?;
    if &last.vocab != vocab {
        return Err(qann_core::Error::Data("training data vocabulary differs from the checkpoint's".into()).into());
    }
    let mut expected = last.config.clone();
    expected.max_epochs = config.max_epochs;
    if &expected != config {
        return Err(CliError::Usage(
            "only max_epochs may change when resuming; other settings differ from the checkpoint".into(),
        ));
    }
    let mut state = last.into_state()?;
    let p = &mut state.progress;
    if p.finished && !p.stopped_early && p.epoch < config.max_epochs {
        p.finished = false;
    }

    let best_path = out.join(BEST_CKPT);
    let best = if best_path.exists() {
        Some(Checkpoint::load(&best_path)?.params)
    } else {
        None
    };

    let metrics_path = out.join(METRICS_FILE);
    let text = String::from_utf8_lossy(&read_input(&metrics_path)?).into_owned();
    let rows = parse_rows(&text)?;
    let kept: Vec<MetricsRow> = rows
        .into_iter()
        .filter(|r| row_precedes(r, &state))
        .collect();
    let mut tsv = format!("{METRICS_HEADER}\n");
    for r in &kept {
        tsv.push_str(&format_row(r));
    }
    write_output(&metrics_path, tsv.as_bytes())?;
    log::info!(
        "resuming at step {} (epoch {}, batch {})",
        state.progress.step,
        state.progress.epoch,
        state.progress.batch_in_epoch
    );
    Ok((state, best, kept))
}

/// Whether a logged row was already written when `state` was saved. At the
/// saved step an epoch row exists only once the epoch has rolled over.
pub fn row_precedes(row: &MetricsRow, state: &TrainState) -> bool {
    let p = &state.progress;
    row.step < p.step || (row.step == p.step && (row.kind == EvalKind::Checkpoint || p.batch_in_epoch == 0))
}

pub fn format_row(r: &MetricsRow) -> String {
    let kind = match r.kind {
        EvalKind::Checkpoint => "checkpoint",
        EvalKind::Epoch => "epoch",
    };
    format!(
        "{kind}\t{}\t{}\t{}\t{}\t{}\n",
        r.step, r.epoch, r.lr, r.train_loss, r.dev_accuracy
    )
}

pub fn parse_rows(text: &str) -> CliResult<Vec<MetricsRow>> {
    let bad = |line: usize, msg: &str| {
        CliError::Core(qann_core::Error::Parse {
            location: format!("{METRICS_FILE} line {line}"),
            message: msg.to_string(),
        })
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 columns"));
        }
        let kind = match f[0] {
            "checkpoint" => EvalKind::Checkpoint,
            "epoch" => EvalKind::Epoch,
            _ => return Err(bad(i + 1, "unknown row kind")),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        rows.push(MetricsRow {
            kind,
            step: f[1].parse().map_err(|_| bad(i + 1, "bad step"))?,
            epoch: f[2].parse().map_err(|_| bad(i + 1, "bad epoch"))?,
            lr: num(f[3])?,
            train_loss: num(f[4])?,
            dev_accuracy: num(f[5])?,
        });
    }
    Ok(rows)
}

/// Streams rows and checkpoints to the run directory as training proceeds.
struct RunWriter<'a> {
    out: &'a Path,
    config: &'a TrainConfig,
    vocab: &'a Vocab,
}

impl RunWriter<'_> {
    fn save_best(&self, state: &TrainState) -> qann_core::Result<()> {
        let mut ck = Checkpoint::from_state(
            self.config,
            self.vocab,
            state,
            state.progress.schedule.best.map(|b| b.dev_accuracy),
        );
        ck.optimizer = None;
        save_atomically(&ck, &self.out.join(BEST_CKPT))
    }
}

impl Observer for RunWriter<'_> {
    fn on_best(&mut self, state: &TrainState) -> qann_core::Result<()> {
        self.save_best(state)
    }

    fn on_row(&mut self, row: &MetricsRow, state: &TrainState) -> qann_core::Result<()> {
        // the row lands before the checkpoint; resume drops rows newer than it
        let mut f = OpenOptions::new().append(true).open(self.out.join(METRICS_FILE))?;
        f.write_all(format_row(row).as_bytes())?;
        f.sync_data()?;
        let ck = Checkpoint::from_state(self.config, self.vocab, state, Some(row.dev_accuracy));
        save_atomically(&ck, &self.out.join(LAST_CKPT))
    }
}

fn save_atomically(ck: &Checkpoint, path: &Path) -> qann_core::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        ck.write_to(&mut f)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
