use std::io::Write;
use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::Args;
use qann_core::{evaluate, Checkpoint};

use crate::error::{input_context, CliError, CliResult};
use crate::inputs::{load_for_model, Format};
use crate::manifest::file_hash;

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the extension: `.txt` is CBT, anything else canonical.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Hops at evaluation; defaults to the training hops.
    #[arg(long, conflicts_with = "hop_sweep")]
    pub hops: Option<usize>,
    /// Inclusive range `A..B`, one table row per hop count.
    #[arg(long, value_name = "A..B", value_parser = parse_range)]
    pub hop_sweep: Option<RangeInclusive<usize>>,
}

pub fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a == 0 || a > b {
        return Err(format!("need 1 <= A <= B, got {a}..{b}"));
    }
    Ok(a..=b)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint).map_err(input_context(&args.checkpoint))?;
    let data = load_for_model(&args.data, args.format, &ck.vocab)?;
    let hops = match (&args.hop_sweep, args.hops) {
        (Some(r), _) => r.clone(),
        (None, Some(0)) => return Err(CliError::Usage("--hops must be positive".into())),
        (None, Some(k)) => k..=k,
        (None, None) => ck.config.hops..=ck.config.hops,
    };

    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::Core(e.into());
    writeln!(
        out,
        "# checkpoint {} data {} train_hops {}",
        file_hash(&args.checkpoint)?,
        file_hash(&args.data)?,
        ck.config.hops
    )
    .map_err(io)?;
    writeln!(out, "hops\taccuracy\tcorrect\ttotal").map_err(io)?;
    for k in hops {
        let e = evaluate(&ck.params, &data.examples, k)?;
        writeln!(out, "{k}\t{}\t{}\t{}", e.accuracy, e.correct, data.len()).map_err(io)?;
    }
    Ok(())
}
