use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use qann_core::hop::forward_pass;
use qann_core::{Checkpoint, Example, ForwardOptions, ForwardOutput, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input_context, CliError, CliResult};
use crate::inputs::{load_for_model, Format};

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// 0-based index into the data file.
    #[arg(long, default_value_t = 0)]
    pub example: usize,
    #[arg(long)]
    pub hops: Option<usize>,
    /// Also run with the initial answer forced to zero and report both predictions.
    #[arg(long)]
    pub ablate_query_gate: bool,
}

pub fn run(args: &InspectArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint).map_err(input_context(&args.checkpoint))?;
    let data = load_for_model(&args.data, args.format, &ck.vocab)?;
    let ex = data.examples.get(args.example).ok_or_else(|| {
        CliError::Usage(format!(
            "--example {} is out of range for {} examples",
            args.example,
            data.len()
        ))
    })?;
    let hops = args.hops.unwrap_or(ck.config.hops);
    if hops == 0 {
        return Err(CliError::Usage("--hops must be positive".into()));
    }

    let mut opts = ForwardOptions::eval(hops);
    // eval mode never samples; the generator only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = forward_pass(&ck.params, ex, &opts, &mut rng)?;

    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::Core(e.into());
    let v = &ck.vocab;
    writeln!(
        out,
        "# example {} gold {} hops {}",
        args.example,
        v.token(ex.gold),
        hops
    )
    .map_err(io)?;
    writeln!(out, "# spans {}", spans_line(&full, ex)).map_err(io)?;
    dump(&mut out, "full", &full, ex, v).map_err(io)?;
    if args.ablate_query_gate {
        opts.overrides.ablate_query_gate = true;
        let ablated = forward_pass(&ck.params, ex, &opts, &mut rng)?;
        dump(&mut out, "ablated", &ablated, ex, v).map_err(io)?;
    }
    Ok(())
}

/// Header line with the prediction and each hop's answer
/// gate in brackets, then one JSON trace record per hop.
fn dump(out: &mut impl Write, label: &str, o: &ForwardOutput, ex: &Example, v: &Vocab) -> std::io::Result<()> {
    let gates: Vec<String> = o.traces.iter().map(|t| format!("[{:.4}]", t.g_a)).collect();
    writeln!(
        out,
        "# {label} prediction {} p {:.4} answer_gates {}",
        v.token(o.predicted_symbol(ex)),
        o.probs[o.prediction],
        gates.join(" ")
    )?;
    for rec in o.trace_records() {
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

fn spans_line(o: &ForwardOutput, ex: &Example) -> String {
    let toks = &ex.document.raw_tokens;
    o.spans
        .iter()
        .map(|s| {
            let text = toks
                .get(s.start - 1..s.end.min(toks.len()))
                .map(|t| t.join(" "))
                .unwrap_or_default();
            format!("[{},{}]:{}", s.start, s.end, text)
        })
        .collect::<Vec<_>>()
        .join(" ")
}
