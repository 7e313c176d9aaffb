use std::path::{Path, PathBuf};

use clap::Args;
use qann_core::data::canonical;
use qann_core::data::synth::{gen_splits, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::inputs::{load_toml, split_path, Format};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML with `[task]` and `[splits]` tables; defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `task.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub task: SynthConfig,
    pub splits: SplitSizes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    /// Defaults to `task.n_examples`.
    pub train: Option<usize>,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: None,
            dev: 500,
            test: 1000,
        }
    }
}

pub fn run(args: &GenArgs) -> CliResult<()> {
    let mut cfg: GenConfig = load_toml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.task.seed = seed;
    }
    let train = cfg.splits.train.unwrap_or(cfg.task.n_examples);
    cfg.splits.train = Some(train);
    let sizes = [("train", train), ("dev", cfg.splits.dev), ("test", cfg.splits.test)];
    let splits = gen_splits(&cfg.task, &sizes)?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("gen", &cfg, serde_json::json!({}));
    for ds in &splits {
        let path = split_path(&args.out, &ds.split, Format::Canonical);
        canonical::save_canonical(ds, &path).map_err(|e| match e {
            qann_core::Error::Io(source) => CliError::Output { path: path.clone(), source },
            other => other.into(),
        })?;
        manifest.output(&path)?;
        log::info!("wrote {} examples to {}", ds.len(), path.display());
    }
    manifest.save(&args.out.join("manifest.json"))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })
}
