//! The `autornn` command-line pipeline.

use std::path::PathBuf;

use autornn::datapipe::Split;
use autornn::genotype::NodeSemantics;
use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod data;
pub mod manifest;
pub mod plot;
pub mod report;

use config::{Profile, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] autornn::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage errors, 2 for data and I/O problems, 3 for numerical divergence.
    pub fn exit_code(&self) -> i32 {
        use autornn::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidArgument(_) | E::InvalidGenotype(_)) => 1,
            CliError::Core(E::Divergence(_) | E::NonFiniteGradient(_)) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "autornn", version, about = "Recurrent-cell architecture search for image captioning")]
pub struct Cli {
    /// JSON configuration merged over the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "toy")]
    pub profile: Profile,
    /// Overrides a configuration value by dot path, e.g. `search.epochs=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set work_dir=DIR`.
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SemanticsArg {
    Gated,
    Plain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds the vocabulary and encoded splits under `<work_dir>/data`.
    Preprocess,
    /// Runs the architecture search.
    Search {
        /// Continues from the newest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Samples candidates from the trained controller and keeps the best.
    Derive {
        /// Number of candidates.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Trains a cell from scratch (or from the searched weights).
    Train {
        /// Defaults to `<work_dir>/derive/genotype.json`.
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        from_bank: bool,
        /// Runs self-critical fine-tuning regardless of the configuration.
        #[arg(long)]
        scst: bool,
    },
    /// Decodes a split and scores it.
    Evaluate {
        /// Model directory; defaults to `<work_dir>/train/model`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Prints parameter counts and storage sizes.
    CountParams {
        #[arg(long, conflicts_with_all = ["n_blocks", "hidden", "embed", "semantics", "all"])]
        genotype: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        n_blocks: usize,
        #[arg(long, default_value_t = 512)]
        hidden: usize,
        /// Defaults to the hidden size.
        #[arg(long)]
        embed: Option<usize>,
        #[arg(long, value_enum, default_value = "gated")]
        semantics: SemanticsArg,
        /// Every published configuration.
        #[arg(long)]
        all: bool,
    },
    /// Regenerates figures and `report/summary.md` from the logs.
    Report,
    /// Prints the resolved configuration.
    Config,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(dir) = &self.work_dir {
            overrides.push(format!("work_dir={}", serde_json::Value::String(dir.display().to_string())));
        }
        RunConfig::resolve(self.profile, self.config.as_deref(), &overrides)
    }
}

fn count_params(
    genotype: Option<&PathBuf>,
    n_blocks: usize,
    hidden: usize,
    embed: Option<usize>,
    semantics: SemanticsArg,
    all: bool,
) -> Result<Vec<String>, CliError> {
    let rows = if all {
        commands::reported_size_rows()
    } else if let Some(path) = genotype {
        let spec = commands::load_spec(path)?;
        let m = &spec.macro_config;
        commands::size_rows(spec.genotype.n_blocks(), m.embed_size, m.hidden_size, spec.semantics)
    } else {
        if n_blocks == 0 || hidden == 0 || embed == Some(0) {
            return Err(CliError::Usage("sizes must be at least 1".into()));
        }
        let sem = match semantics {
            SemanticsArg::Gated => NodeSemantics::Gated,
            SemanticsArg::Plain => NodeSemantics::Plain,
        };
        commands::size_rows(n_blocks, embed.unwrap_or(hidden), hidden, sem)
    };
    Ok(rows.iter().map(commands::SizeRow::line).collect())
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::CountParams {
        genotype,
        n_blocks,
        hidden,
        embed,
        semantics,
        all,
    } = &cli.command
    {
        for line in count_params(genotype.as_ref(), *n_blocks, *hidden, *embed, *semantics, *all)? {
            println!("{line}");
        }
        return Ok(());
    }
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Preprocess => {
            commands::preprocess(&cfg)?;
        }
        Command::Search { resume } => {
            commands::search(&cfg, *resume)?;
        }
        Command::Derive { k } => {
            commands::derive_cmd(&cfg, *k)?;
        }
        Command::Train {
            genotype,
            from_bank,
            scst,
        } => {
            let args = commands::TrainArgs {
                genotype: genotype.clone(),
                from_bank: *from_bank,
                scst: scst.then_some(true),
            };
            commands::train(&cfg, &args)?;
        }
        Command::Evaluate { model, split, beam } => {
            let args = commands::EvalArgs {
                model: model.clone(),
                split: (*split).into(),
                beam: *beam,
            };
            commands::evaluate(&cfg, &args)?;
        }
        Command::Report => {
            for p in report::report(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Config => print!("{}", cfg.to_json()),
        Command::CountParams { .. } => unreachable!("handled above"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(autornn::Error::Divergence("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(autornn::Error::NonFiniteGradient("w".into())).exit_code(), 3);
        assert_eq!(CliError::Core(autornn::Error::Parse("x".into())).exit_code(), 2);
    }

    #[test]
    fn cli_parses_global_flags_after_the_subcommand() {
        let cli = Cli::try_parse_from(["autornn", "search", "--resume", "--set", "search.epochs=1", "--work-dir", "/tmp/w"])
            .unwrap();
        assert!(matches!(cli.command, Command::Search { resume: true }));
        let cfg = cli.resolve_config().unwrap();
        assert_eq!(cfg.search.epochs, 1);
        assert_eq!(cfg.work_dir, PathBuf::from("/tmp/w"));
    }

    #[test]
    fn count_params_rejects_zero_sizes() {
        assert!(count_params(None, 0, 512, None, SemanticsArg::Gated, false).is_err());
        let lines = count_params(None, 6, 512, None, SemanticsArg::Gated, false).unwrap();
        assert_eq!(lines.len(), 2);
    }
}
