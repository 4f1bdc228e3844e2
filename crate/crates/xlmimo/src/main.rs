use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xlmimo::commands::{self, Stage};
use xlmimo::config::RunConfig;
use xlmimo::error::exit;
use xlmimo::Result;

/// Near-field sparse XL-MIMO simulation, two-stage CP-Mamba training and evaluation.
///
/// Exit status: 0 success, 2 usage or configuration error, 3 I/O or file-format
/// error, 4 numerical failure (non-finite training loss).
#[derive(Parser, Debug)]
#[command(name = "xlmimo", version)]
struct Cli {
    /// Default directory for datasets, checkpoints and reports.
    #[arg(long, global = true, env = "XLMIMO_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named preset the configuration is layered on: ca-desk, usa-desk, moa-desk, na-desk, na-overfit.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Overrides the seed of the command being run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path; each command has a default inside the data directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pos,
    Ch,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file.
    Gen,
    /// Train the positioning (pos) or channel (ch) network.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset file; defaults to the one `gen` writes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Positioning checkpoint, required for `--stage ch`.
        #[arg(long)]
        pos_ckpt: Option<PathBuf>,
    },
    /// Sweep SNRs on the held-out partition and write a metrics CSV.
    Eval {
        /// Dataset file; defaults to the one `gen` writes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Positioning checkpoint, needed by the cpmamba methods.
        #[arg(long)]
        pos_ckpt: Option<PathBuf>,
        /// Channel checkpoint; without it cpmamba reports the LoS prior.
        #[arg(long)]
        ch_ckpt: Option<PathBuf>,
        /// Comma-separated methods: oracle, ls, grid, cpmamba, cpmamba-oracle-pos.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated SNRs in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
    },
    /// Render a metrics CSV as an SVG plot.
    Plot {
        /// Metrics CSV written by `eval`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn dataset_name(cfg: &RunConfig) -> String {
    format!("{}.xlmd", cfg.preset.as_deref().unwrap_or("dataset"))
}

fn run(cli: Cli, log: &mut dyn Write) -> Result<()> {
    let dir = cli.data_dir.as_path();
    let load = || commands::load_config(cli.config.as_deref(), cli.preset.as_deref());
    let notices = |cfg: &RunConfig, log: &mut dyn Write| {
        for n in &cfg.notices {
            let _ = writeln!(log, "note: {n}");
        }
    };
    let data_or_default =
        |data: &Option<PathBuf>, cfg: &RunConfig| data.clone().unwrap_or_else(|| dir.join(dataset_name(cfg)));
    match &cli.command {
        Command::Gen => {
            let mut cfg = load()?;
            if let Some(s) = cli.seed {
                cfg.gen.seed = s;
            }
            notices(&cfg, log);
            let out = cli.out.clone().unwrap_or_else(|| dir.join(dataset_name(&cfg)));
            commands::gen(&cfg, &out, log)?;
        }
        Command::Train { stage, data, pos_ckpt } => {
            let mut cfg = load()?;
            let stage = match stage {
                StageArg::Pos => Stage::Pos,
                StageArg::Ch => Stage::Ch,
            };
            if let Some(s) = cli.seed {
                match stage {
                    Stage::Pos => cfg.pos_train.seed = s,
                    Stage::Ch => cfg.ch_train.seed = s,
                }
            }
            notices(&cfg, log);
            let name = if stage == Stage::Pos { "pos.xlmw" } else { "ch.xlmw" };
            let out = cli.out.clone().unwrap_or_else(|| dir.join(name));
            commands::train(&cfg, &data_or_default(data, &cfg), stage, pos_ckpt.as_deref(), &out, log)?;
        }
        Command::Eval { data, pos_ckpt, ch_ckpt, methods, snr } => {
            let mut cfg = load()?;
            if let Some(m) = methods {
                cfg.eval.methods = m.clone();
            }
            if let Some(s) = snr {
                cfg.eval.snrs_db = s.clone();
            }
            if let Some(s) = cli.seed {
                cfg.eval.seed = s;
            }
            notices(&cfg, log);
            let out = cli.out.clone().unwrap_or_else(|| dir.join("metrics.csv"));
            commands::eval(&cfg, &data_or_default(data, &cfg), pos_ckpt.as_deref(), ch_ckpt.as_deref(), &out, log)?;
            let _ = writeln!(log, "wrote {}", out.display());
        }
        Command::Plot { input } => {
            let input = input.clone().unwrap_or_else(|| dir.join("metrics.csv"));
            let out = cli.out.clone().unwrap_or_else(|| input.with_extension("svg"));
            commands::plot(&input, Path::new(&out))?;
            let _ = writeln!(log, "wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut err = std::io::stderr();
    match run(cli, &mut err) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
