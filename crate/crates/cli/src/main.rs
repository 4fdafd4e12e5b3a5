use std::path::PathBuf;
use std::process::ExitCode;

use cdmsc::pipeline::{self, PipelineConfig};
use cdmsc::synth::SynthSpec;
use cdmsc::train::CheckpointKind;
use clap::{Parser, Subcommand, ValueEnum};

/// Cross-domain mosquito species classification benchmark.
///
/// Stages run in order: synth (optional) -> scan -> split -> features ->
/// train -> evaluate -> report. Each stage reads what the previous one wrote
/// under the configured cache and output directories.
#[derive(Parser, Debug)]
#[command(name = "cdmsc", version)]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside it resolve
    /// against the file's directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and CDMSC_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds (overrides the config).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Checkpoint to evaluate or report on.
    #[arg(long, global = true, value_enum, default_value = "best")]
    checkpoint: Checkpoint,
    /// Worker threads for feature extraction and multi-seed training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into corpus_root.
    Synth {
        /// Print the built-in desk spec as TOML and exit.
        #[arg(long)]
        print_spec: bool,
    },
    /// Catalogue corpus_root into a manifest.
    Scan,
    /// Assign train, validation and test roles.
    Split,
    /// Extract log-mel features and fit standardisation stats.
    Features,
    /// Train one model per seed.
    Train,
    /// Score checkpoints on validation and test, seen and unseen.
    Evaluate,
    /// Draw per-species and per-domain charts from an evaluation.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Checkpoint {
    Best,
    Final,
}

impl From<Checkpoint> for CheckpointKind {
    fn from(c: Checkpoint) -> Self {
        match c {
            Checkpoint::Best => CheckpointKind::BestValidation,
            Checkpoint::Final => CheckpointKind::Final,
        }
    }
}

fn config(cli: &Cli) -> cdmsc::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    cfg.apply_overrides(None, cli.out.clone());
    if let Some(seeds) = &cli.seeds {
        cfg.train.seeds = seeds.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> cdmsc::Result<()> {
    if let Command::Synth { print_spec: true } = cli.command {
        print!("{}", SynthSpec::desk().to_toml());
        return Ok(());
    }
    let cfg = config(cli)?;
    let kind = CheckpointKind::from(cli.checkpoint);
    match cli.command {
        Command::Synth { .. } => {
            let c = pipeline::cmd_synth(&cfg)?;
            println!(
                "wrote {} clips ({} test) to {}",
                c.manifest.len(),
                c.test.len(),
                cfg.corpus_root.display()
            );
        }
        Command::Scan => {
            let m = pipeline::cmd_scan(&cfg)?;
            println!("{} clips -> {}", m.len(), cfg.manifest_path().display());
            print!("{}", m.count_table().render(&cfg.names()?));
        }
        Command::Split => {
            let roles = pipeline::cmd_split(&cfg)?;
            println!("{} clips assigned -> {}", roles.len(), cfg.split_path().display());
        }
        Command::Features => {
            let r = pipeline::cmd_features(&cfg)?;
            println!(
                "{} clips: {} computed, {} reused; stats -> {}",
                r.total,
                r.computed,
                r.reused,
                r.stats_path.display()
            );
        }
        Command::Train => {
            let logs = pipeline::cmd_train(&cfg)?;
            for (seed, log) in logs {
                println!(
                    "seed {seed}: best epoch {} (val BA {:.4}), stopped at epoch {}",
                    log.best_epoch,
                    log.best_record().map(|r| r.val_ba).unwrap_or(f64::NAN),
                    log.stop_epoch
                );
            }
        }
        Command::Evaluate => {
            let e = pipeline::cmd_evaluate(&cfg, kind)?;
            print!("{}\n{}", e.cross_domain, e.splits);
        }
        Command::Report => {
            let f = pipeline::cmd_report(&cfg, kind)?;
            for p in [f.species_svg, f.species_csv, f.domain_svg, f.domain_csv] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
