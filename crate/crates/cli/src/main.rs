use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coverhunter::pipeline::{Pipeline, PipelineConfig, PipelineError, StageName};
use coverhunter::synth::write_corpus;

#[derive(Parser)]
#[command(name = "coverhunter", version, about = "Cover song identification pipeline")]
struct Cli {
    /// TOML configuration; built-in preset values are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base values when no configuration file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Override a configuration key, e.g. `--set train.coarse_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Overrides `paths.manifest`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides `train.seed` and `synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `train.coarse_steps`.
    #[arg(long, global = true)]
    coarse_steps: Option<u64>,
    /// Overrides `train.fine_steps`.
    #[arg(long, global = true)]
    fine_steps: Option<u64>,
    /// Overrides `retrieval.top_k`.
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Re-run stages whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Validate the configuration and print the stage plan without running.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate a synthetic cover corpus at `paths.manifest`.
    SynthCorpus {
        #[arg(long)]
        works: Option<usize>,
        #[arg(long)]
        versions: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        prelude_max: Option<f64>,
    },
    /// Compute CQT features of every manifest track.
    Extract,
    /// Train the coarse model on fixed chunks.
    TrainCoarse,
    /// Align same-work chunks with the coarse model.
    Align,
    /// Train the fine model on aligned crops.
    TrainFine,
    /// Embed every track with the chosen model.
    Embed,
    /// Build the gallery index.
    Index,
    /// Write the top-k results of every query.
    Search,
    /// Score the queries and write the report.
    Eval,
    /// Run every stage in order.
    Pipeline,
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = Vec::new();
    let quote = |p: &PathBuf| format!("{:?}", p.display().to_string());
    if let Some(w) = &cli.workdir {
        out.push(format!("paths.workdir={}", quote(w)));
    }
    if let Some(m) = &cli.manifest {
        out.push(format!("paths.manifest={}", quote(m)));
    }
    if let Some(s) = cli.seed {
        out.push(format!("train.seed={s}"));
        out.push(format!("synth.seed={s}"));
    }
    if let Command::SynthCorpus {
        works,
        versions,
        duration,
        prelude_max,
    } = &cli.command
    {
        if let Some(v) = works {
            out.push(format!("synth.n_works={v}"));
        }
        if let Some(v) = versions {
            out.push(format!("synth.n_versions={v}"));
        }
        if let Some(v) = duration {
            out.push(format!("synth.duration_s={v:?}"));
        }
        if let Some(v) = prelude_max {
            out.push(format!("synth.junk_prelude_s_max={v:?}"));
        }
    }
    if let Some(s) = cli.coarse_steps {
        out.push(format!("train.coarse_steps={s}"));
    }
    if let Some(s) = cli.fine_steps {
        out.push(format!("train.fine_steps={s}"));
    }
    if let Some(k) = cli.top_k {
        out.push(format!("retrieval.top_k={k}"));
    }
    out.extend(cli.overrides.iter().cloned());
    out
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let base = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?,
        None => match cli.preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Toy => PipelineConfig::toy(),
        }
        .to_toml(),
    };
    PipelineConfig::from_toml_with_overrides(&base, &overrides(cli))
}

fn stage_of(cmd: &Command) -> Option<StageName> {
    Some(match cmd {
        Command::Extract => StageName::Extract,
        Command::TrainCoarse => StageName::TrainCoarse,
        Command::Align => StageName::Align,
        Command::TrainFine => StageName::TrainFine,
        Command::Embed => StageName::Embed,
        Command::Index => StageName::Index,
        Command::Search => StageName::Search,
        Command::Eval => StageName::Eval,
        _ => return None,
    })
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::SynthCorpus { .. } => {
            cfg.synth.validate().map_err(PipelineError::ConfigInvalid)?;
            let path = &cfg.paths.manifest;
            if cli.dry_run {
                println!(
                    "would write {} works x {} versions to {}",
                    cfg.synth.n_works,
                    cfg.synth.n_versions,
                    path.display()
                );
                return Ok(());
            }
            if path.exists() && !cli.force {
                log::info!("{} exists; skipping (use --force to regenerate)", path.display());
                return Ok(());
            }
            let m = write_corpus(&cfg.synth, path)?;
            println!("wrote {} tracks to {}", m.records.len(), path.display());
            Ok(())
        }
        Command::Pipeline => {
            let p = Pipeline::open(cfg, cli.force)?;
            if cli.dry_run {
                print!("{}", p.dry_run());
                return Ok(());
            }
            p.run_all()?;
            let report = std::fs::read_to_string(p.work.report())?;
            print!("{}", report.lines().take(3).map(|l| format!("{l}\n")).collect::<String>());
            Ok(())
        }
        cmd => {
            let stage = stage_of(cmd).expect("stage command");
            let p = Pipeline::open(cfg, cli.force)?;
            if cli.dry_run {
                print!("{}", p.dry_run());
                return Ok(());
            }
            p.run_stage(stage)?;
            if stage == StageName::Eval {
                let report = std::fs::read_to_string(p.work.report())?;
                print!("{}", report.lines().take(3).map(|l| format!("{l}\n")).collect::<String>());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
