use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medvlm::mixer::StageId;
use medvlm::synth::{write_toy_fixtures, FixtureSizes};
use medvlm_cli::{run_grid, CliError, RunConfig, Runner, Through};

#[derive(Parser)]
#[command(name = "medvlm", version, about = "Desk-scale medical VLM training and evaluation pipeline")]
struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true, default_value = "configs/toy.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides the config and MEDVLM_OUT.
    #[arg(long, global = true, env = "MEDVLM_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for per-sample parallelism (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the curation filters over every input corpus.
    Curate,
    /// Curate, then assemble each stage's mixed dataset.
    Mix,
    /// Curate, mix and train; stops after `--through` when given.
    Train {
        #[arg(long)]
        through: Option<StageId>,
    },
    /// Everything up to and including evaluation of the final model.
    Eval,
    /// The full pipeline end to end (resumable).
    Reproduce,
    /// The 8-cell E×V mixing-ratio grid.
    Grid,
    /// Write the synthetic toy fixture set.
    Fixtures {
        #[arg(long, default_value = "fixtures/toy")]
        dir: PathBuf,
        #[arg(long, default_value_t = 2024)]
        fixture_seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Validation(format!("--workers: {e}")))?;
    }
    if let Command::Fixtures { dir, fixture_seed } = &cli.command {
        let set = write_toy_fixtures(dir, *fixture_seed, &FixtureSizes::default()).map_err(|e| CliError::stage("fixtures", e))?;
        for (name, path) in &set.manifests {
            println!("{name}\t{}", path.display());
        }
        return Ok(());
    }
    let cfg = RunConfig::load(&cli.config)?.with_overrides(cli.seed, cli.out.clone());
    if let Command::Grid = cli.command {
        let report = run_grid(cfg, cli.quiet)?;
        print!("{}", report.table());
        if report.rows.iter().any(|r| r.error.is_some()) {
            return Err(CliError::stage("grid", "one or more cells failed"));
        }
        return Ok(());
    }
    let through = match cli.command {
        Command::Curate => Through::Curate,
        Command::Mix => Through::Mix,
        Command::Train { through: Some(s) } => Through::Stage(s),
        Command::Train { through: None } => Through::Stage(*cfg.stages.last().unwrap_or(&StageId::MmInstruct)),
        _ => Through::Eval,
    };
    let mut runner = Runner::open(cfg)?;
    runner.quiet = cli.quiet;
    if let Through::Stage(s) = through {
        if !runner.plans.iter().any(|p| p.stage_id == s) {
            return Err(CliError::Validation(format!("stage `{s}` is not in the configured stages")));
        }
    }
    runner.run(through)?;
    let inv = &runner.manifest.last_invocation;
    println!(
        "run {} at {}: executed [{}], skipped [{}], {} training steps",
        runner.cfg.run_id,
        runner.layout.run_dir.display(),
        inv.executed.join(", "),
        inv.skipped.join(", "),
        inv.train_steps
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
