use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vcnet_core::centrality::Measure;
use vcnet_core::{Error, Pipeline, PipelineConfig, Stage};

/// Co-investment network analysis of venture-backed firms.
#[derive(Parser, Debug)]
#[command(name = "vcnet", version)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config, including the synth seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also render SVG plots from the written CSVs.
    #[arg(long, global = true)]
    plots: bool,
    /// Comma-separated centrality measures to compute.
    #[arg(long, global = true, value_delimiter = ',')]
    measures: Option<Vec<Measure>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    IngestCheck,
    BuildGraphs,
    Centrality,
    Communities,
    Trajectories,
    Cluster,
    Features,
    RegressLogistic,
    RegressScalar,
    RegressFunctional,
    Synth,
    /// Every analysis stage in dependency order.
    All,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::IngestCheck => vec![Stage::IngestCheck],
            Command::BuildGraphs => vec![Stage::BuildGraphs],
            Command::Centrality => vec![Stage::Centrality],
            Command::Communities => vec![Stage::Communities],
            Command::Trajectories => vec![Stage::Trajectories],
            Command::Cluster => vec![Stage::Cluster],
            Command::Features => vec![Stage::Features],
            Command::RegressLogistic => vec![Stage::RegressLogistic],
            Command::RegressScalar => vec![Stage::RegressScalar],
            Command::RegressFunctional => vec![Stage::RegressFunctional],
            Command::Synth => vec![Stage::Synth],
            Command::All => Stage::ANALYSIS.to_vec(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(m) = &cli.measures {
        cfg.centrality.measures = m.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let pool = rayon_pool(cfg.workers)?;
    let mut pipeline = Pipeline::new(cfg)?.with_plots(cli.plots);
    pool.install(|| pipeline.run(&cli.command.stages()))
}

fn rayon_pool(workers: usize) -> Result<vcnet_core::pipeline::ThreadPool, Error> {
    vcnet_core::pipeline::thread_pool(workers)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
