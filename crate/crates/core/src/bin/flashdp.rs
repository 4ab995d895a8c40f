use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flashdp::bench::{
    emit_report, max_parity_gap, run_scenario, scenario_plans, train_demo, write_report, write_trajectories,
    ReportFormat, ScenarioConfig,
};
use flashdp::{plan_blocks, LayerDims, MemSpec, Result};

#[derive(Parser)]
#[command(name = "flashdp", version, about = "DP backward workflows on a simulated memory hierarchy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Print the block plan for one layer, or for every cell of a config.
    Plan {
        #[arg(long, conflicts_with_all = ["batch", "seq", "in_features", "out_features", "scratch_bytes"])]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        batch: Option<usize>,
        #[arg(long, required_unless_present = "config")]
        seq: Option<usize>,
        #[arg(long, required_unless_present = "config")]
        in_features: Option<usize>,
        #[arg(long, required_unless_present = "config")]
        out_features: Option<usize>,
        #[arg(long, required_unless_present = "config")]
        scratch_bytes: Option<u64>,
        #[arg(long, default_value_t = 8)]
        width: u64,
    },
    /// Run the workflow comparison matrix of a scenario config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Train one linear layer with each DP workflow and compare loss curves.
    TrainDemo {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
}

fn open(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan { config: Some(path), .. } => {
            let cfg = ScenarioConfig::from_path(path)?;
            println!("{}", serde_json::to_string_pretty(&scenario_plans(&cfg)?)?);
        }
        Command::Plan { config: None, batch, seq, in_features, out_features, scratch_bytes, width } => {
            let dims = LayerDims::new(
                batch.unwrap_or_default(),
                seq.unwrap_or_default(),
                in_features.unwrap_or_default(),
                out_features.unwrap_or_default(),
            )?;
            let spec = MemSpec::new(scratch_bytes.unwrap_or_default(), width)?;
            println!("{}", serde_json::to_string(&plan_blocks(dims, spec)?)?);
        }
        Command::Run { config, output } => {
            let cfg = ScenarioConfig::from_path(config)?;
            let rows = run_scenario(&cfg)?;
            match &output.out {
                Some(p) => emit_report(&rows, output.format, p)?,
                None => write_report(&rows, output.format, io::stdout().lock())?,
            }
        }
        Command::TrainDemo { config, output } => {
            let cfg = ScenarioConfig::from_path(config)?;
            let trajectories = train_demo(&cfg)?;
            write_trajectories(&trajectories, output.format, open(&output.out)?)?;
            eprintln!("max per-step loss gap between DP workflows: {:e}", max_parity_gap(&trajectories));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
