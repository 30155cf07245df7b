//! Weak-scaling benchmark CLI: runs the heat solver under the one-sided
//! runtime for a configurable machine shape and routing mode, and emits the
//! per-repetition timing breakdown as CSV (stdout by default).

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

use hearth::bench::{
    emit_csv, parse_grid, run_experiment, BenchError, Experiment, ExperimentPatch,
};
use hearth::oracle::write_field;
use hearth::transport::RoutingMode;

/// Halo-exchange benchmark for the locality-aware one-sided runtime.
///
/// Precedence: built-in defaults, then the config file, then flags.
#[derive(Debug, Parser)]
#[command(name = "heatbench", version, about)]
struct Cli {
    /// Number of units (worker threads)
    #[arg(long)]
    units: Option<u32>,

    /// Units per simulated node
    #[arg(long)]
    node_size: Option<u32>,

    /// Nodes per simulated chassis
    #[arg(long)]
    blades_per_chassis: Option<u32>,

    /// Chassis per simulated group
    #[arg(long)]
    chassis_per_group: Option<u32>,

    /// Global grid as NXxNYxNZ, e.g. 64x64x128
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(u32, u32, u32)>,

    /// Iterations per repetition
    #[arg(long)]
    iters: Option<u32>,

    /// Routing mode: locality_aware or oblivious
    #[arg(long, value_parser = clap::builder::ValueParser::new(str::parse::<RoutingMode>))]
    mode: Option<RoutingMode>,

    /// Repetitions to average over
    #[arg(long)]
    reps: Option<u32>,

    /// Seed for the random initial interior
    #[arg(long)]
    seed: Option<u64>,

    /// Write the CSV here instead of stdout
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,

    /// Line-oriented `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dump the final field of the last repetition here (binary)
    #[arg(long, value_name = "PATH")]
    dump_field: Option<PathBuf>,
}

impl Cli {
    fn as_patch(&self) -> ExperimentPatch {
        ExperimentPatch {
            units: self.units,
            node_size: self.node_size,
            blades_per_chassis: self.blades_per_chassis,
            chassis_per_group: self.chassis_per_group,
            grid: self.grid,
            iters: self.iters,
            mode: self.mode,
            reps: self.reps,
            seed: self.seed,
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("heatbench: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let mut experiment = Experiment::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)?;
        experiment = ExperimentPatch::parse_config(&text)?.apply(experiment);
    }
    let experiment = cli.as_patch().apply(experiment);

    let (rows, field) = run_experiment(&experiment, cli.dump_field.is_some())?;

    match &cli.csv {
        Some(path) => {
            let mut file = fs::File::create(path)?;
            emit_csv(&mut file, &rows)?;
            file.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            emit_csv(&mut stdout.lock(), &rows)?;
        }
    }

    if let Some(path) = &cli.dump_field {
        let field = field.expect("a field is collected when --dump-field is set");
        let grid = experiment.grid();
        let mut file = fs::File::create(path)?;
        write_field(&mut file, &field, (grid.dx, grid.dy, grid.dz))?;
        file.flush().map_err(BenchError::Io)?;
    }
    Ok(())
}
