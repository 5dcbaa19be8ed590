use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ctfa::bench::{parse_config, run_experiment, ExperimentSpec, RunSettings};
use ctfa::channel::{sample_geometry, ScenarioConfig, Side};
use ctfa::kinematics::{plan_from_csv, validate};
use ctfa::orchestrator::{run, RunOptions, StoppingRule};

#[derive(Parser)]
#[command(name = "ctfa", about = "Joint trajectory and covariance optimizer for movable-antenna MIMO")]
struct Cli {
    /// Added to every seed in the experiment spec.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads for concurrent runs; defaults to the CPU count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides slot count and seed list with a canned scale.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Emits per-iteration progress as line-delimited JSON.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// N = 50 slots, 20 seeds.
    Desk,
    /// N = 200 slots, 50 seeds.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment described by a TOML config file.
    Run { config: PathBuf },
    /// Checks a trajectory CSV against the kinematic constraints.
    Validate {
        trajectory: PathBuf,
        /// Side the trajectory belongs to.
        #[arg(long, value_enum, default_value_t = CliSide::Tx)]
        side: CliSide,
        /// Optional config whose scenario defines the constraint values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Single 2x2 optimization run with progress output.
    Demo,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum CliSide {
    Tx,
    Rx,
}

fn apply_profile(spec: &mut ExperimentSpec, profile: Profile) {
    match profile {
        Profile::Desk => {
            spec.scenario.n_slots = 50;
            spec.seeds = (0..20).collect();
        }
        Profile::Full => {
            spec.scenario.n_slots = 200;
            spec.seeds = (0..50).collect();
        }
    }
}

fn cmd_run(cli: &Cli, config: &PathBuf) -> ExitCode {
    let mut spec = match parse_config(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(p) = cli.profile {
        apply_profile(&mut spec, p);
    }
    if let Err(e) = spec.validate() {
        eprintln!("config error: {e}");
        return ExitCode::from(2);
    }
    let settings = RunSettings {
        seed_offset: cli.seed_offset,
        workers: cli
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    let rows = match run_experiment(&spec, &settings) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("experiment error: {e}");
            return ExitCode::from(1);
        }
    };
    if cli.verbose {
        for row in &rows {
            println!("{}", serde_json::to_string(row).expect("row serializes"));
        }
    }
    let failed = rows.iter().filter(|r| r.failed).count();
    eprintln!(
        "{} runs finished, {} failed; outputs in {}",
        rows.len(),
        failed,
        spec.output_dir.display()
    );
    if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_validate(trajectory: &PathBuf, side: CliSide, config: Option<&PathBuf>) -> ExitCode {
    let scenario = match config {
        Some(path) => match parse_config(path) {
            Ok(spec) => spec.scenario,
            Err(e) => {
                eprintln!("config error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ScenarioConfig::default(),
    };
    let text = match std::fs::read_to_string(trajectory) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", trajectory.display());
            return ExitCode::from(2);
        }
    };
    let side = if side == CliSide::Tx { Side::Tx } else { Side::Rx };
    let plan = match plan_from_csv(&text, side) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("parse error: {e}");
            return ExitCode::from(2);
        }
    };
    let violations = validate(&plan, &scenario);
    if violations.is_empty() {
        println!(
            "ok: {} elements x {} samples feasible",
            plan.elements.len(),
            plan.n_samples()
        );
        ExitCode::SUCCESS
    } else {
        for v in &violations {
            println!("{v}");
        }
        eprintln!("{} violations", violations.len());
        ExitCode::from(1)
    }
}

fn cmd_demo(cli: &Cli) -> ExitCode {
    let mut config = ScenarioConfig::default();
    if let Some(Profile::Full) = cli.profile {
        config.n_slots = 200;
    }
    let seed = cli.seed_offset;
    let geometry = match sample_geometry(&config, seed) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let verbose = cli.verbose;
    let mut on_iter = |entry: &ctfa::orchestrator::HistoryEntry| {
        if verbose {
            println!("{}", serde_json::to_string(entry).expect("entry serializes"));
        } else {
            eprintln!(
                "iteration {:3}  throughput {:.4} bits  ({:.1}s)",
                entry.outer_iteration, entry.throughput_bits, entry.wall_seconds
            );
        }
    };
    let state = match run(
        &config,
        &geometry,
        &StoppingRule::default(),
        RunOptions::default(),
        Some(&mut on_iter),
    ) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(1);
        }
    };
    let baseline = state
        .history
        .first()
        .map(|h| h.throughput_bits)
        .unwrap_or(0.0);
    let last = state
        .history
        .last()
        .map(|h| h.throughput_bits)
        .unwrap_or(0.0);
    eprintln!(
        "done: seed {seed}, {} iterations, converged = {}, throughput {:.4} bits ({:+.1}% over stationary start)",
        state.outer_iterations,
        state.converged,
        last,
        100.0 * (last / baseline.max(1e-12) - 1.0)
    );
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => cmd_run(&cli, config),
        Command::Validate {
            trajectory,
            side,
            config,
        } => cmd_validate(trajectory, *side, config.as_ref()),
        Command::Demo => cmd_demo(&cli),
    }
}
