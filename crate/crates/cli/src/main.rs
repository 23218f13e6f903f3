use clap::{Parser, Subcommand};
use ctslam_cli::{CliError, EvalMode, EvaluateArgs, SimulateArgs};
use ctslam_core::cli_io::Config;
use ctslam_core::sensor_sim::SceneKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ctslam", version, about = "Continuous-time lidar-inertial odometry and submap SLAM")]
struct Cli {
    /// Flat `key = value` parameter file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Single-threaded, byte-reproducible run (the only execution path at present).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory; must not exist or be empty.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// room, corridor, tunnel or loop (defaults to `sim.scene`).
        #[arg(long)]
        scene: Option<String>,
        /// Run length in seconds (scene default if omitted).
        #[arg(long)]
        duration: Option<f64>,
        /// Start pose override `x,y,yaw`.
        #[arg(long, value_delimiter = ',')]
        origin: Option<Vec<f64>>,
    },
    /// Lidar-inertial odometry only.
    Odometry { dataset: PathBuf },
    /// Odometry followed by submap pose-graph optimisation.
    Slam { dataset: PathBuf },
    /// Per-agent odometry, submap gossip over a simulated network and collective optimisation.
    MultiAgent {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Compare an estimate against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// rpe, ape, map or targets.
        #[arg(long)]
        mode: String,
        /// RPE path lengths in metres.
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        deltas: Vec<f64>,
        /// Skip rigid alignment (ape and map modes).
        #[arg(long)]
        no_align: bool,
        #[arg(long, default_value_t = 0.005)]
        max_dt: f64,
        #[arg(long, default_value_t = 0.1)]
        voxel: f64,
        /// Map mode: `gt.tum,est.tum` whose rigid alignment seeds the map alignment.
        #[arg(long, value_delimiter = ',')]
        seed_alignment: Option<Vec<PathBuf>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let output = |default: &str| cli.output.clone().unwrap_or_else(|| PathBuf::from(default));
    if cli.deterministic {
        log::info!("deterministic mode");
    }
    match cli.command {
        Command::Simulate { scene, duration, origin } => {
            let scene = match scene {
                Some(s) => SceneKind::parse(&s).ok_or_else(|| CliError::Usage(format!("unknown scene `{s}`")))?,
                None => config.sim.scene,
            };
            let origin = match origin.as_deref() {
                None => None,
                Some([x, y, yaw]) => Some((*x, *y, *yaw)),
                Some(_) => return Err(CliError::Usage("--origin takes x,y,yaw".into())),
            };
            let args = SimulateArgs { scene, duration, origin, seed: cli.seed };
            let out = ctslam_cli::simulate(&config, &args, &output("dataset"))?;
            println!("{}", out.display());
        }
        Command::Odometry { dataset } => {
            println!("{}", ctslam_cli::odometry(&config, &dataset, &output("odometry_out"))?.display());
        }
        Command::Slam { dataset } => {
            println!("{}", ctslam_cli::slam(&config, &dataset, &output("slam_out"))?.display());
        }
        Command::MultiAgent { datasets } => {
            println!("{}", ctslam_cli::multi_agent(&config, &datasets, cli.seed, &output("multi_agent_out"))?.display());
        }
        Command::Evaluate { gt, est, mode, deltas, no_align, max_dt, voxel, seed_alignment } => {
            let mode = EvalMode::parse(&mode).ok_or_else(|| CliError::Usage(format!("unknown mode `{mode}`")))?;
            let seed_alignment = match seed_alignment {
                None => None,
                Some(v) if v.len() == 2 => Some((v[0].clone(), v[1].clone())),
                Some(_) => return Err(CliError::Usage("--seed-alignment takes gt.tum,est.tum".into())),
            };
            let args = EvaluateArgs { mode, deltas, align: !no_align, max_dt, voxel, seed_alignment };
            let (rows, _) = ctslam_cli::evaluate(&gt, &est, &args, &output("evaluation"))?;
            for (name, s) in rows {
                println!("{name}: mean {:.6} rmse {:.6} max {:.6} n {}", s.mean, s.rmse, s.max, s.count);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::Usage(e.to_string()).one_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            if matches!(e, CliError::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
