//! Pipeline commands behind the `ctslam` binary.

use ctslam_core::cli_io::{self, Config, Dataset, FormatError};
use ctslam_core::evaluation::{self, ApeAlign, ErrorStats, EvalError, MsacParams};
use ctslam_core::geometry::{Pose, Vec3};
use ctslam_core::multi_agent::{collective_optimize, encode_submap, run_sync, Agent, SimNetwork, SyncOutcome};
use ctslam_core::odometry::{Odometry, OdometryError, WindowReport};
use ctslam_core::pose_graph::{PoseGraph, PoseGraphError, Submap};
use ctslam_core::sensor_sim::{self, SceneKind, SimError};
use ctslam_core::surfel::write_surfels_ply;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Io { .. } => "io",
            Self::Format(_) => "format",
            Self::Simulation(_) => "simulation",
            Self::Odometry(_) => "odometry",
            Self::PoseGraph(_) => "pose_graph",
            Self::Evaluation(_) => "evaluation",
        }
    }

    /// Single line: `error kind=<kind> message=<JSON string>`.
    pub fn one_line(&self) -> String {
        format!("error kind={} message={}", self.kind(), serde_json::Value::String(self.to_string().replace('\n', " ")))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Writes a file through `f`, flushing and attaching the path to any error.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path).map(BufReader::new).map_err(io_err(path))
}

/// Output directory that only appears at its final path once every artifact is written.
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, CliError> {
        if target.exists() && fs::read_dir(target).map_err(io_err(target))?.next().is_some() {
            return Err(CliError::Usage(format!("output directory {} exists and is not empty", target.display())));
        }
        let name = target.file_name().ok_or_else(|| CliError::Usage("output path has no final component".into()))?;
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir(&tmp).map_err(io_err(&tmp))?;
        Ok(Self { target: target.to_path_buf(), tmp, committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            fs::remove_dir(&self.target).map_err(io_err(&self.target))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(io_err(&self.target))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub scene: SceneKind,
    pub duration: Option<f64>,
    /// Overrides the start pose of the scene's trajectory: (x, y, yaw).
    pub origin: Option<(f64, f64, f64)>,
    pub seed: u64,
}

/// Simulated dataset plus the world it was generated from.
pub fn simulate_dataset(config: &Config, args: &SimulateArgs) -> Result<(Dataset, sensor_sim::World), CliError> {
    let mut spec = sensor_sim::default_trajectory(args.scene, args.duration.or(config.sim.duration));
    if let Some((x, y, yaw)) = args.origin {
        spec = spec.with_origin(x, y, yaw);
    }
    let world = sensor_sim::build_scene(args.scene);
    let times = sensor_sim::imu_times(spec.duration, 1.0 / config.sim.imu_rate);
    let imu = sensor_sim::simulate_imu(&spec, &times, &config.sim.imu, args.seed)?;
    let lidar = sensor_sim::simulate_lidar(&world, &spec, &config.sim.lidar, args.seed.wrapping_add(1))?;
    let gt = sensor_sim::ground_truth(&spec, &times)?;
    Ok((Dataset { imu, lidar, ground_truth: Some(gt) }, world))
}

/// Surface sample spacing of the reference cloud (m).
pub const REFERENCE_SPACING: f64 = 0.05;

pub fn simulate(config: &Config, args: &SimulateArgs, output: &Path) -> Result<PathBuf, CliError> {
    let (data, world) = simulate_dataset(config, args)?;
    let stage = Staging::new(output)?;
    cli_io::write_dataset(stage.path(), &data)?;
    let reference = world.sample_surface(REFERENCE_SPACING);
    write_file(&stage.path().join("reference.ply"), |w| cli_io::write_points_ply(w, &reference))?;
    let targets: Vec<Vec3> = world.patches.iter().map(|p| p.center).collect();
    write_file(&stage.path().join("targets.txt"), |w| cli_io::write_points_txt(w, &targets))?;
    stage.commit()
}

/// One row of `timing.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub window: WindowReport,
    pub rss_bytes: u64,
    pub submaps: usize,
    pub nodes: usize,
}

/// Resident set size from `/proc/self/statm`; 0 where unavailable.
pub fn rss_bytes() -> u64 {
    fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| s.split_whitespace().nth(1).and_then(|p| p.parse::<u64>().ok()))
        .map_or(0, |pages| pages * 4096)
}

#[derive(Debug, Clone)]
pub struct SlamRun {
    pub odometry: Vec<(f64, Pose)>,
    pub optimized: Vec<(f64, Pose)>,
    pub submaps: Vec<Submap>,
    pub graph: Option<PoseGraph>,
    pub timing: Vec<TimingRow>,
}

/// Moves finished submaps into the graph and records timing rows for new windows.
fn drain_odometry(odo: &mut Odometry, submaps: &mut Vec<Submap>, graph: &mut Option<PoseGraph>, timing: &mut Vec<TimingRow>) -> Result<(), CliError> {
    for s in odo.take_submaps() {
        if let Some(g) = graph.as_mut() {
            g.ingest(&s)?;
        }
        submaps.push(s);
    }
    let nodes = graph.as_ref().map_or(0, |g| g.node_count());
    for r in &odo.reports()[timing.len()..] {
        timing.push(TimingRow { window: r.clone(), rss_bytes: rss_bytes(), submaps: submaps.len(), nodes });
    }
    Ok(())
}

/// Streams the dataset through odometry in one-second IMU chunks, feeding each finished
/// submap to the pose graph when `with_graph` is set.
pub fn run_pipeline(data: &Dataset, config: &Config, agent: u32, with_graph: bool) -> Result<SlamRun, CliError> {
    let mut odo = Odometry::new(config.odometry.clone(), agent)?;
    let mut graph = with_graph.then(|| PoseGraph::new(config.pgo.clone()));
    let mut submaps = Vec::new();
    let mut trajectory = Vec::new();
    let mut timing = Vec::new();
    odo.push_lidar(&data.lidar);
    let mut start = 0;
    while start < data.imu.len() {
        let t_chunk = data.imu[start].time + 1.0;
        let end = start + data.imu[start..].partition_point(|s| s.time < t_chunk);
        odo.push_imu(&data.imu[start..end]);
        odo.run_available()?;
        trajectory.extend(odo.take_trajectory());
        drain_odometry(&mut odo, &mut submaps, &mut graph, &mut timing)?;
        start = end;
    }
    odo.finish()?;
    trajectory.extend(odo.take_trajectory());
    drain_odometry(&mut odo, &mut submaps, &mut graph, &mut timing)?;
    let optimized = match &graph {
        Some(g) => g.correct_trajectory(agent, &submaps, &trajectory),
        None => trajectory.clone(),
    };
    Ok(SlamRun { odometry: trajectory, optimized, submaps, graph, timing })
}

fn write_submap_files(dir: &Path, submaps: &[Submap]) -> Result<(), CliError> {
    let sub = dir.join("submaps");
    fs::create_dir(&sub).map_err(io_err(&sub))?;
    for s in submaps {
        let p = sub.join(format!("submap_{}_{:06}.bin", s.id.agent, s.id.seq));
        fs::write(&p, encode_submap(s)).map_err(io_err(&p))?;
    }
    Ok(())
}

fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<(), CliError> {
    write_file(path, |w| {
        writeln!(w, "window,solve_ms,surfels,matches,rss_bytes,submaps,nodes")?;
        for r in rows {
            writeln!(w, "{},{:.3},{},{},{},{},{}", r.window.index, r.window.solve_ms, r.window.surfels, r.window.matches, r.rss_bytes, r.submaps, r.nodes)?;
        }
        Ok(())
    })
}

/// Surfels of all submaps in the world frame of their base poses.
fn write_submap_surfels_ply(path: &Path, submaps: &[Submap]) -> Result<(), CliError> {
    let all: Vec<(Vec3, Vec3, f64, f64)> = submaps
        .iter()
        .flat_map(|s| s.surfels.iter().map(move |m| m.transformed(&s.base_pose)))
        .map(|m| (m.position, m.normal, m.resolution, m.planarity))
        .collect();
    write_file(path, |w| write_surfels_ply(w, all.into_iter()))
}

pub fn odometry(config: &Config, dataset: &Path, output: &Path) -> Result<PathBuf, CliError> {
    let data = cli_io::read_dataset(dataset)?;
    let run = run_pipeline(&data, config, 0, false)?;
    let stage = Staging::new(output)?;
    write_file(&stage.path().join("trajectory.tum"), |w| cli_io::write_tum(w, &run.odometry))?;
    write_submap_surfels_ply(&stage.path().join("surfels.ply"), &run.submaps)?;
    write_submap_files(stage.path(), &run.submaps)?;
    write_timing(&stage.path().join("timing.csv"), &run.timing)?;
    stage.commit()
}

fn write_graph_outputs(dir: &Path, graph: &PoseGraph, trajectory: &[(f64, Pose)]) -> Result<(), CliError> {
    write_file(&dir.join("trajectory.tum"), |w| cli_io::write_tum(w, trajectory))?;
    write_file(&dir.join("map.ply"), |w| graph.write_map_ply(w))?;
    write_file(&dir.join("pose_graph.json"), |w| graph.write_json(w))
}

pub fn slam(config: &Config, dataset: &Path, output: &Path) -> Result<PathBuf, CliError> {
    let data = cli_io::read_dataset(dataset)?;
    let run = run_pipeline(&data, config, 0, true)?;
    let graph = run.graph.as_ref().ok_or(PoseGraphError::NoAnchor)?;
    let stage = Staging::new(output)?;
    write_graph_outputs(stage.path(), graph, &run.optimized)?;
    write_file(&stage.path().join("odometry.tum"), |w| cli_io::write_tum(w, &run.odometry))?;
    write_submap_files(stage.path(), &run.submaps)?;
    write_timing(&stage.path().join("timing.csv"), &run.timing)?;
    stage.commit()
}

#[derive(Debug, Clone)]
pub struct MultiAgentRun {
    pub sync: SyncOutcome,
    pub network: SimNetwork,
    /// Per agent: optimised graph over its synchronised database and its corrected trajectory.
    pub agents: Vec<(PoseGraph, Vec<(f64, Pose)>)>,
    pub components: Vec<Vec<u32>>,
}

/// Runs odometry per dataset (agent ids follow argument order), gossips submaps over the
/// simulated network, then optimises each agent's database.
pub fn run_multi_agent(datasets: &[Dataset], config: &Config, seed: u64) -> Result<MultiAgentRun, CliError> {
    let mut runs = Vec::new();
    for (k, d) in datasets.iter().enumerate() {
        runs.push(run_pipeline(d, config, k as u32, false)?);
    }
    let mut agents: Vec<Agent> = runs.iter().enumerate().map(|(k, r)| Agent::new(k as u32, r.submaps.iter().cloned())).collect();
    let ids: Vec<u32> = (0..datasets.len() as u32).collect();
    let mut network = SimNetwork::full(&ids, config.net.link, seed);
    let sync = run_sync(&mut agents, &mut network, &config.sync, config.net.round_period, config.net.max_rounds);
    let mut out = Vec::new();
    let mut components = Vec::new();
    for (a, r) in agents.iter().zip(&runs) {
        let res = collective_optimize(&a.db, &config.pgo)?;
        let traj = res.graph.correct_trajectory(a.id, &r.submaps, &r.odometry);
        components = res.components.clone();
        out.push((res.graph, traj));
    }
    Ok(MultiAgentRun { sync, network, agents: out, components })
}

pub fn multi_agent(config: &Config, datasets: &[PathBuf], seed: u64, output: &Path) -> Result<PathBuf, CliError> {
    if datasets.is_empty() {
        return Err(CliError::Usage("at least one dataset is required".into()));
    }
    let data = datasets.iter().map(|d| cli_io::read_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    let run = run_multi_agent(&data, config, seed)?;
    let stage = Staging::new(output)?;
    for (k, (graph, traj)) in run.agents.iter().enumerate() {
        let dir = stage.path().join(format!("agent_{k}"));
        fs::create_dir(&dir).map_err(io_err(&dir))?;
        write_graph_outputs(&dir, graph, traj)?;
    }
    write_file(&stage.path().join("sync_transcript.csv"), |w| {
        writeln!(w, "round,from,to,kind,bytes,dropped")?;
        for e in &run.network.transcript {
            writeln!(w, "{},{},{},{},{},{}", e.round, e.from, e.to, e.kind, e.bytes, e.dropped)?;
        }
        Ok(())
    })?;
    write_file(&stage.path().join("sync_summary.csv"), |w| {
        writeln!(w, "converged_round,rounds,bytes_sent,messages,components")?;
        let comps: Vec<String> = run.components.iter().map(|c| c.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("+")).collect();
        let conv = run.sync.converged_round.map_or("none".to_string(), |r| r.to_string());
        writeln!(w, "{conv},{},{},{},{}", run.sync.rounds, run.sync.bytes_sent, run.sync.messages, comps.join(" "))
    })?;
    stage.commit()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Rpe,
    Ape,
    Map,
    Targets,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rpe" => Some(Self::Rpe),
            "ape" => Some(Self::Ape),
            "map" => Some(Self::Map),
            "targets" => Some(Self::Targets),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub mode: EvalMode,
    /// RPE path lengths (m).
    pub deltas: Vec<f64>,
    pub align: bool,
    /// Association window for trajectory stamps (s).
    pub max_dt: f64,
    /// Map mode voxel size (m).
    pub voxel: f64,
    /// Map mode: ground-truth and estimated trajectories whose rigid alignment seeds the map alignment.
    pub seed_alignment: Option<(PathBuf, PathBuf)>,
}

impl Default for EvaluateArgs {
    fn default() -> Self {
        Self { mode: EvalMode::Ape, deltas: vec![10.0, 20.0], align: true, max_dt: 0.005, voxel: 0.1, seed_alignment: None }
    }
}

/// Stats rows and an optional histogram for one evaluation.
pub type Evaluation = (Vec<(String, ErrorStats)>, Option<Vec<evaluation::HistogramBin>>);

pub fn evaluate_files(gt: &Path, est: &Path, args: &EvaluateArgs) -> Result<Evaluation, CliError> {
    match args.mode {
        EvalMode::Rpe | EvalMode::Ape => {
            let g = cli_io::read_tum(open(gt)?)?;
            let e = cli_io::read_tum(open(est)?)?;
            let pairs = evaluation::associate(&g, &e, args.max_dt)?;
            let mut rows = Vec::new();
            if args.mode == EvalMode::Ape {
                let align = if args.align { ApeAlign::Rigid } else { ApeAlign::None };
                let r = evaluation::ape(&g, &e, &pairs, align)?;
                rows.push(("ape_translation_m".into(), r.translation));
                rows.push(("ape_rotation_rad".into(), r.rotation));
            } else {
                for b in evaluation::rpe(&g, &e, &pairs, &args.deltas)? {
                    if let Some(t) = b.translation {
                        rows.push((format!("rpe_translation_m@{}", b.delta), t));
                    }
                    if let Some(r) = b.rotation {
                        rows.push((format!("rpe_rotation_rad@{}", b.delta), r));
                    }
                }
            }
            Ok((rows, None))
        }
        EvalMode::Map => {
            let reference = cli_io::read_ply_points(open(gt)?)?;
            let mut target = cli_io::read_ply_points(open(est)?)?;
            if let Some((tg, te)) = &args.seed_alignment {
                let g = cli_io::read_tum(open(tg)?)?;
                let e = cli_io::read_tum(open(te)?)?;
                let pairs = evaluation::associate(&g, &e, args.max_dt)?;
                let a = evaluation::ape(&g, &e, &pairs, ApeAlign::Rigid)?.alignment;
                for p in &mut target {
                    *p = a.transform_point(p);
                }
            }
            let m = evaluation::map_distance(&target, &reference, args.voxel, args.align)?;
            Ok((vec![("map_distance_m".into(), m.stats)], Some(m.histogram)))
        }
        EvalMode::Targets => {
            let surveyed = cli_io::read_points_txt(open(gt)?)?;
            let mapped = cli_io::read_points_txt(open(est)?)?;
            let r = evaluation::robust_target_align(&mapped, &surveyed, &MsacParams::default())?;
            Ok((vec![("target_error_m".into(), r.stats)], None))
        }
    }
}

pub fn evaluate(gt: &Path, est: &Path, args: &EvaluateArgs, output: &Path) -> Result<Evaluation, CliError> {
    let result = evaluate_files(gt, est, args)?;
    let stage = Staging::new(output)?;
    write_file(&stage.path().join("stats.csv"), |w| cli_io::write_stats_csv(w, &result.0))?;
    if let Some(h) = &result.1 {
        write_file(&stage.path().join("histogram.csv"), |w| cli_io::write_histogram_csv(w, h))?;
    }
    stage.commit()?;
    Ok(result)
}
