//! `textloop`: simulate logs, detect text loop closures, optimize, evaluate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use textloop_core::config::PipelineConfig;
use textloop_core::evaluation::build_report;
use textloop_core::loop_closure::LoopConstraint;
use textloop_core::pipeline::{optimize_trajectory, Detector};
use textloop_core::records::{read_jsonl, write_jsonl, LogRecord};
use textloop_core::simulator::{run_scenario, Scenario};
use textloop_core::text_entity::TextCategory;
use textloop_core::Pose;

#[derive(Parser)]
#[command(name = "textloop", version, about = "Scene-text loop closure for LiDAR SLAM")]
struct Cli {
    /// TOML configuration; `TEXTLOOP__SECTION__KEY` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic run: log.jsonl, gt.jsonl and world.json.
    Simulate(SimulateArgs),
    /// Stream a log through entity extraction and loop closure: loops.jsonl, timing.json.
    Detect(DetectArgs),
    /// Optimize odometry with loop constraints: traj.jsonl.
    Optimize(OptimizeArgs),
    /// Score loops and trajectory against ground truth: report.json.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// corridor, semi_outdoor or multifloor
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Keep only the first N LiDAR frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the observation database as JSONL.
    #[arg(long)]
    db_dump: Option<PathBuf>,
    /// Stop after N odometry frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    loops: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory: traj.jsonl or any log with odom records.
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    loops: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with a category used in the one-line `error[kind]:` prefix.
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl std::fmt::Display) -> Self {
        Self { kind, message: message.to_string().replace('\n', " ") }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new("io", format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn out_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn input_err(path: &Path) -> impl Fn(textloop_core::error::RecordError) -> Failure + '_ {
    move |e| Failure::new("input", format!("{}: {e}", path.display()))
}

fn read_records(path: &Path) -> Result<Vec<LogRecord>, Failure> {
    read_jsonl(open(path)?).map(|r| r.map(|(_, rec)| rec).map_err(input_err(path))).collect()
}

/// Odometry poses by frame; frames must run 0, 1, 2, ...
fn read_poses(path: &Path, want_gt: bool) -> Result<Vec<Pose>, Failure> {
    let mut poses = Vec::new();
    for rec in read_records(path)? {
        let (frame, pose) = match rec {
            LogRecord::Odom { frame, pose, .. } if !want_gt => (frame, pose),
            LogRecord::Gt { frame, pose } if want_gt => (frame, pose),
            _ => continue,
        };
        if frame != poses.len() {
            return Err(Failure::new(
                "input",
                format!("{}: frame {frame} out of order (expected {})", path.display(), poses.len()),
            ));
        }
        poses.push(pose);
    }
    Ok(poses)
}

fn read_loops(path: &Path) -> Result<Vec<LoopConstraint>, Failure> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let c = serde_json::from_str(&line)
            .map_err(|e| Failure::new("input", format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(c);
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::new("io", e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

fn simulate(config: &PipelineConfig, args: &SimulateArgs) -> CmdResult {
    let mut params = config.sim.clone();
    if let Some(name) = &args.scenario {
        params.scenario = name.parse::<Scenario>().map_err(|e| Failure::new("config", e))?;
    }
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    let rig = config.rig().map_err(|e| Failure::new("config", e))?;
    let (world, mut out) = run_scenario(&params, &rig).map_err(|e| Failure::new("config", e))?;
    if let Some(n) = args.frames {
        let n = n.min(out.ground_truth.len());
        out.ground_truth.truncate(n);
        let t_end = out.timestamps.get(n).copied().unwrap_or(f64::INFINITY);
        out.records.retain(|r| match r {
            LogRecord::Odom { frame, .. } | LogRecord::Cloud { frame, .. } => *frame < n,
            LogRecord::Texts { t, .. } => *t < t_end,
            _ => true,
        });
    }
    out_dir(&args.out)?;
    let log_path = args.out.join("log.jsonl");
    let mut w = create(&log_path)?;
    write_jsonl(&out.records, &mut w).and_then(|_| w.flush()).map_err(io_err(&log_path))?;
    let gt_path = args.out.join("gt.jsonl");
    let mut w = create(&gt_path)?;
    write_jsonl(&out.gt_records(), &mut w).and_then(|_| w.flush()).map_err(io_err(&gt_path))?;
    let world_path = args.out.join("world.json");
    std::fs::write(&world_path, world.to_json() + "\n").map_err(io_err(&world_path))?;

    let ids = world.placements.iter().filter(|p| p.category == TextCategory::Id).count();
    let texts = out.records.iter().filter(|r| matches!(r, LogRecord::Texts { .. })).count();
    println!(
        "scenario={} seed={} floors={} walls={} id_texts={} generic_texts={} frames={} text_records={}",
        world.scenario.name(),
        params.seed,
        world.floors,
        world.walls.len(),
        ids,
        world.placements.len() - ids,
        out.ground_truth.len(),
        texts
    );
    Ok(())
}

fn detect(config: &PipelineConfig, args: &DetectArgs) -> CmdResult {
    let params = config.detector_params().map_err(|e| Failure::new("config", e))?;
    let mut detector = Detector::new(params);
    let mut found = Vec::new();
    for item in read_jsonl(open(&args.log)?) {
        let (line, record) = item.map_err(input_err(&args.log))?;
        if let (Some(n), LogRecord::Odom { frame, .. }) = (args.frames, &record) {
            if *frame >= n {
                break;
            }
        }
        let new = detector
            .push(&record)
            .map_err(|e| Failure::new("input", format!("{}: line {line}: {e}", args.log.display())))?;
        found.extend(new);
    }
    detector.finish();

    out_dir(&args.out)?;
    let loops_path = args.out.join("loops.jsonl");
    let mut w = create(&loops_path)?;
    for c in &found {
        serde_json::to_writer(&mut w, c).map_err(|e| Failure::new("io", e))?;
        w.write_all(b"\n").map_err(io_err(&loops_path))?;
    }
    w.flush().map_err(io_err(&loops_path))?;
    // wall-clock timings differ between runs, so they live in their own file
    write_json(&args.out.join("timing.json"), &detector.timing().to_json())?;
    if let Some(path) = &args.db_dump {
        let mut w = create(path)?;
        detector.database().dump(&mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    println!(
        "frames={} entities={} loops={} mean_frame_ms={:.3}",
        detector.timing().frames,
        detector.timing().entities,
        found.len(),
        detector.timing().mean_frame_s() * 1e3
    );
    Ok(())
}

fn optimize(config: &PipelineConfig, args: &OptimizeArgs) -> CmdResult {
    let records = read_records(&args.log)?;
    let mut odometry = Vec::new();
    let mut stamps = Vec::new();
    for rec in &records {
        if let LogRecord::Odom { t, frame, pose } = rec {
            if *frame != odometry.len() {
                return Err(Failure::new(
                    "input",
                    format!("{}: odometry frame {frame} out of order", args.log.display()),
                ));
            }
            odometry.push(*pose);
            stamps.push(*t);
        }
    }
    if odometry.is_empty() {
        return Err(Failure::new("input", format!("{}: no odometry records", args.log.display())));
    }
    let loops = read_loops(&args.loops)?;
    if let Some(c) = loops.iter().find(|c| c.frame_i.max(c.frame_j) >= odometry.len()) {
        return Err(Failure::new(
            "input",
            format!(
                "loop {} -> {} references a frame beyond the {} odometry poses",
                c.frame_i,
                c.frame_j,
                odometry.len()
            ),
        ));
    }
    let (poses, summary) =
        optimize_trajectory(&odometry, &loops, &config.graph).map_err(|e| Failure::new("graph", e))?;
    out_dir(&args.out)?;
    let path = args.out.join("traj.jsonl");
    let out: Vec<LogRecord> = poses
        .iter()
        .zip(&stamps)
        .enumerate()
        .map(|(frame, (pose, &t))| LogRecord::Odom { t, frame, pose: *pose })
        .collect();
    let mut w = create(&path)?;
    write_jsonl(&out, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    println!(
        "poses={} loops={} initial_cost={:.6} final_cost={:.6} iterations={}",
        poses.len(),
        loops.len(),
        summary.initial_cost,
        summary.final_cost,
        summary.iterations
    );
    Ok(())
}

fn evaluate(config: &PipelineConfig, args: &EvaluateArgs) -> CmdResult {
    let est = read_poses(&args.traj, false)?;
    let gt = read_poses(&args.gt, true)?;
    if est.len() != gt.len() {
        return Err(Failure::new(
            "input",
            format!("trajectory has {} poses but ground truth has {}", est.len(), gt.len()),
        ));
    }
    let loops = match &args.loops {
        Some(p) => read_loops(p)?,
        None => Vec::new(),
    };
    let predictions: Vec<(usize, usize)> = loops.iter().map(|c| (c.frame_i, c.frame_j)).collect();
    if let Some((i, j)) = predictions.iter().find(|(i, j)| (*i).max(*j) >= gt.len()) {
        return Err(Failure::new("input", format!("loop {i} -> {j} references a frame beyond the trajectory")));
    }
    let report = build_report(&est, &gt, &predictions, &config.eval).map_err(|e| Failure::new("input", e))?;
    out_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "recall={} precision={} tp={} fp={} fn={} ate_mean={:.6}",
        fmt(report.recall),
        fmt(report.precision),
        report.tp,
        report.fp,
        report.fn_,
        report.ate_mean
    );
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let config = PipelineConfig::load(cli.config.as_deref()).map_err(|e| Failure::new("config", e))?;
    match &cli.command {
        Command::Simulate(a) => simulate(&config, a),
        Command::Detect(a) => detect(&config, a),
        Command::Optimize(a) => optimize(&config, a),
        Command::Evaluate(a) => evaluate(&config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.message);
            ExitCode::from(2)
        }
    }
}
