//! `geodrift` — scale-drift correction for monocular reconstructions.
//!
//! Subcommands:
//! - `simulate`: generate a synthetic scenario (truth + drifted
//!   trajectories and the keyframe stream) from a scenario config.
//! - `correct`: run the correction pipeline over a keyframe stream and
//!   write the corrected trajectory plus an event log.
//! - `evaluate`: compare two trajectories, print the Ave/SD table and
//!   optionally write the per-keyframe error CSV.
//! - `trace-scale`: write the per-keyframe scale-factor trace CSV.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.
//! Log verbosity follows `RUST_LOG` (default `warn`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use geodrift_core::io::config::{
    load_config, pipeline_from_config, scenario_from_config, scenario_to_config, Config,
};
use geodrift_core::io::scene_format::{load_scene, save_scene};
use geodrift_core::io::stream::load_stream;
use geodrift_core::io::trajectory::{
    load_trajectory, save_trajectory, Trajectory, TrajectoryFormat,
};
use geodrift_core::io::write_atomic;
use geodrift_core::pipeline::{
    evaluate_ate2d, per_keyframe_error2d, scale_factor_trace, Pipeline, PipelineConfig, Scene,
};
use geodrift_core::sim::generate;
use geodrift_core::ScenarioSpec;

/// Schema tag on the per-keyframe error CSV.
const ERRORS_SCHEMA: &str = "geodrift/errors@1";
/// Schema tag on the scale-trace CSV.
const TRACE_SCHEMA: &str = "geodrift/scale-trace@1";
/// Schema tag on the event-log JSONL.
const EVENTS_SCHEMA: &str = "geodrift/events@1";

#[derive(Parser)]
#[command(
    name = "geodrift",
    version,
    about = "Correct scale drift in monocular reconstructions using geo-referenced poses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: truth/drifted trajectories and a
    /// keyframe stream.
    Simulate(SimulateArgs),
    /// Run the correction pipeline over a keyframe stream.
    Correct(CorrectArgs),
    /// Compare two trajectories and report 2D position errors.
    Evaluate(EvaluateArgs),
    /// Write the per-keyframe scale-factor trace of a trajectory pair.
    TraceScale(TraceScaleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config file (flat key = value); defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving truth.txt, drifted.txt, stream.jsonl and
    /// scenario.conf.
    #[arg(long)]
    out_dir: PathBuf,
    /// Trajectory format for the written trajectories.
    #[arg(long, value_enum, default_value_t = FormatArg::Kitti)]
    format: FormatArg,
}

#[derive(Args)]
struct CorrectArgs {
    /// Keyframe stream (JSONL) to correct.
    #[arg(long)]
    stream: PathBuf,
    /// Correction tunables (flat key = value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial scene snapshot to extend instead of starting empty.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output path of the corrected trajectory.
    #[arg(long)]
    output: PathBuf,
    /// Optional JSONL event log (one correction event per keyframe).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Optional path for the final scene snapshot.
    #[arg(long)]
    save_scene: Option<PathBuf>,
    /// Trajectory format of the output.
    #[arg(long, value_enum, default_value_t = FormatArg::Kitti)]
    format: FormatArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory.
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth trajectory.
    #[arg(long)]
    truth: PathBuf,
    /// Optional per-keyframe error CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TraceScaleArgs {
    /// Estimated trajectory.
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth trajectory.
    #[arg(long)]
    truth: PathBuf,
    /// Output CSV of (keyframe, scale factor) rows.
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Kitti,
    Tum,
}

impl From<FormatArg> for TrajectoryFormat {
    fn from(arg: FormatArg) -> Self {
        match arg {
            FormatArg::Kitti => TrajectoryFormat::Kitti,
            FormatArg::Tum => TrajectoryFormat::Tum,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes, not usage errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(&args),
        Command::Correct(args) => run_correct(&args),
        Command::Evaluate(args) => run_evaluate(&args),
        Command::TraceScale(args) => run_trace_scale(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ScenarioSpec> {
    let config = match path {
        Some(path) => {
            load_config(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => Config::default(),
    };
    let mut spec = scenario_from_config(&config).context("parsing scenario config")?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn run_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let spec = load_scenario(args.scenario.as_deref(), args.seed)?;
    let sim = generate(&spec).context("generating scenario")?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let format = TrajectoryFormat::from(args.format);
    let write_poses = |name: &str, scene: &Scene| -> anyhow::Result<()> {
        let trajectory = Trajectory::from_poses(
            format,
            scene.keyframes.iter().map(|(&id, &pose)| (id, pose)),
        );
        let path = args.out_dir.join(name);
        save_trajectory(&path, &trajectory)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    };
    write_poses("truth.txt", &sim.truth)?;
    write_poses("drifted.txt", &sim.drifted)?;

    let stream_path = args.out_dir.join("stream.jsonl");
    geodrift_core::io::stream::save_stream(&stream_path, &sim.drifted_stream())
        .with_context(|| format!("writing {}", stream_path.display()))?;

    // Echo the fully-resolved scenario so the run can be reproduced
    // even when it came from defaults and flag overrides.
    let conf_path = args.out_dir.join("scenario.conf");
    write_atomic(&conf_path, scenario_to_config(&spec).as_bytes())
        .with_context(|| format!("writing {}", conf_path.display()))?;

    log::info!(
        "wrote scenario ({} keyframes, seed {}) to {}",
        spec.keyframes,
        spec.seed,
        args.out_dir.display()
    );
    Ok(())
}

fn run_correct(args: &CorrectArgs) -> anyhow::Result<()> {
    let config = match &args.config {
        Some(path) => {
            let parsed =
                load_config(path).with_context(|| format!("reading {}", path.display()))?;
            pipeline_from_config(&parsed).context("parsing correction config")?
        }
        None => PipelineConfig::default(),
    };
    let inputs = load_stream(&args.stream)
        .with_context(|| format!("reading {}", args.stream.display()))?;
    let mut scene = match &args.scene {
        Some(path) => {
            load_scene(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => {
            let camera = inputs
                .first()
                .and_then(|input| input.geo.as_ref())
                .map(|geo| geo.matches.camera);
            // The mapping camera rides on the stream's geo records; a
            // stream without any still corrects poses (no reprojection
            // stage inputs arrive without observations of geo images).
            let camera = camera
                .or_else(|| {
                    inputs
                        .iter()
                        .find_map(|input| input.geo.as_ref().map(|geo| geo.matches.camera))
                })
                .unwrap_or(geodrift_core::Camera::new(500.0, 500.0, 320.0, 240.0));
            Scene::new(camera)
        }
    };

    let mut pipeline = Pipeline::new(config).context("invalid correction config")?;
    let mut events = String::new();
    let _ = writeln!(events, "{{\"schema\":\"{EVENTS_SCHEMA}\"}}");
    let total = inputs.len();
    for input in inputs {
        let event = pipeline
            .ingest_keyframe(&mut scene, input)
            .context("correcting stream")?;
        let _ = writeln!(
            events,
            "{}",
            serde_json::to_string(&event).expect("event serialization is infallible")
        );
    }
    log::info!(
        "corrected {} keyframes ({} geo images dropped)",
        total,
        pipeline.dropped_geo_images()
    );

    let trajectory = Trajectory::from_poses(
        args.format.into(),
        scene.keyframes.iter().map(|(&id, &pose)| (id, pose)),
    );
    save_trajectory(&args.output, &trajectory)
        .with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(path) = &args.events {
        write_atomic(path, events.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.save_scene {
        save_scene(path, &scene).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let est = load_trajectory(&args.estimate)
        .with_context(|| format!("reading {}", args.estimate.display()))?
        .positions();
    let truth = load_trajectory(&args.truth)
        .with_context(|| format!("reading {}", args.truth.display()))?
        .positions();
    let (ave, sd) = evaluate_ate2d(&est, &truth).context("comparing trajectories")?;
    let matched = est.keys().filter(|id| truth.contains_key(id)).count();
    println!("2D position error over {matched} matched keyframes");
    println!("Ave {ave:.2} SD {sd:.2}");
    if let Some(path) = &args.csv {
        let mut csv = format!("# {ERRORS_SCHEMA}\nkeyframe,error_m\n");
        for (id, error) in per_keyframe_error2d(&est, &truth) {
            let _ = writeln!(csv, "{id},{error}");
        }
        write_atomic(path, csv.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_trace_scale(args: &TraceScaleArgs) -> anyhow::Result<()> {
    let est = load_trajectory(&args.estimate)
        .with_context(|| format!("reading {}", args.estimate.display()))?
        .positions();
    let truth = load_trajectory(&args.truth)
        .with_context(|| format!("reading {}", args.truth.display()))?
        .positions();
    let trace = scale_factor_trace(&est, &truth);
    anyhow::ensure!(
        !trace.is_empty(),
        "trajectories share no consecutive keyframes to compare"
    );
    let mut csv = format!("# {TRACE_SCHEMA}\nkeyframe,scale_factor\n");
    let mut in_band = 0usize;
    for &(id, factor) in &trace {
        let _ = writeln!(csv, "{id},{factor}");
        if (0.9..=1.1).contains(&factor) {
            in_band += 1;
        }
    }
    write_atomic(&args.csv, csv.as_bytes())
        .with_context(|| format!("writing {}", args.csv.display()))?;
    println!(
        "scale factor within [0.9, 1.1] for {}/{} keyframes ({:.1}%)",
        in_band,
        trace.len(),
        100.0 * in_band as f64 / trace.len() as f64
    );
    Ok(())
}
