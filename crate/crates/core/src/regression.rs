//! Reproducibility harness: canned scenarios with frozen metric bounds,
//! stage-ablation studies, and the generated configuration reference.
//!
//! A [`RegressionCase`] pins a scenario together with the metric bounds
//! the committed implementation must stay inside; the bounds were
//! derived from baseline runs and frozen with at least 2× headroom, so
//! a failure signals a real behavior change rather than noise.
//! [`run_regression`] executes the case under three stage combinations
//! — registration only, registration + pose-graph, and the full
//! pipeline — and checks the full pipeline against the bounds. Stage
//! orderings are noisy per seed, so [`run_ablation`] aggregates them as
//! medians over many seeds before any comparison is made.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::pipeline::{
    evaluate_ate2d, scale_factor_trace, EventKind, Pipeline, PipelineConfig, PipelineError,
    Scene,
};
use crate::sim::{generate, ScenarioSpec, SimError};

/// Schema tag carried by the JSON summary.
pub const REGRESSION_SCHEMA: &str = "geodrift/regression@1";

/// Failure while running a regression scenario.
#[derive(Debug, Error)]
pub enum RegressionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    /// The scenario produced no comparable trajectory.
    #[error("scenario produced no usable metrics: {0}")]
    Degenerate(String),
}

/// Which correction stages run after the one-shot registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    /// Registration only; the drift stays in.
    InitOnly,
    /// Registration + pose-graph rounds.
    InitPgo,
    /// Registration + bundle-adjustment rounds.
    InitBa,
    /// Registration + pose-graph + bundle adjustment.
    Full,
}

impl Stages {
    pub const ALL: [Stages; 4] = [Stages::InitOnly, Stages::InitPgo, Stages::InitBa, Stages::Full];

    /// Short label used in reports and JSON keys.
    pub fn label(self) -> &'static str {
        match self {
            Stages::InitOnly => "init",
            Stages::InitPgo => "init+pgo",
            Stages::InitBa => "init+ba",
            Stages::Full => "init+pgo+ba",
        }
    }

    /// Applies the stage switches to a pipeline configuration.
    pub fn configure(self, config: &mut PipelineConfig) {
        let (pgo, ba) = match self {
            Stages::InitOnly => (false, false),
            Stages::InitPgo => (true, false),
            Stages::InitBa => (false, true),
            Stages::Full => (true, true),
        };
        config.run_pgo = pgo;
        config.run_ba = ba;
    }
}

/// Ceilings a case's full-pipeline run must stay under, plus the scale
/// band it must hold. Frozen from baseline measurements with ≥ 2×
/// headroom.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricBounds {
    /// Ceiling on the mean 2D trajectory error, meters.
    pub ate_mean_max: f64,
    /// Ceiling on its standard deviation, meters.
    pub ate_sd_max: f64,
    /// Scale-factor band the corrected trace must hold.
    pub scale_band: (f64, f64),
    /// Minimum fraction of post-registration keyframes inside the band.
    pub min_in_band_fraction: f64,
}

/// A pinned scenario with the bounds its run must meet.
#[derive(Clone, Debug)]
pub struct RegressionCase {
    pub name: String,
    pub spec: ScenarioSpec,
    pub bounds: MetricBounds,
}

/// Metrics of one pipeline variant on one scenario.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VariantMetrics {
    /// Mean 2D trajectory error against ground truth, meters.
    pub ate_mean: f64,
    /// Population standard deviation of the per-keyframe error, meters.
    pub ate_sd: f64,
    /// Keyframe at which the one-shot registration fired.
    pub registration_keyframe: Option<u64>,
    /// Fraction of post-registration scale-trace entries inside the band.
    pub in_band_fraction: f64,
    /// First post-registration keyframe whose trace leaves the band.
    pub first_band_exit: Option<u64>,
    /// Wall-clock runtime of the variant, seconds.
    pub seconds: f64,
}

/// Runs one scenario through the pipeline with the given stages enabled
/// and measures it against ground truth.
///
/// # Errors
///
/// Simulation or pipeline failures, or a scenario too short to compare.
pub fn run_stages(
    spec: &ScenarioSpec,
    base: &PipelineConfig,
    stages: Stages,
    band: (f64, f64),
) -> Result<VariantMetrics, RegressionError> {
    let start = Instant::now();
    let sim = generate(spec)?;
    let mut config = base.clone();
    stages.configure(&mut config);
    let mut pipeline = Pipeline::new(config)?;
    let mut scene = Scene::new(spec.camera);
    let mut registration_keyframe = None;
    for input in sim.drifted_stream() {
        let event = pipeline.ingest_keyframe(&mut scene, input)?;
        if matches!(event.kind, EventKind::Initialized { .. }) {
            registration_keyframe = Some(event.keyframe_id);
        }
    }
    let estimate = scene.keyframe_positions();
    let truth = sim.truth.keyframe_positions();
    let (ate_mean, ate_sd) = evaluate_ate2d(&estimate, &truth)?;
    let trace = scale_factor_trace(&estimate, &truth);
    let after: Vec<(u64, f64)> = match registration_keyframe {
        Some(at) => trace.into_iter().filter(|&(id, _)| id > at).collect(),
        None => trace,
    };
    if after.is_empty() {
        return Err(RegressionError::Degenerate(
            "no scale-trace entries after registration".to_string(),
        ));
    }
    let inside = after
        .iter()
        .filter(|&&(_, f)| f >= band.0 && f <= band.1)
        .count();
    let first_band_exit = after
        .iter()
        .find(|&&(_, f)| f < band.0 || f > band.1)
        .map(|&(id, _)| id);
    Ok(VariantMetrics {
        ate_mean,
        ate_sd,
        registration_keyframe,
        in_band_fraction: inside as f64 / after.len() as f64,
        first_band_exit,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Result of one regression case: per-variant metrics and the bound
/// checks on the full pipeline.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    /// Metrics keyed by stage label.
    pub variants: BTreeMap<String, VariantMetrics>,
    /// Human-readable bound violations; empty when the case passes.
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Runs a case under registration-only, registration+pose-graph and the
/// full pipeline, and checks the full pipeline against the case bounds.
///
/// # Errors
///
/// Propagates scenario and pipeline failures; bound violations are
/// reported in the returned [`CaseReport`], not as errors.
pub fn run_regression(case: &RegressionCase) -> Result<CaseReport, RegressionError> {
    let config = PipelineConfig::default();
    let mut variants = BTreeMap::new();
    for stages in [Stages::InitOnly, Stages::InitPgo, Stages::Full] {
        let metrics = run_stages(&case.spec, &config, stages, case.bounds.scale_band)?;
        variants.insert(stages.label().to_string(), metrics);
    }
    let ours = variants[Stages::Full.label()];
    let mut failures = Vec::new();
    if ours.ate_mean > case.bounds.ate_mean_max {
        failures.push(format!(
            "ATE mean {:.3} m exceeds bound {:.3} m",
            ours.ate_mean, case.bounds.ate_mean_max
        ));
    }
    if ours.ate_sd > case.bounds.ate_sd_max {
        failures.push(format!(
            "ATE SD {:.3} m exceeds bound {:.3} m",
            ours.ate_sd, case.bounds.ate_sd_max
        ));
    }
    if ours.in_band_fraction < case.bounds.min_in_band_fraction {
        failures.push(format!(
            "only {:.1}% of keyframes hold the scale band [{}, {}], need {:.1}%",
            100.0 * ours.in_band_fraction,
            case.bounds.scale_band.0,
            case.bounds.scale_band.1,
            100.0 * case.bounds.min_in_band_fraction
        ));
    }
    Ok(CaseReport {
        name: case.name.clone(),
        passed: failures.is_empty(),
        variants,
        failures,
    })
}

/// The canned cases run by the regression suite. Bounds were frozen
/// from baseline medians with ≥ 2× headroom.
pub fn canned_cases() -> Vec<RegressionCase> {
    use crate::sim::{DriftProfile, TrajectoryShape};
    vec![
        // Sanity floor: no drift, no noise. The only residual error is
        // the finite-sample registration fit (baseline ≈ 0.05 m).
        RegressionCase {
            name: "straight-no-drift".to_string(),
            spec: ScenarioSpec {
                shape: TrajectoryShape::Straight,
                keyframes: 60,
                spacing: 1.0,
                drift: DriftProfile::None,
                points_per_keyframe: 12,
                seed: 5,
                ..ScenarioSpec::default()
            },
            bounds: MetricBounds {
                ate_mean_max: 0.5,
                ate_sd_max: 0.5,
                scale_band: (0.9, 1.1),
                min_in_band_fraction: 0.95,
            },
        },
        // The headline scenario: 400 m of city grid with the scale
        // drifting up to 2× and noisy anchors every 10 keyframes
        // (baseline ATE ≈ 0.4 m, band fraction ≈ 1.0).
        RegressionCase {
            name: "city-grid-ramp-2x".to_string(),
            spec: drift_scenario(10, 11),
            bounds: MetricBounds {
                ate_mean_max: 2.0,
                ate_sd_max: 2.0,
                scale_band: (0.9, 1.1),
                min_in_band_fraction: 0.95,
            },
        },
    ]
}

/// The canned drifting scenario parameterized by anchor interval and
/// seed: a 200-keyframe city grid at 2 m spacing (≈ 400 m path) whose
/// scale ramps to 2×, with 1 px observation noise and 1 m anchor noise.
pub fn drift_scenario(anchor_interval: usize, seed: u64) -> ScenarioSpec {
    use crate::sim::{DriftProfile, TrajectoryShape};
    ScenarioSpec {
        shape: TrajectoryShape::CityGrid { block: 10 },
        keyframes: 200,
        spacing: 2.0,
        drift: DriftProfile::RampTo { final_factor: 2.0 },
        points_per_keyframe: 16,
        observation_noise: 1.0,
        anchor_interval,
        anchor_noise: 1.0,
        offset_map_frame: true,
        seed,
        ..ScenarioSpec::default()
    }
}

/// Median of a non-empty sample (mean of the middle pair when even).
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median ATE per stage combination and anchor interval, over a set of
/// seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AblationStudy {
    pub intervals: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `median_ate[stage label][interval]`, meters.
    pub median_ate: BTreeMap<String, BTreeMap<usize, f64>>,
}

/// Runs every (stage, interval, seed) combination of the canned
/// drifting scenario and aggregates median ATEs. Runs are independent
/// and execute in parallel.
///
/// # Errors
///
/// Propagates the first scenario or pipeline failure.
pub fn run_ablation(
    base: &PipelineConfig,
    intervals: &[usize],
    seeds: &[u64],
    stages: &[Stages],
) -> Result<AblationStudy, RegressionError> {
    let mut tasks = Vec::new();
    for &stage in stages {
        for &interval in intervals {
            for &seed in seeds {
                tasks.push((stage, interval, seed));
            }
        }
    }
    let results = run_parallel(&tasks, |&(stage, interval, seed)| {
        run_stages(
            &drift_scenario(interval, seed),
            base,
            stage,
            (0.9, 1.1),
        )
    })?;

    let mut samples: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for ((stage, interval, _), metrics) in tasks.iter().zip(&results) {
        samples
            .entry(stage.label().to_string())
            .or_default()
            .entry(*interval)
            .or_default()
            .push(metrics.ate_mean);
    }
    let median_ate = samples
        .into_iter()
        .map(|(label, by_interval)| {
            let medians = by_interval
                .into_iter()
                .map(|(interval, mut ates)| (interval, median(&mut ates)))
                .collect();
            (label, medians)
        })
        .collect();
    Ok(AblationStudy {
        intervals: intervals.to_vec(),
        seeds: seeds.to_vec(),
        median_ate,
    })
}

/// Maps `work` over `tasks` on all available cores, preserving order.
fn run_parallel<T: Sync, R: Send>(
    tasks: &[T],
    work: impl Fn(&T) -> Result<R, RegressionError> + Sync,
) -> Result<Vec<R>, RegressionError> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, RegressionError>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= tasks.len() {
                    break;
                }
                let result = work(&tasks[index]);
                *slots[index].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every task index was claimed by a worker")
        })
        .collect()
}

/// Everything the suite produces, serialized as the JSON summary.
#[derive(Clone, Debug, Serialize)]
pub struct RegressionSummary {
    pub schema: String,
    pub cases: Vec<CaseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationStudy>,
}

impl RegressionSummary {
    pub fn new(cases: Vec<CaseReport>, ablation: Option<AblationStudy>) -> Self {
        RegressionSummary {
            schema: REGRESSION_SCHEMA.to_string(),
            cases,
            ablation,
        }
    }

    /// Machine-readable summary.
    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("summary serialization is infallible");
        text.push('\n');
        text
    }

    /// Human-readable report.
    pub fn to_markdown(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "# Regression report");
        let _ = writeln!(out);
        for case in &self.cases {
            let verdict = if case.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "## {} — {verdict}", case.name);
            let _ = writeln!(out);
            let _ = writeln!(out, "| stages | ATE mean (m) | ATE SD (m) | scale in band |");
            let _ = writeln!(out, "|---|---|---|---|");
            for (label, metrics) in &case.variants {
                let _ = writeln!(
                    out,
                    "| {label} | {:.3} | {:.3} | {:.1}% |",
                    metrics.ate_mean,
                    metrics.ate_sd,
                    100.0 * metrics.in_band_fraction
                );
            }
            for failure in &case.failures {
                let _ = writeln!(out, "- **bound violated:** {failure}");
            }
            let _ = writeln!(out);
        }
        if let Some(ablation) = &self.ablation {
            let _ = writeln!(
                out,
                "## Stage ablation (median ATE in meters over {} seeds)",
                ablation.seeds.len()
            );
            let _ = writeln!(out);
            let mut header = String::from("| stages |");
            let mut rule = String::from("|---|");
            for interval in &ablation.intervals {
                let _ = write!(header, " interval {interval} |");
                rule.push_str("---|");
            }
            let _ = writeln!(out, "{header}");
            let _ = writeln!(out, "{rule}");
            for (label, by_interval) in &ablation.median_ate {
                let mut row = format!("| {label} |");
                for interval in &ablation.intervals {
                    match by_interval.get(interval) {
                        Some(ate) => {
                            let _ = write!(row, " {ate:.3} |");
                        }
                        None => row.push_str(" — |"),
                    }
                }
                let _ = writeln!(out, "{row}");
            }
        }
        out
    }
}

/// Generates the configuration reference: every key of both config
/// profiles with its default, plus the fixed constants that are not
/// configurable. Defaults are read from the live `Default`
/// implementations so the document cannot go stale.
pub fn config_reference() -> String {
    use std::fmt::Write as _;
    let p = PipelineConfig::default();
    let s = ScenarioSpec::default();
    let mut out = String::new();
    let _ = writeln!(out, "# Configuration reference");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Both profiles use flat `key = value` files; `#` starts a comment."
    );
    let _ = writeln!(out, "Unknown keys are rejected.");
    let _ = writeln!(out);
    let _ = writeln!(out, "## Correction tunables (`correct --config`)");
    let _ = writeln!(out);
    let _ = writeln!(out, "| key | default | meaning |");
    let _ = writeln!(out, "|---|---|---|");
    let pipeline_rows: Vec<(&str, String, &str)> = vec![
        ("init_index", p.init_index.to_string(),
         "correspondence count that triggers the one-shot registration (registration fires on the (init_index+1)-th)"),
        ("window", p.window.to_string(),
         "newest correspondences spanning each pose-graph window"),
        ("covisibility_min_shared", p.covisibility_min_shared.to_string(),
         "shared observed points required for a covisibility edge"),
        ("weight_keyframe_edges", p.weights.keyframe_edges.to_string(),
         "pose-graph weight of keyframe–keyframe relative edges"),
        ("weight_geo_edges", p.weights.geo_edges.to_string(),
         "pose-graph weight of keyframe–geo relative edges"),
        ("weight_anchors", p.weights.anchors.to_string(),
         "pose-graph weight of geo-anchor position edges"),
        ("solver_max_iterations", p.solver.max_iterations.to_string(),
         "Levenberg–Marquardt iteration cap per stage"),
        ("solver_gradient_tolerance", p.solver.gradient_tolerance.to_string(),
         "convergence threshold on the gradient infinity norm"),
        ("solver_cost_tolerance", p.solver.cost_tolerance.to_string(),
         "convergence threshold on the relative cost decrease"),
        ("ransac_iterations", p.ransac.iterations.to_string(),
         "minimal samples drawn by the registration consensus loop"),
        ("ransac_threshold", p.ransac.threshold.to_string(),
         "inlier threshold on the registration residual, meters"),
        ("ransac_seed", p.ransac.seed.to_string(),
         "seed of the registration sampling generator"),
        ("ba_huber_pixels", p.ba.huber_pixels.to_string(),
         "Huber threshold on the reprojection residual norm, pixels"),
        ("ba_anchor_weight", p.ba.anchor_weight.to_string(),
         "weight of the squared geo-anchor penalty in bundle adjustment"),
        ("ba_full_history_anchors", p.ba.full_history_anchors.to_string(),
         "anchor on every historical correspondence instead of the window"),
        ("height_offset", p.height_offset.to_string(),
         "extra height added to the registration alignment, meters"),
        ("run_pgo", p.run_pgo.to_string(),
         "enable the pose-graph stage of each correction round"),
        ("run_ba", p.run_ba.to_string(),
         "enable the bundle-adjustment stage of each correction round"),
    ];
    for (key, default, meaning) in &pipeline_rows {
        let _ = writeln!(out, "| `{key}` | `{default}` | {meaning} |");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "## Scenario keys (`simulate --scenario`)");
    let _ = writeln!(out);
    let _ = writeln!(out, "| key | default | meaning |");
    let _ = writeln!(out, "|---|---|---|");
    let scenario_rows: Vec<(&str, String, &str)> = vec![
        ("shape", "straight".to_string(),
         "trajectory shape: `straight`, `arc` or `city-grid`"),
        ("arc_total_turn", "—".to_string(),
         "total heading sweep in radians (required iff shape = arc)"),
        ("grid_block", "—".to_string(),
         "keyframes per city block (required iff shape = city-grid)"),
        ("keyframes", s.keyframes.to_string(), "number of keyframes"),
        ("spacing", s.spacing.to_string(),
         "distance between consecutive keyframes, meters"),
        ("drift", "none".to_string(),
         "scale-drift profile: `none`, `constant`, `ramp` or `per-step`"),
        ("drift_multiplier", "—".to_string(),
         "per-step scale multiplier (required iff drift = constant)"),
        ("drift_final_factor", "—".to_string(),
         "cumulative scale reached at the last keyframe (required iff drift = ramp)"),
        ("drift_steps", "—".to_string(),
         "comma-separated per-step multipliers (required iff drift = per-step)"),
        ("points_per_keyframe", s.points_per_keyframe.to_string(),
         "map points sampled around each keyframe"),
        ("observation_noise", s.observation_noise.to_string(),
         "pixel noise σ added to every observation"),
        ("anchor_interval", s.anchor_interval.to_string(),
         "a geo-tagged image arrives every this many keyframes"),
        ("anchor_noise", s.anchor_noise.to_string(),
         "position noise σ of the geo-tags, meters"),
        ("motion_rot_noise", s.motion_rot_noise.to_string(),
         "per-step rotational odometry noise σ, radians"),
        ("motion_trans_noise", s.motion_trans_noise.to_string(),
         "per-step translational odometry noise σ, meters"),
        ("offset_map_frame", s.offset_map_frame.to_string(),
         "place the drifted map in a random offset frame, as a real reconstruction would be"),
        ("camera_fx", s.camera.fx.to_string(), "focal length x, pixels"),
        ("camera_fy", s.camera.fy.to_string(), "focal length y, pixels"),
        ("camera_cx", s.camera.cx.to_string(), "principal point x, pixels"),
        ("camera_cy", s.camera.cy.to_string(), "principal point y, pixels"),
        ("seed", s.seed.to_string(), "seed driving every random draw"),
    ];
    for (key, default, meaning) in &scenario_rows {
        let _ = writeln!(out, "| `{key}` | `{default}` | {meaning} |");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "## Fixed constants");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Not configurable; listed here because they shape the defaults above."
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| constant | value | meaning |");
    let _ = writeln!(out, "|---|---|---|");
    let solver = crate::solver::SolverOptions::default();
    let fixed_rows: Vec<(&str, String, &str)> = vec![
        ("MIN_MATCHES", crate::pnp::MIN_MATCHES.to_string(),
         "minimum 3D–2D matches to attempt localizing a geo image"),
        ("INLIER_THRESHOLD_SQ_PIXELS", crate::pnp::INLIER_THRESHOLD_SQ_PIXELS.to_string(),
         "squared-pixel gate on localization inliers (χ², 2 dof, 95%)"),
        ("MIN_INLIER_RATIO", crate::pnp::MIN_INLIER_RATIO.to_string(),
         "minimum inlier fraction for accepting a localization"),
        ("MIN_DEPTH", crate::ba::MIN_DEPTH.to_string(),
         "points closer than this to the image plane cannot be projected"),
        ("SCALE_TRACE_MEDIAN_WINDOW", crate::pipeline::SCALE_TRACE_MEDIAN_WINDOW.to_string(),
         "rolling-median width smoothing the scale-factor trace"),
        ("MIN_TRACE_STEP", crate::pipeline::MIN_TRACE_STEP.to_string(),
         "ground-truth steps shorter than this are skipped by the trace"),
        ("solver initial damping", solver.initial_damping.to_string(),
         "initial Levenberg–Marquardt damping"),
        ("solver damping range", format!("{}..{}", solver.damping_min, solver.damping_max),
         "damping clamp"),
        ("solver dense threshold", solver.dense_threshold.to_string(),
         "tangent dimension at which the normal equations switch to the block-sparse path"),
        ("solver fd step", solver.fd_step.to_string(),
         "central-difference step for blocks without analytic Jacobians"),
    ];
    for (key, value, meaning) in &fixed_rows {
        let _ = writeln!(out, "| {key} | `{value}` | {meaning} |");
    }
    out
}
