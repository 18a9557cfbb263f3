//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment (full-line or
//! trailing); blank lines are ignored. Keys are lower_snake_case.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults. Two profiles are read from this format:
//! scenario descriptions ([`scenario_from_config`]) and correction
//! tunables ([`pipeline_from_config`]); each has a writer producing a
//! canonical file that parses back to an equal value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::IoError;
use crate::ba::{BaOptions, Camera};
use crate::init::RansacOptions;
use crate::pgo::PgoWeights;
use crate::pipeline::PipelineConfig;
use crate::sim::{DriftProfile, ScenarioSpec, TrajectoryShape};
use crate::solver::SolverOptions;

/// One parsed assignment, with the location of its value for
/// diagnostics.
#[derive(Clone, Debug)]
struct Entry {
    line: usize,
    column: usize,
    value: String,
}

/// A parsed configuration file: raw string values keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

impl Config {
    /// Parses `key = value` text.
    ///
    /// # Errors
    ///
    /// [`IoError::Parse`] for lines without `=`, empty keys or values,
    /// and duplicate keys.
    pub fn parse(text: &str) -> Result<Config, IoError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (index, raw_line) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            if line.trim().is_empty() {
                continue;
            }
            let eq = line.find('=').ok_or_else(|| {
                IoError::parse(line_no, 1, "expected `key = value`".to_string())
            })?;
            let key = line[..eq].trim();
            if key.is_empty() {
                return Err(IoError::parse(line_no, 1, "empty key".to_string()));
            }
            if !key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return Err(IoError::parse(
                    line_no,
                    1,
                    format!("key `{key}` must be lower_snake_case"),
                ));
            }
            let value_raw = &line[eq + 1..];
            let value = value_raw.trim();
            if value.is_empty() {
                return Err(IoError::parse(
                    line_no,
                    eq + 2,
                    format!("key `{key}` has no value"),
                ));
            }
            let column = eq + 2 + (value_raw.len() - value_raw.trim_start().len());
            if let Some(previous) = entries.get(key) {
                return Err(IoError::parse(
                    line_no,
                    1,
                    format!("duplicate key `{key}`, first set on line {}", previous.line),
                ));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    line: line_no,
                    column,
                    value: value.to_string(),
                },
            );
        }
        Ok(Config { entries })
    }

    /// Rejects any key outside `known`, pointing at its line.
    pub fn expect_keys(&self, known: &[&str]) -> Result<(), IoError> {
        for (key, entry) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(IoError::parse(
                    entry.line,
                    1,
                    format!("unknown key `{key}`"),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, IoError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(entry) => entry.value.parse::<T>().map(Some).map_err(|_| {
                IoError::parse(
                    entry.line,
                    entry.column,
                    format!("key `{key}`: expected {what}, got `{}`", entry.value),
                )
            }),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, IoError> {
        let value = self.typed::<f64>(key, "a number")?.unwrap_or(default);
        if !value.is_finite() {
            let entry = &self.entries[key];
            return Err(IoError::parse(
                entry.line,
                entry.column,
                format!("key `{key}`: value must be finite"),
            ));
        }
        Ok(value)
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, IoError> {
        Ok(self.typed(key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, IoError> {
        Ok(self.typed(key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, IoError> {
        Ok(self.typed(key, "`true` or `false`")?.unwrap_or(default))
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Error constructor for semantic complaints about a present key.
    fn complain(&self, key: &str, message: impl Into<String>) -> IoError {
        match self.entries.get(key) {
            Some(entry) => IoError::parse(entry.line, entry.column, message),
            None => IoError::Invalid(message.into()),
        }
    }
}

/// Every key understood by [`scenario_from_config`].
pub const SCENARIO_KEYS: &[&str] = &[
    "shape",
    "arc_total_turn",
    "grid_block",
    "keyframes",
    "spacing",
    "drift",
    "drift_multiplier",
    "drift_final_factor",
    "drift_steps",
    "points_per_keyframe",
    "observation_noise",
    "anchor_interval",
    "anchor_noise",
    "motion_rot_noise",
    "motion_trans_noise",
    "offset_map_frame",
    "camera_fx",
    "camera_fy",
    "camera_cx",
    "camera_cy",
    "seed",
];

/// Requires `key` when `condition` holds and rejects it otherwise, so a
/// parameter can never silently apply to the wrong variant.
fn variant_key<T>(
    config: &Config,
    key: &str,
    active: bool,
    owner: &str,
    read: impl FnOnce() -> Result<T, IoError>,
) -> Result<Option<T>, IoError> {
    match (active, config.contains(key)) {
        (true, true) => Ok(Some(read()?)),
        (true, false) => Err(IoError::Invalid(format!("{owner} requires key `{key}`"))),
        (false, true) => Err(config.complain(key, format!("key `{key}` requires {owner}"))),
        (false, false) => Ok(None),
    }
}

/// Builds a scenario description from parsed configuration, applying
/// the documented defaults for absent keys.
///
/// # Errors
///
/// [`IoError::Parse`] for unknown keys and malformed values,
/// [`IoError::Invalid`] for missing variant parameters.
pub fn scenario_from_config(config: &Config) -> Result<ScenarioSpec, IoError> {
    config.expect_keys(SCENARIO_KEYS)?;
    let defaults = ScenarioSpec::default();

    let shape_name = config.str("shape").unwrap_or("straight");
    let shape = match shape_name {
        "straight" => TrajectoryShape::Straight,
        "arc" => TrajectoryShape::Arc {
            total_turn: variant_key(
                config,
                "arc_total_turn",
                true,
                "shape = arc",
                || config.f64("arc_total_turn", 0.0),
            )?
            .expect("active variant always yields a value"),
        },
        "city-grid" => TrajectoryShape::CityGrid {
            block: variant_key(config, "grid_block", true, "shape = city-grid", || {
                config.usize("grid_block", 0)
            })?
            .expect("active variant always yields a value"),
        },
        other => {
            return Err(config.complain(
                "shape",
                format!("unknown shape `{other}` (expected straight, arc or city-grid)"),
            ))
        }
    };
    if !matches!(shape, TrajectoryShape::Arc { .. }) && config.contains("arc_total_turn") {
        return Err(config.complain("arc_total_turn", "key `arc_total_turn` requires shape = arc"));
    }
    if !matches!(shape, TrajectoryShape::CityGrid { .. }) && config.contains("grid_block") {
        return Err(config.complain("grid_block", "key `grid_block` requires shape = city-grid"));
    }

    let drift_name = config.str("drift").unwrap_or("none");
    let constant = variant_key(
        config,
        "drift_multiplier",
        drift_name == "constant",
        "drift = constant",
        || config.f64("drift_multiplier", 0.0),
    )?;
    let ramp = variant_key(
        config,
        "drift_final_factor",
        drift_name == "ramp",
        "drift = ramp",
        || config.f64("drift_final_factor", 0.0),
    )?;
    let steps = variant_key(
        config,
        "drift_steps",
        drift_name == "per-step",
        "drift = per-step",
        || {
            let raw = config.str("drift_steps").expect("checked present");
            raw.split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| {
                        config.complain(
                            "drift_steps",
                            format!("expected comma-separated numbers, got `{}`", tok.trim()),
                        )
                    })
                })
                .collect::<Result<Vec<f64>, IoError>>()
        },
    )?;
    let drift = match drift_name {
        "none" => DriftProfile::None,
        "constant" => DriftProfile::Constant {
            multiplier: constant.expect("active variant always yields a value"),
        },
        "ramp" => DriftProfile::RampTo {
            final_factor: ramp.expect("active variant always yields a value"),
        },
        "per-step" => DriftProfile::PerStep(steps.expect("active variant always yields a value")),
        other => {
            return Err(config.complain(
                "drift",
                format!("unknown drift `{other}` (expected none, constant, ramp or per-step)"),
            ))
        }
    };

    for key in ["camera_fx", "camera_fy"] {
        if config.contains(key) && config.f64(key, 0.0)? <= 0.0 {
            return Err(config.complain(key, format!("key `{key}` must be positive")));
        }
    }

    Ok(ScenarioSpec {
        shape,
        keyframes: config.usize("keyframes", defaults.keyframes)?,
        spacing: config.f64("spacing", defaults.spacing)?,
        drift,
        points_per_keyframe: config
            .usize("points_per_keyframe", defaults.points_per_keyframe)?,
        observation_noise: config.f64("observation_noise", defaults.observation_noise)?,
        anchor_interval: config.usize("anchor_interval", defaults.anchor_interval)?,
        anchor_noise: config.f64("anchor_noise", defaults.anchor_noise)?,
        motion_rot_noise: config.f64("motion_rot_noise", defaults.motion_rot_noise)?,
        motion_trans_noise: config.f64("motion_trans_noise", defaults.motion_trans_noise)?,
        offset_map_frame: config.bool("offset_map_frame", defaults.offset_map_frame)?,
        camera: Camera::new(
            config.f64("camera_fx", defaults.camera.fx)?,
            config.f64("camera_fy", defaults.camera.fy)?,
            config.f64("camera_cx", defaults.camera.cx)?,
            config.f64("camera_cy", defaults.camera.cy)?,
        ),
        seed: config.u64("seed", defaults.seed)?,
    })
}

/// Writes the canonical scenario file for a spec;
/// [`scenario_from_config`] parses it back to an equal value.
pub fn scenario_to_config(spec: &ScenarioSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Scenario description");
    match &spec.shape {
        TrajectoryShape::Straight => {
            let _ = writeln!(out, "shape = straight");
        }
        TrajectoryShape::Arc { total_turn } => {
            let _ = writeln!(out, "shape = arc");
            let _ = writeln!(out, "arc_total_turn = {total_turn}");
        }
        TrajectoryShape::CityGrid { block } => {
            let _ = writeln!(out, "shape = city-grid");
            let _ = writeln!(out, "grid_block = {block}");
        }
    }
    let _ = writeln!(out, "keyframes = {}", spec.keyframes);
    let _ = writeln!(out, "spacing = {}", spec.spacing);
    match &spec.drift {
        DriftProfile::None => {
            let _ = writeln!(out, "drift = none");
        }
        DriftProfile::Constant { multiplier } => {
            let _ = writeln!(out, "drift = constant");
            let _ = writeln!(out, "drift_multiplier = {multiplier}");
        }
        DriftProfile::RampTo { final_factor } => {
            let _ = writeln!(out, "drift = ramp");
            let _ = writeln!(out, "drift_final_factor = {final_factor}");
        }
        DriftProfile::PerStep(steps) => {
            let _ = writeln!(out, "drift = per-step");
            let rendered: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "drift_steps = {}", rendered.join(","));
        }
    }
    let _ = writeln!(out, "points_per_keyframe = {}", spec.points_per_keyframe);
    let _ = writeln!(out, "observation_noise = {}", spec.observation_noise);
    let _ = writeln!(out, "anchor_interval = {}", spec.anchor_interval);
    let _ = writeln!(out, "anchor_noise = {}", spec.anchor_noise);
    let _ = writeln!(out, "motion_rot_noise = {}", spec.motion_rot_noise);
    let _ = writeln!(out, "motion_trans_noise = {}", spec.motion_trans_noise);
    let _ = writeln!(out, "offset_map_frame = {}", spec.offset_map_frame);
    let _ = writeln!(out, "camera_fx = {}", spec.camera.fx);
    let _ = writeln!(out, "camera_fy = {}", spec.camera.fy);
    let _ = writeln!(out, "camera_cx = {}", spec.camera.cx);
    let _ = writeln!(out, "camera_cy = {}", spec.camera.cy);
    let _ = writeln!(out, "seed = {}", spec.seed);
    out
}

/// Every key understood by [`pipeline_from_config`].
pub const PIPELINE_KEYS: &[&str] = &[
    "init_index",
    "window",
    "covisibility_min_shared",
    "weight_keyframe_edges",
    "weight_geo_edges",
    "weight_anchors",
    "solver_max_iterations",
    "solver_gradient_tolerance",
    "solver_cost_tolerance",
    "ransac_iterations",
    "ransac_threshold",
    "ransac_seed",
    "ba_huber_pixels",
    "ba_anchor_weight",
    "ba_full_history_anchors",
    "height_offset",
    "run_pgo",
    "run_ba",
];

/// Builds correction tunables from parsed configuration; absent keys
/// keep their defaults.
///
/// # Errors
///
/// [`IoError::Parse`] for unknown keys and malformed values.
pub fn pipeline_from_config(config: &Config) -> Result<PipelineConfig, IoError> {
    config.expect_keys(PIPELINE_KEYS)?;
    let defaults = PipelineConfig::default();
    Ok(PipelineConfig {
        init_index: config.usize("init_index", defaults.init_index)?,
        window: config.usize("window", defaults.window)?,
        covisibility_min_shared: config
            .usize("covisibility_min_shared", defaults.covisibility_min_shared)?,
        weights: PgoWeights {
            keyframe_edges: config
                .f64("weight_keyframe_edges", defaults.weights.keyframe_edges)?,
            geo_edges: config.f64("weight_geo_edges", defaults.weights.geo_edges)?,
            anchors: config.f64("weight_anchors", defaults.weights.anchors)?,
        },
        solver: SolverOptions {
            max_iterations: config
                .usize("solver_max_iterations", defaults.solver.max_iterations)?,
            gradient_tolerance: config.f64(
                "solver_gradient_tolerance",
                defaults.solver.gradient_tolerance,
            )?,
            cost_tolerance: config
                .f64("solver_cost_tolerance", defaults.solver.cost_tolerance)?,
            ..defaults.solver
        },
        ransac: RansacOptions {
            iterations: config.usize("ransac_iterations", defaults.ransac.iterations)?,
            threshold: config.f64("ransac_threshold", defaults.ransac.threshold)?,
            seed: config.u64("ransac_seed", defaults.ransac.seed)?,
        },
        ba: BaOptions {
            huber_pixels: config.f64("ba_huber_pixels", defaults.ba.huber_pixels)?,
            anchor_weight: config.f64("ba_anchor_weight", defaults.ba.anchor_weight)?,
            full_history_anchors: config
                .bool("ba_full_history_anchors", defaults.ba.full_history_anchors)?,
        },
        height_offset: config.f64("height_offset", defaults.height_offset)?,
        run_pgo: config.bool("run_pgo", defaults.run_pgo)?,
        run_ba: config.bool("run_ba", defaults.run_ba)?,
    })
}

/// Writes the canonical tunables file for a configuration;
/// [`pipeline_from_config`] parses it back to an equal value.
pub fn pipeline_to_config(config: &PipelineConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Correction tunables");
    let _ = writeln!(out, "init_index = {}", config.init_index);
    let _ = writeln!(out, "window = {}", config.window);
    let _ = writeln!(
        out,
        "covisibility_min_shared = {}",
        config.covisibility_min_shared
    );
    let _ = writeln!(out, "weight_keyframe_edges = {}", config.weights.keyframe_edges);
    let _ = writeln!(out, "weight_geo_edges = {}", config.weights.geo_edges);
    let _ = writeln!(out, "weight_anchors = {}", config.weights.anchors);
    let _ = writeln!(out, "solver_max_iterations = {}", config.solver.max_iterations);
    let _ = writeln!(
        out,
        "solver_gradient_tolerance = {}",
        config.solver.gradient_tolerance
    );
    let _ = writeln!(out, "solver_cost_tolerance = {}", config.solver.cost_tolerance);
    let _ = writeln!(out, "ransac_iterations = {}", config.ransac.iterations);
    let _ = writeln!(out, "ransac_threshold = {}", config.ransac.threshold);
    let _ = writeln!(out, "ransac_seed = {}", config.ransac.seed);
    let _ = writeln!(out, "ba_huber_pixels = {}", config.ba.huber_pixels);
    let _ = writeln!(out, "ba_anchor_weight = {}", config.ba.anchor_weight);
    let _ = writeln!(
        out,
        "ba_full_history_anchors = {}",
        config.ba.full_history_anchors
    );
    let _ = writeln!(out, "height_offset = {}", config.height_offset);
    let _ = writeln!(out, "run_pgo = {}", config.run_pgo);
    let _ = writeln!(out, "run_ba = {}", config.run_ba);
    out
}

/// Reads and parses a configuration file.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure, otherwise as
/// [`Config::parse`].
pub fn load_config(path: &Path) -> Result<Config, IoError> {
    Config::parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_comments_and_blanks_parse() {
        let config = Config::parse(
            "# header\nkeyframes = 120\n\nspacing=2.5 # trailing comment\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(config.usize("keyframes", 0).unwrap(), 120);
        assert_eq!(config.f64("spacing", 0.0).unwrap(), 2.5);
        assert_eq!(config.u64("seed", 0).unwrap(), 7);
        assert_eq!(config.usize("absent", 42).unwrap(), 42);
    }

    #[test]
    fn malformed_lines_are_located() {
        assert!(matches!(
            Config::parse("keyframes 120\n"),
            Err(IoError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\n = 2\n"),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\nBadKey = 2\n"),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\na = 2\n"),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("a =   # comment eats the value\n"),
            Err(IoError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn typed_getters_locate_bad_values() {
        let config = Config::parse("keyframes = soon\n").unwrap();
        match config.usize("keyframes", 0).unwrap_err() {
            IoError::Parse { line: 1, column, message } => {
                assert_eq!(column, 13);
                assert!(message.contains("keyframes"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scenario_round_trips_through_its_canonical_file() {
        let specs = [
            ScenarioSpec::default(),
            ScenarioSpec {
                shape: TrajectoryShape::Arc { total_turn: 1.25 },
                keyframes: 200,
                spacing: 2.0,
                drift: DriftProfile::RampTo { final_factor: 2.0 },
                points_per_keyframe: 16,
                observation_noise: 1.0,
                anchor_interval: 10,
                anchor_noise: 1.0,
                motion_rot_noise: 0.001,
                motion_trans_noise: 0.02,
                offset_map_frame: false,
                camera: Camera::new(718.0, 718.0, 607.0, 185.0),
                seed: 99,
            },
            ScenarioSpec {
                shape: TrajectoryShape::CityGrid { block: 12 },
                drift: DriftProfile::Constant { multiplier: 1.003 },
                ..ScenarioSpec::default()
            },
            ScenarioSpec {
                drift: DriftProfile::PerStep(vec![1.0, 1.01, 0.997]),
                ..ScenarioSpec::default()
            },
        ];
        for spec in specs {
            let text = scenario_to_config(&spec);
            let parsed = scenario_from_config(&Config::parse(&text).unwrap()).unwrap();
            assert_eq!(parsed, spec);
        }
    }

    #[test]
    fn pipeline_round_trips_through_its_canonical_file() {
        let mut config = PipelineConfig::default();
        config.window = 4;
        config.weights.anchors = 2.5;
        config.ransac.threshold = 3.0;
        config.ba.huber_pixels = 1.5;
        config.run_ba = false;
        config.height_offset = -1.25;
        let text = pipeline_to_config(&config);
        let parsed = pipeline_from_config(&Config::parse(&text).unwrap()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn empty_config_yields_all_defaults() {
        let config = Config::parse("").unwrap();
        assert_eq!(
            scenario_from_config(&config).unwrap(),
            ScenarioSpec::default()
        );
        assert_eq!(
            pipeline_from_config(&config).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let config = Config::parse("keyframe_count = 10\n").unwrap();
        match scenario_from_config(&config).unwrap_err() {
            IoError::Parse { line: 1, message, .. } => {
                assert!(message.contains("keyframe_count"), "{message}")
            }
            other => panic!("unexpected error {other:?}"),
        }
        let config = Config::parse("window = 3\nspacing = 1.0\n").unwrap();
        assert!(pipeline_from_config(&config).is_err());
    }

    #[test]
    fn variant_parameters_are_cross_checked() {
        // Parameter without its variant.
        let config = Config::parse("shape = straight\narc_total_turn = 1.0\n").unwrap();
        assert!(scenario_from_config(&config).is_err());
        let config = Config::parse("drift = none\ndrift_final_factor = 2.0\n").unwrap();
        assert!(scenario_from_config(&config).is_err());
        // Variant without its parameter.
        let config = Config::parse("shape = city-grid\n").unwrap();
        match scenario_from_config(&config).unwrap_err() {
            IoError::Invalid(message) => assert!(message.contains("grid_block"), "{message}"),
            other => panic!("unexpected error {other:?}"),
        }
        // Unknown variant names.
        let config = Config::parse("shape = spiral\n").unwrap();
        assert!(scenario_from_config(&config).is_err());
        let config = Config::parse("drift = quadratic\n").unwrap();
        assert!(scenario_from_config(&config).is_err());
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.conf");
        let spec = ScenarioSpec {
            shape: TrajectoryShape::CityGrid { block: 9 },
            drift: DriftProfile::RampTo { final_factor: 1.7 },
            ..ScenarioSpec::default()
        };
        crate::io::write_atomic(&path, scenario_to_config(&spec).as_bytes()).unwrap();
        let loaded = scenario_from_config(&load_config(&path).unwrap()).unwrap();
        assert_eq!(loaded, spec);
    }
}
