//! Windowed pose-graph optimization over Sim(3).
//!
//! Scale drift lives in the similarity group: a monocular reconstruction
//! can be locally right while its scale slides along the trajectory. The
//! coarse correction stage therefore optimizes camera poses as Sim(3)
//! nodes. The graph contains
//!
//! - **keyframe nodes** `S_n` for every keyframe between the newest and
//!   the oldest windowed correspondence (`C1`),
//! - **geo nodes** `S_m` for the windowed correspondences (`C2`),
//! - **relative edges** between covisible keyframes (`C3`) and between
//!   each geo image and its carrying keyframe (`C4`), with residual
//!   `log(ΔS·S_i·S_j⁻¹)` where `ΔS = S_j⁰·(S_i⁰)⁻¹` is snapshotted
//!   before the solve — the unique choice that makes the residual vanish
//!   at the starting configuration, and
//! - **anchor edges** pulling each geo node's position onto its geo-tag:
//!   `trans(S_m) − y_m`.
//!
//! The total cost is `λ1·Σ‖e1‖² + λ2·Σ‖e2‖² + λ3·Σ‖e3‖²`. Relative edges
//! are weighted five orders of magnitude above the anchors, so the window
//! deforms as rigidly as the anchors allow: the anchors choose the gauge
//! (without them the cost is invariant to a global change of map frame),
//! while the relative edges distribute the scale correction smoothly.
//!
//! After the solve, each keyframe's Sim(3) correction is applied to the
//! map points it owns, and poses are written back with the scale factor
//! folded away — the combination leaves every reprojection unchanged.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::manifold::{hat, ManifoldError, Sim3};
use crate::pipeline::Scene;
use crate::solver::{
    Problem, ResidualBlock, SolveReport, SolverError, SolverOptions, Variable,
};

/// Default weight λ1 of keyframe–keyframe relative edges.
pub const DEFAULT_WEIGHT_KEYFRAME_EDGES: f64 = 1e5;

/// Default weight λ2 of keyframe–geo relative edges.
pub const DEFAULT_WEIGHT_GEO_EDGES: f64 = 1e5;

/// Default weight λ3 of geo-anchor position edges.
pub const DEFAULT_WEIGHT_ANCHORS: f64 = 1.0;

/// Keyframe pairs sharing at least this many observed map points form a
/// covisibility edge.
pub const DEFAULT_COVISIBILITY_MIN_SHARED: usize = 15;

/// Number of newest correspondences forming the optimization window.
pub const DEFAULT_WINDOW_CORRESPONDENCES: usize = 3;

/// Edge weights of the pose graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgoWeights {
    /// λ1, keyframe–keyframe relative edges.
    pub keyframe_edges: f64,
    /// λ2, keyframe–geo relative edges.
    pub geo_edges: f64,
    /// λ3, geo-anchor position edges.
    pub anchors: f64,
}

impl Default for PgoWeights {
    fn default() -> Self {
        PgoWeights {
            keyframe_edges: DEFAULT_WEIGHT_KEYFRAME_EDGES,
            geo_edges: DEFAULT_WEIGHT_GEO_EDGES,
            anchors: DEFAULT_WEIGHT_ANCHORS,
        }
    }
}

/// Errors from window construction and pose-graph optimization.
#[derive(Debug, Error)]
pub enum PgoError {
    /// The scene has fewer correspondences than the window needs.
    #[error("window needs {needed} correspondences, scene has {got}")]
    TooFewCorrespondences { got: usize, needed: usize },
    /// A window or edge references a keyframe the scene lacks.
    #[error("unknown keyframe {id}")]
    UnknownKeyframe { id: u64 },
    /// The queried relative edge does not exist in the graph.
    #[error("no relative edge between nodes {i} and {j}")]
    NoSuchEdge { i: u64, j: u64 },
    /// The queried anchor does not exist in the graph.
    #[error("no anchor edge for geo node {index}")]
    NoSuchAnchor { index: usize },
    /// A map point's reference keyframe is missing from the scene.
    #[error("map point {point} references missing keyframe {keyframe}")]
    MissingReference { point: u64, keyframe: u64 },
    /// A logarithm hit the π rotation branch during evaluation.
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    /// Failure propagated from the solver.
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The index sets defining one correction window.
#[derive(Clone, Debug)]
pub struct GraphWindow {
    /// Keyframe ids between the oldest and newest windowed
    /// correspondence, inclusive (a contiguous slice of the trajectory).
    pub c1: Vec<u64>,
    /// Indices into `scene.geo_correspondences` of the newest
    /// correspondences (three by default).
    pub c2: Vec<usize>,
    /// Covisible keyframe pairs within `c1`, each sharing at least the
    /// covisibility threshold of observed points.
    pub c3: Vec<(u64, u64)>,
    /// (keyframe, correspondence-index) pairs tying each windowed geo
    /// image to the keyframe it was localized against.
    pub c4: Vec<(u64, usize)>,
}

impl GraphWindow {
    /// Builds the window over the newest `window_len` correspondences.
    ///
    /// # Errors
    ///
    /// [`PgoError::TooFewCorrespondences`] when the scene has fewer than
    /// `window_len` correspondences, [`PgoError::UnknownKeyframe`] when a
    /// correspondence names a keyframe the scene lacks.
    pub fn build(
        scene: &Scene,
        window_len: usize,
        min_shared: usize,
    ) -> Result<GraphWindow, PgoError> {
        let total = scene.geo_correspondences.len();
        if total < window_len {
            return Err(PgoError::TooFewCorrespondences {
                got: total,
                needed: window_len,
            });
        }
        let c2: Vec<usize> = (total - window_len..total).collect();
        let first_kf = scene.geo_correspondences[c2[0]].keyframe_id;
        let last_kf = scene.geo_correspondences[*c2.last().expect("window non-empty")]
            .keyframe_id;
        for &m in &c2 {
            let kf = scene.geo_correspondences[m].keyframe_id;
            if !scene.keyframes.contains_key(&kf) {
                return Err(PgoError::UnknownKeyframe { id: kf });
            }
        }
        let c1: Vec<u64> = scene
            .keyframes
            .range(first_kf..=last_kf)
            .map(|(&id, _)| id)
            .collect();

        // Covisibility: compare observed point sets pairwise within c1.
        let by_kf = scene.observations_by_keyframe();
        let observed: BTreeMap<u64, BTreeSet<u64>> = c1
            .iter()
            .map(|&kf| {
                let points = by_kf
                    .get(&kf)
                    .map(|indices| {
                        indices
                            .iter()
                            .map(|&i| scene.observations[i].point_id)
                            .collect()
                    })
                    .unwrap_or_default();
                (kf, points)
            })
            .collect();
        let mut c3 = Vec::new();
        for (a, &i) in c1.iter().enumerate() {
            for &j in &c1[a + 1..] {
                let shared = observed[&i].intersection(&observed[&j]).count();
                if shared >= min_shared {
                    c3.push((i, j));
                }
            }
        }

        let c4: Vec<(u64, usize)> = c2
            .iter()
            .map(|&m| (scene.geo_correspondences[m].keyframe_id, m))
            .collect();
        Ok(GraphWindow { c1, c2, c3, c4 })
    }
}

/// The pose graph of one correction window: node states, fixed relative
/// snapshots, anchors, and weights.
#[derive(Clone, Debug)]
pub struct PoseGraph {
    /// Keyframe nodes `S_n`, unit scale on entry.
    pub keyframe_nodes: BTreeMap<u64, Sim3>,
    /// Geo-image nodes `S_m`, keyed by correspondence index.
    pub geo_nodes: BTreeMap<usize, Sim3>,
    /// Keyframe–keyframe edges `(i, j, ΔS_ij)` with `ΔS_ij = S_j⁰·(S_i⁰)⁻¹`.
    pub rel_edges_kf: Vec<(u64, u64, Sim3)>,
    /// Keyframe–geo edges `(k, m, ΔS_km)` with the same snapshot rule.
    pub rel_edges_geo: Vec<(u64, usize, Sim3)>,
    /// `(m, y_m)` anchor edges pulling geo nodes onto geo-tag positions.
    pub anchor_edges: Vec<(usize, Vector3<f64>)>,
    /// Edge weights λ1–λ3.
    pub weights: PgoWeights,
}

impl PoseGraph {
    /// Builds the graph from the scene's current state; all relative
    /// snapshots are taken here and stay fixed through the solve.
    ///
    /// # Errors
    ///
    /// [`PgoError::UnknownKeyframe`] on dangling window ids.
    pub fn from_window(
        scene: &Scene,
        window: &GraphWindow,
        weights: PgoWeights,
    ) -> Result<PoseGraph, PgoError> {
        let mut keyframe_nodes = BTreeMap::new();
        for &kf in &window.c1 {
            let pose = scene
                .keyframes
                .get(&kf)
                .ok_or(PgoError::UnknownKeyframe { id: kf })?;
            keyframe_nodes.insert(kf, pose.to_sim3());
        }
        let mut geo_nodes = BTreeMap::new();
        for &m in &window.c2 {
            geo_nodes.insert(m, scene.geo_correspondences[m].map_pose);
        }

        let mut rel_edges_kf = Vec::with_capacity(window.c3.len());
        for &(i, j) in &window.c3 {
            let (si, sj) = (&keyframe_nodes[&i], &keyframe_nodes[&j]);
            rel_edges_kf.push((i, j, sj.compose(&si.inverse())));
        }
        let mut rel_edges_geo = Vec::with_capacity(window.c4.len());
        for &(k, m) in &window.c4 {
            let sk = keyframe_nodes
                .get(&k)
                .ok_or(PgoError::UnknownKeyframe { id: k })?;
            let sm = &geo_nodes[&m];
            rel_edges_geo.push((k, m, sm.compose(&sk.inverse())));
        }
        let anchor_edges = window
            .c2
            .iter()
            .map(|&m| (m, scene.geo_correspondences[m].world_point))
            .collect();
        Ok(PoseGraph {
            keyframe_nodes,
            geo_nodes,
            rel_edges_kf,
            rel_edges_geo,
            anchor_edges,
            weights,
        })
    }

    /// Relative residual between keyframes `i` and `j`:
    /// `log(ΔS_ij · S_i · S_j⁻¹)` as an `(ω, σ, ν)` 7-vector.
    ///
    /// # Errors
    ///
    /// [`PgoError::NoSuchEdge`] if the pair has no edge; logarithm branch
    /// errors at a π rotation.
    pub fn residual_e1(&self, i: u64, j: u64) -> Result<DVector<f64>, PgoError> {
        let (_, _, delta) = self
            .rel_edges_kf
            .iter()
            .find(|&&(a, b, _)| (a, b) == (i, j))
            .ok_or(PgoError::NoSuchEdge { i, j })?;
        relative_residual(delta, &self.keyframe_nodes[&i], &self.keyframe_nodes[&j])
            .map_err(PgoError::from)
    }

    /// Relative residual between keyframe `k` and geo node `m`, same form
    /// as [`PoseGraph::residual_e1`].
    ///
    /// # Errors
    ///
    /// As for `residual_e1`.
    pub fn residual_e2(&self, k: u64, m: usize) -> Result<DVector<f64>, PgoError> {
        let (_, _, delta) = self
            .rel_edges_geo
            .iter()
            .find(|&&(a, b, _)| (a, b) == (k, m))
            .ok_or(PgoError::NoSuchEdge {
                i: k,
                j: m as u64,
            })?;
        relative_residual(delta, &self.keyframe_nodes[&k], &self.geo_nodes[&m])
            .map_err(PgoError::from)
    }

    /// Anchor residual of geo node `m`: `trans(S_m) − y_m`.
    ///
    /// # Errors
    ///
    /// [`PgoError::NoSuchAnchor`] if `m` carries no anchor.
    pub fn residual_e3(&self, m: usize) -> Result<DVector<f64>, PgoError> {
        let (_, target) = self
            .anchor_edges
            .iter()
            .find(|&&(idx, _)| idx == m)
            .ok_or(PgoError::NoSuchAnchor { index: m })?;
        let r = self.geo_nodes[&m].translation - target;
        Ok(DVector::from_column_slice(&[r.x, r.y, r.z]))
    }

    /// Total weighted cost at the graph's current node states:
    /// `λ1·Σ‖e1‖² + λ2·Σ‖e2‖² + λ3·Σ‖e3‖²`.
    ///
    /// # Errors
    ///
    /// Logarithm branch errors from degenerate relative configurations.
    pub fn cost(&self) -> Result<f64, PgoError> {
        let mut total = 0.0;
        for &(i, j, ref delta) in &self.rel_edges_kf {
            let e = relative_residual(delta, &self.keyframe_nodes[&i], &self.keyframe_nodes[&j])?;
            total += self.weights.keyframe_edges * e.norm_squared();
        }
        for &(k, m, ref delta) in &self.rel_edges_geo {
            let e = relative_residual(delta, &self.keyframe_nodes[&k], &self.geo_nodes[&m])?;
            total += self.weights.geo_edges * e.norm_squared();
        }
        for &(m, ref target) in &self.anchor_edges {
            let r = self.geo_nodes[&m].translation - target;
            total += self.weights.anchors * r.norm_squared();
        }
        Ok(total)
    }
}

/// `log(ΔS · S_i · S_j⁻¹)` as a stacked `(ω, σ, ν)` vector.
fn relative_residual(
    delta: &Sim3,
    si: &Sim3,
    sj: &Sim3,
) -> Result<DVector<f64>, ManifoldError> {
    let err = delta.compose(&si.compose(&sj.inverse()));
    Ok(DVector::from_column_slice(err.log()?.to_vector().as_slice()))
}

/// Solver block for a relative Sim(3) edge. Jacobians are left to the
/// solver's central differences: the exact derivative of the similarity
/// logarithm is disproportionately intricate for a seven-dimensional
/// residual evaluated a handful of times per window.
struct RelativeEdgeBlock {
    delta: Sim3,
    vars: [usize; 2],
    weight: f64,
    kind: &'static str,
}

impl ResidualBlock for RelativeEdgeBlock {
    fn dim(&self) -> usize {
        7
    }

    fn vars(&self) -> &[usize] {
        &self.vars
    }

    fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
        match relative_residual(&self.delta, vars[0].as_sim3(), vars[1].as_sim3()) {
            Ok(r) => r,
            // π-branch rotations poison the trial step.
            Err(_) => DVector::from_element(7, f64::NAN),
        }
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn label(&self) -> String {
        self.kind.into()
    }
}

/// Solver block for a geo-anchor edge on a Sim(3) node.
struct AnchorEdgeBlock {
    target: Vector3<f64>,
    vars: [usize; 1],
    weight: f64,
}

impl ResidualBlock for AnchorEdgeBlock {
    fn dim(&self) -> usize {
        3
    }

    fn vars(&self) -> &[usize] {
        &self.vars
    }

    fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
        let r = vars[0].as_sim3().translation - self.target;
        DVector::from_column_slice(&[r.x, r.y, r.z])
    }

    fn jacobian(&self, vars: &[&Variable], _arg: usize) -> Option<DMatrix<f64>> {
        // Left perturbation exp(ω, σ, ν)·S moves the translation t by
        // ω×t + σ·t + ν to first order.
        let t = vars[0].as_sim3().translation;
        let mut j = DMatrix::zeros(3, 7);
        let neg_hat = -hat(&t);
        for r in 0..3 {
            for c in 0..3 {
                j[(r, c)] = neg_hat[(r, c)];
            }
            j[(r, 3)] = t[r];
            j[(r, r + 4)] = 1.0;
        }
        Some(j)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn label(&self) -> String {
        "geo-position-anchor".into()
    }
}

/// Result of one windowed pose-graph solve: the report plus the window
/// keyframes' full similarity poses before and after, which drive the
/// map-point propagation (the scale factor matters there and is not
/// recoverable from the written-back rigid poses).
#[derive(Clone, Debug)]
pub struct PgoOutcome {
    /// Solver statistics.
    pub report: SolveReport,
    /// Window keyframe poses at graph construction (unit scale).
    pub old_poses: BTreeMap<u64, Sim3>,
    /// Optimized window keyframe poses (scale expresses the correction).
    pub new_poses: BTreeMap<u64, Sim3>,
}

/// Builds the solver problem for a graph. Returns the problem plus the
/// variable indices of keyframe and geo nodes.
fn build_problem(
    graph: &PoseGraph,
) -> (Problem, BTreeMap<u64, usize>, BTreeMap<usize, usize>) {
    let mut problem = Problem::new();
    let mut kf_vars = BTreeMap::new();
    for (&kf, node) in &graph.keyframe_nodes {
        kf_vars.insert(kf, problem.add_variable(Variable::Sim3(*node)));
    }
    let mut geo_vars = BTreeMap::new();
    for (&m, node) in &graph.geo_nodes {
        geo_vars.insert(m, problem.add_variable(Variable::Sim3(*node)));
    }
    for &(i, j, ref delta) in &graph.rel_edges_kf {
        problem.add_residual(Box::new(RelativeEdgeBlock {
            delta: *delta,
            vars: [kf_vars[&i], kf_vars[&j]],
            weight: graph.weights.keyframe_edges,
            kind: "relative-keyframe-edge",
        }));
    }
    for &(k, m, ref delta) in &graph.rel_edges_geo {
        problem.add_residual(Box::new(RelativeEdgeBlock {
            delta: *delta,
            vars: [kf_vars[&k], geo_vars[&m]],
            weight: graph.weights.geo_edges,
            kind: "relative-geo-edge",
        }));
    }
    for &(m, target) in &graph.anchor_edges {
        problem.add_residual(Box::new(AnchorEdgeBlock {
            target,
            vars: [geo_vars[&m]],
            weight: graph.weights.anchors,
        }));
    }
    (problem, kf_vars, geo_vars)
}

/// Assembles the solver problem for `graph` without running it, exactly
/// as [`optimize_window`] does. Useful for inspecting the residual
/// blocks, e.g. to check their derivatives against finite differences.
#[must_use]
pub fn assemble_problem(graph: &PoseGraph) -> Problem {
    build_problem(graph).0
}

/// The window's pose-graph cost at the scene's current state.
///
/// # Errors
///
/// Window construction errors; logarithm branch errors.
pub fn pgo_cost(
    scene: &Scene,
    window: &GraphWindow,
    weights: PgoWeights,
) -> Result<f64, PgoError> {
    PoseGraph::from_window(scene, window, weights)?.cost()
}

/// Optimizes the window's pose graph and writes the corrected poses back
/// into the scene (keyframes lose their scale factor; geo poses follow
/// their optimized nodes the same way).
///
/// Map points are **not** touched here — call
/// [`propagate_to_map_points`] with the returned pose maps, so the scale
/// factor recovered by the graph reaches the structure too.
///
/// # Errors
///
/// Window construction errors and solver failures.
pub fn optimize_window(
    scene: &mut Scene,
    window: &GraphWindow,
    weights: PgoWeights,
    solver_options: &SolverOptions,
) -> Result<PgoOutcome, PgoError> {
    let graph = PoseGraph::from_window(scene, window, weights)?;
    let (mut problem, kf_vars, geo_vars) = build_problem(&graph);
    let report = problem.solve(solver_options)?;

    let old_poses = graph.keyframe_nodes.clone();
    let mut new_poses = BTreeMap::new();
    for (&kf, &var) in &kf_vars {
        let optimized = *problem.variable(var).as_sim3();
        scene.keyframes.insert(kf, optimized.to_se3());
        new_poses.insert(kf, optimized);
    }
    for (&m, &var) in &geo_vars {
        let optimized = *problem.variable(var).as_sim3();
        let corr = &mut scene.geo_correspondences[m];
        corr.map_pose = optimized.to_se3().to_sim3();
        corr.map_point = corr.map_pose.translation;
    }
    Ok(PgoOutcome {
        report,
        old_poses,
        new_poses,
    })
}

/// Applies each corrected keyframe's similarity correction to the map
/// points that reference it: `X ← (S_new ∘ S_old⁻¹)(X)`. Points owned by
/// keyframes outside the correction are untouched.
///
/// # Errors
///
/// [`PgoError::MissingReference`] when a point's reference keyframe does
/// not exist in the scene at all.
pub fn propagate_to_map_points(
    scene: &mut Scene,
    old_poses: &BTreeMap<u64, Sim3>,
    new_poses: &BTreeMap<u64, Sim3>,
) -> Result<(), PgoError> {
    debug_assert!(old_poses.keys().eq(new_poses.keys()));
    let mut corrections: BTreeMap<u64, Sim3> = BTreeMap::new();
    for (&kf, old) in old_poses {
        corrections.insert(kf, new_poses[&kf].compose(&old.inverse()));
    }
    for (&pt, point) in scene.map_points.iter_mut() {
        let r = point.reference_keyframe;
        if let Some(correction) = corrections.get(&r) {
            point.position = correction.act(&point.position);
        } else if !scene.keyframes.contains_key(&r) {
            return Err(PgoError::MissingReference {
                point: pt,
                keyframe: r,
            });
        }
    }
    Ok(())
}
