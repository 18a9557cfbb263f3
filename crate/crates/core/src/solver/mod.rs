//! Damped Levenberg–Marquardt over manifold-valued variable blocks.
//!
//! A [`Problem`] owns a set of [`Variable`]s — Euclidean vectors, rigid
//! poses or similarity poses — and a list of [`ResidualBlock`]s, each
//! touching a few variables. The total cost is
//!
//! ```text
//!   C(x) = Σ_b  w_b · ρ_b( ‖r_b(x)‖² )
//! ```
//!
//! with per-block weight `w_b` and robust loss `ρ_b` (quadratic or Huber).
//! Group-valued variables are updated with the left-multiplicative
//! retraction `x ← exp(δ)·x`, Euclidean ones additively, so the solver works
//! on the product tangent space of all free variables.
//!
//! Each iteration linearizes the robustified residuals (analytic Jacobians
//! where a block provides them, central differences otherwise), forms the
//! damped normal equations `(JᵀJ + μI)·δ = −Jᵀr`, and applies the classic
//! Marquardt schedule: accept a step that does not increase the cost and
//! divide `μ` by 3, otherwise multiply by 2 and retry. The normal equations
//! are solved densely below [`SolverOptions::dense_threshold`] tangent
//! dimensions and with a block-sparse Cholesky factorization (landmark-first
//! minimum-degree ordering) above it; damping keeps rank-deficient — e.g.
//! gauge-free — systems solvable.
//!
//! Residual evaluation is infallible by signature; blocks signal trouble
//! (a point behind the camera, a logarithm at its branch cut) by returning
//! non-finite entries. A non-finite residual or Jacobian *at a linearization
//! point* is a hard error naming the offending block, while a non-finite
//! cost at a *trial* point merely rejects the step.

mod sparse;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::manifold::{Sim3, Sim3Tangent, SE3};
use nalgebra::Vector6;

/// Errors raised by [`Problem::solve`] and the Jacobian helpers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("residual block `{label}` produced a non-finite residual at the linearization point")]
    NonFiniteResidual { label: String },
    #[error("residual block `{label}` produced a non-finite Jacobian entry")]
    NonFiniteJacobian { label: String },
    #[error("damping left the allowed range at μ = {damping:e}; the problem is not making progress")]
    DampingOutOfRange { damping: f64 },
    #[error("finite-difference step {step:e} is too small to be meaningful")]
    StepUnderflow { step: f64 },
    #[error("residual block references variable {index} but the problem has {count} variables")]
    BadVariableIndex { index: usize, count: usize },
}

/// A manifold-valued optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub enum Variable {
    /// Flat vector updated additively.
    Euclidean(DVector<f64>),
    /// Rigid pose updated by `exp(δ)·G`, tangent `[ω, ν]`.
    Se3(SE3),
    /// Similarity pose updated by `exp(δ)·S`, tangent `[ω, σ, ν]`.
    Sim3(Sim3),
}

impl Variable {
    pub fn tangent_dim(&self) -> usize {
        match self {
            Variable::Euclidean(v) => v.len(),
            Variable::Se3(_) => 6,
            Variable::Sim3(_) => 7,
        }
    }

    /// Left-multiplicative (or additive) update by a tangent step.
    pub fn retract(&self, delta: &[f64]) -> Variable {
        debug_assert_eq!(delta.len(), self.tangent_dim());
        match self {
            Variable::Euclidean(v) => {
                Variable::Euclidean(v + DVector::from_column_slice(delta))
            }
            Variable::Se3(g) => {
                let xi = Vector6::from_column_slice(delta);
                Variable::Se3(SE3::exp(&xi).compose(g))
            }
            Variable::Sim3(s) => {
                let xi = Sim3Tangent::from_vector(&nalgebra::SVector::<f64, 7>::from_column_slice(
                    delta,
                ));
                Variable::Sim3(Sim3::exp(&xi).compose(s))
            }
        }
    }

    pub fn as_euclidean(&self) -> &DVector<f64> {
        match self {
            Variable::Euclidean(v) => v,
            other => panic!("expected Euclidean variable, got {other:?}"),
        }
    }

    pub fn as_se3(&self) -> &SE3 {
        match self {
            Variable::Se3(g) => g,
            other => panic!("expected SE3 variable, got {other:?}"),
        }
    }

    pub fn as_sim3(&self) -> &Sim3 {
        match self {
            Variable::Sim3(s) => s,
            other => panic!("expected Sim3 variable, got {other:?}"),
        }
    }
}

/// Robust loss applied to a block's squared residual norm `u = ‖r‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    /// `ρ(u) = u`.
    Quadratic,
    /// Huber: quadratic up to residual norm `delta`, linear in the norm
    /// beyond it — `ρ(u) = u` for `u ≤ δ²`, else `2δ√u − δ²`.
    Huber { delta: f64 },
}

impl RobustLoss {
    /// Robustified cost for squared residual norm `u`.
    pub fn rho(&self, u: f64) -> f64 {
        match *self {
            RobustLoss::Quadratic => u,
            RobustLoss::Huber { delta } => {
                if u <= delta * delta {
                    u
                } else {
                    2.0 * delta * u.sqrt() - delta * delta
                }
            }
        }
    }

    /// Re-weighting factor `dρ/du`, used to scale residuals and Jacobians.
    pub fn weight(&self, u: f64) -> f64 {
        match *self {
            RobustLoss::Quadratic => 1.0,
            RobustLoss::Huber { delta } => {
                if u <= delta * delta {
                    1.0
                } else {
                    delta / u.sqrt()
                }
            }
        }
    }
}

/// One term of the cost: a vector residual over a few variables.
pub trait ResidualBlock {
    /// Residual dimension.
    fn dim(&self) -> usize;

    /// Indices (into the owning [`Problem`]) of the variables this block
    /// reads, in the order `eval` expects them.
    fn vars(&self) -> &[usize];

    /// Residual at the given variable values. Signal evaluation failure
    /// (e.g. a point behind the camera) with non-finite entries.
    fn eval(&self, vars: &[&Variable]) -> DVector<f64>;

    /// Analytic Jacobian of the residual w.r.t. the tangent of `vars()[arg]`,
    /// or `None` to fall back to central differences.
    fn jacobian(&self, _vars: &[&Variable], _arg: usize) -> Option<DMatrix<f64>> {
        None
    }

    /// Scalar weight multiplying the (robustified) squared norm.
    fn weight(&self) -> f64 {
        1.0
    }

    fn loss(&self) -> RobustLoss {
        RobustLoss::Quadratic
    }

    /// Human-readable label used in diagnostics.
    fn label(&self) -> String {
        "residual".to_owned()
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Termination {
    /// Max-norm of the gradient fell below the tolerance.
    GradientTolerance,
    /// Relative cost decrease of an accepted step fell below the tolerance.
    CostTolerance,
    /// Iteration budget exhausted.
    MaxIterations,
}

/// Outcome of a solve. `final_cost ≤ initial_cost` always holds: the solver
/// only ever accepts non-increasing steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub termination: Termination,
}

/// Levenberg–Marquardt controls. The defaults are shared by every optimizer
/// in the crate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Convergence threshold on `‖Jᵀr‖∞`.
    pub gradient_tolerance: f64,
    /// Convergence threshold on the relative cost decrease of an accepted
    /// step.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    /// Total free tangent dimension at or above which the normal equations
    /// switch from a dense to the block-sparse factorization.
    pub dense_threshold: usize,
    /// Central-difference step for blocks without analytic Jacobians.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_min: 1e-12,
            damping_max: 1e12,
            dense_threshold: 200,
            fd_step: 1e-6,
        }
    }
}

/// A nonlinear least-squares problem over manifold variables.
#[derive(Default)]
pub struct Problem {
    variables: Vec<Variable>,
    fixed: Vec<bool>,
    blocks: Vec<Box<dyn ResidualBlock>>,
}

impl Problem {
    pub fn new() -> Self {
        Problem::default()
    }

    /// Adds a free variable, returning its index.
    pub fn add_variable(&mut self, v: Variable) -> usize {
        self.variables.push(v);
        self.fixed.push(false);
        self.variables.len() - 1
    }

    /// Adds a variable held constant during optimization.
    pub fn add_fixed_variable(&mut self, v: Variable) -> usize {
        let id = self.add_variable(v);
        self.fixed[id] = true;
        id
    }

    pub fn set_fixed(&mut self, index: usize, fixed: bool) {
        self.fixed[index] = fixed;
    }

    pub fn add_residual(&mut self, block: Box<dyn ResidualBlock>) {
        self.blocks.push(block);
    }

    pub fn variable(&self, index: usize) -> &Variable {
        &self.variables[index]
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, index: usize) -> &dyn ResidualBlock {
        self.blocks[index].as_ref()
    }

    fn gather<'a>(&'a self, indices: &[usize]) -> Vec<&'a Variable> {
        indices.iter().map(|&i| &self.variables[i]).collect()
    }

    /// Total robustified cost at the current variable values; errors if any
    /// block evaluates non-finite.
    pub fn cost(&self) -> Result<f64, SolverError> {
        Self::cost_of(&self.variables, &self.blocks).map_err(|label| {
            SolverError::NonFiniteResidual { label }
        })
    }

    fn cost_of(vars: &[Variable], blocks: &[Box<dyn ResidualBlock>]) -> Result<f64, String> {
        let mut total = 0.0;
        for block in blocks {
            let args: Vec<&Variable> = block.vars().iter().map(|&i| &vars[i]).collect();
            let r = block.eval(&args);
            let u = r.norm_squared();
            let c = block.weight() * block.loss().rho(u);
            if !c.is_finite() {
                return Err(block.label());
            }
            total += c;
        }
        Ok(total)
    }

    fn validate(&self) -> Result<(), SolverError> {
        for block in &self.blocks {
            for &i in block.vars() {
                if i >= self.variables.len() {
                    return Err(SolverError::BadVariableIndex {
                        index: i,
                        count: self.variables.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs Levenberg–Marquardt to convergence or the iteration budget.
    pub fn solve(&mut self, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
        self.validate()?;
        let layout = Layout::build(&self.fixed, &self.variables);
        let initial_cost = self.cost()?;
        let mut cost = initial_cost;
        let mut mu = opts.initial_damping;
        let mut iterations = 0;
        let mut termination = Termination::MaxIterations;

        if layout.total_dim == 0 {
            return Ok(SolveReport {
                initial_cost,
                final_cost: cost,
                iterations: 0,
                termination: Termination::GradientTolerance,
            });
        }

        'outer: for _ in 0..opts.max_iterations {
            let lin = self.linearize(&layout, opts)?;
            if lin.gradient_inf_norm < opts.gradient_tolerance {
                termination = Termination::GradientTolerance;
                break;
            }
            loop {
                let delta = lin.solve_damped(mu, opts, &layout);
                let candidate = match delta {
                    Some(delta) => self.retract_all(&layout, &delta),
                    None => None,
                };
                let accepted = candidate.and_then(|vars| {
                    match Self::cost_of(&vars, &self.blocks) {
                        Ok(new_cost) if new_cost <= cost => Some((vars, new_cost)),
                        _ => None,
                    }
                });
                match accepted {
                    Some((vars, new_cost)) => {
                        let decrease = cost - new_cost;
                        self.variables = vars;
                        cost = new_cost;
                        iterations += 1;
                        mu = (mu / 3.0).max(opts.damping_min);
                        if decrease <= opts.cost_tolerance * cost.max(f64::MIN_POSITIVE) {
                            termination = Termination::CostTolerance;
                            break 'outer;
                        }
                        break;
                    }
                    None => {
                        mu *= 2.0;
                        if mu > opts.damping_max {
                            return Err(SolverError::DampingOutOfRange { damping: mu });
                        }
                    }
                }
            }
        }

        Ok(SolveReport {
            initial_cost,
            final_cost: cost,
            iterations,
            termination,
        })
    }

    fn retract_all(&self, layout: &Layout, delta: &DVector<f64>) -> Option<Vec<Variable>> {
        if !delta.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut vars = self.variables.clone();
        for (var_index, slot) in layout.slots.iter().enumerate() {
            if let Some(slot) = slot {
                let d = &delta.as_slice()[slot.offset..slot.offset + slot.dim];
                vars[var_index] = vars[var_index].retract(d);
            }
        }
        Some(vars)
    }

    /// Builds the scaled normal-equation blocks at the current state.
    fn linearize(&self, layout: &Layout, opts: &SolverOptions) -> Result<Linearization, SolverError> {
        let mut lin = Linearization::new(layout);
        for block in &self.blocks {
            let args = self.gather(block.vars());
            let r = block.eval(&args);
            if !r.iter().all(|v| v.is_finite()) {
                return Err(SolverError::NonFiniteResidual {
                    label: block.label(),
                });
            }
            let u = r.norm_squared();
            let scale = (block.weight() * block.loss().weight(u)).sqrt();
            let scaled_r = &r * scale;

            // Jacobians for the free arguments only.
            let mut jacobians: Vec<(usize, DMatrix<f64>)> = Vec::new();
            for (arg, &var_index) in block.vars().iter().enumerate() {
                if layout.slots[var_index].is_none() {
                    continue;
                }
                let j = match block.jacobian(&args, arg) {
                    Some(j) => j,
                    None => numeric_jacobian(block.as_ref(), &args, arg, opts.fd_step)?,
                };
                if !j.iter().all(|v| v.is_finite()) {
                    return Err(SolverError::NonFiniteJacobian {
                        label: block.label(),
                    });
                }
                debug_assert_eq!(j.nrows(), block.dim());
                debug_assert_eq!(j.ncols(), args[arg].tangent_dim());
                jacobians.push((var_index, j * scale));
            }

            for (vi, ji) in &jacobians {
                let slot_i = layout.slots[*vi].unwrap();
                let gi = ji.transpose() * &scaled_r;
                lin.add_gradient(slot_i, &gi);
                for (vj, jj) in &jacobians {
                    let slot_j = layout.slots[*vj].unwrap();
                    if slot_j.block > slot_i.block {
                        continue; // lower triangle only
                    }
                    lin.add_hessian(slot_i, slot_j, ji.transpose() * jj);
                }
            }
        }
        lin.finish();
        Ok(lin)
    }
}

/// Where each free variable lives in the active tangent vector.
#[derive(Clone, Copy, Debug)]
struct Slot {
    /// Index among free variables (block index in the sparse structure).
    block: usize,
    /// Column offset in the stacked tangent vector.
    offset: usize,
    dim: usize,
}

struct Layout {
    /// One entry per problem variable; `None` for fixed variables.
    slots: Vec<Option<Slot>>,
    /// Tangent dimension per free block.
    dims: Vec<usize>,
    total_dim: usize,
}

impl Layout {
    fn build(fixed: &[bool], vars: &[Variable]) -> Layout {
        let mut slots = Vec::with_capacity(vars.len());
        let mut dims = Vec::new();
        let mut offset = 0;
        for (v, &is_fixed) in vars.iter().zip(fixed) {
            if is_fixed {
                slots.push(None);
            } else {
                let dim = v.tangent_dim();
                slots.push(Some(Slot {
                    block: dims.len(),
                    offset,
                    dim,
                }));
                dims.push(dim);
                offset += dim;
            }
        }
        Layout {
            slots,
            dims,
            total_dim: offset,
        }
    }
}

/// Normal equations in block form: lower-triangle Hessian blocks keyed by
/// free-block index pair, plus the stacked gradient.
struct Linearization {
    hessian: std::collections::BTreeMap<(usize, usize), DMatrix<f64>>,
    offsets: Vec<usize>,
    gradient: DVector<f64>,
    gradient_inf_norm: f64,
}

impl Linearization {
    fn new(layout: &Layout) -> Self {
        let mut offsets = Vec::with_capacity(layout.dims.len());
        let mut acc = 0;
        for &d in &layout.dims {
            offsets.push(acc);
            acc += d;
        }
        Linearization {
            hessian: std::collections::BTreeMap::new(),
            offsets,
            gradient: DVector::zeros(layout.total_dim),
            gradient_inf_norm: 0.0,
        }
    }

    fn add_gradient(&mut self, slot: Slot, g: &DVector<f64>) {
        self.gradient
            .rows_mut(slot.offset, slot.dim)
            .iter_mut()
            .zip(g.iter())
            .for_each(|(acc, v)| *acc += v);
    }

    fn add_hessian(&mut self, si: Slot, sj: Slot, m: DMatrix<f64>) {
        self.hessian
            .entry((si.block, sj.block))
            .and_modify(|acc| *acc += &m)
            .or_insert(m);
    }

    fn finish(&mut self) {
        self.gradient_inf_norm = self.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }

    /// Solves `(H + μI)·δ = −g`, choosing the dense or block-sparse path by
    /// problem size. `None` means the damped system was still not positive
    /// definite (caller bumps μ).
    fn solve_damped(&self, mu: f64, opts: &SolverOptions, layout: &Layout) -> Option<DVector<f64>> {
        if layout.total_dim < opts.dense_threshold {
            let mut h = DMatrix::zeros(layout.total_dim, layout.total_dim);
            for (&(bi, bj), m) in &self.hessian {
                let (oi, oj) = (self.offsets[bi], self.offsets[bj]);
                h.view_mut((oi, oj), (m.nrows(), m.ncols())).copy_from(m);
                if bi != bj {
                    h.view_mut((oj, oi), (m.ncols(), m.nrows()))
                        .copy_from(&m.transpose());
                }
            }
            for i in 0..layout.total_dim {
                h[(i, i)] += mu;
            }
            let chol = nalgebra::Cholesky::new(h)?;
            Some(chol.solve(&(-&self.gradient)))
        } else {
            sparse::solve_block_cholesky(
                &self.hessian,
                &layout.dims,
                &self.offsets,
                &self.gradient,
                mu,
            )
        }
    }
}

/// Central-difference Jacobian of `block` w.r.t. the tangent of argument
/// `arg`, using the same retraction the solver steps with.
pub fn numeric_jacobian(
    block: &dyn ResidualBlock,
    vars: &[&Variable],
    arg: usize,
    step: f64,
) -> Result<DMatrix<f64>, SolverError> {
    if !(step.is_finite() && step > 1e-12) {
        return Err(SolverError::StepUnderflow { step });
    }
    let dim = block.dim();
    let tangent = vars[arg].tangent_dim();
    let mut j = DMatrix::zeros(dim, tangent);
    let mut delta = vec![0.0; tangent];
    for k in 0..tangent {
        delta[k] = step;
        let plus_var = vars[arg].retract(&delta);
        delta[k] = -step;
        let minus_var = vars[arg].retract(&delta);
        delta[k] = 0.0;

        let mut plus_args: Vec<&Variable> = vars.to_vec();
        plus_args[arg] = &plus_var;
        let r_plus = block.eval(&plus_args);
        let mut minus_args: Vec<&Variable> = vars.to_vec();
        minus_args[arg] = &minus_var;
        let r_minus = block.eval(&minus_args);

        let col = (r_plus - r_minus) / (2.0 * step);
        j.set_column(k, &col);
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOLERANCE: f64 = 1e-8;

    /// r(x) = x − target for a scalar Euclidean variable.
    struct Offset {
        vars: [usize; 1],
        target: f64,
    }

    impl ResidualBlock for Offset {
        fn dim(&self) -> usize {
            1
        }
        fn vars(&self) -> &[usize] {
            &self.vars
        }
        fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
            DVector::from_element(1, vars[0].as_euclidean()[0] - self.target)
        }
    }

    /// The classic Rosenbrock function as two residuals over (x, y).
    struct Rosenbrock {
        vars: [usize; 1],
    }

    impl ResidualBlock for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn vars(&self) -> &[usize] {
            &self.vars
        }
        fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
            let v = vars[0].as_euclidean();
            DVector::from_column_slice(&[10.0 * (v[1] - v[0] * v[0]), 1.0 - v[0]])
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = Problem::new();
        let x = p.add_variable(Variable::Euclidean(DVector::from_element(1, 0.0)));
        p.add_residual(Box::new(Offset { vars: [x], target: 3.0 }));
        let report = p.solve(&SolverOptions::default()).unwrap();
        assert!((p.variable(x).as_euclidean()[0] - 3.0).abs() < TOLERANCE);
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn rosenbrock_converges_to_unit_minimum() {
        let mut p = Problem::new();
        let xy = p.add_variable(Variable::Euclidean(DVector::from_column_slice(&[-1.2, 1.0])));
        p.add_residual(Box::new(Rosenbrock { vars: [xy] }));
        let report = p.solve(&SolverOptions::default()).unwrap();
        let v = p.variable(xy).as_euclidean();
        assert!((v[0] - 1.0).abs() < 1e-6, "x = {}", v[0]);
        assert!((v[1] - 1.0).abs() < 1e-6, "y = {}", v[1]);
        assert!(report.final_cost < 1e-12);
    }

    #[test]
    fn zero_residual_start_terminates_immediately() {
        let mut p = Problem::new();
        let x = p.add_variable(Variable::Euclidean(DVector::from_element(1, 3.0)));
        p.add_residual(Box::new(Offset { vars: [x], target: 3.0 }));
        let report = p.solve(&SolverOptions::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.termination, Termination::GradientTolerance);
        assert_eq!(report.final_cost, 0.0);
    }

    #[test]
    fn fixed_variables_do_not_move() {
        let mut p = Problem::new();
        let x = p.add_fixed_variable(Variable::Euclidean(DVector::from_element(1, 1.0)));
        let y = p.add_variable(Variable::Euclidean(DVector::from_element(1, 0.0)));
        p.add_residual(Box::new(Offset { vars: [x], target: 5.0 }));
        p.add_residual(Box::new(Offset { vars: [y], target: 2.0 }));
        p.solve(&SolverOptions::default()).unwrap();
        assert_eq!(p.variable(x).as_euclidean()[0], 1.0, "fixed var moved");
        assert!((p.variable(y).as_euclidean()[0] - 2.0).abs() < TOLERANCE);
    }

    /// Linear residual r = A·x − b over one Euclidean block; the minimizer
    /// is the normal-equation solution, computed here independently.
    struct Linear {
        vars: [usize; 1],
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl ResidualBlock for Linear {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn vars(&self) -> &[usize] {
            &self.vars
        }
        fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
            &self.a * vars[0].as_euclidean() - &self.b
        }
    }

    #[test]
    fn linear_problem_matches_normal_equation_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let expected = (a.transpose() * &a)
            .cholesky()
            .unwrap()
            .solve(&(a.transpose() * &b));

        let mut p = Problem::new();
        let x = p.add_variable(Variable::Euclidean(DVector::zeros(4)));
        p.add_residual(Box::new(Linear { vars: [x], a, b }));
        p.solve(&SolverOptions::default()).unwrap();
        assert!((p.variable(x).as_euclidean() - expected).norm() < 1e-7);
    }

    #[test]
    fn huber_loss_is_quadratic_below_and_linear_above_threshold() {
        let loss = RobustLoss::Huber { delta: 2.0 };
        // Below the threshold the robustified cost equals the quadratic one.
        for r in [0.0, 0.5, 1.0, 1.999, 2.0] {
            assert_eq!(loss.rho(r * r), r * r);
        }
        // Above it the cost is linear in the residual norm: constant slope.
        let s1 = (loss.rho(3.0f64.powi(2)) - loss.rho(2.5f64.powi(2))) / 0.5;
        let s2 = (loss.rho(9.0f64.powi(2)) - loss.rho(8.5f64.powi(2))) / 0.5;
        assert!((s1 - s2).abs() < 1e-12);
        assert!((s1 - 2.0 * 2.0).abs() < 1e-12, "slope is 2δ");
    }

    /// Sim3 prior residual: log of the variable itself (pulls it to a target).
    struct Sim3Prior {
        vars: [usize; 1],
        target: Sim3,
    }

    impl ResidualBlock for Sim3Prior {
        fn dim(&self) -> usize {
            7
        }
        fn vars(&self) -> &[usize] {
            &self.vars
        }
        fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
            let rel = vars[0].as_sim3().compose(&self.target.inverse());
            match rel.log() {
                Ok(xi) => DVector::from_column_slice(xi.to_vector().as_slice()),
                Err(_) => DVector::from_element(7, f64::NAN),
            }
        }
    }

    #[test]
    fn sim3_variable_converges_to_prior() {
        let target = Sim3::from_parts(
            crate::manifold::Rot3::exp(&Vector3::new(0.3, -0.2, 0.5)),
            Vector3::new(1.0, 2.0, -0.5),
            1.7,
        );
        let mut p = Problem::new();
        let s = p.add_variable(Variable::Sim3(Sim3::identity()));
        p.add_residual(Box::new(Sim3Prior { vars: [s], target }));
        let report = p.solve(&SolverOptions::default()).unwrap();
        let got = p.variable(s).as_sim3();
        assert!(
            (got.matrix() - target.matrix()).norm() < 1e-7,
            "final cost {:e}",
            report.final_cost
        );
    }

    #[test]
    fn gauge_free_problem_is_still_solvable() {
        // Two Sim3 nodes with only a relative constraint: any global motion
        // of the pair is a solution; damping must keep the system solvable.
        struct Rel {
            vars: [usize; 2],
            target: Sim3,
        }
        impl ResidualBlock for Rel {
            fn dim(&self) -> usize {
                7
            }
            fn vars(&self) -> &[usize] {
                &self.vars
            }
            fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
                let rel = vars[1].as_sim3().compose(&vars[0].as_sim3().inverse());
                let err = rel.compose(&self.target.inverse());
                match err.log() {
                    Ok(xi) => DVector::from_column_slice(xi.to_vector().as_slice()),
                    Err(_) => DVector::from_element(7, f64::NAN),
                }
            }
        }
        let target = Sim3::from_parts(
            crate::manifold::Rot3::exp(&Vector3::new(0.0, 0.4, 0.0)),
            Vector3::new(2.0, 0.0, 1.0),
            1.3,
        );
        let mut p = Problem::new();
        let a = p.add_variable(Variable::Sim3(Sim3::identity()));
        let b = p.add_variable(Variable::Sim3(Sim3::identity()));
        p.add_residual(Box::new(Rel { vars: [a, b], target }));
        let report = p.solve(&SolverOptions::default()).unwrap();
        assert!(report.final_cost < 1e-14);
        let rel = p.variable(b).as_sim3().compose(&p.variable(a).as_sim3().inverse());
        assert!((rel.matrix() - target.matrix()).norm() < 1e-6);
    }

    #[test]
    fn non_finite_residual_at_start_names_the_block() {
        struct Bad;
        impl ResidualBlock for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn vars(&self) -> &[usize] {
                &[0]
            }
            fn eval(&self, _: &[&Variable]) -> DVector<f64> {
                DVector::from_element(1, f64::NAN)
            }
            fn label(&self) -> String {
                "bad-block".to_owned()
            }
        }
        let mut p = Problem::new();
        p.add_variable(Variable::Euclidean(DVector::zeros(1)));
        p.add_residual(Box::new(Bad));
        match p.solve(&SolverOptions::default()) {
            Err(SolverError::NonFiniteResidual { label }) => assert_eq!(label, "bad-block"),
            other => panic!("expected NonFiniteResidual, got {other:?}"),
        }
    }

    #[test]
    fn numeric_jacobian_rejects_underflowing_step() {
        let p = Variable::Euclidean(DVector::zeros(1));
        let block = Offset { vars: [0], target: 0.0 };
        assert!(matches!(
            numeric_jacobian(&block, &[&p], 0, 0.0),
            Err(SolverError::StepUnderflow { .. })
        ));
    }

    /// Chain of Euclidean blocks with couplings: big enough to force the
    /// sparse path, small enough to also solve densely. Both paths must
    /// agree on the minimizer.
    #[test]
    fn dense_and_sparse_paths_agree() {
        struct Coupling {
            vars: [usize; 2],
            target: DVector<f64>,
        }
        impl ResidualBlock for Coupling {
            fn dim(&self) -> usize {
                self.target.len()
            }
            fn vars(&self) -> &[usize] {
                &self.vars
            }
            fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
                vars[1].as_euclidean() - vars[0].as_euclidean() - &self.target
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_blocks = 60; // 5 dims each → 300 tangent dims
        let build = || {
            let mut p = Problem::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let ids: Vec<usize> = (0..n_blocks)
                .map(|_| {
                    p.add_variable(Variable::Euclidean(DVector::from_fn(5, |_, _| {
                        rng.random_range(-1.0..1.0)
                    })))
                })
                .collect();
            (p, ids)
        };
        let targets: Vec<DVector<f64>> = (0..n_blocks - 1)
            .map(|_| DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)))
            .collect();

        let solve_with = |dense_threshold: usize| {
            let (mut p, ids) = build();
            p.add_residual(Box::new(Offset { vars: [ids[0]], target: 1.0 }));
            for k in 0..n_blocks - 1 {
                p.add_residual(Box::new(Coupling {
                    vars: [ids[k], ids[k + 1]],
                    target: targets[k].clone(),
                }));
            }
            let opts = SolverOptions {
                dense_threshold,
                ..SolverOptions::default()
            };
            p.solve(&opts).unwrap();
            let stacked: Vec<f64> = ids
                .iter()
                .flat_map(|&i| p.variable(i).as_euclidean().iter().copied().collect::<Vec<_>>())
                .collect();
            DVector::from_vec(stacked)
        };

        let dense = solve_with(usize::MAX);
        let sparse = solve_with(0);
        assert!(
            (dense.clone() - sparse).norm() < 1e-8 * (1.0 + dense.norm()),
            "dense and sparse solutions diverge"
        );
    }
}
