//! Solver for the discretized interconnected-obstacle system.
//!
//! The m value functions are computed by a monotone outer iteration: each
//! sweep solves, per mode, a single-obstacle problem whose obstacle and
//! cross-mode profit arguments are frozen at the previous sweep's values
//! while the own value component stays live. Started from the lower
//! envelope, the sweep values increase monotonically and stay sandwiched
//! between the two envelope solutions — both facts are recorded in the
//! iteration trace and asserted by the verification suite.
//!
//! Two inner solvers are provided for the single-obstacle problems:
//! penalization (the obstacle enters as n(v - φ)⁻ with n driven up a
//! schedule) and Howard policy iteration on the stop/continue action pair.
//! Policy iteration resolves the complementarity exactly up to the linear
//! solve and is the default; the penalized route is kept as an independent
//! cross-check with a known O(1/n) obstacle violation.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{discretize_generator, BoundaryPolicy, DiscreteOperator, GridError};
use crate::linalg::{solve_refined, BandMatrix, LinalgError};
use crate::model::{DiffusionSpec, SwitchingProblem};

#[derive(Debug, Error)]
pub enum QviError {
    #[error("inner solver diverged: {context}")]
    InnerDiverged { context: String },
    #[error("envelope ordering violated at node {node}: lower {lower} > upper {upper}")]
    EnvelopeOrderViolated { node: usize, lower: f64, upper: f64 },
    #[error(
        "penalty stalled at n = {stage}: negative part {current:.3e} did not decrease from {previous:.3e}"
    )]
    PenaltyStalled {
        stage: f64,
        previous: f64,
        current: f64,
    },
    #[error("outer iteration hit the cap of {iterations} sweeps (last sup change {sup_change:.3e})")]
    MaxOuterIterations { iterations: usize, sup_change: f64 },
    #[error(
        "monotone iteration broken: mode {mode} decreased by {decrease:.3e} at node {node}"
    )]
    MonotonicityBroken {
        mode: usize,
        node: usize,
        decrease: f64,
    },
    #[error("non-finite value for mode {mode} at node {node}")]
    NonFiniteValue { mode: usize, node: usize },
    #[error("obstacle inequality violated by {gap:.3e} at mode {mode}, node {node}")]
    ObstacleViolated { mode: usize, node: usize, gap: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Inner solver for the single-obstacle problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    Penalized,
    PolicyIteration,
}

/// Solver knobs. `Default` gives the documented desk-scale settings.
#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub inner: InnerMethod,
    /// Penalty schedule, warm-started stage to stage; the answer comes
    /// from the largest entry.
    pub penalty_schedule: Vec<f64>,
    /// Outer sup-norm stopping tolerance.
    pub tol_outer: f64,
    /// Inner sweep stopping tolerance.
    pub tol_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Damping of the outer update in [0, 1); 0 is the plain scheme.
    pub damping: f64,
    /// Residual tolerance of the banded linear solves.
    pub linear_tol: f64,
    /// Relative Cauchy tolerance for the envelope padding extension.
    pub envelope_pad_tol: f64,
    /// Node budget for padded envelope grids.
    pub max_pad_nodes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            inner: InnerMethod::PolicyIteration,
            penalty_schedule: vec![1e1, 1e2, 1e3, 1e4],
            tol_outer: 1e-6,
            tol_inner: 1e-8,
            max_outer: 100,
            max_inner: 200,
            damping: 0.0,
            linear_tol: 1e-10,
            envelope_pad_tol: 1e-3,
            max_pad_nodes: 2_000_000,
        }
    }
}

/// Provenance stamp carried by every solved field.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub solver: String,
    pub outer_iterations: usize,
    pub config_hash: String,
}

/// The m solved value functions on the grid, with the gradient cache
/// σᵀ∇vⁱ feeding the profit z-argument and the per-node complementarity
/// slack (zero where the discrete system is exactly satisfied).
#[derive(Debug, Clone)]
pub struct ValueField {
    /// values[mode][node].
    pub values: Vec<Vec<f64>>,
    /// gradients[mode][node] is σᵀ∇vⁱ, length d.
    pub gradients: Vec<Vec<Vec<f64>>>,
    /// slack[mode][node] = min(vⁱ - obstacleⁱ, r vⁱ - L_h vⁱ - f_i).
    pub slack: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl ValueField {
    pub fn num_modes(&self) -> usize {
        self.values.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    /// Builds the derived caches from raw values and checks the field
    /// invariants (finiteness, obstacle inequality within `tol`).
    pub fn assemble(
        values: Vec<Vec<f64>>,
        problem: &SwitchingProblem,
        op: &DiscreteOperator,
        provenance: Provenance,
        tol: f64,
    ) -> Result<ValueField, QviError> {
        let m = values.len();
        let n = op.num_nodes();
        for (mode, v) in values.iter().enumerate() {
            for (node, value) in v.iter().enumerate() {
                if !value.is_finite() {
                    return Err(QviError::NonFiniteValue { mode, node });
                }
            }
        }
        let mut gradients = Vec::with_capacity(m);
        for v in &values {
            let mut per_node = Vec::with_capacity(n);
            let mut z = vec![0.0; op.dim_noise()];
            for node in 0..n {
                op.sigma_t_grad_at(v, node, &mut z);
                per_node.push(z.clone());
            }
            gradients.push(per_node);
        }
        let mut slack = vec![vec![0.0; n]; m];
        let mut y = vec![0.0; m];
        for node in 0..n {
            let x = op.grid().node_coords(node);
            for (j, yj) in y.iter_mut().enumerate() {
                *yj = values[j][node];
            }
            for i in 0..m {
                let obstacle_gap =
                    values[i][node] - obstacle_value(problem, &values, &x, node, i).0;
                if obstacle_gap < -tol {
                    return Err(QviError::ObstacleViolated {
                        mode: i,
                        node,
                        gap: obstacle_gap,
                    });
                }
                let pde = problem.discount * values[i][node]
                    - op.apply_at(&values[i], node)
                    - problem.profit(i, &x, &y, &gradients[i][node]);
                slack[i][node] = obstacle_gap.min(pde);
            }
        }
        Ok(ValueField {
            values,
            gradients,
            slack,
            provenance,
        })
    }
}

/// max_{j≠i}(vʲ(node) - g_ij(x)) and the argmax, lowest index winning
/// ties. Returns -inf for single-mode problems.
pub fn obstacle_value(
    problem: &SwitchingProblem,
    values: &[Vec<f64>],
    x: &[f64],
    node: usize,
    mode: usize,
) -> (f64, Option<usize>) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = None;
    for j in 0..problem.num_modes() {
        if j == mode {
            continue;
        }
        let candidate = values[j][node] - problem.cost(mode, j, x);
        if candidate > best {
            best = candidate;
            arg = Some(j);
        }
    }
    (best, arg)
}

/// One outer sweep's bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct OuterStep {
    pub sup_change: Vec<f64>,
    pub min_increment: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    /// Final complementarity residual of each mode's inner solve.
    pub inner_residual: Vec<f64>,
    /// Set when some mode's minimum increment dipped below -10 ε_in
    /// (tolerated; below -100 ε_in the solve aborts instead).
    pub monotonicity_warning: bool,
}

/// Per-sweep history of the outer iteration.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationTrace {
    pub steps: Vec<OuterStep>,
}

impl IterationTrace {
    pub fn outer_iterations(&self) -> usize {
        self.steps.len()
    }

    /// Smallest pointwise increment observed over the whole run.
    pub fn worst_increment(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.min_increment.iter())
            .fold(f64::INFINITY, |a, v| a.min(*v))
    }
}

// ---------------------------------------------------------------------------
// Generator plumbing for the inner solves
// ---------------------------------------------------------------------------

/// Scalar generator f̄(x_node, y, z) as seen by a single-obstacle solve.
pub trait InnerGenerator: Sync {
    fn eval(&self, node: usize, y: f64, z: &[f64]) -> f64;
    fn reads_value(&self) -> bool;
    fn reads_gradient(&self) -> bool;
}

/// f_i with cross components frozen at the previous sweep.
struct FrozenGenerator<'a> {
    problem: &'a SwitchingProblem,
    mode: usize,
    coords: &'a [Vec<f64>],
    frozen: &'a [Vec<f64>],
}

impl InnerGenerator for FrozenGenerator<'_> {
    fn eval(&self, node: usize, y: f64, z: &[f64]) -> f64 {
        let m = self.problem.num_modes();
        let mut args = Vec::with_capacity(m);
        for j in 0..m {
            args.push(if j == self.mode { y } else { self.frozen[j][node] });
        }
        self.problem.profit(self.mode, &self.coords[node], &args, z)
    }

    fn reads_value(&self) -> bool {
        self.problem.generator(self.mode).expr.uses_value()
    }

    fn reads_gradient(&self) -> bool {
        self.problem.generator(self.mode).expr.uses_gradient()
    }
}

/// max_i f_i or min_i f_i with all value slots tied to the single scalar.
struct EnvelopeGenerator<'a> {
    problem: &'a SwitchingProblem,
    coords: &'a [Vec<f64>],
    upper: bool,
}

impl InnerGenerator for EnvelopeGenerator<'_> {
    fn eval(&self, node: usize, y: f64, z: &[f64]) -> f64 {
        let m = self.problem.num_modes();
        let args = vec![y; m];
        let x = &self.coords[node];
        let mut best = self.problem.profit(0, x, &args, z);
        for i in 1..m {
            let v = self.problem.profit(i, x, &args, z);
            best = if self.upper { best.max(v) } else { best.min(v) };
        }
        best
    }

    fn reads_value(&self) -> bool {
        (0..self.problem.num_modes()).any(|i| self.problem.generator(i).expr.uses_value())
    }

    fn reads_gradient(&self) -> bool {
        (0..self.problem.num_modes()).any(|i| self.problem.generator(i).expr.uses_gradient())
    }
}

/// A plain expression over (x, y, z) as a scalar generator; used by the
/// public single-obstacle entry point.
pub struct ExprGenerator<'a> {
    pub expr: &'a crate::expr::Expr,
    pub coords: &'a [Vec<f64>],
}

impl InnerGenerator for ExprGenerator<'_> {
    fn eval(&self, node: usize, y: f64, z: &[f64]) -> f64 {
        self.expr.eval(&self.coords[node], &[y], z)
    }

    fn reads_value(&self) -> bool {
        self.expr.uses_value()
    }

    fn reads_gradient(&self) -> bool {
        self.expr.uses_gradient()
    }
}

// ---------------------------------------------------------------------------
// Inner solves
// ---------------------------------------------------------------------------

struct InnerContext<'a> {
    op: &'a DiscreteOperator,
    discount: f64,
    config: &'a SolverConfig,
    /// Pinned values at Dirichlet nodes (full-length vector).
    pins: Option<&'a [f64]>,
}

/// Statistics reported by a single-obstacle solve.
#[derive(Debug, Clone, Serialize)]
pub struct InnerStats {
    pub sweeps: usize,
    pub residual: f64,
    /// (n, sup negative part) per penalty stage; empty for policy iteration.
    pub penalty_profile: Vec<(f64, f64)>,
}

impl InnerContext<'_> {
    /// Lagged linearization: profit values at the current iterate plus a
    /// non-negative diagonal shift absorbing a decreasing own-value slope,
    /// which keeps every sweep an M-matrix solve.
    fn linearize(
        &self,
        gen: &dyn InnerGenerator,
        v: &[f64],
        fval: &mut [f64],
        shift: &mut [f64],
        z_buf: &mut [f64],
    ) {
        let n = self.op.num_nodes();
        let zeros = vec![0.0; self.op.dim_noise()];
        for node in 0..n {
            let z: &[f64] = if gen.reads_gradient() {
                self.op.sigma_t_grad_at(v, node, z_buf);
                z_buf
            } else {
                &zeros
            };
            let f0 = gen.eval(node, v[node], z);
            fval[node] = f0;
            shift[node] = if gen.reads_value() {
                let delta = 1e-6 * (1.0 + v[node].abs());
                let slope = (gen.eval(node, v[node] + delta, z) - f0) / delta;
                (-slope).clamp(0.0, 1e8)
            } else {
                0.0
            };
        }
    }

    fn solve_linear(&self, extra_diag: &[f64], rhs: &[f64]) -> Result<Vec<f64>, QviError> {
        let matrix = self.op.system_matrix(self.discount, extra_diag);
        Ok(solve_refined(&matrix, rhs, self.config.linear_tol)?)
    }

    fn complementarity_residual(
        &self,
        gen: &dyn InnerGenerator,
        obstacle: &[f64],
        v: &[f64],
    ) -> f64 {
        let n = self.op.num_nodes();
        let mut z = vec![0.0; self.op.dim_noise()];
        let mut worst = 0.0f64;
        for node in 0..n {
            if self.op.is_dirichlet(node) {
                continue;
            }
            self.op.sigma_t_grad_at(v, node, &mut z);
            let pde = self.discount * v[node]
                - self.op.apply_at(v, node)
                - gen.eval(node, v[node], &z);
            let gap = v[node] - obstacle[node];
            worst = worst.max(gap.min(pde).abs());
        }
        worst
    }

    /// Penalized solve at a fixed penalty level, semi-smooth Newton on the
    /// active set with the profit lagged sweep to sweep.
    fn penalized_stage(
        &self,
        gen: &dyn InnerGenerator,
        obstacle: &[f64],
        penalty: f64,
        start: &[f64],
        context: &str,
    ) -> Result<(Vec<f64>, usize), QviError> {
        let n = self.op.num_nodes();
        let mut v = start.to_vec();
        let mut fval = vec![0.0; n];
        let mut shift = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut z_buf = vec![0.0; self.op.dim_noise()];
        let mut prev_change = f64::INFINITY;
        let mut grew = 0usize;
        for sweep in 1..=self.config.max_inner {
            self.linearize(gen, &v, &mut fval, &mut shift, &mut z_buf);
            for node in 0..n {
                let active = v[node] < obstacle[node];
                diag[node] = shift[node] + if active { penalty } else { 0.0 };
                rhs[node] = match self.pins {
                    Some(p) if self.op.is_dirichlet(node) => p[node],
                    _ => {
                        fval[node]
                            + shift[node] * v[node]
                            + if active { penalty * obstacle[node] } else { 0.0 }
                    }
                };
            }
            let next = self.solve_linear(&diag, &rhs)?;
            let change = sup_diff(&next, &v);
            v = next;
            if change < self.config.tol_inner {
                return Ok((v, sweep));
            }
            if change > prev_change * (1.0 + 1e-12) {
                grew += 1;
                if grew >= 5 {
                    return Err(QviError::InnerDiverged {
                        context: format!("{context}: sup change grew 5 consecutive sweeps"),
                    });
                }
            } else {
                grew = 0;
            }
            prev_change = change;
        }
        Err(QviError::InnerDiverged {
            context: format!(
                "{context}: no convergence in {} sweeps",
                self.config.max_inner
            ),
        })
    }

    /// Howard iteration on the two-action system: "stop" rows pin v to the
    /// obstacle, "continue" rows solve the linearized equation. Iterated
    /// until the action set is stationary and the sweep is stable.
    fn policy_iteration(
        &self,
        gen: &dyn InnerGenerator,
        obstacle: &[f64],
        start: &[f64],
        context: &str,
    ) -> Result<(Vec<f64>, usize), QviError> {
        let n = self.op.num_nodes();
        let mut v = start.to_vec();
        let mut stop: Vec<bool> = (0..n)
            .map(|i| !self.op.is_dirichlet(i) && v[i] <= obstacle[i])
            .collect();
        let mut fval = vec![0.0; n];
        let mut shift = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut z_buf = vec![0.0; self.op.dim_noise()];
        let mut prev_change = f64::INFINITY;
        let mut grew = 0usize;
        for sweep in 1..=self.config.max_inner {
            self.linearize(gen, &v, &mut fval, &mut shift, &mut z_buf);
            let mut matrix = BandMatrix::new(n, self.op.half_bandwidth().max(1));
            for node in 0..n {
                if self.op.is_dirichlet(node) {
                    matrix.set(node, node, 1.0)?;
                    rhs[node] = self.pins.map(|p| p[node]).unwrap_or(v[node]);
                } else if stop[node] {
                    matrix.set(node, node, 1.0)?;
                    rhs[node] = obstacle[node];
                } else {
                    matrix.set(node, node, self.discount + shift[node])?;
                    for (c, w) in self.op.row(node) {
                        matrix.add(node, *c, -w)?;
                    }
                    rhs[node] = fval[node] + shift[node] * v[node];
                }
            }
            let next = solve_refined(&matrix, &rhs, self.config.linear_tol)?;
            // policy improvement at the updated values
            let mut changed = false;
            for node in 0..n {
                if self.op.is_dirichlet(node) {
                    continue;
                }
                self.op.sigma_t_grad_at(&next, node, &mut z_buf);
                let pde = self.discount * next[node]
                    - self.op.apply_at(&next, node)
                    - gen.eval(node, next[node], &z_buf);
                let want_stop = (next[node] - obstacle[node]) < pde;
                if want_stop != stop[node] {
                    stop[node] = want_stop;
                    changed = true;
                }
            }
            let change = sup_diff(&next, &v);
            v = next;
            if !changed && change < self.config.tol_inner {
                return Ok((v, sweep));
            }
            if change > prev_change * (1.0 + 1e-12) {
                grew += 1;
                if grew >= 5 {
                    return Err(QviError::InnerDiverged {
                        context: format!("{context}: sup change grew 5 consecutive sweeps"),
                    });
                }
            } else {
                grew = 0;
            }
            prev_change = change;
        }
        Err(QviError::InnerDiverged {
            context: format!(
                "{context}: no convergence in {} sweeps",
                self.config.max_inner
            ),
        })
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Solves min{v - φ, r v - L_h v - f̄(x, v, σᵀ∇v)} = 0 nodewise by the
/// configured inner method. `pins` supplies Dirichlet boundary values when
/// the operator was assembled with the envelope policy; `start` warm-starts
/// the sweeps (callers pass the previous outer iterate). An obstacle entry
/// of -inf disables the constraint at that node.
pub fn solve_single_obstacle(
    obstacle: &[f64],
    gen: &dyn InnerGenerator,
    op: &DiscreteOperator,
    discount: f64,
    config: &SolverConfig,
    pins: Option<&[f64]>,
    start: &[f64],
) -> Result<(Vec<f64>, InnerStats), QviError> {
    let ctx = InnerContext {
        op,
        discount,
        config,
        pins,
    };
    match config.inner {
        InnerMethod::PolicyIteration => {
            let (v, sweeps) = ctx.policy_iteration(gen, obstacle, start, "policy iteration")?;
            let residual = ctx.complementarity_residual(gen, obstacle, &v);
            Ok((
                v,
                InnerStats {
                    sweeps,
                    residual,
                    penalty_profile: Vec::new(),
                },
            ))
        }
        InnerMethod::Penalized => {
            let mut v = start.to_vec();
            let mut profile = Vec::new();
            let mut total_sweeps = 0usize;
            let mut prev_neg: Option<f64> = None;
            for &n_pen in &config.penalty_schedule {
                let (next, sweeps) = ctx.penalized_stage(
                    gen,
                    obstacle,
                    n_pen,
                    &v,
                    &format!("penalized stage n = {n_pen}"),
                )?;
                v = next;
                total_sweeps += sweeps;
                let neg_part = v
                    .iter()
                    .zip(obstacle)
                    .fold(0.0f64, |a, (vi, oi)| a.max((oi - vi).max(0.0)));
                if let Some(prev) = prev_neg {
                    let tiny = 1e-13 * (1.0 + prev);
                    if neg_part > prev + tiny && neg_part > 1e-12 {
                        return Err(QviError::PenaltyStalled {
                            stage: n_pen,
                            previous: prev,
                            current: neg_part,
                        });
                    }
                }
                prev_neg = Some(neg_part);
                profile.push((n_pen, neg_part));
            }
            let residual = ctx.complementarity_residual(gen, obstacle, &v);
            Ok((
                v,
                InnerStats {
                    sweeps: total_sweeps,
                    residual,
                    penalty_profile: profile,
                },
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Envelope solves
// ---------------------------------------------------------------------------

/// Obstacle-free solve of r v - L_h v = F(x, v, .., v, σᵀ∇v) by damped
/// fixed point on the nonlinearity with the frozen-coefficient linear
/// solve; F is the max (upper) or min (lower) of the profits.
fn envelope_fixed_point(
    problem: &SwitchingProblem,
    op: &DiscreteOperator,
    config: &SolverConfig,
    upper: bool,
) -> Result<Vec<f64>, QviError> {
    let n = op.num_nodes();
    let coords: Vec<Vec<f64>> = (0..n).map(|i| op.grid().node_coords(i)).collect();
    let gen = EnvelopeGenerator {
        problem,
        coords: &coords,
        upper,
    };
    let matrix = op.system_matrix(problem.discount, &[]);
    let lu = matrix.factorize()?;
    let zeros = vec![0.0; op.dim_noise()];
    let mut v: Vec<f64> = (0..n)
        .map(|node| gen.eval(node, 0.0, &zeros) / problem.discount)
        .collect();
    let mut z_buf = vec![0.0; op.dim_noise()];
    let mut rhs = vec![0.0; n];
    let mut prev_change = f64::INFINITY;
    let mut grew = 0usize;
    let label = if upper { "upper" } else { "lower" };
    for _sweep in 1..=config.max_inner {
        for node in 0..n {
            let z: &[f64] = if gen.reads_gradient() {
                op.sigma_t_grad_at(&v, node, &mut z_buf);
                &z_buf
            } else {
                &zeros
            };
            rhs[node] = gen.eval(node, v[node], z);
        }
        let solved = lu.solve(&rhs);
        let next: Vec<f64> = if config.damping > 0.0 {
            solved
                .iter()
                .zip(&v)
                .map(|(s, old)| (1.0 - config.damping) * s + config.damping * old)
                .collect()
        } else {
            solved
        };
        let change = sup_diff(&next, &v);
        v = next;
        if change < config.tol_inner {
            return Ok(v);
        }
        if change > prev_change * (1.0 + 1e-12) {
            grew += 1;
            if grew >= 5 {
                return Err(QviError::InnerDiverged {
                    context: format!("{label} envelope: sup change grew 5 consecutive sweeps"),
                });
            }
        } else {
            grew = 0;
        }
        prev_change = change;
    }
    Err(QviError::InnerDiverged {
        context: format!(
            "{label} envelope: no convergence in {} sweeps",
            config.max_inner
        ),
    })
}

/// Maximum padding doublings for the envelope boundary-data extension.
const MAX_PAD_DOUBLINGS: usize = 12;

/// Solves the two envelope equations and returns (upper, lower) on the
/// operator's grid.
///
/// Under the mirror boundary policy the solves run directly on `op`.
/// Under the envelope-Dirichlet policy the equations are solved on padded
/// grids (same spacing, mirror closure far away) whose extent doubles
/// until the data restricted to the box boundary is Cauchy within
/// `envelope_pad_tol`; the returned fields are the restrictions of the
/// final padded solves. The padding extent is thereby pinned by the
/// problem, not the resolution, which keeps refinement studies clean.
pub fn solve_envelopes(
    problem: &SwitchingProblem,
    diffusion: &DiffusionSpec,
    op: &DiscreteOperator,
    config: &SolverConfig,
) -> Result<(Vec<f64>, Vec<f64>), QviError> {
    let grid = op.grid();
    let (upper, lower) = match grid.policy() {
        BoundaryPolicy::NeumannZero => {
            let upper = envelope_fixed_point(problem, op, config, true)?;
            let lower = envelope_fixed_point(problem, op, config, false)?;
            (upper, lower)
        }
        BoundaryPolicy::DirichletEnvelope => {
            let n = grid.num_nodes();
            let boundary: Vec<usize> = (0..n).filter(|i| grid.is_boundary(*i)).collect();
            let mut factor = 1.5;
            let mut prev_data: Option<Vec<f64>> = None;
            let mut best: Option<(Vec<f64>, Vec<f64>)> = None;
            for _ in 0..=MAX_PAD_DOUBLINGS {
                let padded = grid.padded(factor)?;
                if padded.num_nodes() > config.max_pad_nodes {
                    break;
                }
                let pop = discretize_generator(diffusion, &padded)?;
                let u_pad = envelope_fixed_point(problem, &pop, config, true)?;
                let l_pad = envelope_fixed_point(problem, &pop, config, false)?;
                let embed = padded
                    .embedding_of(grid)
                    .expect("padded grid embeds its parent");
                let u: Vec<f64> = embed.iter().map(|&i| u_pad[i]).collect();
                let l: Vec<f64> = embed.iter().map(|&i| l_pad[i]).collect();
                let data: Vec<f64> = boundary.iter().map(|&i| 0.5 * (u[i] + l[i])).collect();
                let scale = data.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                let done = prev_data
                    .as_ref()
                    .map(|prev| sup_diff(&data, prev) <= config.envelope_pad_tol * scale)
                    .unwrap_or(false);
                prev_data = Some(data);
                best = Some((u, l));
                if done {
                    break;
                }
                factor *= 2.0;
            }
            best.ok_or_else(|| QviError::InnerDiverged {
                context: "envelope padding produced no solve within the node budget".into(),
            })?
        }
    };
    for node in 0..upper.len() {
        let tol = 1e-9 * (1.0 + upper[node].abs().max(lower[node].abs()));
        if lower[node] > upper[node] + tol {
            return Err(QviError::EnvelopeOrderViolated {
                node,
                lower: lower[node],
                upper: upper[node],
            });
        }
    }
    Ok((upper, lower))
}

// ---------------------------------------------------------------------------
// Outer iteration
// ---------------------------------------------------------------------------

/// Solves the full interconnected system by the monotone outer iteration.
///
/// All modes start at the lower envelope. Sweep n solves, per mode, a
/// single-obstacle problem with obstacle max_{j≠i}(v^{j,n-1} - g_ij) and
/// the cross profit arguments frozen at sweep n-1 (own component live);
/// it stops when the largest per-mode sup change drops below `tol_outer`.
/// The minimum pointwise increment is recorded every sweep: below
/// -10 ε_in it is flagged, below -100 ε_in the solve aborts.
pub fn picard_iterate(
    problem: &SwitchingProblem,
    op: &DiscreteOperator,
    envelopes: &(Vec<f64>, Vec<f64>),
    config: &SolverConfig,
) -> Result<(ValueField, IterationTrace), QviError> {
    let m = problem.num_modes();
    let n = op.num_nodes();
    let (upper, lower) = envelopes;
    let pins: Option<Vec<f64>> = match op.grid().policy() {
        BoundaryPolicy::DirichletEnvelope => {
            Some((0..n).map(|i| 0.5 * (upper[i] + lower[i])).collect())
        }
        BoundaryPolicy::NeumannZero => None,
    };
    let coords: Vec<Vec<f64>> = (0..n).map(|i| op.grid().node_coords(i)).collect();
    let mut values: Vec<Vec<f64>> = (0..m).map(|_| lower.clone()).collect();
    let mut trace = IterationTrace::default();
    let mut converged_at = None;
    for outer in 1..=config.max_outer {
        let previous = values.clone();
        let mut sup_change = vec![0.0f64; m];
        let mut min_increment = vec![f64::INFINITY; m];
        let mut inner_iterations = vec![0usize; m];
        let mut inner_residual = vec![0.0; m];
        let mut worst_witness = (0usize, 0usize, f64::INFINITY);
        for i in 0..m {
            let obstacle: Vec<f64> = (0..n)
                .map(|node| obstacle_value(problem, &previous, &coords[node], node, i).0)
                .collect();
            let gen = FrozenGenerator {
                problem,
                mode: i,
                coords: &coords,
                frozen: &previous,
            };
            let (mut solved, stats) = solve_single_obstacle(
                &obstacle,
                &gen,
                op,
                problem.discount,
                config,
                pins.as_deref(),
                &previous[i],
            )?;
            if config.damping > 0.0 {
                for (s, p) in solved.iter_mut().zip(&previous[i]) {
                    *s = (1.0 - config.damping) * *s + config.damping * p;
                }
            }
            inner_iterations[i] = stats.sweeps;
            inner_residual[i] = stats.residual;
            for node in 0..n {
                let inc = solved[node] - previous[i][node];
                sup_change[i] = sup_change[i].max(inc.abs());
                if inc < min_increment[i] {
                    min_increment[i] = inc;
                }
                if inc < worst_witness.2 {
                    worst_witness = (i, node, inc);
                }
            }
            values[i] = solved;
        }
        let worst_increment = worst_witness.2;
        if worst_increment < -100.0 * config.tol_inner {
            return Err(QviError::MonotonicityBroken {
                mode: worst_witness.0,
                node: worst_witness.1,
                decrease: worst_increment,
            });
        }
        let warn = worst_increment < -10.0 * config.tol_inner;
        let worst_change = sup_change.iter().fold(0.0f64, |a, v| a.max(*v));
        trace.steps.push(OuterStep {
            sup_change,
            min_increment,
            inner_iterations,
            inner_residual,
            monotonicity_warning: warn,
        });
        if worst_change < config.tol_outer {
            converged_at = Some(outer);
            break;
        }
    }
    let outer_iterations = match converged_at {
        Some(count) => count,
        None => {
            let last = trace
                .steps
                .last()
                .map(|s| s.sup_change.iter().fold(0.0f64, |a, v| a.max(*v)))
                .unwrap_or(f64::INFINITY);
            return Err(QviError::MaxOuterIterations {
                iterations: config.max_outer,
                sup_change: last,
            });
        }
    };
    let provenance = Provenance {
        solver: format!(
            "picard+{}",
            match config.inner {
                InnerMethod::Penalized => "penalized",
                InnerMethod::PolicyIteration => "policy_iteration",
            }
        ),
        outer_iterations,
        config_hash: String::new(),
    };
    let field = ValueField::assemble(values, problem, op, provenance, 100.0 * config.tol_outer)?;
    Ok((field, trace))
}

// ---------------------------------------------------------------------------
// Residuals
// ---------------------------------------------------------------------------

/// Discrete complementarity residuals with fully live coupling.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// Sup norm over interior nodes, per mode.
    pub per_mode_sup: Vec<f64>,
    /// Volume-weighted L2 norm over interior nodes, per mode.
    pub per_mode_l2: Vec<f64>,
    pub worst_mode: usize,
    pub worst_node: usize,
    pub worst_value: f64,
    pub sup: f64,
}

/// Recomputes min(vⁱ - obstacleⁱ, r vⁱ - L_h vⁱ - f_i(x, v¹..vᵐ, σᵀ∇vⁱ))
/// per interior node with no freezing; the sup over modes and nodes is the
/// honest measure of how well the coupled discrete system is satisfied.
pub fn residual(
    field: &ValueField,
    problem: &SwitchingProblem,
    op: &DiscreteOperator,
) -> ResidualReport {
    let m = field.num_modes();
    let n = field.num_nodes();
    let grid = op.grid();
    let cell_volume: f64 = grid.spacing().iter().product();
    let mut per_mode_sup = vec![0.0f64; m];
    let mut per_mode_l2 = vec![0.0f64; m];
    let mut worst = (0usize, 0usize, 0.0f64);
    let mut y = vec![0.0; m];
    for node in 0..n {
        if grid.is_boundary(node) {
            continue;
        }
        let x = grid.node_coords(node);
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = field.values[j][node];
        }
        for i in 0..m {
            let gap =
                field.values[i][node] - obstacle_value(problem, &field.values, &x, node, i).0;
            let pde = problem.discount * field.values[i][node]
                - op.apply_at(&field.values[i], node)
                - problem.profit(i, &x, &y, &field.gradients[i][node]);
            let r = gap.min(pde);
            let a = r.abs();
            per_mode_sup[i] = per_mode_sup[i].max(a);
            per_mode_l2[i] += r * r * cell_volume;
            if a > worst.2 {
                worst = (i, node, a);
            }
        }
    }
    for v in per_mode_l2.iter_mut() {
        *v = v.sqrt();
    }
    let sup = per_mode_sup.iter().fold(0.0f64, |a, v| a.max(*v));
    ResidualReport {
        per_mode_sup,
        per_mode_l2,
        worst_mode: worst.0,
        worst_node: worst.1,
        worst_value: worst.2,
        sup,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Expr, VarDims};
    use crate::grid::build_grid;
    use crate::model::{Coupling, GeneratorSpec};

    fn dims(k: usize, m: usize, d: usize) -> VarDims {
        VarDims {
            state: k,
            value: m,
            gradient: d,
        }
    }

    fn constants_problem(f: &[f64], g: f64, r: f64) -> SwitchingProblem {
        let m = f.len();
        let gens = f
            .iter()
            .map(|v| GeneratorSpec {
                expr: Expr::constant(*v),
                coupling: Coupling::StateOnly,
            })
            .collect();
        let costs = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| Expr::constant(if i == j { 0.0 } else { g }))
                    .collect()
            })
            .collect();
        let labels = (0..m).map(|i| format!("m{i}")).collect();
        SwitchingProblem::new(labels, gens, costs, r, 1, 1).unwrap()
    }

    fn zero_dynamics_op(cells: usize) -> DiscreteOperator {
        let d = DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap();
        let g = build_grid(&[(0.0, 1.0)], &[cells], BoundaryPolicy::NeumannZero).unwrap();
        discretize_generator(&d, &g).unwrap()
    }

    fn solve_constants(f: &[f64], g: f64, r: f64) -> (ValueField, IterationTrace) {
        let problem = constants_problem(f, g, r);
        let op = zero_dynamics_op(8);
        let diffusion = DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap();
        let config = SolverConfig::default();
        let env = solve_envelopes(&problem, &diffusion, &op, &config).unwrap();
        picard_iterate(&problem, &op, &env, &config).unwrap()
    }

    #[test]
    fn envelopes_on_constants() {
        let problem = constants_problem(&[1.0, 3.0], 5.0, 1.0);
        let op = zero_dynamics_op(8);
        let diffusion = DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap();
        let (upper, lower) =
            solve_envelopes(&problem, &diffusion, &op, &SolverConfig::default()).unwrap();
        for node in 0..op.num_nodes() {
            assert!((upper[node] - 3.0).abs() < 1e-10);
            assert!((lower[node] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_mode_envelopes_coincide() {
        let problem = constants_problem(&[2.0], 0.0, 0.5);
        let op = zero_dynamics_op(8);
        let diffusion = DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap();
        let (upper, lower) =
            solve_envelopes(&problem, &diffusion, &op, &SolverConfig::default()).unwrap();
        for node in 0..op.num_nodes() {
            assert!((upper[node] - lower[node]).abs() < 1e-12);
            assert!((upper[node] - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn geometric_single_mode_matches_closed_form() {
        // r v - mu x v' = x has v(x) = x / (r - mu) = 20 x; the interior
        // half of the box must be within 1% after the envelope-padded solve
        let diffusion = DiffusionSpec::geometric(vec![0.05], vec![vec![0.0]]).unwrap();
        let grid = build_grid(&[(0.5, 2.0)], &[256], BoundaryPolicy::DirichletEnvelope).unwrap();
        let op = discretize_generator(&diffusion, &grid).unwrap();
        let problem = SwitchingProblem::new(
            vec!["only".into()],
            vec![GeneratorSpec {
                expr: Expr::parse("x1", dims(1, 1, 1)).unwrap(),
                coupling: Coupling::StateOnly,
            }],
            vec![vec![Expr::constant(0.0)]],
            0.1,
            1,
            1,
        )
        .unwrap();
        let config = SolverConfig::default();
        let env = solve_envelopes(&problem, &diffusion, &op, &config).unwrap();
        let (field, _) = picard_iterate(&problem, &op, &env, &config).unwrap();
        let mut worst_rel = 0.0f64;
        for node in 0..grid.num_nodes() {
            let x = grid.node_coords(node)[0];
            if !(0.875..=1.625).contains(&x) {
                continue;
            }
            let exact = 20.0 * x;
            worst_rel = worst_rel.max((field.values[0][node] - exact).abs() / exact);
        }
        assert!(worst_rel < 0.01, "relative error {worst_rel}");
    }

    #[test]
    fn single_obstacle_zero_operator_cases() {
        let op = zero_dynamics_op(8);
        let n = op.num_nodes();
        let coords: Vec<Vec<f64>> = (0..n).map(|i| op.grid().node_coords(i)).collect();
        let cases: [(f64, f64, f64); 3] = [
            // (obstacle, profit, expected): min{v - phi, r v - f} = 0, r = 1
            (0.0, -1.0, 0.0),
            (0.0, 1.0, 1.0),
            (3.0, 0.0, 3.0),
        ];
        for method in [InnerMethod::PolicyIteration, InnerMethod::Penalized] {
            let config = SolverConfig {
                inner: method,
                ..SolverConfig::default()
            };
            for (phi, f, expected) in cases {
                let expr = Expr::constant(f);
                let gen = ExprGenerator {
                    expr: &expr,
                    coords: &coords,
                };
                let obstacle = vec![phi; n];
                let start = vec![phi.min(f); n];
                let (v, _) =
                    solve_single_obstacle(&obstacle, &gen, &op, 1.0, &config, None, &start)
                        .unwrap();
                let tol = match method {
                    InnerMethod::PolicyIteration => 1e-10,
                    // penalized violation is (r phi - f)+ / n_pen, up to 3e-4 here
                    InnerMethod::Penalized => 4e-4,
                };
                for node in 0..n {
                    assert!(
                        (v[node] - expected).abs() < tol,
                        "{method:?} phi={phi} f={f}: v = {} vs {expected}",
                        v[node]
                    );
                }
            }
        }
    }

    #[test]
    fn picard_constants_slack_obstacles() {
        let (field, trace) = solve_constants(&[1.0, 3.0], 5.0, 1.0);
        for node in 0..field.num_nodes() {
            assert!((field.values[0][node] - 1.0).abs() < 1e-8);
            assert!((field.values[1][node] - 3.0).abs() < 1e-8);
        }
        assert!(trace.worst_increment() >= -1e-7);
    }

    #[test]
    fn picard_constants_binding_obstacle() {
        let (field, trace) = solve_constants(&[1.0, 3.0], 1.0, 1.0);
        for node in 0..field.num_nodes() {
            assert!(
                (field.values[0][node] - 2.0).abs() < 1e-8,
                "{}",
                field.values[0][node]
            );
            assert!((field.values[1][node] - 3.0).abs() < 1e-8);
            // complementarity by hand: min(2-2, 2-1) = 0 and min(3-1, 0) = 0
            assert!(field.slack[0][node].abs() < 1e-8);
            assert!(field.slack[1][node].abs() < 1e-8);
        }
        assert!(trace.worst_increment() >= -1e-7);
    }

    #[test]
    fn residual_reports_hand_values() {
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let op = zero_dynamics_op(8);
        let (field, _) = solve_constants(&[1.0, 3.0], 1.0, 1.0);
        let rep = residual(&field, &problem, &op);
        assert!(rep.sup <= 1e-8, "sup residual {}", rep.sup);

        // all-zero field on the f1 = 1 problem: residual at least 1
        let zeros = ValueField::assemble(
            vec![vec![0.0; op.num_nodes()]; 2],
            &problem,
            &op,
            Provenance {
                solver: "test".into(),
                outer_iterations: 0,
                config_hash: String::new(),
            },
            1e-6,
        )
        .unwrap();
        let rep = residual(&zeros, &problem, &op);
        assert!(rep.sup >= 1.0 - 1e-12);
    }

    #[test]
    fn assemble_rejects_obstacle_violation() {
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let op = zero_dynamics_op(8);
        // v1 = 1.5 violates v1 >= v2 - g12 = 2
        let bad = vec![vec![1.5; op.num_nodes()], vec![3.0; op.num_nodes()]];
        match ValueField::assemble(
            bad,
            &problem,
            &op,
            Provenance {
                solver: "test".into(),
                outer_iterations: 0,
                config_hash: String::new(),
            },
            1e-6,
        ) {
            Err(QviError::ObstacleViolated { mode: 0, .. }) => {}
            other => panic!("expected obstacle violation, got {other:?}"),
        }
    }

    #[test]
    fn uniform_profit_shift_moves_values_by_delta_over_r() {
        let (base, _) = solve_constants(&[1.0, 3.0], 1.0, 1.0);
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0).shifted(2.0);
        let op = zero_dynamics_op(8);
        let diffusion = DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap();
        let config = SolverConfig::default();
        let env = solve_envelopes(&problem, &diffusion, &op, &config).unwrap();
        let (shifted, _) = picard_iterate(&problem, &op, &env, &config).unwrap();
        for i in 0..2 {
            for node in 0..base.num_nodes() {
                assert!(
                    (shifted.values[i][node] - base.values[i][node] - 2.0).abs() < 1e-8,
                    "mode {i} node {node}"
                );
            }
        }
    }

    #[test]
    fn penalized_and_policy_agree_on_binding_obstacle() {
        // OU drift, f = x/4, phi = 0: obstacle binds for x < 0
        let diffusion = DiffusionSpec::affine(vec![1.0], vec![0.0], vec![vec![0.3]]).unwrap();
        let grid = build_grid(&[(-1.0, 1.0)], &[64], BoundaryPolicy::NeumannZero).unwrap();
        let op = discretize_generator(&diffusion, &grid).unwrap();
        let n = op.num_nodes();
        let coords: Vec<Vec<f64>> = (0..n).map(|i| grid.node_coords(i)).collect();
        let expr = Expr::parse("x1/4", dims(1, 1, 1)).unwrap();
        let gen = ExprGenerator {
            expr: &expr,
            coords: &coords,
        };
        let obstacle = vec![0.0; n];
        let start = vec![0.0; n];
        let r = 0.5;
        let config = SolverConfig::default();
        let (v_policy, _) =
            solve_single_obstacle(&obstacle, &gen, &op, r, &config, None, &start).unwrap();
        let pen_config = SolverConfig {
            inner: InnerMethod::Penalized,
            ..config
        };
        let (v_pen, stats) =
            solve_single_obstacle(&obstacle, &gen, &op, r, &pen_config, None, &start).unwrap();
        let diff = sup_diff(&v_policy, &v_pen);
        assert!(diff <= 1e-4, "methods differ by {diff}");
        // negative part decreases along the schedule and the obstacle binds
        let profile = stats.penalty_profile;
        assert!(profile.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-13));
        assert!(
            profile.last().unwrap().1 > 0.0,
            "obstacle must bind somewhere"
        );
    }
}
