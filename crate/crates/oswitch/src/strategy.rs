//! Switching policies and Monte Carlo strategy valuation.
//!
//! A solved value field induces a policy: switch wherever the obstacle
//! binds, stay elsewhere. Simulating that policy forward and accumulating
//! discounted profits minus switching costs estimates the strategy value,
//! which the value function must match at the initial point — the
//! probabilistic identity the solver is cross-checked against. The check
//! also plays two deliberately suboptimal policies (never switch; always
//! switch to the best alternative regardless of the binding test) whose
//! estimates must not beat the extracted policy's.
//!
//! Valuation is restricted to profits that read the state only: for
//! value- or gradient-coupled profits the forward value is not a path
//! functional, so those problems are verified through the PDE residual
//! suite instead.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::sha256_hex;
use crate::grid::Grid;
use crate::model::{Coupling, DiffusionSpec, SwitchingProblem};
use crate::qvi::{obstacle_value, ValueField};
use crate::rng;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy valuation requires state_only profits; generator {mode} is coupled")]
    CoupledGeneratorUnsupported { mode: usize },
    #[error(
        "path {path} exceeded {max_switches} switches by step {step}; \
         near-zero-cost loop or binding tolerance too large"
    )]
    MaxSwitchesExceeded {
        path: usize,
        step: usize,
        max_switches: usize,
    },
    #[error("state exploded on path {path} at step {step} during valuation")]
    NonFiniteState { path: usize, step: usize },
    #[error("test point {0:?} has the wrong dimension")]
    BadTestPoint(Vec<f64>),
}

/// Stay or move to another mode; decisions are per (mode, node) and total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Decision {
    Stay,
    SwitchTo(usize),
}

/// The stay/switch table extracted from a value field.
#[derive(Debug, Clone)]
pub struct SwitchingPolicy {
    /// decisions[mode][node].
    pub decisions: Vec<Vec<Decision>>,
    /// Binding tolerance used at extraction.
    pub eps_bind: f64,
    /// Digest of the source field's values.
    pub source_hash: String,
}

impl SwitchingPolicy {
    pub fn num_modes(&self) -> usize {
        self.decisions.len()
    }

    /// A policy that never switches (same shape as `self`).
    pub fn never_switch(&self) -> SwitchingPolicy {
        SwitchingPolicy {
            decisions: self
                .decisions
                .iter()
                .map(|row| vec![Decision::Stay; row.len()])
                .collect(),
            eps_bind: self.eps_bind,
            source_hash: format!("{}-never", self.source_hash),
        }
    }
}

fn field_digest(field: &ValueField) -> String {
    let mut bytes = Vec::with_capacity(field.num_modes() * field.num_nodes() * 8);
    for v in &field.values {
        for x in v {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Reads the binding set off the field: at (i, node), switch to the best
/// alternative j when vⁱ lies within `eps_bind` of max_j(vʲ - g_ij),
/// lowest index winning ties; stay otherwise.
pub fn extract_policy(
    field: &ValueField,
    problem: &SwitchingProblem,
    grid: &Grid,
    eps_bind: f64,
) -> SwitchingPolicy {
    let m = field.num_modes();
    let n = field.num_nodes();
    let mut decisions = vec![vec![Decision::Stay; n]; m];
    for node in 0..n {
        let x = grid.node_coords(node);
        for i in 0..m {
            let (best, arg) = obstacle_value(problem, &field.values, &x, node, i);
            if let Some(j) = arg {
                if field.values[i][node] <= best + eps_bind {
                    decisions[i][node] = Decision::SwitchTo(j);
                }
            }
        }
    }
    SwitchingPolicy {
        decisions,
        eps_bind,
        source_hash: field_digest(field),
    }
}

/// The cost-blind perturbation: switch everywhere to argmax_j(vʲ - g_ij),
/// ignoring whether the obstacle actually binds. Deliberately suboptimal;
/// used as a dominance control in the probabilistic check.
pub fn always_switch_policy(
    field: &ValueField,
    problem: &SwitchingProblem,
    grid: &Grid,
) -> SwitchingPolicy {
    let m = field.num_modes();
    let n = field.num_nodes();
    let mut decisions = vec![vec![Decision::Stay; n]; m];
    for node in 0..n {
        let x = grid.node_coords(node);
        for i in 0..m {
            if let (_, Some(j)) = obstacle_value(problem, &field.values, &x, node, i) {
                decisions[i][node] = Decision::SwitchTo(j);
            }
        }
    }
    SwitchingPolicy {
        decisions,
        eps_bind: f64::INFINITY,
        source_hash: format!("{}-always", field_digest(field)),
    }
}

/// Monte Carlo settings for strategy valuation.
#[derive(Debug, Clone)]
pub struct McSettings {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Total switches allowed per path before the valuation aborts.
    pub max_switches: usize,
    /// Record every switch for the optional log.
    pub log_switches: bool,
}

/// One recorded switch.
#[derive(Debug, Clone, Serialize)]
pub struct SwitchEvent {
    pub path: usize,
    pub t: f64,
    /// 1-based mode indices, matching the v1..vm column naming.
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Point estimate of a strategy value with its sampling error and the
/// truncation bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyValueEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub horizon: f64,
    /// e^{-rT} times the polynomial tail cap: the discarded-tail bound.
    pub tail_bound: f64,
    pub settings_hash: String,
    /// Fraction of steps whose policy lookup needed clamping into the box.
    pub clamped_fraction: f64,
    /// Set when more than 1% of steps were clamped.
    pub boundary_contaminated: bool,
    pub total_switches: u64,
    #[serde(skip)]
    pub switch_log: Vec<SwitchEvent>,
}

struct PathOutcome {
    value: f64,
    switches: u64,
    clamped_steps: u64,
    log: Vec<SwitchEvent>,
}

/// Simulates the controlled system under `policy` from (x0, mode0) and
/// averages the discounted profit-minus-costs functional over paths.
///
/// Per step: the decision at the nearest node may chain through at most
/// m-1 switches (each paying its discounted cost), then the current
/// mode's profit accrues by left-endpoint quadrature and the state moves
/// one Euler step. Paths leaving the box are clamped for the policy
/// lookup only and counted; aggregation is in path order so the result is
/// bit-identical for any thread count.
pub fn evaluate_strategy(
    policy: &SwitchingPolicy,
    problem: &SwitchingProblem,
    diffusion: &DiffusionSpec,
    grid: &Grid,
    x0: &[f64],
    mode0: usize,
    mc: &McSettings,
) -> Result<StrategyValueEstimate, StrategyError> {
    for i in 0..problem.num_modes() {
        if problem.generator(i).coupling != Coupling::StateOnly {
            return Err(StrategyError::CoupledGeneratorUnsupported { mode: i });
        }
    }
    if x0.len() != diffusion.dim_state {
        return Err(StrategyError::BadTestPoint(x0.to_vec()));
    }
    let n_steps = (mc.horizon / mc.dt).round().max(1.0) as usize;
    let r = problem.discount;
    let discounts: Vec<f64> = (0..n_steps)
        .map(|j| (-r * j as f64 * mc.dt).exp())
        .collect();
    let m = problem.num_modes();
    let k = diffusion.dim_state;
    let d = diffusion.dim_noise;
    let sqrt_dt = mc.dt.sqrt();

    let run_path = |p: usize| -> Result<PathOutcome, StrategyError> {
        let mut x = x0.to_vec();
        let mut drift = vec![0.0; k];
        let mut sigma = vec![0.0; k * d];
        let mut mode = mode0;
        let mut value = 0.0;
        let mut switches = 0u64;
        let mut clamped_steps = 0u64;
        let mut log = Vec::new();
        for j in 0..n_steps {
            let disc = discounts[j];
            // chained decisions, at most m-1 per step
            for chain in 1..m {
                let (node, clamped) = grid.nearest_node(&x);
                if clamped && chain == 1 {
                    clamped_steps += 1;
                }
                match policy.decisions[mode][node] {
                    Decision::Stay => break,
                    Decision::SwitchTo(j_to) => {
                        let cost = problem.cost(mode, j_to, &x);
                        value -= disc * cost;
                        if mc.log_switches {
                            log.push(SwitchEvent {
                                path: p,
                                t: j as f64 * mc.dt,
                                from: mode + 1,
                                to: j_to + 1,
                                cost,
                            });
                        }
                        mode = j_to;
                        switches += 1;
                        if switches as usize > mc.max_switches {
                            return Err(StrategyError::MaxSwitchesExceeded {
                                path: p,
                                step: j,
                                max_switches: mc.max_switches,
                            });
                        }
                    }
                }
            }
            value += disc * problem.profit(mode, &x, &[], &[]) * mc.dt;
            // Euler step with the counter-based stream keyed (seed, path, step)
            diffusion.drift(&x, &mut drift);
            diffusion.diffusion(&x, &mut sigma);
            for c in 0..k {
                x[c] += drift[c] * mc.dt;
            }
            for nc in 0..d {
                let dw = sqrt_dt * rng::normal_draw(mc.seed, p as u64, j as u64, nc as u64);
                for c in 0..k {
                    x[c] += sigma[c * d + nc] * dw;
                }
            }
            for v in &x {
                if !v.is_finite() || v.abs() > crate::sde::EXPLOSION_BOUND {
                    return Err(StrategyError::NonFiniteState { path: p, step: j + 1 });
                }
            }
        }
        Ok(PathOutcome {
            value,
            switches,
            clamped_steps,
            log,
        })
    };

    let outcomes: Result<Vec<PathOutcome>, StrategyError> =
        (0..mc.n_paths).into_par_iter().map(run_path).collect();
    let outcomes = outcomes?;

    let n = mc.n_paths as f64;
    let mean = outcomes.iter().map(|o| o.value).sum::<f64>() / n;
    let var = if mc.n_paths > 1 {
        outcomes
            .iter()
            .map(|o| (o.value - mean) * (o.value - mean))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    let std_error = (var / n).sqrt();
    let total_switches: u64 = outcomes.iter().map(|o| o.switches).sum();
    let clamped: u64 = outcomes.iter().map(|o| o.clamped_steps).sum();
    let clamped_fraction = clamped as f64 / (n * n_steps as f64);
    let mut switch_log = Vec::new();
    if mc.log_switches {
        for o in &outcomes {
            switch_log.extend(o.log.iter().cloned());
        }
    }
    let radius = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tail_cap = 1.0 + radius;
    let settings = format!(
        "dt={};T={};n={};seed={};max_switches={};x0={:?};mode0={};policy={}",
        mc.dt, mc.horizon, mc.n_paths, mc.seed, mc.max_switches, x0, mode0, policy.source_hash
    );
    Ok(StrategyValueEstimate {
        estimate: mean,
        std_error,
        n_paths: mc.n_paths,
        horizon: mc.horizon,
        tail_bound: (-r * mc.horizon).exp() * tail_cap,
        settings_hash: sha256_hex(settings.as_bytes()),
        clamped_fraction,
        boundary_contaminated: clamped_fraction > 0.01,
        total_switches,
        switch_log,
    })
}

/// One test point's outcome in the probabilistic cross-check.
#[derive(Debug, Clone, Serialize)]
pub struct TestPointResult {
    pub x0: Vec<f64>,
    /// 1-based mode index.
    pub mode: usize,
    /// Value function at the test point (multilinear interpolation).
    pub v: f64,
    pub j_hat: f64,
    pub se: f64,
    /// (name, estimate, std error) of each perturbed policy.
    pub j_sub: Vec<(String, f64, f64)>,
    pub verdict: bool,
    pub boundary_contaminated: bool,
}

/// Full report of the probabilistic cross-check.
#[derive(Debug, Clone, Serialize)]
pub struct FeynmanKacReport {
    pub points: Vec<TestPointResult>,
    pub eps_disc: f64,
    pub eps_bind: f64,
    pub passed: bool,
}

/// Validates the value field against Monte Carlo strategy values: at each
/// test point (x0, mode) the extracted policy's estimate must match
/// v(x0) within 3 standard errors plus the discretization allowance
/// `eps_disc`, and neither perturbed policy may beat it by more than two
/// combined standard errors.
pub fn feynman_kac_check(
    field: &ValueField,
    problem: &SwitchingProblem,
    diffusion: &DiffusionSpec,
    grid: &Grid,
    test_points: &[(Vec<f64>, usize)],
    mc: &McSettings,
    eps_bind: f64,
    eps_disc: f64,
) -> Result<FeynmanKacReport, StrategyError> {
    let policy = extract_policy(field, problem, grid, eps_bind);
    let never = policy.never_switch();
    let always = always_switch_policy(field, problem, grid);
    let n_steps = (mc.horizon / mc.dt).round().max(1.0) as usize;
    // the cost-blind policy switches every step by design; give it room
    let always_mc = McSettings {
        max_switches: n_steps * problem.num_modes().max(2) + problem.num_modes(),
        ..mc.clone()
    };
    let mut points = Vec::with_capacity(test_points.len());
    let mut passed = true;
    for (x0, mode) in test_points {
        if x0.len() != grid.dim() {
            return Err(StrategyError::BadTestPoint(x0.clone()));
        }
        let v = grid.interpolate(&field.values[*mode], x0);
        let star = evaluate_strategy(&policy, problem, diffusion, grid, x0, *mode, mc)?;
        let never_est = evaluate_strategy(&never, problem, diffusion, grid, x0, *mode, mc)?;
        let always_est =
            evaluate_strategy(&always, problem, diffusion, grid, x0, *mode, &always_mc)?;
        let value_close = (v - star.estimate).abs() <= 3.0 * star.std_error + eps_disc;
        let dominated = [&never_est, &always_est].iter().all(|sub| {
            let combined = (star.std_error.powi(2) + sub.std_error.powi(2)).sqrt();
            sub.estimate <= star.estimate + 2.0 * combined
        });
        let verdict = value_close && dominated;
        passed &= verdict;
        points.push(TestPointResult {
            x0: x0.clone(),
            mode: mode + 1,
            v,
            j_hat: star.estimate,
            se: star.std_error,
            j_sub: vec![
                (
                    "never_switch".into(),
                    never_est.estimate,
                    never_est.std_error,
                ),
                (
                    "always_switch".into(),
                    always_est.estimate,
                    always_est.std_error,
                ),
            ],
            verdict,
            boundary_contaminated: star.boundary_contaminated,
        });
    }
    Ok(FeynmanKacReport {
        points,
        eps_disc,
        eps_bind,
        passed,
    })
}

/// Writes the optional switch log as CSV `path,t,from,to,cost`.
pub fn write_switch_log<W: std::io::Write>(
    events: &[SwitchEvent],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "path,t,from,to,cost")?;
    for e in events {
        writeln!(out, "{},{},{},{},{}", e.path, e.t, e.from, e.to, e.cost)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::grid::{build_grid, discretize_generator, BoundaryPolicy};
    use crate::model::GeneratorSpec;
    use crate::qvi::{picard_iterate, solve_envelopes, SolverConfig};

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

    fn frozen_diffusion() -> DiffusionSpec {
        DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap()
    }

    fn solve(problem: &SwitchingProblem) -> (ValueField, Grid) {
        let diffusion = frozen_diffusion();
        let grid = build_grid(&[(0.0, 1.0)], &[8], BoundaryPolicy::NeumannZero).unwrap();
        let op = discretize_generator(&diffusion, &grid).unwrap();
        let config = SolverConfig::default();
        let env = solve_envelopes(problem, &diffusion, &op, &config).unwrap();
        let (field, _) = picard_iterate(problem, &op, &env, &config).unwrap();
        (field, grid)
    }

    fn mc(dt: f64, horizon: f64, n_paths: usize) -> McSettings {
        McSettings {
            dt,
            horizon,
            n_paths,
            seed: 7,
            max_switches: 64,
            log_switches: false,
        }
    }

    #[test]
    fn extraction_on_binding_and_slack_cases() {
        // g = 1: field is (2, 3); mode 1 switches to 2, mode 2 stays
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let policy = extract_policy(&field, &problem, &grid, 1e-9);
        for node in 0..field.num_nodes() {
            assert_eq!(policy.decisions[0][node], Decision::SwitchTo(1));
            assert_eq!(policy.decisions[1][node], Decision::Stay);
        }

        // g = 5: field is (1, 3), slack by 3 units: stay everywhere
        let problem = constants_problem(&[1.0, 3.0], 5.0, 1.0);
        let (field, grid) = solve(&problem);
        let policy = extract_policy(&field, &problem, &grid, 1e-9);
        for node in 0..field.num_nodes() {
            assert_eq!(policy.decisions[0][node], Decision::Stay);
            assert_eq!(policy.decisions[1][node], Decision::Stay);
        }
    }

    #[test]
    fn tie_break_picks_lowest_index() {
        // three modes, equal v_j - g_ij for j = 2, 3 seen from mode 1
        let problem = constants_problem(&[1.0, 3.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let policy = extract_policy(&field, &problem, &grid, 1e-9);
        for node in 0..field.num_nodes() {
            assert_eq!(policy.decisions[0][node], Decision::SwitchTo(1));
        }
    }

    #[test]
    fn extraction_invariant_under_common_shift() {
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let shifted_problem = problem.shifted(5.0);
        let (shifted_field, _) = solve(&shifted_problem);
        let a = extract_policy(&field, &problem, &grid, 1e-9);
        let b = extract_policy(&shifted_field, &shifted_problem, &grid, 1e-9);
        assert_eq!(a.decisions, b.decisions);
    }

    #[test]
    fn deterministic_stay_policy_closed_form() {
        // f2 = 3, r = 1, stay forever: J = 3 (1 - e^{-20}) up to quadrature
        let problem = constants_problem(&[1.0, 3.0], 5.0, 1.0);
        let (field, grid) = solve(&problem);
        let policy = extract_policy(&field, &problem, &grid, 1e-9).never_switch();
        let est = evaluate_strategy(
            &policy,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[0.5],
            1,
            &mc(5e-5, 20.0, 1),
        )
        .unwrap();
        assert!((est.estimate - 3.0).abs() < 1e-4, "J = {}", est.estimate);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.total_switches, 0);
    }

    #[test]
    fn switch_then_stay_pays_one_cost() {
        // from mode 1 with g12 = 1: switch at t = 0 then earn 3: J = 2
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let policy = extract_policy(&field, &problem, &grid, 1e-9);
        let settings = McSettings {
            log_switches: true,
            ..mc(5e-5, 20.0, 1)
        };
        let est = evaluate_strategy(
            &policy,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[0.5],
            0,
            &settings,
        )
        .unwrap();
        assert!((est.estimate - 2.0).abs() < 1e-4, "J = {}", est.estimate);
        assert_eq!(est.total_switches, 1);
        assert_eq!(est.switch_log.len(), 1);
        assert_eq!(est.switch_log[0].from, 1);
        assert_eq!(est.switch_log[0].to, 2);
        assert_eq!(est.switch_log[0].cost, 1.0);

        // never switching from mode 1 earns 1
        let never = policy.never_switch();
        let est = evaluate_strategy(
            &never,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[0.5],
            0,
            &mc(5e-5, 20.0, 1),
        )
        .unwrap();
        assert!((est.estimate - 1.0).abs() < 1e-4);
    }

    #[test]
    fn valuation_is_bit_deterministic() {
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let diffusion = DiffusionSpec::affine(vec![1.0], vec![0.5], vec![vec![0.3]]).unwrap();
        // state_only profits with a stochastic state: still valid
        let policy = extract_policy(&field, &problem, &grid, 1e-9);
        let settings = mc(0.01, 5.0, 500);
        let a =
            evaluate_strategy(&policy, &problem, &diffusion, &grid, &[0.5], 0, &settings).unwrap();
        let b =
            evaluate_strategy(&policy, &problem, &diffusion, &grid, &[0.5], 0, &settings).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn coupled_generators_are_rejected() {
        let dims = crate::expr::VarDims {
            state: 1,
            value: 2,
            gradient: 1,
        };
        let problem = SwitchingProblem::new(
            vec!["a".into(), "b".into()],
            vec![
                GeneratorSpec {
                    expr: Expr::parse("y1", dims).unwrap(),
                    coupling: Coupling::OwnComponent,
                },
                GeneratorSpec {
                    expr: Expr::constant(0.0),
                    coupling: Coupling::StateOnly,
                },
            ],
            vec![
                vec![Expr::constant(0.0), Expr::constant(1.0)],
                vec![Expr::constant(1.0), Expr::constant(0.0)],
            ],
            1.0,
            1,
            1,
        )
        .unwrap();
        let grid = build_grid(&[(0.0, 1.0)], &[8], BoundaryPolicy::NeumannZero).unwrap();
        let policy = SwitchingPolicy {
            decisions: vec![vec![Decision::Stay; 9]; 2],
            eps_bind: 0.0,
            source_hash: "x".into(),
        };
        match evaluate_strategy(
            &policy,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[0.5],
            0,
            &mc(0.1, 1.0, 2),
        ) {
            Err(StrategyError::CoupledGeneratorUnsupported { mode: 0 }) => {}
            other => panic!("expected coupling rejection, got {other:?}"),
        }
    }

    #[test]
    fn feynman_kac_on_constants_is_exact() {
        let problem = constants_problem(&[1.0, 3.0], 1.0, 1.0);
        let (field, grid) = solve(&problem);
        let report = feynman_kac_check(
            &field,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[(vec![0.5], 0), (vec![0.5], 1)],
            &mc(5e-5, 20.0, 1),
            1e-9,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{:#?}", report.points);
        // mode 1: v = 2 matched by J* = 2; never-switch gives 1 <= 2
        let p0 = &report.points[0];
        assert!((p0.v - 2.0).abs() < 1e-6);
        assert!((p0.j_hat - 2.0).abs() < 1e-3);
        assert!(p0
            .j_sub
            .iter()
            .any(|(name, est, _)| { name == "never_switch" && (est - 1.0).abs() < 1e-3 }));
    }

    #[test]
    fn single_mode_check_is_trivially_consistent() {
        let problem = constants_problem(&[2.0], 0.0, 0.5);
        let (field, grid) = solve(&problem);
        let report = feynman_kac_check(
            &field,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[(vec![0.5], 0)],
            &mc(1e-4, 40.0, 1),
            1e-9,
            1e-2,
        )
        .unwrap();
        assert!(report.passed);
        assert!((report.points[0].v - 4.0).abs() < 1e-6);
    }

    #[test]
    fn max_switches_guard_trips_on_forced_loop() {
        let problem = constants_problem(&[1.0, 3.0], 0.5, 1.0);
        let (field, grid) = solve(&problem);
        let always = always_switch_policy(&field, &problem, &grid);
        match evaluate_strategy(
            &always,
            &problem,
            &frozen_diffusion(),
            &grid,
            &[0.5],
            0,
            &mc(0.01, 10.0, 1),
        ) {
            Err(StrategyError::MaxSwitchesExceeded { .. }) => {}
            other => panic!("expected switch-cap abort, got {other:?}"),
        }
    }
}
