//! Euler-Maruyama simulation of the state diffusion.
//!
//! Paths are driven by a counter-based noise stream keyed by
//! (seed, path, step, component): regenerating a batch with the same key
//! data is bit-identical, and adding paths never perturbs existing ones.

use std::io::Write;

use thiserror::Error;

use crate::model::DiffusionSpec;
use crate::rng;

/// States beyond this magnitude abort the simulation: super-linear
/// coefficients must fail loudly rather than overflow to inf.
pub const EXPLOSION_BOUND: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("state exploded on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("checkpoint t = {t} is not on the step grid (dt = {dt})")]
    CheckpointOffGrid { t: f64, dt: f64 },
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A batch of simulated paths, immutable after construction.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
    dim: usize,
    /// Flat layout: state(p, j)[c] = states[(p*(n_steps+1) + j)*dim + c].
    states: Vec<f64>,
}

impl PathBatch {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// State of path `p` after `j` steps (j = 0 is the initial state).
    pub fn state(&self, p: usize, j: usize) -> &[f64] {
        let base = (p * (self.n_steps + 1) + j) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// Step times j*dt.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| j as f64 * self.dt).collect()
    }
}

/// Simulates `n_paths` Euler-Maruyama paths of the diffusion from `x0`
/// over [0, T] with step dt. The noise increment at (path, step) is
/// sqrt(dt) times an independent standard normal per component, drawn from
/// the counter-based stream keyed by (seed, path, step, component).
pub fn simulate_paths(
    diffusion: &DiffusionSpec,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch, SdeError> {
    if !(dt > 0.0) || horizon < dt || n_paths == 0 {
        return Err(SdeError::BadInput(format!(
            "need dt > 0, T >= dt, n_paths >= 1 (got dt = {dt}, T = {horizon}, n = {n_paths})"
        )));
    }
    if x0.len() != diffusion.dim_state {
        return Err(SdeError::BadInput(format!(
            "x0 has dimension {}, diffusion expects {}",
            x0.len(),
            diffusion.dim_state
        )));
    }
    let k = diffusion.dim_state;
    let d = diffusion.dim_noise;
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let mut states = vec![0.0; n_paths * (n_steps + 1) * k];
    let sqrt_dt = dt.sqrt();
    let mut drift = vec![0.0; k];
    let mut sigma = vec![0.0; k * d];
    for p in 0..n_paths {
        let base = p * (n_steps + 1) * k;
        states[base..base + k].copy_from_slice(x0);
        for j in 0..n_steps {
            let (head, tail) = states.split_at_mut(base + (j + 1) * k);
            let x = &head[base + j * k..];
            let next = &mut tail[..k];
            diffusion.drift(x, &mut drift);
            diffusion.diffusion(x, &mut sigma);
            for c in 0..k {
                next[c] = x[c] + drift[c] * dt;
            }
            for nc in 0..d {
                let dw = sqrt_dt * rng::normal_draw(seed, p as u64, j as u64, nc as u64);
                for c in 0..k {
                    next[c] += sigma[c * d + nc] * dw;
                }
            }
            for c in 0..k {
                if !next[c].is_finite() || next[c].abs() > EXPLOSION_BOUND {
                    return Err(SdeError::NonFiniteState { path: p, step: j + 1 });
                }
            }
        }
    }
    Ok(PathBatch {
        n_paths,
        n_steps,
        dt,
        seed,
        x0: x0.to_vec(),
        dim: k,
        states,
    })
}

/// Result of an empirical moment check against Prop-2.1-style bounds.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub q: u32,
    pub t: f64,
    pub empirical: f64,
    /// 99% bootstrap interval of the mean.
    pub ci: (f64, f64),
    /// Interval widened by the 5% relative Euler-bias allowance; present
    /// only when a reference was supplied.
    pub widened: Option<(f64, f64)>,
    pub reference: Option<f64>,
    pub passed: Option<bool>,
}

/// Empirical mean of |X_t|^q with a 99% bootstrap confidence interval.
/// When `reference` is given, the check passes iff it lies in the interval
/// widened by a 5% relative allowance for the Euler weak bias.
pub fn moment_check(
    batch: &PathBatch,
    q: u32,
    t: f64,
    reference: Option<f64>,
) -> Result<MomentReport, SdeError> {
    assert!(q == 2 || q == 4, "moment order must be 2 or 4");
    let steps = t / batch.dt;
    let j = steps.round() as usize;
    if j > batch.n_steps || (steps - j as f64).abs() > 1e-9 * steps.abs().max(1.0) {
        return Err(SdeError::CheckpointOffGrid { t, dt: batch.dt });
    }
    let n = batch.n_paths;
    let values: Vec<f64> = (0..n)
        .map(|p| {
            let x = batch.state(p, j);
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            match q {
                2 => norm2,
                _ => norm2 * norm2,
            }
        })
        .collect();
    let empirical = values.iter().sum::<f64>() / n as f64;

    let n_boot = 400;
    let mut boot_means = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let mut acc = 0.0;
        for i in 0..n {
            acc += values[rng::index_draw(batch.seed ^ 0x600d_b007, b as u64, i as u64, 0, n)];
        }
        boot_means.push(acc / n as f64);
    }
    boot_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = boot_means[(0.005 * (n_boot - 1) as f64).round() as usize];
    let hi = boot_means[(0.995 * (n_boot - 1) as f64).round() as usize];

    let (widened, passed) = match reference {
        Some(r) => {
            let pad = 0.05 * r.abs();
            let w = (lo - pad, hi + pad);
            (Some(w), Some(r >= w.0 && r <= w.1))
        }
        None => (None, None),
    };
    Ok(MomentReport {
        q,
        t,
        empirical,
        ci: (lo, hi),
        widened,
        reference,
        passed,
    })
}

/// Dumps the batch as CSV with header `path,step,t,x1..xk`.
pub fn write_paths_csv<W: Write>(batch: &PathBatch, out: &mut W) -> Result<(), SdeError> {
    write!(out, "path,step,t")?;
    for c in 0..batch.dim {
        write!(out, ",x{}", c + 1)?;
    }
    writeln!(out)?;
    for p in 0..batch.n_paths {
        for j in 0..=batch.n_steps {
            write!(out, "{p},{j},{}", j as f64 * batch.dt)?;
            for v in batch.state(p, j) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiffusionSpec;

    fn frozen() -> DiffusionSpec {
        DiffusionSpec::constant(vec![0.0], vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let b = simulate_paths(&frozen(), &[1.0], 0.1, 1.0, 4, 3).unwrap();
        for p in 0..4 {
            for j in 0..=b.n_steps {
                assert_eq!(b.state(p, j), &[1.0]);
            }
        }
    }

    #[test]
    fn geometric_drift_matches_ode() {
        // dX = 0.05 X dt, X_0 = 1: X_1 = e^{0.05}; Euler error O(dt)
        let d = DiffusionSpec::geometric(vec![0.05], vec![vec![0.0]]).unwrap();
        let b = simulate_paths(&d, &[1.0], 1e-3, 1.0, 1, 1).unwrap();
        let x_t = b.state(0, b.n_steps)[0];
        assert!((x_t - (0.05f64).exp()).abs() <= 0.01, "X_T = {x_t}");
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let d = DiffusionSpec::geometric(vec![0.1], vec![vec![0.3]]).unwrap();
        let a = simulate_paths(&d, &[1.0], 0.01, 1.0, 8, 99).unwrap();
        let b = simulate_paths(&d, &[1.0], 0.01, 1.0, 8, 99).unwrap();
        assert_eq!(a.states, b.states);
        // and growing the batch leaves the shared paths untouched
        let c = simulate_paths(&d, &[1.0], 0.01, 1.0, 16, 99).unwrap();
        for p in 0..8 {
            for j in 0..=a.n_steps {
                assert_eq!(a.state(p, j), c.state(p, j));
            }
        }
    }

    #[test]
    fn explosion_guard_reports_path_and_step() {
        // dX = X^3 dt explodes from a large start
        let expr = crate::expr::Expr::parse("x1^3", crate::expr::VarDims::state_only(1)).unwrap();
        let zero = crate::expr::Expr::constant(0.0);
        let d = DiffusionSpec::custom(vec![expr], vec![vec![zero]]).unwrap();
        match simulate_paths(&d, &[50.0], 0.5, 50.0, 1, 1) {
            Err(SdeError::NonFiniteState { path: 0, step }) => assert!(step >= 1),
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn brownian_second_moment() {
        // b = 0, sigma = 1: E[B_t^2] = t, and EM is exact here
        let d = DiffusionSpec::constant(vec![0.0], vec![vec![1.0]]).unwrap();
        let b = simulate_paths(&d, &[0.0], 0.05, 1.0, 20_000, 11).unwrap();
        let rep = moment_check(&b, 2, 1.0, Some(1.0)).unwrap();
        assert_eq!(rep.passed, Some(true), "CI {:?}", rep.ci);
        assert!((rep.empirical - 1.0).abs() < 0.05);
    }

    #[test]
    fn gbm_second_moment_closed_form() {
        // E[X_t^2] = x0^2 exp((2 mu + s^2) t)
        let (mu, s) = (0.05, 0.2);
        let d = DiffusionSpec::geometric(vec![mu], vec![vec![s]]).unwrap();
        let b = simulate_paths(&d, &[1.0], 1e-3, 1.0, 20_000, 21).unwrap();
        let reference = (2.0 * mu + s * s).exp();
        let rep = moment_check(&b, 2, 1.0, Some(reference)).unwrap();
        assert_eq!(rep.passed, Some(true), "CI {:?} ref {reference}", rep.ci);
    }

    #[test]
    fn deterministic_fourth_moment_is_exact() {
        let b = simulate_paths(&frozen(), &[2.0], 0.25, 1.0, 128, 5).unwrap();
        let rep = moment_check(&b, 2, 0.5, Some(4.0)).unwrap();
        assert_eq!(rep.empirical, 4.0);
        assert_eq!(rep.passed, Some(true));
    }

    #[test]
    fn off_grid_checkpoint_rejected() {
        let b = simulate_paths(&frozen(), &[0.0], 0.1, 1.0, 4, 5).unwrap();
        assert!(matches!(
            moment_check(&b, 2, 0.123, None),
            Err(SdeError::CheckpointOffGrid { .. })
        ));
    }

    #[test]
    fn flow_continuity_with_shared_noise() {
        // same seed from nearby starts: max |X^x - X^x'| <= Lambda(T) |x - x'|
        // with Lambda(T) = exp((L_b + L_sigma^2) T + 1) from the family constants
        for (diff, name) in [
            (DiffusionSpec::geometric(vec![0.05], vec![vec![0.2]]).unwrap(), "geometric"),
            (
                DiffusionSpec::affine(vec![1.0], vec![0.5], vec![vec![0.3]]).unwrap(),
                "affine",
            ),
        ] {
            let c = diff.constants().unwrap();
            let horizon = 1.0;
            let lambda =
                ((c.drift_lipschitz + c.diffusion_lipschitz * c.diffusion_lipschitz) * horizon
                    + 1.0)
                    .exp();
            let a = simulate_paths(&diff, &[1.0], 1e-3, horizon, 200, 17).unwrap();
            let b = simulate_paths(&diff, &[1.1], 1e-3, horizon, 200, 17).unwrap();
            let mut worst = 0.0f64;
            for p in 0..200 {
                for j in 0..=a.n_steps {
                    worst = worst.max((a.state(p, j)[0] - b.state(p, j)[0]).abs());
                }
            }
            assert!(worst <= lambda * 0.1 + 1e-12, "{name}: {worst} vs {}", lambda * 0.1);
        }
    }

    #[test]
    fn discounted_moment_decay_after_discount_check() {
        // affine mean-reverting family: e^{-rt} E|X_t|^2 non-increasing
        // across the tail checkpoints, within CI slack
        let diff = DiffusionSpec::affine(vec![1.0], vec![0.0], vec![vec![0.3]]).unwrap();
        let r = 0.5;
        let horizon = 8.0;
        let b = simulate_paths(&diff, &[1.0], 0.01, horizon, 4000, 23).unwrap();
        let mut last = f64::INFINITY;
        for frac in [0.5, 0.75, 1.0] {
            let t = frac * horizon;
            let rep = moment_check(&b, 2, t, None).unwrap();
            let discounted = (-r * t).exp() * rep.empirical;
            let slack = (-r * t).exp() * (rep.ci.1 - rep.ci.0);
            assert!(discounted <= last + slack, "t = {t}: {discounted} > {last}");
            last = discounted;
        }
    }

    #[test]
    fn zero_drift_terminal_mean_within_four_se() {
        let d = DiffusionSpec::constant(vec![0.0], vec![vec![1.0]]).unwrap();
        let b = simulate_paths(&d, &[3.0], 0.01, 1.0, 10_000, 31).unwrap();
        let terminal: Vec<f64> = (0..b.n_paths).map(|p| b.state(p, b.n_steps)[0]).collect();
        let mean = terminal.iter().sum::<f64>() / terminal.len() as f64;
        let var = terminal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (terminal.len() - 1) as f64;
        let se = (var / terminal.len() as f64).sqrt();
        assert!((mean - 3.0).abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn csv_dump_has_expected_shape() {
        let b = simulate_paths(&frozen(), &[1.0], 0.5, 1.0, 2, 5).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x1");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[1], "0,0,0,1");
    }
}
