//! Admissible switching strategies as adapted feedback policies, Monte Carlo
//! evaluation of the primal reward J = J₁ − J₂, and the truncation /
//! mode-projection constructions used to approximate arbitrary strategies by
//! finitely-supported ones.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::modespace::{Mode, ModeSpace};
use crate::problem::{PathPrefix, PrefixBuffer, SwitchingProblem};
use crate::simulate::{
    euler_step, mode_process, sample_brownian, sample_poisson_measure, BrownianGrid, ModePath,
    SimError, StatePath, TimeGrid,
};
use crate::stream::{substream, Purpose};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("policy chose mode {0} outside the mode set")]
    ModeOutsideSpace(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Stay in the current mode or switch to a new one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Stay,
    SwitchTo(Mode),
}

/// Everything a policy may look at when queried at a grid time: strictly the
/// information generated up to t_i.
pub struct PolicyContext<'a> {
    pub step: usize,
    pub t: f64,
    pub path: &'a PathPrefix<'a>,
    /// Cumulative Brownian values W_{t_0..t_i}, row-major (i+1)×d.
    pub brownian: &'a [f64],
    pub noise_dim: usize,
    pub current_mode: Mode,
    /// Switches executed so far in this scenario.
    pub switches: &'a [(f64, Mode)],
}

/// Adapted feedback rule. Must be pure and thread-safe; it is queried at the
/// interior grid times t_1..t_{N−1} only (no switch at 0 or T).
pub trait SwitchingPolicy: Send + Sync {
    fn decide(&self, ctx: &PolicyContext) -> Decision;
    /// Optional hard cap on the number of switches.
    fn max_switches(&self) -> Option<usize> {
        None
    }
}

/// The wait-and-see strategy (τ_n ≡ ∞).
pub struct NeverSwitch;

impl SwitchingPolicy for NeverSwitch {
    fn decide(&self, _ctx: &PolicyContext) -> Decision {
        Decision::Stay
    }
    fn max_switches(&self) -> Option<usize> {
        Some(0)
    }
}

/// Switch to a fixed target once the clock passes `at`.
pub struct TimeThreshold {
    pub at: f64,
    pub target: Mode,
}

impl SwitchingPolicy for TimeThreshold {
    fn decide(&self, ctx: &PolicyContext) -> Decision {
        if ctx.t >= self.at && ctx.current_mode != self.target {
            Decision::SwitchTo(self.target)
        } else {
            Decision::Stay
        }
    }
}

/// Ad-hoc policy from a closure.
pub struct FnPolicy {
    pub rule: Arc<dyn Fn(&PolicyContext) -> Decision + Send + Sync>,
    pub cap: Option<usize>,
}

impl SwitchingPolicy for FnPolicy {
    fn decide(&self, ctx: &PolicyContext) -> Decision {
        (self.rule)(ctx)
    }
    fn max_switches(&self) -> Option<usize> {
        self.cap
    }
}

/// Realized strategy on one scenario: (τ_n, ξ_n) with strictly increasing
/// grid times; no-op switches are dropped, none occur at 0 or T.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRealization {
    pub switches: Vec<(f64, Mode)>,
}

/// Outcome of driving one scenario with a policy.
#[derive(Debug)]
pub struct PolicyRun {
    pub realization: StrategyRealization,
    pub path: StatePath,
    /// Σ f(t_i, ·, α(t_i))Δt + g(X, α(T)).
    pub j1_sample: f64,
    /// Σ_n 1_{τ_n<T} c(τ_n, X, ξ_{n−1}, ξ_n).
    pub j2_sample: f64,
}

/// Advance the Euler recursion step by step, querying the policy at each
/// interior grid time; a switch takes effect for the step starting at t_i.
pub fn run_policy(
    problem: &SwitchingProblem,
    policy: &dyn SwitchingPolicy,
    brownian: &BrownianGrid,
    grid: &TimeGrid,
) -> Result<PolicyRun, StrategyError> {
    let n = grid.n_steps;
    let dt = grid.dt();
    let d = problem.dim_noise;
    let mut buf = PrefixBuffer::with_capacity(problem.dim_state, n + 1);
    buf.push(0.0, &problem.x0);
    let mut w_cum: Vec<f64> = vec![0.0; d];
    let mut mode = problem.xi0;
    let mut switches: Vec<(f64, Mode)> = Vec::new();
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    let cap = policy.max_switches();

    for i in 0..n {
        let t = grid.time(i);
        let next = {
            let prefix = buf.last_prefix();
            if i >= 1 && cap.is_none_or(|c| switches.len() < c) {
                let ctx = PolicyContext {
                    step: i,
                    t,
                    path: &prefix,
                    brownian: &w_cum,
                    noise_dim: d,
                    current_mode: mode,
                    switches: &switches,
                };
                if let Decision::SwitchTo(target) = policy.decide(&ctx) {
                    if !problem.modes.contains(&target) {
                        return Err(StrategyError::ModeOutsideSpace(target.to_string()));
                    }
                    if target != mode {
                        j2 += (problem.switch_cost)(t, &prefix, &mode, &target);
                        switches.push((t, target));
                        mode = target;
                    }
                }
            }
            j1 += (problem.running_reward)(t, &prefix, &mode) * dt;
            euler_step(problem, t, &prefix, &mode, brownian.increment(i), dt)?
        };
        buf.push(grid.time(i + 1), &next);
        let base = w_cum.len();
        w_cum.extend_from_within(base - d..base);
        for (k, dw) in brownian.increment(i).iter().enumerate() {
            w_cum[base + k] += dw;
        }
    }
    let path = StatePath::from_buffer(buf, problem.dim_state);
    j1 += (problem.terminal_reward)(&path.terminal_prefix(), &mode);
    Ok(PolicyRun {
        realization: StrategyRealization { switches },
        path,
        j1_sample: j1,
        j2_sample: j2,
    })
}

/// Sample mean and standard error of j1 − j2 over M independent scenarios.
pub fn estimate_reward(
    problem: &SwitchingProblem,
    policy: &dyn SwitchingPolicy,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<(f64, f64), StrategyError> {
    assert!(m >= 2, "need at least two scenarios for a standard error");
    let samples: Vec<Result<f64, StrategyError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let mut rng = substream(seed, idx, Purpose::Brownian);
            let bg = sample_brownian(grid, problem.dim_noise, &mut rng);
            let run = run_policy(problem, policy, &bg, grid)?;
            Ok(run.j1_sample - run.j2_sample)
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    for s in samples {
        values.push(s?);
    }
    Ok(mean_stderr(&values))
}

pub(crate) fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Identical decisions until `n` switches have occurred, then always stay.
pub struct TruncatedPolicy<P> {
    pub inner: P,
    pub limit: usize,
}

impl<P: SwitchingPolicy> SwitchingPolicy for TruncatedPolicy<P> {
    fn decide(&self, ctx: &PolicyContext) -> Decision {
        if ctx.switches.len() >= self.limit {
            Decision::Stay
        } else {
            self.inner.decide(ctx)
        }
    }
    fn max_switches(&self) -> Option<usize> {
        Some(match self.inner.max_switches() {
            Some(c) => c.min(self.limit),
            None => self.limit,
        })
    }
}

pub fn truncate_policy<P: SwitchingPolicy>(policy: P, limit: usize) -> TruncatedPolicy<P> {
    TruncatedPolicy { inner: policy, limit }
}

/// Every switch target replaced by its projection Π_k onto the first k
/// elements of the dense sequence.
pub struct ProjectedPolicy<P> {
    pub inner: P,
    pub modes: ModeSpace,
    pub k: usize,
}

impl<P: SwitchingPolicy> SwitchingPolicy for ProjectedPolicy<P> {
    fn decide(&self, ctx: &PolicyContext) -> Decision {
        match self.inner.decide(ctx) {
            Decision::SwitchTo(target) => match self.modes.project_nearest(&target, self.k) {
                Ok(projected) => {
                    if projected == ctx.current_mode {
                        Decision::Stay
                    } else {
                        Decision::SwitchTo(projected)
                    }
                }
                Err(_) => Decision::SwitchTo(target),
            },
            Decision::Stay => Decision::Stay,
        }
    }
    fn max_switches(&self) -> Option<usize> {
        self.inner.max_switches()
    }
}

pub fn project_policy_modes<P: SwitchingPolicy>(
    policy: P,
    modes: ModeSpace,
    k: usize,
) -> ProjectedPolicy<P> {
    assert!(k >= 1);
    ProjectedPolicy {
        inner: policy,
        modes,
        k,
    }
}

/// Time-discretized stability metric ρ̃: Σ_i ρ(α¹(t_i), α²(t_i))·Δt.
pub fn mode_path_distance(
    modes: &ModeSpace,
    a: &ModePath,
    b: &ModePath,
    grid: &TimeGrid,
) -> f64 {
    (0..grid.n_steps)
        .map(|i| {
            let t = grid.time(i);
            modes.metric_unchecked(&a.value(t), &b.value(t)) * grid.dt()
        })
        .sum()
}

/// Empirical bound on |J₁| (hence on the switching value): the sampled max of
/// Σ|f|Δt + |g| along randomized scenarios.
pub fn empirical_reward_bound(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<f64, StrategyError> {
    let samples: Vec<Result<f64, StrategyError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let mut brng = substream(seed, idx, Purpose::Brownian);
            let mut prng = substream(seed, idx, Purpose::PoissonCount);
            let bg = sample_brownian(grid, problem.dim_noise, &mut brng);
            let mpp = sample_poisson_measure(&problem.modes, grid.horizon, &mut prng);
            let mode_path = mode_process(&mpp, problem.xi0);
            let x = crate::simulate::euler_path(problem, &mode_path, &bg, grid)?;
            let mut total = 0.0;
            for i in 0..grid.n_steps {
                let t = grid.time(i);
                let prefix = x.prefix(i);
                total +=
                    (problem.running_reward)(t, &prefix, &mode_path.value(t)).abs() * grid.dt();
            }
            total += (problem.terminal_reward)(
                &x.terminal_prefix(),
                &mode_path.terminal(grid.horizon),
            )
            .abs();
            Ok(total)
        })
        .collect();
    let mut best = 0.0_f64;
    for s in samples {
        best = best.max(s?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::catalog;

    fn p1() -> SwitchingProblem {
        catalog("p1-two-mode-det").unwrap()
    }

    fn brownian_for(problem: &SwitchingProblem, grid: &TimeGrid, idx: u64) -> BrownianGrid {
        let mut rng = substream(11, idx, Purpose::Brownian);
        sample_brownian(grid, problem.dim_noise, &mut rng)
    }

    #[test]
    fn never_switch_has_zero_cost() {
        let p = p1();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let bg = brownian_for(&p, &grid, 0);
        let run = run_policy(&p, &NeverSwitch, &bg, &grid).unwrap();
        assert_eq!(run.j2_sample, 0.0);
        assert!(run.realization.switches.is_empty());
    }

    #[test]
    fn constant_running_reward_integrates_to_horizon() {
        let mut p = p1();
        p.running_reward = Arc::new(|_, _, _| 1.0);
        p.terminal_reward = Arc::new(|_, _| 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bg = brownian_for(&p, &grid, 0);
        let run = run_policy(&p, &NeverSwitch, &bg, &grid).unwrap();
        assert!((run.j1_sample - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_policy_matches_piecewise_ode() {
        // P1, switch 0→1 at t ≥ 0.2, σ = 0: hold f = −1 on [0, 0.2), then
        // track x(t) = 1 − e^{−(t−0.2)} giving ∫ −e^{−2(t−0.2)} dt, minus the
        // switching cost.
        let p = p1();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let bg = brownian_for(&p, &grid, 0);
        let policy = TimeThreshold {
            at: 0.2,
            target: Mode::Finite(1),
        };
        let run = run_policy(&p, &policy, &bg, &grid).unwrap();
        let expected = -0.2 - (1.0 - (-1.6f64).exp()) / 2.0 - 0.1;
        let got = run.j1_sample - run.j2_sample;
        assert!((got - expected).abs() <= 1e-3, "got {got}, expected {expected}");
        assert_eq!(run.realization.switches.len(), 1);
        assert_eq!(run.realization.switches[0].0, 0.2);
    }

    #[test]
    fn deterministic_problem_has_zero_stderr() {
        let p = p1();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let (_, stderr) = estimate_reward(&p, &NeverSwitch, &grid, 64, 3).unwrap();
        assert!(stderr <= 1e-15, "stderr {stderr}");
    }

    #[test]
    fn stderr_scales_like_clt() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let policy = TimeThreshold {
            at: 0.3,
            target: Mode::Finite(2),
        };
        let (_, se_small) = estimate_reward(&p, &policy, &grid, 100, 7).unwrap();
        let (_, se_large) = estimate_reward(&p, &policy, &grid, 10_000, 7).unwrap();
        let ratio = se_small / se_large;
        assert!(ratio > 5.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn truncation_to_zero_is_never_switch() {
        let p = p1();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let bg = brownian_for(&p, &grid, 2);
        let policy = truncate_policy(
            TimeThreshold {
                at: 0.1,
                target: Mode::Finite(1),
            },
            0,
        );
        let run = run_policy(&p, &policy, &bg, &grid).unwrap();
        assert!(run.realization.switches.is_empty());
        assert_eq!(run.j2_sample, 0.0);
    }

    #[test]
    fn generous_truncation_is_identity() {
        let p = p1();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let bg = brownian_for(&p, &grid, 2);
        let base = TimeThreshold {
            at: 0.1,
            target: Mode::Finite(1),
        };
        let run_base = run_policy(&p, &base, &bg, &grid).unwrap();
        let truncated = truncate_policy(
            TimeThreshold {
                at: 0.1,
                target: Mode::Finite(1),
            },
            50,
        );
        let run_trunc = run_policy(&p, &truncated, &bg, &grid).unwrap();
        assert_eq!(run_base.realization, run_trunc.realization);
        assert_eq!(run_base.j1_sample.to_bits(), run_trunc.j1_sample.to_bits());
    }

    #[test]
    fn projection_with_full_k_is_identity_on_finite_sets() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let bg = brownian_for(&p, &grid, 4);
        let base = TimeThreshold {
            at: 0.4,
            target: Mode::Finite(2),
        };
        let run_base = run_policy(&p, &base, &bg, &grid).unwrap();
        let projected = project_policy_modes(
            TimeThreshold {
                at: 0.4,
                target: Mode::Finite(2),
            },
            p.modes.clone(),
            3,
        );
        let run_proj = run_policy(&p, &projected, &bg, &grid).unwrap();
        assert_eq!(run_base.realization, run_proj.realization);
    }

    #[test]
    fn realizations_respect_admissibility() {
        // A noisy policy that tries to switch all the time: realized switch
        // times must stay strictly increasing, interior, and distinct-mode.
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let policy = FnPolicy {
            rule: Arc::new(|ctx| {
                let pick = ((ctx.t * 997.0).sin().abs() * 3.0) as usize % 3;
                Decision::SwitchTo(Mode::Finite(pick))
            }),
            cap: None,
        };
        for idx in 0..100 {
            let bg = brownian_for(&p, &grid, idx);
            let run = run_policy(&p, &policy, &bg, &grid).unwrap();
            let times: Vec<f64> = run.realization.switches.iter().map(|s| s.0).collect();
            for w in times.windows(2) {
                assert!(w[0] < w[1]);
            }
            for t in &times {
                assert!(*t > 0.0 && *t < 1.0);
            }
        }
    }

    #[test]
    fn out_of_space_mode_is_an_error() {
        let p = p1();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bg = brownian_for(&p, &grid, 0);
        let policy = FnPolicy {
            rule: Arc::new(|_| Decision::SwitchTo(Mode::Finite(9))),
            cap: None,
        };
        let err = run_policy(&p, &policy, &bg, &grid).unwrap_err();
        assert!(matches!(err, StrategyError::ModeOutsideSpace(_)));
    }
}
