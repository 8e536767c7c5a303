//! The dual (randomized) side of the problem: bounded intensity controls ν
//! reweight the Poisson compensator from λ(da)dt to ν_t(a)λ(da)dt through
//! the Doléans-Dade exponential κ^ν, and the randomized reward J^ℛ(ν) is a
//! κ-weighted expectation. A thinning-based simulator of the controlled law
//! is provided as a second, importance-weight-free route to the same value.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::modespace::{Mode, ModeSpace};
use crate::problem::{PathPrefix, PrefixBuffer, SwitchingProblem};
use crate::simulate::{
    euler_path, euler_step, mode_process, sample_brownian, sample_poisson_measure, BrownianGrid,
    MarkedPointProcess, ModePath, SimError, StatePath, TimeGrid,
};
use crate::strategy::mean_stderr;
use crate::stream::{substream, Purpose};

#[derive(Debug, Error)]
pub enum GirsanovError {
    #[error("inadmissible control: ν = {value} at t = {t} (bound {bound})")]
    InadmissibleControl { value: f64, t: f64, bound: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One simulated draw of the randomized system: Brownian path, marked point
/// process, mode process I, and the state path driven by I.
pub struct RandomizedScenario {
    pub brownian: BrownianGrid,
    pub mpp: MarkedPointProcess,
    pub mode_path: ModePath,
    pub state: StatePath,
    /// Mark count in (0, T].
    pub n_marks: usize,
}

/// Simulate one randomized scenario from counter-based substreams.
pub fn simulate_scenario(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
) -> Result<RandomizedScenario, SimError> {
    let mut brng = substream(seed, index, Purpose::Brownian);
    let mut prng = substream(seed, index, Purpose::PoissonCount);
    let brownian = sample_brownian(grid, problem.dim_noise, &mut brng);
    let mpp = sample_poisson_measure(&problem.modes, grid.horizon, &mut prng);
    let mode_path = mode_process(&mpp, problem.xi0);
    let state = euler_path(problem, &mode_path, &brownian, grid)?;
    let n_marks = mpp.count();
    Ok(RandomizedScenario {
        brownian,
        mpp,
        mode_path,
        state,
        n_marks,
    })
}

/// What a control may see when evaluated at (t, a): the state prefix at the
/// left grid point and the pre-jump mode I_{t−}.
pub struct ControlContext<'a> {
    pub t: f64,
    pub path: &'a PathPrefix<'a>,
    pub mode_before: Mode,
}

/// Bounded positive predictable random field ν_t(a) ∈ (0, bound].
pub trait IntensityControl: Send + Sync {
    fn evaluate(&self, ctx: &ControlContext, a: &Mode) -> f64;
    /// Declared sup ν; admissibility is checked against it at runtime.
    fn bound(&self) -> f64;
}

/// ν ≡ const.
pub struct ConstControl(pub f64);

impl IntensityControl for ConstControl {
    fn evaluate(&self, _ctx: &ControlContext, _a: &Mode) -> f64 {
        self.0
    }
    fn bound(&self) -> f64 {
        self.0
    }
}

/// Pointwise ν ∨ ε; the declared bound is unchanged.
pub struct FlooredControl<C> {
    pub inner: C,
    pub eps: f64,
}

impl<C: IntensityControl> IntensityControl for FlooredControl<C> {
    fn evaluate(&self, ctx: &ControlContext, a: &Mode) -> f64 {
        self.inner.evaluate(ctx, a).max(self.eps)
    }
    fn bound(&self) -> f64 {
        self.inner.bound()
    }
}

pub fn floor_control<C: IntensityControl>(inner: C, eps: f64) -> FlooredControl<C> {
    assert!(eps > 0.0 && eps < inner.bound(), "eps must lie in (0, bound)");
    FlooredControl { inner, eps }
}

/// Control from a closure, for ad-hoc and randomly generated controls.
pub struct FnControl {
    pub rule: std::sync::Arc<dyn Fn(&ControlContext, &Mode) -> f64 + Send + Sync>,
    pub sup: f64,
}

impl IntensityControl for FnControl {
    fn evaluate(&self, ctx: &ControlContext, a: &Mode) -> f64 {
        (self.rule)(ctx, a)
    }
    fn bound(&self) -> f64 {
        self.sup
    }
}

fn checked_eval(
    nu: &dyn IntensityControl,
    ctx: &ControlContext,
    a: &Mode,
) -> Result<f64, GirsanovError> {
    let v = nu.evaluate(ctx, a);
    let bound = nu.bound();
    if !(v > 0.0) || v > bound * (1.0 + 1e-12) || !v.is_finite() {
        return Err(GirsanovError::InadmissibleControl {
            value: v,
            t: ctx.t,
            bound,
        });
    }
    Ok(v)
}

/// κ_T^ν = exp(∫₀ᵀ∫_A (1 − ν_s(a)) λ(da) ds) · Π_{σ_n ≤ T} ν_{σ_n}(η_n),
/// with λ-quadrature in the mode variable and the left-point rule in time.
pub fn doleans(
    nu: &dyn IntensityControl,
    scenario: &RandomizedScenario,
    modes: &ModeSpace,
    grid: &TimeGrid,
    quad_nodes: usize,
) -> Result<f64, GirsanovError> {
    let quad = modes.quadrature(quad_nodes);
    let dt = grid.dt();
    let mut exponent = 0.0;
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let prefix = scenario.state.prefix(i);
        let ctx = ControlContext {
            t,
            path: &prefix,
            mode_before: scenario.mode_path.left_limit(t),
        };
        let mut inner = 0.0;
        for (a, w) in &quad {
            inner += w * (1.0 - checked_eval(nu, &ctx, a)?);
        }
        exponent += dt * inner;
    }
    let mut product = 1.0;
    for (sigma, eta) in &scenario.mpp.marks {
        let i = ((sigma / dt) as usize).min(grid.n_steps - 1);
        let prefix = scenario.state.prefix(i);
        let ctx = ControlContext {
            t: *sigma,
            path: &prefix,
            mode_before: scenario.mode_path.left_limit(*sigma),
        };
        product *= checked_eval(nu, &ctx, eta)?;
    }
    let kappa = exponent.exp() * product;
    // Pathwise bound κ ≤ exp(Tλ(A)(1+sup ν))·(sup ν)^{N_T}.
    let cap = (grid.horizon * modes.total_mass() * (1.0 + nu.bound())).exp()
        * nu.bound().powi(scenario.n_marks as i32);
    assert!(kappa <= cap * (1.0 + 1e-9), "kappa {kappa} above its bound {cap}");
    Ok(kappa)
}

/// Φ = Σ f(t_i, X, I_{t_i})Δt + g(X, I_T) − Σ_n 1_{σ_n<T} c(σ_n, X, η_{n−1}, η_n)
/// with η₀ = ξ0: the randomized payoff of one scenario.
pub fn randomized_payoff(
    problem: &SwitchingProblem,
    scenario: &RandomizedScenario,
    grid: &TimeGrid,
) -> f64 {
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let prefix = scenario.state.prefix(i);
        total += (problem.running_reward)(t, &prefix, &scenario.mode_path.value(t)) * dt;
    }
    total += (problem.terminal_reward)(
        &scenario.state.terminal_prefix(),
        &scenario.mode_path.terminal(grid.horizon),
    );
    let mut prev = problem.xi0;
    for (sigma, eta) in &scenario.mpp.marks {
        let i = ((sigma / dt) as usize).min(grid.n_steps - 1);
        let prefix = scenario.state.prefix(i);
        total -= (problem.switch_cost)(*sigma, &prefix, &prev, eta);
        prev = *eta;
    }
    total
}

/// J^ℛ(ν) as the Monte Carlo mean of κ_T·Φ under the reference law.
pub fn estimate_randomized_reward(
    problem: &SwitchingProblem,
    nu: &dyn IntensityControl,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    quad_nodes: usize,
) -> Result<(f64, f64), GirsanovError> {
    assert!(m >= 2);
    let samples: Vec<Result<f64, GirsanovError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let scenario = simulate_scenario(problem, grid, seed, idx)?;
            let kappa = doleans(nu, &scenario, &problem.modes, grid, quad_nodes)?;
            Ok(kappa * randomized_payoff(problem, &scenario, grid))
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    for s in samples {
        values.push(s?);
    }
    Ok(mean_stderr(&values))
}

/// E[κ_T] on mark-only scenarios (no state equation involved); expected 1.
pub fn check_martingale(
    modes: &ModeSpace,
    nu: &dyn IntensityControl,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    quad_nodes: usize,
) -> Result<(f64, f64), GirsanovError> {
    assert!(m >= 2);
    let samples: Vec<Result<f64, GirsanovError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let mut prng = substream(seed, idx, Purpose::PoissonCount);
            let mpp = sample_poisson_measure(modes, grid.horizon, &mut prng);
            let n_marks = mpp.count();
            let mode_path = mode_process(&mpp, modes.dense_mode(0));
            let mut buf = PrefixBuffer::with_capacity(1, grid.n_steps + 1);
            for i in 0..=grid.n_steps {
                buf.push(grid.time(i), &[0.0]);
            }
            let scenario = RandomizedScenario {
                brownian: sample_brownian(grid, 1, &mut substream(seed, idx, Purpose::Brownian)),
                mpp,
                mode_path,
                state: StatePath::from_buffer(buf, 1),
                n_marks,
            };
            doleans(nu, &scenario, modes, grid, quad_nodes)
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    for s in samples {
        values.push(s?);
    }
    Ok(mean_stderr(&values))
}

/// Both sides of the switching-cost identity
/// J₂^ℛ(ν) = E^ν[∫₀ᵀ∫_A c_s(X, I_{s−}, a) ν_s(a) λ(da) ds]:
/// lhs sums realized mark costs, rhs integrates c·ν against λ⊗dt, both
/// κ-weighted. Returns (lhs, rhs, stderr of the per-scenario difference).
pub fn check_cost_identity(
    problem: &SwitchingProblem,
    nu: &dyn IntensityControl,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    quad_nodes: usize,
) -> Result<(f64, f64, f64), GirsanovError> {
    assert!(m >= 2);
    let quad = problem.modes.quadrature(quad_nodes);
    let dt = grid.dt();
    let samples: Vec<Result<(f64, f64), GirsanovError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let scenario = simulate_scenario(problem, grid, seed, idx)?;
            let kappa = doleans(nu, &scenario, &problem.modes, grid, quad_nodes)?;
            let mut realized = 0.0;
            let mut prev = problem.xi0;
            for (sigma, eta) in &scenario.mpp.marks {
                let i = ((sigma / dt) as usize).min(grid.n_steps - 1);
                let prefix = scenario.state.prefix(i);
                realized += (problem.switch_cost)(*sigma, &prefix, &prev, eta);
                prev = *eta;
            }
            let mut compensated = 0.0;
            for i in 0..grid.n_steps {
                let t = grid.time(i);
                let prefix = scenario.state.prefix(i);
                let before = scenario.mode_path.left_limit(t);
                let ctx = ControlContext {
                    t,
                    path: &prefix,
                    mode_before: before,
                };
                let mut inner = 0.0;
                for (a, w) in &quad {
                    inner += w
                        * (problem.switch_cost)(t, &prefix, &before, a)
                        * checked_eval(nu, &ctx, a)?;
                }
                compensated += dt * inner;
            }
            Ok((kappa * realized, kappa * compensated))
        })
        .collect();
    let mut lhs = Vec::with_capacity(m);
    let mut diff = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for s in samples {
        let (l, r) = s?;
        lhs.push(l);
        rhs.push(r);
        diff.push(l - r);
    }
    let (l_mean, _) = mean_stderr(&lhs);
    let (r_mean, _) = mean_stderr(&rhs);
    let (_, d_stderr) = mean_stderr(&diff);
    Ok((l_mean, r_mean, d_stderr))
}

/// One forward draw of the controlled law P^ν by Lewis-Shedler thinning of a
/// dominating Poisson measure with intensity bound·λ(da)dt.
pub struct ControlledRun {
    pub state: StatePath,
    pub mode_path: ModePath,
    /// Φ evaluated under the controlled law (no importance weight).
    pub payoff: f64,
    pub n_marks: usize,
}

pub fn simulate_controlled(
    problem: &SwitchingProblem,
    nu: &dyn IntensityControl,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
) -> Result<ControlledRun, GirsanovError> {
    let bound = nu.bound();
    let mut brng = substream(seed, index, Purpose::Brownian);
    let brownian = sample_brownian(grid, problem.dim_noise, &mut brng);
    let mut trng = substream(seed, index, Purpose::Thinning);
    let rate = bound * problem.modes.total_mass() * grid.horizon;
    let count = Poisson::new(rate.max(1e-300)).expect("positive rate").sample(&mut trng) as usize;
    let mut times: Vec<f64> = (0..count)
        .map(|_| grid.horizon * trng.random::<f64>())
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let candidates: Vec<(f64, Mode)> = times
        .into_iter()
        .map(|t| (t, problem.modes.sample_mode(&mut trng)))
        .collect();

    let dt = grid.dt();
    let mut buf = PrefixBuffer::with_capacity(problem.dim_state, grid.n_steps + 1);
    buf.push(0.0, &problem.x0);
    let mut mode = problem.xi0;
    let mut accepted: Vec<(f64, Mode)> = Vec::new();
    let mut f_sum = 0.0;
    let mut cost_sum = 0.0;
    let mut cand_iter = candidates.into_iter().peekable();

    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let t_next = grid.time(i + 1);
        let next = {
            let prefix = buf.last_prefix();
            f_sum += (problem.running_reward)(t, &prefix, &mode) * dt;
            euler_step(problem, t, &prefix, &mode, brownian.increment(i), dt)?
        };
        // Marks landing in (t_i, t_{i+1}] take effect at the next grid point;
        // ν is evaluated with the left grid prefix (predictable version).
        while let Some((s, _)) = cand_iter.peek() {
            if *s > t_next && i + 1 < grid.n_steps {
                break;
            }
            let (s, a) = cand_iter.next().unwrap();
            let prefix = buf.last_prefix();
            let ctx = ControlContext {
                t: s,
                path: &prefix,
                mode_before: mode,
            };
            let v = checked_eval(nu, &ctx, &a)?;
            let u: f64 = trng.random();
            if u * bound < v {
                cost_sum += (problem.switch_cost)(s, &prefix, &mode, &a);
                accepted.push((s, a));
                mode = a;
            }
        }
        buf.push(t_next, &next);
    }
    let state = StatePath::from_buffer(buf, problem.dim_state);
    let payoff = f_sum + (problem.terminal_reward)(&state.terminal_prefix(), &mode) - cost_sum;
    let n_marks = accepted.len();
    Ok(ControlledRun {
        state,
        mode_path: ModePath::new(problem.xi0, accepted),
        payoff,
        n_marks,
    })
}

/// J^ℛ(ν) by direct simulation under P^ν: the plain Monte Carlo mean of Φ on
/// thinned scenarios. Same quantity as [`estimate_randomized_reward`] but
/// free of importance-weight degeneracy for large bounds.
pub fn estimate_randomized_reward_direct(
    problem: &SwitchingProblem,
    nu: &dyn IntensityControl,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<(f64, f64), GirsanovError> {
    assert!(m >= 2);
    let samples: Vec<Result<f64, GirsanovError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| Ok(simulate_controlled(problem, nu, grid, seed, idx)?.payoff))
        .collect();
    let mut values = Vec::with_capacity(m);
    for s in samples {
        values.push(s?);
    }
    Ok(mean_stderr(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modespace::ModeSpace;
    use crate::problem::catalog;

    fn trivial_scenario(
        modes: &ModeSpace,
        grid: &TimeGrid,
        marks: Vec<(f64, Mode)>,
    ) -> RandomizedScenario {
        let mut buf = PrefixBuffer::with_capacity(1, grid.n_steps + 1);
        for i in 0..=grid.n_steps {
            buf.push(grid.time(i), &[0.0]);
        }
        let mpp = MarkedPointProcess { marks: marks.clone() };
        let n_marks = marks.len();
        RandomizedScenario {
            brownian: sample_brownian(grid, 1, &mut substream(0, 0, Purpose::Brownian)),
            mpp,
            mode_path: ModePath::new(modes.dense_mode(0), marks),
            state: StatePath::from_buffer(buf, 1),
            n_marks,
        }
    }

    #[test]
    fn unit_control_has_unit_weight() {
        let modes = ModeSpace::counting(2).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = trivial_scenario(&modes, &grid, vec![(0.4, Mode::Finite(1))]);
        let k = doleans(&ConstControl(1.0), &s, &modes, &grid, 4).unwrap();
        assert_eq!(k, 1.0);
    }

    #[test]
    fn constant_control_closed_forms() {
        // λ(A) = 1, T = 1, ν ≡ 2: κ = e^{−1}·2^{#marks}, exact on a dyadic grid.
        let modes = ModeSpace::finite(vec![0.0], vec![1.0]).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let empty = trivial_scenario(&modes, &grid, vec![]);
        let k0 = doleans(&ConstControl(2.0), &empty, &modes, &grid, 1).unwrap();
        assert_eq!(k0, (-1.0f64).exp());
        let one = trivial_scenario(&modes, &grid, vec![(0.3, Mode::Finite(0))]);
        let k1 = doleans(&ConstControl(2.0), &one, &modes, &grid, 1).unwrap();
        assert_eq!(k1, 2.0 * (-1.0f64).exp());
    }

    #[test]
    fn unit_control_reward_matches_unweighted_mc() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let m = 200;
        let (mean, _) =
            estimate_randomized_reward(&p, &ConstControl(1.0), &grid, m, 17, 4).unwrap();
        let mut acc = Vec::new();
        for idx in 0..m as u64 {
            let s = simulate_scenario(&p, &grid, 17, idx).unwrap();
            acc.push(randomized_payoff(&p, &s, &grid));
        }
        let (plain, _) = mean_stderr(&acc);
        assert_eq!(mean.to_bits(), plain.to_bits());
    }

    #[test]
    fn martingale_unit_control_exact() {
        let modes = ModeSpace::counting(2).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let (mean, stderr) =
            check_martingale(&modes, &ConstControl(1.0), &grid, 64, 5, 2).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn floor_control_behaviour() {
        let modes = ModeSpace::counting(2).unwrap();
        let mut buf = PrefixBuffer::new(1);
        buf.push(0.0, &[0.0]);
        let prefix = buf.last_prefix();
        let ctx = ControlContext {
            t: 0.0,
            path: &prefix,
            mode_before: Mode::Finite(0),
        };
        let unchanged = floor_control(ConstControl(1.0), 0.5);
        assert_eq!(unchanged.evaluate(&ctx, &modes.dense_mode(0)), 1.0);
        let lifted = floor_control(
            FnControl {
                rule: std::sync::Arc::new(|_, _| 0.1),
                sup: 1.0,
            },
            0.5,
        );
        assert_eq!(lifted.evaluate(&ctx, &modes.dense_mode(0)), 0.5);
    }

    #[test]
    fn zero_cost_identity_is_exact() {
        let mut p = catalog("p2-three-mode-diff").unwrap();
        p.switch_cost = std::sync::Arc::new(|_, _, _, _| 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let (lhs, rhs, _) =
            check_cost_identity(&p, &ConstControl(1.0), &grid, 50, 3, 3).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn nonpositive_control_is_rejected() {
        let p = catalog("p1-two-mode-det").unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let bad = FnControl {
            rule: std::sync::Arc::new(|_, _| 0.0),
            sup: 1.0,
        };
        let err = estimate_randomized_reward(&p, &bad, &grid, 4, 1, 2).unwrap_err();
        assert!(matches!(err, GirsanovError::InadmissibleControl { .. }));
        let above = FnControl {
            rule: std::sync::Arc::new(|_, _| 2.0),
            sup: 1.0,
        };
        let err = estimate_randomized_reward(&p, &above, &grid, 4, 1, 2).unwrap_err();
        assert!(matches!(err, GirsanovError::InadmissibleControl { .. }));
    }

    #[test]
    fn thinned_runs_are_reproducible() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let nu = ConstControl(2.0);
        let a = simulate_controlled(&p, &nu, &grid, 9, 3).unwrap();
        let b = simulate_controlled(&p, &nu, &grid, 9, 3).unwrap();
        assert_eq!(a.payoff.to_bits(), b.payoff.to_bits());
        assert_eq!(a.n_marks, b.n_marks);
    }
}
