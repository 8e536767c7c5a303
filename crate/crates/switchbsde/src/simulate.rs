//! Scenario primitives: uniform time grids, Brownian increments, marked
//! point processes with intensity λ(da)dt, piecewise-constant mode paths,
//! and the explicit Euler-Maruyama integrator shared by the controlled and
//! the randomized state equation.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::modespace::{Mode, ModeSpace};
use crate::problem::{PathPrefix, PrefixBuffer, SwitchingProblem};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite coefficient output at t = {t}, mode {mode}")]
    NonFinite { t: f64, mode: String },
}

/// Uniform grid t_i = i·T/N, i = 0..N.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, SimError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SimError::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        if n_steps == 0 {
            return Err(SimError::InvalidGrid("step count must be at least 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// Increments ΔW_i ∈ ℝᵈ, each N(0, Δt·I) under the generating stream.
#[derive(Debug, Clone)]
pub struct BrownianGrid {
    increments: Vec<f64>,
    dim: usize,
}

impl BrownianGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.dim..(i + 1) * self.dim]
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.dim
    }
}

/// i.i.d. Gaussian increments with variance Δt per coordinate.
pub fn sample_brownian(grid: &TimeGrid, dim: usize, rng: &mut ChaCha12Rng) -> BrownianGrid {
    let sd = grid.dt().sqrt();
    let increments = (0..grid.n_steps * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    BrownianGrid { increments, dim }
}

/// Sorted marks (σ_n, η_n) of a Poisson random measure on (0,T]×A.
#[derive(Debug, Clone)]
pub struct MarkedPointProcess {
    pub marks: Vec<(f64, Mode)>,
}

impl MarkedPointProcess {
    pub fn count(&self) -> usize {
        self.marks.len()
    }
}

/// K ~ Poisson(λ(A)·T); given K the times are uniform order statistics on
/// (0,T) and the marks are i.i.d. λ/λ(A).
pub fn sample_poisson_measure(
    modes: &ModeSpace,
    horizon: f64,
    rng: &mut ChaCha12Rng,
) -> MarkedPointProcess {
    let rate = modes.total_mass() * horizon;
    let count = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
    let mut times: Vec<f64> = (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let t = horizon * u;
            // A draw landing exactly on 0 or T is a measure-zero event;
            // nudge inward to keep σ_n ∈ (0, T).
            if t <= 0.0 {
                horizon * 1e-12
            } else if t >= horizon {
                horizon * (1.0 - 1e-9)
            } else {
                t
            }
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for k in 1..times.len() {
        if times[k] <= times[k - 1] {
            times[k] = f64::from_bits(times[k - 1].to_bits() + 1);
        }
    }
    let marks = times
        .into_iter()
        .map(|t| (t, modes.sample_mode(rng)))
        .collect();
    MarkedPointProcess { marks }
}

/// Piecewise-constant A-valued path: ξ0 on [0, σ₁), η_n on [σ_n, σ_{n+1}).
/// Right-continuous, with left limits.
#[derive(Debug, Clone)]
pub struct ModePath {
    pub xi0: Mode,
    jump_times: Vec<f64>,
    jump_modes: Vec<Mode>,
}

impl ModePath {
    pub fn new(xi0: Mode, jumps: Vec<(f64, Mode)>) -> Self {
        debug_assert!(jumps.windows(2).all(|w| w[0].0 < w[1].0));
        let (jump_times, jump_modes) = jumps.into_iter().unzip();
        Self {
            xi0,
            jump_times,
            jump_modes,
        }
    }

    pub fn jumps(&self) -> impl Iterator<Item = (f64, &Mode)> {
        self.jump_times.iter().copied().zip(self.jump_modes.iter())
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// I_t (càdlàg value).
    pub fn value(&self, t: f64) -> Mode {
        match self.jump_times.partition_point(|s| *s <= t) {
            0 => self.xi0,
            k => self.jump_modes[k - 1],
        }
    }

    /// I_{t−}.
    pub fn left_limit(&self, t: f64) -> Mode {
        match self.jump_times.partition_point(|s| *s < t) {
            0 => self.xi0,
            k => self.jump_modes[k - 1],
        }
    }

    /// Mode in force at T (no jump occurs exactly at T by construction).
    pub fn terminal(&self, horizon: f64) -> Mode {
        self.value(horizon)
    }
}

/// Build the mode process I from a marked point process and the initial mode.
pub fn mode_process(mpp: &MarkedPointProcess, xi0: Mode) -> ModePath {
    ModePath::new(xi0, mpp.marks.clone())
}

/// State trajectory on the grid with prefix access.
#[derive(Debug, Clone)]
pub struct StatePath {
    buf: PrefixBuffer,
    dim: usize,
}

impl StatePath {
    pub(crate) fn from_buffer(buf: PrefixBuffer, dim: usize) -> Self {
        Self { buf, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.buf.len()
    }

    /// Prefix up to grid index i (inclusive).
    pub fn prefix(&self, i: usize) -> PathPrefix<'_> {
        self.buf.prefix(i)
    }

    pub fn terminal_prefix(&self) -> PathPrefix<'_> {
        self.buf.last_prefix()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        let flat = self.buf.values_flat();
        &flat[i * self.dim..(i + 1) * self.dim]
    }
}

/// One explicit Euler step from the prefix at t with the given mode.
pub(crate) fn euler_step(
    problem: &SwitchingProblem,
    t: f64,
    prefix: &PathPrefix,
    mode: &Mode,
    dw: &[f64],
    dt: f64,
) -> Result<Vec<f64>, SimError> {
    let n = problem.dim_state;
    let d = problem.dim_noise;
    let b = (problem.drift)(t, prefix, mode);
    let s = (problem.diffusion)(t, prefix, mode);
    let mut next = prefix.current().to_vec();
    for row in 0..n {
        let mut diff = 0.0;
        for col in 0..d {
            diff += s[row * d + col] * dw[col];
        }
        next[row] += b[row] * dt + diff;
        if !next[row].is_finite() {
            return Err(SimError::NonFinite {
                t,
                mode: mode.to_string(),
            });
        }
    }
    Ok(next)
}

/// X_{i+1} = X_i + b(t_i, X_{·∧t_i}, I_{t_i})·Δt + σ(t_i, ·)·ΔW_i with the
/// mode read at the left endpoint of each step.
pub fn euler_path(
    problem: &SwitchingProblem,
    mode_path: &ModePath,
    brownian: &BrownianGrid,
    grid: &TimeGrid,
) -> Result<StatePath, SimError> {
    debug_assert_eq!(brownian.n_steps(), grid.n_steps);
    let dt = grid.dt();
    let mut buf = PrefixBuffer::with_capacity(problem.dim_state, grid.n_steps + 1);
    buf.push(0.0, &problem.x0);
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let mode = mode_path.value(t);
        let next = {
            let prefix = buf.last_prefix();
            euler_step(problem, t, &prefix, &mode, brownian.increment(i), dt)?
        };
        buf.push(grid.time(i + 1), &next);
    }
    Ok(StatePath {
        buf,
        dim: problem.dim_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::catalog;
    use crate::stream::{substream, Purpose};
    use std::sync::Arc;

    #[test]
    fn zero_steps_rejected() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn brownian_increment_mean() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut rng = substream(42, 0, Purpose::Brownian);
        let m = 100_000;
        let mut sum = 0.0;
        for _ in 0..m {
            let bg = sample_brownian(&grid, 1, &mut rng);
            sum += bg.increment(0)[0];
        }
        let mean = sum / m as f64;
        let tol = 3.0 * (grid.dt() / m as f64).sqrt();
        assert!(mean.abs() <= tol, "mean {mean} vs tol {tol}");
    }

    #[test]
    fn frozen_coefficients_keep_state_constant() {
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.drift = Arc::new(|_, _, _| vec![0.0]);
        p.diffusion = Arc::new(|_, _, _| vec![0.0]);
        p.x0 = vec![0.7];
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let mut rng = substream(1, 0, Purpose::Brownian);
        let bg = sample_brownian(&grid, 1, &mut rng);
        let mode_path = ModePath::new(Mode::Finite(0), vec![]);
        let x = euler_path(&p, &mode_path, &bg, &grid).unwrap();
        for i in 0..=16 {
            assert_eq!(x.value(i), &[0.7]);
        }
    }

    #[test]
    fn piecewise_constant_drift_is_exact() {
        // b = mode level (0 or 1), σ = 0, switch at t = 0.5 on a dyadic grid:
        // the left-point rule integrates piecewise-constant drift exactly.
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.drift = Arc::new(|_, _, mode| {
            vec![match mode {
                Mode::Finite(i) => *i as f64,
                Mode::Point(a) => *a,
            }]
        });
        p.diffusion = Arc::new(|_, _, _| vec![0.0]);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let mut rng = substream(1, 0, Purpose::Brownian);
        let bg = sample_brownian(&grid, 1, &mut rng);
        let mode_path = ModePath::new(Mode::Finite(0), vec![(0.5, Mode::Finite(1))]);
        let x = euler_path(&p, &mode_path, &bg, &grid).unwrap();
        assert_eq!(x.value(8)[0], 0.5);
    }

    #[test]
    fn euler_tracks_linear_ode() {
        // dx = −x dt, x0 = 1 → x(1) = e^{−1}.
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.drift = Arc::new(|_, prefix, _| vec![-prefix.scalar()]);
        p.diffusion = Arc::new(|_, _, _| vec![0.0]);
        p.x0 = vec![1.0];
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let mut rng = substream(1, 0, Purpose::Brownian);
        let bg = sample_brownian(&grid, 1, &mut rng);
        let mode_path = ModePath::new(Mode::Finite(0), vec![]);
        let x = euler_path(&p, &mode_path, &bg, &grid).unwrap();
        assert!((x.value(1000)[0] - (-1.0f64).exp()).abs() <= 5e-3);
    }

    #[test]
    fn non_finite_drift_reports_location() {
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.drift = Arc::new(|t, _, _| vec![if t > 0.4 { f64::NAN } else { 0.0 }]);
        p.diffusion = Arc::new(|_, _, _| vec![0.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut rng = substream(1, 0, Purpose::Brownian);
        let bg = sample_brownian(&grid, 1, &mut rng);
        let mode_path = ModePath::new(Mode::Finite(0), vec![]);
        let err = euler_path(&p, &mode_path, &bg, &grid).unwrap_err();
        assert!(matches!(err, SimError::NonFinite { .. }));
    }

    #[test]
    fn mode_path_cadlag_conventions() {
        let z = Mode::Finite(0);
        let a = Mode::Finite(1);
        let b = Mode::Finite(2);
        let path = ModePath::new(z, vec![(0.3, a), (0.7, b)]);
        assert_eq!(path.value(0.0), z);
        assert_eq!(path.value(0.29), z);
        assert_eq!(path.value(0.3), a);
        assert_eq!(path.left_limit(0.3), z);
        assert_eq!(path.left_limit(0.7), a);
        assert_eq!(path.value(0.7), b);
        assert_eq!(path.terminal(1.0), b);

        let empty = ModePath::new(z, vec![]);
        assert_eq!(empty.value(0.9), z);
    }

    #[test]
    fn tiny_intensity_gives_empty_process() {
        let modes = crate::modespace::ModeSpace::finite(vec![0.0], vec![1e-9]).unwrap();
        let mut rng = substream(3, 0, Purpose::PoissonCount);
        let mut empty = 0;
        let draws = 10_000;
        for _ in 0..draws {
            if sample_poisson_measure(&modes, 1.0, &mut rng).count() == 0 {
                empty += 1;
            }
        }
        assert!(empty as f64 / draws as f64 >= 0.999);
    }

    #[test]
    fn poisson_mean_count() {
        let modes = crate::modespace::ModeSpace::counting(2).unwrap();
        let mut total = 0usize;
        let draws = 10_000;
        for idx in 0..draws {
            let mut rng = substream(4, idx, Purpose::PoissonCount);
            total += sample_poisson_measure(&modes, 1.0, &mut rng).count();
        }
        let mean = total as f64 / draws as f64;
        let tol = 3.0 * (2.0f64 / draws as f64).sqrt();
        assert!((mean - 2.0).abs() <= tol, "mean {mean}");
    }

    #[test]
    fn reproducible_across_calls() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let run = || {
            let mut brng = substream(9, 5, Purpose::Brownian);
            let mut prng = substream(9, 5, Purpose::PoissonCount);
            let bg = sample_brownian(&grid, 1, &mut brng);
            let mpp = sample_poisson_measure(&p.modes, 1.0, &mut prng);
            let path = mode_process(&mpp, p.xi0);
            let x = euler_path(&p, &path, &bg, &grid).unwrap();
            (0..=50).map(|i| x.value(i)[0].to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
