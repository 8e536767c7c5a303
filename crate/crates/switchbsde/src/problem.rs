//! Switching-problem instances: path-dependent coefficients b, σ, f, g, c on
//! a horizon [0, T], empirical validation of the standing assumptions
//! (Lipschitz/growth bounds, nonnegative switching costs), and a catalog of
//! small benchmark instances.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::modespace::{IntervalDensity, Mode, ModeSpace};
use crate::stream::{substream, Purpose};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem \"{0}\"")]
    UnknownProblem(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
}

/// Non-anticipative view of a trajectory up to some time t: the grid times,
/// the values, and precomputed summaries. Coefficients receive only this, so
/// they cannot peek past t.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    times: &'a [f64],
    /// Row-major values, `times.len() × dim`.
    values: &'a [f64],
    dim: usize,
    running_max_abs: f64,
    running_avg: &'a [f64],
}

impl<'a> PathPrefix<'a> {
    pub fn new(
        times: &'a [f64],
        values: &'a [f64],
        dim: usize,
        running_max_abs: f64,
        running_avg: &'a [f64],
    ) -> Self {
        debug_assert_eq!(values.len(), times.len() * dim);
        debug_assert_eq!(running_avg.len(), dim);
        Self {
            times,
            values,
            dim,
            running_max_abs,
            running_avg,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        self.times
    }

    pub fn value_at(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Value at the prefix's end time.
    pub fn current(&self) -> &[f64] {
        self.value_at(self.len() - 1)
    }

    /// First component of the current value (state dimension 1 shortcut).
    pub fn scalar(&self) -> f64 {
        self.current()[0]
    }

    /// Running sup of the Euclidean norm, `x*_t`.
    pub fn running_max_abs(&self) -> f64 {
        self.running_max_abs
    }

    /// Componentwise arithmetic mean of the values seen so far.
    pub fn running_avg(&self) -> &[f64] {
        self.running_avg
    }
}

/// Growable storage that maintains the prefix summaries incrementally; used
/// by the Euler integrator, the validator and the DP oracle.
#[derive(Debug, Clone, Default)]
pub struct PrefixBuffer {
    times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    run_max: Vec<f64>,
    run_avg: Vec<f64>,
}

impl PrefixBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn with_capacity(dim: usize, steps: usize) -> Self {
        Self {
            times: Vec::with_capacity(steps),
            values: Vec::with_capacity(steps * dim),
            dim,
            run_max: Vec::with_capacity(steps),
            run_avg: Vec::with_capacity(steps * dim),
        }
    }

    pub fn push(&mut self, t: f64, value: &[f64]) {
        debug_assert_eq!(value.len(), self.dim);
        let k = self.times.len();
        let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max = if k == 0 {
            norm
        } else {
            self.run_max[k - 1].max(norm)
        };
        for (j, v) in value.iter().enumerate() {
            let prev = if k == 0 {
                0.0
            } else {
                self.run_avg[(k - 1) * self.dim + j]
            };
            self.run_avg.push((prev * k as f64 + v) / (k as f64 + 1.0));
        }
        self.times.push(t);
        self.values.extend_from_slice(value);
        self.run_max.push(max);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Prefix ending at entry j (inclusive).
    pub fn prefix(&self, j: usize) -> PathPrefix<'_> {
        PathPrefix::new(
            &self.times[..=j],
            &self.values[..(j + 1) * self.dim],
            self.dim,
            self.run_max[j],
            &self.run_avg[j * self.dim..(j + 1) * self.dim],
        )
    }

    pub fn last_prefix(&self) -> PathPrefix<'_> {
        self.prefix(self.len() - 1)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values_flat(&self) -> &[f64] {
        &self.values
    }
}

/// Path summary a coefficient (and hence the regression basis) may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Current state value (one feature per component).
    Current,
    /// Running sup of |x|.
    RunningMaxAbs,
    /// Running componentwise average.
    RunningAvg,
}

pub type DriftFn = Arc<dyn Fn(f64, &PathPrefix, &Mode) -> Vec<f64> + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &PathPrefix, &Mode) -> Vec<f64> + Send + Sync>;
pub type RunningRewardFn = Arc<dyn Fn(f64, &PathPrefix, &Mode) -> f64 + Send + Sync>;
pub type TerminalRewardFn = Arc<dyn Fn(&PathPrefix, &Mode) -> f64 + Send + Sync>;
pub type SwitchCostFn = Arc<dyn Fn(f64, &PathPrefix, &Mode, &Mode) -> f64 + Send + Sync>;

/// A switching problem instance. Coefficient closures must be pure and
/// thread-safe; they see the trajectory only through [`PathPrefix`].
#[derive(Clone)]
pub struct SwitchingProblem {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub xi0: Mode,
    pub modes: ModeSpace,
    /// b(t, x_{·∧t}, a) ∈ ℝⁿ.
    pub drift: DriftFn,
    /// σ(t, x_{·∧t}, a) ∈ ℝ^{n×d}, row-major.
    pub diffusion: DiffusionFn,
    /// Running reward f.
    pub running_reward: RunningRewardFn,
    /// Terminal reward g.
    pub terminal_reward: TerminalRewardFn,
    /// Switching cost c ≥ 0.
    pub switch_cost: SwitchCostFn,
    /// Summaries the coefficients actually read; drives the regression basis.
    pub declared_features: Vec<Feature>,
    /// Optional (L, r) for validation.
    pub growth_constants: Option<(f64, f64)>,
    /// Coefficients depend on the path only through the current value.
    pub markovian: bool,
}

impl std::fmt::Debug for SwitchingProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SwitchingProblem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("xi0", &self.xi0)
            .field("modes", &self.modes)
            .field("markovian", &self.markovian)
            .finish_non_exhaustive()
    }
}

impl SwitchingProblem {
    pub fn validate_shape(&self) -> Result<(), ProblemError> {
        if self.dim_state == 0 || self.dim_noise == 0 {
            return Err(ProblemError::Invalid("state/noise dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(ProblemError::Invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if self.x0.len() != self.dim_state {
            return Err(ProblemError::Invalid("x0 length does not match dim_state".into()));
        }
        if !self.modes.contains(&self.xi0) {
            return Err(ProblemError::Invalid("initial mode outside the mode set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationStatus {
    Pass,
    Warn,
    Fail,
}

/// Sampled evidence on assumption (A1): max observed Lipschitz ratios for
/// b, σ in the path sup-norm, max growth ratios of f, g, c against
/// (1+‖x‖^r), and any negative-cost occurrence.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub status: ValidationStatus,
    pub max_lipschitz_drift: f64,
    pub max_lipschitz_diffusion: f64,
    pub max_growth_running: f64,
    pub max_growth_terminal: f64,
    pub max_growth_cost: f64,
    pub negative_cost_found: bool,
    pub messages: Vec<String>,
}

/// Sample random (t, path, mode) tuples and report how the coefficients
/// behave against the declared constants. Sampled, not proven: closures are
/// black boxes.
pub fn validate(problem: &SwitchingProblem, n_samples: usize, seed: u64) -> ValidationReport {
    assert!(n_samples >= 1);
    let mut rng = substream(seed, 0, Purpose::Validation);
    let n = problem.dim_state;
    let grid_len = 17;
    let mut report = ValidationReport {
        status: ValidationStatus::Pass,
        max_lipschitz_drift: 0.0,
        max_lipschitz_diffusion: 0.0,
        max_growth_running: 0.0,
        max_growth_terminal: 0.0,
        max_growth_cost: 0.0,
        negative_cost_found: false,
        messages: Vec::new(),
    };

    let synth_path = |rng: &mut rand_chacha::ChaCha12Rng, scale: f64| -> PrefixBuffer {
        use rand::Rng;
        let mut buf = PrefixBuffer::new(n);
        let mut x: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
        let freq: f64 = 1.0 + 6.0 * rng.random::<f64>();
        for j in 0..grid_len {
            let t = problem.horizon * j as f64 / (grid_len - 1) as f64;
            for xi in x.iter_mut() {
                *xi += scale * 0.4 * (rng.random::<f64>() - 0.5) + scale * 0.1 * (freq * t).sin();
            }
            buf.push(t, &x);
        }
        buf
    };

    for _ in 0..n_samples {
        use rand::Rng;
        // Log-uniform scale so both small and large trajectories appear.
        let scale = 0.3 * (3.3f64.ln() * 2.0 * rng.random::<f64>()).exp();
        let p1 = synth_path(&mut rng, scale);
        let p2 = synth_path(&mut rng, scale);
        let j = 1 + (rng.random::<f64>() * (grid_len - 1) as f64) as usize;
        let j = j.min(grid_len - 1);
        let t = p1.times()[j];
        let a = problem.modes.sample_mode(&mut rng);
        let a2 = problem.modes.sample_mode(&mut rng);
        let pre1 = p1.prefix(j);
        let pre2 = p2.prefix(j);

        // Sup-norm distance of the two prefixes.
        let mut sup_diff = 0.0_f64;
        for s in 0..=j {
            let d: f64 = pre1
                .value_at(s)
                .iter()
                .zip(pre2.value_at(s))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            sup_diff = sup_diff.max(d);
        }
        if sup_diff > 1e-12 {
            let db: f64 = (problem.drift)(t, &pre1, &a)
                .iter()
                .zip((problem.drift)(t, &pre2, &a))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            let ds: f64 = (problem.diffusion)(t, &pre1, &a)
                .iter()
                .zip((problem.diffusion)(t, &pre2, &a))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            report.max_lipschitz_drift = report.max_lipschitz_drift.max(db / sup_diff);
            report.max_lipschitz_diffusion = report.max_lipschitz_diffusion.max(ds / sup_diff);
        }

        let r = problem.growth_constants.map(|(_, r)| r).unwrap_or(2.0);
        let envelope = 1.0 + pre1.running_max_abs().powf(r);
        let fv = (problem.running_reward)(t, &pre1, &a);
        let gv = (problem.terminal_reward)(&p1.last_prefix(), &a);
        let g_envelope = 1.0 + p1.last_prefix().running_max_abs().powf(r);
        let cv = (problem.switch_cost)(t, &pre1, &a, &a2);
        if !fv.is_finite() || !gv.is_finite() || !cv.is_finite() {
            report.status = ValidationStatus::Fail;
            report.messages.push("non-finite coefficient output".into());
            return report;
        }
        report.max_growth_running = report.max_growth_running.max(fv.abs() / envelope);
        report.max_growth_terminal = report.max_growth_terminal.max(gv.abs() / g_envelope);
        report.max_growth_cost = report.max_growth_cost.max(cv.abs() / envelope);
        if cv < 0.0 {
            report.negative_cost_found = true;
        }
    }

    if report.negative_cost_found {
        report.status = ValidationStatus::Fail;
        report.messages.push("negative switching cost".into());
        return report;
    }
    if let Some((l, _)) = problem.growth_constants {
        let tol = l * (1.0 + 1e-6);
        if report.max_lipschitz_drift > tol || report.max_lipschitz_diffusion > tol {
            report.status = ValidationStatus::Warn;
            report.messages.push("lipschitz bound exceeded".into());
        }
        if report.max_growth_running > tol
            || report.max_growth_terminal > tol
            || report.max_growth_cost > tol
        {
            report.status = ValidationStatus::Warn;
            report.messages.push("growth bound exceeded".into());
        }
    }
    report
}

/// Overrides applicable to catalog entries from config.
#[derive(Debug, Clone, Default, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemOverrides {
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    pub xi0: Option<f64>,
    pub sigma: Option<f64>,
    pub cost_scale: Option<f64>,
    /// Replacement intensity measure λ: same kind and mode count as the
    /// catalog entry (the value is invariant in λ; the numerics are not).
    pub modespace: Option<crate::modespace::ModeSpaceSpec>,
}

pub const CATALOG_NAMES: [&str; 4] = [
    "p1-two-mode-det",
    "p2-three-mode-diff",
    "p3-continuum",
    "p4-pathdep",
];

/// Fixed benchmark instance by name.
pub fn catalog(name: &str) -> Result<SwitchingProblem, ProblemError> {
    catalog_with(name, &ProblemOverrides::default())
}

/// Catalog entry with parameter overrides applied.
pub fn catalog_with(
    name: &str,
    overrides: &ProblemOverrides,
) -> Result<SwitchingProblem, ProblemError> {
    let mut problem = match name {
        "p1-two-mode-det" => mean_reversion_tracker(
            "p1-two-mode-det",
            vec![0.0, 1.0],
            0.0,
            Arc::new(|_, _, _, _| 0.1),
            false,
        )?,
        "p2-three-mode-diff" => {
            let modes = ModeSpace::counting(3).map_err(|e| ProblemError::Invalid(e.to_string()))?;
            let m = modes.clone();
            mean_reversion_tracker(
                "p2-three-mode-diff",
                vec![0.0, 0.5, 1.0],
                0.2,
                Arc::new(move |_, _, a, b| 0.05 * (1.0 + m.metric_unchecked(a, b))),
                false,
            )?
        }
        "p3-continuum" => continuum_drift_tracker()?,
        "p4-pathdep" => {
            let modes = ModeSpace::counting(3).map_err(|e| ProblemError::Invalid(e.to_string()))?;
            let m = modes.clone();
            mean_reversion_tracker(
                "p4-pathdep",
                vec![0.0, 0.5, 1.0],
                0.2,
                Arc::new(move |_, _, a, b| 0.05 * (1.0 + m.metric_unchecked(a, b))),
                true,
            )?
        }
        other => return Err(ProblemError::UnknownProblem(other.to_string())),
    };
    apply_overrides(&mut problem, overrides)?;
    problem.validate_shape()?;
    Ok(problem)
}

/// P1/P2/P4 family: 1-d state pulled toward the active mode's level θ_a,
/// running reward −(x−1)² (or −(x*)² in the path-dependent variant), no
/// terminal reward.
fn mean_reversion_tracker(
    name: &str,
    theta: Vec<f64>,
    sigma: f64,
    cost: SwitchCostFn,
    path_dependent: bool,
) -> Result<SwitchingProblem, ProblemError> {
    let m = theta.len();
    let modes = ModeSpace::counting(m).map_err(|e| ProblemError::Invalid(e.to_string()))?;
    let th = theta.clone();
    let drift: DriftFn = Arc::new(move |_t, prefix, mode| {
        let a = match mode {
            Mode::Finite(i) => th[*i],
            Mode::Point(v) => *v,
        };
        vec![a - prefix.scalar()]
    });
    let diffusion: DiffusionFn = Arc::new(move |_t, _prefix, _mode| vec![sigma]);
    let running: RunningRewardFn = if path_dependent {
        Arc::new(|_t, prefix, _mode| {
            let m = prefix.running_max_abs();
            -m * m
        })
    } else {
        Arc::new(|_t, prefix, _mode| {
            let d = prefix.scalar() - 1.0;
            -d * d
        })
    };
    Ok(SwitchingProblem {
        name: name.to_string(),
        dim_state: 1,
        dim_noise: 1,
        horizon: 1.0,
        x0: vec![0.0],
        xi0: Mode::Finite(0),
        modes,
        drift,
        diffusion,
        running_reward: running,
        terminal_reward: Arc::new(|_prefix, _mode| 0.0),
        switch_cost: cost,
        declared_features: if path_dependent {
            vec![Feature::Current, Feature::RunningMaxAbs]
        } else {
            vec![Feature::Current]
        },
        growth_constants: Some((2.5, 2.0)),
        markovian: !path_dependent,
    })
}

/// P3: continuum of modes a ∈ [−1,1] acting as the drift itself, uniform λ,
/// quadratic tracking of the origin, distance-proportional switching cost.
fn continuum_drift_tracker() -> Result<SwitchingProblem, ProblemError> {
    let modes = ModeSpace::interval(-1.0, 1.0, IntervalDensity::Uniform(1.0))
        .map_err(|e| ProblemError::Invalid(e.to_string()))?;
    Ok(SwitchingProblem {
        name: "p3-continuum".to_string(),
        dim_state: 1,
        dim_noise: 1,
        horizon: 1.0,
        x0: vec![0.5],
        xi0: Mode::Point(0.0),
        modes,
        drift: Arc::new(|_t, _prefix, mode| {
            vec![match mode {
                Mode::Point(a) => *a,
                Mode::Finite(i) => *i as f64,
            }]
        }),
        diffusion: Arc::new(|_t, _prefix, _mode| vec![0.1]),
        running_reward: Arc::new(|_t, prefix, _mode| {
            let x = prefix.scalar();
            -x * x
        }),
        terminal_reward: Arc::new(|_prefix, _mode| 0.0),
        switch_cost: Arc::new(|_t, _prefix, a, b| {
            let (a, b) = match (a, b) {
                (Mode::Point(a), Mode::Point(b)) => (*a, *b),
                _ => (0.0, 0.0),
            };
            0.02 + 0.1 * (a - b).abs()
        }),
        declared_features: vec![Feature::Current],
        growth_constants: Some((1.5, 2.0)),
        markovian: true,
    })
}

/// Restrict a problem to the first k modes of its dense sequence plus the
/// initial mode: a finite-mode instance (counting measure) whose
/// coefficients delegate to the original closures with the projected mode
/// values. ξ0 itself is kept in the mode set — projections apply to switch
/// targets, not to the starting mode — so the restricted value is a true
/// lower bound of the original one, nondecreasing in k.
pub fn project_to_finite(
    problem: &SwitchingProblem,
    k: usize,
) -> Result<SwitchingProblem, ProblemError> {
    let k = k.max(1);
    let source = problem.modes.clone();
    let mut labels: Vec<f64> = (0..k)
        .map(|i| source.dense_mode(i).value(&source))
        .collect();
    let xi0_value = problem.xi0.value(&source);
    let xi0_index = match labels.iter().position(|l| *l == xi0_value) {
        Some(i) => i,
        None => {
            labels.push(xi0_value);
            labels.len() - 1
        }
    };
    let k = labels.len();
    let modes =
        ModeSpace::finite(labels.clone(), vec![1.0; k]).map_err(|e| ProblemError::Invalid(e.to_string()))?;

    let translate = {
        let labels = labels.clone();
        let interval = !source.is_finite_kind();
        move |m: &Mode| -> Mode {
            match m {
                Mode::Finite(i) if interval => Mode::Point(labels[(*i).min(labels.len() - 1)]),
                other => *other,
            }
        }
    };
    let tr = translate.clone();
    let drift0 = problem.drift.clone();
    let drift: DriftFn = Arc::new(move |t, prefix, mode| drift0(t, prefix, &tr(mode)));
    let tr = translate.clone();
    let diff0 = problem.diffusion.clone();
    let diffusion: DiffusionFn = Arc::new(move |t, prefix, mode| diff0(t, prefix, &tr(mode)));
    let tr = translate.clone();
    let f0 = problem.running_reward.clone();
    let running: RunningRewardFn = Arc::new(move |t, prefix, mode| f0(t, prefix, &tr(mode)));
    let tr = translate.clone();
    let g0 = problem.terminal_reward.clone();
    let terminal: TerminalRewardFn = Arc::new(move |prefix, mode| g0(prefix, &tr(mode)));
    let tr = translate;
    let c0 = problem.switch_cost.clone();
    let cost: SwitchCostFn = Arc::new(move |t, prefix, a, b| c0(t, prefix, &tr(a), &tr(b)));

    Ok(SwitchingProblem {
        name: format!("{}-proj{}", problem.name, k),
        dim_state: problem.dim_state,
        dim_noise: problem.dim_noise,
        horizon: problem.horizon,
        x0: problem.x0.clone(),
        xi0: Mode::Finite(xi0_index),
        modes,
        drift,
        diffusion,
        running_reward: running,
        terminal_reward: terminal,
        switch_cost: cost,
        declared_features: problem.declared_features.clone(),
        growth_constants: problem.growth_constants,
        markovian: problem.markovian,
    })
}

fn apply_overrides(
    problem: &mut SwitchingProblem,
    overrides: &ProblemOverrides,
) -> Result<(), ProblemError> {
    if let Some(t) = overrides.horizon {
        if !(t > 0.0) {
            return Err(ProblemError::InvalidOverride(format!("T = {t} must be positive")));
        }
        problem.horizon = t;
    }
    if let Some(x0) = overrides.x0 {
        problem.x0 = vec![x0; problem.dim_state];
    }
    if let Some(xi0) = overrides.xi0 {
        let mode = if problem.modes.is_finite_kind() {
            let idx = xi0 as usize;
            if xi0.fract() != 0.0 || xi0 < 0.0 {
                return Err(ProblemError::InvalidOverride(format!(
                    "xi0 = {xi0} must be a mode index"
                )));
            }
            Mode::Finite(idx)
        } else {
            Mode::Point(xi0)
        };
        if !problem.modes.contains(&mode) {
            return Err(ProblemError::InvalidOverride(format!("xi0 = {xi0} outside mode set")));
        }
        problem.xi0 = mode;
    }
    if let Some(s) = overrides.sigma {
        if s < 0.0 {
            return Err(ProblemError::InvalidOverride(format!("sigma = {s} must be nonnegative")));
        }
        let d = problem.dim_state * problem.dim_noise;
        problem.diffusion = Arc::new(move |_t, _prefix, _mode| vec![s; d]);
    }
    if let Some(k) = overrides.cost_scale {
        if k < 0.0 {
            return Err(ProblemError::InvalidOverride(format!(
                "cost_scale = {k} must be nonnegative"
            )));
        }
        let base = problem.switch_cost.clone();
        problem.switch_cost = Arc::new(move |t, prefix, a, b| k * base(t, prefix, a, b));
    }
    if let Some(spec) = &overrides.modespace {
        let replacement = spec
            .build()
            .map_err(|e| ProblemError::InvalidOverride(e.to_string()))?;
        match (problem.modes.num_modes(), replacement.num_modes()) {
            (Some(m), Some(r)) if m == r => {}
            (None, None) => {
                if problem.modes.bounds() != replacement.bounds() {
                    return Err(ProblemError::InvalidOverride(
                        "modespace override must keep the interval bounds".into(),
                    ));
                }
            }
            _ => {
                return Err(ProblemError::InvalidOverride(
                    "modespace override must match the catalog kind and mode count".into(),
                ));
            }
        }
        problem.modes = replacement;
    }
    Ok(())
}
