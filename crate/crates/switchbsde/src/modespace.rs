//! The mode set `A` with its finite intensity measure `λ`, a metric `ρ < 1`
//! compatible with its topology, sampling, quadrature against `λ`, and the
//! nearest-point projection `Π_k` onto prefixes of a dense sequence.
//!
//! Two kinds are supported: a finite set with positive weights and a real
//! interval with a positive density. Any full-support choice of `λ` yields
//! the same switching value, so the catalog defaults to the counting measure
//! resp. the uniform density.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModeSpaceError {
    /// λ must have full topological support: every weight (resp. the density
    /// on the open interval) must be strictly positive.
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("invalid mode space: {0}")]
    Invalid(String),
    #[error("mode {0} outside the declared mode set")]
    ModeOutsideSpace(String),
}

/// One element of the mode set: an index into the finite label list, or a
/// point of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Finite(usize),
    Point(f64),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Finite(i) => write!(f, "{i}"),
            Mode::Point(a) => write!(f, "{a}"),
        }
    }
}

impl Mode {
    /// Numeric value used for CSV emission and for coefficient closures on
    /// interval spaces.
    pub fn value(&self, space: &ModeSpace) -> f64 {
        match (self, &space.kind) {
            (Mode::Finite(i), ModeSpaceKind::Finite { labels, .. }) => labels[*i],
            (Mode::Point(a), _) => *a,
            (Mode::Finite(i), ModeSpaceKind::Interval { .. }) => *i as f64,
        }
    }
}

/// Density of `λ` on an interval.
#[derive(Clone)]
pub enum IntervalDensity {
    /// Constant level > 0.
    Uniform(f64),
    /// Arbitrary positive density with a declared sup bound (used for
    /// rejection sampling).
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        sup: f64,
    },
}

impl IntervalDensity {
    fn eval(&self, a: f64) -> f64 {
        match self {
            IntervalDensity::Uniform(level) => *level,
            IntervalDensity::Custom { f, .. } => f(a),
        }
    }
}

#[derive(Clone)]
enum ModeSpaceKind {
    Finite { labels: Vec<f64>, weights: Vec<f64> },
    Interval { lo: f64, hi: f64, density: IntervalDensity },
}

/// The mode set `A` together with the measure `λ`.
///
/// Immutable after construction; sampling takes a caller-supplied stream.
#[derive(Clone)]
pub struct ModeSpace {
    kind: ModeSpaceKind,
    total_mass: f64,
    /// Cumulative weights for finite sampling.
    cumulative: Vec<f64>,
}

impl fmt::Debug for ModeSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ModeSpaceKind::Finite { labels, weights } => f
                .debug_struct("ModeSpace::Finite")
                .field("labels", labels)
                .field("weights", weights)
                .finish(),
            ModeSpaceKind::Interval { lo, hi, .. } => f
                .debug_struct("ModeSpace::Interval")
                .field("lo", lo)
                .field("hi", hi)
                .field("mass", &self.total_mass)
                .finish(),
        }
    }
}

impl ModeSpace {
    /// Finite mode set with strictly positive weights.
    pub fn finite(labels: Vec<f64>, weights: Vec<f64>) -> Result<Self, ModeSpaceError> {
        if labels.is_empty() {
            return Err(ModeSpaceError::Invalid("empty mode set".into()));
        }
        if labels.len() != weights.len() {
            return Err(ModeSpaceError::Invalid(format!(
                "{} labels but {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w <= 0.0) {
            return Err(ModeSpaceError::SupportViolation(format!(
                "weight {w} is not strictly positive"
            )));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(Self {
            kind: ModeSpaceKind::Finite { labels, weights },
            total_mass: acc,
            cumulative,
        })
    }

    /// Finite set {0, 1, …, m−1} with counting measure (weight 1 per mode).
    pub fn counting(m: usize) -> Result<Self, ModeSpaceError> {
        Self::finite((0..m).map(|i| i as f64).collect(), vec![1.0; m])
    }

    /// Interval [lo, hi] with a strictly positive density.
    pub fn interval(lo: f64, hi: f64, density: IntervalDensity) -> Result<Self, ModeSpaceError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ModeSpaceError::Invalid(format!(
                "interval bounds [{lo}, {hi}] must satisfy lo < hi"
            )));
        }
        match &density {
            IntervalDensity::Uniform(level) => {
                if !level.is_finite() || *level <= 0.0 {
                    return Err(ModeSpaceError::SupportViolation(format!(
                        "uniform density level {level} is not strictly positive"
                    )));
                }
            }
            IntervalDensity::Custom { f, sup } => {
                if !sup.is_finite() || *sup <= 0.0 {
                    return Err(ModeSpaceError::Invalid("density sup bound must be positive".into()));
                }
                // Spot-check positivity and the sup bound on interior points.
                for j in 1..64 {
                    let a = lo + (hi - lo) * j as f64 / 64.0;
                    let v = f(a);
                    if !v.is_finite() || v <= 0.0 {
                        return Err(ModeSpaceError::SupportViolation(format!(
                            "density is {v} at a = {a}"
                        )));
                    }
                    if v > *sup {
                        return Err(ModeSpaceError::Invalid(format!(
                            "density {v} at a = {a} exceeds its declared sup {sup}"
                        )));
                    }
                }
            }
        }
        let total_mass = match &density {
            IntervalDensity::Uniform(level) => level * (hi - lo),
            IntervalDensity::Custom { f, .. } => {
                // Composite 8×32 Gauss-Legendre of the density.
                let mut mass = 0.0;
                let (nodes, weights) = gauss_legendre(32);
                for seg in 0..8 {
                    let a = lo + (hi - lo) * seg as f64 / 8.0;
                    let b = lo + (hi - lo) * (seg + 1) as f64 / 8.0;
                    for (x, w) in nodes.iter().zip(&weights) {
                        let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
                        mass += 0.5 * (b - a) * w * f(t);
                    }
                }
                mass
            }
        };
        if !total_mass.is_finite() || total_mass <= 0.0 {
            return Err(ModeSpaceError::Invalid(format!(
                "total mass {total_mass} must be positive and finite"
            )));
        }
        Ok(Self {
            kind: ModeSpaceKind::Interval { lo, hi, density },
            total_mass,
            cumulative: Vec::new(),
        })
    }

    /// λ(A).
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_finite_kind(&self) -> bool {
        matches!(self.kind, ModeSpaceKind::Finite { .. })
    }

    /// Number of modes for the finite kind.
    pub fn num_modes(&self) -> Option<usize> {
        match &self.kind {
            ModeSpaceKind::Finite { labels, .. } => Some(labels.len()),
            ModeSpaceKind::Interval { .. } => None,
        }
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match &self.kind {
            ModeSpaceKind::Interval { lo, hi, .. } => Some((*lo, *hi)),
            ModeSpaceKind::Finite { .. } => None,
        }
    }

    pub fn contains(&self, mode: &Mode) -> bool {
        match (&self.kind, mode) {
            (ModeSpaceKind::Finite { labels, .. }, Mode::Finite(i)) => *i < labels.len(),
            (ModeSpaceKind::Interval { lo, hi, .. }, Mode::Point(a)) => *lo <= *a && *a <= *hi,
            _ => false,
        }
    }

    /// One draw from λ(da)/λ(A).
    pub fn sample_mode(&self, rng: &mut ChaCha12Rng) -> Mode {
        match &self.kind {
            ModeSpaceKind::Finite { .. } => {
                let r: f64 = rng.random::<f64>() * self.total_mass;
                let idx = self
                    .cumulative
                    .iter()
                    .position(|c| r < *c)
                    .unwrap_or(self.cumulative.len() - 1);
                Mode::Finite(idx)
            }
            ModeSpaceKind::Interval { lo, hi, density } => match density {
                IntervalDensity::Uniform(_) => Mode::Point(lo + (hi - lo) * rng.random::<f64>()),
                IntervalDensity::Custom { f, sup } => loop {
                    let a = lo + (hi - lo) * rng.random::<f64>();
                    let u: f64 = rng.random::<f64>() * sup;
                    if u < f(a) {
                        break Mode::Point(a);
                    }
                },
            },
        }
    }

    /// Nodes and weights discretizing `∫_A h(a) λ(da)`; the weights sum to
    /// λ(A). Exact pairs for the finite kind, density-scaled Gauss-Legendre
    /// (normalized to the total mass) for intervals.
    pub fn quadrature(&self, n_nodes: usize) -> Vec<(Mode, f64)> {
        assert!(n_nodes >= 1, "quadrature needs at least one node");
        match &self.kind {
            ModeSpaceKind::Finite { weights, .. } => weights
                .iter()
                .enumerate()
                .map(|(i, w)| (Mode::Finite(i), *w))
                .collect(),
            ModeSpaceKind::Interval { lo, hi, density } => {
                let (nodes, weights) = gauss_legendre(n_nodes);
                let mut out: Vec<(Mode, f64)> = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(x, w)| {
                        let a = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x;
                        (Mode::Point(a), 0.5 * (hi - lo) * w * density.eval(a))
                    })
                    .collect();
                let raw: f64 = out.iter().map(|(_, w)| w).sum();
                let scale = self.total_mass / raw;
                for (_, w) in &mut out {
                    *w *= scale;
                }
                out
            }
        }
    }

    /// The metric ρ on A: `1/2·1_{a≠b}` for finite sets,
    /// `|a−b|/(1+|a−b|)` for intervals. Both satisfy ρ < 1.
    pub fn metric(&self, a: &Mode, b: &Mode) -> Result<f64, ModeSpaceError> {
        if !self.contains(a) {
            return Err(ModeSpaceError::ModeOutsideSpace(a.to_string()));
        }
        if !self.contains(b) {
            return Err(ModeSpaceError::ModeOutsideSpace(b.to_string()));
        }
        Ok(self.metric_unchecked(a, b))
    }

    pub(crate) fn metric_unchecked(&self, a: &Mode, b: &Mode) -> f64 {
        match (a, b) {
            (Mode::Finite(i), Mode::Finite(j)) => {
                if i == j {
                    0.0
                } else {
                    0.5
                }
            }
            (Mode::Point(x), Mode::Point(y)) => {
                let d = (x - y).abs();
                d / (1.0 + d)
            }
            _ => 0.5,
        }
    }

    /// i-th element (0-based) of the dense sequence (a_i): the modes
    /// themselves for finite kind; both endpoints followed by bit-reversed
    /// dyadic rationals for intervals, giving a uniform fill rate.
    pub fn dense_mode(&self, i: usize) -> Mode {
        match &self.kind {
            ModeSpaceKind::Finite { labels, .. } => Mode::Finite(i.min(labels.len() - 1)),
            ModeSpaceKind::Interval { lo, hi, .. } => match i {
                0 => Mode::Point(*lo),
                1 => Mode::Point(*hi),
                _ => Mode::Point(lo + (hi - lo) * van_der_corput((i - 1) as u64)),
            },
        }
    }

    /// `Π_k(b)`: the nearest point to b among {a_1, …, a_k}, minimal index on
    /// ties. For the finite kind k is clamped to the number of modes.
    pub fn project_nearest(&self, b: &Mode, k: usize) -> Result<Mode, ModeSpaceError> {
        Ok(self.dense_mode(self.project_nearest_index(b, k)?))
    }

    /// Index i(b) of Π_k(b) in the dense sequence.
    pub fn project_nearest_index(&self, b: &Mode, k: usize) -> Result<usize, ModeSpaceError> {
        if !self.contains(b) {
            return Err(ModeSpaceError::ModeOutsideSpace(b.to_string()));
        }
        let k = k.max(1);
        let k = match &self.kind {
            ModeSpaceKind::Finite { labels, .. } => k.min(labels.len()),
            ModeSpaceKind::Interval { .. } => k,
        };
        let mut best = 0;
        let mut best_dist = self.metric_unchecked(b, &self.dense_mode(0));
        for i in 1..k {
            let d = self.metric_unchecked(b, &self.dense_mode(i));
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        Ok(best)
    }
}

/// Bit-reversed binary fraction of i ≥ 1 (1 → 1/2, 2 → 1/4, 3 → 3/4, …).
fn van_der_corput(mut i: u64) -> f64 {
    let mut num = 0.0_f64;
    let mut denom = 1.0_f64;
    while i > 0 {
        denom *= 2.0;
        num = num * 2.0 + (i & 1) as f64;
        i >>= 1;
    }
    num / denom
}

/// Gauss-Legendre nodes and weights on [−1, 1] by Newton iteration on P_n.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n == 1 {
        nodes[0] = 0.0;
        weights[0] = 2.0;
    }
    (nodes, weights)
}

/// JSON-facing descriptor: `{"kind":"finite","modes":[…],"weights":[…]}` or
/// `{"kind":"interval","lo":…,"hi":…,"density":"uniform"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModeSpaceSpec {
    Finite {
        modes: Vec<f64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Interval {
        lo: f64,
        hi: f64,
        #[serde(default = "default_density")]
        density: String,
    },
}

fn default_density() -> String {
    "uniform".to_string()
}

impl ModeSpaceSpec {
    pub fn build(&self) -> Result<ModeSpace, ModeSpaceError> {
        match self {
            ModeSpaceSpec::Finite { modes, weights } => {
                let w = weights.clone().unwrap_or_else(|| vec![1.0; modes.len()]);
                ModeSpace::finite(modes.clone(), w)
            }
            ModeSpaceSpec::Interval { lo, hi, density } => {
                if density != "uniform" {
                    return Err(ModeSpaceError::Invalid(format!(
                        "unsupported density \"{density}\" (only \"uniform\" is available from config)"
                    )));
                }
                ModeSpace::interval(*lo, *hi, IntervalDensity::Uniform(1.0))
            }
        }
    }
}
