//! Backward regression Monte Carlo for the penalized constrained BSDE and
//! its reflected (n → ∞) limit.
//!
//! The driver is handled in compensated form, so one explicit backward Euler
//! step reads
//!
//! `Y_i = ŷ_i(feat, I_i) + Δt·[ f + n·Q_a[(U_i(a) − c_i(a))⁺] − Q_a[U_i(a)] ]`
//!
//! where ŷ_i is the least-squares surface fitted on features × mode blocks,
//! `U_i(a) = ŷ_i(feat, a) − ŷ_i(feat, I_i)` is the mode-jump increment of the
//! value surface, and Q_a is quadrature against λ. The reflected variant
//! replaces the penalty with the obstacle fixed point over modes. The
//! ε-optimal intensity control is read off the solved surfaces.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::girsanov::{simulate_scenario, ControlContext, IntensityControl, RandomizedScenario};
use crate::modespace::Mode;
use crate::problem::{Feature, PathPrefix, SwitchingProblem};
use crate::simulate::{SimError, TimeGrid};
use crate::strategy::mean_stderr;

#[derive(Debug, Error)]
pub enum BsdeError {
    #[error("need at least {need} paths for a basis with {block} coefficients, got {got}")]
    TooFewPaths { need: usize, got: usize, block: usize },
    #[error("non-finite value update at step {step}")]
    NonFinite { step: usize },
    #[error("time {0} is not on the solution grid")]
    OffGridTime(f64),
    #[error("ε-optimal control requires a penalized solution (finite n)")]
    NeedsPenalized,
    #[error("eps = {eps} must lie in (0, n = {n})")]
    InvalidEps { eps: f64, n: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Regression basis description: polynomial lifts of the declared path
/// summaries up to `degree`, one coefficient block per mode for finite A or
/// a Chebyshev tensor of degree `mode_degree` in the mode for interval A;
/// `quad_nodes` discretizes ∫·λ(da) on intervals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub mode_degree: usize,
    pub quad_nodes: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            mode_degree: 3,
            quad_nodes: 16,
        }
    }
}

/// Coefficients of one fitted surface together with the feature
/// standardization and the fitted feature range (evaluations clamp to it, so
/// the polynomial is never extrapolated).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSurface {
    pub coeffs: Vec<f64>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub feat_lo: Vec<f64>,
    pub feat_hi: Vec<f64>,
}

/// Per-time-step regression surfaces: one entry per mode (finite A) or a
/// single Chebyshev-tensor entry (interval A).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSurface {
    pub per_mode: Vec<ModeSurface>,
}

/// All multi-indices of total degree ≤ p over `dims` variables, constant
/// term first.
fn monomial_exponents(dims: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; dims]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &out {
            let start = e.iter().rposition(|x| *x > 0).unwrap_or(0);
            for d in start..dims {
                let mut e2 = e.clone();
                e2[d] += 1;
                next.push(e2);
            }
        }
        out.extend(next.clone());
        out.dedup();
        out = {
            let mut seen = std::collections::BTreeSet::new();
            out.into_iter()
                .filter(|e| seen.insert(e.clone()))
                .collect()
        };
    }
    out
}

/// Raw summary vector per the problem's declared features.
fn raw_features(problem: &SwitchingProblem, prefix: &PathPrefix) -> Vec<f64> {
    let mut out = Vec::new();
    for f in &problem.declared_features {
        match f {
            Feature::Current => out.extend_from_slice(prefix.current()),
            Feature::RunningMaxAbs => out.push(prefix.running_max_abs()),
            Feature::RunningAvg => out.extend_from_slice(prefix.running_avg()),
        }
    }
    if out.is_empty() {
        out.extend_from_slice(prefix.current());
    }
    out
}

fn monomials(raw_scaled: &[f64], exponents: &[Vec<u8>], out: &mut Vec<f64>) {
    out.clear();
    for e in exponents {
        let mut v = 1.0;
        for (x, p) in raw_scaled.iter().zip(e) {
            for _ in 0..*p {
                v *= x;
            }
        }
        out.push(v);
    }
}

fn chebyshev(u: f64, degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if degree >= 1 {
        out.push(u);
    }
    for j in 2..=degree {
        let v = 2.0 * u * out[j - 1] - out[j - 2];
        out.push(v);
    }
}

/// Solves min ‖design·β − targets‖² + ridge·‖β‖² by orthogonal
/// factorizations (thin QR, then SVD with Tikhonov filter factors).
/// Default ridge: 1e−8 × mean squared design entry.
pub fn lsq_fit(design: &DMatrix<f64>, targets: &DVector<f64>, ridge: Option<f64>) -> DVector<f64> {
    let rows = design.nrows();
    let cols = design.ncols();
    debug_assert_eq!(rows, targets.len());
    let ridge = ridge.unwrap_or_else(|| {
        1e-8 * design.iter().map(|v| v * v).sum::<f64>() / (rows * cols).max(1) as f64
    });
    let (small, rhs) = if rows > cols {
        let qr = design.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let qty = q.transpose() * targets;
        (r, qty)
    } else {
        (design.clone(), targets.clone())
    };
    let svd = small.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut beta = DVector::zeros(cols);
    for j in 0..svd.singular_values.len() {
        let s = svd.singular_values[j];
        let filter = if s > 0.0 { s / (s * s + ridge) } else { 0.0 };
        let uj_y: f64 = (0..rhs.len()).map(|i| u[(i, j)] * rhs[i]).sum();
        let w = filter * uj_y;
        for l in 0..cols {
            beta[l] += w * vt[(j, l)];
        }
    }
    beta
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scheme {
    Penalized(f64),
    Reflected,
}

/// Regression surfaces for the whole backward pass plus the value and
/// constraint diagnostics.
#[derive(Debug, Clone)]
pub struct PenalizedSolution {
    pub y0: f64,
    pub y0_stderr: f64,
    /// Monte Carlo estimate of E[K_Tⁿ] = n·violation (0 for reflected).
    pub penalty_mass: f64,
    /// Monte Carlo estimate of E ∫∫ (Uⁿ − c)⁺ λ(da) dt.
    pub violation: f64,
    /// Penalty level; None for the reflected limit.
    pub n: Option<f64>,
    pub grid: TimeGrid,
    pub m_paths: usize,
    pub basis: RegressionBasis,
    pub seed: u64,
    surfaces: Vec<StepSurface>,
    exponents: Vec<Vec<u8>>,
    problem: SwitchingProblem,
}

struct ScenarioSet {
    scenarios: Vec<RandomizedScenario>,
    /// Mode at each grid time, path-major: modes_at[p·(N+1) + i].
    modes_at: Vec<Mode>,
}

fn build_scenarios(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<ScenarioSet, BsdeError> {
    let scenarios: Vec<Result<RandomizedScenario, SimError>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| simulate_scenario(problem, grid, seed, idx))
        .collect();
    let mut out = Vec::with_capacity(m);
    for s in scenarios {
        out.push(s?);
    }
    let n = grid.n_steps;
    let mut modes_at = Vec::with_capacity(m * (n + 1));
    for s in &out {
        for i in 0..=n {
            modes_at.push(s.mode_path.value(grid.time(i)));
        }
    }
    Ok(ScenarioSet {
        scenarios: out,
        modes_at,
    })
}

struct PassOutput {
    y0: f64,
    violation: f64,
    surfaces: Option<Vec<StepSurface>>,
}

struct Workspace {
    phi: Vec<f64>,
    cheb: Vec<f64>,
}

fn eval_surface(
    surface: &ModeSurface,
    raw: &[f64],
    mode_u: Option<f64>,
    exponents: &[Vec<u8>],
    mode_degree: usize,
    ws: &mut Workspace,
) -> f64 {
    let scaled: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(d, x)| {
            let xc = x.clamp(surface.feat_lo[d], surface.feat_hi[d]);
            (xc - surface.feat_mean[d]) / surface.feat_std[d]
        })
        .collect();
    monomials(&scaled, exponents, &mut ws.phi);
    match mode_u {
        None => ws.phi.iter().zip(&surface.coeffs).map(|(p, c)| p * c).sum(),
        Some(u) => {
            chebyshev(u, mode_degree, &mut ws.cheb);
            let k = ws.phi.len();
            let mut acc = 0.0;
            for (j, t) in ws.cheb.iter().enumerate() {
                let block = &surface.coeffs[j * k..(j + 1) * k];
                let dot: f64 = ws.phi.iter().zip(block).map(|(p, c)| p * c).sum();
                acc += t * dot;
            }
            acc
        }
    }
}

fn mode_to_unit(mode: &Mode, lo: f64, hi: f64) -> f64 {
    let a = match mode {
        Mode::Point(a) => *a,
        Mode::Finite(i) => *i as f64,
    };
    (2.0 * a - lo - hi) / (hi - lo)
}

/// Fit one step's surfaces; modes with too few rows inherit the surface
/// fitted one step later (carried in `carried`).
#[allow(clippy::too_many_arguments)]
fn fit_step(
    problem: &SwitchingProblem,
    raw: &[Vec<f64>],
    targets: &[f64],
    mode_of: &dyn Fn(usize) -> Mode,
    carried: &[ModeSurface],
    exponents: &[Vec<u8>],
    basis: &RegressionBasis,
) -> Vec<ModeSurface> {
    let k = exponents.len();
    match problem.modes.num_modes() {
        Some(m) => {
            let threshold = 8 * k;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
            for p in 0..raw.len() {
                if let Mode::Finite(a) = mode_of(p) {
                    groups[a].push(p);
                }
            }
            (0..m)
                .map(|a| {
                    let rows = &groups[a];
                    if rows.len() < threshold {
                        return carried[a].clone();
                    }
                    fit_block(raw, targets, rows, exponents, None)
                })
                .collect()
        }
        None => {
            let (lo, hi) = problem.modes.bounds().expect("interval kind");
            let q = basis.mode_degree;
            // The Chebyshev tensor needs genuine mode spread; early steps
            // where almost every path still sits at ξ0 inherit the later
            // surface instead of fitting near-collinear data.
            let xi0_value = problem.xi0.value(&problem.modes);
            let moved = (0..raw.len())
                .filter(|p| {
                    let v = match mode_of(*p) {
                        Mode::Point(a) => a,
                        Mode::Finite(i) => i as f64,
                    };
                    v != xi0_value
                })
                .count();
            if moved < 8 * k * (q + 1) {
                return carried.to_vec();
            }
            let rows: Vec<usize> = (0..raw.len()).collect();
            let dims = raw[0].len();
            let stats = feature_moments(raw, &rows, dims);
            let mut design = DMatrix::zeros(rows.len(), k * (q + 1));
            let mut ws = Workspace {
                phi: Vec::with_capacity(k),
                cheb: Vec::with_capacity(q + 1),
            };
            for (r, p) in rows.iter().enumerate() {
                let scaled: Vec<f64> = raw[*p]
                    .iter()
                    .zip(stats.mean.iter().zip(&stats.std))
                    .map(|(x, (m, s))| (x - m) / s)
                    .collect();
                monomials(&scaled, exponents, &mut ws.phi);
                chebyshev(mode_to_unit(&mode_of(*p), lo, hi), q, &mut ws.cheb);
                for (j, t) in ws.cheb.iter().enumerate() {
                    for (l, phi) in ws.phi.iter().enumerate() {
                        design[(r, j * k + l)] = t * phi;
                    }
                }
            }
            let ybar = rows.iter().map(|p| targets[*p]).sum::<f64>() / rows.len() as f64;
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|p| targets[*p] - ybar));
            let mut beta = lsq_fit(&design, &y, None);
            beta[0] += ybar;
            vec![ModeSurface {
                coeffs: beta.iter().copied().collect(),
                feat_mean: stats.mean,
                feat_std: stats.std,
                feat_lo: stats.lo,
                feat_hi: stats.hi,
            }]
        }
    }
}

struct FeatureStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn feature_moments(raw: &[Vec<f64>], rows: &[usize], dims: usize) -> FeatureStats {
    let mut mean = vec![0.0; dims];
    let mut lo = vec![f64::INFINITY; dims];
    let mut hi = vec![f64::NEG_INFINITY; dims];
    for p in rows {
        for (d, v) in raw[*p].iter().enumerate() {
            mean[d] += v;
            lo[d] = lo[d].min(*v);
            hi[d] = hi[d].max(*v);
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let mut var = vec![0.0; dims];
    for p in rows {
        for (d, v) in raw[*p].iter().enumerate() {
            var[d] += (v - mean[d]) * (v - mean[d]);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / rows.len() as f64).sqrt().max(1e-8))
        .collect();
    FeatureStats { mean, std, lo, hi }
}

fn fit_block(
    raw: &[Vec<f64>],
    targets: &[f64],
    rows: &[usize],
    exponents: &[Vec<u8>],
    ridge: Option<f64>,
) -> ModeSurface {
    let k = exponents.len();
    let dims = raw[rows[0]].len();
    let stats = feature_moments(raw, rows, dims);
    let mut design = DMatrix::zeros(rows.len(), k);
    let mut phi = Vec::with_capacity(k);
    for (r, p) in rows.iter().enumerate() {
        let scaled: Vec<f64> = raw[*p]
            .iter()
            .zip(stats.mean.iter().zip(&stats.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        monomials(&scaled, exponents, &mut phi);
        for (l, v) in phi.iter().enumerate() {
            design[(r, l)] = *v;
        }
    }
    // Center targets so the intercept is not shrunk: constant solutions are
    // then reproduced exactly.
    let ybar = rows.iter().map(|p| targets[*p]).sum::<f64>() / rows.len() as f64;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|p| targets[*p] - ybar));
    let mut beta = lsq_fit(&design, &y, ridge);
    beta[0] += ybar;
    ModeSurface {
        coeffs: beta.iter().copied().collect(),
        feat_mean: stats.mean,
        feat_std: stats.std,
        feat_lo: stats.lo,
        feat_hi: stats.hi,
    }
}

/// Terminal fit seeding the inheritance chain: per-mode regression of g on
/// the terminal features (global fit for empty blocks).
fn terminal_surfaces(
    problem: &SwitchingProblem,
    set: &ScenarioSet,
    indices: &[usize],
    targets_all: &[f64],
    grid: &TimeGrid,
    exponents: &[Vec<u8>],
    basis: &RegressionBasis,
) -> Vec<ModeSurface> {
    let n = grid.n_steps;
    let raw: Vec<Vec<f64>> = indices
        .iter()
        .map(|p| raw_features(problem, &set.scenarios[*p].state.prefix(n)))
        .collect();
    let targets: Vec<f64> = indices.iter().map(|p| targets_all[*p]).collect();
    let k = exponents.len();
    match problem.modes.num_modes() {
        Some(m) => {
            let global = fit_block(&raw, &targets, &(0..raw.len()).collect::<Vec<_>>(), exponents, None);
            let threshold = 8 * k;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
            for (r, p) in indices.iter().enumerate() {
                if let Mode::Finite(a) = set.modes_at[p * (n + 1) + n] {
                    groups[a].push(r);
                }
            }
            (0..m)
                .map(|a| {
                    if groups[a].len() < threshold {
                        global.clone()
                    } else {
                        fit_block(&raw, &targets, &groups[a], exponents, None)
                    }
                })
                .collect()
        }
        None => {
            let seed = vec![ModeSurface {
                coeffs: vec![0.0; k * (basis.mode_degree + 1)],
                feat_mean: vec![0.0; raw[0].len()],
                feat_std: vec![1.0; raw[0].len()],
                feat_lo: vec![f64::NEG_INFINITY; raw[0].len()],
                feat_hi: vec![f64::INFINITY; raw[0].len()],
            }];
            fit_step(
                problem,
                &raw,
                &targets,
                &|r| set.modes_at[indices[r] * (n + 1) + n],
                &seed,
                exponents,
                basis,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_pass(
    problem: &SwitchingProblem,
    set: &ScenarioSet,
    indices: &[usize],
    scheme: Scheme,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    exponents: &[Vec<u8>],
    store_surfaces: bool,
) -> Result<PassOutput, BsdeError> {
    let n = grid.n_steps;
    let dt = grid.dt();
    let quad = problem.modes.quadrature(basis.quad_nodes);
    let finite = problem.modes.is_finite_kind();
    let bounds = problem.modes.bounds();
    let sweeps = match problem.modes.num_modes() {
        Some(m) => m.saturating_sub(1),
        None => 3,
    };

    // Terminal condition Y_N = g(X, I_T).
    let mut y_all = vec![0.0; set.scenarios.len()];
    for p in indices {
        let s = &set.scenarios[*p];
        y_all[*p] = (problem.terminal_reward)(
            &s.state.terminal_prefix(),
            &set.modes_at[p * (n + 1) + n],
        );
    }
    let mut carried = terminal_surfaces(problem, set, indices, &y_all, grid, exponents, basis);
    let mut surfaces: Vec<Option<StepSurface>> = vec![None; n];
    let mut violation_sum = 0.0;
    let mut ws = Workspace {
        phi: Vec::new(),
        cheb: Vec::new(),
    };

    for i in (0..n).rev() {
        let t = grid.time(i);
        let raw: Vec<Vec<f64>> = indices
            .iter()
            .map(|p| raw_features(problem, &set.scenarios[*p].state.prefix(i)))
            .collect();
        let targets: Vec<f64> = indices.iter().map(|p| y_all[*p]).collect();
        let fitted = fit_step(
            problem,
            &raw,
            &targets,
            &|r| set.modes_at[indices[r] * (n + 1) + i],
            &carried,
            exponents,
            basis,
        );

        let surf_of = |mode: &Mode, raw_p: &[f64], ws: &mut Workspace| -> f64 {
            if finite {
                let a = match mode {
                    Mode::Finite(a) => *a,
                    Mode::Point(_) => 0,
                };
                eval_surface(&fitted[a], raw_p, None, exponents, basis.mode_degree, ws)
            } else {
                let (lo, hi) = bounds.expect("interval kind");
                eval_surface(
                    &fitted[0],
                    raw_p,
                    Some(mode_to_unit(mode, lo, hi)),
                    exponents,
                    basis.mode_degree,
                    ws,
                )
            }
        };

        for (r, p) in indices.iter().enumerate() {
            let s = &set.scenarios[*p];
            let prefix = s.state.prefix(i);
            let own_mode = set.modes_at[p * (n + 1) + i];
            let raw_p = &raw[r];
            let y_own = surf_of(&own_mode, raw_p, &mut ws);
            let f_val = (problem.running_reward)(t, &prefix, &own_mode);

            // Constraint diagnostic ∫(U−c)⁺λ(da), shared by both schemes.
            let mut pen = 0.0;
            let mut q_u = 0.0;
            for (a, w) in &quad {
                let u = surf_of(a, raw_p, &mut ws) - y_own;
                let c = (problem.switch_cost)(t, &prefix, &own_mode, a);
                let gap = u - c;
                if gap > 0.0 {
                    pen += w * gap;
                }
                q_u += w * u;
            }
            violation_sum += dt * pen;

            let updated = match scheme {
                Scheme::Penalized(level) => y_own + dt * (f_val + level * pen - q_u),
                Scheme::Reflected => {
                    // Regression continuations on randomized paths absorb the
                    // mode-jump drift Δt·∫(ŷ(a')−ŷ(a))λ(da'); remove it before
                    // reflecting, so each cont is a stay-in-mode continuation.
                    let raw_cont: Vec<f64> =
                        quad.iter().map(|(a, _)| surf_of(a, raw_p, &mut ws)).collect();
                    let q_all: f64 = quad
                        .iter()
                        .zip(&raw_cont)
                        .map(|((_, w), c)| w * c)
                        .sum();
                    let mass = problem.modes.total_mass();
                    let cont: Vec<f64> = raw_cont
                        .iter()
                        .map(|c| c - dt * (q_all - mass * c))
                        .collect();
                    let nq = cont.len();
                    let mut costs = vec![0.0; nq * nq];
                    for (qi, (ai, _)) in quad.iter().enumerate() {
                        for (qj, (aj, _)) in quad.iter().enumerate() {
                            if qi != qj {
                                costs[qi * nq + qj] =
                                    (problem.switch_cost)(t, &prefix, ai, aj);
                            }
                        }
                    }
                    let mut w_vec = cont.clone();
                    for _ in 0..sweeps {
                        let prev = w_vec.clone();
                        for qi in 0..nq {
                            let mut best = cont[qi];
                            for qj in 0..nq {
                                if qj != qi {
                                    let cand = prev[qj] - costs[qi * nq + qj];
                                    if cand > best {
                                        best = cand;
                                    }
                                }
                            }
                            w_vec[qi] = best;
                        }
                    }
                    let own_value = if finite {
                        let a = match own_mode {
                            Mode::Finite(a) => a,
                            Mode::Point(_) => 0,
                        };
                        w_vec[a]
                    } else {
                        let cont_own = y_own - dt * (q_all - mass * y_own);
                        let mut best = cont_own;
                        for (qj, (aj, _)) in quad.iter().enumerate() {
                            let c = (problem.switch_cost)(t, &prefix, &own_mode, aj);
                            let cand = w_vec[qj] - c;
                            if cand > best {
                                best = cand;
                            }
                        }
                        best
                    };
                    own_value + dt * f_val
                }
            };
            if !updated.is_finite() {
                return Err(BsdeError::NonFinite { step: i });
            }
            y_all[*p] = updated;
        }
        if store_surfaces {
            surfaces[i] = Some(StepSurface {
                per_mode: fitted.clone(),
            });
        }
        carried = fitted;
    }

    let m = indices.len() as f64;
    let y0 = indices.iter().map(|p| y_all[*p]).sum::<f64>() / m;
    Ok(PassOutput {
        y0,
        violation: violation_sum / m,
        surfaces: if store_surfaces {
            Some(surfaces.into_iter().map(|s| s.unwrap()).collect())
        } else {
            None
        },
    })
}

fn block_size(problem: &SwitchingProblem, basis: &RegressionBasis, exponents: &[Vec<u8>]) -> usize {
    if problem.modes.is_finite_kind() {
        exponents.len()
    } else {
        exponents.len() * (basis.mode_degree + 1)
    }
}

fn solve(
    problem: &SwitchingProblem,
    scheme: Scheme,
    grid: &TimeGrid,
    m: usize,
    basis: &RegressionBasis,
    seed: u64,
) -> Result<PenalizedSolution, BsdeError> {
    let dims = {
        let mut d = 0;
        for f in &problem.declared_features {
            d += match f {
                Feature::Current | Feature::RunningAvg => problem.dim_state,
                Feature::RunningMaxAbs => 1,
            };
        }
        d.max(problem.dim_state)
    };
    let exponents = monomial_exponents(dims, basis.degree);
    let block = block_size(problem, basis, &exponents);
    if m < block * 10 {
        return Err(BsdeError::TooFewPaths {
            need: block * 10,
            got: m,
            block,
        });
    }
    let set = build_scenarios(problem, grid, m, seed)?;
    let all: Vec<usize> = (0..m).collect();
    let full = backward_pass(problem, &set, &all, scheme, grid, basis, &exponents, true)?;

    // Batch means over disjoint path groups for the y0 standard error.
    let batches = (m / (block * 100)).clamp(2, 20);
    let chunk = m / batches;
    let batch_results: Vec<Result<f64, BsdeError>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * chunk;
            let hi = if b + 1 == batches { m } else { (b + 1) * chunk };
            let idx: Vec<usize> = (lo..hi).collect();
            Ok(
                backward_pass(problem, &set, &idx, scheme, grid, basis, &exponents, false)?
                    .y0,
            )
        })
        .collect();
    let mut batch_y0 = Vec::with_capacity(batches);
    for b in batch_results {
        batch_y0.push(b?);
    }
    let (_, y0_stderr) = mean_stderr(&batch_y0);

    let (n_level, penalty_mass) = match scheme {
        Scheme::Penalized(level) => (Some(level), level * full.violation),
        Scheme::Reflected => (None, 0.0),
    };
    Ok(PenalizedSolution {
        y0: full.y0,
        y0_stderr,
        penalty_mass,
        violation: full.violation,
        n: n_level,
        grid: *grid,
        m_paths: m,
        basis: *basis,
        seed,
        surfaces: full.surfaces.expect("stored"),
        exponents,
        problem: problem.clone(),
    })
}

/// Solve the penalized equation at penalty level n ≥ 0 by backward
/// least-squares regression over M simulated randomized scenarios.
pub fn solve_penalized(
    problem: &SwitchingProblem,
    n: f64,
    grid: &TimeGrid,
    m: usize,
    basis: &RegressionBasis,
    seed: u64,
) -> Result<PenalizedSolution, BsdeError> {
    assert!(n >= 0.0);
    solve(problem, Scheme::Penalized(n), grid, m, basis, seed)
}

/// The n → ∞ obstacle limit: per-step reflection of the continuation
/// surfaces against the switching costs.
pub fn solve_reflected(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    m: usize,
    basis: &RegressionBasis,
    seed: u64,
) -> Result<PenalizedSolution, BsdeError> {
    solve(problem, Scheme::Reflected, grid, m, basis, seed)
}

impl PenalizedSolution {
    pub fn surfaces(&self) -> &[StepSurface] {
        &self.surfaces
    }

    pub fn problem(&self) -> &SwitchingProblem {
        &self.problem
    }

    fn grid_index(&self, t: f64) -> Result<usize, BsdeError> {
        let dt = self.grid.dt();
        let i = (t / dt).round();
        if (t - i * dt).abs() > 1e-9 * self.grid.horizon.max(1.0) {
            return Err(BsdeError::OffGridTime(t));
        }
        Ok((i as usize).min(self.grid.n_steps))
    }

    /// ŷ_i(features(prefix), mode); at i = N this is g(path, mode) exactly.
    pub fn evaluate_value(
        &self,
        t: f64,
        prefix: &PathPrefix,
        mode: &Mode,
    ) -> Result<f64, BsdeError> {
        let i = self.grid_index(t)?;
        if i == self.grid.n_steps {
            return Ok((self.problem.terminal_reward)(prefix, mode));
        }
        Ok(self.eval_surface_at(i, prefix, mode))
    }

    fn eval_surface_at(&self, i: usize, prefix: &PathPrefix, mode: &Mode) -> f64 {
        let raw = raw_features(&self.problem, prefix);
        let mut ws = Workspace {
            phi: Vec::new(),
            cheb: Vec::new(),
        };
        let step = &self.surfaces[i];
        if self.problem.modes.is_finite_kind() {
            let a = match mode {
                Mode::Finite(a) => *a,
                Mode::Point(_) => 0,
            };
            eval_surface(
                &step.per_mode[a],
                &raw,
                None,
                &self.exponents,
                self.basis.mode_degree,
                &mut ws,
            )
        } else {
            let (lo, hi) = self.problem.modes.bounds().expect("interval kind");
            eval_surface(
                &step.per_mode[0],
                &raw,
                Some(mode_to_unit(mode, lo, hi)),
                &self.exponents,
                self.basis.mode_degree,
                &mut ws,
            )
        }
    }

    /// Portable surface dump (no closures): enough to rebuild the ε-optimal
    /// control against a problem reconstructed from config.
    pub fn dump(&self) -> SolutionDump {
        SolutionDump {
            problem: self.problem.name.clone(),
            n: self.n,
            grid: self.grid,
            basis: self.basis,
            m_paths: self.m_paths,
            seed: self.seed,
            y0: self.y0,
            surfaces: self.surfaces.clone(),
        }
    }

    pub fn from_dump(dump: SolutionDump, problem: &SwitchingProblem) -> Result<Self, BsdeError> {
        let dims = {
            let mut d = 0;
            for f in &problem.declared_features {
                d += match f {
                    Feature::Current | Feature::RunningAvg => problem.dim_state,
                    Feature::RunningMaxAbs => 1,
                };
            }
            d.max(problem.dim_state)
        };
        Ok(Self {
            y0: dump.y0,
            y0_stderr: 0.0,
            penalty_mass: 0.0,
            violation: 0.0,
            n: dump.n,
            grid: dump.grid,
            m_paths: dump.m_paths,
            basis: dump.basis,
            seed: dump.seed,
            surfaces: dump.surfaces,
            exponents: monomial_exponents(dims, dump.basis.degree),
            problem: problem.clone(),
        })
    }
}

/// Serializable surface dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionDump {
    pub problem: String,
    pub n: Option<f64>,
    pub grid: TimeGrid,
    pub basis: RegressionBasis,
    pub m_paths: usize,
    pub seed: u64,
    pub y0: f64,
    pub surfaces: Vec<StepSurface>,
}

/// ν^{ε,n} branch map on x = U − c: n where the constraint is active,
/// ε on moderate slack, −ε/x far below.
pub(crate) fn epsilon_branch(x: f64, n: f64, eps: f64) -> f64 {
    if x >= 0.0 {
        n
    } else if x > -1.0 {
        eps
    } else {
        -eps / x
    }
}

/// The ε-optimal intensity control read from a penalized solution's
/// surfaces.
pub struct EpsilonOptimalControl {
    solution: PenalizedSolution,
    n: f64,
    eps: f64,
}

impl IntensityControl for EpsilonOptimalControl {
    fn evaluate(&self, ctx: &ControlContext, a: &Mode) -> f64 {
        let i = ((ctx.t / self.solution.grid.dt()) as usize)
            .min(self.solution.grid.n_steps - 1);
        let u = self.solution.eval_surface_at(i, ctx.path, a)
            - self.solution.eval_surface_at(i, ctx.path, &ctx.mode_before);
        let c = (self.solution.problem.switch_cost)(ctx.t, ctx.path, &ctx.mode_before, a);
        epsilon_branch(u - c, self.n, self.eps)
    }
    fn bound(&self) -> f64 {
        self.n
    }
}

/// Build ν^{ε,n} from a penalized solution; requires eps ∈ (0, n).
pub fn extract_epsilon_control(
    solution: &PenalizedSolution,
    eps: f64,
) -> Result<EpsilonOptimalControl, BsdeError> {
    let n = solution.n.ok_or(BsdeError::NeedsPenalized)?;
    if !(eps > 0.0 && eps < n) {
        return Err(BsdeError::InvalidEps { eps, n });
    }
    Ok(EpsilonOptimalControl {
        solution: solution.clone(),
        n,
        eps,
    })
}
