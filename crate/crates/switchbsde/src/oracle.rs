//! Dynamic-programming ground truth on a 1-d state lattice for Markovian,
//! finite-mode instances: the discrete-time counterpart of the
//! interconnected-obstacle system, used as the independent oracle for the
//! equivalence tests.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::modespace::Mode;
use crate::problem::{PrefixBuffer, SwitchingProblem};
use crate::simulate::TimeGrid;
use crate::strategy::{Decision, PolicyContext, SwitchingPolicy};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle requires Markovian finite-mode problem")]
    RequiresMarkovianFiniteMode,
    #[error("oracle supports one-dimensional state only")]
    RequiresScalarState,
    #[error("initial state {0} outside lattice [{1}, {2}]")]
    OutsideLattice(f64, f64, f64),
}

const TIE_TOL: f64 = 1e-12;

/// Physicists' 5-point Gauss-Hermite rule (weight e^{−x²}); exact for
/// polynomial integrands up to degree 9.
const GH5_NODES: [f64; 5] = [
    -2.0201828704560856,
    -0.9585724646138185,
    0.0,
    0.9585724646138185,
    2.0201828704560856,
];
const GH5_WEIGHTS: [f64; 5] = [
    0.019953242059045913,
    0.3936193231522412,
    0.9453087204829419,
    0.3936193231522412,
    0.019953242059045913,
];

/// Backward-recursion table: values v[i][node][mode] and pre-obstacle
/// continuation values on the same layout.
pub struct DpTable {
    pub grid: TimeGrid,
    pub x_nodes: Vec<f64>,
    pub n_modes: usize,
    /// (N+1) × nx × m.
    values: Vec<f64>,
    /// N × nx × m, f·Δt + E[v(i+1, x', a)] before the obstacle sweep.
    continuation: Vec<f64>,
    x0: f64,
    xi0: usize,
}

impl DpTable {
    fn idx(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.x_nodes.len() + j) * self.n_modes + a
    }

    pub fn value_at(&self, i: usize, j: usize, a: usize) -> f64 {
        self.values[self.idx(i, j, a)]
    }

    pub fn continuation_at(&self, i: usize, j: usize, a: usize) -> f64 {
        self.continuation[self.idx(i, j, a)]
    }

    /// Linear interpolation of v[i][·][a] at x, clamped at the lattice edges.
    pub fn interp_value(&self, i: usize, x: f64, a: usize) -> f64 {
        interp(&self.x_nodes, x, |j| self.value_at(i, j, a))
    }

    pub fn interp_continuation(&self, i: usize, x: f64, a: usize) -> f64 {
        interp(&self.x_nodes, x, |j| self.continuation_at(i, j, a))
    }

    /// Nearest time-slice index for a clock value t.
    pub fn slice_of(&self, t: f64) -> usize {
        let i = (t / self.grid.dt()).round() as isize;
        i.clamp(0, self.grid.n_steps as isize) as usize
    }
}

fn interp(nodes: &[f64], x: f64, value: impl Fn(usize) -> f64) -> f64 {
    let n = nodes.len();
    if x <= nodes[0] {
        return value(0);
    }
    if x >= nodes[n - 1] {
        return value(n - 1);
    }
    let h = (nodes[n - 1] - nodes[0]) / (n - 1) as f64;
    let j = (((x - nodes[0]) / h) as usize).min(n - 2);
    let w = (x - nodes[j]) / (nodes[j + 1] - nodes[j]);
    (1.0 - w) * value(j) + w * value(j + 1)
}

fn point_prefix(t: f64, x: f64) -> PrefixBuffer {
    let mut buf = PrefixBuffer::new(1);
    buf.push(t, &[x]);
    buf
}

/// Lattice half-width: drift envelope plus a ±6σ diffusion margin, probed on
/// a coarse sweep around x0.
fn lattice_range(problem: &SwitchingProblem, grid: &TimeGrid) -> (f64, f64) {
    let x0 = problem.x0[0];
    let m = problem.modes.num_modes().unwrap_or(1);
    let probe_half = 1.0 + x0.abs();
    let mut b_max = 0.0_f64;
    let mut s_max = 0.0_f64;
    for j in 0..=32 {
        let x = x0 - probe_half + 2.0 * probe_half * j as f64 / 32.0;
        for t_frac in [0.0, 0.5, 1.0] {
            let t = grid.horizon * t_frac;
            let buf = point_prefix(t, x);
            let prefix = buf.last_prefix();
            for a in 0..m {
                let mode = Mode::Finite(a);
                b_max = b_max.max((problem.drift)(t, &prefix, &mode)[0].abs());
                for s in (problem.diffusion)(t, &prefix, &mode) {
                    s_max = s_max.max(s.abs());
                }
            }
        }
    }
    let half = b_max * grid.horizon + 6.0 * s_max * grid.horizon.sqrt() + 1.0;
    (x0 - half, x0 + half)
}

/// Solve the discrete obstacle recursion backward.
///
/// cont(i,x,a) = f(t_i,x,a)Δt + E[v(i+1, x + bΔt + σ√Δt·Z, a)] by 5-point
/// Gauss-Hermite with linear interpolation (single deterministic point when
/// σ = 0), then v(i,x,a) is the fixed point of
/// w ↦ max(cont(a), max_{a'≠a}(w(a') − c(t_i,x,a,a'))), reached in at most
/// m−1 sweeps.
pub fn dp_solve(
    problem: &SwitchingProblem,
    t_steps: usize,
    x_nodes: usize,
) -> Result<DpTable, OracleError> {
    dp_solve_inner(problem, t_steps, x_nodes, true)
}

/// Same recursion with the obstacle sweep disabled (never-switch value).
pub fn dp_solve_no_switching(
    problem: &SwitchingProblem,
    t_steps: usize,
    x_nodes: usize,
) -> Result<DpTable, OracleError> {
    dp_solve_inner(problem, t_steps, x_nodes, false)
}

fn dp_solve_inner(
    problem: &SwitchingProblem,
    t_steps: usize,
    x_nodes: usize,
    switching: bool,
) -> Result<DpTable, OracleError> {
    let m = problem
        .modes
        .num_modes()
        .ok_or(OracleError::RequiresMarkovianFiniteMode)?;
    if !problem.markovian {
        return Err(OracleError::RequiresMarkovianFiniteMode);
    }
    if problem.dim_state != 1 {
        return Err(OracleError::RequiresScalarState);
    }
    let grid = TimeGrid::new(problem.horizon, t_steps).expect("positive horizon");
    let (lo, hi) = lattice_range(problem, &grid);
    let nx = x_nodes.max(2);
    let nodes: Vec<f64> = (0..nx)
        .map(|j| lo + (hi - lo) * j as f64 / (nx - 1) as f64)
        .collect();
    let xi0 = match problem.xi0 {
        Mode::Finite(i) => i,
        Mode::Point(_) => return Err(OracleError::RequiresMarkovianFiniteMode),
    };

    let n = grid.n_steps;
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let gh_sum: f64 = GH5_WEIGHTS.iter().sum();

    let mut table = DpTable {
        grid,
        x_nodes: nodes,
        n_modes: m,
        values: vec![0.0; (n + 1) * nx * m],
        continuation: vec![0.0; n * nx * m],
        x0: problem.x0[0],
        xi0,
    };

    // Terminal slice: v_N = g.
    for j in 0..nx {
        let buf = point_prefix(problem.horizon, table.x_nodes[j]);
        let prefix = buf.last_prefix();
        for a in 0..m {
            let idx = table.idx(n, j, a);
            table.values[idx] = (problem.terminal_reward)(&prefix, &Mode::Finite(a));
        }
    }

    for i in (0..n).rev() {
        let t = table.grid.time(i);
        let next_slice =
            table.values[(i + 1) * nx * m..(i + 2) * nx * m].to_vec();
        let nodes = &table.x_nodes;
        let slice: Vec<(Vec<f64>, Vec<f64>)> = (0..nx)
            .into_par_iter()
            .map(|j| {
                let x = nodes[j];
                let buf = point_prefix(t, x);
                let prefix = buf.last_prefix();
                let mut cont = vec![0.0; m];
                for a in 0..m {
                    let mode = Mode::Finite(a);
                    let fv = (problem.running_reward)(t, &prefix, &mode);
                    let b = (problem.drift)(t, &prefix, &mode)[0];
                    let sig = (problem.diffusion)(t, &prefix, &mode)[0];
                    let drifted = x + b * dt;
                    let expect = if sig == 0.0 {
                        interp(nodes, drifted, |jj| next_slice[jj * m + a])
                    } else {
                        let mut acc = 0.0;
                        for (z, w) in GH5_NODES.iter().zip(&GH5_WEIGHTS) {
                            let xp = drifted + sig * sdt * std::f64::consts::SQRT_2 * z;
                            acc += w * interp(nodes, xp, |jj| next_slice[jj * m + a]);
                        }
                        acc / gh_sum
                    };
                    cont[a] = fv * dt + expect;
                }
                let mut w = cont.clone();
                if switching && m > 1 {
                    let mut costs = vec![0.0; m * m];
                    for a in 0..m {
                        for a2 in 0..m {
                            if a != a2 {
                                costs[a * m + a2] = (problem.switch_cost)(
                                    t,
                                    &prefix,
                                    &Mode::Finite(a),
                                    &Mode::Finite(a2),
                                );
                            }
                        }
                    }
                    for _ in 0..m - 1 {
                        let prev = w.clone();
                        for a in 0..m {
                            let mut best = cont[a];
                            for a2 in 0..m {
                                if a2 != a {
                                    let cand = prev[a2] - costs[a * m + a2];
                                    if cand > best {
                                        best = cand;
                                    }
                                }
                            }
                            w[a] = best;
                        }
                    }
                }
                (cont, w)
            })
            .collect();
        for (j, (cont, w)) in slice.into_iter().enumerate() {
            for a in 0..m {
                let ci = table.idx(i, j, a);
                table.continuation[ci] = cont[a];
                let vi = table.idx(i, j, a);
                table.values[vi] = w[a];
            }
        }
    }
    Ok(table)
}

/// v[0][·][ξ0] interpolated at x0.
pub fn dp_value(table: &DpTable) -> Result<f64, OracleError> {
    let (lo, hi) = (table.x_nodes[0], *table.x_nodes.last().unwrap());
    if table.x0 < lo || table.x0 > hi {
        return Err(OracleError::OutsideLattice(table.x0, lo, hi));
    }
    Ok(table.interp_value(0, table.x0, table.xi0))
}

/// Greedy feedback rule read from the table: switch to the argmax a' of the
/// post-switch continuation cont(i,x,a') − c when it beats staying by more
/// than the tie tolerance; ties stay, then lowest mode index. Comparing
/// continuations (not reflected values) keeps the rule consistent with one
/// switch per decision time: a chain of profitable switches is realized over
/// consecutive grid times.
pub struct DpPolicy {
    pub table: Arc<DpTable>,
    pub problem: Arc<SwitchingProblem>,
}

impl SwitchingPolicy for DpPolicy {
    fn decide(&self, ctx: &PolicyContext) -> Decision {
        let a = match ctx.current_mode {
            Mode::Finite(i) => i,
            Mode::Point(_) => return Decision::Stay,
        };
        let i = self.table.slice_of(ctx.t).min(self.table.grid.n_steps - 1);
        let x = ctx.path.scalar();
        let stay = self.table.interp_continuation(i, x, a);
        let mut best = stay + TIE_TOL;
        let mut target = None;
        for a2 in 0..self.table.n_modes {
            if a2 == a {
                continue;
            }
            let cost =
                (self.problem.switch_cost)(ctx.t, ctx.path, &Mode::Finite(a), &Mode::Finite(a2));
            let cand = self.table.interp_continuation(i, x, a2) - cost;
            if cand > best {
                best = cand;
                target = Some(a2);
            }
        }
        match target {
            Some(a2) => Decision::SwitchTo(Mode::Finite(a2)),
            None => Decision::Stay,
        }
    }
}

pub fn dp_optimal_policy(table: DpTable, problem: &SwitchingProblem) -> DpPolicy {
    DpPolicy {
        table: Arc::new(table),
        problem: Arc::new(problem.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{catalog, ProblemOverrides};
    use std::sync::Arc as StdArc;

    #[test]
    fn rejects_non_markovian_and_continuum() {
        let p4 = catalog("p4-pathdep").unwrap();
        assert!(matches!(
            dp_solve(&p4, 10, 50),
            Err(OracleError::RequiresMarkovianFiniteMode)
        ));
        let p3 = catalog("p3-continuum").unwrap();
        assert!(matches!(
            dp_solve(&p3, 10, 50),
            Err(OracleError::RequiresMarkovianFiniteMode)
        ));
    }

    #[test]
    fn single_mode_matches_ode_quadrature() {
        // One mode, σ = 0: the value is ∫ f along the ODE flow. Oracle for
        // the oracle: RK4 for dx = −x dt from x0 = 0.5 plus Simpson for
        // ∫ −(x(t)−1)² dt.
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.modes = crate::modespace::ModeSpace::counting(1).unwrap();
        p.xi0 = Mode::Finite(0);
        p.x0 = vec![0.5];
        p.drift = StdArc::new(|_, prefix, _| vec![-prefix.scalar()]);

        let steps = 2000;
        let h = 1.0 / steps as f64;
        let mut x = 0.5_f64;
        let mut xs = vec![x];
        for _ in 0..steps {
            let k1 = -x;
            let k2 = -(x + 0.5 * h * k1);
            let k3 = -(x + 0.5 * h * k2);
            let k4 = -(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            xs.push(x);
        }
        let f = |x: f64| -(x - 1.0) * (x - 1.0);
        let mut integral = 0.0;
        for k in 0..steps / 2 {
            let (a, b, c) = (xs[2 * k], xs[2 * k + 1], xs[2 * k + 2]);
            integral += h / 3.0 * (f(a) + 4.0 * f(b) + f(c));
        }

        let table = dp_solve(&p, 400, 801).unwrap();
        let v = dp_value(&table).unwrap();
        assert!((v - integral).abs() <= 1e-3, "dp {v} vs ode {integral}");
    }

    #[test]
    fn constant_terminal_reward_passes_through() {
        let mut p = catalog("p2-three-mode-diff").unwrap();
        p.running_reward = StdArc::new(|_, _, _| 0.0);
        p.terminal_reward = StdArc::new(|_, _| 2.5);
        let table = dp_solve(&p, 50, 201).unwrap();
        let v = dp_value(&table).unwrap();
        assert!((v - 2.5).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn prohibitive_costs_reduce_to_never_switch() {
        let p = catalog_scaled_cost(60.0);
        let with = dp_solve(&p, 100, 401).unwrap();
        let without = dp_solve_no_switching(&p, 100, 401).unwrap();
        assert_eq!(with.values.len(), without.values.len());
        for (a, b) in with.values.iter().zip(&without.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn catalog_scaled_cost(scale: f64) -> crate::problem::SwitchingProblem {
        crate::problem::catalog_with(
            "p2-three-mode-diff",
            &ProblemOverrides {
                cost_scale: Some(scale / 0.075),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn additive_running_shift_moves_value_by_delta_t() {
        let p = catalog("p1-two-mode-det").unwrap();
        let base = dp_value(&dp_solve(&p, 100, 401).unwrap()).unwrap();
        let mut shifted = p.clone();
        let f0 = p.running_reward.clone();
        let delta = 0.37;
        shifted.running_reward = StdArc::new(move |t, prefix, a| f0(t, prefix, a) + delta);
        let v = dp_value(&dp_solve(&shifted, 100, 401).unwrap()).unwrap();
        assert!((v - base - delta).abs() < 1e-9, "shift {}", v - base);
    }

    #[test]
    fn doubling_costs_cannot_increase_value() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let v1 = dp_value(&dp_solve(&p, 100, 401).unwrap()).unwrap();
        let doubled = crate::problem::catalog_with(
            "p2-three-mode-diff",
            &ProblemOverrides {
                cost_scale: Some(2.0),
                ..Default::default()
            },
        )
        .unwrap();
        let v2 = dp_value(&dp_solve(&doubled, 100, 401).unwrap()).unwrap();
        assert!(v1 >= v2 - 1e-12, "v1 {v1} < v2 {v2}");
    }

    #[test]
    fn discrete_obstacle_condition_holds_on_table() {
        let p = catalog("p2-three-mode-diff").unwrap();
        let table = dp_solve(&p, 60, 201).unwrap();
        let m = table.n_modes;
        for i in 0..60 {
            let t = table.grid.time(i);
            for j in (0..201).step_by(7) {
                let buf = point_prefix(t, table.x_nodes[j]);
                let prefix = buf.last_prefix();
                for a in 0..m {
                    for a2 in 0..m {
                        if a == a2 {
                            continue;
                        }
                        let c = (p.switch_cost)(t, &prefix, &Mode::Finite(a), &Mode::Finite(a2));
                        assert!(
                            table.value_at(i, j, a) >= table.value_at(i, j, a2) - c - 1e-12,
                            "obstacle violated at i={i} j={j} {a}->{a2}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn value_dominates_never_switch() {
        for name in ["p1-two-mode-det", "p2-three-mode-diff"] {
            let p = catalog(name).unwrap();
            let v = dp_value(&dp_solve(&p, 100, 401).unwrap()).unwrap();
            let v0 = dp_value(&dp_solve_no_switching(&p, 100, 401).unwrap()).unwrap();
            assert!(v >= v0 - 1e-12, "{name}: {v} < {v0}");
        }
    }

    #[test]
    fn terminal_switch_into_reward_mode() {
        // Zero costs, g = 1_{mode=2}: at the last decision time the policy
        // must switch into the rewarded mode.
        let mut p = catalog("p2-three-mode-diff").unwrap();
        p.switch_cost = StdArc::new(|_, _, _, _| 0.0);
        p.running_reward = StdArc::new(|_, _, _| 0.0);
        p.terminal_reward = StdArc::new(|_, mode| match mode {
            Mode::Finite(2) => 1.0,
            _ => 0.0,
        });
        let table = dp_solve(&p, 20, 201).unwrap();
        let policy = dp_optimal_policy(table, &p);
        let buf = point_prefix(0.95, 0.3);
        let prefix = buf.last_prefix();
        let ctx = PolicyContext {
            step: 19,
            t: 0.95,
            path: &prefix,
            brownian: &[0.0],
            noise_dim: 1,
            current_mode: Mode::Finite(0),
            switches: &[],
        };
        assert_eq!(policy.decide(&ctx), Decision::SwitchTo(Mode::Finite(2)));
    }

    #[test]
    fn single_mode_policy_never_switches() {
        let mut p = catalog("p1-two-mode-det").unwrap();
        p.modes = crate::modespace::ModeSpace::counting(1).unwrap();
        let table = dp_solve(&p, 20, 101).unwrap();
        let policy = dp_optimal_policy(table, &p);
        let buf = point_prefix(0.5, 0.2);
        let prefix = buf.last_prefix();
        let ctx = PolicyContext {
            step: 10,
            t: 0.5,
            path: &prefix,
            brownian: &[0.0],
            noise_dim: 1,
            current_mode: Mode::Finite(0),
            switches: &[],
        };
        assert_eq!(policy.decide(&ctx), Decision::Stay);
    }

    #[test]
    fn self_convergence_under_refinement() {
        let p = catalog("p1-two-mode-det").unwrap();
        let coarse = dp_value(&dp_solve(&p, 200, 401).unwrap()).unwrap();
        let fine = dp_value(&dp_solve(&p, 400, 801).unwrap()).unwrap();
        assert!(
            (coarse - fine).abs() / fine.abs() <= 0.005,
            "coarse {coarse} fine {fine}"
        );
    }
}
