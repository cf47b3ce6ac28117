//! Numerical checks shared by the CLI verify commands and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::adjoint::{duality_gap, solve_adjoint_deterministic, solve_adjoint_regression};
use crate::control::{evaluate, gradient, psi_estimate, subdiff_inverse, Problem};
use crate::dynamics::{a_apply, one_sided_margin};
use crate::error::Result;
use crate::forward::{
    actuator_adjoint, actuator_apply, draw_increments, integrate, integrate_with_increments, ControlPath, Model,
    TimeGrid,
};
use crate::grid::{inner_h_unchecked, Field, Grid, StateX};

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn random_field(n: usize, rng: &mut impl Rng) -> Field {
    Field::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_state(n: usize, rng: &mut impl Rng) -> StateX {
    StateX::new(random_field(n, rng), random_field(n, rng))
}

/// Random modal sum with Gaussian coefficients decaying like `(k₁⋯k_d)⁻²`,
/// so `Δ_h v` stays of the same order as `v`.
pub fn random_smooth_field(grid: &Grid, rng: &mut impl Rng) -> Field {
    let coeffs: Vec<f64> = (0..grid.node_count())
        .map(|slot| {
            let k: usize = grid.slot_mode(slot).iter().product();
            let z: f64 = rng.sample(StandardNormal);
            z / (k * k) as f64
        })
        .collect();
    grid.synthesize(&coeffs)
}

/// Smooth, time-varying probe direction for duality and gradient checks.
pub fn probe_direction(grid: &Grid, time: &TimeGrid) -> ControlPath {
    let l = grid.length();
    ControlPath {
        values: (0..time.steps())
            .map(|n| {
                let t = time.time(n);
                grid.field_from_fn(|x| (1.0 + t) * (std::f64::consts::PI * x[0] / l).cos() + 0.5)
            })
            .collect(),
    }
}

/// Largest `|⟨AX,X⟩_H − (γ⟨Δ_h v,v⟩ − δ|w|²)| / (1 + |X|_H²)` over random smooth states.
pub fn skew_cancellation(model: &Model, samples: usize, seed: u64) -> Result<f64> {
    let grid = &model.grid;
    let p = &model.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = StateX::new(random_smooth_field(grid, &mut rng), random_smooth_field(grid, &mut rng));
        let ax = a_apply(p, grid, &x)?;
        let lhs = model.inner_h(&ax, &x);
        let rhs = p.gamma * grid.inner_l2(&grid.neumann_laplacian(&x.v)?, &x.v) - p.delta * grid.norm_l2_sq(&x.w);
        worst = worst.max((lhs - rhs).abs() / (1.0 + model.norm_h_sq(&x)));
    }
    Ok(worst)
}

/// Relative defect of `⟨Δu, w⟩ = ⟨u, Δw⟩` over random pairs.
pub fn laplacian_symmetry(grid: &Grid, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let u = random_field(grid.node_count(), &mut rng);
        let w = random_field(grid.node_count(), &mut rng);
        let lu = grid.neumann_laplacian(&u)?;
        let lw = grid.neumann_laplacian(&w)?;
        let scale = (grid.norm_l2_sq(&lu) * grid.norm_l2_sq(&w)).sqrt();
        worst = worst.max((grid.inner_l2(&lu, &w) - grid.inner_l2(&u, &lw)).abs() / scale);
    }
    Ok(worst)
}

/// Relative defect of `⟨Bu, X⟩_H = ⟨u, B*X⟩_U` and of `⟨MX, Y⟩_H = ⟨X, M*Y⟩_H`.
pub fn operator_adjointness(model: &Model, dt: f64, samples: usize, seed: u64) -> f64 {
    let grid = &model.grid;
    let gamma = model.gamma();
    let implicit = model.implicit(dt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let u = random_field(grid.node_count(), &mut rng);
        let x = random_state(grid.node_count(), &mut rng);
        let y = random_state(grid.node_count(), &mut rng);
        let lhs = model.inner_h(&actuator_apply(&model.actuator, &u), &x);
        let rhs = grid.inner_l2(&u, &actuator_adjoint(&model.actuator, gamma, &x));
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        let lhs = model.inner_h(&implicit.solve(grid, &x), &y);
        let rhs = model.inner_h(&x, &implicit.solve_adjoint(grid, &y));
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// `(finite difference, adjoint, relative error)` per direction.
    pub rows: Vec<(f64, f64, f64)>,
    pub max_rel_error: f64,
}

/// Central differences of Ψ against `⟨∇Ψ, v⟩_𝒰` for Gaussian random directions.
pub fn gradient_check(problem: &Problem, u: &ControlPath, directions: usize, h: f64, seed: u64) -> Result<GradientCheck> {
    let grid = &problem.model.grid;
    let dt = problem.time.dt();
    let eval = evaluate(problem, u)?;
    let g = gradient(&problem.model, &problem.cost, u, &eval.mean_adjoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(directions);
    for _ in 0..directions {
        let v = ControlPath {
            values: (0..problem.time.steps())
                .map(|_| Field::from_vec((0..grid.node_count()).map(|_| rng.sample(StandardNormal)).collect()))
                .collect(),
        };
        let mut up = u.clone();
        up.axpy(h, &v);
        let mut um = u.clone();
        um.axpy(-h, &v);
        let paths = problem.paths();
        let fd = (psi_estimate(problem, &up, paths)?.mean - psi_estimate(problem, &um, paths)?.mean) / (2.0 * h);
        let an = g.inner(&v, grid, dt);
        rows.push((fd, an, (fd - an).abs() / an.abs()));
    }
    let max_rel_error = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(GradientCheck { rows, max_rel_error })
}

/// Duality gap along the uncontrolled deterministic trajectory for a probe direction.
pub fn duality_gap_at(problem: &Problem, time: TimeGrid) -> Result<f64> {
    let model = problem.model.deterministic();
    let u = ControlPath::zeros(&model.grid, &time);
    let traj = integrate(&model, &time, &problem.x0, &u, problem.seed, 0)?;
    let adj = solve_adjoint_deterministic(&model, &traj, &problem.cost);
    duality_gap(&model, &traj, &adj, &probe_direction(&model.grid, &time), &problem.cost)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapStudy {
    pub dts: Vec<f64>,
    pub gaps: Vec<f64>,
    pub slope: f64,
}

pub fn duality_gap_study(problem: &Problem, dts: &[f64]) -> Result<GapStudy> {
    let horizon = problem.time.horizon();
    let mut gaps = Vec::with_capacity(dts.len());
    for &dt in dts {
        let steps = (horizon / dt).round() as usize;
        gaps.push(duality_gap_at(problem, TimeGrid::new(horizon, steps)?)?.abs());
    }
    Ok(GapStudy {
        dts: dts.to_vec(),
        slope: loglog_slope(dts, &gaps),
        gaps,
    })
}

/// The problem with the reaction term switched off.
pub fn linearized(problem: &Problem) -> Problem {
    let mut p = problem.clone();
    p.model.params.nonlinear = false;
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongConvergence {
    pub dts: Vec<f64>,
    /// `(Ê|X_l(T) − X_{l+1}(T)|_H²)^{1/2}` between consecutive levels.
    pub errors: Vec<f64>,
    pub rate: f64,
}

/// Strong self-convergence at `T` with common noise: the finest level draws
/// increments, coarser levels sum them pairwise.
pub fn strong_convergence(
    model: &Model,
    x0: &StateX,
    horizon: f64,
    coarse_steps: usize,
    levels: usize,
    seed: u64,
    paths: usize,
) -> Result<StrongConvergence> {
    let times: Vec<TimeGrid> = (0..=levels)
        .map(|l| TimeGrid::new(horizon, coarse_steps << l))
        .collect::<Result<_>>()?;
    let finest = times[levels];
    let per_path: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|path| -> Result<Vec<f64>> {
            let mut incs = draw_increments(model, &finest, seed, path)?;
            let mut terminals = vec![StateX::zeros(0); levels + 1];
            for l in (0..=levels).rev() {
                let time = times[l];
                let u = ControlPath::zeros(&model.grid, &time);
                let traj = integrate_with_increments(model, &time, x0, &u, incs.clone(), seed, path)?;
                terminals[l] = traj.terminal().clone();
                if l > 0 {
                    incs = incs.chunks(2).map(|c| c[0].merge(&c[1])).collect();
                }
            }
            Ok((0..levels)
                .map(|l| model.norm_h_sq(&(&terminals[l] - &terminals[l + 1])))
                .collect())
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = (0..levels)
        .map(|l| (per_path.iter().map(|e| e[l]).sum::<f64>() / paths as f64).sqrt())
        .collect();
    let dts: Vec<f64> = times[..levels].iter().map(|t| t.dt()).collect();
    Ok(StrongConvergence {
        rate: loglog_slope(&dts, &errors),
        dts,
        errors,
    })
}

/// Relative deviation of `p^{c·(g,g₀)}` from `c·p` along one deterministic path.
pub fn scaling_equivariance(problem: &Problem, c: f64) -> Result<f64> {
    let model = problem.model.deterministic();
    let u = ControlPath::zeros(&model.grid, &problem.time);
    let traj = integrate(&model, &problem.time, &problem.x0, &u, problem.seed, 0)?;
    let scaled = problem.cost.scale_state_costs(c);
    let p = solve_adjoint_deterministic(&model, &traj, &problem.cost);
    let q = solve_adjoint_deterministic(&model, &traj, &scaled);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (a, b) in p.p.iter().zip(&q.p) {
        num = num.max(model.norm_h_sq(&(&a.scaled(c) - b)).sqrt());
        den = den.max(model.norm_h_sq(&a.scaled(c)).sqrt());
    }
    Ok(if den == 0.0 { num } else { num / den })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl InvariantCheck {
    fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        InvariantCheck {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// Invariants of every module, evaluated on the scenario's grid and parameters.
pub fn invariant_suite(problem: &Problem) -> Result<Vec<InvariantCheck>> {
    let model = &problem.model;
    let grid = &model.grid;
    let dt = problem.time.dt();
    let seed = problem.seed;
    let mut checks = Vec::new();

    checks.push(InvariantCheck::at_most(
        "laplacian_self_adjoint",
        laplacian_symmetry(grid, 200, seed)?,
        1e-12,
    ));
    checks.push(InvariantCheck::at_most(
        "skew_cancellation",
        skew_cancellation(model, 1000, seed)?,
        1e-12,
    ));
    checks.push(InvariantCheck::at_most(
        "operator_adjointness",
        operator_adjointness(model, dt, 200, seed),
        1e-12,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = one_sided_margin(&model.params, grid, 20_000, &mut rng)?;
    checks.push(InvariantCheck::at_most(
        "one_sided_lipschitz",
        margin.sampled - margin.eta,
        1e-9,
    ));

    let q1 = random_field(grid.node_count(), &mut rng);
    let q2 = random_field(grid.node_count(), &mut rng);
    let lip = problem.cost.control.inverse_lipschitz();
    let lhs = grid.norm_l2_sq(&(&subdiff_inverse(&problem.cost, &q1) - &subdiff_inverse(&problem.cost, &q2))).sqrt();
    let rhs = lip * grid.norm_l2_sq(&(&q1 - &q2)).sqrt();
    checks.push(InvariantCheck::at_most(
        "subdiff_inverse_lipschitz",
        (lhs - rhs).abs() / rhs,
        1e-14,
    ));

    let det = model.deterministic();
    let u = ControlPath::zeros(grid, &problem.time);
    let traj = integrate(&det, &problem.time, &problem.x0, &u, seed, 0)?;
    let adj = solve_adjoint_deterministic(&det, &traj, &problem.cost);
    let mut terminal = adj.p[problem.time.steps()].clone();
    terminal.axpy(
        1.0,
        &problem
            .cost
            .terminal
            .gradient(grid, model.gamma(), problem.time.steps(), traj.terminal()),
    );
    checks.push(InvariantCheck::at_most(
        "adjoint_terminal_condition",
        terminal.v.max_abs().max(terminal.w.max_abs()),
        0.0,
    ));

    checks.push(InvariantCheck::at_most(
        "linear_duality_gap",
        duality_gap_at(&linearized(problem), problem.time)?.abs(),
        1e-8,
    ));
    checks.push(InvariantCheck::at_most(
        "cost_scaling_equivariance",
        scaling_equivariance(problem, 3.7)?,
        1e-10,
    ));

    let reg = solve_adjoint_regression(&det, &vec![traj; 10 * problem.features], &problem.cost, problem.features)?;
    let scale = adj.p.iter().map(|x| det.norm_h_sq(x).sqrt()).fold(0.0, f64::max).max(1e-300);
    let reduction = reg[0]
        .p
        .iter()
        .zip(&adj.p)
        .map(|(a, b)| det.norm_h_sq(&(a - b)).sqrt() / scale)
        .fold(0.0, f64::max);
    checks.push(InvariantCheck::at_most("regression_noiseless_reduction", reduction, 1e-10));

    let z = inner_h_unchecked(grid, model.gamma(), &problem.x0, &problem.x0);
    checks.push(InvariantCheck::at_most(
        "initial_state_finite",
        if z.is_finite() { 0.0 } else { f64::INFINITY },
        0.0,
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn default_scenario_passes_invariants() {
        let s = Scenario::parse("[time]\nsteps = 100\n").unwrap();
        let checks = invariant_suite(&s.build_problem().unwrap()).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}
