//! The cost functional Ψ, the optimality map `u = (∂h)⁻¹(B*p)`, and the
//! Ekeland-regularized fixed-point loop.

pub mod cost;

use log::{debug, info};

use crate::adjoint::{mean_step_adjoint, solve_adjoint_deterministic, solve_adjoint_regression, AdjointPath};
use crate::error::{Error, Result};
use crate::forward::{actuator_adjoint, ensemble_energy, integrate_ensemble, ControlPath, Model, TimeGrid, Trajectory};
use crate::grid::StateX;

pub use cost::{
    subdiff_inverse, ControlCost, CostSpec, QuadraticControl, QuadraticTracking, Reference, StateCost,
};

/// Everything that determines Ψ and its gradient.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: Model,
    pub time: TimeGrid,
    pub x0: StateX,
    pub cost: CostSpec,
    pub seed: u64,
    /// Paths per evaluation in stochastic mode; ignored when `Q = 0`.
    pub ensemble: usize,
    /// Regression columns including the constant.
    pub features: usize,
}

impl Problem {
    pub fn paths(&self) -> usize {
        if self.model.is_deterministic() {
            1
        } else {
            self.ensemble
        }
    }

    pub fn with_horizon(&self, time: TimeGrid) -> Problem {
        Problem { time, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Discrete cost of one path (running cost at right endpoints).
pub fn path_cost(model: &Model, cost: &CostSpec, traj: &Trajectory) -> f64 {
    let grid = &model.grid;
    let gamma = model.gamma();
    let dt = traj.time.dt();
    let running: f64 = (1..traj.states.len())
        .map(|n| cost.running.value(grid, gamma, n, &traj.states[n]))
        .sum();
    let control: f64 = traj.control.values.iter().map(|u| cost.control.value(grid, u)).sum();
    dt * (running + control) + cost.terminal.value(grid, gamma, traj.time.steps(), traj.terminal())
}

fn estimate(model: &Model, cost: &CostSpec, ensemble: &[Trajectory]) -> PsiEstimate {
    let values: Vec<f64> = ensemble.iter().map(|t| path_cost(model, cost, t)).collect();
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_err = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    PsiEstimate { mean, std_err }
}

/// Monte Carlo estimate of Ψ(u) on paths `0..paths` of the problem seed, so
/// candidate controls are compared on common random numbers.
pub fn psi_estimate(problem: &Problem, u: &ControlPath, paths: usize) -> Result<PsiEstimate> {
    if paths < 1 {
        return Err(Error::config("ensemble", "ensemble size must be at least 1"));
    }
    let paths = if problem.model.is_deterministic() { 1 } else { paths };
    let ensemble = integrate_ensemble(&problem.model, &problem.time, &problem.x0, u, problem.seed, 0, paths)?;
    Ok(estimate(&problem.model, &problem.cost, &ensemble))
}

/// Forward ensemble, adjoint sweep and the averaged step adjoint at one control.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub psi: PsiEstimate,
    pub ensemble: Vec<Trajectory>,
    pub adjoints: Vec<AdjointPath>,
    /// `p̄_n`: ensemble mean of the adjoint seen by the control on step `n`.
    pub mean_adjoint: Vec<StateX>,
}

pub fn evaluate(problem: &Problem, u: &ControlPath) -> Result<Evaluation> {
    let model = &problem.model;
    let ensemble = integrate_ensemble(model, &problem.time, &problem.x0, u, problem.seed, 0, problem.paths())?;
    let adjoints = if model.is_deterministic() {
        vec![solve_adjoint_deterministic(model, &ensemble[0], &problem.cost)]
    } else {
        solve_adjoint_regression(model, &ensemble, &problem.cost, problem.features)?
    };
    let mean_adjoint = mean_step_adjoint(&adjoints);
    Ok(Evaluation {
        psi: estimate(model, &problem.cost, &ensemble),
        ensemble,
        adjoints,
        mean_adjoint,
    })
}

fn check_lengths(u: &ControlPath, p: &[StateX]) -> Result<()> {
    if u.len() != p.len() {
        return Err(Error::Contract(format!(
            "control has {} steps but adjoint has {}",
            u.len(),
            p.len()
        )));
    }
    Ok(())
}

/// `𝒰`-gradient of Ψ: `∂h(u_n) − B*p̄_n`.
pub fn gradient(model: &Model, cost: &CostSpec, u: &ControlPath, mean_adjoint: &[StateX]) -> Result<ControlPath> {
    check_lengths(u, mean_adjoint)?;
    let gamma = model.gamma();
    Ok(ControlPath {
        values: u
            .values
            .iter()
            .zip(mean_adjoint)
            .map(|(un, pn)| &cost.control.subgradient(un) - &actuator_adjoint(&model.actuator, gamma, pn))
            .collect(),
    })
}

/// `(∂h)⁻¹(B*p̄ + shift)` per step.
pub fn optimality_map(model: &Model, cost: &CostSpec, mean_adjoint: &[StateX], shift: Option<(f64, &ControlPath)>) -> ControlPath {
    let gamma = model.gamma();
    ControlPath {
        values: mean_adjoint
            .iter()
            .enumerate()
            .map(|(n, pn)| {
                let mut q = actuator_adjoint(&model.actuator, gamma, pn);
                if let Some((c, theta)) = shift {
                    q.axpy(c, &theta.values[n]);
                }
                cost.control.subdiff_inverse(&q)
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionMargin {
    /// `L·T + ‖Dg₀‖_Lip`.
    pub margin: f64,
    pub lipschitz: f64,
    pub terminal_lipschitz: f64,
    /// Empirical threshold from a margin sweep, when one is available.
    pub threshold: Option<f64>,
}

impl ContractionMargin {
    pub fn below_threshold(&self) -> Option<bool> {
        self.threshold.map(|c| self.margin < c)
    }
}

pub fn contraction_margin(cost: &CostSpec, horizon: f64) -> ContractionMargin {
    let lipschitz = cost.control.inverse_lipschitz();
    let terminal_lipschitz = cost.terminal.gradient_lipschitz();
    ContractionMargin {
        margin: lipschitz * horizon + terminal_lipschitz,
        lipschitz,
        terminal_lipschitz,
        threshold: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub eps0: f64,
    /// `θ = 0` throughout.
    pub pure: bool,
    pub line_search: bool,
    pub max_backtracks: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            max_iterations: 50,
            tolerance: 1e-7,
            eps0: 1e-12,
            pure: false,
            line_search: true,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub psi: f64,
    pub psi_std_err: f64,
    /// `|u_k − (∂h)⁻¹(B*p̄(u_k))|_𝒰`.
    pub residual: f64,
    pub eps: f64,
    /// Whether the step leaving this iterate passed the line search.
    pub accepted: bool,
    /// `|u_{k+1} − u_k|_𝒰` (zero when rejected or at the last record).
    pub step: f64,
    /// `sup_t Ê|X|_H²` along the ensemble at this iterate.
    pub sup_mean_energy: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeReport {
    pub history: Vec<IterationRecord>,
    pub control: ControlPath,
    pub ensemble: Vec<Trajectory>,
    pub converged: bool,
    pub margin: ContractionMargin,
}

impl OptimizeReport {
    pub fn final_residual(&self) -> f64 {
        self.history.last().map(|r| r.residual).unwrap_or(f64::INFINITY)
    }

    /// Successive ratios of the fixed-point residual.
    pub fn residual_ratios(&self) -> Vec<f64> {
        self.history
            .windows(2)
            .map(|w| w[1].residual / w[0].residual)
            .collect()
    }

    /// Ψ never increases across accepted steps.
    pub fn psi_nonincreasing(&self) -> bool {
        self.history
            .windows(2)
            .all(|w| !w[0].accepted || w[1].psi <= w[0].psi)
    }
}

/// Ekeland-regularized fixed-point iteration for `u = (∂h)⁻¹(B*p(u))`.
///
/// Each iterate moves towards `ũ = (∂h)⁻¹(B*p̄ + √ε_k θ_k)` by backtracking
/// until `Ψ(u_{k+1}) + √ε_k |u_{k+1} − u_k|_𝒰 ≤ Ψ(u_k)`. `ε` is quartered after
/// every iteration, including rejected ones.
pub fn optimize(problem: &Problem, config: &OptimizeConfig, u0: &ControlPath) -> Result<OptimizeReport> {
    if !(config.tolerance > 0.0) {
        return Err(Error::config("optimize.tolerance", "tolerance must be positive"));
    }
    if !(config.eps0 >= 0.0) {
        return Err(Error::config("optimize.eps0", "eps0 must be nonnegative"));
    }
    let model = &problem.model;
    let grid = &model.grid;
    let dt = problem.time.dt();
    let margin = contraction_margin(&problem.cost, problem.time.horizon());

    let mut u = u0.clone();
    let mut eval = evaluate(problem, &u)?;
    let mut eps = config.eps0;
    let mut theta: Option<ControlPath> = None;
    let mut history = Vec::new();
    let mut converged = false;

    for iteration in 0..=config.max_iterations {
        let target = optimality_map(model, &problem.cost, &eval.mean_adjoint, None);
        let direction = target.sub(&u);
        let residual = direction.norm(grid, dt);
        let sup_mean_energy = ensemble_energy(grid, model.gamma(), &eval.ensemble).sup_mean_h_sq;
        let mut record = IterationRecord {
            iteration,
            psi: eval.psi.mean,
            psi_std_err: eval.psi.std_err,
            residual,
            eps,
            accepted: false,
            step: 0.0,
            sup_mean_energy,
        };
        debug!("iteration {iteration}: psi {:.12e} residual {residual:.3e}", eval.psi.mean);
        if residual < config.tolerance {
            converged = true;
            history.push(record);
            break;
        }
        if iteration == config.max_iterations {
            history.push(record);
            break;
        }

        let root = eps.sqrt();
        let candidate = match (&theta, config.pure) {
            (Some(th), false) if root > 0.0 => optimality_map(model, &problem.cost, &eval.mean_adjoint, Some((root, th))),
            _ => target.clone(),
        };
        let full = candidate.sub(&u);
        let full_norm = full.norm(grid, dt);

        let mut accepted = None;
        let mut s = 1.0;
        let tries = if config.line_search { config.max_backtracks.max(1) } else { 1 };
        for _ in 0..tries {
            let mut trial = u.clone();
            trial.axpy(s, &full);
            if !config.line_search {
                accepted = Some((trial, s));
                break;
            }
            let psi = psi_estimate(problem, &trial, problem.paths());
            if let Ok(psi) = psi {
                if psi.mean + root * s * full_norm <= eval.psi.mean {
                    accepted = Some((trial, s));
                    break;
                }
            }
            s *= 0.5;
        }

        theta = Some(direction.scaled(1.0 / residual));
        eps *= 0.25;
        match accepted {
            Some((next, s)) => {
                record.accepted = true;
                record.step = s * full_norm;
                history.push(record);
                u = next;
                eval = evaluate(problem, &u)?;
            }
            None => {
                info!("iteration {iteration}: line search failed, step rejected");
                history.push(record);
            }
        }
    }

    Ok(OptimizeReport {
        history,
        control: u,
        ensemble: eval.ensemble,
        converged,
        margin,
    })
}

/// Re-solves forward and adjoint at `u` and returns `|u − (∂h)⁻¹(B*p̄(u))|_𝒰`.
pub fn fixed_point_certificate(problem: &Problem, u: &ControlPath) -> Result<f64> {
    let eval = evaluate(problem, u)?;
    let target = optimality_map(&problem.model, &problem.cost, &eval.mean_adjoint, None);
    Ok(target.sub(u).norm(&problem.model.grid, problem.time.dt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub horizon: f64,
    pub margin: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Largest residual ratio from iteration 3 on.
    pub worst_ratio: f64,
    pub geometric: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginSweep {
    pub points: Vec<SweepPoint>,
    /// Smallest margin at which geometric decay was lost, if any.
    pub threshold: Option<f64>,
}

/// Geometric decay: converged, and every ratio from iteration 3 on is at most 0.9.
pub fn is_geometric(report: &OptimizeReport) -> (bool, f64) {
    let worst = report
        .residual_ratios()
        .into_iter()
        .skip(3)
        .fold(0.0, f64::max);
    (report.converged && worst <= 0.9, worst)
}

/// Runs the optimizer at each horizon (fixed `dt`) and reports where the
/// residual stops decaying geometrically. The threshold is a diagnostic.
pub fn margin_sweep(problem: &Problem, config: &OptimizeConfig, horizons: &[f64]) -> Result<MarginSweep> {
    let dt = problem.time.dt();
    let mut points = Vec::new();
    for &horizon in horizons {
        let steps = ((horizon / dt).round() as usize).max(1);
        let p = problem.with_horizon(TimeGrid::new(horizon, steps)?);
        let u0 = ControlPath::zeros(&p.model.grid, &p.time);
        let margin = contraction_margin(&p.cost, horizon).margin;
        let point = match optimize(&p, config, &u0) {
            Ok(report) => {
                let (geometric, worst_ratio) = is_geometric(&report);
                SweepPoint {
                    horizon,
                    margin,
                    converged: report.converged,
                    iterations: report.history.len(),
                    worst_ratio,
                    geometric,
                }
            }
            Err(Error::BlowUp { .. }) => SweepPoint {
                horizon,
                margin,
                converged: false,
                iterations: 0,
                worst_ratio: f64::INFINITY,
                geometric: false,
            },
            Err(e) => return Err(e),
        };
        info!("sweep T={horizon}: margin {margin:.3}, geometric {}", point.geometric);
        points.push(point);
    }
    let threshold = points
        .iter()
        .filter(|p| !p.geometric)
        .map(|p| p.margin)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
    Ok(MarginSweep { points, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FhnParams;
    use crate::forward::ActuatorSpec;
    use crate::grid::{Field, Grid};
    use crate::noise::SpectralCovariance;

    fn problem(horizon: f64, steps: usize) -> Problem {
        let grid = Grid::new(1, 16, 1.0).unwrap();
        let params = FhnParams::excitable(&grid);
        let actuator = ActuatorSpec::full(&grid);
        let model = Model::new(grid, params, SpectralCovariance::zero(), actuator).unwrap();
        let x0 = StateX::new(model.grid.field_from_fn(|x| 0.5 * (1.0 - x[0])), model.grid.zeros());
        let target = StateX::new(model.grid.field_from_fn(|x| 0.2 * x[0]), model.grid.zeros());
        let cost = CostSpec::quadratic(Reference::Static(model.grid.zero_state()), 0.1, target, 2.0).unwrap();
        Problem {
            model,
            time: TimeGrid::new(horizon, steps).unwrap(),
            x0,
            cost,
            seed: 1,
            ensemble: 1,
            features: 9,
        }
    }

    #[test]
    fn margin_examples() {
        let p = problem(0.5, 10);
        assert_eq!(contraction_margin(&p.cost, 0.0).margin, 0.1);
        assert!((contraction_margin(&p.cost, 0.5).margin - 0.35).abs() < 1e-15);
        assert!(contraction_margin(&p.cost, 1.0).margin > contraction_margin(&p.cost, 0.5).margin);
    }

    #[test]
    fn psi_closed_form_without_state_cost() {
        let mut p = problem(0.5, 50);
        p.cost = CostSpec::new(
            QuadraticTracking::new(0.0, Reference::Static(p.model.grid.zero_state())).unwrap(),
            QuadraticTracking::new(0.0, Reference::Static(p.model.grid.zero_state())).unwrap(),
            QuadraticControl::new(2.0).unwrap(),
        );
        let ubar = p.model.grid.field_from_fn(|x| 1.0 + x[0]);
        let expected = 0.5 * 2.0 * p.model.grid.norm_l2_sq(&ubar) * 0.5;
        let psi = psi_estimate(&p, &ControlPath::constant(&p.time, ubar), 1).unwrap();
        assert!((psi.mean - expected).abs() < 1e-12 * expected);
        assert_eq!(psi.std_err, 0.0);
        assert!(psi_estimate(&p, &ControlPath::zeros(&p.model.grid, &p.time), 0).is_err());
    }

    #[test]
    fn gradient_vanishes_at_fixed_point_map() {
        let p = problem(0.5, 50);
        let u = ControlPath::zeros(&p.model.grid, &p.time);
        let eval = evaluate(&p, &u).unwrap();
        let fixed = optimality_map(&p.model, &p.cost, &eval.mean_adjoint, None);
        let g = gradient(&p.model, &p.cost, &fixed, &eval.mean_adjoint).unwrap();
        assert!(g.norm(&p.model.grid, p.time.dt()) < 1e-14);
        let short = ControlPath { values: eval.mean_adjoint[..3].iter().map(|_| Field::zeros(16)).collect() };
        assert!(matches!(gradient(&p.model, &p.cost, &short, &eval.mean_adjoint), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem(0.5, 100);
        let grid = &p.model.grid;
        let u = ControlPath {
            values: (0..100).map(|n| grid.field_from_fn(|x| 0.1 * (n as f64 * 0.05 + x[0]).sin())).collect(),
        };
        let eval = evaluate(&p, &u).unwrap();
        let g = gradient(&p.model, &p.cost, &u, &eval.mean_adjoint).unwrap();
        let v = ControlPath {
            values: (0..100).map(|n| grid.field_from_fn(|x| (3.0 * x[0] - n as f64 * 0.01).cos())).collect(),
        };
        let h = 1e-5;
        let mut up = u.clone();
        up.axpy(h, &v);
        let mut um = u.clone();
        um.axpy(-h, &v);
        let fd = (psi_estimate(&p, &up, 1).unwrap().mean - psi_estimate(&p, &um, 1).unwrap().mean) / (2.0 * h);
        let an = g.inner(&v, grid, p.time.dt());
        assert!(((fd - an) / an).abs() < 1e-6, "fd {fd} an {an}");
    }

    #[test]
    fn equilibrium_converges_immediately() {
        let mut p = problem(0.5, 20);
        p.x0 = p.model.grid.zero_state();
        p.cost = CostSpec::quadratic(Reference::Static(p.x0.clone()), 0.1, p.x0.clone(), 2.0).unwrap();
        let report = optimize(&p, &OptimizeConfig::default(), &ControlPath::zeros(&p.model.grid, &p.time)).unwrap();
        assert!(report.converged);
        assert_eq!(report.history.len(), 1);
        assert_eq!(report.control.norm(&p.model.grid, p.time.dt()), 0.0);
    }

    #[test]
    fn short_horizon_converges_geometrically() {
        let p = problem(0.5, 100);
        let report = optimize(&p, &OptimizeConfig::default(), &ControlPath::zeros(&p.model.grid, &p.time)).unwrap();
        assert!(report.converged, "{:?}", report.history);
        assert!(report.psi_nonincreasing());
        let (geometric, worst) = is_geometric(&report);
        assert!(geometric, "worst ratio {worst}");
        let cert = fixed_point_certificate(&p, &report.control).unwrap();
        assert!(cert <= 10.0 * OptimizeConfig::default().tolerance);
    }
}
