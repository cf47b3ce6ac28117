//! The system in variations and the dual backward equation, discretized as
//! exact transposes of the forward step.
//!
//! With `M = (I − dt·A)⁻¹` and `J_n = I + dt·DF(X_n)` the forward scheme is
//! `X_{n+1} = M(J_n-ish explicit part)`; the backward sweep is
//!
//! ```text
//! p_N = −Dg₀(X_N)
//! G_n = M*(p_{n+1} − dt·Dg(X_{n+1}))      (conditional expectation in the stochastic case)
//! p_n = J_n* G_n
//! ```
//!
//! `G_n` is what the control on `[t_n, t_{n+1})` sees: the `𝒰`-gradient of the
//! discrete cost is `∂h(u_n) − B*G_n`. The nodal `p_n` differs from `G_n` only by
//! `dt·DF(X_n)*G_n`.

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::control::cost::CostSpec;
use crate::dynamics::df_apply;
use crate::error::{Error, Result};
use crate::forward::{actuator_apply, ControlPath, Model, Trajectory};
use crate::grid::{Field, Grid, StateX};

/// Default regression design: constant plus four modes of each component.
pub const DEFAULT_FEATURES: usize = 9;
const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointPath {
    /// `p_n`, `n = 0..=N`; `p_N = −Dg₀(X_N)`.
    pub p: Vec<StateX>,
    /// `G_n`, `n = 0..N`: the adjoint pulled back through the implicit solve.
    pub step: Vec<StateX>,
    /// Martingale integrand per step, scaled so that `Σ dt|κ_n|_H²` estimates
    /// the quadratic variation of `p`. Zero in the deterministic sweep.
    pub kappa: Vec<StateX>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationPath {
    pub z: Vec<StateX>,
}

/// Linearized state equation along `traj` in control direction `direction`.
pub fn solve_variational(model: &Model, traj: &Trajectory, direction: &ControlPath) -> Result<VariationPath> {
    direction.check(&model.grid, &traj.time)?;
    let dt = traj.time.dt();
    let implicit = model.implicit(dt);
    let mut z = Vec::with_capacity(traj.states.len());
    z.push(model.grid.zero_state());
    for (n, v) in direction.values.iter().enumerate() {
        let zn = &z[n];
        let mut rhs = zn.clone();
        rhs.axpy(dt, &df_apply(&model.params, &traj.states[n], zn));
        rhs.axpy(dt, &actuator_apply(&model.actuator, v));
        let next = implicit.solve(&model.grid, &rhs);
        let norm = model.norm_h_sq(&next).sqrt();
        if !(norm.is_finite() && norm <= crate::forward::BLOW_UP_THRESHOLD) {
            return Err(Error::BlowUp { step: n + 1, norm });
        }
        z.push(next);
    }
    Ok(VariationPath { z })
}

/// Backward sweep with `κ ≡ 0`, exact along a single path.
pub fn solve_adjoint_deterministic(model: &Model, traj: &Trajectory, cost: &CostSpec) -> AdjointPath {
    let grid = &model.grid;
    let gamma = model.gamma();
    let dt = traj.time.dt();
    let implicit = model.implicit(dt);
    let steps = traj.time.steps();

    let mut p = vec![grid.zero_state(); steps + 1];
    let mut step = vec![grid.zero_state(); steps];
    p[steps] = cost.terminal.gradient(grid, gamma, steps, traj.terminal()).scaled(-1.0);
    for n in (0..steps).rev() {
        let mut pre = p[n + 1].clone();
        pre.axpy(-dt, &cost.running.gradient(grid, gamma, n + 1, &traj.states[n + 1]));
        let g = implicit.solve_adjoint(grid, &pre);
        p[n] = transpose_explicit(model, &traj.states[n], &g, dt);
        step[n] = g;
    }
    AdjointPath {
        p,
        step,
        kappa: vec![grid.zero_state(); steps],
    }
}

/// `J_n* G = G + dt·DF(X_n)* G` (DF is self-adjoint in `H`).
fn transpose_explicit(model: &Model, x: &StateX, g: &StateX, dt: f64) -> StateX {
    let mut out = g.clone();
    out.axpy(dt, &df_apply(&model.params, x, g));
    out
}

/// Flat slots of the `count` smoothest modes (eigenvalues closest to zero).
fn leading_slots(grid: &Grid, count: usize) -> Vec<usize> {
    let mut slots: Vec<(f64, usize)> = (0..grid.node_count())
        .map(|s| (grid.eigenvalue(&grid.slot_mode(s)).unwrap_or(f64::NEG_INFINITY), s))
        .collect();
    slots.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    slots.into_iter().take(count).map(|(_, s)| s).collect()
}

/// Regression features: modal coefficients of `v` then `w` (constant added later).
fn state_features(grid: &Grid, x: &StateX, v_slots: &[usize], w_slots: &[usize]) -> Vec<f64> {
    let cv = grid.analyze(&x.v);
    let cw = grid.analyze(&x.w);
    v_slots
        .iter()
        .map(|&s| cv[s])
        .chain(w_slots.iter().map(|&s| cw[s]))
        .collect()
}

fn flatten(x: &StateX) -> impl Iterator<Item = f64> + '_ {
    x.v.values().iter().chain(x.w.values()).copied()
}

fn unflatten(values: &[f64], nodes: usize) -> StateX {
    StateX::new(
        Field::from_vec(values[..nodes].to_vec()),
        Field::from_vec(values[nodes..].to_vec()),
    )
}

/// Least-squares conditional expectation of each row of `targets` given `features`.
///
/// Features are standardized over the ensemble; columns with no spread are
/// dropped. A ridge term is added only when the normal matrix is not
/// positive definite.
fn conditional_expectation(features: &[Vec<f64>], targets: &DMatrix<f64>) -> DMatrix<f64> {
    let paths = targets.nrows();
    let raw = features.first().map(|f| f.len()).unwrap_or(0);
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; paths]];
    let mut dropped = 0;
    for j in 0..raw {
        let col: Vec<f64> = features.iter().map(|f| f[j]).collect();
        let mean = col.iter().sum::<f64>() / paths as f64;
        let sd = (col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / paths as f64).sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            dropped += 1;
            continue;
        }
        columns.push(col.iter().map(|c| (c - mean) / sd).collect());
    }
    let p = columns.len();
    let design = DMatrix::from_fn(paths, p, |i, j| columns[j][i]);
    let normal = design.transpose() * &design;
    let rhs = design.transpose() * targets;
    if dropped > 0 {
        debug!("regression: {dropped} degenerate feature(s) dropped");
    }
    let coeffs = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            warn!("degraded regression basis ({p} columns): ridge fallback");
            let scale = normal.trace() / p as f64;
            let ridged = normal + DMatrix::identity(p, p) * (RIDGE * scale);
            ridged
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .unwrap_or_else(|| DMatrix::zeros(p, targets.ncols()))
        }
    };
    design * coeffs
}

/// Regression Monte Carlo sweep over an ensemble sharing `x0` and control.
///
/// Returns one adjoint path per trajectory. `features` counts the regression
/// columns including the constant.
pub fn solve_adjoint_regression(
    model: &Model,
    ensemble: &[Trajectory],
    cost: &CostSpec,
    features: usize,
) -> Result<Vec<AdjointPath>> {
    let paths = ensemble.len();
    if features == 0 {
        return Err(Error::config("adjoint.features", "at least the constant feature is required"));
    }
    if paths < 10 * features {
        return Err(Error::InsufficientEnsemble {
            paths,
            features,
            required: 10 * features,
        });
    }
    let time = ensemble[0].time;
    if ensemble.iter().any(|t| t.time != time) {
        return Err(Error::Contract("ensemble members use different time grids".into()));
    }
    let grid = &model.grid;
    let gamma = model.gamma();
    let dt = time.dt();
    let steps = time.steps();
    let nodes = grid.node_count();
    let implicit = model.implicit(dt);

    let modal = features - 1;
    let v_slots = leading_slots(grid, modal.div_ceil(2));
    let w_slots = leading_slots(grid, modal / 2);
    let noise_slots = model.cov.modes().len();

    let mut p: Vec<Vec<StateX>> = vec![vec![grid.zero_state(); steps + 1]; paths];
    let mut step: Vec<Vec<StateX>> = vec![vec![grid.zero_state(); steps]; paths];
    let mut kappa: Vec<Vec<StateX>> = vec![vec![grid.zero_state(); steps]; paths];
    for (m, traj) in ensemble.iter().enumerate() {
        p[m][steps] = cost.terminal.gradient(grid, gamma, steps, traj.terminal()).scaled(-1.0);
    }

    for n in (0..steps).rev() {
        // Pre-image of the step adjoint, before the (linear, deterministic) M*.
        let pre: Vec<StateX> = ensemble
            .par_iter()
            .zip(p.par_iter())
            .map(|(traj, pm)| {
                let mut y = pm[n + 1].clone();
                y.axpy(-dt, &cost.running.gradient(grid, gamma, n + 1, &traj.states[n + 1]));
                y
            })
            .collect();
        let feats: Vec<Vec<f64>> = ensemble
            .par_iter()
            .map(|t| state_features(grid, &t.states[n], &v_slots, &w_slots))
            .collect();
        let targets = DMatrix::from_fn(paths, 2 * nodes, |i, j| {
            if j < nodes {
                pre[i].v.values()[j]
            } else {
                pre[i].w.values()[j - nodes]
            }
        });
        let fitted = conditional_expectation(&feats, &targets);

        let residuals: Vec<Vec<f64>> = (0..paths)
            .map(|i| flatten(&pre[i]).zip(fitted.row(i).iter()).map(|(y, f)| y - f).collect())
            .collect();
        let martingale = martingale_increments(ensemble, n, &residuals, noise_slots);

        let results: Vec<(StateX, StateX, StateX)> = (0..paths)
            .into_par_iter()
            .map(|i| {
                let cond: Vec<f64> = fitted.row(i).iter().copied().collect();
                let g = implicit.solve_adjoint(grid, &unflatten(&cond, nodes));
                let pn = transpose_explicit(model, &ensemble[i].states[n], &g, dt);
                let k = unflatten(&martingale[i], nodes).scaled(1.0 / dt.sqrt());
                (pn, g, k)
            })
            .collect();
        for (i, (pn, g, k)) in results.into_iter().enumerate() {
            p[i][n] = pn;
            step[i][n] = g;
            kappa[i][n] = k;
        }
    }

    Ok(p
        .into_iter()
        .zip(step)
        .zip(kappa)
        .map(|((p, step), kappa)| AdjointPath { p, step, kappa })
        .collect())
}

/// Projects the regression residual of each path onto its own Brownian
/// increments, one ensemble-wide coefficient per noise channel and mode.
fn martingale_increments(ensemble: &[Trajectory], n: usize, residuals: &[Vec<f64>], modes: usize) -> Vec<Vec<f64>> {
    let paths = ensemble.len();
    let width = residuals.first().map(|r| r.len()).unwrap_or(0);
    let mut out = vec![vec![0.0; width]; paths];
    for channel in 0..2 {
        for k in 0..modes {
            let db: Vec<f64> = ensemble
                .iter()
                .map(|t| {
                    let inc = &t.increments[n];
                    if channel == 0 { inc.db1[k] } else { inc.db2[k] }
                })
                .collect();
            let denom: f64 = db.iter().map(|b| b * b).sum();
            if denom == 0.0 {
                continue;
            }
            let mut coeff = vec![0.0; width];
            for (r, &b) in residuals.iter().zip(&db) {
                for (c, &x) in coeff.iter_mut().zip(r) {
                    *c += x * b;
                }
            }
            coeff.iter_mut().for_each(|c| *c /= denom);
            for (o, &b) in out.iter_mut().zip(&db) {
                for (x, &c) in o.iter_mut().zip(&coeff) {
                    *x += c * b;
                }
            }
        }
    }
    out
}

/// Ensemble average of the step adjoints `G_n`.
pub fn mean_step_adjoint(paths: &[AdjointPath]) -> Vec<StateX> {
    let m = paths.len() as f64;
    let mut mean = paths[0].step.iter().map(|x| x.scaled(0.0)).collect::<Vec<_>>();
    for path in paths {
        for (acc, x) in mean.iter_mut().zip(&path.step) {
            acc.axpy(1.0 / m, x);
        }
    }
    mean
}

/// Relative defect of the duality identity
/// `Σ dt⟨Dg(X_n), Z_n⟩ + ⟨Dg₀(X_N), Z_N⟩ = −Σ dt⟨Bv_n, p_n⟩_H`
/// evaluated with the nodal adjoint `p_n`; normalized by the right-hand side.
pub fn duality_gap(
    model: &Model,
    traj: &Trajectory,
    adjoint: &AdjointPath,
    direction: &ControlPath,
    cost: &CostSpec,
) -> Result<f64> {
    let variation = solve_variational(model, traj, direction)?;
    let grid = &model.grid;
    let gamma = model.gamma();
    let dt = traj.time.dt();
    let steps = traj.time.steps();
    let mut lhs = 0.0;
    for n in 1..=steps {
        lhs += dt * model.inner_h(&cost.running.gradient(grid, gamma, n, &traj.states[n]), &variation.z[n]);
    }
    lhs += model.inner_h(&cost.terminal.gradient(grid, gamma, steps, traj.terminal()), &variation.z[steps]);
    let mut rhs = 0.0;
    for (n, v) in direction.values.iter().enumerate() {
        rhs -= dt * model.inner_h(&actuator_apply(&model.actuator, v), &adjoint.p[n]);
    }
    if rhs == 0.0 {
        return Ok(if lhs == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((lhs - rhs) / rhs.abs())
}
