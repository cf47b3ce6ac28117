//! Semi-implicit Euler–Maruyama integration of the controlled state equation.
//!
//! One step solves `(I − dt·A) X⁺ = X + dt(F(X) + Bu) + √Q ΔW`. Eliminating
//! `w⁺` from the recovery row leaves a single shifted Neumann problem for
//! `v⁺`, solved exactly in the cosine basis; the same elimination applied to
//! `A*` gives the transposed step used by the adjoint sweeps.

use rayon::prelude::*;

use crate::dynamics::{f_apply, FhnParams};
use crate::error::{Error, Result};
use crate::grid::{inner_h_unchecked, norm_h_sq, norm_v_sq_unchecked, Field, Grid, StateX};
use crate::noise::{sample_increment, stream, SpectralCovariance, WienerIncrement};

/// States with `|X|_H` above this are treated as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config("time.horizon", "horizon must be positive"));
        }
        if steps == 0 {
            return Err(Error::config("time.steps", "at least one step is required"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        node as f64 * self.dt()
    }

    pub fn refined(&self) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            steps: 2 * self.steps,
        }
    }
}

/// Open-loop control, piecewise constant: `values[n]` acts on `[t_n, t_{n+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    pub values: Vec<Field>,
}

impl ControlPath {
    pub fn zeros(grid: &Grid, time: &TimeGrid) -> Self {
        ControlPath {
            values: vec![grid.zeros(); time.steps()],
        }
    }

    pub fn constant(time: &TimeGrid, u: Field) -> Self {
        ControlPath {
            values: vec![u; time.steps()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `⟨u, v⟩_𝒰 = Σ_n dt ⟨u_n, v_n⟩_U`.
    pub fn inner(&self, other: &ControlPath, grid: &Grid, dt: f64) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| dt * grid.inner_l2(a, b))
            .sum()
    }

    pub fn norm(&self, grid: &Grid, dt: f64) -> f64 {
        self.inner(self, grid, dt).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ControlPath) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.axpy(alpha, b);
        }
    }

    pub fn scaled(&self, alpha: f64) -> ControlPath {
        ControlPath {
            values: self.values.iter().map(|u| u.scaled(alpha)).collect(),
        }
    }

    pub fn sub(&self, other: &ControlPath) -> ControlPath {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub(crate) fn check(&self, grid: &Grid, time: &TimeGrid) -> Result<()> {
        if self.values.len() != time.steps() {
            return Err(Error::Contract(format!(
                "control has {} entries for {} steps",
                self.values.len(),
                time.steps()
            )));
        }
        self.values.iter().try_for_each(|u| grid.check(u))
    }
}

/// `B u = (mask·u, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorSpec {
    mask: Field,
}

impl ActuatorSpec {
    pub fn new(mask: Field) -> Result<Self> {
        if mask.values().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("actuator.mask", "mask values must lie in [0, 1]"));
        }
        Ok(ActuatorSpec { mask })
    }

    pub fn full(grid: &Grid) -> Self {
        ActuatorSpec {
            mask: Field::constant(grid.node_count(), 1.0),
        }
    }

    /// Indicator of `lo ≤ ξ₁ ≤ hi` (first coordinate).
    pub fn interval(grid: &Grid, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::config("actuator.interval", "interval must satisfy lo <= hi"));
        }
        Self::new(grid.field_from_fn(|x| if x[0] >= lo && x[0] <= hi { 1.0 } else { 0.0 }))
    }

    pub fn mask(&self) -> &Field {
        &self.mask
    }
}

pub fn actuator_apply(spec: &ActuatorSpec, u: &Field) -> StateX {
    let v = u.zip_map(&spec.mask, |u, m| u * m);
    let n = v.len();
    StateX::new(v, Field::zeros(n))
}

/// `B*X = γ·mask·v`, so that `⟨B*X, u⟩_U = ⟨X, Bu⟩_H`.
pub fn actuator_adjoint(spec: &ActuatorSpec, gamma: f64, x: &StateX) -> Field {
    x.v.zip_map(&spec.mask, |v, m| gamma * m * v)
}

/// Everything the state equation needs besides time and control.
#[derive(Clone, Debug)]
pub struct Model {
    pub grid: Grid,
    pub params: FhnParams,
    pub cov: SpectralCovariance,
    pub actuator: ActuatorSpec,
}

impl Model {
    pub fn new(grid: Grid, params: FhnParams, cov: SpectralCovariance, actuator: ActuatorSpec) -> Result<Self> {
        grid.check(&params.forcing)?;
        grid.check(actuator.mask())?;
        cov.slots(&grid)?;
        Ok(Model {
            grid,
            params,
            cov,
            actuator,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    pub fn is_deterministic(&self) -> bool {
        self.cov.is_zero()
    }

    pub fn norm_h_sq(&self, x: &StateX) -> f64 {
        norm_h_sq(&self.grid, self.params.gamma, x)
    }

    pub fn inner_h(&self, x: &StateX, y: &StateX) -> f64 {
        inner_h_unchecked(&self.grid, self.params.gamma, x, y)
    }

    pub fn deterministic(&self) -> Model {
        Model {
            cov: SpectralCovariance::zero(),
            ..self.clone()
        }
    }

    pub(crate) fn implicit(&self, dt: f64) -> ImplicitStep {
        ImplicitStep::new(&self.params, dt)
    }
}

/// `(I − dt·A)⁻¹` and its `H`-adjoint `(I − dt·A*)⁻¹`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ImplicitStep {
    dt: f64,
    gamma: f64,
    /// `1 + dt·δ`
    recovery: f64,
    /// `1 + dt²γ/(1 + dt·δ)`, the shift left on `v` after eliminating `w`.
    shift: f64,
}

impl ImplicitStep {
    fn new(params: &FhnParams, dt: f64) -> Self {
        let recovery = 1.0 + dt * params.delta;
        ImplicitStep {
            dt,
            gamma: params.gamma,
            recovery,
            shift: 1.0 + dt * dt * params.gamma / recovery,
        }
    }

    /// Solves `(I − dt·A) X = r`.
    pub(crate) fn solve(&self, grid: &Grid, r: &StateX) -> StateX {
        let rhs = r.v.zip_map(&r.w, |rv, rw| rv - self.dt * rw / self.recovery);
        let v = grid.solve_shifted(self.shift, self.dt, &rhs);
        let w = r.w.zip_map(&v, |rw, v| (rw + self.dt * self.gamma * v) / self.recovery);
        StateX::new(v, w)
    }

    /// Solves `(I − dt·A*) X = r`.
    pub(crate) fn solve_adjoint(&self, grid: &Grid, r: &StateX) -> StateX {
        let rhs = r.v.zip_map(&r.w, |rv, rw| rv + self.dt * rw / self.recovery);
        let v = grid.solve_shifted(self.shift, self.dt, &rhs);
        let w = r.w.zip_map(&v, |rw, v| (rw - self.dt * self.gamma * v) / self.recovery);
        StateX::new(v, w)
    }
}

/// One semi-implicit step from `x` under control `u` and noise `dw`.
pub fn step(model: &Model, x: &StateX, u: &Field, dw: &WienerIncrement, dt: f64) -> Result<StateX> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("time.dt", "time step must be positive"));
    }
    model.grid.check_state(x)?;
    model.grid.check(u)?;
    let next = step_with(model, &model.implicit(dt), x, u, dw);
    if !next.is_finite() {
        return Err(Error::Numerical(format!(
            "implicit solve produced non-finite values (dt = {dt}, max|v| = {:e})",
            x.v.max_abs()
        )));
    }
    Ok(next)
}

fn step_with(model: &Model, implicit: &ImplicitStep, x: &StateX, u: &Field, dw: &WienerIncrement) -> StateX {
    let dt = implicit.dt;
    let mut rhs = x.clone();
    rhs.axpy(dt, &f_apply(&model.params, x));
    rhs.v.axpy(dt, &u.zip_map(model.actuator.mask(), |u, m| u * m));
    rhs.v.axpy(1.0, &dw.dbeta1);
    rhs.w.axpy(1.0, &dw.dbeta2);
    implicit.solve(&model.grid, &rhs)
}

/// A forward solve with everything needed to re-drive it.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub time: TimeGrid,
    /// `N + 1` states.
    pub states: Vec<StateX>,
    /// `N` increments.
    pub increments: Vec<WienerIncrement>,
    pub control: ControlPath,
    pub seed: u64,
    pub path: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &StateX {
        self.states.last().expect("trajectory has N + 1 >= 2 states")
    }
}

/// Increments for `(seed, path)` on `time`, one counter-based stream per step.
pub fn draw_increments(model: &Model, time: &TimeGrid, seed: u64, path: u64) -> Result<Vec<WienerIncrement>> {
    let modes = model.cov.modes().len();
    if model.is_deterministic() {
        return Ok(vec![WienerIncrement::zero(&model.grid, modes); time.steps()]);
    }
    (0..time.steps())
        .map(|n| sample_increment(&model.cov, &model.grid, time.dt(), &mut stream(seed, path, n as u64)))
        .collect()
}

/// Integrates `N` steps from `x0`, drawing noise for `(seed, path)`.
pub fn integrate(
    model: &Model,
    time: &TimeGrid,
    x0: &StateX,
    control: &ControlPath,
    seed: u64,
    path: u64,
) -> Result<Trajectory> {
    let increments = draw_increments(model, time, seed, path)?;
    integrate_with_increments(model, time, x0, control, increments, seed, path)
}

/// Integrates with prescribed increments (common random numbers across runs).
pub fn integrate_with_increments(
    model: &Model,
    time: &TimeGrid,
    x0: &StateX,
    control: &ControlPath,
    increments: Vec<WienerIncrement>,
    seed: u64,
    path: u64,
) -> Result<Trajectory> {
    model.grid.check_state(x0)?;
    control.check(&model.grid, time)?;
    if increments.len() != time.steps() {
        return Err(Error::Contract(format!(
            "{} increments for {} steps",
            increments.len(),
            time.steps()
        )));
    }
    let implicit = model.implicit(time.dt());
    let mut states = Vec::with_capacity(time.steps() + 1);
    states.push(x0.clone());
    for (n, (u, dw)) in control.values.iter().zip(&increments).enumerate() {
        let next = step_with(model, &implicit, &states[n], u, dw);
        let norm = model.norm_h_sq(&next).sqrt();
        if !(norm.is_finite() && norm <= BLOW_UP_THRESHOLD) {
            return Err(Error::BlowUp { step: n + 1, norm });
        }
        states.push(next);
    }
    Ok(Trajectory {
        time: *time,
        states,
        increments,
        control: control.clone(),
        seed,
        path,
    })
}

/// Paths `first_path .. first_path + count` under a common control, in parallel.
pub fn integrate_ensemble(
    model: &Model,
    time: &TimeGrid,
    x0: &StateX,
    control: &ControlPath,
    seed: u64,
    first_path: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| integrate(model, time, x0, control, seed, first_path + i))
        .collect()
}

/// Discrete counterparts of `sup_t |X|_H²` and `∫₀ᵀ |X|_V² dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub sup_h_sq: f64,
    pub v_integral: f64,
}

pub fn energy_report(grid: &Grid, gamma: f64, traj: &Trajectory) -> EnergyReport {
    let dt = traj.time.dt();
    let sup_h_sq = traj
        .states
        .iter()
        .map(|x| norm_h_sq(grid, gamma, x))
        .fold(0.0, f64::max);
    let v: Vec<f64> = traj
        .states
        .iter()
        .map(|x| norm_v_sq_unchecked(grid, gamma, x))
        .collect();
    let n = v.len();
    let v_integral = dt * (v[1..n - 1].iter().sum::<f64>() + 0.5 * (v[0] + v[n - 1]));
    EnergyReport { sup_h_sq, v_integral }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEnergy {
    pub per_path: Vec<EnergyReport>,
    /// `Ê sup_t |X|_H²`
    pub mean_sup_h_sq: f64,
    /// `sup_t Ê|X|_H²`
    pub sup_mean_h_sq: f64,
    pub mean_v_integral: f64,
}

pub fn ensemble_energy(grid: &Grid, gamma: f64, ensemble: &[Trajectory]) -> EnsembleEnergy {
    let per_path: Vec<EnergyReport> = ensemble.iter().map(|t| energy_report(grid, gamma, t)).collect();
    let m = ensemble.len().max(1) as f64;
    let nodes = ensemble.first().map(|t| t.states.len()).unwrap_or(0);
    let sup_mean_h_sq = (0..nodes)
        .map(|i| ensemble.iter().map(|t| norm_h_sq(grid, gamma, &t.states[i])).sum::<f64>() / m)
        .fold(0.0, f64::max);
    EnsembleEnergy {
        mean_sup_h_sq: per_path.iter().map(|r| r.sup_h_sq).sum::<f64>() / m,
        mean_v_integral: per_path.iter().map(|r| r.v_integral).sum::<f64>() / m,
        sup_mean_h_sq,
        per_path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{a_apply, i_ion};
    use crate::grid::inner_h;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, cov: SpectralCovariance) -> Model {
        let grid = Grid::new(1, n, 1.0).unwrap();
        let params = FhnParams::excitable(&grid);
        let actuator = ActuatorSpec::full(&grid);
        Model::new(grid, params, cov, actuator).unwrap()
    }

    fn random_state(grid: &Grid, rng: &mut impl Rng) -> StateX {
        let n = grid.node_count();
        StateX::new(
            Field::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Field::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        )
    }

    #[test]
    fn actuator_examples() {
        let g = Grid::new(1, 11, 1.0).unwrap();
        let full = ActuatorSpec::full(&g);
        let u = g.field_from_fn(|x| 1.0 + x[0]);
        assert_eq!(actuator_apply(&full, &g.zeros()).v.max_abs(), 0.0);
        assert_eq!(actuator_apply(&full, &u).v, u);

        let left = ActuatorSpec::interval(&g, 0.0, 0.5).unwrap();
        let out = actuator_apply(&left, &u);
        for (i, &x) in out.v.values().iter().enumerate() {
            if g.coords(i)[0] > 0.5 {
                assert_eq!(x, 0.0);
            }
        }
        assert!(ActuatorSpec::new(Field::constant(11, 1.5)).is_err());

        let x = StateX::new(u.clone(), g.field_from_fn(|x| x[0]));
        assert_eq!(actuator_adjoint(&full, 1.0, &x), x.v);
        assert_eq!(actuator_adjoint(&full, 1.0, &g.zero_state()).max_abs(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn actuator_adjointness(seed in any::<u64>(), gamma in 0.1f64..4.0) {
            let g = Grid::new(1, 15, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Field::from_vec((0..15).map(|_| rng.random_range(0.0..1.0)).collect());
            let spec = ActuatorSpec::new(mask).unwrap();
            let x = random_state(&g, &mut rng);
            let u = random_state(&g, &mut rng).v;
            let lhs = g.inner_l2(&actuator_adjoint(&spec, gamma, &x), &u);
            let rhs = inner_h(&g, gamma, &x, &actuator_apply(&spec, &u)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn implicit_solves_are_mutually_adjoint(seed in any::<u64>(), dt in 1e-4f64..0.5) {
            let m = model(12, SpectralCovariance::zero());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_state(&m.grid, &mut rng);
            let y = random_state(&m.grid, &mut rng);
            let imp = m.implicit(dt);
            let l = m.inner_h(&imp.solve(&m.grid, &x), &y);
            let r = m.inner_h(&x, &imp.solve_adjoint(&m.grid, &y));
            prop_assert!((l - r).abs() <= 1e-13 * l.abs().max(1.0));
        }

        #[test]
        fn linear_step_is_contractive(seed in any::<u64>(), dt in 1e-4f64..1.0) {
            let m = model(12, SpectralCovariance::zero());
            let m = Model { params: m.params.clone().linear(), ..m };
            let x = random_state(&m.grid, &mut ChaCha8Rng::seed_from_u64(seed));
            let dw = WienerIncrement::zero(&m.grid, 0);
            let next = step(&m, &x, &m.grid.zeros(), &dw, dt).unwrap();
            prop_assert!(m.norm_h_sq(&next) <= m.norm_h_sq(&x) * (1.0 + 1e-14));
        }
    }

    #[test]
    fn implicit_solve_inverts_i_minus_dt_a() {
        let m = model(10, SpectralCovariance::zero());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_state(&m.grid, &mut rng);
        let dt = 0.05;
        let x = m.implicit(dt).solve(&m.grid, &r);
        let mut lhs = x.clone();
        lhs.axpy(-dt, &a_apply(&m.params, &m.grid, &x).unwrap());
        assert!((&lhs - &r).v.max_abs() < 1e-12 && (&lhs - &r).w.max_abs() < 1e-12);
    }

    #[test]
    fn zero_is_an_equilibrium() {
        let m = model(10, SpectralCovariance::zero());
        let dw = WienerIncrement::zero(&m.grid, 0);
        let next = step(&m, &m.grid.zero_state(), &m.grid.zeros(), &dw, 0.01).unwrap();
        assert_eq!(next.v.max_abs(), 0.0);
        assert!(step(&m, &m.grid.zero_state(), &m.grid.zeros(), &dw, 0.0).is_err());
    }

    #[test]
    fn forced_equilibrium_is_preserved() {
        let grid = Grid::new(1, 10, 1.0).unwrap();
        let n = grid.node_count();
        let (gamma, delta, r) = (0.5, 0.8, 0.6);
        let w = gamma * r / delta;
        let f = i_ion(0.25, 1.0, r) + w;
        let params = FhnParams::new(0.25, 1.0, gamma, delta, Field::constant(n, f)).unwrap();
        let actuator = ActuatorSpec::full(&grid);
        let m = Model::new(grid, params, SpectralCovariance::zero(), actuator).unwrap();
        let x0 = StateX::new(Field::constant(n, r), Field::constant(n, w));
        let time = TimeGrid::new(1.0, 100).unwrap();
        let traj = integrate(&m, &time, &x0, &ControlPath::zeros(&m.grid, &time), 0, 0).unwrap();
        let drift = (traj.terminal() - &x0).v.max_abs().max((traj.terminal() - &x0).w.max_abs());
        assert!(drift < 1e-12, "drift {drift}");
    }

    #[test]
    fn zero_scenario_gives_zero_trajectory() {
        let m = model(16, SpectralCovariance::zero());
        let time = TimeGrid::new(0.5, 50).unwrap();
        let traj = integrate(&m, &time, &m.grid.zero_state(), &ControlPath::zeros(&m.grid, &time), 1, 0).unwrap();
        assert_eq!(traj.states.len(), 51);
        assert_eq!(traj.increments.len(), 50);
        assert!(traj.states.iter().all(|x| x.v.max_abs() == 0.0 && x.w.max_abs() == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cov = SpectralCovariance::power_law(1, 8, 0.1, 0.1, 2.0).unwrap();
        let m = model(16, cov);
        let time = TimeGrid::new(0.2, 20).unwrap();
        let x0 = m.grid.zero_state();
        let u = ControlPath::zeros(&m.grid, &time);
        let a = integrate(&m, &time, &x0, &u, 42, 3).unwrap();
        let b = integrate(&m, &time, &x0, &u, 42, 3).unwrap();
        let c = integrate(&m, &time, &x0, &u, 42, 4).unwrap();
        assert_eq!(a.states, b.states);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn blow_up_names_the_step() {
        let grid = Grid::new(1, 8, 1.0).unwrap();
        // a huge forcing drives the state past the threshold within a few steps
        let params = FhnParams::new(0.25, 1.0, 0.5, 0.8, Field::constant(8, 1e8)).unwrap();
        let actuator = ActuatorSpec::full(&grid);
        let m = Model::new(grid, params, SpectralCovariance::zero(), actuator).unwrap();
        let time = TimeGrid::new(1.0, 10).unwrap();
        let err = integrate(&m, &time, &m.grid.zero_state(), &ControlPath::zeros(&m.grid, &time), 0, 0).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: 1, .. }), "{err}");
    }

    #[test]
    fn mismatched_control_is_rejected() {
        let m = model(8, SpectralCovariance::zero());
        let time = TimeGrid::new(1.0, 10).unwrap();
        let short = ControlPath { values: vec![m.grid.zeros(); 9] };
        assert!(matches!(
            integrate(&m, &time, &m.grid.zero_state(), &short, 0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn energy_report_closed_forms() {
        let m = model(8, SpectralCovariance::zero());
        let time = TimeGrid::new(2.0, 10).unwrap();
        let zero = integrate(&m, &time, &m.grid.zero_state(), &ControlPath::zeros(&m.grid, &time), 0, 0).unwrap();
        let r = energy_report(&m.grid, m.gamma(), &zero);
        assert_eq!((r.sup_h_sq, r.v_integral), (0.0, 0.0));

        let xbar = StateX::new(m.grid.field_from_fn(|x| x[0]), Field::constant(8, 0.3));
        let frozen = Trajectory {
            time,
            states: vec![xbar.clone(); 11],
            increments: vec![WienerIncrement::zero(&m.grid, 0); 10],
            control: ControlPath::zeros(&m.grid, &time),
            seed: 0,
            path: 0,
        };
        let r = energy_report(&m.grid, m.gamma(), &frozen);
        let h = m.norm_h_sq(&xbar);
        let v = norm_v_sq_unchecked(&m.grid, m.gamma(), &xbar);
        assert!((r.sup_h_sq - h).abs() < 1e-14);
        assert!((r.v_integral - 2.0 * v).abs() < 1e-13);
    }

    /// Discrete Lyapunov balance `P = M(P + dt·Λ)Mᵀ` for one cosine mode of the
    /// linear scheme, solved in closed form as a 3×3 system for `(p11, p12, p22)`.
    fn modal_stationary_covariance(mu: f64, gamma: f64, delta: f64, dt: f64, l1: f64, l2: f64) -> [f64; 3] {
        // M = (I − dt·A_k)⁻¹ with A_k = [[μ, −1], [γ, −δ]]
        let (a, b, c, d) = (1.0 - dt * mu, dt, -dt * gamma, 1.0 + dt * delta);
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let (s11, s22) = (dt * l1, dt * l2);
        // p = M (p + s) Mᵀ, linear in (p11, p12, p22)
        let coef = |i: usize, j: usize| -> [f64; 3] {
            [
                m[i][0] * m[j][0],
                m[i][0] * m[j][1] + m[i][1] * m[j][0],
                m[i][1] * m[j][1],
            ]
        };
        let rows = [coef(0, 0), coef(0, 1), coef(1, 1)];
        let mut mat = [[0.0; 3]; 3];
        let mut rhs = [0.0; 3];
        for r in 0..3 {
            for k in 0..3 {
                mat[r][k] = if r == k { 1.0 } else { 0.0 } - rows[r][k];
            }
            rhs[r] = rows[r][0] * s11 + rows[r][2] * s22;
        }
        let m3 = nalgebra::Matrix3::from_fn(|i, j| mat[i][j]);
        let sol = m3.lu().solve(&nalgebra::Vector3::from(rhs)).unwrap();
        [sol[0], sol[1], sol[2]]
    }

    #[test]
    fn linear_mode_matches_lyapunov_balance() {
        let cov = SpectralCovariance::power_law(1, 4, 0.3, 0.2, 2.0).unwrap();
        let grid = Grid::new(1, 16, 1.0).unwrap();
        let params = FhnParams::excitable(&grid).linear();
        let actuator = ActuatorSpec::full(&grid);
        let m = Model::new(grid, params, cov.clone(), actuator).unwrap();
        let dt = 0.05;
        let time = TimeGrid::new(20.0, 400).unwrap();
        let burn_in = 100;
        let paths = 400;
        let e2 = m.grid.neumann_eigenmode(&[2]).unwrap();
        let trajs = integrate_ensemble(&m, &time, &m.grid.zero_state(), &ControlPath::zeros(&m.grid, &time), 17, 0, paths).unwrap();
        let (mut svv, mut svw, mut sww, mut count) = (0.0, 0.0, 0.0, 0.0);
        for t in &trajs {
            for x in &t.states[burn_in..] {
                let cv = m.grid.inner_l2(&x.v, &e2);
                let cw = m.grid.inner_l2(&x.w, &e2);
                svv += cv * cv;
                svw += cv * cw;
                sww += cw * cw;
                count += 1.0;
            }
        }
        let mu = m.grid.eigenvalue(&[2]).unwrap();
        let lambda1 = cov.eigenvalues(crate::noise::Component::V)[1];
        let lambda2 = cov.eigenvalues(crate::noise::Component::W)[1];
        let p = modal_stationary_covariance(mu, 0.5, 0.8, dt, lambda1, lambda2);
        // samples within a path are correlated; 5% is several effective standard errors
        assert!((svv / count / p[0] - 1.0).abs() < 0.05, "{} vs {}", svv / count, p[0]);
        assert!((sww / count / p[2] - 1.0).abs() < 0.05, "{} vs {}", sww / count, p[2]);
        assert!((svw / count - p[1]).abs() < 0.1 * (p[0] * p[2]).sqrt());
    }
}
