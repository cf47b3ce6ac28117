//! Scenario files: a TOML description of one control problem.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected with the list of valid keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{CostSpec, OptimizeConfig, Problem, Reference};
use crate::dynamics::FhnParams;
use crate::error::{Error, Result};
use crate::forward::{ActuatorSpec, Model, TimeGrid};
use crate::grid::{Field, Grid, StateX};
use crate::noise::SpectralCovariance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub points: usize,
    pub length: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dim: 1, points: 64, length: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhnConfig {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Spatially constant external current `f`.
    pub forcing: f64,
    pub nonlinear: bool,
}

impl Default for FhnConfig {
    fn default() -> Self {
        FhnConfig {
            a: 0.25,
            b: 1.0,
            gamma: 0.5,
            delta: 0.8,
            forcing: 0.0,
            nonlinear: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub truncation: usize,
    pub exponent: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma1: 0.1,
            sigma2: 0.1,
            truncation: 32,
            exponent: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { horizon: 0.5, steps: 500 }
    }
}

/// Actuated region `lo ≤ ξ₁ ≤ hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorConfig {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        ActuatorConfig { lo: 0.0, hi: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalTerm {
    /// 1-based mode index per axis; `[1]` is the constant mode.
    pub mode: Vec<usize>,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Constant {
        v: f64,
        w: f64,
    },
    /// Sum of normalized Neumann eigenmodes.
    Modal {
        #[serde(default)]
        v: Vec<ModalTerm>,
        #[serde(default)]
        w: Vec<ModalTerm>,
    },
    /// CSV with header `v,w` and one row per grid node.
    File {
        path: PathBuf,
    },
}

impl StateSpec {
    pub fn zero() -> Self {
        StateSpec::Constant { v: 0.0, w: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub alpha: f64,
    pub c0: f64,
    pub reference: StateSpec,
    pub target: StateSpec,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            alpha: 2.0,
            c0: 0.1,
            reference: StateSpec::zero(),
            target: StateSpec::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub eps0: f64,
    pub pure: bool,
    pub line_search: bool,
    pub max_backtracks: usize,
    /// Regression columns including the constant.
    pub features: usize,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        let c = OptimizeConfig::default();
        OptimizeSettings {
            max_iterations: c.max_iterations,
            tolerance: c.tolerance,
            eps0: c.eps0,
            pure: c.pure,
            line_search: c.line_search,
            max_backtracks: c.max_backtracks,
            features: crate::adjoint::DEFAULT_FEATURES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub mode: Mode,
    pub ensemble: usize,
    pub grid: GridConfig,
    pub fhn: FhnConfig,
    pub noise: NoiseConfig,
    pub time: TimeConfig,
    pub actuator: ActuatorConfig,
    pub initial: StateSpec,
    pub cost: CostConfig,
    pub optimize: OptimizeSettings,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            mode: Mode::Deterministic,
            ensemble: 200,
            grid: GridConfig::default(),
            fhn: FhnConfig::default(),
            noise: NoiseConfig::default(),
            time: TimeConfig::default(),
            actuator: ActuatorConfig::default(),
            initial: StateSpec::Modal {
                v: vec![
                    ModalTerm { mode: vec![1], amplitude: 0.3 },
                    ModalTerm { mode: vec![2], amplitude: 0.2 },
                ],
                w: Vec::new(),
            },
            cost: CostConfig::default(),
            optimize: OptimizeSettings::default(),
        }
    }
}

fn positive(value: f64, field: &str, name: &str) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{name} must be positive")))
    }
}

fn nonnegative(value: f64, field: &str, name: &str) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{name} must be nonnegative")))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form; independent of key order in the file.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.dim == 1 || g.dim == 2) {
            return Err(Error::config("grid.dim", "dim must be 1 or 2"));
        }
        if g.points < 3 {
            return Err(Error::config("grid.points", "points must be at least 3"));
        }
        positive(g.length, "grid.length", "length")?;

        let f = &self.fhn;
        for (v, field) in [(f.a, "fhn.a"), (f.b, "fhn.b"), (f.forcing, "fhn.forcing")] {
            if !v.is_finite() {
                return Err(Error::config(field, "value must be finite"));
            }
        }
        positive(f.gamma, "fhn.gamma", "gamma")?;
        nonnegative(f.delta, "fhn.delta", "delta")?;

        let n = &self.noise;
        nonnegative(n.sigma1, "noise.sigma1", "sigma1")?;
        nonnegative(n.sigma2, "noise.sigma2", "sigma2")?;
        if n.truncation < 1 || n.truncation > g.points {
            return Err(Error::config("noise.truncation", "truncation must lie in 1..=grid.points"));
        }
        if !(n.exponent > 1.0 && n.exponent.is_finite()) {
            return Err(Error::config("noise.exponent", "exponent must exceed 1"));
        }

        positive(self.time.horizon, "time.horizon", "horizon")?;
        if self.time.steps < 1 {
            return Err(Error::config("time.steps", "steps must be at least 1"));
        }

        let a = &self.actuator;
        if !(0.0 <= a.lo && a.lo <= a.hi && a.hi <= g.length) {
            return Err(Error::config("actuator", "need 0 <= lo <= hi <= grid.length"));
        }

        positive(self.cost.alpha, "cost.alpha", "alpha")?;
        nonnegative(self.cost.c0, "cost.c0", "c0")?;

        let o = &self.optimize;
        positive(o.tolerance, "optimize.tolerance", "tolerance")?;
        nonnegative(o.eps0, "optimize.eps0", "eps0")?;
        if o.features < 1 {
            return Err(Error::config("optimize.features", "features must be at least 1"));
        }
        if self.ensemble < 1 {
            return Err(Error::config("ensemble", "ensemble must be at least 1"));
        }
        if self.mode == Mode::Stochastic && self.ensemble < 10 * o.features {
            return Err(Error::config(
                "ensemble",
                format!("ensemble must be at least 10 x optimize.features = {}", 10 * o.features),
            ));
        }

        let grid = self.build_grid()?;
        for (spec, field) in [
            (&self.initial, "initial"),
            (&self.cost.reference, "cost.reference"),
            (&self.cost.target, "cost.target"),
        ] {
            if let StateSpec::Modal { v, w } = spec {
                for term in v.iter().chain(w) {
                    if term.mode.len() != g.dim || grid.mode_slot(&term.mode).is_err() {
                        return Err(Error::config(
                            field,
                            format!("mode {:?} is not a valid {}-D mode index", term.mode, g.dim),
                        ));
                    }
                }
            }
        }
        if let StateSpec::File { path } = &self.initial {
            let x = read_state_csv(path, &grid)?;
            check_neumann_compatible(&grid, &x.v).map_err(|m| Error::config("initial", m))?;
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dim, self.grid.points, self.grid.length)
    }

    pub fn build_model(&self) -> Result<Model> {
        let grid = self.build_grid()?;
        let f = &self.fhn;
        let mut params = FhnParams::new(f.a, f.b, f.gamma, f.delta, Field::constant(grid.node_count(), f.forcing))?;
        params.nonlinear = f.nonlinear;
        let cov = match self.mode {
            Mode::Deterministic => SpectralCovariance::zero(),
            Mode::Stochastic => {
                let n = &self.noise;
                SpectralCovariance::power_law(self.grid.dim, n.truncation, n.sigma1, n.sigma2, n.exponent)?
            }
        };
        let actuator = ActuatorSpec::interval(&grid, self.actuator.lo, self.actuator.hi)?;
        Model::new(grid, params, cov, actuator)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.horizon, self.time.steps)
    }

    pub fn build_problem(&self) -> Result<Problem> {
        let model = self.build_model()?;
        let grid = &model.grid;
        let x0 = build_state(&self.initial, grid)?;
        let reference = build_state(&self.cost.reference, grid)?;
        let target = build_state(&self.cost.target, grid)?;
        let cost = CostSpec::quadratic(Reference::Static(reference), self.cost.c0, target, self.cost.alpha)?;
        Ok(Problem {
            time: self.time_grid()?,
            x0,
            cost,
            seed: self.seed,
            ensemble: self.ensemble,
            features: self.optimize.features,
            model,
        })
    }

    pub fn optimize_config(&self) -> OptimizeConfig {
        let o = &self.optimize;
        OptimizeConfig {
            max_iterations: o.max_iterations,
            tolerance: o.tolerance,
            eps0: o.eps0,
            pure: o.pure,
            line_search: o.line_search,
            max_backtracks: o.max_backtracks,
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::parse(&fs::read_to_string(path)?)
}

pub fn build_state(spec: &StateSpec, grid: &Grid) -> Result<StateX> {
    match spec {
        StateSpec::Constant { v, w } => Ok(StateX::new(
            Field::constant(grid.node_count(), *v),
            Field::constant(grid.node_count(), *w),
        )),
        StateSpec::Modal { v, w } => {
            let sum = |terms: &[ModalTerm]| -> Result<Field> {
                let mut f = grid.zeros();
                for t in terms {
                    f.axpy(t.amplitude, &grid.neumann_eigenmode(&t.mode)?);
                }
                Ok(f)
            };
            Ok(StateX::new(sum(v)?, sum(w)?))
        }
        StateSpec::File { path } => read_state_csv(path, grid),
    }
}

pub fn read_state_csv(path: &Path, grid: &Grid) -> Result<StateX> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("v,w") => {}
        other => return Err(Error::Parse(format!("{}: expected header `v,w`, got {other:?}", path.display()))),
    }
    let (mut v, mut w) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let mut cols = line.split(',').map(|c| c.trim().parse::<f64>());
        match (cols.next(), cols.next(), cols.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) if a.is_finite() && b.is_finite() => {
                v.push(a);
                w.push(b);
            }
            _ => return Err(Error::Parse(format!("{}: bad row {}", path.display(), i + 2))),
        }
    }
    if v.len() != grid.node_count() {
        return Err(Error::Parse(format!(
            "{}: {} rows for {} grid nodes",
            path.display(),
            v.len(),
            grid.node_count()
        )));
    }
    Ok(StateX::new(Field::from_vec(v), Field::from_vec(w)))
}

/// Discrete Neumann compatibility of `v₀`: the second-order one-sided normal
/// difference at every boundary node must not exceed
/// `0.1·h·(1 + max interior |Δ_h v₀|)`.
pub fn check_neumann_compatible(grid: &Grid, v: &Field) -> std::result::Result<(), String> {
    let n = grid.points_per_axis();
    let h = grid.spacing();
    let lap = grid.neumann_laplacian(v).map_err(|e| e.to_string())?;
    let interior = |i: usize| i > 0 && i < n - 1;
    let idx = |i: usize, j: usize| if grid.dim() == 1 { i } else { i * n + j };
    let lines = if grid.dim() == 1 { 1 } else { n };
    let mut max_lap: f64 = 0.0;
    for i in 0..n {
        for j in 0..lines {
            if interior(i) && (grid.dim() == 1 || interior(j)) {
                max_lap = max_lap.max(lap.values()[idx(i, j)].abs());
            }
        }
    }
    let tol = 0.1 * h * (1.0 + max_lap);
    let u = v.values();
    let mut worst: f64 = 0.0;
    for j in 0..lines {
        for axis in 0..grid.dim() {
            let at = |k: usize| if axis == 0 { u[idx(k, j)] } else { u[idx(j, k)] };
            let left = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
            let right = (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h);
            worst = worst.max(left.abs()).max(right.abs());
        }
    }
    if worst <= tol {
        Ok(())
    } else {
        Err(format!(
            "initial v is not Neumann compatible: boundary normal derivative {worst:.3e} exceeds {tol:.3e}"
        ))
    }
}
