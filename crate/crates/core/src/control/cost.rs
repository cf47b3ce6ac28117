//! Cost triples `(g, g₀, h)` for the control problem.
//!
//! The discrete functional for one path is
//! `Σ_{n=1}^{N} dt·g(t_n, X_n) + g₀(X_N) + Σ_{n=0}^{N−1} dt·h(u_n)`;
//! running costs are sampled at the right end of each step, which is where
//! the implicit step places the new state.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{inner_h_unchecked, Field, Grid, StateX};

/// A state cost with globally Lipschitz `H`-gradient.
pub trait StateCost: Debug + Send + Sync {
    fn value(&self, grid: &Grid, gamma: f64, node: usize, x: &StateX) -> f64;
    /// Riesz representative of `Dg` in the weighted `H` pairing.
    fn gradient(&self, grid: &Grid, gamma: f64, node: usize, x: &StateX) -> StateX;
    fn gradient_lipschitz(&self) -> f64;
    /// `c·g`.
    fn scaled(&self, c: f64) -> Arc<dyn StateCost>;
}

/// A convex control cost with Lipschitz `(∂h)⁻¹`.
pub trait ControlCost: Debug + Send + Sync {
    fn value(&self, grid: &Grid, u: &Field) -> f64;
    /// An element of `∂h(u)`.
    fn subgradient(&self, u: &Field) -> Field;
    fn subdiff_inverse(&self, q: &Field) -> Field;
    /// `L = ‖(∂h)⁻¹‖_Lip`.
    fn inverse_lipschitz(&self) -> f64;
    /// `h'(u, v)`.
    fn directional_derivative(&self, grid: &Grid, u: &Field, v: &Field) -> f64;
}

/// Target state of a tracking cost, fixed or one per time node.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    Static(StateX),
    Path(Vec<StateX>),
}

impl Reference {
    pub fn at(&self, node: usize) -> &StateX {
        match self {
            Reference::Static(x) => x,
            Reference::Path(xs) => &xs[node.min(xs.len() - 1)],
        }
    }
}

/// `(weight/2)·|X − X_ref(t)|_H²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTracking {
    pub weight: f64,
    pub reference: Reference,
}

impl QuadraticTracking {
    pub fn new(weight: f64, reference: Reference) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::config("cost.weight", "tracking weight must be nonnegative"));
        }
        Ok(QuadraticTracking { weight, reference })
    }
}

impl StateCost for QuadraticTracking {
    fn value(&self, grid: &Grid, gamma: f64, node: usize, x: &StateX) -> f64 {
        let d = x - self.reference.at(node);
        0.5 * self.weight * inner_h_unchecked(grid, gamma, &d, &d)
    }

    fn gradient(&self, _grid: &Grid, _gamma: f64, node: usize, x: &StateX) -> StateX {
        (x - self.reference.at(node)).scaled(self.weight)
    }

    fn gradient_lipschitz(&self) -> f64 {
        self.weight
    }

    fn scaled(&self, c: f64) -> Arc<dyn StateCost> {
        Arc::new(QuadraticTracking {
            weight: c * self.weight,
            reference: self.reference.clone(),
        })
    }
}

/// `h(u) = (α/2)|u|_U²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticControl {
    pub alpha: f64,
}

impl QuadraticControl {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("cost.alpha", "alpha must be positive"));
        }
        Ok(QuadraticControl { alpha })
    }
}

impl ControlCost for QuadraticControl {
    fn value(&self, grid: &Grid, u: &Field) -> f64 {
        0.5 * self.alpha * grid.norm_l2_sq(u)
    }

    fn subgradient(&self, u: &Field) -> Field {
        u.scaled(self.alpha)
    }

    fn subdiff_inverse(&self, q: &Field) -> Field {
        q.scaled(1.0 / self.alpha)
    }

    fn inverse_lipschitz(&self) -> f64 {
        1.0 / self.alpha
    }

    fn directional_derivative(&self, grid: &Grid, u: &Field, v: &Field) -> f64 {
        self.alpha * grid.inner_l2(u, v)
    }
}

#[derive(Clone, Debug)]
pub struct CostSpec {
    pub running: Arc<dyn StateCost>,
    pub terminal: Arc<dyn StateCost>,
    pub control: Arc<dyn ControlCost>,
}

impl CostSpec {
    pub fn new(
        running: impl StateCost + 'static,
        terminal: impl StateCost + 'static,
        control: impl ControlCost + 'static,
    ) -> Self {
        CostSpec {
            running: Arc::new(running),
            terminal: Arc::new(terminal),
            control: Arc::new(control),
        }
    }

    /// `(c·g, c·g₀, h)`.
    pub fn scale_state_costs(&self, c: f64) -> CostSpec {
        CostSpec {
            running: self.running.scaled(c),
            terminal: self.terminal.scaled(c),
            control: self.control.clone(),
        }
    }

    /// `g = ½|X − X_ref|²`, `g₀ = (c₀/2)|X − X_T|²`, `h = (α/2)|u|²`.
    pub fn quadratic(reference: Reference, c0: f64, target: StateX, alpha: f64) -> Result<Self> {
        Ok(CostSpec::new(
            QuadraticTracking::new(1.0, reference)?,
            QuadraticTracking::new(c0, Reference::Static(target))?,
            QuadraticControl::new(alpha)?,
        ))
    }
}

/// `(∂h)⁻¹(q)`.
pub fn subdiff_inverse(cost: &CostSpec, q: &Field) -> Field {
    cost.control.subdiff_inverse(q)
}
