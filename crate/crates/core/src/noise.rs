//! Truncated Karhunen–Loève sampling of the two independent `Q_i`-Wiener
//! processes driving the voltage and recovery equations.
//!
//! `Q₁` and `Q₂` share the grid's cosine eigenbasis, so an increment over a
//! step is `Σ_k √λ_k^i ΔB_k^i e_k` with `ΔB_k^i ~ N(0, dt)` independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, StateX};

/// Eigenvalues of `Q₁`, `Q₂` on the leading cosine modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCovariance {
    truncation: usize,
    /// 1-based per-axis mode indices, one entry per retained mode.
    modes: Vec<Vec<usize>>,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
}

impl SpectralCovariance {
    /// `λ_k^i = σ_i² k^{−p}` in 1-D and `σ_i² (k₁k₂)^{−p}` in 2-D, `k ≤ K` per axis.
    pub fn power_law(dim: usize, truncation: usize, sigma1: f64, sigma2: f64, exponent: f64) -> Result<Self> {
        if !(sigma1 >= 0.0 && sigma2 >= 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(Error::config("noise.sigma", "noise amplitudes must be nonnegative"));
        }
        if !(exponent > 1.0 && exponent.is_finite()) {
            return Err(Error::config(
                "noise.exponent",
                "spectral exponent must exceed 1 for a trace-class covariance",
            ));
        }
        let mut modes = Vec::new();
        let mut decay = Vec::new();
        match dim {
            1 => {
                for k in 1..=truncation {
                    modes.push(vec![k]);
                    decay.push((k as f64).powf(-exponent));
                }
            }
            2 => {
                for k0 in 1..=truncation {
                    for k1 in 1..=truncation {
                        modes.push(vec![k0, k1]);
                        decay.push(((k0 * k1) as f64).powf(-exponent));
                    }
                }
            }
            _ => return Err(Error::config("grid.dimension", "dimension must be 1 or 2")),
        }
        let lambda1 = decay.iter().map(|d| sigma1 * sigma1 * d).collect();
        let lambda2 = decay.iter().map(|d| sigma2 * sigma2 * d).collect();
        Self::from_parts(truncation, modes, lambda1, lambda2)
    }

    pub fn from_parts(
        truncation: usize,
        modes: Vec<Vec<usize>>,
        lambda1: Vec<f64>,
        lambda2: Vec<f64>,
    ) -> Result<Self> {
        if modes.len() != lambda1.len() || modes.len() != lambda2.len() {
            return Err(Error::Contract("one eigenvalue pair per mode".into()));
        }
        if lambda1
            .iter()
            .chain(&lambda2)
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::config("noise.lambda", "eigenvalues must be finite and nonnegative"));
        }
        Ok(SpectralCovariance {
            truncation,
            modes,
            lambda1,
            lambda2,
        })
    }

    /// No noise at all.
    pub fn zero() -> Self {
        SpectralCovariance {
            truncation: 0,
            modes: Vec::new(),
            lambda1: Vec::new(),
            lambda2: Vec::new(),
        }
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn modes(&self) -> &[Vec<usize>] {
        &self.modes
    }

    pub fn eigenvalues(&self, which: Component) -> &[f64] {
        match which {
            Component::V => &self.lambda1,
            Component::W => &self.lambda2,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda1.iter().chain(&self.lambda2).all(|&l| l == 0.0)
    }

    /// Flat coefficient slots of the retained modes on `grid`.
    pub fn slots(&self, grid: &Grid) -> Result<Vec<usize>> {
        self.modes.iter().map(|k| grid.mode_slot(k)).collect()
    }
}

/// Which noise channel: `β₁` drives `v`, `β₂` drives `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    V,
    W,
}

/// `Tr Q_i` over the retained modes.
pub fn trace_q(cov: &SpectralCovariance, which: Component) -> f64 {
    cov.eigenvalues(which).iter().sum()
}

/// One step of both Wiener processes, as node values plus the modal
/// Brownian increments they were synthesized from.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerIncrement {
    pub dbeta1: Field,
    pub dbeta2: Field,
    /// `ΔB_k¹`, one per retained mode (before the `√λ` scaling).
    pub db1: Vec<f64>,
    pub db2: Vec<f64>,
}

impl WienerIncrement {
    pub fn zero(grid: &Grid, modes: usize) -> Self {
        WienerIncrement {
            dbeta1: grid.zeros(),
            dbeta2: grid.zeros(),
            db1: vec![0.0; modes],
            db2: vec![0.0; modes],
        }
    }

    /// The increment as an `H`-valued noise term `√Q ΔW`.
    pub fn as_state(&self) -> StateX {
        StateX::new(self.dbeta1.clone(), self.dbeta2.clone())
    }

    /// Increment over the union of two consecutive steps.
    pub fn merge(&self, next: &WienerIncrement) -> WienerIncrement {
        WienerIncrement {
            dbeta1: &self.dbeta1 + &next.dbeta1,
            dbeta2: &self.dbeta2 + &next.dbeta2,
            db1: self.db1.iter().zip(&next.db1).map(|(a, b)| a + b).collect(),
            db2: self.db2.iter().zip(&next.db2).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Counter-based stream for `(seed, path, step)`: the draw for a given
/// triple never depends on how paths are scheduled.
pub fn stream(seed: u64, path: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"fhnwienr");
    ChaCha8Rng::from_seed(key)
}

/// Draws `(dβ₁, dβ₂)` over a step of length `dt`. `dt = 0` gives the zero increment.
pub fn sample_increment<R: Rng + ?Sized>(
    cov: &SpectralCovariance,
    grid: &Grid,
    dt: f64,
    rng: &mut R,
) -> Result<WienerIncrement> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::config("time.dt", "time step must be nonnegative and finite"));
    }
    let slots = cov.slots(grid)?;
    let modes = slots.len();
    if dt == 0.0 {
        return Ok(WienerIncrement::zero(grid, modes));
    }
    let sd = dt.sqrt();
    let mut db1 = Vec::with_capacity(modes);
    let mut db2 = Vec::with_capacity(modes);
    for _ in 0..modes {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        db1.push(sd * z1);
        db2.push(sd * z2);
    }
    let synth = |lambda: &[f64], db: &[f64]| {
        let mut coeffs = vec![0.0; grid.node_count()];
        for ((&slot, &l), &b) in slots.iter().zip(lambda).zip(db) {
            coeffs[slot] += l.sqrt() * b;
        }
        grid.synthesize(&coeffs)
    };
    Ok(WienerIncrement {
        dbeta1: synth(&cov.lambda1, &db1),
        dbeta2: synth(&cov.lambda2, &db2),
        db1,
        db2,
    })
}

/// `√Q X`: projects each component onto the retained modes and scales by `√λ_k^i`.
pub fn sqrt_q_apply(cov: &SpectralCovariance, grid: &Grid, x: &StateX) -> Result<StateX> {
    grid.check_state(x)?;
    let slots = cov.slots(grid)?;
    let apply = |u: &Field, lambda: &[f64]| {
        let coeffs = grid.analyze(u);
        let mut out = vec![0.0; coeffs.len()];
        for (&slot, &l) in slots.iter().zip(lambda) {
            out[slot] += l.sqrt() * coeffs[slot];
        }
        grid.synthesize(&out)
    };
    Ok(StateX::new(apply(&x.v, &cov.lambda1), apply(&x.w, &cov.lambda2)))
}
