//! Uniform Neumann grids on `[0, ℓ]^d`, `d ∈ {1, 2}`.
//!
//! Nodes sit at `i·h` with `h = ℓ/(n−1)`, boundary nodes included. The
//! discrete `L²` pairing uses trapezoid weights, and the Laplacian uses
//! ghost-node reflection at the boundary. With that pairing the stencil is
//! exactly self-adjoint and the sampled cosines `cos(jπξ/ℓ)`, `j = 0..n−1`,
//! are an orthogonal eigenbasis, so every implicit solve in the crate goes
//! through [`Grid::solve_shifted`] in that basis.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Node values of a scalar grid function.
#[derive(Clone, Debug, PartialEq)]
pub struct Field(Vec<f64>);

impl Field {
    pub fn zeros(len: usize) -> Self {
        Field(vec![0.0; len])
    }

    pub fn constant(len: usize, value: f64) -> Self {
        Field(vec![value; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Field(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.len(), other.len());
        Field(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        self.map(|x| alpha * x)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.scaled(rhs)
    }
}

/// Voltage `v` and recovery variable `w`, an element of `H = L² × L²`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateX {
    pub v: Field,
    pub w: Field,
}

impl StateX {
    pub fn new(v: Field, w: Field) -> Self {
        StateX { v, w }
    }

    pub fn zeros(len: usize) -> Self {
        StateX {
            v: Field::zeros(len),
            w: Field::zeros(len),
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn axpy(&mut self, alpha: f64, other: &StateX) {
        self.v.axpy(alpha, &other.v);
        self.w.axpy(alpha, &other.w);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.v.scale(alpha);
        self.w.scale(alpha);
    }

    pub fn scaled(&self, alpha: f64) -> StateX {
        StateX {
            v: self.v.scaled(alpha),
            w: self.w.scaled(alpha),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.w.is_finite()
    }
}

impl Add for &StateX {
    type Output = StateX;
    fn add(self, rhs: &StateX) -> StateX {
        StateX {
            v: &self.v + &rhs.v,
            w: &self.w + &rhs.w,
        }
    }
}

impl Sub for &StateX {
    type Output = StateX;
    fn sub(self, rhs: &StateX) -> StateX {
        StateX {
            v: &self.v - &rhs.v,
            w: &self.w - &rhs.w,
        }
    }
}

/// A uniform tensor grid with its quadrature and cosine eigenbasis.
#[derive(Clone, Debug)]
pub struct Grid {
    dim: usize,
    n: usize,
    length: f64,
    spacing: f64,
    axis_weights: Vec<f64>,
    weights: Vec<f64>,
    /// Row `j` holds the weighted-orthonormal 1-D mode `j` at every node.
    axis_modes: Vec<f64>,
    /// 1-D eigenvalues of the reflected stencil, `μ_j = −(2/h²)(1 − cos(jπh/ℓ))`.
    axis_eigenvalues: Vec<f64>,
}

impl Grid {
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::config("grid.dimension", "dimension must be 1 or 2"));
        }
        if n < 3 {
            return Err(Error::config("grid.points", "points per axis must be at least 3"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::config("grid.length", "edge length must be positive"));
        }
        let spacing = length / (n - 1) as f64;

        let mut axis_weights = vec![spacing; n];
        axis_weights[0] *= 0.5;
        axis_weights[n - 1] *= 0.5;

        let weights = match dim {
            1 => axis_weights.clone(),
            _ => {
                let mut w = Vec::with_capacity(n * n);
                for &a in &axis_weights {
                    for &b in &axis_weights {
                        w.push(a * b);
                    }
                }
                w
            }
        };

        let mut axis_modes = vec![0.0; n * n];
        let mut axis_eigenvalues = vec![0.0; n];
        for j in 0..n {
            // DCT-I normalization: the two end frequencies have squared norm ℓ, the rest ℓ/2.
            let norm = if j == 0 || j == n - 1 {
                (1.0 / length).sqrt()
            } else {
                (2.0 / length).sqrt()
            };
            for i in 0..n {
                let phase = (j * i % (2 * (n - 1))) as f64 * PI / (n - 1) as f64;
                axis_modes[j * n + i] = norm * phase.cos();
            }
            let theta = j as f64 * PI / (n - 1) as f64;
            axis_eigenvalues[j] = -2.0 / (spacing * spacing) * (1.0 - theta.cos());
        }

        Ok(Grid {
            dim,
            n,
            length,
            spacing,
            axis_weights,
            weights,
            axis_modes,
            axis_eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn measure(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    /// Coordinates of node `idx` (unused trailing axis is 0 in 1-D).
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        match self.dim {
            1 => [idx as f64 * self.spacing, 0.0],
            _ => [
                (idx / self.n) as f64 * self.spacing,
                (idx % self.n) as f64 * self.spacing,
            ],
        }
    }

    pub fn field_from_fn(&self, f: impl Fn([f64; 2]) -> f64) -> Field {
        Field((0..self.node_count()).map(|i| f(self.coords(i))).collect())
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.node_count())
    }

    pub fn zero_state(&self) -> StateX {
        StateX::zeros(self.node_count())
    }

    pub fn check(&self, u: &Field) -> Result<()> {
        if u.len() != self.node_count() {
            return Err(Error::Contract(format!(
                "field has {} values, grid has {} nodes",
                u.len(),
                self.node_count()
            )));
        }
        Ok(())
    }

    pub fn check_state(&self, x: &StateX) -> Result<()> {
        self.check(&x.v)?;
        self.check(&x.w)
    }

    /// Trapezoid `⟨u, w⟩₂`.
    pub fn inner_l2(&self, u: &Field, w: &Field) -> f64 {
        self.weights
            .iter()
            .zip(u.values())
            .zip(w.values())
            .map(|((q, a), b)| q * a * b)
            .sum()
    }

    pub fn norm_l2_sq(&self, u: &Field) -> f64 {
        self.inner_l2(u, u)
    }

    /// Reflected second-difference Laplacian (zero normal derivative).
    pub fn neumann_laplacian(&self, u: &Field) -> Result<Field> {
        self.check(u)?;
        let n = self.n;
        let inv_h2 = 1.0 / (self.spacing * self.spacing);
        let mut out = vec![0.0; u.len()];
        let src = u.values();
        let second_diff = |get: &dyn Fn(usize) -> f64, i: usize| -> f64 {
            let left = if i == 0 { get(1) } else { get(i - 1) };
            let right = if i == n - 1 { get(n - 2) } else { get(i + 1) };
            (left - 2.0 * get(i) + right) * inv_h2
        };
        match self.dim {
            1 => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = second_diff(&|k| src[k], i);
                }
            }
            _ => {
                for i0 in 0..n {
                    for i1 in 0..n {
                        let along0 = second_diff(&|k| src[k * n + i1], i0);
                        let along1 = second_diff(&|k| src[i0 * n + k], i1);
                        out[i0 * n + i1] = along0 + along1;
                    }
                }
            }
        }
        Ok(Field(out))
    }

    /// Squared discrete `H¹` seminorm from one-sided (forward) differences.
    pub fn grad_norm_sq(&self, u: &Field) -> f64 {
        let n = self.n;
        let h = self.spacing;
        let src = u.values();
        match self.dim {
            1 => (0..n - 1).map(|i| (src[i + 1] - src[i]).powi(2) / h).sum(),
            _ => {
                let mut total = 0.0;
                for i0 in 0..n {
                    for i1 in 0..n {
                        let here = src[i0 * n + i1];
                        if i0 + 1 < n {
                            total += self.axis_weights[i1] * (src[(i0 + 1) * n + i1] - here).powi(2) / h;
                        }
                        if i1 + 1 < n {
                            total += self.axis_weights[i0] * (src[i0 * n + i1 + 1] - here).powi(2) / h;
                        }
                    }
                }
                total
            }
        }
    }

    /// Number of modes available per axis.
    pub fn modes_per_axis(&self) -> usize {
        self.n
    }

    fn mode_offset(&self, k: &[usize]) -> Result<usize> {
        if k.len() != self.dim {
            return Err(Error::Range(format!(
                "mode index has {} components on a {}-D grid",
                k.len(),
                self.dim
            )));
        }
        let mut offset = 0;
        for &kk in k {
            if kk == 0 || kk > self.n {
                return Err(Error::Range(format!(
                    "mode index {kk} outside 1..={}",
                    self.n
                )));
            }
            offset = offset * self.n + (kk - 1);
        }
        Ok(offset)
    }

    /// Flat coefficient slot of the (1-based, per-axis) mode `k`.
    pub fn mode_slot(&self, k: &[usize]) -> Result<usize> {
        self.mode_offset(k)
    }

    /// `L²`-normalized cosine mode; `k = [1]` (or `[1, 1]`) is the constant.
    pub fn neumann_eigenmode(&self, k: &[usize]) -> Result<Field> {
        let slot = self.mode_offset(k)?;
        let mut coeffs = vec![0.0; self.node_count()];
        coeffs[slot] = 1.0;
        Ok(self.synthesize(&coeffs))
    }

    /// Eigenvalue of the reflected stencil for mode `k`.
    pub fn eigenvalue(&self, k: &[usize]) -> Result<f64> {
        self.mode_offset(k)?;
        Ok(k.iter().map(|&kk| self.axis_eigenvalues[kk - 1]).sum())
    }

    fn slot_eigenvalue(&self, slot: usize) -> f64 {
        match self.dim {
            1 => self.axis_eigenvalues[slot],
            _ => self.axis_eigenvalues[slot / self.n] + self.axis_eigenvalues[slot % self.n],
        }
    }

    /// Coefficients `⟨u, e_j⟩₂` for every mode, flat in the same layout as nodes.
    pub fn analyze(&self, u: &Field) -> Vec<f64> {
        let weighted: Vec<f64> = u
            .values()
            .iter()
            .zip(&self.weights)
            .map(|(a, q)| a * q)
            .collect();
        self.transform(&weighted, false)
    }

    /// Inverse of [`Grid::analyze`]: `Σ_j c_j e_j`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Field {
        Field(self.transform(coeffs, true))
    }

    /// Applies the mode matrix along every axis. `synthesis = false` maps
    /// weighted node values to coefficients, `true` maps coefficients to nodes.
    fn transform(&self, data: &[f64], synthesis: bool) -> Vec<f64> {
        let n = self.n;
        let m = &self.axis_modes;
        let apply = |input: &[f64], out: &mut [f64], stride: usize, base: usize| {
            for a in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    let coeff = if synthesis { m[b * n + a] } else { m[a * n + b] };
                    acc += coeff * input[base + b * stride];
                }
                out[base + a * stride] = acc;
            }
        };
        match self.dim {
            1 => {
                let mut out = vec![0.0; n];
                apply(data, &mut out, 1, 0);
                out
            }
            _ => {
                let mut tmp = vec![0.0; n * n];
                for i0 in 0..n {
                    apply(data, &mut tmp, 1, i0 * n);
                }
                let mut out = vec![0.0; n * n];
                for i1 in 0..n {
                    apply(&tmp, &mut out, n, i1);
                }
                out
            }
        }
    }

    /// Solves `(c·I − s·Δ_h) x = r` exactly in the cosine eigenbasis.
    /// Requires `c − s·μ_j > 0` for all modes (true whenever `c > 0`, `s ≥ 0`).
    pub fn solve_shifted(&self, c: f64, s: f64, r: &Field) -> Field {
        let mut coeffs = self.analyze(r);
        for (slot, x) in coeffs.iter_mut().enumerate() {
            *x /= c - s * self.slot_eigenvalue(slot);
        }
        self.synthesize(&coeffs)
    }

    /// Applies the spectral multiplier `m(slot)` to `u`.
    pub fn spectral_multiply(&self, u: &Field, multiplier: impl Fn(usize) -> f64) -> Field {
        let mut coeffs = self.analyze(u);
        for (slot, x) in coeffs.iter_mut().enumerate() {
            *x *= multiplier(slot);
        }
        self.synthesize(&coeffs)
    }

    /// 1-based per-axis index of a flat slot.
    pub fn slot_mode(&self, slot: usize) -> Vec<usize> {
        match self.dim {
            1 => vec![slot + 1],
            _ => vec![slot / self.n + 1, slot % self.n + 1],
        }
    }
}

/// Weighted `H` inner product `γ⟨v_X, v_Y⟩₂ + ⟨w_X, w_Y⟩₂`.
pub fn inner_h(grid: &Grid, gamma: f64, x: &StateX, y: &StateX) -> Result<f64> {
    check_gamma(gamma)?;
    grid.check_state(x)?;
    grid.check_state(y)?;
    Ok(inner_h_unchecked(grid, gamma, x, y))
}

pub(crate) fn inner_h_unchecked(grid: &Grid, gamma: f64, x: &StateX, y: &StateX) -> f64 {
    gamma * grid.inner_l2(&x.v, &y.v) + grid.inner_l2(&x.w, &y.w)
}

pub(crate) fn norm_h_sq(grid: &Grid, gamma: f64, x: &StateX) -> f64 {
    inner_h_unchecked(grid, gamma, x, x)
}

/// `|X|_V² = γ(|v|₂² + |∇_h v|₂²) + |w|₂²`.
pub fn norm_v_sq(grid: &Grid, gamma: f64, x: &StateX) -> Result<f64> {
    check_gamma(gamma)?;
    grid.check_state(x)?;
    Ok(norm_v_sq_unchecked(grid, gamma, x))
}

pub(crate) fn norm_v_sq_unchecked(grid: &Grid, gamma: f64, x: &StateX) -> f64 {
    gamma * (grid.norm_l2_sq(&x.v) + grid.grad_norm_sq(&x.v)) + grid.norm_l2_sq(&x.w)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config("gamma", "gamma must be positive"))
    }
}
