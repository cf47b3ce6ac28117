//! FitzHugh–Nagumo reaction terms, the linear operator `A`, and the
//! dissipativity structure of `A + F`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{inner_h_unchecked, norm_h_sq, Field, Grid, StateX};

#[derive(Clone, Debug, PartialEq)]
pub struct FhnParams {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub delta: f64,
    pub forcing: Field,
    /// `false` drops `F` entirely (forcing included): the linear test mode.
    pub nonlinear: bool,
}

impl FhnParams {
    pub fn new(a: f64, b: f64, gamma: f64, delta: f64, forcing: Field) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config("fhn.gamma", "gamma must be positive"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::config("fhn.delta", "delta must be positive"));
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::config("fhn.a", "cubic roots must be finite"));
        }
        if !forcing.is_finite() {
            return Err(Error::config("fhn.forcing", "forcing must be finite"));
        }
        Ok(FhnParams {
            a,
            b,
            gamma,
            delta,
            forcing,
            nonlinear: true,
        })
    }

    /// Defaults of the excitable regime with zero forcing.
    pub fn excitable(grid: &Grid) -> Self {
        FhnParams::new(0.25, 1.0, 0.5, 0.8, grid.zeros()).expect("defaults are valid")
    }

    pub fn linear(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    /// One-sided Lipschitz constant of `−I_ion`: `max(0, (a+b)²/3 − ab)`.
    pub fn eta(&self) -> f64 {
        let s = self.a + self.b;
        (s * s / 3.0 - self.a * self.b).max(0.0)
    }

    pub fn i_ion(&self, v: f64) -> f64 {
        i_ion(self.a, self.b, v)
    }

    pub fn i_ion_prime(&self, v: f64) -> f64 {
        i_ion_prime(self.a, self.b, v)
    }
}

/// `I_ion(v) = v(v − a)(v − b)`.
pub fn i_ion(a: f64, b: f64, v: f64) -> f64 {
    v * (v - a) * (v - b)
}

pub fn i_ion_prime(a: f64, b: f64, v: f64) -> f64 {
    3.0 * v * v - 2.0 * (a + b) * v + a * b
}

/// `F(v, w) = (−I_ion(v) + f, 0)`.
pub fn f_apply(params: &FhnParams, x: &StateX) -> StateX {
    let n = x.len();
    if !params.nonlinear {
        return StateX::zeros(n);
    }
    let v = Field::from_vec(
        x.v.values()
            .iter()
            .zip(params.forcing.values())
            .map(|(&v, &f)| -params.i_ion(v) + f)
            .collect(),
    );
    StateX::new(v, Field::zeros(n))
}

/// `DF(X) Z = (−I_ion'(v) z_v, 0)`. Self-adjoint in `H`.
pub fn df_apply(params: &FhnParams, x: &StateX, z: &StateX) -> StateX {
    let n = x.len();
    if !params.nonlinear {
        return StateX::zeros(n);
    }
    let v = x.v.zip_map(&z.v, |v, zv| -params.i_ion_prime(v) * zv);
    StateX::new(v, Field::zeros(n))
}

/// `A X = (Δ_h v − w, γv − δw)`.
pub fn a_apply(params: &FhnParams, grid: &Grid, x: &StateX) -> Result<StateX> {
    grid.check_state(x)?;
    let mut v = grid.neumann_laplacian(&x.v)?;
    v.axpy(-1.0, &x.w);
    let w = x.v.zip_map(&x.w, |v, w| params.gamma * v - params.delta * w);
    Ok(StateX::new(v, w))
}

/// `A* X = (Δ_h v + w, −γv − δw)`, the adjoint of `A` in the weighted pairing.
pub fn a_adjoint_apply(params: &FhnParams, grid: &Grid, x: &StateX) -> Result<StateX> {
    grid.check_state(x)?;
    let mut v = grid.neumann_laplacian(&x.v)?;
    v.axpy(1.0, &x.w);
    let w = x.v.zip_map(&x.w, |v, w| -params.gamma * v - params.delta * w);
    Ok(StateX::new(v, w))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginReport {
    /// Largest sampled `⟨F(x) − F(y), x − y⟩_H / |x − y|_H²`.
    pub sampled: f64,
    pub eta: f64,
}

/// Samples the one-sided Lipschitz ratio of `F` over random pairs of states.
///
/// Half of the pairs are generic random states; the other half are small
/// perturbations of a spatially constant state near the vertex of
/// `I_ion'`, where the ratio approaches `η`.
pub fn one_sided_margin<R: Rng + ?Sized>(
    params: &FhnParams,
    grid: &Grid,
    samples: usize,
    rng: &mut R,
) -> Result<MarginReport> {
    if samples == 0 {
        return Err(Error::config("samples", "sample count must be at least 1"));
    }
    let n = grid.node_count();
    let vertex = (params.a + params.b) / 3.0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..samples {
        let (x, y) = if i % 2 == 0 {
            let mut draw = || {
                Field::from_vec((0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
            };
            (StateX::new(draw(), draw()), StateX::new(draw(), draw()))
        } else {
            let centre = vertex + rng.random_range(-0.1..0.1);
            let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
            let base = Field::constant(n, centre);
            let w = Field::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
            let bump = Field::from_vec((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
            (StateX::new(&base + &bump, w.clone()), StateX::new(base, w))
        };
        let diff = &x - &y;
        let denom = norm_h_sq(grid, params.gamma, &diff);
        if denom == 0.0 {
            continue;
        }
        let df = &f_apply(params, &x) - &f_apply(params, &y);
        let ratio = inner_h_unchecked(grid, params.gamma, &df, &diff) / denom;
        worst = worst.max(ratio);
    }
    Ok(MarginReport {
        sampled: worst,
        eta: params.eta(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner_h;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(grid: &Grid, rng: &mut impl Rng) -> StateX {
        let n = grid.node_count();
        StateX::new(
            Field::from_vec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()),
            Field::from_vec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()),
        )
    }

    #[test]
    fn cubic_values() {
        assert_eq!(i_ion(0.25, 1.0, 0.0), 0.0);
        assert_eq!(i_ion(0.25, 1.0, 0.25), 0.0);
        assert_eq!(i_ion(1.0, 2.0, 3.0), 6.0);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let v: f64 = rng.random_range(-3.0..3.0);
            let fd = (i_ion(0.25, 1.0, v + h) - i_ion(0.25, 1.0, v - h)) / (2.0 * h);
            assert!((fd - i_ion_prime(0.25, 1.0, v)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_nonpositive_coefficients() {
        let g = Grid::new(1, 5, 1.0).unwrap();
        assert!(FhnParams::new(0.1, 1.0, 0.0, 1.0, g.zeros()).is_err());
        assert!(FhnParams::new(0.1, 1.0, 1.0, -1.0, g.zeros()).is_err());
    }

    #[test]
    fn reaction_examples() {
        let g = Grid::new(1, 7, 1.0).unwrap();
        let n = g.node_count();
        let p = FhnParams::new(1.0, 2.0, 0.5, 0.8, g.zeros()).unwrap();
        assert_eq!(f_apply(&p, &g.zero_state()).v.max_abs(), 0.0);
        let at_root = f_apply(&p, &StateX::new(Field::constant(n, 1.0), g.zeros()));
        assert_eq!(at_root.v.max_abs(), 0.0);

        let forced = FhnParams::new(1.0, 2.0, 0.5, 0.8, Field::constant(n, 0.5)).unwrap();
        let out = f_apply(&forced, &StateX::new(Field::constant(n, 3.0), g.zeros()));
        assert!(out.v.values().iter().all(|&x| x == -5.5));
        assert_eq!(out.w.max_abs(), 0.0);
    }

    #[test]
    fn df_is_the_derivative_of_f() {
        let g = Grid::new(1, 9, 1.0).unwrap();
        let p = FhnParams::new(0.25, 1.0, 0.5, 0.8, g.field_from_fn(|x| 0.1 * x[0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&g, &mut rng);
        let z = random_state(&g, &mut rng);
        assert_eq!(df_apply(&p, &x, &g.zero_state()).v.max_abs(), 0.0);
        let lin = df_apply(&p, &x, &z.scaled(2.5));
        assert!((&lin - &df_apply(&p, &x, &z).scaled(2.5)).v.max_abs() < 1e-12);

        let exact = df_apply(&p, &x, &z);
        let mut errors = Vec::new();
        for h in [1e-2, 5e-3, 2.5e-3] {
            let mut xh = x.clone();
            xh.axpy(h, &z);
            let fd = (&f_apply(&p, &xh) - &f_apply(&p, &x)).scaled(1.0 / h);
            errors.push((&fd - &exact).v.max_abs());
        }
        // first-order convergence: halving h halves the error
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        }
    }

    #[test]
    fn a_examples() {
        let g = Grid::new(1, 16, 1.0).unwrap();
        let n = g.node_count();
        let p = FhnParams::excitable(&g);
        let out = a_apply(&p, &g, &StateX::new(Field::constant(n, 2.0), g.zeros())).unwrap();
        assert!(out.v.max_abs() < 1e-10);
        assert!(out.w.values().iter().all(|&x| (x - 1.0).abs() < 1e-15));

        for k in [1, 2, 5] {
            let e = g.neumann_eigenmode(&[k]).unwrap();
            let mu = g.eigenvalue(&[k]).unwrap();
            let out = a_apply(&p, &g, &StateX::new(e.clone(), g.zeros())).unwrap();
            assert!((&out.v - &e.scaled(mu)).max_abs() < 1e-10 * mu.abs().max(1.0));
            assert!((&out.w - &e.scaled(p.gamma)).max_abs() < 1e-14);
        }
    }

    #[test]
    fn eta_examples() {
        let g = Grid::new(1, 5, 1.0).unwrap();
        let p = FhnParams::new(1.0, 2.0, 0.5, 0.8, g.zeros()).unwrap();
        assert_relative_eq!(p.eta(), 1.0, max_relative = 1e-15);
        let cubic = FhnParams::new(0.0, 0.0, 0.5, 0.8, g.zeros()).unwrap();
        assert_eq!(cubic.eta(), 0.0);
        // η is minus the minimum of I_ion', attained at the vertex (a+b)/3
        let vertex = (1.0 + 2.0) / 3.0;
        assert_relative_eq!(-i_ion_prime(1.0, 2.0, vertex), p.eta(), max_relative = 1e-15);
    }

    #[test]
    fn margin_respects_eta_and_ignores_forcing_offset() {
        let g = Grid::new(1, 6, 1.0).unwrap();
        let p = FhnParams::new(1.0, 2.0, 0.5, 0.8, g.zeros()).unwrap();
        let report = one_sided_margin(&p, &g, 20_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(report.sampled <= report.eta + 1e-9);
        assert!(report.sampled > 0.9 * report.eta, "sampler should probe near the bound");

        let shifted = FhnParams::new(1.0, 2.0, 0.5, 0.8, Field::constant(6, 0.7)).unwrap();
        let again = one_sided_margin(&shifted, &g, 20_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!((again.sampled - report.sampled).abs() <= 1e-12 * report.sampled.abs().max(1.0));
        assert!(one_sided_margin(&p, &g, 0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weighted_skew_cancellation(seed in any::<u64>(), gamma in 0.05f64..5.0, delta in 0.05f64..5.0) {
            let g = Grid::new(1, 13, 1.0).unwrap();
            let p = FhnParams::new(0.25, 1.0, gamma, delta, g.zeros()).unwrap();
            let x = random_state(&g, &mut ChaCha8Rng::seed_from_u64(seed));
            let ax = a_apply(&p, &g, &x).unwrap();
            let lhs = inner_h(&g, gamma, &ax, &x).unwrap();
            let lap = g.neumann_laplacian(&x.v).unwrap();
            let rhs = gamma * g.inner_l2(&lap, &x.v) - delta * g.norm_l2_sq(&x.w);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + norm_h_sq(&g, gamma, &x)));
            prop_assert!(lhs <= -delta * g.norm_l2_sq(&x.w) + 1e-12 * (1.0 + norm_h_sq(&g, gamma, &x)));
        }

        #[test]
        fn a_adjoint_is_the_h_adjoint(seed in any::<u64>(), gamma in 0.05f64..5.0) {
            let g = Grid::new(2, 6, 1.0).unwrap();
            let p = FhnParams::new(0.25, 1.0, gamma, 0.8, g.zeros()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_state(&g, &mut rng);
            let y = random_state(&g, &mut rng);
            let l = inner_h(&g, gamma, &a_apply(&p, &g, &x).unwrap(), &y).unwrap();
            let r = inner_h(&g, gamma, &x, &a_adjoint_apply(&p, &g, &y).unwrap()).unwrap();
            prop_assert!((l - r).abs() <= 1e-11 * l.abs().max(1.0));
        }
    }
}
