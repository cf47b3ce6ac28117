//! Reference solutions that share no code with the library's integrators.
#![allow(dead_code)]

use nalgebra::{SMatrix, SVector};

/// Adaptive Dormand–Prince 5(4) integration of `y' = f(y)` from 0 to `t_end`.
pub fn dopri5<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> SVector<f64, N>,
    y0: SVector<f64, N>,
    t_end: f64,
    tol: f64,
) -> SVector<f64, N> {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut t: f64 = 0.0;
    let mut y = y0;
    let mut h: f64 = 1e-3;
    while t < t_end {
        h = h.min(t_end - t);
        let mut k = [SVector::<f64, N>::zeros(); 7];
        for i in 0..7 {
            let mut yi = y;
            for j in 0..i {
                yi += k[j] * (h * A[i][j]);
            }
            k[i] = f(&yi);
        }
        let mut y5 = y;
        let mut y4 = y;
        for i in 0..7 {
            y5 += k[i] * (h * B5[i]);
            y4 += k[i] * (h * B4[i]);
        }
        let scale = 1.0 + y.abs().max().max(y5.abs().max());
        let err = (y5 - y4).abs().max() / (tol * scale);
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    y
}

/// `[[0, −1], [γ, −δ]]`: the linear part acting on spatially constant states.
pub fn homogeneous_a(gamma: f64, delta: f64) -> SMatrix<f64, 2, 2> {
    SMatrix::<f64, 2, 2>::new(0.0, -1.0, gamma, -delta)
}

/// Continuous adjoint `p(t)` of the homogeneous linear problem
/// `X' = A X`, `p' = −A* p + (X − r)`, `p(T) = −c₀(X(T) − x_T)`, where `A*`
/// is the adjoint in the pairing `γ v v' + w w'`.
pub fn homogeneous_adjoint(
    gamma: f64,
    delta: f64,
    x0: [f64; 2],
    reference: [f64; 2],
    c0: f64,
    target: [f64; 2],
    horizon: f64,
    t: f64,
) -> [f64; 2] {
    let a = homogeneous_a(gamma, delta);
    let weight = SMatrix::<f64, 2, 2>::new(gamma, 0.0, 0.0, 1.0);
    let a_star = weight.try_inverse().unwrap() * a.transpose() * weight;
    let x_t = (a * horizon).exp() * SVector::<f64, 2>::new(x0[0], x0[1]);
    let p_t = -(x_t - SVector::<f64, 2>::new(target[0], target[1])) * c0;

    // Y = (X, p, 1): X' = A X, p' = −A* p + X − r.
    let mut k = SMatrix::<f64, 5, 5>::zeros();
    k.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
    k.fixed_view_mut::<2, 2>(2, 2).copy_from(&(-a_star));
    k[(2, 0)] = 1.0;
    k[(3, 1)] = 1.0;
    k[(2, 4)] = -reference[0];
    k[(3, 4)] = -reference[1];
    let y_t = SVector::<f64, 5>::from_column_slice(&[x_t[0], x_t[1], p_t[0], p_t[1], 1.0]);
    let y = (k * (t - horizon)).exp() * y_t;
    [y[2], y[3]]
}
