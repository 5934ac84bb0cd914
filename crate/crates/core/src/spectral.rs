//! Differentiation matrices and band-limited interpolation on uniform
//! periodic grids.
//!
//! The Fourier matrices are the standard ones for an even number of nodes
//! (Trefethen, "Spectral Methods in MATLAB", ch. 3), rescaled from period
//! 2π to an arbitrary period L. They are exact on trigonometric polynomials
//! below the Nyquist frequency, which is what makes the grid solvers an
//! honest oracle for the trig-polynomial potential family.

use ndarray::{Array1, Array2};
use std::f64::consts::PI;

/// First-derivative Fourier differentiation matrix, period `len`, even `n`.
pub fn fourier_d1(n: usize, len: f64) -> Array2<f64> {
    assert!(n >= 2 && n % 2 == 0, "fourier_d1 requires even n >= 2");
    let h = 2.0 * PI / n as f64;
    let scale = 2.0 * PI / len;
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let diff = j as isize - k as isize;
                let sign = if diff % 2 == 0 { 1.0 } else { -1.0 };
                d[[j, k]] = scale * 0.5 * sign / (0.5 * h * diff as f64).tan();
            }
        }
    }
    d
}

/// Second-derivative Fourier differentiation matrix, period `len`, even `n`.
pub fn fourier_d2(n: usize, len: f64) -> Array2<f64> {
    assert!(n >= 2 && n % 2 == 0, "fourier_d2 requires even n >= 2");
    let h = 2.0 * PI / n as f64;
    let scale = (2.0 * PI / len).powi(2);
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            if j == k {
                d[[j, k]] = -scale * (PI * PI / (3.0 * h * h) + 1.0 / 6.0);
            } else {
                let diff = j as isize - k as isize;
                let sign = if diff % 2 == 0 { 1.0 } else { -1.0 };
                d[[j, k]] = -scale * sign * 0.5 / (0.5 * h * diff as f64).sin().powi(2);
            }
        }
    }
    d
}

/// Second-order centered finite-difference first derivative, periodic.
pub fn fd2_d1(n: usize, len: f64) -> Array2<f64> {
    assert!(n >= 3);
    let dx = len / n as f64;
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        d[[j, (j + 1) % n]] = 0.5 / dx;
        d[[j, (j + n - 1) % n]] = -0.5 / dx;
    }
    d
}

/// Second-order centered finite-difference second derivative, periodic.
pub fn fd2_d2(n: usize, len: f64) -> Array2<f64> {
    assert!(n >= 3);
    let dx2 = (len / n as f64).powi(2);
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        d[[j, j]] = -2.0 / dx2;
        d[[j, (j + 1) % n]] = 1.0 / dx2;
        d[[j, (j + n - 1) % n]] = 1.0 / dx2;
    }
    d
}

/// Uniform periodic nodes j·len/n on [0, len).
pub fn nodes(n: usize, len: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|j| j as f64 * len / n as f64))
}

/// Band-limited (Dirichlet-kernel) interpolation of nodal values at `x`.
///
/// Exact for trigonometric polynomials resolved by the grid; wraps `x`
/// into the fundamental period, so no extrapolation can occur.
pub fn trig_interp(vals: &[f64], len: f64, x: f64) -> f64 {
    let n = vals.len();
    assert!(n >= 2);
    let h = len / n as f64;
    let mut acc = 0.0;
    for (j, &v) in vals.iter().enumerate() {
        let t = x - j as f64 * h;
        let s = PI * t / len;
        // s ≡ 0 (mod π) means x sits on node j
        let m = (s / PI).round();
        if (s - m * PI).abs() < 1e-13 {
            return v;
        }
        let kernel = if n % 2 == 0 {
            (n as f64 * s).sin() / (n as f64 * s.tan())
        } else {
            (n as f64 * s).sin() / (n as f64 * s.sin())
        };
        acc += v * kernel;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fourier_matrices_exact_on_resolved_modes() {
        let n = 16;
        let len = 1.0;
        let d1 = fourier_d1(n, len);
        let d2 = fourier_d2(n, len);
        let xs = nodes(n, len);
        let k = 3.0 * 2.0 * PI / len;
        let f = xs.mapv(|x| (k * x).cos());
        let df = d1.dot(&f);
        let ddf = d2.dot(&f);
        for j in 0..n {
            assert_abs_diff_eq!(df[j], -k * (k * xs[j]).sin(), epsilon = 1e-10);
            assert_abs_diff_eq!(ddf[j], -k * k * (k * xs[j]).cos(), epsilon = 1e-8);
        }
    }

    #[test]
    fn matrices_annihilate_constants() {
        for (d, name) in [
            (fourier_d1(12, 2.0), "fourier_d1"),
            (fourier_d2(12, 2.0), "fourier_d2"),
            (fd2_d1(12, 2.0), "fd2_d1"),
            (fd2_d2(12, 2.0), "fd2_d2"),
        ] {
            let ones = Array1::ones(12);
            let r = d.dot(&ones);
            let scale = d.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            for &v in r.iter() {
                assert!(v.abs() <= 1e-11 * scale.max(1.0), "{name}: {v}");
            }
        }
    }

    #[test]
    fn fd2_converges_at_order_two() {
        let len = 1.0;
        let f = |x: f64| (2.0 * PI * x).cos();
        let fp = |x: f64| -2.0 * PI * (2.0 * PI * x).sin();
        let err = |n: usize| {
            let d = fd2_d1(n, len);
            let xs = nodes(n, len);
            let fv = xs.mapv(f);
            let dv = d.dot(&fv);
            (0..n).map(|j| (dv[j] - fp(xs[j])).abs()).fold(0.0f64, f64::max)
        };
        let order = (err(32) / err(64)).log2();
        assert!(order > 1.9 && order < 2.1, "order {order}");
    }

    #[test]
    fn interpolation_reproduces_band_limited_data() {
        let n = 16;
        let len = 1.0;
        let xs = nodes(n, len);
        let f = |x: f64| (2.0 * PI * x).sin() + 0.3 * (3.0 * 2.0 * PI * x).cos();
        let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        for &x in &[0.0, 0.111, 0.5, 0.73, 0.999, 1.3, -0.2] {
            let wrapped = x - (x / len).floor() * len;
            assert_abs_diff_eq!(trig_interp(&vals, len, x), f(wrapped), epsilon = 1e-11);
        }
    }
}
