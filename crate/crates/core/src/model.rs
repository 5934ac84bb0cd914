//! Periodic domains, trigonometric-polynomial potentials and the shared
//! parameter set.
//!
//! All potentials are finite trigonometric polynomials (or smooth periodic
//! compositions of them), so every derivative needed downstream is available
//! in closed form and periodic quadrature converges spectrally.

use serde::Deserialize;

use crate::error::{Result, TamdError};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Periodic product domain: q lives on (Lq·T)^d, z on Lz·T.
#[derive(Debug, Clone, Copy)]
pub struct Domain {
    pub d: usize,
    pub lq: f64,
    pub lz: f64,
}

impl Domain {
    pub fn new(d: usize, lq: f64, lz: f64) -> Result<Self> {
        if d < 1 {
            return Err(TamdError::Config("domain: d must be >= 1".into()));
        }
        if lq <= 0.0 || lz <= 0.0 {
            return Err(TamdError::Config("domain: Lq and Lz must be positive".into()));
        }
        Ok(Domain { d, lq, lz })
    }

    /// Unit torus in both coordinates, one q component.
    pub fn unit() -> Self {
        Domain { d: 1, lq: 1.0, lz: 1.0 }
    }

    pub fn wrap_q(&self, x: f64) -> f64 {
        wrap_periodic(x, self.lq)
    }

    pub fn wrap_z(&self, x: f64) -> f64 {
        wrap_periodic(x, self.lz)
    }

    /// Wraps all positional coordinates into their fundamental domains.
    /// Momenta are untouched.
    pub fn wrap(&self, mut state: State) -> State {
        for qi in &mut state.q {
            *qi = wrap_periodic(*qi, self.lq);
        }
        state.z = wrap_periodic(state.z, self.lz);
        state
    }

    /// Signed periodic distance from a to b, in (-L/2, L/2].
    pub fn dist_z(&self, a: f64, b: f64) -> f64 {
        let mut d = wrap_periodic(a - b, self.lz);
        if d > 0.5 * self.lz {
            d -= self.lz;
        }
        d
    }
}

pub fn wrap_periodic(x: f64, period: f64) -> f64 {
    let y = x - period * (x / period).floor();
    // floor can land exactly on the period for x slightly below 0
    if y >= period {
        y - period
    } else {
        y
    }
}

/// One term of a 1-periodic trigonometric polynomial:
/// a·cos(2πk x/L) + b·sin(2πk x/L).
#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
pub struct TrigTerm {
    pub freq: u32,
    pub cos_amp: f64,
    pub sin_amp: f64,
}

/// Finite trigonometric polynomial with integer frequencies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrigPoly {
    pub terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        TrigPoly { terms }
    }

    pub fn cosine(freq: u32, amp: f64) -> Self {
        TrigPoly { terms: vec![TrigTerm { freq, cos_amp: amp, sin_amp: 0.0 }] }
    }

    pub fn zero() -> Self {
        TrigPoly { terms: vec![] }
    }

    pub fn value(&self, x: f64, period: f64) -> f64 {
        let mut s = 0.0;
        for t in &self.terms {
            let a = TWO_PI * t.freq as f64 * x / period;
            s += t.cos_amp * a.cos() + t.sin_amp * a.sin();
        }
        s
    }

    /// n-th derivative, n <= 3.
    pub fn deriv(&self, x: f64, period: f64, n: u32) -> f64 {
        let mut s = 0.0;
        for t in &self.terms {
            let k = TWO_PI * t.freq as f64 / period;
            let a = k * x;
            let kn = k.powi(n as i32);
            let (c, d) = match n % 4 {
                0 => (t.cos_amp, t.sin_amp),
                1 => (t.sin_amp, -t.cos_amp),
                2 => (-t.cos_amp, -t.sin_amp),
                _ => (-t.sin_amp, t.cos_amp),
            };
            s += kn * (c * a.cos() + d * a.sin());
        }
        s
    }

    /// Upper bound on |f''| from the coefficients.
    pub fn second_deriv_bound(&self, period: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let k = TWO_PI * t.freq as f64 / period;
                k * k * (t.cos_amp.abs() + t.sin_amp.abs())
            })
            .sum()
    }

    pub fn max_freq(&self) -> u32 {
        self.terms.iter().map(|t| t.freq).max().unwrap_or(0)
    }
}

/// Potential energy U(q, z), smooth and periodic in every argument.
#[derive(Debug, Clone)]
pub enum Potential {
    /// U(q,z) = Σ_i V(q_i) + W(z). Satisfies ∂_z U = W'(z) independent of q.
    Separable { v: TrigPoly, w: TrigPoly },
    /// U(q,z) = Σ_i [ a·cos(2π q_i/Lq) + eps·cos(2π(q_i/Lq − z/Lz − phase)) ].
    TiltedCoupling { a: f64, eps: f64, phase: f64 },
    /// U(q,z) = Σ_i V(q_i) + (k/2)·(1 − cos(2π(ξ(q) − z)/Lz)) with
    /// ξ(q) = Σ_i xi(q_i); a periodicized harmonic restraint on ξ(q) − z.
    CollectiveVariable { v: TrigPoly, k: f64, xi: TrigPoly },
}

/// All partial derivatives of U required by the samplers, the mean-force
/// quadrature and the fluctuation field.
#[derive(Debug, Clone)]
pub struct PotentialDerivs {
    pub grad_q: Vec<f64>,
    pub dz: f64,
    pub dzz: f64,
    pub grad_q_dz: Vec<f64>,
}

impl Potential {
    pub fn evaluate(&self, domain: &Domain, q: &[f64], z: f64) -> f64 {
        match self {
            Potential::Separable { v, w } => {
                q.iter().map(|&qi| v.value(qi, domain.lq)).sum::<f64>() + w.value(z, domain.lz)
            }
            Potential::TiltedCoupling { a, eps, phase } => q
                .iter()
                .map(|&qi| {
                    a * (TWO_PI * qi / domain.lq).cos()
                        + eps * (TWO_PI * (qi / domain.lq - z / domain.lz - phase)).cos()
                })
                .sum(),
            Potential::CollectiveVariable { v, k, xi } => {
                let vsum: f64 = q.iter().map(|&qi| v.value(qi, domain.lq)).sum();
                let xival: f64 = q.iter().map(|&qi| xi.value(qi, domain.lq)).sum();
                let arg = TWO_PI * (xival - z) / domain.lz;
                vsum + 0.5 * k * (1.0 - arg.cos())
            }
        }
    }

    pub fn derivatives(&self, domain: &Domain, q: &[f64], z: f64) -> PotentialDerivs {
        let d = q.len();
        match self {
            Potential::Separable { v, w } => PotentialDerivs {
                grad_q: q.iter().map(|&qi| v.deriv(qi, domain.lq, 1)).collect(),
                dz: w.deriv(z, domain.lz, 1),
                dzz: w.deriv(z, domain.lz, 2),
                grad_q_dz: vec![0.0; d],
            },
            Potential::TiltedCoupling { a, eps, phase } => {
                let kq = TWO_PI / domain.lq;
                let kz = TWO_PI / domain.lz;
                let mut grad_q = Vec::with_capacity(d);
                let mut grad_q_dz = Vec::with_capacity(d);
                let mut dz = 0.0;
                let mut dzz = 0.0;
                for &qi in q {
                    let arg = TWO_PI * (qi / domain.lq - z / domain.lz - phase);
                    grad_q.push(-a * kq * (kq * qi).sin() - eps * kq * arg.sin());
                    dz += eps * kz * arg.sin();
                    dzz += -eps * kz * kz * arg.cos();
                    grad_q_dz.push(eps * kq * kz * arg.cos());
                }
                PotentialDerivs { grad_q, dz, dzz, grad_q_dz }
            }
            Potential::CollectiveVariable { v, k, xi } => {
                let kz = TWO_PI / domain.lz;
                let xival: f64 = q.iter().map(|&qi| xi.value(qi, domain.lq)).sum();
                let arg = kz * (xival - z);
                let half_k = 0.5 * k;
                // U_c = (k/2)(1 − cos(arg)), arg = 2π(ξ − z)/Lz
                let duc_dxi = half_k * kz * arg.sin();
                let dz = -duc_dxi;
                let dzz = half_k * kz * kz * arg.cos();
                let mut grad_q = Vec::with_capacity(q.len());
                let mut grad_q_dz = Vec::with_capacity(q.len());
                for &qi in q {
                    let xip = xi.deriv(qi, domain.lq, 1);
                    grad_q.push(v.deriv(qi, domain.lq, 1) + duc_dxi * xip);
                    grad_q_dz.push(-half_k * kz * kz * arg.cos() * xip);
                }
                PotentialDerivs { grad_q, dz, dzz, grad_q_dz }
            }
        }
    }

    /// Upper bound on the curvature |∂²U/∂q_i²|, used by the integrator
    /// stability guard.
    pub fn q_curvature_bound(&self, domain: &Domain) -> f64 {
        let kq = TWO_PI / domain.lq;
        match self {
            Potential::Separable { v, .. } => v.second_deriv_bound(domain.lq),
            Potential::TiltedCoupling { a, eps, .. } => kq * kq * (a.abs() + eps.abs()),
            Potential::CollectiveVariable { v, k, xi } => {
                let kz = TWO_PI / domain.lz;
                let xi1: f64 = xi
                    .terms
                    .iter()
                    .map(|t| TWO_PI * t.freq as f64 / domain.lq * (t.cos_amp.abs() + t.sin_amp.abs()))
                    .sum();
                let xi2 = xi.second_deriv_bound(domain.lq);
                v.second_deriv_bound(domain.lq) + 0.5 * k * kz * (kz * xi1 * xi1 + xi2)
            }
        }
    }

    /// Largest integer frequency appearing in the q direction.
    pub fn max_freq_q(&self) -> u32 {
        match self {
            Potential::Separable { v, .. } => v.max_freq(),
            Potential::TiltedCoupling { .. } => 1,
            Potential::CollectiveVariable { v, xi, .. } => v.max_freq().max(xi.max_freq()),
        }
    }

    pub fn max_freq_z(&self) -> u32 {
        match self {
            Potential::Separable { w, .. } => w.max_freq(),
            Potential::TiltedCoupling { .. } => 1,
            Potential::CollectiveVariable { .. } => 1,
        }
    }
}

/// Physical/artificial temperatures and integrator settings shared by the
/// samplers and the grid solvers.
#[derive(Debug, Clone)]
pub struct TamdParams {
    /// Physical inverse temperature β.
    pub beta: f64,
    /// Artificial inverse temperature β̄ (β̄ < β is the intended regime,
    /// β̄ ≥ β is accepted).
    pub beta_bar: f64,
    /// Timescale-separation parameter δ ∈ (0, 1].
    pub delta: f64,
    /// Friction γ (inertial dynamics only).
    pub gamma: f64,
    /// Scalar mass M (inertial dynamics only).
    pub mass: f64,
    pub dt: f64,
    pub n_steps: u64,
    pub stride: u64,
    pub seed: u64,
}

impl TamdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(TamdError::Config(format!("params: beta must be > 0, got {}", self.beta)));
        }
        if !(self.beta_bar > 0.0) {
            return Err(TamdError::Config(format!(
                "params: beta_bar must be > 0, got {}",
                self.beta_bar
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(TamdError::Config(format!(
                "params: delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(TamdError::Config(format!("params: gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.mass > 0.0) {
            return Err(TamdError::Config(format!("params: mass must be > 0, got {}", self.mass)));
        }
        if !(self.dt > 0.0) {
            return Err(TamdError::Config(format!("params: dt must be > 0, got {}", self.dt)));
        }
        if self.stride == 0 {
            return Err(TamdError::Config("params: stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Defaults suitable for quick desk experiments on the unit torus.
    pub fn default_for(beta: f64, beta_bar: f64, delta: f64) -> Self {
        TamdParams {
            beta,
            beta_bar,
            delta,
            gamma: 1.0,
            mass: 1.0,
            dt: 1e-3,
            n_steps: 100_000,
            stride: 10,
            seed: 0,
        }
    }
}

/// Point of the extended phase space. Momenta are present iff the dynamics
/// is inertial. Positions are kept wrapped into their fundamental domains.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub z: f64,
}

impl State {
    pub fn overdamped(q: Vec<f64>, z: f64) -> Self {
        State { q, p: None, z }
    }

    pub fn inertial(q: Vec<f64>, p: Vec<f64>, z: f64) -> Self {
        State { q, p: Some(p), z }
    }

    /// z-only state used by the limiting dynamics.
    pub fn z_only(z: f64) -> Self {
        State { q: Vec::new(), p: None, z }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tilted(a: f64, eps: f64) -> Potential {
        Potential::TiltedCoupling { a, eps, phase: 0.0 }
    }

    #[test]
    fn separable_evaluate_at_origin() {
        let pot = Potential::Separable { v: TrigPoly::cosine(1, 1.0), w: TrigPoly::zero() };
        let dom = Domain::unit();
        assert_abs_diff_eq!(pot.evaluate(&dom, &[0.0], 0.3), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tilted_evaluate_quarter() {
        // cos(π/2) + 0.5·cos(0) = 0.5
        let dom = Domain::unit();
        assert_abs_diff_eq!(tilted(1.0, 0.5).evaluate(&dom, &[0.25], 0.25), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn periodicity_is_exact() {
        let dom = Domain::unit();
        let pots = [
            Potential::Separable { v: TrigPoly::cosine(2, 0.7), w: TrigPoly::cosine(1, 1.3) },
            tilted(1.0, 0.5),
            Potential::CollectiveVariable {
                v: TrigPoly::cosine(1, 1.0),
                k: 2.0,
                xi: TrigPoly::cosine(1, 0.3),
            },
        ];
        for pot in &pots {
            let base = pot.evaluate(&dom, &[0.37], 0.81);
            assert_abs_diff_eq!(pot.evaluate(&dom, &[0.37 + 1.0], 0.81), base, epsilon = 1e-12);
            assert_abs_diff_eq!(pot.evaluate(&dom, &[0.37], 0.81 + 1.0), base, epsilon = 1e-12);
        }
    }

    #[test]
    fn separable_mixed_derivative_vanishes() {
        let pot = Potential::Separable { v: TrigPoly::cosine(1, 2.0), w: TrigPoly::cosine(2, 1.0) };
        let dom = Domain::unit();
        let der = pot.derivatives(&dom, &[0.13], 0.42);
        assert_eq!(der.grad_q_dz, vec![0.0]);
    }

    #[test]
    fn cosine_w_derivatives_at_origin() {
        let pot = Potential::Separable { v: TrigPoly::zero(), w: TrigPoly::cosine(1, 1.0) };
        let dom = Domain::unit();
        let der = pot.derivatives(&dom, &[0.0], 0.0);
        assert_abs_diff_eq!(der.dz, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(der.dzz, -4.0 * std::f64::consts::PI.powi(2), epsilon = 1e-12);
    }

    #[test]
    fn tilted_dz_at_quarter_diagonal() {
        let dom = Domain::unit();
        let der = tilted(1.0, 0.5).derivatives(&dom, &[0.25], 0.25);
        assert_abs_diff_eq!(der.dz, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn wrap_examples() {
        let dom = Domain::unit();
        let s = dom.wrap(State::overdamped(vec![1.25], -0.1));
        assert_abs_diff_eq!(s.q[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.z, 0.9, epsilon = 1e-15);
        let s2 = dom.wrap(State::overdamped(vec![0.5], 0.5));
        assert_eq!(s2.q[0], 0.5);
    }

    /// Centered finite differences as the independent oracle for every
    /// analytic derivative, with an h-halving order check.
    #[test]
    fn gradient_consistency_order_two() {
        use rand::{Rng, SeedableRng};
        let dom = Domain::unit();
        let pots = [
            Potential::Separable { v: TrigPoly::cosine(2, 1.1), w: TrigPoly::cosine(1, 0.9) },
            tilted(1.0, 0.5),
            Potential::CollectiveVariable {
                v: TrigPoly::cosine(1, 1.0),
                k: 3.0,
                xi: TrigPoly::cosine(1, 0.4),
            },
        ];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for pot in &pots {
            let mut err_h = 0.0f64;
            let mut err_h2 = 0.0f64;
            for _ in 0..1000 {
                let q = rng.gen::<f64>();
                let z = rng.gen::<f64>();
                let der = pot.derivatives(&dom, &[q], z);
                for (h, acc) in [(1e-3, &mut err_h), (5e-4, &mut err_h2)] {
                    let fd_q = (pot.evaluate(&dom, &[q + h], z) - pot.evaluate(&dom, &[q - h], z))
                        / (2.0 * h);
                    let fd_z = (pot.evaluate(&dom, &[q], z + h) - pot.evaluate(&dom, &[q], z - h))
                        / (2.0 * h);
                    let fd_zz = (pot.evaluate(&dom, &[q], z + h) - 2.0 * pot.evaluate(&dom, &[q], z)
                        + pot.evaluate(&dom, &[q], z - h))
                        / (h * h);
                    *acc = acc
                        .max((fd_q - der.grad_q[0]).abs())
                        .max((fd_z - der.dz).abs())
                        .max((fd_zz - der.dzz).abs());
                }
            }
            let order = (err_h / err_h2).log2();
            assert!(order >= 1.9, "measured order {order} for {pot:?}");
        }
    }

    #[test]
    fn params_validation_rejects_bad_delta() {
        let mut p = TamdParams::default_for(1.0, 1.0, 1.5);
        assert!(p.validate().is_err());
        p.delta = 0.5;
        assert!(p.validate().is_ok());
    }
}
