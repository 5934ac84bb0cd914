//! Grid discretization of the generators on the periodic (q,z) tensor grid
//! (d = 1, overdamped case): stationary densities, spectra, the first-order
//! invariant-measure correction, Poisson solves and asymptotic variances.
//!
//! Conventions: node index k = iz·n_q + iq, so the fast generator is block
//! diagonal over z slices. All adjoints are the weighted-matrix adjoint
//! T* = D⁻¹ Tᵀ D with D = diag(ν_ref quadrature weights), which satisfies
//! ⟨Tf, g⟩_w = ⟨f, T*g⟩_w exactly by construction. Singular solves impose
//! zero-mean side conditions through bordered systems, never pseudo-inverses.

use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Eig, Solve};
use num_complex::Complex64;

use crate::error::{Result, TamdError};
use crate::freenergy::{FluctuationField, FreeEnergyProfile};
use crate::model::{Domain, Potential, TamdParams};
use crate::spectral;

pub const MAX_DENSE_DIM: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Spectral,
    Fd2,
}

impl std::str::FromStr for Scheme {
    type Err = TamdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Scheme::Spectral),
            "fd2" => Ok(Scheme::Fd2),
            other => Err(TamdError::Config(format!("unknown scheme '{other}' (spectral | fd2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub n_q: usize,
    pub n_z: usize,
    pub scheme: Scheme,
}

impl GridSpec {
    pub fn new(n_q: usize, n_z: usize, scheme: Scheme) -> Result<Self> {
        let spec = GridSpec { n_q, n_z, scheme };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q < 8 || self.n_z < 8 {
            return Err(TamdError::Config(format!(
                "grid: n_q, n_z must be >= 8, got ({}, {})",
                self.n_q, self.n_z
            )));
        }
        if self.scheme == Scheme::Spectral && (self.n_q % 2 != 0 || self.n_z % 2 != 0) {
            return Err(TamdError::Config("grid: spectral scheme requires even n_q and n_z".into()));
        }
        if self.n_q * self.n_z > MAX_DENSE_DIM {
            return Err(TamdError::Config(format!(
                "grid: n_q*n_z = {} exceeds the dense-solve guard {}",
                self.n_q * self.n_z,
                MAX_DENSE_DIM
            )));
        }
        Ok(())
    }
}

/// Quadrature data shared by every operator on one grid.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    pub domain: Domain,
    pub q_nodes: Vec<f64>,
    pub z_nodes: Vec<f64>,
    /// ν_ref weights per node (cell volume included), normalized to sum 1.
    pub weights: Array1<f64>,
    /// z-marginal weights (row sums of `weights`), ≈ e^{−β̄A}Δz.
    pub wbar: Array1<f64>,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.spec.n_q * self.spec.n_z
    }

    #[inline]
    pub fn idx(&self, iq: usize, iz: usize) -> usize {
        iz * self.spec.n_q + iq
    }

    /// Weighted L² norm sqrt(Σ w f²).
    pub fn norm_w(&self, f: &Array1<f64>) -> f64 {
        f.iter().zip(self.weights.iter()).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    pub fn mean_w(&self, f: &Array1<f64>) -> f64 {
        f.iter().zip(self.weights.iter()).map(|(v, w)| w * v).sum()
    }

    pub fn norm_wbar(&self, f: &Array1<f64>) -> f64 {
        f.iter().zip(self.wbar.iter()).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    pub fn mean_wbar(&self, f: &Array1<f64>) -> f64 {
        f.iter().zip(self.wbar.iter()).map(|(v, w)| w * v).sum()
    }

    /// Conditional ν_{ref,z} average over q at every z node.
    pub fn project_z(&self, field: &Array1<f64>) -> Array1<f64> {
        let n_q = self.spec.n_q;
        let mut out = Array1::zeros(self.spec.n_z);
        for iz in 0..self.spec.n_z {
            let mut acc = 0.0;
            for iq in 0..n_q {
                let k = self.idx(iq, iz);
                acc += self.weights[k] * field[k];
            }
            out[iz] = acc / self.wbar[iz];
        }
        out
    }

    /// Constant-in-q extension of a z-grid function.
    pub fn lift_z(&self, zfield: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.n());
        for iz in 0..self.spec.n_z {
            for iq in 0..self.spec.n_q {
                out[self.idx(iq, iz)] = zfield[iz];
            }
        }
        out
    }

    /// Evaluates a function of (q, z) on all nodes.
    pub fn eval_on_nodes(&self, f: impl Fn(f64, f64) -> f64) -> Array1<f64> {
        let mut out = Array1::zeros(self.n());
        for iz in 0..self.spec.n_z {
            for iq in 0..self.spec.n_q {
                out[self.idx(iq, iz)] = f(self.q_nodes[iq], self.z_nodes[iz]);
            }
        }
        out
    }

    /// Flattens an (n_q × n_z) field into node ordering.
    pub fn flatten(&self, field: &Array2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.n());
        for iz in 0..self.spec.n_z {
            for iq in 0..self.spec.n_q {
                out[self.idx(iq, iz)] = field[[iq, iz]];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActsOn {
    Full,
    ZOnly,
}

/// Matrix representation of a generator together with the quadrature
/// weights defining its weighted adjoint.
#[derive(Debug, Clone)]
pub struct GridOperator {
    pub matrix: Array2<f64>,
    pub weights: Array1<f64>,
    pub acts_on: ActsOn,
}

impl GridOperator {
    fn check_annihilates_constants(&self) -> Result<()> {
        let n = self.matrix.nrows();
        let norm_inf = self.matrix.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for j in 0..n {
            worst = worst.max(self.matrix.row(j).sum().abs());
        }
        if worst > 1e-10 * norm_inf.max(1.0) {
            return Err(TamdError::Solver(format!(
                "generator does not annihilate constants: |M·1|_inf = {worst:e}"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, f: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(f)
    }
}

/// T* = D⁻¹ Tᵀ D with D = diag(weights); an involution.
pub fn adjoint(op: &GridOperator) -> GridOperator {
    let n = op.matrix.nrows();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = op.matrix[[j, i]] * op.weights[j] / op.weights[i];
        }
    }
    GridOperator { matrix: m, weights: op.weights.clone(), acts_on: op.acts_on }
}

/// The discrete generators 𝓛₀, 𝓛₁, 𝓛_δ on the full grid and 𝒜 on the
/// z-grid, plus the grid quadrature data.
pub struct Generators {
    pub l0: GridOperator,
    pub l1: GridOperator,
    pub ldelta: GridOperator,
    pub a_op: GridOperator,
    pub grid: Grid,
    pub beta: f64,
    pub beta_bar: f64,
}

impl Generators {
    /// 𝓛_δ = δ⁻¹𝓛₀ + 𝓛₁ for an arbitrary δ, reusing the assembled blocks.
    pub fn ldelta_for(&self, delta: f64) -> GridOperator {
        let m = &self.l0.matrix * (1.0 / delta) + &self.l1.matrix;
        GridOperator { matrix: m, weights: self.grid.weights.clone(), acts_on: ActsOn::Full }
    }
}

/// Discretizes the overdamped generators on the tensor grid.
///
/// 𝓛₀ = −∂_qU·∂_q + β⁻¹∂²_q (block diagonal over z), 𝓛₁ = −∂_zU·∂_z +
/// β̄⁻¹∂²_z, 𝒜 = −A'·∂_z + β̄⁻¹∂²_z; ν_ref weights come from the
/// free-energy profile.
pub fn build_generators(
    pot: &Potential,
    domain: &Domain,
    profile: &FreeEnergyProfile,
    params: &TamdParams,
    spec: GridSpec,
) -> Result<Generators> {
    spec.validate()?;
    if domain.d != 1 {
        return Err(TamdError::Config("grid generators require d = 1".into()));
    }
    if profile.n_z() != spec.n_z || (profile.lz - domain.lz).abs() > 1e-12 {
        return Err(TamdError::Config(format!(
            "profile z-grid ({} nodes, period {}) does not match grid spec ({} nodes, period {})",
            profile.n_z(),
            profile.lz,
            spec.n_z,
            domain.lz
        )));
    }
    let (n_q, n_z) = (spec.n_q, spec.n_z);
    let n = n_q * n_z;
    let beta = params.beta;
    let beta_bar = params.beta_bar;

    let (dq1, dq2, dz1, dz2) = match spec.scheme {
        Scheme::Spectral => (
            spectral::fourier_d1(n_q, domain.lq),
            spectral::fourier_d2(n_q, domain.lq),
            spectral::fourier_d1(n_z, domain.lz),
            spectral::fourier_d2(n_z, domain.lz),
        ),
        Scheme::Fd2 => (
            spectral::fd2_d1(n_q, domain.lq),
            spectral::fd2_d2(n_q, domain.lq),
            spectral::fd2_d1(n_z, domain.lz),
            spectral::fd2_d2(n_z, domain.lz),
        ),
    };

    let q_nodes: Vec<f64> = (0..n_q).map(|i| i as f64 * domain.lq / n_q as f64).collect();
    let z_nodes = profile.z_nodes.clone();

    // potential derivatives and log-weights on all nodes
    let mut du_q = Array1::zeros(n);
    let mut du_z = Array1::zeros(n);
    let mut logw = Array1::zeros(n);
    for iz in 0..n_z {
        let z = z_nodes[iz];
        for iq in 0..n_q {
            let k = iz * n_q + iq;
            let der = pot.derivatives(domain, &[q_nodes[iq]], z);
            du_q[k] = der.grad_q[0];
            du_z[k] = der.dz;
            logw[k] =
                -beta * pot.evaluate(domain, &[q_nodes[iq]], z) - (beta_bar - beta) * profile.a[iz];
        }
    }
    let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = logw.mapv(|v| (v - lmax).exp());
    let total: f64 = weights.sum();
    weights.mapv_inplace(|v| v / total);
    let mut wbar = Array1::zeros(n_z);
    for iz in 0..n_z {
        let mut acc = 0.0;
        for iq in 0..n_q {
            acc += weights[iz * n_q + iq];
        }
        wbar[iz] = acc;
    }

    // L0: block diagonal over z
    let mut l0 = Array2::zeros((n, n));
    for iz in 0..n_z {
        for iq in 0..n_q {
            let row = iz * n_q + iq;
            for jq in 0..n_q {
                l0[[row, iz * n_q + jq]] =
                    -du_q[row] * dq1[[iq, jq]] + dq2[[iq, jq]] / beta;
            }
        }
    }

    // L1: couples z at fixed q
    let mut l1 = Array2::zeros((n, n));
    for iz in 0..n_z {
        for iq in 0..n_q {
            let row = iz * n_q + iq;
            for jz in 0..n_z {
                l1[[row, jz * n_q + iq]] =
                    -du_z[row] * dz1[[iz, jz]] + dz2[[iz, jz]] / beta_bar;
            }
        }
    }

    let ldelta = &l0 * (1.0 / params.delta) + &l1;

    let mut a_mat = Array2::zeros((n_z, n_z));
    for iz in 0..n_z {
        for jz in 0..n_z {
            a_mat[[iz, jz]] = -profile.a1[iz] * dz1[[iz, jz]] + dz2[[iz, jz]] / beta_bar;
        }
    }

    let grid = Grid { spec, domain: *domain, q_nodes, z_nodes, weights: weights.clone(), wbar: wbar.clone() };
    let gens = Generators {
        l0: GridOperator { matrix: l0, weights: weights.clone(), acts_on: ActsOn::Full },
        l1: GridOperator { matrix: l1, weights: weights.clone(), acts_on: ActsOn::Full },
        ldelta: GridOperator { matrix: ldelta, weights, acts_on: ActsOn::Full },
        a_op: GridOperator { matrix: a_mat, weights: wbar, acts_on: ActsOn::ZOnly },
        grid,
        beta,
        beta_bar,
    };
    gens.l0.check_annihilates_constants()?;
    gens.l1.check_annihilates_constants()?;
    gens.ldelta.check_annihilates_constants()?;
    gens.a_op.check_annihilates_constants()?;
    Ok(gens)
}

/// Solves the bordered system [[M, col],[rowᵀ, 0]]·[x; μ] = [b; c] with one
/// round of iterative refinement, returning (x, μ).
fn bordered_solve(
    mat: &Array2<f64>,
    col: &Array1<f64>,
    row: &Array1<f64>,
    b: &Array1<f64>,
    c: f64,
) -> Result<(Array1<f64>, f64)> {
    let n = mat.nrows();
    let mut big = Array2::zeros((n + 1, n + 1));
    big.slice_mut(s![..n, ..n]).assign(mat);
    big.slice_mut(s![..n, n]).assign(col);
    big.slice_mut(s![n, ..n]).assign(row);
    let mut rhs = Array1::zeros(n + 1);
    rhs.slice_mut(s![..n]).assign(b);
    rhs[n] = c;

    use ndarray_linalg::Factorize;
    let lu = big
        .factorize()
        .map_err(|e| TamdError::Solver(format!("bordered solve failed (singular system?): {e}")))?;
    let mut x = lu
        .solve_into(rhs.clone())
        .map_err(|e| TamdError::Solver(format!("bordered solve failed: {e}")))?;
    // refinement passes tighten the residual when the operator norm is large
    for _ in 0..2 {
        let resid = &rhs - &big.dot(&x);
        if let Ok(dx) = lu.solve_into(resid) {
            x = &x + &dx;
        }
    }
    let mu = x[n];
    Ok((x.slice(s![..n]).to_owned(), mu))
}

/// Density of ν_δ with respect to ν_ref at grid level.
#[derive(Debug, Clone)]
pub struct StationarySolution {
    pub h_delta: Array1<f64>,
    pub residual_norm: f64,
    pub normalization: f64,
}

/// Solves 𝓛_δ* h = 0 with the normalization ∫h dν_ref = 1 through a
/// bordered system; positivity and the residual bound are asserted.
pub fn stationary_density(ldelta: &GridOperator, grid: &Grid) -> Result<StationarySolution> {
    let lstar = adjoint(ldelta);
    let ones = Array1::ones(grid.n());
    let (h, _mu) = bordered_solve(&lstar.matrix, &ones, &grid.weights, &Array1::zeros(grid.n()), 1.0)?;
    let normalization = grid.mean_w(&h);
    if (normalization - 1.0).abs() > 1e-12 {
        return Err(TamdError::Solver(format!(
            "stationary density normalization off by {:e}",
            normalization - 1.0
        )));
    }
    if h.iter().any(|&v| v <= 0.0) {
        return Err(TamdError::Solver(
            "stationary density has non-positive nodes; grid too coarse".into(),
        ));
    }
    let residual_norm = grid.norm_w(&lstar.apply(&h));
    // 1e-9 absolute, loosened only once ε·‖L‖ makes that floor physically
    // unreachable in double precision (δ⁻¹ scalings push ‖L‖ beyond 1e7)
    let opnorm = lstar
        .matrix
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let tol = (1e-15 * opnorm).max(1e-9);
    if residual_norm > tol {
        return Err(TamdError::Solver(format!(
            "stationary residual |L* h|_w = {residual_norm:e} exceeds {tol:e}"
        )));
    }
    Ok(StationarySolution { h_delta: h, residual_norm, normalization })
}

/// Full-spectrum summary of 𝓛_δ* together with the limiting-dynamics rate.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    /// min over nonzero eigenvalues of −Re spec(𝓛_δ*)
    pub gap: f64,
    /// λ = R²_β̄ / β̄
    pub lambda_ref: f64,
    /// Poincaré constant squared of the free-energy marginal, R²_β̄ = β̄·gap(−𝒜)
    pub r2_marginal: f64,
    pub eigen_count: usize,
    pub zero_multiplicity: usize,
    pub eigenvalues: Vec<Complex64>,
}

/// Spectral gap of 𝒜 on the z-grid (eigenvalues are real up to quadrature
/// error since −𝒜 is self-adjoint in ν̄_ref).
pub fn a_op_gap(a_op: &GridOperator) -> Result<f64> {
    let (vals, _vecs): (Array1<Complex64>, Array2<Complex64>) = a_op
        .matrix
        .eig()
        .map_err(|e| TamdError::Solver(format!("z-grid eigensolve failed: {e}")))?;
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let tol = 1e-10 * scale.max(1.0);
    let mut gap = f64::INFINITY;
    for v in vals.iter() {
        let decay = -v.re;
        if decay > tol && decay < gap {
            gap = decay;
        }
    }
    if !gap.is_finite() {
        return Err(TamdError::Solver("no nonzero eigenvalue found for the z-generator".into()));
    }
    Ok(gap)
}

/// Dense eigensolve of 𝓛_δ*; complex pairs allowed (the dynamics is
/// non-reversible for β̄ ≠ β).
pub fn spectral_report(
    ldelta: &GridOperator,
    a_op: &GridOperator,
    beta_bar: f64,
) -> Result<SpectralReport> {
    let lstar = adjoint(ldelta);
    let (vals, _vecs): (Array1<Complex64>, Array2<Complex64>) = lstar
        .matrix
        .eig()
        .map_err(|e| TamdError::Solver(format!("full eigensolve failed: {e}")))?;
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let tol = 1e-10 * scale.max(1.0);
    let zero_multiplicity = vals.iter().filter(|v| v.norm() <= tol).count();
    if zero_multiplicity != 1 {
        return Err(TamdError::Solver(format!(
            "ambiguous zero cluster: {zero_multiplicity} eigenvalues within {tol:e} of 0"
        )));
    }
    let mut gap = f64::INFINITY;
    for v in vals.iter() {
        if v.norm() <= tol {
            continue;
        }
        gap = gap.min(-v.re);
    }
    if !(gap > 0.0) {
        return Err(TamdError::Solver(format!(
            "nonpositive spectral gap {gap}: spectrum crosses the imaginary axis"
        )));
    }
    let gap_a = a_op_gap(a_op)?;
    let r2_marginal = beta_bar * gap_a;
    Ok(SpectralReport {
        gap,
        lambda_ref: r2_marginal / beta_bar,
        r2_marginal,
        eigen_count: vals.len(),
        zero_multiplicity,
        eigenvalues: vals.to_vec(),
    })
}

/// Per-slice solve of a z-parametrized fast-generator equation under the
/// zero-conditional-mean constraint.
fn slice_solves(
    block_source: &Array2<f64>,
    grid: &Grid,
    rhs: &Array1<f64>,
) -> Result<Array1<f64>> {
    let n_q = grid.spec.n_q;
    let mut out = Array1::zeros(grid.n());
    let ones = Array1::ones(n_q);
    for iz in 0..grid.spec.n_z {
        let lo = iz * n_q;
        let block = block_source.slice(s![lo..lo + n_q, lo..lo + n_q]).to_owned();
        let mut wslice = grid.weights.slice(s![lo..lo + n_q]).to_owned();
        let sum: f64 = wslice.sum();
        wslice.mapv_inplace(|v| v / sum);
        let b = rhs.slice(s![lo..lo + n_q]).to_owned();
        let (x, _mu) = bordered_solve(&block, &ones, &wslice, &b, 0.0)
            .map_err(|_| TamdError::Solver(format!("singular slice solve at z index {iz}")))?;
        out.slice_mut(s![lo..lo + n_q]).assign(&x);
    }
    Ok(out)
}

/// Solve of the z-generator on mean-zero functions of ν̄_ref.
fn z_solve(a_op: &GridOperator, grid: &Grid, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let ones = Array1::ones(grid.spec.n_z);
    let (x, _mu) = bordered_solve(&a_op.matrix, &ones, &grid.wbar, rhs, 0.0)
        .map_err(|_| TamdError::Solver("singular z-grid solve".into()))?;
    Ok(x)
}

/// First-order invariant-measure correction and its companions.
#[derive(Debug, Clone)]
pub struct CorrectionFields {
    /// 𝔥, the first-order correction; ∫𝔥 dν_ref = 0
    pub h_frak: Array1<f64>,
    /// h̄(z), the slow part fixed by the second solvability condition
    pub h_bar: Array1<f64>,
    /// 𝔥̃, the second-order correction
    pub h_tilde: Array1<f64>,
    /// G(z) = Π_z 𝓛₁*(𝓛₀*)⁻¹ g₁; zero ν̄_ref average
    pub g_field: Array1<f64>,
    /// weighted distance between the hierarchy and closed-form constructions
    pub construction_gap: f64,
}

impl Generators {
    /// Builds 𝔥, h̄, 𝔥̃ and G from the fluctuation field, cross-checking the
    /// two-step hierarchy against the closed-form operator expression (the
    /// latter evaluated entirely with the discrete adjoints, including a
    /// discrete g₁ = 𝓛₁*𝟏).
    pub fn correction_fields(&self, field: &FluctuationField) -> Result<CorrectionFields> {
        let grid = &self.grid;
        let g1 = grid.flatten(&field.g1);

        // solvability: Π_z g1 = 0
        let pg = grid.project_z(&g1);
        let worst = pg.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if worst > 1e-8 {
            return Err(TamdError::Guard(format!(
                "solvability violated: max_z |Pi_z g1| = {worst:e} (> 1e-8)"
            )));
        }

        let l0star = adjoint(&self.l0);
        let l1star = adjoint(&self.l1);

        // route A: the two-step hierarchy with the analytic g1
        let u = slice_solves(&l0star.matrix, grid, &g1)?;
        let g_field = grid.project_z(&l1star.apply(&u));
        let gbar = grid.mean_wbar(&g_field);
        if gbar.abs() > 1e-8 {
            return Err(TamdError::Solver(format!(
                "G(z) should have zero marginal average, got {gbar:e}"
            )));
        }
        let h_bar = z_solve(&self.a_op, grid, &g_field)?;
        let h_frak = &grid.lift_z(&h_bar) - &u;

        // route B: closed-form expression with the discrete g1 = L1* 1
        let g1_disc = l1star.apply(&Array1::ones(grid.n()));
        let g1_disc = &g1_disc - &grid.lift_z(&grid.project_z(&g1_disc));
        let u_b = slice_solves(&l0star.matrix, grid, &g1_disc)?;
        let g_b = grid.project_z(&l1star.apply(&u_b));
        let y_b = z_solve(&self.a_op, grid, &g_b)?;
        let h_frak_b = &grid.lift_z(&y_b) - &u_b;

        let construction_gap = grid.norm_w(&(&h_frak - &h_frak_b));
        if construction_gap > 1e-8 {
            return Err(TamdError::Solver(format!(
                "correction constructions disagree: |h_A - h_B|_w = {construction_gap:e}"
            )));
        }

        let mean = grid.mean_w(&h_frak);
        if mean.abs() > 1e-9 {
            return Err(TamdError::Solver(format!("h_frak should have zero mean, got {mean:e}")));
        }

        // second-order term from the hierarchy
        let r = l1star.apply(&h_frak);
        let r = &r - &grid.lift_z(&grid.project_z(&r));
        let h_tilde = slice_solves(&l0star.matrix, grid, &r.mapv(|v| -v))?;

        Ok(CorrectionFields { h_frak, h_bar, h_tilde, g_field, construction_gap })
    }

    /// Weighted norm of 𝓛_δ*(1 + δ𝔥 + δ²𝔥̃) − δ²𝓛₁*𝔥̃, which vanishes
    /// identically for the exact hierarchy.
    pub fn residual_identity(&self, cf: &CorrectionFields, delta: f64) -> f64 {
        let grid = &self.grid;
        let ld = self.ldelta_for(delta);
        let lstar = adjoint(&ld);
        let l1star = adjoint(&self.l1);
        let expansion = Array1::ones(grid.n())
            + &(cf.h_frak.mapv(|v| delta * v))
            + &(cf.h_tilde.mapv(|v| delta * delta * v));
        let lhs = lstar.apply(&expansion);
        let rhs = l1star.apply(&cf.h_tilde).mapv(|v| delta * delta * v);
        grid.norm_w(&(&lhs - &rhs))
    }
}

/// Crank–Nicolson evolution of ∂_t f = 𝓛_δ* f with a two-half-step implicit
/// Euler startup (Rannacher smoothing) to damp unresolved stiff content.
/// Returns (t, ‖f(t) − h_δ‖_w) at every step.
pub fn propagate(
    ldelta: &GridOperator,
    grid: &Grid,
    f0: &Array1<f64>,
    t_final: f64,
    dt_pde: f64,
) -> Result<Vec<(f64, f64)>> {
    let mean0 = grid.mean_w(f0);
    if (mean0 - 1.0).abs() > 1e-8 {
        return Err(TamdError::Guard(format!(
            "propagate: f0 must have weighted mean 1, got {mean0}"
        )));
    }
    let stat = stationary_density(ldelta, grid)?;
    let lstar = adjoint(ldelta);
    let n = grid.n();
    let eye = Array2::eye(n);

    let dist = |f: &Array1<f64>| grid.norm_w(&(f - &stat.h_delta));

    let mut f = f0.clone();
    let mut series = Vec::new();
    series.push((0.0, dist(&f)));

    // startup: two implicit Euler half steps
    let be = &eye - &(&lstar.matrix * (0.5 * dt_pde));
    for _ in 0..2 {
        f = be
            .solve(&f)
            .map_err(|e| TamdError::Solver(format!("startup linear solve failed: {e}")))?;
    }
    series.push((dt_pde, dist(&f)));

    let m_impl = &eye - &(&lstar.matrix * (0.5 * dt_pde));
    let m_expl = &eye + &(&lstar.matrix * (0.5 * dt_pde));
    use ndarray_linalg::Factorize;
    let lu = m_impl
        .factorize()
        .map_err(|e| TamdError::Solver(format!("Crank-Nicolson factorization failed: {e}")))?;
    let n_steps = ((t_final / dt_pde).round() as usize).max(2);
    let mut t = dt_pde;
    for _ in 1..n_steps {
        let rhs = m_expl.dot(&f);
        f = lu
            .solve_into(rhs)
            .map_err(|e| TamdError::Solver(format!("Crank-Nicolson solve failed: {e}")))?;
        t += dt_pde;
        let m = grid.mean_w(&f);
        // round-off accumulates linearly in the step count; 1e-13 per step
        // keeps the guard well above f64 noise yet far below any real leak
        let drift_tol = 1e-10_f64.max(1e-13 * (t / dt_pde));
        if (m - 1.0).abs() > drift_tol {
            return Err(TamdError::Solver(format!(
                "propagate: weighted mean drifted to {m} at t = {t}"
            )));
        }
        series.push((t, dist(&f)));
    }
    Ok(series)
}

/// Exponential decay rate fitted on the tail of a propagate series.
pub fn fit_decay_rate(series: &[(f64, f64)], tail_fraction: f64) -> Result<f64> {
    let usable: Vec<(f64, f64)> =
        series.iter().filter(|&&(_, d)| d > 1e-13).cloned().collect();
    let skip = ((usable.len() as f64) * (1.0 - tail_fraction)) as usize;
    let tail = &usable[skip.min(usable.len().saturating_sub(3))..];
    if tail.len() < 3 {
        return Err(TamdError::Solver("decay series too short to fit a rate".into()));
    }
    let xs: Vec<f64> = tail.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys.iter()).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(-sxy / sxx)
}

/// Solves the Poisson equation −𝓛_δ Φ = P_δφ with ∫Φ dν_ref = 0 and
/// assembles the asymptotic variance σ² = 2∫(P_δφ)·Φ·h_δ dν_ref.
pub fn poisson_solve(
    ldelta: &GridOperator,
    h_delta: &Array1<f64>,
    phi: &Array1<f64>,
    grid: &Grid,
) -> Result<(Array1<f64>, f64)> {
    let mean_delta: f64 = phi
        .iter()
        .zip(h_delta.iter())
        .zip(grid.weights.iter())
        .map(|((p, h), w)| p * h * w)
        .sum();
    let pphi = phi.mapv(|v| v - mean_delta);
    let neg_l = ldelta.matrix.mapv(|v| -v);
    let ones = Array1::ones(grid.n());
    let (big_phi, _mu) = bordered_solve(&neg_l, &ones, &grid.weights, &pphi, 0.0)?;
    let sigma2: f64 = 2.0
        * pphi
            .iter()
            .zip(big_phi.iter())
            .zip(h_delta.iter())
            .zip(grid.weights.iter())
            .map(|(((p, f), h), w)| p * f * h * w)
            .sum::<f64>();
    if sigma2 < -1e-10 {
        return Err(TamdError::Solver(format!("asymptotic variance came out negative: {sigma2}")));
    }
    Ok((big_phi, sigma2.max(0.0)))
}

/// σ²_ref = 2∫(Π_z P₀φ)(−𝒜⁻¹ Π_z P₀φ) dν̄_ref for the reference dynamics.
pub fn reference_variance(a_op: &GridOperator, phi: &Array1<f64>, grid: &Grid) -> Result<f64> {
    let p0 = phi.mapv(|v| v - grid.mean_w(phi));
    let g = grid.project_z(&p0);
    let neg_a = a_op.matrix.mapv(|v| -v);
    let ones = Array1::ones(grid.spec.n_z);
    let (y, _mu) = bordered_solve(&neg_a, &ones, &grid.wbar, &g, 0.0)?;
    let sigma2: f64 =
        2.0 * g.iter().zip(y.iter()).zip(grid.wbar.iter()).map(|((a, b), w)| a * b * w).sum::<f64>();
    if sigma2 < -1e-10 {
        return Err(TamdError::Solver(format!("reference variance came out negative: {sigma2}")));
    }
    Ok(sigma2.max(0.0))
}

/// Leading terms Ψ(z) and ψ(q,z) of the Poisson-solution expansion
/// Φ_δ ≈ Ψ + δψ.
pub fn approx_poisson(
    gens: &Generators,
    phi: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let grid = &gens.grid;
    let p0 = phi.mapv(|v| v - grid.mean_w(phi));
    let gz = grid.project_z(&p0);
    // Ψ = −𝒜⁻¹ Π_z P₀φ  ⇔  𝒜Ψ = −Π_z P₀φ
    let psi_bar = z_solve(&gens.a_op, grid, &gz.mapv(|v| -v))?;
    // ψ = 𝓛₀⁻¹ (1−Π_z)(−𝓛₁Ψ − P₀φ)
    let rhs = &gens.l1.apply(&grid.lift_z(&psi_bar)).mapv(|v| -v) - &p0;
    let rhs = &rhs - &grid.lift_z(&grid.project_z(&rhs));
    let psi = slice_solves(&gens.l0.matrix, grid, &rhs)?;
    Ok((psi_bar, psi))
}
