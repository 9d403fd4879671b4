//! Closed-form steady-state theory: the first-order MSD expression,
//! order-of-magnitude steady-state comparators and step-size ranges, the
//! regime classification of diffusion vs. exact diffusion, and a numeric
//! check of the fundamental decomposition of the exact-diffusion error
//! recursion.
//!
//! All big-O expressions are evaluated with their hidden constants set to
//! one; they are comparators for orderings and scaling, not certified
//! bounds.

use std::fmt;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{solve_spd_matrix, sym_eig, LinalgError, Matrix, SymMatrix};
use crate::problems::ProblemInstance;
use crate::topology::CombinationMatrix;

/// Largest agent count accepted by [`fundamental_decomposition`].
pub const MAX_DECOMPOSITION_K: usize = 1000;
/// Eigenvalues of Ā within this of 1 are treated as the consensus mode.
const UNIT_EIGENVALUE_TOL: f64 = 1e-10;

/// Exponent slack `x` and constant `d₃` in the "sufficiently small" rule
/// `μ ≤ d₃(1−λ)^{2+x}`.
pub const SMALL_STEP_EXPONENT: f64 = 1.0;
pub const SMALL_STEP_CONSTANT: f64 = 1.0;
/// Networks with `λ` at or above this count as sparsely connected.
pub const SPARSE_LAMBDA_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// `MSD = (μ/2K)·Tr[(Σ H_k)⁻¹ (Σ S_k)]`, shared by diffusion and exact
/// diffusion to first order in μ.
pub fn theoretical_msd(
    hessians: &[SymMatrix],
    noise_covs: &[SymMatrix],
    mu: f64,
    k: usize,
) -> Result<f64, TheoryError> {
    if hessians.is_empty() || hessians.len() != noise_covs.len() {
        return Err(TheoryError::InvalidInput(
            "need one Hessian and one noise covariance per agent".into(),
        ));
    }
    let m = hessians[0].dim();
    let mut h_sum = SymMatrix::zeros(m);
    let mut s_sum = SymMatrix::zeros(m);
    for (h, s) in hessians.iter().zip(noise_covs) {
        if h.dim() != m || s.dim() != m {
            return Err(TheoryError::InvalidInput("inconsistent dimensions".into()));
        }
        h_sum = h_sum.add(h);
        s_sum = s_sum.add(s);
    }
    let x = solve_spd_matrix(&h_sum, s_sum.as_matrix())?;
    let tr: f64 = (0..m).map(|i| x[(i, i)]).sum();
    Ok(mu / (2.0 * k as f64) * tr)
}

/// Order-form steady-state comparators `(exact diffusion, diffusion)`:
///
/// ```text
/// ed: μσ²/(Kν) + δ²μ²σ²/(ν²(1−λ))
/// d : μσ²/(Kν) + δ²μ²λ²σ²/(ν²(1−λ)) + δ²μ²λ²b²/(ν²(1−λ)²)
/// ```
pub fn steady_state_bounds(
    nu: f64,
    delta: f64,
    sigma_sq: f64,
    b_sq: f64,
    lambda: f64,
    mu: f64,
    k: usize,
) -> Result<(f64, f64), TheoryError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(TheoryError::InvalidInput(format!(
            "lambda must lie in [0, 1), got {lambda}"
        )));
    }
    if !(nu > 0.0) {
        return Err(TheoryError::InvalidInput(format!("nu must be positive, got {nu}")));
    }
    let gap = 1.0 - lambda;
    let first = mu * sigma_sq / (k as f64 * nu);
    let ratio = delta * delta / (nu * nu);
    let bound_ed = first + ratio * mu * mu * sigma_sq / gap;
    let l2 = lambda * lambda;
    let bound_d =
        first + ratio * mu * mu * l2 * sigma_sq / gap + ratio * mu * mu * l2 * b_sq / (gap * gap);
    Ok((bound_ed, bound_d))
}

/// Constants entering the full step-size conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepsizeConstants {
    pub c1: f64,
    pub c2: f64,
    pub e1: f64,
    pub e2: f64,
}

/// Step-size upper limits `(exact diffusion, diffusion)`.
///
/// Without constants both are the order form `(1−λ)ν/(δ² + β²_max)`.
/// With constants the denominators gain the factors
/// `32 + 16c₁c₂ + 8√(c₁c₂)` and `12 + 4e₁e₂ + √(6e₁e₂)`.
pub fn stepsize_ranges(
    nu: f64,
    delta: f64,
    beta_max_sq: f64,
    lambda: f64,
    constants: Option<StepsizeConstants>,
) -> (f64, f64) {
    let base = (1.0 - lambda) * nu / (delta * delta + beta_max_sq);
    match constants {
        None => (base, base),
        Some(c) => {
            let cc = c.c1 * c.c2;
            let ee = c.e1 * c.e2;
            (
                base / (32.0 + 16.0 * cc + 8.0 * cc.sqrt()),
                base / (12.0 + 4.0 * ee + (6.0 * ee).sqrt()),
            )
        }
    }
}

/// Output of [`fundamental_decomposition`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    /// `‖X_L‖²`
    pub c1: f64,
    /// `‖X_R‖²`
    pub c2: f64,
    /// The free scaling, fixed at `c² = K c₁`.
    pub c: f64,
    /// `|d|` for every diagonal entry of `D₁`.
    pub d1_magnitudes: Vec<f64>,
    /// `‖X D X⁻¹ − B‖_max`.
    pub residual: f64,
}

impl Decomposition {
    pub fn max_d1(&self) -> f64 {
        self.d1_magnitudes.iter().cloned().fold(0.0, f64::max)
    }
}

/// Factorises `B = [[Ā, −V], [VĀ, Ā]]` as `X D X⁻¹`.
///
/// Ā and `V = (I − Ā)^{1/2}` share an orthonormal eigenbasis `{u_j}`, so
/// `B` splits into 2×2 blocks `[[a, −s], [s·a, a]]` with `s = √(1−a)`, one
/// per eigenvalue `a` of Ā. The consensus block (`a = 1`) is the identity
/// and gives the two unit eigenvalues; every other block has eigenvalues
/// `a ± i·s·√a` of modulus `√a < 1`, which form `D₁`. Each block is
/// diagonalised with unit-norm eigenvectors `P_j`; then `X_R` and `X_L`
/// are the eigenbasis embeddings of `P_j` and `P_j⁻¹`, whose spectral
/// norms are the largest block norms. The residual is measured against a
/// directly assembled `B`.
pub fn fundamental_decomposition(
    abar: &SymMatrix,
    v: &SymMatrix,
) -> Result<Decomposition, TheoryError> {
    let k = abar.dim();
    if v.dim() != k {
        return Err(TheoryError::InvalidInput("Ā and V differ in size".into()));
    }
    if k < 2 {
        return Err(TheoryError::InvalidInput(
            "K = 1 has no non-consensus block".into(),
        ));
    }
    if k > MAX_DECOMPOSITION_K {
        return Err(TheoryError::InvalidInput(format!(
            "K = {k} exceeds the decomposition limit of {MAX_DECOMPOSITION_K}"
        )));
    }
    let eig = sym_eig(abar)?;
    let a = &eig.values;
    if (a[0] - 1.0).abs() > UNIT_EIGENVALUE_TOL || a[1] >= 1.0 - UNIT_EIGENVALUE_TOL {
        return Err(TheoryError::NumericFailure(format!(
            "expected a simple unit eigenvalue of Ā, got λ₁ = {}, λ₂ = {}",
            a[0], a[1]
        )));
    }
    if a[k - 1] <= 0.0 {
        return Err(TheoryError::NumericFailure(format!(
            "Ā must be positive definite, smallest eigenvalue {}",
            a[k - 1]
        )));
    }

    // 2×2 factorisation per mode; mode 0 is the identity block.
    let mut blocks = vec![[[Complex64::new(0.0, 0.0); 2]; 2]; k];
    blocks[0] = [
        [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
    ];
    let mut d1 = Vec::with_capacity(2 * (k - 1));
    let (mut c1, mut c2) = (0.0f64, 0.0f64);
    for j in 1..k {
        let aj = a[j];
        let s = (1.0 - aj).max(0.0).sqrt();
        let c = [
            [Complex64::new(aj, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s * aj, 0.0), Complex64::new(aj, 0.0)],
        ];
        let (z, p) = eig2(&c)?;
        let pinv = inv2(&p)?;
        c2 = c2.max(spectral_norm_sq2(&p));
        c1 = c1.max(spectral_norm_sq2(&pinv));
        d1.push(z[0].norm());
        d1.push(z[1].norm());
        // P D P⁻¹
        let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
        for r in 0..2 {
            for cc in 0..2 {
                m[r][cc] = (0..2).map(|t| p[r][t] * z[t] * pinv[t][cc]).sum();
            }
        }
        blocks[j] = m;
    }

    // Reassemble each K×K block of X D X⁻¹ as U diag(m_rc) Uᵀ.
    let u = &eig.vectors;
    let direct = [
        [abar.as_matrix().clone(), v.as_matrix().scale(-1.0)],
        [v.as_matrix().matmul(abar.as_matrix())?, abar.as_matrix().clone()],
    ];
    let mut residual = 0.0f64;
    for r in 0..2 {
        for cc in 0..2 {
            let re: Vec<f64> = blocks.iter().map(|b| b[r][cc].re).collect();
            let im: Vec<f64> = blocks.iter().map(|b| b[r][cc].im).collect();
            let rebuilt = u_diag_ut(u, &re);
            let imag = u_diag_ut(u, &im);
            residual = residual
                .max(rebuilt.max_abs_diff(&direct[r][cc]))
                .max(imag.max_abs());
        }
    }
    if !residual.is_finite() {
        return Err(TheoryError::NumericFailure("non-finite reconstruction".into()));
    }
    Ok(Decomposition {
        c1,
        c2,
        c: (k as f64 * c1).sqrt(),
        d1_magnitudes: d1,
        residual,
    })
}

fn u_diag_ut(u: &Matrix, d: &[f64]) -> Matrix {
    let k = u.rows();
    let mut out = Matrix::zeros(k, k);
    for r in 0..k {
        let ur = u.row(r);
        for c in r..k {
            let uc = u.row(c);
            let v: f64 = (0..k).map(|j| ur[j] * d[j] * uc[j]).sum();
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
    }
    out
}

type C2 = [[Complex64; 2]; 2];

/// Eigenvalues and unit-norm eigenvectors (as columns) of a 2×2 matrix
/// with distinct eigenvalues.
fn eig2(m: &C2) -> Result<([Complex64; 2], C2), TheoryError> {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr / 4.0 - det).sqrt();
    let z = [tr / 2.0 + disc, tr / 2.0 - disc];
    if (z[0] - z[1]).norm() < 1e-14 {
        return Err(TheoryError::NumericFailure(
            "repeated eigenvalue in a 2×2 mode block".into(),
        ));
    }
    let mut p = [[Complex64::new(0.0, 0.0); 2]; 2];
    for (col, &zi) in z.iter().enumerate() {
        // (m00 − z) x + m01 y = 0  ⇒  (x, y) ∝ (m01, z − m00), or use the
        // second row when the first is degenerate.
        let (x, y) = if m[0][1].norm() > 1e-300 {
            (m[0][1], zi - m[0][0])
        } else {
            (zi - m[1][1], m[1][0])
        };
        let n = (x.norm_sqr() + y.norm_sqr()).sqrt();
        p[0][col] = x / n;
        p[1][col] = y / n;
    }
    Ok((z, p))
}

fn inv2(m: &C2) -> Result<C2, TheoryError> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.norm() < 1e-300 {
        return Err(TheoryError::NumericFailure("singular eigenvector block".into()));
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Largest eigenvalue of `MᴴM`.
fn spectral_norm_sq2(m: &C2) -> f64 {
    let g00 = m[0][0].norm_sqr() + m[1][0].norm_sqr();
    let g11 = m[0][1].norm_sqr() + m[1][1].norm_sqr();
    let g01 = m[0][0].conj() * m[0][1] + m[1][0].conj() * m[1][1];
    let half_tr = 0.5 * (g00 + g11);
    let det = g00 * g11 - g01.norm_sqr();
    half_tr + (half_tr * half_tr - det).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Similar,
    DiffusionBetter,
    ExactDiffusionBetter,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Similar => "similar",
            Regime::DiffusionBetter => "diffusion-better",
            Regime::ExactDiffusionBetter => "exact-diffusion-better",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeConstants {
    pub nu: f64,
    pub delta: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub regime: Regime,
    /// Which row of the comparison table matched.
    pub row: String,
    pub network: &'static str,
    /// `ν/(Kδ²)`: moderate-step threshold on dense networks.
    pub dense_moderate_threshold: f64,
    /// `(1−λ)²σ²ν/(Kδ²b²)`: bias-dominance threshold on sparse networks
    /// (infinite when `b² = 0`).
    pub sparse_bias_threshold: f64,
    /// `d₃(1−λ)^{2+x}`: sufficiently-small threshold.
    pub small_step_threshold: f64,
}

/// Classifies which method is expected to reach the lower steady state.
pub fn classify_regime(
    b_sq: f64,
    sigma_sq: f64,
    lambda: f64,
    mu: f64,
    constants: RegimeConstants,
) -> RegimeReport {
    let RegimeConstants { nu, delta, k } = constants;
    let gap = 1.0 - lambda;
    let dense_moderate_threshold = nu / (k as f64 * delta * delta);
    let sparse_bias_threshold = if b_sq > 0.0 {
        gap * gap * sigma_sq * nu / (k as f64 * delta * delta * b_sq)
    } else {
        f64::INFINITY
    };
    let small_step_threshold = SMALL_STEP_CONSTANT * gap.powf(2.0 + SMALL_STEP_EXPONENT);
    let sparse = lambda >= SPARSE_LAMBDA_CUTOFF;
    let network = if sparse { "sparse" } else { "dense" };
    let has_bias = b_sq > 0.0;
    let noisy = sigma_sq > 0.0;

    let (regime, row) = if !noisy {
        if has_bias && lambda > 0.0 {
            (Regime::ExactDiffusionBetter, "b² ≠ 0, σ² = 0: exact diffusion removes the bias")
        } else if has_bias {
            (Regime::Similar, "b² ≠ 0, σ² = 0, λ = 0: diffusion has no bias either")
        } else {
            (Regime::Similar, "b² = 0, σ² = 0: both converge exactly")
        }
    } else if !sparse {
        if mu >= dense_moderate_threshold {
            if has_bias {
                (Regime::DiffusionBetter, "b² ≠ 0, σ² ≠ 0, dense, moderate μ")
            } else {
                (Regime::DiffusionBetter, "b² = 0, σ² ≠ 0, dense, moderate μ")
            }
        } else {
            (Regime::Similar, "σ² ≠ 0, sufficiently small μ")
        }
    } else if mu <= small_step_threshold {
        (Regime::Similar, "σ² ≠ 0, sufficiently small μ")
    } else if !has_bias {
        (Regime::Similar, "b² = 0, σ² ≠ 0, sparse, moderate μ")
    } else if mu >= sparse_bias_threshold {
        (Regime::ExactDiffusionBetter, "b² ≠ 0, σ² ≠ 0, sparse, moderate μ")
    } else {
        (Regime::Similar, "b² ≠ 0, σ² ≠ 0, sparse, bias below the noise floor")
    };

    RegimeReport {
        regime,
        row: row.to_string(),
        network,
        dense_moderate_threshold,
        sparse_bias_threshold,
        small_step_threshold,
    }
}

/// All closed-form quantities for one (problem, network, μ) triple.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub k: usize,
    pub m: usize,
    pub mu: f64,
    pub msd_theory: f64,
    pub msd_theory_db: f64,
    pub lambda: f64,
    pub lambda2: f64,
    pub lambda_k: f64,
    pub lambda_prime: f64,
    pub gap: f64,
    pub nu: f64,
    pub delta: f64,
    pub sigma_sq: f64,
    pub b_sq: f64,
    pub beta_sq_max: f64,
    /// Order-form step-size limits.
    pub mu_bound_ed: f64,
    pub mu_bound_d: f64,
    /// Limits with the decomposition constants (when available).
    pub mu_bound_ed_full: Option<f64>,
    pub mu_bound_d_full: Option<f64>,
    pub bound_ed: f64,
    pub bound_d: f64,
    pub regime: RegimeReport,
    pub decomposition: Option<Decomposition>,
    /// Stationarity of the logistic proxy minimiser, if one was used.
    pub proxy_gradient_norm: Option<f64>,
}

/// Evaluates every theoretical quantity. The decomposition is attempted
/// when requested and `2 ≤ K ≤ MAX_DECOMPOSITION_K`.
pub fn theory_report(
    problem: &ProblemInstance,
    comb: &CombinationMatrix,
    mu: f64,
    with_decomposition: bool,
) -> Result<TheoryReport, TheoryError> {
    let k = problem.k();
    if comb.k() != k {
        return Err(TheoryError::InvalidInput(format!(
            "problem has K={k}, network has K={}",
            comb.k()
        )));
    }
    let msd_theory = theoretical_msd(problem.hessians(), problem.noise_covariances(), mu, k)?;
    let lambda = comb.lambda.clamp(0.0, 1.0 - f64::EPSILON);
    let (bound_ed, bound_d) = steady_state_bounds(
        problem.nu,
        problem.delta,
        problem.sigma_sq,
        problem.b_sq,
        lambda,
        mu,
        k,
    )?;
    let (mu_bound_ed, mu_bound_d) =
        stepsize_ranges(problem.nu, problem.delta, problem.beta_sq_max, lambda, None);
    let decomposition = if with_decomposition && (2..=MAX_DECOMPOSITION_K).contains(&k) {
        Some(fundamental_decomposition(comb.abar(), comb.v())?)
    } else {
        None
    };
    let full = decomposition.as_ref().map(|d| {
        stepsize_ranges(
            problem.nu,
            problem.delta,
            problem.beta_sq_max,
            lambda,
            Some(StepsizeConstants {
                c1: d.c1,
                c2: d.c2,
                e1: 1.0,
                e2: 1.0,
            }),
        )
    });
    let regime = classify_regime(
        problem.b_sq,
        problem.sigma_sq,
        lambda,
        mu,
        RegimeConstants {
            nu: problem.nu,
            delta: problem.delta,
            k,
        },
    );
    Ok(TheoryReport {
        k,
        m: problem.m(),
        mu,
        msd_theory,
        msd_theory_db: to_db(msd_theory),
        lambda: comb.lambda,
        lambda2: comb.lambda2,
        lambda_k: comb.lambda_k,
        lambda_prime: comb.lambda_prime,
        gap: comb.spectral_gap(),
        nu: problem.nu,
        delta: problem.delta,
        sigma_sq: problem.sigma_sq,
        b_sq: problem.b_sq,
        beta_sq_max: problem.beta_sq_max,
        mu_bound_ed,
        mu_bound_d,
        mu_bound_ed_full: full.map(|f| f.0),
        mu_bound_d_full: full.map(|f| f.1),
        bound_ed,
        bound_d,
        regime,
        decomposition,
        proxy_gradient_norm: problem.proxy().map(|p| p.gradient_norm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, metropolis_weights, TopologyKind};

    fn comb(kind: TopologyKind, k: usize) -> CombinationMatrix {
        metropolis_weights(&build_graph(kind, k, None, None).unwrap()).unwrap()
    }

    #[test]
    fn msd_single_agent_identity() {
        let m = 4;
        let sigma = 0.3;
        let v = theoretical_msd(
            &[SymMatrix::identity(m)],
            &[SymMatrix::identity(m).scale(sigma)],
            0.01,
            1,
        )
        .unwrap();
        assert!((v - 0.01 * m as f64 * sigma / 2.0).abs() < 1e-15);
    }

    #[test]
    fn msd_identical_agents_symbolic() {
        let lambda = [1.0, 1.5, 2.0];
        let k = 5;
        let s = SymMatrix::new(Matrix::from_fn(3, 3, |r, c| {
            if r == c {
                1.0 + r as f64
            } else {
                0.1
            }
        }))
        .unwrap();
        let h = SymMatrix::diag(&lambda.map(|l| 2.0 * l));
        let hs = vec![h; k];
        let ss = vec![s.clone(); k];
        let mu = 0.02;
        let numeric = theoretical_msd(&hs, &ss, mu, k).unwrap();
        // (μ/2K)·Tr[(2KΛ)⁻¹ K S] = (μ/4K)·Σ S_ii/Λ_i
        let symbolic: f64 =
            mu / (4.0 * k as f64) * (0..3).map(|i| s[(i, i)] / lambda[i]).sum::<f64>();
        assert!((numeric - symbolic).abs() < 1e-12);
        let doubled = theoretical_msd(&hs, &ss, 2.0 * mu, k).unwrap();
        assert!((doubled - 2.0 * numeric).abs() < 1e-15);
    }

    #[test]
    fn msd_zero_noise_and_singular_hessian() {
        let v = theoretical_msd(&[SymMatrix::identity(2)], &[SymMatrix::zeros(2)], 0.1, 1).unwrap();
        assert_eq!(v, 0.0);
        assert!(theoretical_msd(&[SymMatrix::zeros(2)], &[SymMatrix::identity(2)], 0.1, 1).is_err());
    }

    #[test]
    fn bounds_examples() {
        let (nu, delta, s2, mu, k) = (2.0, 4.0, 3.0, 0.01, 10);
        let (ed, d) = steady_state_bounds(nu, delta, s2, 0.0, 0.6, mu, k).unwrap();
        let expected = mu * mu * s2 * delta * delta * (0.36 - 1.0) / (0.4 * nu * nu);
        assert!((d - ed - expected).abs() < 1e-15);
        assert!(d <= ed);
        let (ed0, d0) = steady_state_bounds(nu, delta, s2, 0.0, 0.0, mu, k).unwrap();
        assert!((d0 - mu * s2 / (k as f64 * nu)).abs() < 1e-18);
        assert!(ed0 > d0);
        assert!(steady_state_bounds(nu, delta, s2, 1.0, 1.0, mu, k).is_err());
        assert!(steady_state_bounds(0.0, delta, s2, 1.0, 0.5, mu, k).is_err());
    }

    #[test]
    fn bias_term_quadruples_when_gap_halves() {
        let bias = |lambda: f64| {
            let (_, d) = steady_state_bounds(1.0, 1.0, 0.0, 5.0, lambda, 0.01, 4).unwrap();
            d / (lambda * lambda)
        };
        let ratio = bias(0.98) / bias(0.96);
        assert!((ratio - 4.0).abs() < 1e-9);
    }

    #[test]
    fn stepsize_examples() {
        let (a, b) = stepsize_ranges(2.0, 4.0, 0.0, 0.5, None);
        assert_eq!(a, b);
        let (a2, _) = stepsize_ranges(2.0, 4.0 * 2f64.sqrt(), 0.0, 0.5, None);
        assert!((a2 - a / 2.0).abs() < 1e-15);
        let (tiny, _) = stepsize_ranges(2.0, 4.0, 0.0, 1.0 - 1e-9, None);
        assert!(tiny < 1e-9);
        let c = comb(TopologyKind::Cycle, 4);
        let dec = fundamental_decomposition(c.abar(), c.v()).unwrap();
        let consts = StepsizeConstants {
            c1: dec.c1,
            c2: dec.c2,
            e1: 1.0,
            e2: 1.0,
        };
        let (full_ed, full_d) = stepsize_ranges(2.0, 4.0, 1.0, c.lambda, Some(consts));
        let (order, _) = stepsize_ranges(2.0, 4.0, 1.0, c.lambda, None);
        assert!(full_ed < order / 32.0);
        assert!(full_d < order);
    }

    #[test]
    fn decomposition_on_small_graphs() {
        for (kind, sizes) in [
            (TopologyKind::Cycle, vec![4, 8, 16, 32]),
            (TopologyKind::Grid, vec![9, 25, 49]),
            (TopologyKind::Complete, vec![4, 16]),
            (TopologyKind::Line, vec![2, 7]),
        ] {
            for k in sizes {
                let c = comb(kind, k);
                let d = fundamental_decomposition(c.abar(), c.v()).unwrap();
                assert_eq!(d.d1_magnitudes.len(), 2 * (k - 1));
                assert!(d.max_d1() < 1.0 - 1e-10, "{kind} {k}");
                assert!(d.residual <= 1e-8, "{kind} {k}: {}", d.residual);
                assert!(d.c1 >= 1.0 && d.c2 >= 1.0);
                assert!((d.c * d.c - k as f64 * d.c1).abs() < 1e-9);
                // |D₁| = √a for every non-consensus eigenvalue of Ā
                let a = sym_eig(c.abar()).unwrap().values;
                for j in 1..k {
                    assert!((d.d1_magnitudes[2 * (j - 1)] - a[j].sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decomposition_rejects_single_agent() {
        let c = comb(TopologyKind::Complete, 1);
        assert!(matches!(
            fundamental_decomposition(c.abar(), c.v()),
            Err(TheoryError::InvalidInput(_))
        ));
    }

    fn rc() -> RegimeConstants {
        RegimeConstants {
            nu: 2.0,
            delta: 4.0,
            k: 30,
        }
    }

    #[test]
    fn regime_dense_without_bias_favours_diffusion() {
        let r = classify_regime(0.0, 10.0, 0.0, 0.01, rc());
        assert_eq!(r.regime, Regime::DiffusionBetter);
        let r = classify_regime(0.0, 10.0, 0.0, 1e-5, rc());
        assert_eq!(r.regime, Regime::Similar);
    }

    #[test]
    fn regime_noiseless_bias_favours_exact_diffusion() {
        for lambda in [0.1, 0.5, 0.99] {
            let r = classify_regime(3.0, 0.0, lambda, 0.01, rc());
            assert_eq!(r.regime, Regime::ExactDiffusionBetter);
        }
        assert_eq!(classify_regime(3.0, 0.0, 0.0, 0.01, rc()).regime, Regime::Similar);
    }

    #[test]
    fn regime_sparse_flips_at_small_step_threshold() {
        let lambda = 0.9;
        let threshold = 0.1f64.powi(3);
        let above = classify_regime(50.0, 10.0, lambda, threshold * 1.01, rc());
        assert_eq!(above.regime, Regime::ExactDiffusionBetter);
        let below = classify_regime(50.0, 10.0, lambda, threshold * 0.99, rc());
        assert_eq!(below.regime, Regime::Similar);
        assert!((below.small_step_threshold - threshold).abs() < 1e-15);
    }

    #[test]
    fn regime_sparse_without_bias_is_similar() {
        let r = classify_regime(0.0, 10.0, 0.95, 0.01, rc());
        assert_eq!(r.regime, Regime::Similar);
        assert!(r.sparse_bias_threshold.is_infinite());
    }

    #[test]
    fn db_round_trip() {
        assert!((to_db(100.0) - 20.0).abs() < 1e-12);
        assert!((from_db(to_db(0.37)) - 0.37).abs() < 1e-15);
    }
}
