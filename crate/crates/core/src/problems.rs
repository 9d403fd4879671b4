//! Streaming data models with stochastic and true gradient oracles.
//!
//! Two families are supported:
//!
//! * least squares ("MSE network"): `d = uᵀw°_k + v`, `u ~ N(0, Λ_k)`,
//!   cost `E(d − uᵀw)²`;
//! * ℓ²-regularised logistic regression with labels drawn from a logistic
//!   model around a unit-norm `w°_k`.
//!
//! A [`ProblemInstance`] also carries everything the steady-state theory
//! needs at the global minimiser: Hessians `H_k`, gradient-noise
//! covariances `S_k`, the bias `b²` and the noise level `σ²`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{dot, norm_sq, solve_spd, sym_eig, LinalgError, Matrix, SymMatrix};
use crate::stream::{tagged_rng, TAG_EVALUATION, TAG_NOISE_COV, TAG_PROBLEM};

/// Stationarity tolerance for the logistic empirical-risk minimiser.
pub const PROXY_GRADIENT_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERATIONS: usize = 100;
/// Default number of fresh samples per agent for logistic `S_k`.
pub const DEFAULT_LOGISTIC_NOISE_SAMPLES: usize = 100_000;
pub const MIN_EVAL_SAMPLES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empirical-risk solver did not converge: gradient norm {grad_norm:e} after {iterations} iterations")]
    ConvergenceFailure { iterations: usize, grad_norm: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    LeastSquares,
    Logistic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::LeastSquares => "ls",
            Family::Logistic => "logistic",
        })
    }
}

impl FromStr for Family {
    type Err = ProblemError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ls" | "least_squares" | "mse" => Ok(Family::LeastSquares),
            "logistic" | "logistic_regression" => Ok(Family::Logistic),
            other => Err(ProblemError::InvalidInput(format!(
                "unknown problem family '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsAgentModel {
    pub w_star_k: Vec<f64>,
    /// Diagonal of `Λ_k`.
    pub lambda: Vec<f64>,
    pub noise_var: f64,
    sqrt_lambda: Vec<f64>,
}

impl LsAgentModel {
    pub fn new(w_star_k: Vec<f64>, lambda: Vec<f64>, noise_var: f64) -> Result<Self, ProblemError> {
        if w_star_k.len() != lambda.len() || w_star_k.is_empty() {
            return Err(ProblemError::InvalidInput(
                "w_star_k and Λ_k must have the same positive length".into(),
            ));
        }
        if lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(ProblemError::InvalidInput(
                "Λ_k diagonal entries must be positive".into(),
            ));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(ProblemError::InvalidInput(format!(
                "noise variance must be non-negative, got {noise_var}"
            )));
        }
        let sqrt_lambda = lambda.iter().map(|l| l.sqrt()).collect();
        Ok(LsAgentModel {
            w_star_k,
            lambda,
            noise_var,
            sqrt_lambda,
        })
    }

    /// Exact gradient `2Λ_k(w − w°_k)`.
    pub fn true_gradient(&self, w: &[f64], out: &mut [f64]) {
        for i in 0..w.len() {
            out[i] = 2.0 * self.lambda[i] * (w[i] - self.w_star_k[i]);
        }
    }

    /// Closed-form `E[s sᵀ]` at `w`, with `e = w − w°_k`:
    /// `4(Λe eᵀΛ + (eᵀΛe)Λ + σ_v²Λ)`.
    pub fn noise_covariance(&self, w: &[f64]) -> SymMatrix {
        let m = w.len();
        let le: Vec<f64> = (0..m)
            .map(|i| self.lambda[i] * (w[i] - self.w_star_k[i]))
            .collect();
        let e_l_e: f64 = (0..m).map(|i| le[i] * (w[i] - self.w_star_k[i])).sum();
        let s = Matrix::from_fn(m, m, |r, c| {
            let diag = if r == c {
                (e_l_e + self.noise_var) * self.lambda[r]
            } else {
                0.0
            };
            4.0 * (le[r] * le[c] + diag)
        });
        SymMatrix::symmetrized(&s).expect("square by construction")
    }

    /// `β_k² = 4·λ_max(Λ² + tr(Λ)Λ)`.
    pub fn beta_sq(&self) -> f64 {
        let tr: f64 = self.lambda.iter().sum();
        self.lambda
            .iter()
            .map(|l| 4.0 * (l * l + tr * l))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticAgentModel {
    pub w_star_k: Vec<f64>,
    pub rho: f64,
}

impl LogisticAgentModel {
    pub fn new(w_star_k: Vec<f64>, rho: f64) -> Result<Self, ProblemError> {
        if w_star_k.is_empty() {
            return Err(ProblemError::InvalidInput("empty w_star_k".into()));
        }
        if (norm_sq(&w_star_k) - 1.0).abs() > 1e-10 {
            return Err(ProblemError::InvalidInput(
                "logistic w_star_k must have unit norm".into(),
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(ProblemError::InvalidInput(format!(
                "rho must be positive, got {rho}"
            )));
        }
        Ok(LogisticAgentModel { w_star_k, rho })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Agents {
    LeastSquares(Vec<LsAgentModel>),
    Logistic(Vec<LogisticAgentModel>),
}

/// Where the logistic global minimiser came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyInfo {
    pub eval_sample_count: usize,
    pub gradient_norm: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    k: usize,
    m: usize,
    agents: Agents,
    w_star: Vec<f64>,
    grad_at_star: Vec<Vec<f64>>,
    hessians: Vec<SymMatrix>,
    noise_covs: Vec<SymMatrix>,
    pub b_sq: f64,
    pub sigma_sq: f64,
    /// Lower Hessian bound ν over all agents.
    pub nu: f64,
    /// Upper Hessian bound δ over all agents.
    pub delta: f64,
    /// Largest per-agent noise Lipschitz constant β².
    pub beta_sq_max: f64,
    deterministic: bool,
    proxy: Option<ProxyInfo>,
}

/// Parameters of a randomly generated least-squares instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LsSpec {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub lambda_range: (f64, f64),
    pub noise_var: f64,
    pub zero_bias: bool,
    pub deterministic: bool,
}

impl Default for LsSpec {
    fn default() -> Self {
        LsSpec {
            k: 1,
            m: 10,
            seed: 0,
            lambda_range: (1.0, 2.0),
            noise_var: 0.1,
            zero_bias: false,
            deterministic: false,
        }
    }
}

/// Parameters of a randomly generated logistic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSpec {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub rho: f64,
    pub eval_sample_count: usize,
    pub zero_bias: bool,
    pub noise_samples: usize,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        LogisticSpec {
            k: 1,
            m: 20,
            seed: 0,
            rho: 0.001,
            eval_sample_count: 200_000,
            zero_bias: false,
            noise_samples: DEFAULT_LOGISTIC_NOISE_SAMPLES,
        }
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates a least-squares instance with `w°_k ~ N(0, I)` and
/// `Λ_k` entries uniform on `lambda_range`.
pub fn make_ls_problem(spec: &LsSpec) -> Result<ProblemInstance, ProblemError> {
    let (lo, hi) = spec.lambda_range;
    if spec.k == 0 || spec.m == 0 {
        return Err(ProblemError::InvalidInput("K and M must be at least 1".into()));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(ProblemError::InvalidInput(format!(
            "lambda_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
        )));
    }
    let mut rng = tagged_rng(TAG_PROBLEM, spec.seed, 0);
    let shared = gaussian_vec(&mut rng, spec.m);
    let mut agents = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let w = if spec.zero_bias {
            shared.clone()
        } else {
            gaussian_vec(&mut rng, spec.m)
        };
        let lambda = (0..spec.m).map(|_| rng.random_range(lo..=hi)).collect();
        agents.push(LsAgentModel::new(w, lambda, spec.noise_var)?);
    }
    ProblemInstance::from_ls_agents(agents, spec.deterministic)
}

/// Generates a logistic instance; the global minimiser is the minimiser
/// of the empirical risk over a frozen evaluation set.
pub fn make_logistic_problem(spec: &LogisticSpec) -> Result<ProblemInstance, ProblemError> {
    if spec.k == 0 || spec.m == 0 {
        return Err(ProblemError::InvalidInput("K and M must be at least 1".into()));
    }
    if spec.eval_sample_count < MIN_EVAL_SAMPLES {
        return Err(ProblemError::InvalidInput(format!(
            "eval_sample_count must be at least {MIN_EVAL_SAMPLES}"
        )));
    }
    let mut rng = tagged_rng(TAG_PROBLEM, spec.seed, 1);
    let unit = |rng: &mut _| {
        let mut w = gaussian_vec(rng, spec.m);
        let n = norm_sq(&w).sqrt();
        w.iter_mut().for_each(|x| *x /= n);
        w
    };
    let shared = unit(&mut rng);
    let mut agents = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let w = if spec.zero_bias {
            shared.clone()
        } else {
            unit(&mut rng)
        };
        agents.push(LogisticAgentModel::new(w, spec.rho)?);
    }
    ProblemInstance::from_logistic_agents(
        agents,
        spec.seed,
        spec.eval_sample_count,
        spec.zero_bias,
        spec.noise_samples,
    )
}

impl ProblemInstance {
    /// Builds an instance from explicit least-squares agents. The global
    /// minimiser is `(ΣΛ_k)⁻¹ Σ Λ_k w°_k` and `S_k` is evaluated in
    /// closed form.
    pub fn from_ls_agents(
        agents: Vec<LsAgentModel>,
        deterministic: bool,
    ) -> Result<Self, ProblemError> {
        let k = agents.len();
        if k == 0 {
            return Err(ProblemError::InvalidInput("need at least one agent".into()));
        }
        let m = agents[0].w_star_k.len();
        if agents.iter().any(|a| a.w_star_k.len() != m) {
            return Err(ProblemError::InvalidInput("agents disagree on M".into()));
        }
        let w_star: Vec<f64> = (0..m)
            .map(|i| {
                let num: f64 = agents.iter().map(|a| a.lambda[i] * a.w_star_k[i]).sum();
                let den: f64 = agents.iter().map(|a| a.lambda[i]).sum();
                num / den
            })
            .collect();
        let grad_at_star: Vec<Vec<f64>> = agents
            .iter()
            .map(|a| {
                let mut g = vec![0.0; m];
                a.true_gradient(&w_star, &mut g);
                g
            })
            .collect();
        let hessians = agents
            .iter()
            .map(|a| SymMatrix::diag(&a.lambda.iter().map(|l| 2.0 * l).collect::<Vec<_>>()))
            .collect();
        let noise_covs: Vec<SymMatrix> = agents
            .iter()
            .map(|a| {
                if deterministic {
                    SymMatrix::zeros(m)
                } else {
                    a.noise_covariance(&w_star)
                }
            })
            .collect();
        let all_lambda = agents.iter().flat_map(|a| a.lambda.iter().copied());
        let (lmin, lmax) = all_lambda.fold((f64::INFINITY, 0.0f64), |(lo, hi), l| {
            (lo.min(l), hi.max(l))
        });
        let beta_sq_max = if deterministic {
            0.0
        } else {
            agents.iter().map(|a| a.beta_sq()).fold(0.0, f64::max)
        };
        let mut inst = ProblemInstance {
            k,
            m,
            agents: Agents::LeastSquares(agents),
            w_star,
            grad_at_star,
            hessians,
            noise_covs,
            b_sq: 0.0,
            sigma_sq: 0.0,
            nu: 2.0 * lmin,
            delta: 2.0 * lmax,
            beta_sq_max,
            deterministic,
            proxy: None,
        };
        inst.refresh_summaries();
        Ok(inst)
    }

    /// Builds a logistic instance: Newton iterations on the empirical risk
    /// over `eval_sample_count` frozen samples per agent (regenerated from
    /// their seed on every pass), then empirical `H_k` and `S_k` at the
    /// resulting minimiser.
    pub fn from_logistic_agents(
        agents: Vec<LogisticAgentModel>,
        seed: u64,
        eval_sample_count: usize,
        share_eval_set: bool,
        noise_samples: usize,
    ) -> Result<Self, ProblemError> {
        let k = agents.len();
        if k == 0 {
            return Err(ProblemError::InvalidInput("need at least one agent".into()));
        }
        let m = agents[0].w_star_k.len();
        if agents.iter().any(|a| a.w_star_k.len() != m) {
            return Err(ProblemError::InvalidInput("agents disagree on M".into()));
        }
        let eval_index = |agent: usize| if share_eval_set { 0 } else { agent as u64 };

        let pass = |w: &[f64]| -> Vec<(Vec<f64>, SymMatrix)> {
            (0..k)
                .into_par_iter()
                .map(|a| {
                    empirical_grad_hessian(
                        &agents[a],
                        w,
                        seed,
                        eval_index(a),
                        eval_sample_count,
                    )
                })
                .collect()
        };

        let mut w = vec![0.0; m];
        let mut iterations = 0;
        let per_agent = loop {
            let per_agent = pass(&w);
            let grad = average_vectors(per_agent.iter().map(|(g, _)| g.as_slice()), m);
            let grad_norm = norm_sq(&grad).sqrt();
            if grad_norm <= PROXY_GRADIENT_TOL {
                break per_agent;
            }
            if iterations >= MAX_NEWTON_ITERATIONS || !grad_norm.is_finite() {
                return Err(ProblemError::ConvergenceFailure {
                    iterations,
                    grad_norm,
                });
            }
            let mut hess = SymMatrix::zeros(m);
            for (_, h) in &per_agent {
                hess = hess.add(h);
            }
            let hess = hess.scale(1.0 / k as f64);
            let step = solve_spd(&hess, &grad)?;
            w.iter_mut().zip(&step).for_each(|(wi, s)| *wi -= s);
            iterations += 1;
        };

        let (grad_at_star, hessians): (Vec<_>, Vec<_>) = per_agent.into_iter().unzip();
        let grad = average_vectors(grad_at_star.iter().map(Vec::as_slice), m);
        let gradient_norm = norm_sq(&grad).sqrt();

        let noise_covs: Vec<SymMatrix> = (0..k)
            .into_par_iter()
            .map(|a| {
                logistic_noise_covariance(&agents[a], &w, &grad_at_star[a], noise_samples, seed, a)
            })
            .collect();

        let mut nu = f64::INFINITY;
        let mut delta = 0.0f64;
        for h in &hessians {
            let eig = sym_eig(h)?;
            delta = delta.max(eig.values[0]);
            nu = nu.min(eig.values[m - 1]);
        }
        // Per-sample gradients are (‖h‖²/4 + ρ)-Lipschitz; E‖h‖⁴ = M² + 2M.
        let mf = m as f64;
        let beta_sq_max = (mf * mf + 2.0 * mf) / 16.0;

        let mut inst = ProblemInstance {
            k,
            m,
            agents: Agents::Logistic(agents),
            w_star: w,
            grad_at_star,
            hessians,
            noise_covs,
            b_sq: 0.0,
            sigma_sq: 0.0,
            nu,
            delta,
            beta_sq_max,
            deterministic: false,
            proxy: Some(ProxyInfo {
                eval_sample_count,
                gradient_norm,
                newton_iterations: iterations,
            }),
        };
        inst.refresh_summaries();
        Ok(inst)
    }

    fn refresh_summaries(&mut self) {
        self.b_sq = compute_bias(self);
        self.sigma_sq = self
            .noise_covs
            .iter()
            .map(crate::linalg::trace)
            .sum::<f64>()
            / self.k as f64;
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn family(&self) -> Family {
        match self.agents {
            Agents::LeastSquares(_) => Family::LeastSquares,
            Agents::Logistic(_) => Family::Logistic,
        }
    }

    pub fn agents(&self) -> &Agents {
        &self.agents
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    /// `∇J_k(w*)` for every agent.
    pub fn gradients_at_star(&self) -> &[Vec<f64>] {
        &self.grad_at_star
    }

    pub fn hessians(&self) -> &[SymMatrix] {
        &self.hessians
    }

    pub fn noise_covariances(&self) -> &[SymMatrix] {
        &self.noise_covs
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn proxy(&self) -> Option<&ProxyInfo> {
        self.proxy.as_ref()
    }

    /// Returns a copy in which true gradients replace stochastic ones.
    /// Only least-squares instances have a closed-form true gradient.
    pub fn to_deterministic(&self) -> Result<ProblemInstance, ProblemError> {
        match &self.agents {
            Agents::LeastSquares(a) => ProblemInstance::from_ls_agents(a.clone(), true),
            Agents::Logistic(_) => Err(ProblemError::InvalidInput(
                "deterministic mode needs a closed-form gradient (least squares only)".into(),
            )),
        }
    }

    /// Number of raw random numbers one sample occupies.
    pub fn sample_width(&self) -> usize {
        self.m + 1
    }

    /// Draws one raw sample for `agent` into `out` (length `sample_width`).
    ///
    /// Least squares stores the scaled regressor `u` followed by the
    /// observation noise `v`; logistic stores the feature `h` followed by
    /// the uniform label variable `z`.
    #[inline]
    pub fn draw_sample<R: Rng>(&self, agent: usize, rng: &mut R, out: &mut [f64]) {
        let m = self.m;
        match &self.agents {
            Agents::LeastSquares(a) => {
                let a = &a[agent];
                for i in 0..m {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i] = a.sqrt_lambda[i] * z;
                }
                let z: f64 = rng.sample(StandardNormal);
                out[m] = a.noise_var.sqrt() * z;
            }
            Agents::Logistic(_) => {
                for o in out.iter_mut().take(m) {
                    *o = rng.sample(StandardNormal);
                }
                out[m] = rng.random::<f64>();
            }
        }
    }

    /// Per-sample loss `Q(w; sample)`.
    pub fn sample_loss(&self, agent: usize, w: &[f64], sample: &[f64]) -> f64 {
        let m = self.m;
        match &self.agents {
            Agents::LeastSquares(a) => {
                let (u, v) = (&sample[..m], sample[m]);
                let d = dot(u, &a[agent].w_star_k) + v;
                (d - dot(u, w)).powi(2)
            }
            Agents::Logistic(a) => {
                let a = &a[agent];
                let h = &sample[..m];
                let gamma = logistic_label(a, h, sample[m]);
                let x = -gamma * dot(h, w);
                // ln(1 + eˣ), stable
                let softplus = if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                };
                softplus + 0.5 * a.rho * norm_sq(w)
            }
        }
    }

    /// Gradient of the per-sample loss at `w`.
    #[inline]
    pub fn sample_gradient(&self, agent: usize, w: &[f64], sample: &[f64], out: &mut [f64]) {
        let m = self.m;
        match &self.agents {
            Agents::LeastSquares(a) => {
                let a = &a[agent];
                let u = &sample[..m];
                let mut r = sample[m];
                for i in 0..m {
                    r += u[i] * (a.w_star_k[i] - w[i]);
                }
                for i in 0..m {
                    out[i] = -2.0 * u[i] * r;
                }
            }
            Agents::Logistic(a) => {
                let a = &a[agent];
                let h = &sample[..m];
                let gamma = logistic_label(a, h, sample[m]);
                let c = -gamma * sigmoid(-gamma * dot(h, w));
                for i in 0..m {
                    out[i] = c * h[i] + a.rho * w[i];
                }
            }
        }
    }

    /// Exact gradient `∇J_k(w)` (least squares only).
    pub fn true_gradient(&self, agent: usize, w: &[f64], out: &mut [f64]) -> Result<(), ProblemError> {
        match &self.agents {
            Agents::LeastSquares(a) => {
                a[agent].true_gradient(w, out);
                Ok(())
            }
            Agents::Logistic(_) => Err(ProblemError::InvalidInput(
                "logistic risk has no closed-form gradient".into(),
            )),
        }
    }

    /// The gradient an algorithm sees: the true gradient in deterministic
    /// mode, otherwise a fresh sample drawn from `rng`.
    pub fn stochastic_gradient<R: Rng>(&self, agent: usize, w: &[f64], rng: &mut R, out: &mut [f64]) {
        if self.deterministic {
            self.true_gradient(agent, w, out)
                .expect("deterministic instances are least squares");
            return;
        }
        let mut sample = vec![0.0; self.sample_width()];
        self.draw_sample(agent, rng, &mut sample);
        self.sample_gradient(agent, w, &sample, out);
    }
}

#[inline]
fn logistic_label(a: &LogisticAgentModel, h: &[f64], z: f64) -> f64 {
    if z <= sigmoid(dot(h, &a.w_star_k)) {
        1.0
    } else {
        -1.0
    }
}

fn average_vectors<'a>(vs: impl Iterator<Item = &'a [f64]>, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m];
    let mut n = 0usize;
    for v in vs {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Empirical gradient and Hessian of one agent's regularised logistic
/// risk over its frozen evaluation set.
fn empirical_grad_hessian(
    agent: &LogisticAgentModel,
    w: &[f64],
    seed: u64,
    eval_index: u64,
    n: usize,
) -> (Vec<f64>, SymMatrix) {
    let m = w.len();
    let mut rng = tagged_rng(TAG_EVALUATION, seed, eval_index);
    let mut h = vec![0.0; m];
    let mut grad = vec![0.0; m];
    // upper triangle, row-major packed
    let mut hess = vec![0.0; m * (m + 1) / 2];
    for _ in 0..n {
        for x in h.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let z: f64 = rng.random();
        let gamma = logistic_label(agent, &h, z);
        let t = dot(&h, w);
        let c = -gamma * sigmoid(-gamma * t);
        let s = sigmoid(t);
        let curv = s * (1.0 - s);
        grad.iter_mut().zip(&h).for_each(|(g, x)| *g += c * x);
        let mut idx = 0;
        for r in 0..m {
            let hr = curv * h[r];
            for c in r..m {
                hess[idx] += hr * h[c];
                idx += 1;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for (g, wi) in grad.iter_mut().zip(w) {
        *g = *g * inv + agent.rho * wi;
    }
    let mut full = Matrix::zeros(m, m);
    let mut idx = 0;
    for r in 0..m {
        for c in r..m {
            let v = hess[idx] * inv + if r == c { agent.rho } else { 0.0 };
            full[(r, c)] = v;
            full[(c, r)] = v;
            idx += 1;
        }
    }
    (grad, SymMatrix::new(full).expect("symmetric by construction"))
}

fn logistic_noise_covariance(
    agent: &LogisticAgentModel,
    w: &[f64],
    mean: &[f64],
    n: usize,
    seed: u64,
    index: usize,
) -> SymMatrix {
    let m = w.len();
    let mut rng = tagged_rng(TAG_NOISE_COV, seed, index as u64);
    let mut h = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut acc = Matrix::zeros(m, m);
    for _ in 0..n {
        for x in h.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let z: f64 = rng.random();
        let gamma = logistic_label(agent, &h, z);
        let c = -gamma * sigmoid(-gamma * dot(&h, w));
        for i in 0..m {
            s[i] = c * h[i] + agent.rho * w[i] - mean[i];
        }
        accumulate_outer(&mut acc, &s);
    }
    finish_covariance(acc, n)
}

fn accumulate_outer(acc: &mut Matrix, s: &[f64]) {
    let m = s.len();
    for r in 0..m {
        let row = acc.row_mut(r);
        for c in r..m {
            row[c] += s[r] * s[c];
        }
    }
}

fn finish_covariance(mut acc: Matrix, n: usize) -> SymMatrix {
    let m = acc.rows();
    let inv = 1.0 / n as f64;
    for r in 0..m {
        for c in r..m {
            let v = acc[(r, c)] * inv;
            acc[(r, c)] = v;
            acc[(c, r)] = v;
        }
    }
    let sym = SymMatrix::new(acc).expect("symmetric by construction");
    // Remove any round-off negativity.
    match sym_eig(&sym) {
        Ok(eig) => eig.reconstruct_with(|l| l.max(0.0)),
        Err(_) => sym,
    }
}

/// Monte-Carlo estimate of `S_k = E[s sᵀ]` at `w*`, where `s` is the
/// stochastic gradient minus `∇J_k(w*)`. Returns the zero matrix for
/// deterministic instances.
pub fn estimate_noise_covariance(
    problem: &ProblemInstance,
    agent: usize,
    sample_count: usize,
    seed: u64,
) -> SymMatrix {
    let m = problem.m();
    if problem.is_deterministic() {
        return SymMatrix::zeros(m);
    }
    let mut rng = tagged_rng(TAG_NOISE_COV, seed, agent as u64);
    let mean = &problem.gradients_at_star()[agent];
    let w = problem.w_star();
    let mut sample = vec![0.0; problem.sample_width()];
    let mut g = vec![0.0; m];
    let mut acc = Matrix::zeros(m, m);
    for _ in 0..sample_count {
        problem.draw_sample(agent, &mut rng, &mut sample);
        problem.sample_gradient(agent, w, &sample, &mut g);
        g.iter_mut().zip(mean).for_each(|(x, mu)| *x -= mu);
        accumulate_outer(&mut acc, &g);
    }
    finish_covariance(acc, sample_count)
}

/// `b² = (1/K) Σ_k ‖∇J_k(w*)‖²`.
pub fn compute_bias(problem: &ProblemInstance) -> f64 {
    problem.gradients_at_star().iter().map(|g| norm_sq(g)).sum::<f64>() / problem.k() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::tagged_rng;

    fn two_agent_example() -> ProblemInstance {
        let a1 = LsAgentModel::new(vec![1.0], vec![1.0], 0.1).unwrap();
        let a2 = LsAgentModel::new(vec![4.0], vec![2.0], 0.1).unwrap();
        ProblemInstance::from_ls_agents(vec![a1, a2], false).unwrap()
    }

    #[test]
    fn ls_two_agent_minimiser_and_bias() {
        let p = two_agent_example();
        assert!((p.w_star()[0] - 3.0).abs() < 1e-15);
        assert!((p.gradients_at_star()[0][0] - 4.0).abs() < 1e-12);
        assert!((p.gradients_at_star()[1][0] + 4.0).abs() < 1e-12);
        assert!((p.b_sq - 16.0).abs() < 1e-12);
        assert!((compute_bias(&p) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn ls_zero_bias() {
        let p = make_ls_problem(&LsSpec {
            k: 5,
            m: 4,
            zero_bias: true,
            ..LsSpec::default()
        })
        .unwrap();
        assert!(p.b_sq <= 1e-12);
        if let Agents::LeastSquares(a) = p.agents() {
            for agent in a {
                for (x, y) in agent.w_star_k.iter().zip(p.w_star()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ls_rejects_bad_lambda_range() {
        let bad = LsSpec {
            lambda_range: (0.0, 1.0),
            ..LsSpec::default()
        };
        assert!(matches!(make_ls_problem(&bad), Err(ProblemError::InvalidInput(_))));
        let bad = LsSpec {
            lambda_range: (2.0, 1.0),
            ..LsSpec::default()
        };
        assert!(make_ls_problem(&bad).is_err());
    }

    #[test]
    fn ls_constants_follow_lambda() {
        let p = make_ls_problem(&LsSpec {
            k: 4,
            m: 3,
            seed: 5,
            ..LsSpec::default()
        })
        .unwrap();
        if let Agents::LeastSquares(a) = p.agents() {
            let lo = a.iter().flat_map(|x| x.lambda.iter()).cloned().fold(f64::INFINITY, f64::min);
            let hi = a.iter().flat_map(|x| x.lambda.iter()).cloned().fold(0.0, f64::max);
            assert_eq!(p.nu, 2.0 * lo);
            assert_eq!(p.delta, 2.0 * hi);
            assert!((1.0..=2.0).contains(&lo) && hi <= 2.0);
            for (h, ag) in p.hessians().iter().zip(a) {
                for i in 0..3 {
                    assert_eq!(h[(i, i)], 2.0 * ag.lambda[i]);
                }
            }
        }
        let global: Vec<f64> = {
            let mut acc = vec![0.0; 3];
            for g in p.gradients_at_star() {
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
            }
            acc
        };
        assert!(norm_sq(&global).sqrt() <= 1e-9);
    }

    #[test]
    fn ls_bias_scales_quadratically() {
        let p = two_agent_example();
        let ws = p.w_star()[0];
        let a1 = LsAgentModel::new(vec![ws + 2.0 * (1.0 - ws)], vec![1.0], 0.1).unwrap();
        let a2 = LsAgentModel::new(vec![ws + 2.0 * (4.0 - ws)], vec![2.0], 0.1).unwrap();
        let q = ProblemInstance::from_ls_agents(vec![a1, a2], false).unwrap();
        assert!((q.b_sq / p.b_sq - 4.0).abs() < 1e-9);
        // agent order does not matter
        let a1 = LsAgentModel::new(vec![4.0], vec![2.0], 0.1).unwrap();
        let a2 = LsAgentModel::new(vec![1.0], vec![1.0], 0.1).unwrap();
        let r = ProblemInstance::from_ls_agents(vec![a1, a2], false).unwrap();
        assert!((r.b_sq - p.b_sq).abs() < 1e-12);
    }

    #[test]
    fn ls_gradient_mean_at_local_minimiser() {
        let a = LsAgentModel::new(vec![0.3, -1.0, 2.0], vec![1.0, 1.5, 2.0], 0.0).unwrap();
        let p = ProblemInstance::from_ls_agents(vec![a.clone()], false).unwrap();
        let mut rng = tagged_rng(1, 2, 3);
        let mut g = vec![0.0; 3];
        let mut acc = vec![0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            p.stochastic_gradient(0, &a.w_star_k, &mut rng, &mut g);
            acc.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
        }
        // with no observation noise and w = w°, every sample gradient is 0
        assert!(norm_sq(&acc).sqrt() / n as f64 <= 0.05 * 3f64.sqrt());
    }

    #[test]
    fn ls_gradient_mean_scalar() {
        let a = LsAgentModel::new(vec![0.0], vec![1.0], 0.1).unwrap();
        let p = ProblemInstance::from_ls_agents(vec![a], false).unwrap();
        let mut rng = tagged_rng(9, 9, 9);
        let mut g = [0.0];
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| {
                p.stochastic_gradient(0, &[1.0], &mut rng, &mut g);
                g[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!((1.99..=2.01).contains(&mean), "{mean}");
    }

    #[test]
    fn deterministic_gradient_is_exact() {
        let p = two_agent_example().to_deterministic().unwrap();
        let mut rng = tagged_rng(0, 0, 0);
        let mut g = [0.0];
        p.stochastic_gradient(1, &[0.0], &mut rng, &mut g);
        assert_eq!(g[0], 2.0 * 2.0 * (0.0 - 4.0));
        assert!(p.noise_covariances().iter().all(|s| s.max_abs() == 0.0));
        assert_eq!(p.sigma_sq, 0.0);
        assert_eq!(estimate_noise_covariance(&p, 0, 10, 0).max_abs(), 0.0);
    }

    #[test]
    fn ls_noise_covariance_scalar_example() {
        let a = LsAgentModel::new(vec![0.5], vec![1.0], 0.1).unwrap();
        let p = ProblemInstance::from_ls_agents(vec![a], false).unwrap();
        assert!((p.noise_covariances()[0][(0, 0)] - 0.4).abs() < 1e-15);
        let mc = estimate_noise_covariance(&p, 0, 1_000_000, 17);
        assert!((mc[(0, 0)] / 0.4 - 1.0).abs() < 0.05, "{}", mc[(0, 0)]);
    }

    #[test]
    fn ls_noise_covariance_closed_form_matches_monte_carlo() {
        let p = make_ls_problem(&LsSpec {
            k: 3,
            m: 3,
            seed: 11,
            ..LsSpec::default()
        })
        .unwrap();
        for k in 0..3 {
            let exact = &p.noise_covariances()[k];
            let mc = estimate_noise_covariance(&p, k, 1_000_000, 3);
            let tr_exact = crate::linalg::trace(exact);
            let tr_mc = crate::linalg::trace(&mc);
            assert!((tr_mc / tr_exact - 1.0).abs() < 0.05);
            assert!(mc.as_matrix().max_abs_diff(exact.as_matrix()) < 0.05 * exact.max_abs());
        }
    }

    fn finite_difference_check(p: &ProblemInstance, seed: u64, points: usize) {
        let m = p.m();
        let mut rng = tagged_rng(seed, 0, 0);
        let mut sample = vec![0.0; p.sample_width()];
        let mut g = vec![0.0; m];
        for t in 0..points {
            let agent = t % p.k();
            let w = gaussian_vec(&mut rng, m);
            p.draw_sample(agent, &mut rng, &mut sample);
            p.sample_gradient(agent, &w, &sample, &mut g);
            let step = 1e-6;
            for i in 0..m {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += step;
                wm[i] -= step;
                let fd = (p.sample_loss(agent, &wp, &sample) - p.sample_loss(agent, &wm, &sample))
                    / (2.0 * step);
                let scale = g[i].abs().max(1e-3);
                assert!((fd - g[i]).abs() / scale < 1e-5, "coord {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn ls_gradient_matches_finite_differences() {
        let p = make_ls_problem(&LsSpec {
            k: 2,
            m: 4,
            seed: 3,
            ..LsSpec::default()
        })
        .unwrap();
        finite_difference_check(&p, 21, 20);
    }

    fn small_logistic(k: usize, m: usize, rho: f64, zero_bias: bool) -> ProblemInstance {
        make_logistic_problem(&LogisticSpec {
            k,
            m,
            seed: 4,
            rho,
            eval_sample_count: 10_000,
            zero_bias,
            noise_samples: 10_000,
        })
        .unwrap()
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let p = small_logistic(2, 5, 0.01, false);
        finite_difference_check(&p, 22, 20);
    }

    #[test]
    fn logistic_regulariser_isolated_when_features_vanish() {
        let p = small_logistic(1, 3, 0.01, false);
        let w = [0.5, -2.0, 1.0];
        let mut g = [0.0; 3];
        p.sample_gradient(0, &w, &[0.0, 0.0, 0.0, 0.3], &mut g);
        for i in 0..3 {
            assert_eq!(g[i], 0.01 * w[i]);
        }
    }

    #[test]
    fn logistic_proxy_is_stationary() {
        let p = small_logistic(3, 4, 0.001, false);
        let proxy = p.proxy().unwrap();
        assert!(proxy.gradient_norm <= PROXY_GRADIENT_TOL);
        if let Agents::Logistic(a) = p.agents() {
            for agent in a {
                assert!((norm_sq(&agent.w_star_k) - 1.0).abs() < 1e-10);
            }
        }
        assert!(p.nu > 0.0 && p.nu <= p.delta);
        assert!(p.sigma_sq > 0.0 && p.b_sq > 0.0);
    }

    #[test]
    fn logistic_strong_regularisation_shrinks_minimiser() {
        let p = small_logistic(2, 5, 1e3, false);
        assert!(norm_sq(p.w_star()).sqrt() < 0.01);
    }

    #[test]
    fn logistic_identical_agents_have_no_bias() {
        let p = small_logistic(3, 4, 0.001, true);
        assert!(p.b_sq <= 1e-6, "{}", p.b_sq);
    }

    #[test]
    fn logistic_rejects_small_eval_set_and_deterministic_mode() {
        let spec = LogisticSpec {
            eval_sample_count: 100,
            ..LogisticSpec::default()
        };
        assert!(make_logistic_problem(&spec).is_err());
        assert!(small_logistic(1, 2, 0.1, false).to_deterministic().is_err());
    }
}
