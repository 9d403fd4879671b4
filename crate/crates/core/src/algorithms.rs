//! Diffusion, exact diffusion (correction and primal-dual forms), gradient
//! tracking and a centralised SGD reference.
//!
//! Iterates are stored as `K × M` matrices, one row per agent. All methods
//! start from zero. At iteration `i` each agent evaluates its gradient at
//! `w_{k,i−1}` on the sample drawn from the stream
//! `(seed, run, i, k)`, so every method driven by the same run sees the
//! same data.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::problems::ProblemInstance;
use crate::stream::sample_rng;
use crate::topology::CombinationMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{method} diverged at iteration {iteration}")]
    Divergence { method: Method, iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Diffusion,
    ExactDiffusion,
    ExactDiffusionPd,
    GradientTracking,
    CentralizedSgd,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Diffusion,
        Method::ExactDiffusion,
        Method::ExactDiffusionPd,
        Method::GradientTracking,
        Method::CentralizedSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diffusion => "diffusion",
            Method::ExactDiffusion => "exact_diffusion",
            Method::ExactDiffusionPd => "exact_diffusion_pd",
            Method::GradientTracking => "gradient_tracking",
            Method::CentralizedSgd => "centralized_sgd",
        }
    }

    /// Neighbour exchanges per iteration, in units of one combination.
    pub fn communication_rounds(self) -> usize {
        match self {
            Method::GradientTracking => 2,
            Method::CentralizedSgd => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AlgorithmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == t)
            .or(match t.as_str() {
                "ed" => Some(Method::ExactDiffusion),
                "d" | "atc" => Some(Method::Diffusion),
                "gt" | "tracking" => Some(Method::GradientTracking),
                "sgd" | "centralized" => Some(Method::CentralizedSgd),
                _ => None,
            })
            .ok_or_else(|| AlgorithmError::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmConfig {
    pub method: Method,
    pub mu: f64,
    pub iterations: usize,
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<(), AlgorithmError> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(AlgorithmError::InvalidInput(format!(
                "step size must be positive, got {}",
                self.mu
            )));
        }
        if self.iterations == 0 {
            return Err(AlgorithmError::InvalidInput(
                "at least one iteration is required".into(),
            ));
        }
        Ok(())
    }
}

/// Per-method recursion state. Only the fields the method needs are
/// populated.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub method: Method,
    /// Current iterates, one row per agent (one row for centralised SGD).
    pub w: Matrix,
    /// `ψ_{i−1}` (exact diffusion, correction form).
    pub psi_prev: Option<Matrix>,
    /// Dual iterates (exact diffusion, primal-dual form).
    pub y: Option<Matrix>,
    /// Running `Σ_j w_j`, used to audit `y_i = V Σ_j w_j` (primal-dual form).
    pub w_sum: Option<Matrix>,
    /// Last gradients (gradient tracking).
    pub g_prev: Option<Matrix>,
    /// Tracking variables (gradient tracking).
    pub y_track: Option<Matrix>,
    /// Number of completed iterations.
    pub iteration: usize,
    scratch: Matrix,
    scratch2: Matrix,
}

impl NetworkState {
    pub fn new(method: Method, k: usize, m: usize) -> Self {
        let z = || Some(Matrix::zeros(k, m));
        let rows = if method == Method::CentralizedSgd { 1 } else { k };
        NetworkState {
            method,
            w: Matrix::zeros(rows, m),
            psi_prev: if method == Method::ExactDiffusion { z() } else { None },
            y: if method == Method::ExactDiffusionPd { z() } else { None },
            w_sum: if method == Method::ExactDiffusionPd { z() } else { None },
            g_prev: if method == Method::GradientTracking { z() } else { None },
            y_track: if method == Method::GradientTracking { z() } else { None },
            iteration: 0,
            scratch: Matrix::zeros(k, m),
            scratch2: Matrix::zeros(k, m),
        }
    }

    /// `(1/K) Σ_k ‖w_k − w*‖²`.
    pub fn msd(&self, w_star: &[f64]) -> f64 {
        let rows = self.w.rows();
        let mut total = 0.0;
        for r in 0..rows {
            for (x, s) in self.w.row(r).iter().zip(w_star) {
                total += (x - s) * (x - s);
            }
        }
        total / rows as f64
    }

    /// `max_k ‖w_k − w*‖`.
    pub fn max_deviation(&self, w_star: &[f64]) -> f64 {
        (0..self.w.rows())
            .map(|r| {
                self.w
                    .row(r)
                    .iter()
                    .zip(w_star)
                    .map(|(x, s)| (x - s) * (x - s))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Largest deviation between the stored duals and `V Σ_j w_j`.
    pub fn dual_consistency_error(&self, comb: &CombinationMatrix) -> Option<f64> {
        let (y, sum) = (self.y.as_ref()?, self.w_sum.as_ref()?);
        let expected = comb.v().as_matrix().matmul(sum).ok()?;
        Some(y.max_abs_diff(&expected))
    }
}

fn check_dims(state: &NetworkState, grads: &Matrix, k: usize) -> Result<(), AlgorithmError> {
    if grads.rows() != k || grads.cols() != state.w.cols() || state.scratch.rows() != k {
        return Err(AlgorithmError::InvalidInput(format!(
            "gradient block is {}x{}, state expects {}x{}",
            grads.rows(),
            grads.cols(),
            k,
            state.w.cols()
        )));
    }
    Ok(())
}

fn expect_method(state: &NetworkState, method: Method) -> Result<(), AlgorithmError> {
    if state.method != method {
        return Err(AlgorithmError::InvalidInput(format!(
            "state belongs to {}, not {method}",
            state.method
        )));
    }
    Ok(())
}

/// `out ← a − μ·b`, elementwise.
fn adapt(out: &mut Matrix, a: &Matrix, b: &Matrix, mu: f64) {
    for ((o, x), g) in out
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(b.as_slice())
    {
        *o = x - mu * g;
    }
}

/// Diffusion (adapt-then-combine): `ψ = W − μG`, `W ← Aψ`.
pub fn step_diffusion(
    state: &mut NetworkState,
    comb: &CombinationMatrix,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    expect_method(state, Method::Diffusion)?;
    check_dims(state, grads, comb.k())?;
    adapt(&mut state.scratch, &state.w, grads, mu);
    comb.a_sparse().combine_into(&state.scratch, &mut state.w);
    state.iteration += 1;
    Ok(())
}

/// Exact diffusion: adapt `ψ = W − μG`, correct `φ = ψ + (W − ψ_prev)`,
/// combine `W ← Āφ`.
pub fn step_exact_diffusion(
    state: &mut NetworkState,
    comb: &CombinationMatrix,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    expect_method(state, Method::ExactDiffusion)?;
    check_dims(state, grads, comb.k())?;
    let psi_prev = state.psi_prev.as_mut().expect("populated for exact diffusion");
    let psi = &mut state.scratch2;
    adapt(psi, &state.w, grads, mu);
    // The correction W − ψ_prev has zero agent-average in exact arithmetic.
    // Re-centring it stops round-off from random-walking along the
    // marginally stable consensus mode.
    let (k, m) = (state.w.rows(), state.w.cols());
    let corr = &mut state.scratch;
    for ((c, w), pp) in corr
        .as_mut_slice()
        .iter_mut()
        .zip(state.w.as_slice())
        .zip(psi_prev.as_slice())
    {
        *c = w - pp;
    }
    for j in 0..m {
        let mean = (0..k).map(|r| corr[(r, j)]).sum::<f64>() / k as f64;
        if mean != 0.0 {
            for r in 0..k {
                corr[(r, j)] -= mean;
            }
        }
    }
    for (c, p) in corr.as_mut_slice().iter_mut().zip(psi.as_slice()) {
        *c = p + *c;
    }
    comb.abar_sparse().combine_into(&state.scratch, &mut state.w);
    std::mem::swap(psi_prev, psi);
    state.iteration += 1;
    Ok(())
}

/// Exact diffusion, primal-dual form: `W ← Ā(W − μG) − V·Y`,
/// `Y ← Y + V·W`.
pub fn step_exact_diffusion_pd(
    state: &mut NetworkState,
    comb: &CombinationMatrix,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    expect_method(state, Method::ExactDiffusionPd)?;
    check_dims(state, grads, comb.k())?;
    let k = comb.k();
    let v = comb.v();
    adapt(&mut state.scratch, &state.w, grads, mu);
    comb.abar_sparse().combine_into(&state.scratch, &mut state.w);
    let y = state.y.as_mut().expect("populated for primal-dual form");
    apply_dense(v.as_matrix(), y, &mut state.scratch2, k);
    for (w, vy) in state.w.as_mut_slice().iter_mut().zip(state.scratch2.as_slice()) {
        *w -= vy;
    }
    apply_dense(v.as_matrix(), &state.w, &mut state.scratch2, k);
    for (yi, vw) in y.as_mut_slice().iter_mut().zip(state.scratch2.as_slice()) {
        *yi += vw;
    }
    let sum = state.w_sum.as_mut().expect("populated for primal-dual form");
    for (s, w) in sum.as_mut_slice().iter_mut().zip(state.w.as_slice()) {
        *s += w;
    }
    state.iteration += 1;
    Ok(())
}

/// `out = M·x` for a dense `K × K` operator acting on agent rows.
fn apply_dense(m: &Matrix, x: &Matrix, out: &mut Matrix, k: usize) {
    for r in 0..k {
        let dst = out.row_mut(r);
        dst.iter_mut().for_each(|v| *v = 0.0);
        for (c, &coef) in m.row(r).iter().enumerate() {
            if coef != 0.0 {
                for (d, s) in dst.iter_mut().zip(x.row(c)) {
                    *d += coef * s;
                }
            }
        }
    }
}

/// Gradient tracking (adapt-then-combine). `grads` are the gradients at
/// the current iterates. The tracking update that consumes them is
/// applied first (on the first call the tracker is initialised to them),
/// followed by `W ← A(W − μY)`:
///
/// ```text
/// Y_i     = A(Y_{i−1} + G_i − G_{i−1})      (Y_0 = G_0)
/// W_i     = A(W_{i−1} − μ Y_i)
/// ```
///
/// This is the usual recursion with the tracking step of iteration `i`
/// deferred until the gradients at `W_i` are available; it costs two
/// combinations per iteration.
pub fn step_gradient_tracking(
    state: &mut NetworkState,
    comb: &CombinationMatrix,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    expect_method(state, Method::GradientTracking)?;
    check_dims(state, grads, comb.k())?;
    let y = state.y_track.as_mut().expect("populated for gradient tracking");
    let g_prev = state.g_prev.as_mut().expect("populated for gradient tracking");
    if state.iteration == 0 {
        y.as_mut_slice().copy_from_slice(grads.as_slice());
    } else {
        for (((s, yi), g), gp) in state
            .scratch
            .as_mut_slice()
            .iter_mut()
            .zip(y.as_slice())
            .zip(grads.as_slice())
            .zip(g_prev.as_slice())
        {
            *s = g + (yi - gp);
        }
        comb.a_sparse().combine_into(&state.scratch, y);
    }
    g_prev.as_mut_slice().copy_from_slice(grads.as_slice());
    adapt(&mut state.scratch, &state.w, y, mu);
    comb.a_sparse().combine_into(&state.scratch, &mut state.w);
    state.iteration += 1;
    Ok(())
}

/// Centralised SGD on the aggregate: `w ← w − (μ/K) Σ_k g_k`, where every
/// `g_k` is evaluated at the single shared iterate.
pub fn step_centralized(
    state: &mut NetworkState,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    expect_method(state, Method::CentralizedSgd)?;
    let k = grads.rows();
    if grads.cols() != state.w.cols() {
        return Err(AlgorithmError::InvalidInput("gradient width mismatch".into()));
    }
    let scale = mu / k as f64;
    let m = grads.cols();
    for j in 0..m {
        let total: f64 = (0..k).map(|r| grads[(r, j)]).sum();
        state.w[(0, j)] -= scale * total;
    }
    state.iteration += 1;
    Ok(())
}

/// Dispatches one iteration for whichever method owns `state`.
pub fn step(
    state: &mut NetworkState,
    comb: &CombinationMatrix,
    grads: &Matrix,
    mu: f64,
) -> Result<(), AlgorithmError> {
    match state.method {
        Method::Diffusion => step_diffusion(state, comb, grads, mu),
        Method::ExactDiffusion => step_exact_diffusion(state, comb, grads, mu),
        Method::ExactDiffusionPd => step_exact_diffusion_pd(state, comb, grads, mu),
        Method::GradientTracking => step_gradient_tracking(state, comb, grads, mu),
        Method::CentralizedSgd => step_centralized(state, grads, mu),
    }
}

/// The `K × (M+1)` block of raw samples for one iteration of one run.
#[derive(Debug, Clone)]
pub struct SampleBlock {
    data: Matrix,
}

impl SampleBlock {
    pub fn new(problem: &ProblemInstance) -> Self {
        SampleBlock {
            data: Matrix::zeros(problem.k(), problem.sample_width()),
        }
    }

    /// Refills the block from the stream `(seed, run, iteration, ·)`.
    pub fn draw(&mut self, problem: &ProblemInstance, seed: u64, run: u64, iteration: u64) {
        for k in 0..problem.k() {
            let mut rng = sample_rng(seed, run, iteration, k as u64);
            problem.draw_sample(k, &mut rng, self.data.row_mut(k));
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.data.row(k)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.data
    }
}

/// Fills `grads` with each agent's gradient at its own iterate: the true
/// gradient for deterministic problems, else the gradient on `samples`.
/// A single-row `w` (centralised SGD) is shared by all agents.
pub fn evaluate_gradients(
    problem: &ProblemInstance,
    w: &Matrix,
    samples: &SampleBlock,
    grads: &mut Matrix,
) {
    let shared = w.rows() == 1;
    for k in 0..problem.k() {
        let wk = if shared { w.row(0) } else { w.row(k) };
        let out = grads.row_mut(k);
        if problem.is_deterministic() {
            problem
                .true_gradient(k, wk, out)
                .expect("deterministic instances are least squares");
        } else {
            problem.sample_gradient(k, wk, samples.row(k), out);
        }
    }
}

/// One method's outcome within a run.
#[derive(Debug, Clone)]
pub struct MethodTrace {
    pub method: Method,
    /// `(1/K)Σ‖w_{k,i} − w*‖²` for each completed iteration.
    pub msd: Vec<f64>,
    /// SHA-256 over every sample row the method consumed, when requested.
    pub stream_digest: Option<[u8; 32]>,
    pub divergence: Option<AlgorithmError>,
    pub final_state: NetworkState,
}

/// Options for [`run_methods`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Hash the samples each method reads (costly; for audits).
    pub digest_streams: bool,
}

/// Runs several methods in lock-step over one shared data stream.
///
/// A method whose iterates become non-finite stops and records a
/// divergence; the others continue.
pub fn run_methods(
    configs: &[AlgorithmConfig],
    problem: &ProblemInstance,
    comb: &CombinationMatrix,
    seed: u64,
    run: u64,
    options: RunOptions,
) -> Result<Vec<MethodTrace>, AlgorithmError> {
    if configs.is_empty() {
        return Err(AlgorithmError::InvalidInput("no methods to run".into()));
    }
    if problem.k() != comb.k() {
        return Err(AlgorithmError::InvalidInput(format!(
            "problem has K={} but combination matrix has K={}",
            problem.k(),
            comb.k()
        )));
    }
    let iterations = configs[0].iterations;
    for c in configs {
        c.validate()?;
        if c.iterations != iterations {
            return Err(AlgorithmError::InvalidInput(
                "methods in one run must share the iteration count".into(),
            ));
        }
    }
    let (k, m) = (problem.k(), problem.m());
    let w_star = problem.w_star();
    let mut states: Vec<NetworkState> =
        configs.iter().map(|c| NetworkState::new(c.method, k, m)).collect();
    let mut traces: Vec<Vec<f64>> = configs.iter().map(|_| Vec::with_capacity(iterations)).collect();
    let mut hashers: Vec<Option<Sha256>> = configs
        .iter()
        .map(|_| options.digest_streams.then(Sha256::new))
        .collect();
    let mut diverged: Vec<Option<AlgorithmError>> = vec![None; configs.len()];
    let mut samples = SampleBlock::new(problem);
    let mut grads = Matrix::zeros(k, m);

    for i in 0..iterations {
        if !problem.is_deterministic() {
            samples.draw(problem, seed, run, i as u64);
        }
        for (idx, cfg) in configs.iter().enumerate() {
            if diverged[idx].is_some() {
                continue;
            }
            let state = &mut states[idx];
            evaluate_gradients(problem, &state.w, &samples, &mut grads);
            if let Some(h) = hashers[idx].as_mut() {
                for r in 0..k {
                    for x in samples.row(r) {
                        h.update(x.to_le_bytes());
                    }
                }
            }
            step(state, comb, &grads, cfg.mu)?;
            let msd = state.msd(w_star);
            if !msd.is_finite() {
                diverged[idx] = Some(AlgorithmError::Divergence {
                    method: cfg.method,
                    iteration: i,
                });
                continue;
            }
            traces[idx].push(msd);
        }
        if diverged.iter().all(Option::is_some) {
            break;
        }
    }

    Ok(configs
        .iter()
        .zip(states)
        .zip(traces)
        .zip(hashers)
        .zip(diverged)
        .map(|((((cfg, state), msd), hasher), divergence)| MethodTrace {
            method: cfg.method,
            msd,
            stream_digest: hasher.map(|h| h.finalize().into()),
            divergence,
            final_state: state,
        })
        .collect())
}

/// Runs a single method and returns its MSD series.
pub fn run(
    config: &AlgorithmConfig,
    problem: &ProblemInstance,
    comb: &CombinationMatrix,
    seed: u64,
    run_index: u64,
) -> Result<Vec<f64>, AlgorithmError> {
    let mut traces = run_methods(
        std::slice::from_ref(config),
        problem,
        comb,
        seed,
        run_index,
        RunOptions::default(),
    )?;
    let trace = traces.pop().expect("one method in, one trace out");
    match trace.divergence {
        Some(e) => Err(e),
        None => Ok(trace.msd),
    }
}
