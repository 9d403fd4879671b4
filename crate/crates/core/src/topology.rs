//! Network graphs and symmetric doubly-stochastic combination matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::linalg::{sym_eig, sym_sqrt, LinalgError, Matrix, SymMatrix};

/// Row/column sums of a combination matrix must be 1 within this.
pub const STOCHASTIC_TOL: f64 = 1e-12;
const RANDOM_GRAPH_RETRIES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("could not build a connected random graph after {0} attempts")]
    ConstructionFailure(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopologyKind {
    Line,
    Cycle,
    Grid,
    Complete,
    Random,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Line => "line",
            TopologyKind::Cycle => "cycle",
            TopologyKind::Grid => "grid",
            TopologyKind::Complete => "complete",
            TopologyKind::Random => "random",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = TopologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "line" | "linear" => Ok(TopologyKind::Line),
            "cycle" | "cyclic" | "ring" => Ok(TopologyKind::Cycle),
            "grid" => Ok(TopologyKind::Grid),
            "complete" | "full" | "fully_connected" => Ok(TopologyKind::Complete),
            "random" | "erdos_renyi" => Ok(TopologyKind::Random),
            other => Err(TopologyError::InvalidInput(format!(
                "unknown topology kind '{other}'"
            ))),
        }
    }
}

/// Undirected connected graph over `k` agents. Edges are stored as
/// `(low, high)` pairs, sorted, without duplicates or self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    kind: TopologyKind,
    k: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an explicit edge list, validating it.
    pub fn from_edges(
        kind: TopologyKind,
        k: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        if k == 0 {
            return Err(TopologyError::InvalidInput("K must be at least 1".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(TopologyError::InvalidInput(format!("self-loop at {a}")));
            }
            if a >= k || b >= k {
                return Err(TopologyError::InvalidInput(format!(
                    "edge ({a},{b}) out of range for K={k}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); k];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let g = Graph {
            kind,
            k,
            edges,
            neighbors,
        };
        if !g.is_connected() {
            return Err(TopologyError::InvalidInput("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn is_complete(&self) -> bool {
        self.edges.len() == self.k * (self.k - 1) / 2
    }

    fn is_connected(&self) -> bool {
        connected(self.k, &self.neighbors)
    }
}

fn connected(k: usize, neighbors: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; k];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &n in &neighbors[v] {
            if !seen[n] {
                seen[n] = true;
                count += 1;
                queue.push_back(n);
            }
        }
    }
    count == k
}

fn integer_sqrt(k: usize) -> Option<usize> {
    let r = (k as f64).sqrt().round() as usize;
    (r * r == k).then_some(r)
}

/// Builds a connected graph of the requested family.
///
/// `grid` needs a perfect-square `k` (√K × √K lattice, 4-neighbour).
/// `random` is Erdős–Rényi with edge probability `edge_probability`,
/// redrawn until connected.
pub fn build_graph(
    kind: TopologyKind,
    k: usize,
    edge_probability: Option<f64>,
    seed: Option<u64>,
) -> Result<Graph, TopologyError> {
    if k == 0 {
        return Err(TopologyError::InvalidInput("K must be at least 1".into()));
    }
    let mut edges = Vec::new();
    match kind {
        TopologyKind::Line => {
            edges.extend((1..k).map(|i| (i - 1, i)));
        }
        TopologyKind::Cycle => {
            edges.extend((1..k).map(|i| (i - 1, i)));
            if k >= 3 {
                edges.push((0, k - 1));
            }
        }
        TopologyKind::Grid => {
            let side = integer_sqrt(k).ok_or_else(|| {
                TopologyError::InvalidInput(format!("grid needs a perfect-square K, got {k}"))
            })?;
            for r in 0..side {
                for c in 0..side {
                    let v = r * side + c;
                    if c + 1 < side {
                        edges.push((v, v + 1));
                    }
                    if r + 1 < side {
                        edges.push((v, v + side));
                    }
                }
            }
        }
        TopologyKind::Complete => {
            for a in 0..k {
                for b in (a + 1)..k {
                    edges.push((a, b));
                }
            }
        }
        TopologyKind::Random => {
            let p = edge_probability.ok_or_else(|| {
                TopologyError::InvalidInput("random graph needs edge_probability".into())
            })?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(TopologyError::InvalidInput(format!(
                    "edge_probability must lie in (0, 1], got {p}"
                )));
            }
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.unwrap_or(0));
            for _ in 0..RANDOM_GRAPH_RETRIES {
                let mut candidate = Vec::new();
                let mut neighbors = vec![Vec::new(); k];
                for a in 0..k {
                    for b in (a + 1)..k {
                        if rng.random::<f64>() < p {
                            candidate.push((a, b));
                            neighbors[a].push(b);
                            neighbors[b].push(a);
                        }
                    }
                }
                if connected(k, &neighbors) {
                    return Graph::from_edges(kind, k, candidate);
                }
            }
            return Err(TopologyError::ConstructionFailure(RANDOM_GRAPH_RETRIES));
        }
    }
    Graph::from_edges(kind, k, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    Metropolis,
    Uniform,
}

impl FromStr for WeightRule {
    type Err = TopologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "metropolis" | "metropolis_hastings" => Ok(WeightRule::Metropolis),
            "uniform" => Ok(WeightRule::Uniform),
            other => Err(TopologyError::InvalidInput(format!(
                "unknown weight rule '{other}'"
            ))),
        }
    }
}

impl fmt::Display for WeightRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightRule::Metropolis => "metropolis",
            WeightRule::Uniform => "uniform",
        })
    }
}

/// Column-sparse view of a combination matrix: `columns[k]` lists
/// `(ℓ, a_ℓk)` for every nonzero weight agent `k` receives.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    columns: Vec<Vec<(usize, f64)>>,
}

impl SparseWeights {
    fn from_dense(m: &SymMatrix) -> Self {
        let n = m.dim();
        let columns = (0..n)
            .map(|k| {
                (0..n)
                    .filter(|&l| m[(l, k)] != 0.0)
                    .map(|l| (l, m[(l, k)]))
                    .collect()
            })
            .collect();
        SparseWeights { columns }
    }

    pub fn column(&self, k: usize) -> &[(usize, f64)] {
        &self.columns[k]
    }

    /// `out[k] = Σ_ℓ a_ℓk · input[ℓ]`, i.e. `out = Aᵀ input` over agent rows.
    pub fn combine_into(&self, input: &Matrix, out: &mut Matrix) {
        debug_assert_eq!(input.rows(), self.columns.len());
        for (k, col) in self.columns.iter().enumerate() {
            let dst = out.row_mut(k);
            dst.iter_mut().for_each(|v| *v = 0.0);
            for &(l, w) in col {
                for (d, s) in dst.iter_mut().zip(input.row(l)) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Symmetric doubly-stochastic weights together with the derived
/// exact-diffusion matrices and spectral quantities.
#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    rule: WeightRule,
    a: SymMatrix,
    abar: SymMatrix,
    v: SymMatrix,
    a_sparse: SparseWeights,
    abar_sparse: SparseWeights,
    eigenvalues: Vec<f64>,
    /// second-largest eigenvalue of `A`
    pub lambda2: f64,
    /// smallest eigenvalue of `A`
    pub lambda_k: f64,
    /// `max{|λ₂|, |λ_K|}`
    pub lambda: f64,
    /// `λ₂(Ā) = (1 + λ₂)/2`
    pub lambda_prime: f64,
}

impl CombinationMatrix {
    /// Validates `a` against `graph` and derives Ā, V and the spectrum.
    ///
    /// For `K = 1` there are no non-consensus modes; λ₂, λ_K and λ are
    /// reported as 0 and λ′ as 1/2.
    pub fn from_matrix(
        rule: WeightRule,
        graph: &Graph,
        a: SymMatrix,
    ) -> Result<Self, TopologyError> {
        let k = graph.k();
        if a.dim() != k {
            return Err(TopologyError::InvalidInput(format!(
                "weight matrix is {}x{}, graph has K={k}",
                a.dim(),
                a.dim()
            )));
        }
        for i in 0..k {
            let row: f64 = (0..k).map(|j| a[(i, j)]).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL {
                return Err(TopologyError::InvalidInput(format!(
                    "row {i} sums to {row}, expected 1"
                )));
            }
            for j in 0..k {
                let w = a[(i, j)];
                if w < 0.0 {
                    return Err(TopologyError::InvalidInput(format!(
                        "negative weight at ({i},{j})"
                    )));
                }
                if i != j && w != 0.0 && !graph.has_edge(i, j) {
                    return Err(TopologyError::InvalidInput(format!(
                        "weight at ({i},{j}) outside the graph support"
                    )));
                }
            }
        }

        let abar = SymMatrix::new(Matrix::from_fn(k, k, |i, j| {
            0.5 * (a[(i, j)] + if i == j { 1.0 } else { 0.0 })
        }))?;
        let i_minus_abar = SymMatrix::new(Matrix::from_fn(k, k, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - abar[(i, j)]
        }))?;
        let v = sym_sqrt(&i_minus_abar)?;

        let eig = sym_eig(&a)?;
        let (lambda2, lambda_k) = if k == 1 {
            (0.0, 0.0)
        } else {
            (eig.values[1], eig.values[k - 1])
        };
        let lambda = lambda2.abs().max(lambda_k.abs());
        let lambda_prime = 0.5 * (1.0 + lambda2);

        Ok(CombinationMatrix {
            rule,
            a_sparse: SparseWeights::from_dense(&a),
            abar_sparse: SparseWeights::from_dense(&abar),
            a,
            abar,
            v,
            eigenvalues: eig.values,
            lambda2,
            lambda_k,
            lambda,
            lambda_prime,
        })
    }

    pub fn rule(&self) -> WeightRule {
        self.rule
    }

    pub fn k(&self) -> usize {
        self.a.dim()
    }

    pub fn a(&self) -> &SymMatrix {
        &self.a
    }

    pub fn abar(&self) -> &SymMatrix {
        &self.abar
    }

    pub fn v(&self) -> &SymMatrix {
        &self.v
    }

    pub fn a_sparse(&self) -> &SparseWeights {
        &self.a_sparse
    }

    pub fn abar_sparse(&self) -> &SparseWeights {
        &self.abar_sparse
    }

    /// Eigenvalues of `A`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `1 − λ`.
    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.lambda
    }

    /// Dense `A` as CSV rows.
    pub fn to_csv(&self) -> String {
        let k = self.k();
        let mut s = String::new();
        for i in 0..k {
            let row: Vec<String> = (0..k).map(|j| format!("{}", self.a[(i, j)])).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Metropolis–Hastings weights `a_ℓk = 1/(1 + max(deg ℓ, deg k))`.
pub fn metropolis_weights(g: &Graph) -> Result<CombinationMatrix, TopologyError> {
    let k = g.k();
    let mut a = Matrix::zeros(k, k);
    for &(l, m) in g.edges() {
        let w = 1.0 / (1.0 + g.degree(l).max(g.degree(m)) as f64);
        a[(l, m)] = w;
        a[(m, l)] = w;
    }
    for i in 0..k {
        let off: f64 = g.neighbors(i).iter().map(|&j| a[(j, i)]).sum();
        a[(i, i)] = 1.0 - off;
    }
    CombinationMatrix::from_matrix(WeightRule::Metropolis, g, SymMatrix::new(a)?)
}

/// `a_ℓk = 1/K` everywhere; only defined on complete graphs.
pub fn uniform_weights(g: &Graph) -> Result<CombinationMatrix, TopologyError> {
    if !g.is_complete() {
        return Err(TopologyError::InvalidInput(
            "uniform weights require a complete graph".into(),
        ));
    }
    let k = g.k();
    let w = 1.0 / k as f64;
    let a = Matrix::from_fn(k, k, |_, _| w);
    CombinationMatrix::from_matrix(WeightRule::Uniform, g, SymMatrix::new(a)?)
}

pub fn combination_matrix(g: &Graph, rule: WeightRule) -> Result<CombinationMatrix, TopologyError> {
    match rule {
        WeightRule::Metropolis => metropolis_weights(g),
        WeightRule::Uniform => uniform_weights(g),
    }
}

/// Spectral gap `1 − λ` of the Metropolis matrix for each size.
pub fn spectral_gap_scan(
    kind: TopologyKind,
    sizes: &[usize],
) -> Result<Vec<(usize, f64)>, TopologyError> {
    sizes
        .iter()
        .map(|&k| {
            let g = build_graph(kind, k, None, None)?;
            Ok((k, metropolis_weights(&g)?.spectral_gap()))
        })
        .collect()
}
