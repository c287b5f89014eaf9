//! Node statistics on projected graphs.
//!
//! All measures read the unweighted skeleton of a projection. The raw
//! functions take a [`SimpleGraph`] and return one value per node index; the
//! `*_centrality` wrappers attach node ids and graph identity.

pub mod features;

pub use features::{
    assemble_firm_features, extended_feature_names, firm_feature_name, investor_feature_name, measurement_years,
    CentralityStore, FirmFeatureVector, InvestorScope, MissingReason,
};

use crate::graph::{ProjectedGraph, Side, SimpleGraph};
use crate::linalg::{Cholesky, Matrix, SymmetricEigen};
use crate::scalar::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum CentralityError {
    #[error("{measure} did not converge within {iterations} iterations")]
    NoConvergence { measure: Measure, iterations: usize },
    #[error("{measure}: component of {size} nodes exceeds the cap of {cap}")]
    ComponentTooLarge { measure: Measure, size: usize, cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Degree,
    Betweenness,
    Eigenvector,
    Voterank,
    Pagerank,
    Closeness,
    Subgraph,
    AvgNeighborDegree,
    CurrentFlowBetweenness,
}

impl Measure {
    pub const ALL: [Measure; 9] = [
        Measure::Degree,
        Measure::Betweenness,
        Measure::Eigenvector,
        Measure::Voterank,
        Measure::Pagerank,
        Measure::Closeness,
        Measure::Subgraph,
        Measure::AvgNeighborDegree,
        Measure::CurrentFlowBetweenness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Degree => "degree",
            Measure::Betweenness => "betweenness",
            Measure::Eigenvector => "eigenvector",
            Measure::Voterank => "voterank",
            Measure::Pagerank => "pagerank",
            Measure::Closeness => "closeness",
            Measure::Subgraph => "subgraph",
            Measure::AvgNeighborDegree => "avg_neighbor_degree",
            Measure::CurrentFlowBetweenness => "current_flow_betweenness",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Measure::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| format!("unknown measure `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralityOptions {
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
    pub damping: f64,
    pub pagerank_tol: f64,
    pub pagerank_max_iter: usize,
    /// Largest component handled by subgraph centrality.
    pub subgraph_cap: usize,
    /// Largest component handled by the Laplacian-inverse current-flow path.
    pub current_flow_cap: usize,
}

impl Default for CentralityOptions {
    fn default() -> Self {
        CentralityOptions {
            eigen_tol: 1e-10,
            eigen_max_iter: 1000,
            damping: 0.85,
            pagerank_tol: 1e-12,
            pagerank_max_iter: 1000,
            subgraph_cap: 10_000,
            current_flow_cap: 10_000,
        }
    }
}

/// One measure evaluated on every node of one projected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralityTable<F> {
    pub side: Side,
    pub year: i32,
    pub measure: Measure,
    nodes: Vec<String>,
    values: Vec<F>,
}

impl<F: Scalar> CentralityTable<F> {
    pub fn new(g: &ProjectedGraph, measure: Measure, values: Vec<F>) -> Self {
        assert_eq!(values.len(), g.node_count());
        CentralityTable {
            side: g.side(),
            year: g.year(),
            measure,
            nodes: g.nodes().to_vec(),
            values,
        }
    }

    pub fn get(&self, node: &str) -> Option<F> {
        self.nodes
            .binary_search_by(|n| n.as_str().cmp(node))
            .ok()
            .map(|i| self.values[i])
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, F)> + '_ {
        self.nodes.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Degree over `n - 1`; zero for a single node.
pub fn degree<F: Scalar>(g: &SimpleGraph) -> Vec<F> {
    let n = g.node_count();
    if n < 2 {
        return vec![F::zero(); n];
    }
    let denom = F::count(n - 1);
    (0..n).map(|v| F::count(g.degree(v)) / denom).collect()
}

/// Shortest-path betweenness (Brandes), normalised by `(n-1)(n-2)/2`.
pub fn betweenness<F: Scalar>(g: &SimpleGraph) -> Vec<F> {
    let n = g.node_count();
    let mut cb = vec![F::zero(); n];
    if n < 3 {
        return cb;
    }
    let mut sigma = vec![F::zero(); n];
    let mut dist = vec![usize::MAX; n];
    let mut delta = vec![F::zero(); n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    for s in 0..n {
        sigma.iter_mut().for_each(|x| *x = F::zero());
        dist.iter_mut().for_each(|x| *x = usize::MAX);
        delta.iter_mut().for_each(|x| *x = F::zero());
        order.clear();
        sigma[s] = F::one();
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in g.neighbors(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    let sv = sigma[v];
                    sigma[w] += sv;
                }
            }
        }
        for &w in order.iter().rev() {
            for &v in g.neighbors(w) {
                if dist[v] != usize::MAX && dist[v] + 1 == dist[w] {
                    let c = sigma[v] / sigma[w] * (F::one() + delta[w]);
                    delta[v] += c;
                }
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    // Each unordered pair was counted from both ends.
    let scale = F::lit(2.0) / (F::count(n - 1) * F::count(n - 2));
    let half = F::lit(0.5);
    cb.into_iter().map(|x| x * half * scale).collect()
}

/// Principal adjacency eigenvector, computed per connected component by
/// power iteration on `A + I`. Each component's unit eigenvector is scaled
/// by `sqrt(n_c / N)`, where `N` counts nodes in components with at least one
/// edge, so the whole vector has unit norm. Isolated nodes get zero. A graph
/// without edges has no principal eigenvector and reports `NoConvergence`.
pub fn eigenvector<F: Scalar>(g: &SimpleGraph, tol: F, max_iter: usize) -> Result<Vec<F>, CentralityError> {
    let n = g.node_count();
    let comps: Vec<Vec<usize>> = g.components().into_iter().filter(|c| c.len() > 1).collect();
    let covered: usize = comps.iter().map(Vec::len).sum();
    if covered == 0 {
        return Err(CentralityError::NoConvergence {
            measure: Measure::Eigenvector,
            iterations: 0,
        });
    }
    let mut out = vec![F::zero(); n];
    for comp in &comps {
        let sub = g.induced(comp);
        let m = comp.len();
        let mut x = vec![F::one() / F::count(m).sqrt(); m];
        let mut next = vec![F::zero(); m];
        let mut converged = false;
        for _ in 0..max_iter {
            for v in 0..m {
                let mut s = x[v];
                for &u in sub.neighbors(v) {
                    s += x[u];
                }
                next[v] = s;
            }
            let norm = next.iter().fold(F::zero(), |a, &b| a + b * b).sqrt();
            let mut change = F::zero();
            for v in 0..m {
                next[v] /= norm;
                change = change.max((next[v] - x[v]).abs());
            }
            std::mem::swap(&mut x, &mut next);
            if change < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(CentralityError::NoConvergence {
                measure: Measure::Eigenvector,
                iterations: max_iter,
            });
        }
        let w = (F::count(m) / F::count(covered)).sqrt();
        for (i, &v) in comp.iter().enumerate() {
            out[v] = x[i] * w;
        }
    }
    Ok(out)
}

/// Order in which VoteRank elects spreaders. Ties go to the lowest node
/// index; the voting-ability decrement is one over the mean degree of the
/// original graph.
pub fn voterank_order<F: Scalar>(g: &SimpleGraph) -> Vec<usize> {
    let n = g.node_count();
    let m2: usize = (0..n).map(|v| g.degree(v)).sum();
    if m2 == 0 {
        return Vec::new();
    }
    let decrement = F::count(n) / F::count(m2);
    let mut ability = vec![F::one(); n];
    let mut elected = vec![false; n];
    let mut order = Vec::new();
    let mut score = vec![F::zero(); n];
    for _ in 0..n {
        for v in 0..n {
            score[v] = if elected[v] {
                F::zero()
            } else {
                g.neighbors(v).iter().fold(F::zero(), |acc, &u| acc + ability[u])
            };
        }
        let mut best = 0;
        for v in 1..n {
            if score[v] > score[best] {
                best = v;
            }
        }
        if score[best] <= F::zero() {
            break;
        }
        order.push(best);
        elected[best] = true;
        ability[best] = F::zero();
        for &u in g.neighbors(best) {
            ability[u] = (ability[u] - decrement).max(F::zero());
        }
    }
    order
}

/// VoteRank position (1 = elected first); nodes never elected share rank
/// `elected + 1`.
pub fn voterank<F: Scalar>(g: &SimpleGraph) -> Vec<F> {
    let order = voterank_order::<F>(g);
    let mut rank = vec![F::count(order.len() + 1); g.node_count()];
    for (i, &v) in order.iter().enumerate() {
        rank[v] = F::count(i + 1);
    }
    rank
}

/// Damped random-walk stationary vector; isolated nodes are dangling and
/// spread their mass uniformly.
pub fn pagerank<F: Scalar>(
    g: &SimpleGraph,
    damping: F,
    tol: F,
    max_iter: usize,
) -> Result<Vec<F>, CentralityError> {
    let n = g.node_count();
    if n == 0 {
        return Ok(Vec::new());
    }
    let nf = F::count(n);
    let mut x = vec![F::one() / nf; n];
    let mut next = vec![F::zero(); n];
    let teleport = (F::one() - damping) / nf;
    for _ in 0..max_iter {
        let dangling = (0..n)
            .filter(|&v| g.degree(v) == 0)
            .fold(F::zero(), |a, v| a + x[v]);
        let base = teleport + damping * dangling / nf;
        for v in 0..n {
            let mut s = F::zero();
            for &u in g.neighbors(v) {
                s += x[u] / F::count(g.degree(u));
            }
            next[v] = base + damping * s;
        }
        let err = x.iter().zip(&next).fold(F::zero(), |a, (&p, &q)| a + (p - q).abs());
        std::mem::swap(&mut x, &mut next);
        if err < nf * tol {
            let total = crate::scalar::sum(&x);
            return Ok(x.into_iter().map(|v| v / total).collect());
        }
    }
    Err(CentralityError::NoConvergence {
        measure: Measure::Pagerank,
        iterations: max_iter,
    })
}

fn bfs_distances(g: &SimpleGraph, s: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) {
    dist.iter_mut().for_each(|d| *d = usize::MAX);
    dist[s] = 0;
    queue.clear();
    queue.push_back(s);
    while let Some(v) = queue.pop_front() {
        for &w in g.neighbors(v) {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
}

/// Closeness scaled by the reachable fraction: `(r/(n-1)) * (r / sum d)`.
pub fn closeness<F: Scalar>(g: &SimpleGraph) -> Vec<F> {
    let n = g.node_count();
    let mut out = vec![F::zero(); n];
    if n < 2 {
        return out;
    }
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for v in 0..n {
        bfs_distances(g, v, &mut dist, &mut queue);
        let (mut reach, mut total) = (0usize, 0usize);
        for &d in &dist {
            if d != usize::MAX && d > 0 {
                reach += 1;
                total += d;
            }
        }
        if total > 0 {
            let r = F::count(reach);
            out[v] = (r / F::count(n - 1)) * (r / F::count(total));
        }
    }
    out
}

/// Components up to this size use a dense eigendecomposition.
const SUBGRAPH_DENSE_MAX: usize = 64;

/// `sum_j u_j(v)^2 exp(lambda_j)` over adjacency eigenpairs, per component.
///
/// Larger components use Lanczos quadrature on each node instead.
pub fn subgraph<F: Scalar>(g: &SimpleGraph, cap: usize) -> Result<Vec<F>, CentralityError> {
    let n = g.node_count();
    let mut out = vec![F::one(); n];
    let fail = CentralityError::NoConvergence {
        measure: Measure::Subgraph,
        iterations: 0,
    };
    for comp in g.components() {
        let m = comp.len();
        if m == 1 {
            continue;
        }
        if m > cap {
            return Err(CentralityError::ComponentTooLarge {
                measure: Measure::Subgraph,
                size: m,
                cap,
            });
        }
        let sub = g.induced(&comp);
        let sc = if m <= SUBGRAPH_DENSE_MAX {
            subgraph_dense::<F>(&sub).ok_or(fail.clone())?
        } else {
            (0..m)
                .into_par_iter()
                .map(|v| lanczos_exp_diagonal::<F>(&sub, v))
                .collect::<Option<Vec<F>>>()
                .ok_or(fail.clone())?
        };
        for (i, &v) in comp.iter().enumerate() {
            out[v] = sc[i];
        }
    }
    Ok(out)
}

fn subgraph_dense<F: Scalar>(g: &SimpleGraph) -> Option<Vec<F>> {
    let m = g.node_count();
    let a = Matrix::from_fn(m, m, |i, j| if g.has_edge(i, j) { F::one() } else { F::zero() });
    let eig = SymmetricEigen::new(&a).ok()?;
    let mut sc = vec![F::zero(); m];
    for (j, &lambda) in eig.values.iter().enumerate() {
        let w = lambda.exp();
        for (v, &u) in eig.vectors.row(j).iter().enumerate() {
            sc[v] += u * u * w;
        }
    }
    Some(sc)
}

/// `e_v' exp(A) e_v` by Gauss quadrature on the Lanczos tridiagonal.
fn lanczos_exp_diagonal<F: Scalar>(g: &SimpleGraph, v: usize) -> Option<F> {
    const MAX_STEPS: usize = 300;
    let m = g.node_count();
    let mut prev = vec![F::zero(); m];
    let mut q = vec![F::zero(); m];
    q[v] = F::one();
    let mut w = vec![F::zero(); m];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut last = F::zero();
    let mut stable = 0usize;
    let tol = F::lit(1e-14);
    for step in 0..MAX_STEPS.min(m) {
        for (i, wi) in w.iter_mut().enumerate() {
            let mut acc = F::zero();
            for &u in g.neighbors(i) {
                acc += q[u];
            }
            *wi = acc;
        }
        if let Some(&b) = beta.last() {
            for (wi, &p) in w.iter_mut().zip(&prev) {
                *wi -= b * p;
            }
        }
        let a = w.iter().zip(&q).fold(F::zero(), |s, (&x, &y)| s + x * y);
        for (wi, &qi) in w.iter_mut().zip(&q) {
            *wi -= a * qi;
        }
        alpha.push(a);
        let (nodes, weights) = crate::linalg::tridiagonal_gauss(&alpha, &beta).ok()?;
        let est = nodes.iter().zip(&weights).fold(F::zero(), |s, (&x, &wt)| s + wt * x.exp());
        if step > 0 && (est - last).abs() <= tol * est {
            stable += 1;
            if stable >= 2 {
                return Some(est);
            }
        } else {
            stable = 0;
        }
        last = est;
        let b = w.iter().fold(F::zero(), |s, &x| s + x * x).sqrt();
        if b <= tol {
            return Some(est);
        }
        beta.push(b);
        std::mem::swap(&mut prev, &mut q);
        for (qi, &wi) in q.iter_mut().zip(&w) {
            *qi = wi / b;
        }
    }
    (m <= MAX_STEPS).then_some(last)
}

/// Mean degree of a node's neighbours; zero for isolated nodes.
pub fn average_neighbor_degree<F: Scalar>(g: &SimpleGraph) -> Vec<F> {
    (0..g.node_count())
        .map(|v| {
            let ns = g.neighbors(v);
            if ns.is_empty() {
                F::zero()
            } else {
                let total: usize = ns.iter().map(|&u| g.degree(u)).sum();
                F::count(total) / F::count(ns.len())
            }
        })
        .collect()
}

/// Current-flow (random-walk) betweenness per connected component,
/// normalised by `(n_c-1)(n_c-2)/2`. Uses the inverse of the grounded
/// Laplacian and, for each edge, a sorted sweep over source potentials.
pub fn current_flow_betweenness<F: Scalar>(g: &SimpleGraph, cap: usize) -> Result<Vec<F>, CentralityError> {
    let n = g.node_count();
    let mut out = vec![F::zero(); n];
    for comp in g.components() {
        let m = comp.len();
        if m <= 2 {
            continue;
        }
        if m > cap {
            return Err(CentralityError::ComponentTooLarge {
                measure: Measure::CurrentFlowBetweenness,
                size: m,
                cap,
            });
        }
        let sub = g.induced(&comp);
        let c = grounded_laplacian_inverse::<F>(&sub);
        let edges: Vec<(usize, usize)> = sub.edges().collect();
        let sums: Vec<F> = edges
            .par_iter()
            .map(|&(u, w)| {
                let mut row: Vec<F> = c.row(u).iter().zip(c.row(w)).map(|(&a, &b)| a - b).collect();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
                row.iter().enumerate().fold(F::zero(), |acc, (i, &x)| {
                    acc + x * (F::count(m - 1) - F::lit(2.0) * F::count(i))
                })
            })
            .collect();
        let mut acc = vec![F::zero(); m];
        for (&(u, w), &s) in edges.iter().zip(&sums) {
            acc[u] += s;
            acc[w] += s;
        }
        let denom = F::count(m - 1) * F::count(m - 2);
        for (i, &v) in comp.iter().enumerate() {
            out[v] = ((acc[i] - F::count(m - 1)) / denom).max(F::zero());
        }
    }
    Ok(out)
}

/// Inverse of the Laplacian with the last node grounded, padded with a zero
/// row and column for that node.
fn grounded_laplacian_inverse<F: Scalar>(g: &SimpleGraph) -> Matrix<F> {
    let m = g.node_count();
    let r = m - 1;
    let mut lap = Matrix::zeros(r, r);
    for v in 0..r {
        lap[(v, v)] = F::count(g.degree(v));
        for &u in g.neighbors(v) {
            if u < r {
                lap[(v, u)] = -F::one();
            }
        }
    }
    let inv = Cholesky::new(&lap)
        .expect("grounded Laplacian of a connected graph is positive definite")
        .inverse();
    Matrix::from_fn(m, m, |i, j| if i < r && j < r { inv[(i, j)] } else { F::zero() })
}

/// Evaluates `measure` on the skeleton of `g`.
pub fn compute<F: Scalar>(
    measure: Measure,
    g: &ProjectedGraph,
    opts: &CentralityOptions,
) -> Result<CentralityTable<F>, CentralityError> {
    let sk = g.skeleton();
    let values = compute_raw(measure, &sk, opts)?;
    Ok(CentralityTable::new(g, measure, values))
}

pub fn compute_raw<F: Scalar>(
    measure: Measure,
    sk: &SimpleGraph,
    opts: &CentralityOptions,
) -> Result<Vec<F>, CentralityError> {
    Ok(match measure {
        Measure::Degree => degree(sk),
        Measure::Betweenness => betweenness(sk),
        Measure::Eigenvector => eigenvector(sk, F::lit(opts.eigen_tol), opts.eigen_max_iter)?,
        Measure::Voterank => voterank(sk),
        Measure::Pagerank => pagerank(
            sk,
            F::lit(opts.damping),
            F::lit(opts.pagerank_tol),
            opts.pagerank_max_iter,
        )?,
        Measure::Closeness => closeness(sk),
        Measure::Subgraph => subgraph(sk, opts.subgraph_cap)?,
        Measure::AvgNeighborDegree => average_neighbor_degree(sk),
        Measure::CurrentFlowBetweenness => current_flow_betweenness(sk, opts.current_flow_cap)?,
    })
}

pub fn degree_centrality<F: Scalar>(g: &ProjectedGraph) -> CentralityTable<F> {
    CentralityTable::new(g, Measure::Degree, degree(&g.skeleton()))
}

pub fn betweenness_centrality<F: Scalar>(g: &ProjectedGraph) -> CentralityTable<F> {
    CentralityTable::new(g, Measure::Betweenness, betweenness(&g.skeleton()))
}

pub fn eigenvector_centrality<F: Scalar>(
    g: &ProjectedGraph,
    tol: F,
    max_iter: usize,
) -> Result<CentralityTable<F>, CentralityError> {
    Ok(CentralityTable::new(g, Measure::Eigenvector, eigenvector(&g.skeleton(), tol, max_iter)?))
}

pub fn voterank_centrality<F: Scalar>(g: &ProjectedGraph) -> CentralityTable<F> {
    CentralityTable::new(g, Measure::Voterank, voterank(&g.skeleton()))
}

pub fn pagerank_centrality<F: Scalar>(
    g: &ProjectedGraph,
    damping: F,
    tol: F,
) -> Result<CentralityTable<F>, CentralityError> {
    Ok(CentralityTable::new(g, Measure::Pagerank, pagerank(&g.skeleton(), damping, tol, 1000)?))
}

pub fn closeness_centrality<F: Scalar>(g: &ProjectedGraph) -> CentralityTable<F> {
    CentralityTable::new(g, Measure::Closeness, closeness(&g.skeleton()))
}

pub fn subgraph_centrality<F: Scalar>(g: &ProjectedGraph, cap: usize) -> Result<CentralityTable<F>, CentralityError> {
    Ok(CentralityTable::new(g, Measure::Subgraph, subgraph(&g.skeleton(), cap)?))
}

pub fn average_neighbor_degree_centrality<F: Scalar>(g: &ProjectedGraph) -> CentralityTable<F> {
    CentralityTable::new(g, Measure::AvgNeighborDegree, average_neighbor_degree(&g.skeleton()))
}

pub fn current_flow_betweenness_centrality<F: Scalar>(
    g: &ProjectedGraph,
    cap: usize,
) -> Result<CentralityTable<F>, CentralityError> {
    Ok(CentralityTable::new(
        g,
        Measure::CurrentFlowBetweenness,
        current_flow_betweenness(&g.skeleton(), cap)?,
    ))
}
