//! Brute-force reference implementations used by the integration tests.
//! Everything here works from definitions on dense matrices and shares no
//! code with the library beyond the input graph type.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::Write;
use vcnet_core::graph::SimpleGraph;

/// Prints straight to the process stdout so the line survives test capture.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn adjacency(g: &SimpleGraph) -> Vec<Vec<f64>> {
    let n = g.node_count();
    (0..n)
        .map(|i| (0..n).map(|j| if i != j && g.has_edge(i, j) { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn gnp(n: usize, p: f64, rng: &mut impl Rng) -> SimpleGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SimpleGraph::from_edges(n, edges)
}

// ---------- linear algebra ----------

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
        let mut r = r.clone();
        r.push(bi);
        r
    }).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap())?;
        if m[piv][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, piv);
        for r in (c + 1)..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Some(x)
}

/// Cyclic Jacobi rotations; returns eigenvalues and eigenvectors as columns.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sgn / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

// ---------- graph oracles ----------

pub fn components(a: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = a.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut i = 0;
        while i < comp.len() {
            let v = comp[i];
            for u in 0..n {
                if a[v][u] > 0.0 && !seen[u] {
                    seen[u] = true;
                    comp.push(u);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn floyd_warshall(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else if a[i][j] > 0.0 { 1.0 } else { f64::INFINITY }).collect())
        .collect();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Number of shortest paths between every pair.
pub fn path_counts(a: &[Vec<f64>], d: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut sigma = vec![vec![0.0; n]; n];
    for s in 0..n {
        let mut by_dist: Vec<usize> = (0..n).filter(|&t| d[s][t].is_finite()).collect();
        by_dist.sort_by(|&x, &y| d[s][x].partial_cmp(&d[s][y]).unwrap());
        for &t in &by_dist {
            sigma[s][t] = if t == s {
                1.0
            } else {
                (0..n).filter(|&u| a[u][t] > 0.0 && d[s][u] + 1.0 == d[s][t]).map(|u| sigma[s][u]).sum()
            };
        }
    }
    sigma
}

pub fn degree(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    a.iter().map(|r| if n < 2 { 0.0 } else { r.iter().sum::<f64>() / (n - 1) as f64 }).collect()
}

pub fn betweenness(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    if n < 3 {
        return out;
    }
    let d = floyd_warshall(a);
    let sigma = path_counts(a, &d);
    for s in 0..n {
        for t in (s + 1)..n {
            if !d[s][t].is_finite() {
                continue;
            }
            for v in 0..n {
                if v != s && v != t && d[s][v] + d[v][t] == d[s][t] {
                    out[v] += sigma[s][v] * sigma[v][t] / sigma[s][t];
                }
            }
        }
    }
    let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
    out.iter().map(|x| x / norm).collect()
}

pub fn closeness(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let d = floyd_warshall(a);
    (0..n)
        .map(|v| {
            let reach: Vec<f64> = (0..n).filter(|&u| u != v && d[v][u].is_finite()).map(|u| d[v][u]).collect();
            let total: f64 = reach.iter().sum();
            if total == 0.0 {
                0.0
            } else {
                let r = reach.len() as f64;
                (r / (n - 1) as f64) * (r / total)
            }
        })
        .collect()
}

/// Perron vector of each non-trivial component, scaled by sqrt(n_c / N).
pub fn eigenvector(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let comps: Vec<Vec<usize>> = components(a).into_iter().filter(|c| c.len() > 1).collect();
    let covered: usize = comps.iter().map(Vec::len).sum();
    let mut out = vec![0.0; n];
    for c in &comps {
        let sub: Vec<Vec<f64>> = c.iter().map(|&i| c.iter().map(|&j| a[i][j]).collect()).collect();
        let (vals, vecs) = jacobi_eigen(&sub);
        let top = (0..c.len()).max_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap()).unwrap();
        let mut x: Vec<f64> = vecs.iter().map(|r| r[top].abs()).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = (c.len() as f64 / covered as f64).sqrt();
        x.iter_mut().for_each(|v| *v *= w / norm);
        for (k, &i) in c.iter().enumerate() {
            out[i] = x[k];
        }
    }
    out
}

/// Stationary vector of the damped walk with uniform dangling redistribution,
/// solved as a linear system.
pub fn pagerank(a: &[Vec<f64>], damping: f64) -> Vec<f64> {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    // x = d S x + (1-d)/n 1, with S column stochastic.
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s = if deg[j] == 0.0 { 1.0 / n as f64 } else { a[j][i] / deg[j] };
                    (if i == j { 1.0 } else { 0.0 }) - damping * s
                })
                .collect()
        })
        .collect();
    let x = solve(&m, &vec![(1.0 - damping) / n as f64; n]).unwrap();
    let total: f64 = x.iter().sum();
    x.iter().map(|v| v / total).collect()
}

/// Diagonal of exp(A) from the Taylor series; every term is non-negative.
pub fn subgraph(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut term: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut out = vec![1.0; n];
    for k in 1..400 {
        let next: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|l| term[i][l] * a[l][j]).sum::<f64>() / k as f64).collect())
            .collect();
        term = next;
        let mut small = true;
        for i in 0..n {
            out[i] += term[i][i];
            let row_max = term[i].iter().cloned().fold(0.0, f64::max);
            if row_max > 1e-18 * out[i] {
                small = false;
            }
        }
        if small && k > 2 * n {
            break;
        }
    }
    out
}

pub fn avg_neighbor_degree(a: &[Vec<f64>]) -> Vec<f64> {
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    a.iter()
        .zip(&deg)
        .map(|(r, &k)| if k == 0.0 { 0.0 } else { r.iter().zip(&deg).map(|(x, d)| x * d).sum::<f64>() / k })
        .collect()
}

/// Unit current from s to t on every pair of each component; a node's
/// throughput is half the absolute current on its edges.
pub fn current_flow_betweenness(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    for c in components(a) {
        let m = c.len();
        if m <= 2 {
            continue;
        }
        let sub: Vec<Vec<f64>> = c.iter().map(|&i| c.iter().map(|&j| a[i][j]).collect()).collect();
        let mut acc = vec![0.0; m];
        for s in 0..m {
            for t in (s + 1)..m {
                // Ground t and solve L p = e_s on the rest.
                let idx: Vec<usize> = (0..m).filter(|&v| v != t).collect();
                let lap: Vec<Vec<f64>> = idx
                    .iter()
                    .map(|&i| {
                        idx.iter()
                            .map(|&j| if i == j { sub[i].iter().sum() } else { -sub[i][j] })
                            .collect()
                    })
                    .collect();
                let b: Vec<f64> = idx.iter().map(|&i| if i == s { 1.0 } else { 0.0 }).collect();
                let x = solve(&lap, &b).unwrap();
                let mut p = vec![0.0; m];
                for (k, &i) in idx.iter().enumerate() {
                    p[i] = x[k];
                }
                for v in 0..m {
                    if v == s || v == t {
                        continue;
                    }
                    let through: f64 = (0..m).filter(|&u| sub[v][u] > 0.0).map(|u| (p[v] - p[u]).abs()).sum();
                    acc[v] += through / 2.0;
                }
            }
        }
        let norm = ((m - 1) * (m - 2)) as f64 / 2.0;
        for (k, &i) in c.iter().enumerate() {
            out[i] = acc[k] / norm;
        }
    }
    out
}

/// VoteRank positions (1-based); never-elected nodes share `elected + 1`.
pub fn voterank(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = deg.iter().sum();
    if total == 0.0 {
        return vec![1.0; n];
    }
    let f = n as f64 / total;
    let mut va = vec![1.0; n];
    let mut chosen: Vec<usize> = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for v in 0..n {
            if chosen.contains(&v) {
                continue;
            }
            let score: f64 = (0..n).map(|u| a[v][u] * va[u]).sum();
            if score > 0.0 && best.is_none_or(|(_, b)| score > b) {
                best = Some((v, score));
            }
        }
        let Some((v, _)) = best else { break };
        chosen.push(v);
        va[v] = 0.0;
        for u in 0..n {
            if a[v][u] > 0.0 {
                va[u] = (va[u] - f).max(0.0);
            }
        }
    }
    let mut rank = vec![(chosen.len() + 1) as f64; n];
    for (i, &v) in chosen.iter().enumerate() {
        rank[v] = (i + 1) as f64;
    }
    rank
}

// ---------- graph enumeration ----------

fn canonical(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut deg = vec![0usize; n];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    // Only permutations that keep vertices sorted by degree.
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut by_deg: Vec<usize> = (0..n).collect();
    by_deg.sort_by_key(|&v| deg[v]);
    for v in by_deg {
        match classes.last_mut() {
            Some(c) if deg[c[0]] == deg[v] => c.push(v),
            _ => classes.push(vec![v]),
        }
    }
    let mut best: Option<Vec<(usize, usize)>> = None;
    let mut perm = vec![0usize; n];
    fn rec(
        ci: usize,
        classes: &mut Vec<Vec<usize>>,
        order: &mut Vec<usize>,
        perm: &mut Vec<usize>,
        edges: &BTreeSet<(usize, usize)>,
        best: &mut Option<Vec<(usize, usize)>>,
    ) {
        if ci == classes.len() {
            for (pos, &v) in order.iter().enumerate() {
                perm[v] = pos;
            }
            let mut e: Vec<(usize, usize)> = edges
                .iter()
                .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
                .collect();
            e.sort_unstable();
            if best.as_ref().is_none_or(|b| e < *b) {
                *best = Some(e);
            }
            return;
        }
        let k = classes[ci].len();
        let mut idx: Vec<usize> = (0..k).collect();
        // Heap's algorithm over the class members.
        let mut c = vec![0usize; k];
        let emit = |idx: &Vec<usize>, classes: &mut Vec<Vec<usize>>, order: &mut Vec<usize>, perm: &mut Vec<usize>, best: &mut Option<Vec<(usize, usize)>>| {
            let members: Vec<usize> = idx.iter().map(|&i| classes[ci][i]).collect();
            let len = order.len();
            order.extend(members);
            rec(ci + 1, classes, order, perm, edges, best);
            order.truncate(len);
        };
        emit(&idx, classes, order, perm, best);
        let mut i = 0;
        while i < k {
            if c[i] < i {
                if i % 2 == 0 {
                    idx.swap(0, i);
                } else {
                    idx.swap(c[i], i);
                }
                emit(&idx, classes, order, perm, best);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
    }
    rec(0, &mut classes, &mut Vec::new(), &mut perm, edges, &mut best);
    best.unwrap_or_default()
}

/// Every connected graph on `n` nodes up to isomorphism, grown by adding a
/// vertex to connected graphs on `n - 1` nodes.
pub fn connected_graphs(n: usize) -> Vec<SimpleGraph> {
    let mut level: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
    level.insert(Vec::new());
    for size in 2..=n {
        let mut next = BTreeSet::new();
        for g in &level {
            let new = size - 1;
            for mask in 1u32..(1 << new) {
                let mut e: BTreeSet<(usize, usize)> = g.iter().copied().collect();
                for u in 0..new {
                    if mask & (1 << u) != 0 {
                        e.insert((u, new));
                    }
                }
                next.insert(canonical(size, &e));
            }
        }
        level = next;
    }
    if n == 0 {
        return Vec::new();
    }
    level.into_iter().map(|e| SimpleGraph::from_edges(n, e)).collect()
}

// ---------- statistics oracles ----------

/// Logistic MLE (with intercept) by Newton steps on a finite-difference
/// Hessian of the analytic score.
pub fn logistic_newton(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let n = x.len();
    let p = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(x[i].iter().copied()).collect() };
    let score = |b: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; p];
        for i in 0..n {
            let r = row(i);
            let eta: f64 = r.iter().zip(b).map(|(a, c)| a * c).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let yi = if y[i] { 1.0 } else { 0.0 };
            for j in 0..p {
                g[j] += r[j] * (yi - mu);
            }
        }
        g
    };
    let loglik = |b: &[f64]| -> f64 {
        (0..n)
            .map(|i| {
                let eta: f64 = row(i).iter().zip(b).map(|(a, c)| a * c).sum();
                let ll1 = -(1.0 + (-eta).exp()).ln();
                let ll0 = -(1.0 + eta.exp()).ln();
                if y[i] { ll1 } else { ll0 }
            })
            .sum()
    };
    let mut b = vec![0.0; p];
    for _ in 0..200 {
        let g = score(&b);
        let h = 1e-5;
        let mut hess = vec![vec![0.0; p]; p];
        for j in 0..p {
            let mut up = b.clone();
            let mut dn = b.clone();
            up[j] += h;
            dn[j] -= h;
            let (gu, gd) = (score(&up), score(&dn));
            for i in 0..p {
                hess[i][j] = -(gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let step = solve(&hess, &g).unwrap();
        let mut t = 1.0;
        let base = loglik(&b);
        let mut cand: Vec<f64>;
        loop {
            cand = b.iter().zip(&step).map(|(v, s)| v + t * s).collect();
            if loglik(&cand) >= base - 1e-12 || t < 1e-8 {
                break;
            }
            t /= 2.0;
        }
        let size = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        b = cand;
        if size < 1e-12 {
            break;
        }
    }
    b
}

/// OLS with intercept through the normal equations.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len) + 1;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| std::iter::once(1.0).chain(x[i].iter().copied()).collect()).collect();
    let xtx: Vec<Vec<f64>> = (0..p).map(|a| (0..p).map(|b| rows.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();
    let xty: Vec<f64> = (0..p).map(|a| rows.iter().zip(y).map(|(r, v)| r[a] * v).sum()).collect();
    let beta = solve(&xtx, &xty).unwrap();
    let rss = rows
        .iter()
        .zip(y)
        .map(|(r, v)| {
            let f: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (v - f) * (v - f)
        })
        .sum();
    (beta, rss)
}

/// Best subset of every size by enumerating all `2^p` column sets.
pub fn best_subsets(x: &[Vec<f64>], y: &[f64], max_size: usize) -> Vec<(Vec<usize>, f64)> {
    let p = x[0].len();
    let mut best: Vec<Option<(Vec<usize>, f64)>> = vec![None; max_size + 1];
    for mask in 1u32..(1 << p) {
        let cols: Vec<usize> = (0..p).filter(|&j| mask & (1 << j) != 0).collect();
        if cols.len() > max_size {
            continue;
        }
        let sub: Vec<Vec<f64>> = x.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect();
        let (_, rss) = ols(&sub, y);
        let slot = &mut best[cols.len()];
        if slot.as_ref().is_none_or(|(_, b)| rss < *b) {
            *slot = Some((cols, rss));
        }
    }
    best.into_iter().skip(1).flatten().collect()
}
