//! Louvain communities on weighted projections and their composition.

use crate::graph::{ProjectedGraph, Side};
use crate::ingest::{FirmRecord, FirmStatus};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CommunityError {
    #[error("community {0} does not exist")]
    UnknownCommunity(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub side: Side,
    pub year: i32,
    nodes: Vec<String>,
    assignment: Vec<usize>,
    pub modularity: f64,
    /// Modularity of the singleton partition followed by one value per
    /// completed pass.
    pub pass_modularity: Vec<f64>,
}

impl Partition {
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_of(&self, node: &str) -> Option<usize> {
        self.nodes
            .binary_search_by(|n| n.as_str().cmp(node))
            .ok()
            .map(|i| self.assignment[i])
    }

    pub fn community_count(&self) -> usize {
        self.assignment.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Members of community `c` in id order.
    pub fn members(&self, c: usize) -> Vec<&str> {
        self.nodes
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &a)| a == c)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.community_count()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Aggregated weighted graph: `self_loops[i]` is the diagonal entry `A_ii`
/// (twice the internal edge weight); `adj` holds off-diagonal weights.
struct Level {
    self_loops: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl Level {
    fn strength(&self, i: usize) -> f64 {
        self.self_loops[i] + self.adj[i].iter().map(|&(_, w)| w).sum::<f64>()
    }
}

/// Newman–Girvan modularity with resolution `gamma` of an assignment on a
/// weighted adjacency (no self-loops).
pub fn modularity(adj: &[Vec<(usize, f64)>], assignment: &[usize], gamma: f64) -> f64 {
    let m2: f64 = adj.iter().flatten().map(|&(_, w)| w).sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    let mut total = vec![0.0; k];
    for (i, ns) in adj.iter().enumerate() {
        for &(j, w) in ns {
            total[assignment[i]] += w;
            if assignment[i] == assignment[j] {
                internal[assignment[i]] += w;
            }
        }
    }
    internal
        .iter()
        .zip(&total)
        .map(|(&inn, &tot)| inn / m2 - gamma * (tot / m2) * (tot / m2))
        .sum()
}

fn renumber(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// One local-moving phase. Returns the community of each node and whether
/// any node moved.
fn local_moving(level: &Level, gamma: f64, m2: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = level.adj.len();
    let k: Vec<f64> = (0..n).map(|i| level.strength(i)).collect();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = k.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    for _sweep in 0..1000 {
        let mut moved = false;
        for &i in &order {
            let own = comm[i];
            for &(j, w) in &level.adj[i] {
                let c = comm[j];
                if link[c] == 0.0 {
                    touched.push(c);
                }
                link[c] += w;
            }
            tot[own] -= k[i];
            let gain = |c: usize, link_c: f64| link_c - gamma * tot[c] * k[i] / m2;
            let stay = gain(own, link[own]);
            let mut best = own;
            let mut best_gain = stay;
            touched.sort_unstable();
            for &c in &touched {
                let g = gain(c, link[c]);
                if g > best_gain + 1e-12 * m2.max(1.0) * f64::EPSILON.sqrt() {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += k[i];
            if best != own {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            touched.clear();
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

fn aggregate(level: &Level, comm: &[usize]) -> Level {
    let k = comm.iter().copied().max().map_or(0, |m| m + 1);
    let mut self_loops = vec![0.0; k];
    let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
    for (i, ns) in level.adj.iter().enumerate() {
        self_loops[comm[i]] += level.self_loops[i];
        for &(j, w) in ns {
            let (ci, cj) = (comm[i], comm[j]);
            if ci == cj {
                self_loops[ci] += w;
            } else {
                *maps[ci].entry(cj).or_insert(0.0) += w;
            }
        }
    }
    Level {
        self_loops,
        adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
    }
}

/// Two-phase Louvain on a weighted adjacency. Returns contiguous labels
/// (numbered by first appearance in node order) and the per-pass modularity
/// history, starting with the singleton partition.
pub fn louvain_weighted(adj: &[Vec<(usize, f64)>], seed: u64, gamma: f64) -> (Vec<usize>, Vec<f64>) {
    let n = adj.len();
    let singletons: Vec<usize> = (0..n).collect();
    let mut history = vec![modularity(adj, &singletons, gamma)];
    let m2: f64 = adj.iter().flatten().map(|&(_, w)| w).sum();
    if n == 0 || m2 == 0.0 {
        return (singletons, history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = Level {
        self_loops: vec![0.0; n],
        adj: adj.to_vec(),
    };
    let mut labels = singletons;
    loop {
        let (comm, moved) = local_moving(&level, gamma, m2, &mut rng);
        if !moved {
            break;
        }
        let comm = renumber(&comm);
        for l in labels.iter_mut() {
            *l = comm[*l];
        }
        let q = modularity(adj, &labels, gamma);
        let prev = *history.last().expect("history starts non-empty");
        debug_assert!(q >= prev - 1e-10, "modularity decreased: {prev} -> {q}");
        history.push(q);
        if q <= prev {
            break;
        }
        level = aggregate(&level, &comm);
    }
    (renumber(&labels), history)
}

/// Louvain on the weighted projection, deterministic for a given seed.
pub fn louvain(g: &ProjectedGraph, seed: u64, resolution: f64) -> Partition {
    let adj = g.weighted_adjacency();
    let (assignment, pass_modularity) = louvain_weighted(&adj, seed, resolution);
    Partition {
        side: g.side(),
        year: g.year(),
        nodes: g.nodes().to_vec(),
        modularity: modularity(&adj, &assignment, resolution),
        assignment,
        pass_modularity,
    }
}

/// Community indices by descending size; ties go to the community whose
/// smallest member id sorts first.
pub fn rank_communities(p: &Partition) -> Vec<usize> {
    let sizes = p.sizes();
    let mut first: Vec<Option<&str>> = vec![None; sizes.len()];
    for (n, &a) in p.nodes.iter().zip(&p.assignment) {
        let slot = &mut first[a];
        if slot.is_none_or(|f| n.as_str() < f) {
            *slot = Some(n.as_str());
        }
    }
    let mut idx: Vec<usize> = (0..sizes.len()).collect();
    idx.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then_with(|| first[a].cmp(&first[b])));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityProfile {
    pub community: usize,
    pub size: usize,
    /// Fraction of all graph nodes in this community.
    pub node_share: f64,
    pub subsector_shares: BTreeMap<String, f64>,
    pub status_shares: BTreeMap<String, f64>,
    pub continent_shares: BTreeMap<String, f64>,
    pub unknown_subsector: usize,
    pub unknown_status: usize,
    pub unknown_continent: usize,
}

fn shares(counts: BTreeMap<String, usize>) -> BTreeMap<String, f64> {
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total as f64))
        .collect()
}

/// Label shares of one community, computed over members with known labels.
pub fn composition_profile(
    p: &Partition,
    community: usize,
    firms: &BTreeMap<String, FirmRecord>,
) -> Result<CommunityProfile, CommunityError> {
    if community >= p.community_count() {
        return Err(CommunityError::UnknownCommunity(community));
    }
    let members = p.members(community);
    let mut sub = BTreeMap::new();
    let mut status = BTreeMap::new();
    let mut cont = BTreeMap::new();
    let (mut us, mut ust, mut uc) = (0, 0, 0);
    for m in &members {
        let rec = firms.get(*m);
        match rec.and_then(|r| r.subsector.clone()) {
            Some(s) => *sub.entry(s).or_insert(0) += 1,
            None => us += 1,
        }
        match rec.map(|r| r.status) {
            Some(st) if st != FirmStatus::Unknown => *status.entry(st.as_str().to_owned()).or_insert(0) += 1,
            _ => ust += 1,
        }
        match rec.and_then(|r| r.continent.clone()) {
            Some(c) => *cont.entry(c).or_insert(0) += 1,
            None => uc += 1,
        }
    }
    Ok(CommunityProfile {
        community,
        size: members.len(),
        node_share: members.len() as f64 / p.nodes.len().max(1) as f64,
        subsector_shares: shares(sub),
        status_shares: shares(status),
        continent_shares: shares(cont),
        unknown_subsector: us,
        unknown_status: ust,
        unknown_continent: uc,
    })
}
