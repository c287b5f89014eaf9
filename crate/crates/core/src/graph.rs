//! The investor–firm deal multigraph, its yearly snapshots, and the two
//! one-mode projections.
//!
//! Firms are linked cumulatively: every year a common bidder funds two firms
//! adds a link (or weight) that persists in all later years. Investors are
//! linked per year when they take part in the same financing round of the
//! same firm.

use crate::ingest::Dataset;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("id `{0}` appears both as an investor and as a firm")]
    NonBipartiteId(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Firms,
    Investors,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Firms => "firms",
            Side::Investors => "investors",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How two firms become linked in the cumulative firm projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmLinkRule {
    /// A common bidder funded both firms within the same calendar year.
    /// Weight counts the (bidder, year) pairs.
    #[default]
    SameYear,
    /// A common bidder funded both firms at any time up to the year.
    /// Weight counts the distinct common bidders.
    AnyTimeToDate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteEdge {
    pub investor: usize,
    pub firm: usize,
    pub deal_id: String,
    pub round_id: String,
    pub year: i32,
    pub amount: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TemporalBipartiteGraph {
    investors: Vec<String>,
    firms: Vec<String>,
    investor_index: HashMap<String, usize>,
    firm_index: HashMap<String, usize>,
    edges: Vec<BipartiteEdge>,
    year_index: BTreeMap<i32, Vec<usize>>,
}

/// One edge per deal; node sets are exactly the ids appearing in deals.
pub fn build_bipartite(d: &Dataset) -> Result<TemporalBipartiteGraph, GraphError> {
    let investors: BTreeSet<&str> = d.deals.iter().map(|x| x.investor_id.as_str()).collect();
    let firms: BTreeSet<&str> = d.deals.iter().map(|x| x.firm_id.as_str()).collect();
    if let Some(id) = investors.intersection(&firms).next() {
        return Err(GraphError::NonBipartiteId((*id).to_owned()));
    }
    let investors: Vec<String> = investors.into_iter().map(str::to_owned).collect();
    let firms: Vec<String> = firms.into_iter().map(str::to_owned).collect();
    let investor_index: HashMap<String, usize> =
        investors.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let firm_index: HashMap<String, usize> =
        firms.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let mut edges = Vec::with_capacity(d.deals.len());
    let mut year_index: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for deal in &d.deals {
        year_index.entry(deal.year).or_default().push(edges.len());
        edges.push(BipartiteEdge {
            investor: investor_index[&deal.investor_id],
            firm: firm_index[&deal.firm_id],
            deal_id: deal.deal_id.clone(),
            round_id: deal.round_id.clone(),
            year: deal.year,
            amount: deal.amount_usd,
        });
    }
    Ok(TemporalBipartiteGraph {
        investors,
        firms,
        investor_index,
        firm_index,
        edges,
        year_index,
    })
}

impl TemporalBipartiteGraph {
    pub fn investors(&self) -> &[String] {
        &self.investors
    }

    pub fn firms(&self) -> &[String] {
        &self.firms
    }

    pub fn edges(&self) -> &[BipartiteEdge] {
        &self.edges
    }

    pub fn investor_index(&self, id: &str) -> Option<usize> {
        self.investor_index.get(id).copied()
    }

    pub fn firm_index(&self, id: &str) -> Option<usize> {
        self.firm_index.get(id).copied()
    }

    /// Years with at least one deal, ascending.
    pub fn years(&self) -> Vec<i32> {
        self.year_index.keys().copied().collect()
    }

    pub fn edges_in_year(&self, year: i32) -> impl Iterator<Item = &BipartiteEdge> {
        self.year_index
            .get(&year)
            .into_iter()
            .flatten()
            .map(move |&i| &self.edges[i])
    }

    pub fn snapshot(&self, year: i32) -> YearlySnapshot<'_> {
        let edges: Vec<&BipartiteEdge> = self.edges_in_year(year).collect();
        YearlySnapshot {
            year,
            investors: edges.iter().map(|e| self.investors[e.investor].as_str()).collect(),
            firms: edges.iter().map(|e| self.firms[e.firm].as_str()).collect(),
            edges,
        }
    }
}

#[derive(Clone, Debug)]
pub struct YearlySnapshot<'g> {
    pub year: i32,
    pub edges: Vec<&'g BipartiteEdge>,
    pub investors: BTreeSet<&'g str>,
    pub firms: BTreeSet<&'g str>,
}

/// Free-function form of [`TemporalBipartiteGraph::snapshot`].
pub fn snapshot(g: &TemporalBipartiteGraph, year: i32) -> YearlySnapshot<'_> {
    g.snapshot(year)
}

/// Unweighted simple graph on nodes `0..n`, neighbour lists sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimpleGraph {
    adj: Vec<Vec<usize>>,
}

impl SimpleGraph {
    pub fn new(n: usize) -> Self {
        SimpleGraph { adj: vec![Vec::new(); n] }
    }

    /// Builds from an edge list; self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for (u, v) in edges {
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        SimpleGraph { adj }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &v in &self.adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Subgraph induced by `nodes` (sorted), relabelled to `0..nodes.len()`.
    pub fn induced(&self, nodes: &[usize]) -> SimpleGraph {
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let adj = nodes
            .iter()
            .map(|&v| {
                let mut ns: Vec<usize> = self.adj[v].iter().filter_map(|u| pos.get(u).copied()).collect();
                ns.sort_unstable();
                ns
            })
            .collect();
        SimpleGraph { adj }
    }

    /// Graph with node `v` renamed to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> SimpleGraph {
        SimpleGraph::from_edges(self.node_count(), self.edges().map(|(u, v)| (perm[u], perm[v])))
    }
}

/// Weighted simple graph over the firms or investors of one year.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGraph {
    side: Side,
    year: i32,
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    edges: BTreeMap<(usize, usize), u32>,
}

impl ProjectedGraph {
    /// `nodes` must be sorted and unique; edge endpoints index into it.
    pub fn new(
        side: Side,
        year: i32,
        nodes: Vec<String>,
        weighted_edges: impl IntoIterator<Item = ((usize, usize), u32)>,
    ) -> Self {
        let index = nodes.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut edges = BTreeMap::new();
        for ((u, v), w) in weighted_edges {
            if u != v && w > 0 {
                *edges.entry((u.min(v), u.max(v))).or_insert(0) += w;
            }
        }
        ProjectedGraph {
            side,
            year,
            nodes,
            index,
            edges,
        }
    }

    /// Convenience constructor from string-labelled edges; the node set is
    /// `extra_nodes` plus every endpoint.
    pub fn from_labelled(
        side: Side,
        year: i32,
        extra_nodes: &[&str],
        edges: &[(&str, &str, u32)],
    ) -> Self {
        let mut names: BTreeSet<&str> = extra_nodes.iter().copied().collect();
        for (a, b, _) in edges {
            names.insert(a);
            names.insert(b);
        }
        let nodes: Vec<String> = names.into_iter().map(str::to_owned).collect();
        let pos = |s: &str| nodes.binary_search_by(|n| n.as_str().cmp(s)).unwrap();
        let weighted: Vec<_> = edges.iter().map(|(a, b, w)| ((pos(a), pos(b)), *w)).collect();
        ProjectedGraph::new(side, year, nodes.clone(), weighted)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Edges `(u, v, weight)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.edges.iter().map(|(&(u, v), &w)| (u, v, w))
    }

    pub fn weight(&self, a: &str, b: &str) -> Option<u32> {
        let (u, v) = (self.node_index(a)?, self.node_index(b)?);
        self.edges.get(&(u.min(v), u.max(v))).copied()
    }

    /// Edge set as ordered id pairs.
    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges
            .keys()
            .map(|&(u, v)| (self.nodes[u].clone(), self.nodes[v].clone()))
            .collect()
    }

    pub fn skeleton(&self) -> SimpleGraph {
        SimpleGraph::from_edges(self.nodes.len(), self.edges.keys().copied())
    }

    /// Neighbour lists with weights, sorted by neighbour.
    pub fn weighted_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (&(u, v), &w) in &self.edges {
            adj[u].push((v, f64::from(w)));
            adj[v].push((u, f64::from(w)));
        }
        for l in &mut adj {
            l.sort_by_key(|&(v, _)| v);
        }
        adj
    }

    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<(), GraphError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["u", "v", "weight"])?;
        for (u, v, weight) in self.edges() {
            wtr.write_record([self.nodes[u].as_str(), self.nodes[v].as_str(), &weight.to_string()])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_nodes_csv<W: Write>(&self, w: W) -> Result<(), GraphError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["node_id"])?;
        for n in &self.nodes {
            wtr.write_record([n.as_str()])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn add_clique(weights: &mut HashMap<(usize, usize), u32>, members: &[usize]) {
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            *weights.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
}

fn firm_graph(
    g: &TemporalBipartiteGraph,
    year: i32,
    active: &BTreeSet<usize>,
    weights: &HashMap<(usize, usize), u32>,
) -> ProjectedGraph {
    let local: HashMap<usize, usize> = active.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let nodes = active.iter().map(|&f| g.firms[f].clone()).collect();
    let edges = weights
        .iter()
        .map(|(&(a, b), &w)| ((local[&a], local[&b]), w));
    ProjectedGraph::new(Side::Firms, year, nodes, edges)
}

/// Cumulative firm projections for each requested year in one sweep.
pub fn firm_projections(
    g: &TemporalBipartiteGraph,
    years: &[i32],
    rule: FirmLinkRule,
) -> BTreeMap<i32, ProjectedGraph> {
    let wanted: BTreeSet<i32> = years.iter().copied().collect();
    let mut out = BTreeMap::new();
    let Some(&last) = wanted.iter().next_back() else {
        return out;
    };
    let mut active = BTreeSet::new();
    let mut weights: HashMap<(usize, usize), u32> = HashMap::new();
    let mut portfolio: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut data_years = g.year_index.keys().copied().filter(|&y| y <= last).peekable();
    for &year in &wanted {
        while let Some(&y) = data_years.peek() {
            if y > year {
                break;
            }
            data_years.next();
            let mut by_investor: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for e in g.edges_in_year(y) {
                active.insert(e.firm);
                by_investor.entry(e.investor).or_default().insert(e.firm);
            }
            match rule {
                FirmLinkRule::SameYear => {
                    for firms in by_investor.values() {
                        let members: Vec<usize> = firms.iter().copied().collect();
                        add_clique(&mut weights, &members);
                    }
                }
                FirmLinkRule::AnyTimeToDate => {
                    for (inv, firms) in by_investor {
                        let held = portfolio.entry(inv).or_default();
                        for f in firms {
                            if held.contains(&f) {
                                continue;
                            }
                            for &other in held.iter() {
                                *weights.entry((other.min(f), other.max(f))).or_insert(0) += 1;
                            }
                            held.insert(f);
                        }
                    }
                }
            }
        }
        out.insert(year, firm_graph(g, year, &active, &weights));
    }
    out
}

/// Firm projection at `year`: node set is every firm funded in any year up
/// to and including `year`.
pub fn project_firms_cumulative(g: &TemporalBipartiteGraph, year: i32, rule: FirmLinkRule) -> ProjectedGraph {
    firm_projections(g, &[year], rule)
        .remove(&year)
        .expect("requested year is always produced")
}

/// Investor projection at `year` over the investors active that year.
pub fn project_investors(g: &TemporalBipartiteGraph, year: i32) -> ProjectedGraph {
    let mut rounds: BTreeMap<(usize, &str), BTreeSet<usize>> = BTreeMap::new();
    let mut active = BTreeSet::new();
    for e in g.edges_in_year(year) {
        active.insert(e.investor);
        rounds.entry((e.firm, e.round_id.as_str())).or_default().insert(e.investor);
    }
    let mut weights = HashMap::new();
    for members in rounds.values() {
        let members: Vec<usize> = members.iter().copied().collect();
        add_clique(&mut weights, &members);
    }
    let local: HashMap<usize, usize> = active.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let nodes = active.iter().map(|&i| g.investors[i].clone()).collect();
    ProjectedGraph::new(
        Side::Investors,
        year,
        nodes,
        weights.into_iter().map(|((a, b), w)| ((local[&a], local[&b]), w)),
    )
}
