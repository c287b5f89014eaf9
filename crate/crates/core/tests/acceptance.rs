//! Acceptance gate. Each test prints one `criterion N ... PASS|FAIL` line.

mod common;

use chrono::NaiveDate;
use common::report;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;
use vcnet_core::centrality::{compute_raw, CentralityOptions, Measure};
use vcnet_core::community::{louvain_weighted, modularity};
use vcnet_core::fda::{
    build_trajectories, cluster_by_subsector, grids_by_subsector, resample_to_grid, KMeansParams, Regime, Scale,
    TrajectoryGrid,
};
use vcnet_core::graph::{build_bipartite, firm_projections, project_investors, FirmLinkRule, SimpleGraph};
use vcnet_core::ingest::{filter_analysis_cohort, Dataset, DealRecord, FirmRecord};
use vcnet_core::linalg::Matrix;
use vcnet_core::pipeline::thread_pool;
use vcnet_core::stats::{
    balanced_resampling, best_subset, function_on_scalar_fit, logistic_fit, FeatureMatrix, LogisticOptions,
};
use vcnet_core::synth::{generate, SynthConfig};
use vcnet_core::{Pipeline, PipelineConfig, Stage};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let v = if pass { "PASS" } else { "FAIL" };
    report(&format!("criterion {n} {name}: {v} ({detail})"));
    assert!(pass, "criterion {n} {name}: {detail}");
}

// ---------------------------------------------------------------- 1

fn oracle(m: Measure, a: &[Vec<f64>]) -> Vec<f64> {
    match m {
        Measure::Degree => common::degree(a),
        Measure::Betweenness => common::betweenness(a),
        Measure::Eigenvector => common::eigenvector(a),
        Measure::Voterank => common::voterank(a),
        Measure::Pagerank => common::pagerank(a, 0.85),
        Measure::Closeness => common::closeness(a),
        Measure::Subgraph => common::subgraph(a),
        Measure::AvgNeighborDegree => common::avg_neighbor_degree(a),
        Measure::CurrentFlowBetweenness => common::current_flow_betweenness(a),
    }
}

/// Largest deviation, relative for values above one.
fn deviation(g: &SimpleGraph, opts: &CentralityOptions) -> Vec<(Measure, f64)> {
    let a = common::adjacency(g);
    Measure::ALL
        .iter()
        .map(|&m| {
            let got: Vec<f64> = compute_raw(m, g, opts).unwrap_or_else(|e| panic!("{m}: {e}"));
            let want = oracle(m, &a);
            let dev = got
                .iter()
                .zip(&want)
                .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
                .fold(0.0, f64::max);
            (m, dev)
        })
        .collect()
}

#[test]
fn criterion_1_centrality_oracles() {
    let start = Instant::now();
    let opts = CentralityOptions::default();
    let mut worst: BTreeMap<Measure, f64> = BTreeMap::new();
    let mut counts = Vec::new();
    let mut check = |g: &SimpleGraph| {
        for (m, d) in deviation(g, &opts) {
            let w = worst.entry(m).or_insert(0.0);
            *w = w.max(d);
        }
    };
    for n in 2..=7 {
        let graphs = common::connected_graphs(n);
        counts.push(graphs.len());
        for g in &graphs {
            check(g);
        }
    }
    let mut rng = common::rng(1);
    let mut random = 0;
    while random < 200 {
        let n = rng.random_range(2..=12);
        let g = common::gnp(n, rng.random_range(0.1..0.9), &mut rng);
        if g.edge_count() == 0 {
            continue;
        }
        check(&g);
        random += 1;
    }
    // The single node graph: every measure is defined except the eigenvector.
    let single = SimpleGraph::new(1);
    let ok_single = Measure::ALL.iter().all(|&m| {
        let r = compute_raw::<f64>(m, &single, &opts);
        if m == Measure::Eigenvector {
            r.is_err()
        } else {
            r.map(|v| v == oracle(m, &[vec![0.0]])).unwrap_or(false)
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    let max_dev = worst.values().cloned().fold(0.0, f64::max);
    let pass = counts == [1, 2, 6, 21, 112, 853] && max_dev <= 1e-8 && ok_single && elapsed < 60.0;
    verdict(
        1,
        "centrality oracle suite",
        pass,
        &format!("graphs per size {counts:?}, max deviation {max_dev:.2e}, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_normalization() {
    let opts = CentralityOptions::default();
    let mut rng = common::rng(2);
    let (mut pr_dev, mut ev_dev, mut non_finite) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let n = rng.random_range(2..=60);
        let mut g = common::gnp(n, rng.random_range(0.02..0.6), &mut rng);
        if g.edge_count() == 0 {
            g = SimpleGraph::from_edges(n, [(0, 1)]);
        }
        for m in Measure::ALL {
            let v: Vec<f64> = compute_raw(m, &g, &opts).unwrap();
            non_finite += v.iter().filter(|x| !x.is_finite()).count();
            match m {
                Measure::Pagerank => pr_dev = pr_dev.max((v.iter().sum::<f64>() - 1.0).abs()),
                Measure::Eigenvector => {
                    ev_dev = ev_dev.max((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
                }
                _ => {}
            }
        }
    }
    verdict(
        2,
        "normalization invariants",
        pr_dev <= 1e-12 && ev_dev <= 1e-10 && non_finite == 0,
        &format!("pagerank |sum-1| {pr_dev:.1e}, eigenvector |norm-1| {ev_dev:.1e}, non-finite {non_finite}"),
    );
}

// ---------------------------------------------------------------- 3

fn random_deals(rng: &mut impl Rng) -> Dataset {
    let n_rounds = rng.random_range(1..=12);
    let rounds: Vec<(String, String, NaiveDate)> = (0..n_rounds)
        .map(|r| {
            let firm = format!("f{}", rng.random_range(0..8));
            let date = NaiveDate::from_ymd_opt(rng.random_range(2000..2005), rng.random_range(1..=12), rng.random_range(1..=28))
                .unwrap();
            (format!("r{r}"), firm, date)
        })
        .collect();
    let n_deals = rng.random_range(1..=30);
    let deals = (0..n_deals)
        .map(|d| {
            let (round, firm, date) = rounds.choose(rng).unwrap();
            let inv = format!("i{}", rng.random_range(0..6));
            DealRecord::new(format!("d{d}"), round.clone(), inv, firm.clone(), 1.0, *date)
        })
        .collect();
    Dataset::from_deals(deals, Vec::<FirmRecord>::new())
}

type Edges = BTreeMap<(String, String), u32>;

fn pair(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

/// Pairwise scan over deals for the cumulative firm projection.
fn firm_oracle(d: &Dataset, year: i32, rule: FirmLinkRule) -> (BTreeSet<String>, Edges) {
    let nodes = d.deals.iter().filter(|x| x.year <= year).map(|x| x.firm_id.clone()).collect();
    let mut witnesses: BTreeMap<(String, String), BTreeSet<(String, i32)>> = BTreeMap::new();
    for a in &d.deals {
        for b in &d.deals {
            if a.firm_id == b.firm_id || a.investor_id != b.investor_id || a.year > year || b.year > year {
                continue;
            }
            let w = match rule {
                FirmLinkRule::SameYear if a.year == b.year => (a.investor_id.clone(), a.year),
                FirmLinkRule::SameYear => continue,
                FirmLinkRule::AnyTimeToDate => (a.investor_id.clone(), 0),
            };
            witnesses.entry(pair(&a.firm_id, &b.firm_id)).or_default().insert(w);
        }
    }
    (nodes, witnesses.into_iter().map(|(k, v)| (k, v.len() as u32)).collect())
}

fn investor_oracle(d: &Dataset, year: i32) -> (BTreeSet<String>, Edges) {
    let nodes = d.deals.iter().filter(|x| x.year == year).map(|x| x.investor_id.clone()).collect();
    let mut witnesses: BTreeMap<(String, String), BTreeSet<(String, String)>> = BTreeMap::new();
    for a in &d.deals {
        for b in &d.deals {
            if a.year != year || b.year != year || a.investor_id == b.investor_id {
                continue;
            }
            if a.firm_id == b.firm_id && a.round_id == b.round_id {
                witnesses
                    .entry(pair(&a.investor_id, &b.investor_id))
                    .or_default()
                    .insert((a.firm_id.clone(), a.round_id.clone()));
            }
        }
    }
    (nodes, witnesses.into_iter().map(|(k, v)| (k, v.len() as u32)).collect())
}

fn edges_of(g: &vcnet_core::graph::ProjectedGraph) -> (BTreeSet<String>, Edges) {
    let nodes = g.nodes().iter().cloned().collect();
    let edges = g
        .edges()
        .map(|(u, v, w)| (pair(&g.nodes()[u], &g.nodes()[v]), w))
        .collect();
    (nodes, edges)
}

#[test]
fn criterion_3_projections() {
    let mut rng = common::rng(3);
    let (mut mismatches, mut non_monotone) = (0usize, 0usize);
    for _ in 0..500 {
        let d = random_deals(&mut rng);
        let bg = build_bipartite(&d).unwrap();
        let years: Vec<i32> = (2000..2005).collect();
        for rule in [FirmLinkRule::SameYear, FirmLinkRule::AnyTimeToDate] {
            let proj = firm_projections(&bg, &years, rule);
            let mut prev: Option<BTreeSet<(String, String)>> = None;
            for &y in &years {
                let got = edges_of(&proj[&y]);
                if got != firm_oracle(&d, y, rule) {
                    mismatches += 1;
                }
                let set: BTreeSet<(String, String)> = got.1.keys().cloned().collect();
                if prev.as_ref().is_some_and(|p| !p.is_subset(&set)) {
                    non_monotone += 1;
                }
                prev = Some(set);
            }
        }
        for &y in &years {
            if edges_of(&project_investors(&bg, y)) != investor_oracle(&d, y) {
                mismatches += 1;
            }
        }
    }
    verdict(
        3,
        "projection soundness",
        mismatches == 0 && non_monotone == 0,
        &format!("500 datasets, {mismatches} mismatches, {non_monotone} non-monotone steps"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_louvain() {
    let mut exact = 0;
    let mut decreasing = 0;
    for seed in 0..20u64 {
        let mut rng = common::rng(400 + seed);
        let n = 32;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                let p = if (i < 16) == (j < 16) { 0.5 } else { 0.02 };
                if rng.random::<f64>() < p {
                    adj[i].push((j, 1.0));
                    adj[j].push((i, 1.0));
                }
            }
        }
        let (labels, history) = louvain_weighted(&adj, seed, 1.0);
        if history.windows(2).any(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= 16)).collect();
        let same = (0..n).all(|i| (0..n).all(|j| (labels[i] == labels[j]) == (truth[i] == truth[j])));
        if same {
            exact += 1;
        }
        assert!((modularity(&adj, &labels, 1.0) - history.last().unwrap()).abs() < 1e-12);
    }
    verdict(
        4,
        "louvain",
        exact >= 18 && decreasing == 0,
        &format!("exact recovery in {exact}/20 seeds, {decreasing} decreasing passes"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_functional_kmeans() {
    let mut worst_acc: f64 = 1.0;
    let mut inertia_up = 0;
    let mut terminal_mismatch = 0;
    for seed in 0..20u64 {
        let cfg = SynthConfig {
            seed: 500 + seed,
            n_firms: 500,
            high_ratio: 10.0,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let d = &out.dataset;
        let cohort = filter_analysis_cohort(d, 10);
        let trajs = build_trajectories(d, &cohort, 10.0).unwrap();
        let grid: TrajectoryGrid<f64> = resample_to_grid(&trajs, 0.1, 10.0, Scale::RawUsd).unwrap();
        let last = grid.times.len() - 1;
        for (i, t) in trajs.iter().enumerate() {
            // Scalar outcome from an independent scan over the raw deals.
            let birth = d.firms[&t.firm_id].birth_year.unwrap();
            let mut deals: Vec<&DealRecord> = d.deals.iter().filter(|x| x.firm_id == t.firm_id).collect();
            deals.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.deal_id.cmp(&b.deal_id)));
            let direct: f64 = deals
                .iter()
                .filter(|x| vcnet_core::ingest::year_offset(x.date, birth) < 10.0)
                .map(|x| x.amount_usd.unwrap())
                .sum();
            let on_grid = grid.values[(i, last)];
            if on_grid.to_bits() != t.terminal().to_bits() || (direct - t.terminal()).abs() > 1e-9 * direct.max(1.0) {
                terminal_mismatch += 1;
            }
        }
        let clustering = cluster_by_subsector(&grids_by_subsector(&grid, d), &KMeansParams::default()).unwrap();
        for l in clustering.labelings.values() {
            if l.inertia_history.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
                inertia_up += 1;
            }
        }
        let labels = clustering.labels();
        let truth: BTreeMap<&str, Regime> = out.truth.iter().map(|t| (t.firm_id.as_str(), t.true_regime)).collect();
        let correct = labels.iter().filter(|(f, r)| truth[f.as_str()] == **r).count();
        let acc = correct as f64 / labels.len() as f64;
        worst_acc = worst_acc.min(acc);
    }
    verdict(
        5,
        "functional k-means",
        worst_acc >= 0.95 && inertia_up == 0 && terminal_mismatch == 0,
        &format!("worst accuracy {worst_acc:.3} over 20 seeds, {inertia_up} inertia increases, {terminal_mismatch} terminal mismatches"),
    );
}

// ---------------------------------------------------------------- 6

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn feature_matrix(cols: Vec<(&str, Vec<f64>)>) -> FeatureMatrix<f64> {
    let n = cols[0].1.len();
    FeatureMatrix::from_columns(
        (0..n).map(|i| format!("r{i:05}")).collect(),
        cols.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
    )
    .unwrap()
}

/// Wald power (positive sign, two-sided p < 0.1) for the slope of a balanced
/// case-control sample of `n` rows when cases are the N(gamma, 1) tilt of
/// N(0, 1) controls. Fisher information by quadrature.
fn oracle_power(gamma: f64, n: usize) -> f64 {
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let alpha = -gamma * gamma / 2.0;
    let (mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0);
    let h = 1e-3;
    let mut x = -12.0;
    while x <= 12.0 + gamma {
        let dens = 0.5 * phi(x) + 0.5 * phi(x - gamma);
        let p = 1.0 / (1.0 + (-(alpha + gamma * x)).exp());
        let w = dens * p * (1.0 - p) * h;
        i00 += w;
        i01 += w * x;
        i11 += w * x * x;
        x += h;
    }
    let var = i00 / (i00 * i11 - i01 * i01) / n as f64;
    let z = Normal::new(0.0, 1.0).unwrap();
    z.cdf(gamma / var.sqrt() - z.inverse_cdf(0.95))
}

#[test]
fn criterion_6_logistic() {
    // IRLS against the numeric-Hessian Newton oracle.
    let mut rng = common::rng(6);
    let opts = LogisticOptions::default();
    let mut max_diff = 0.0f64;
    let mut problems = 0;
    while problems < 100 {
        let n = rng.random_range(40..200);
        let p = rng.random_range(1..=4);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| normals(&mut rng, n)).collect();
        let beta: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<bool> = (0..n)
            .map(|i| {
                let eta = beta[0] + (0..p).map(|j| beta[j + 1] * cols[j][i]).sum::<f64>();
                rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let x = feature_matrix(names.iter().map(String::as_str).zip(cols.clone()).collect());
        let Ok(fit) = logistic_fit(&x, &y, &opts) else { continue };
        if fit.separation {
            continue;
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let want = common::logistic_newton(&rows, &y);
        for (a, b) in fit.coefficients.iter().zip(&want) {
            max_diff = max_diff.max((a - b).abs());
        }
        problems += 1;
    }

    // Power and null calibration, one fresh population per repetition.
    let minority = 89;
    let population = 3663;
    let mut lo = 0.05;
    let mut hi = 2.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if oracle_power(mid, 2 * minority) < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let base = (minority as f64 / population as f64).ln() - (1.0 - minority as f64 / population as f64).ln();
    let run = |gamma: f64, salt: u64| -> (usize, usize, bool) {
        let (mut pos, mut hits, mut rows_ok) = (0, 0, true);
        for r in 0..1000u64 {
            let mut rng = common::rng(salt * 100_000 + r);
            let x1 = normals(&mut rng, population);
            let x2 = normals(&mut rng, population);
            // Intercept offsets the tilt so the event rate stays near the target.
            let b0 = base - gamma * gamma / 2.0;
            let y: Vec<bool> = x1
                .iter()
                .map(|&v| rng.random::<f64>() < 1.0 / (1.0 + (-(b0 + gamma * v)).exp()))
                .collect();
            let x = feature_matrix(vec![("x1", x1), ("x2", x2)]);
            let s = balanced_resampling(&x, &y, 1, r, &opts).unwrap();
            let rec = &s.records[0];
            rows_ok &= rec.rows == 2 * s.minority_size;
            if let (Some(&b), Some(&p)) = (rec.coefficients.get(1), rec.p_values.get(1)) {
                if b > 0.0 {
                    pos += 1;
                    if p < 0.1 {
                        hits += 1;
                    }
                }
            }
        }
        (pos, hits, rows_ok)
    };
    let (_, hits, rows_planted) = run(gamma, 1);
    let (pos_null, _, rows_null) = run(0.0, 2);
    let pass = max_diff <= 1e-6
        && hits >= 900
        && (450..=550).contains(&pos_null)
        && rows_planted
        && rows_null;
    verdict(
        6,
        "logistic stack",
        pass,
        &format!(
            "IRLS vs Newton max diff {max_diff:.1e}; gamma {gamma:.3}: {hits}/1000 positive with p<0.1; null positive {pos_null}/1000; rows = 2x minority: {}",
            rows_planted && rows_null
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_best_subset() {
    let mut rng = common::rng(7);
    let mut mismatches = 0;
    for _ in 0..20 {
        let n = 60;
        let cols: Vec<Vec<f64>> = (0..10).map(|_| normals(&mut rng, n)).collect();
        let signal: Vec<usize> = (0..3).map(|_| rng.random_range(0..10)).collect();
        let noise = normals(&mut rng, n);
        let y: Vec<f64> = (0..n)
            .map(|i| signal.iter().map(|&j| cols[j][i]).sum::<f64>() + noise[i])
            .collect();
        let names: Vec<String> = (0..10).map(|j| format!("x{j:02}")).collect();
        let x = feature_matrix(names.iter().map(String::as_str).zip(cols.clone()).collect());
        let got = best_subset(&x, &y, 10).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let want = common::best_subsets(&rows, &y, 10);
        if got.len() != want.len() {
            mismatches += 1;
            continue;
        }
        for (g, (cols, rss)) in got.iter().zip(&want) {
            let names: Vec<String> = cols.iter().map(|&j| format!("x{j:02}")).collect();
            if g.features != names || (g.rss - rss).abs() > 1e-8 * rss.max(1.0) {
                mismatches += 1;
            }
        }
    }
    // Noiseless single signal.
    let cols: Vec<Vec<f64>> = (0..10).map(|_| normals(&mut rng, 40)).collect();
    let y: Vec<f64> = cols[3].iter().map(|v| 2.0 * v + 1.0).collect();
    let names: Vec<String> = (0..10).map(|j| format!("x{j:02}")).collect();
    let x = feature_matrix(names.iter().map(String::as_str).zip(cols).collect());
    let top = &best_subset(&x, &y, 1).unwrap()[0];
    let tss: f64 = y.iter().map(|v| v * v).sum();
    let recovered = top.features == ["x03"] && top.rss <= 1e-12 * tss;
    verdict(
        7,
        "best subset",
        mismatches == 0 && recovered,
        &format!("{mismatches} mismatches against enumeration, single signal recovered: {recovered}"),
    );
}

// ---------------------------------------------------------------- 8

fn grid_from(rows: &[Vec<f64>]) -> TrajectoryGrid<f64> {
    let g = rows[0].len();
    TrajectoryGrid {
        firm_ids: (0..rows.len()).map(|i| format!("r{i:05}")).collect(),
        times: (0..g).map(|i| i as f64 * 10.0 / (g - 1) as f64).collect(),
        values: Matrix::from_fn(rows.len(), g, |r, c| rows[r][c]),
        scale: Scale::Log1pUsd,
    }
}

#[test]
fn criterion_8_function_on_scalar() {
    let mut rng = common::rng(8);
    let n = 80;
    let g = 101;
    let cols: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, n)).collect();
    let x = feature_matrix(vec![("a", cols[0].clone()), ("b", cols[1].clone()), ("c", cols[2].clone())]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..g)
                .map(|t| {
                    let s = t as f64 / 10.0;
                    (1.0 + s).ln() * (2.0 + cols[0][i]) + 0.3 * s * cols[1][i] + rng.random_range(-0.5..0.5)
                })
                .collect()
        })
        .collect();
    let fit = function_on_scalar_fit(&grid_from(&rows), &x, None).unwrap();
    let design: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let mut max_dev = 0.0f64;
    for t in 0..g {
        let y: Vec<f64> = rows.iter().map(|r| r[t]).collect();
        let (beta, _) = common::ols(&design, &y);
        for (j, b) in beta.iter().enumerate() {
            max_dev = max_dev.max((fit.estimates[j][t] - b).abs());
        }
    }

    let flat: Vec<Vec<f64>> = (0..n).map(|i| vec![3.0 + cols[2][i] + rng.random_range(-1.0..1.0); g]).collect();
    let fit_flat = function_on_scalar_fit(&grid_from(&flat), &x, None).unwrap();
    let constant = fit_flat.estimates.iter().all(|e| e.iter().all(|v| (v - e[0]).abs() <= 1e-12 * e[0].abs().max(1.0)));

    let (mut covered, mut total) = (0usize, 0usize);
    for seed in 0..50u64 {
        let mut rng = common::rng(800 + seed);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, n)).collect();
        let x = feature_matrix(vec![("a", cols[0].clone()), ("b", cols[1].clone()), ("c", cols[2].clone())]);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let level: f64 = StandardNormal.sample(&mut rng);
                (0..g).map(|t| level * (t as f64 / 100.0) + rng.random_range(-0.3..0.3)).collect()
            })
            .collect();
        let fit = function_on_scalar_fit(&grid_from(&rows), &x, None).unwrap();
        for j in 1..fit.names.len() {
            for t in 0..g {
                total += 1;
                if fit.lower[j][t] <= 0.0 && 0.0 <= fit.upper[j][t] {
                    covered += 1;
                }
            }
        }
    }
    let coverage = covered as f64 / total as f64;
    verdict(
        8,
        "function-on-scalar",
        max_dev <= 1e-10 && constant && coverage >= 0.9,
        &format!("max deviation from pointwise OLS {max_dev:.1e} over {g} points, constant curves: {constant}, null coverage {coverage:.3}"),
    );
}

// ---------------------------------------------------------------- 9

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex::encode(Sha256::digest(&bytes)));
            }
        }
    }
    out
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_owned).collect()
}

/// Schema problems found in one output directory.
fn schema_problems(out: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    for s in Stage::ANALYSIS {
        if !stages.contains(&s.as_str()) {
            problems.push(format!("stage {} missing from manifest", s.as_str()));
        }
    }
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for (rel, hash) in artifacts {
        let path = out.join(rel);
        let Ok(bytes) = std::fs::read(&path) else {
            problems.push(format!("{rel} listed but missing"));
            continue;
        };
        if hex::encode(Sha256::digest(&bytes)) != hash.as_str().unwrap() {
            problems.push(format!("{rel} hash differs from manifest"));
        }
        if rel.ends_with(".json") && serde_json::from_slice::<serde_json::Value>(&bytes).is_err() {
            problems.push(format!("{rel} is not JSON"));
        }
    }
    let expect = |rel: &str| -> Option<Vec<String>> {
        let fixed: &[&str] = match rel {
            "ingest/cohort.csv" => &["firm_id"],
            "fda/trajectories.csv" => &["firm_id", "t", "value"],
            "fda/terminal.csv" => &["firm_id", "terminal_usd", "jumps", "excluded_after_horizon"],
            "fda/labels.csv" => &["firm_id", "subsector", "regime"],
            "fda/centroids.csv" => &["subsector", "cluster", "regime", "t", "value"],
            "stats/logistic_scatter.csv" => &["repetition", "coefficient", "estimate", "neg_log_p", "converged"],
            _ if rel.starts_with("graphs/") && rel.ends_with("_edges.csv") => &["u", "v", "weight"],
            _ if rel.starts_with("graphs/") && rel.ends_with("_nodes.csv") => &["node_id"],
            _ if rel.starts_with("communities/") && rel.ends_with(".csv") => &["node_id", "community"],
            _ if rel.starts_with("stats/functional_") && rel.ends_with(".csv") => {
                &["coefficient", "t", "estimate", "lower", "upper"]
            }
            _ if rel.starts_with("centrality/") && rel.ends_with(".csv") => &["node_id", "measure", "year", "side", "value"],
            _ => return None,
        };
        Some(fixed.iter().map(|s| (*s).to_owned()).collect())
    };
    for rel in artifacts.keys() {
        if let Some(h) = expect(rel) {
            if header(&out.join(rel)) != h {
                problems.push(format!("{rel} header"));
            }
        }
    }
    for required in [
        "ingest/validation.json",
        "graphs/summary.json",
        "centrality/failures.json",
        "fda/labels.csv",
        "stats/features.csv",
        "stats/logistic_resampling.json",
        "stats/scalar.json",
        "stats/functional.json",
    ] {
        if !artifacts.contains_key(required) {
            problems.push(format!("{required} missing"));
        }
    }
    if header(&out.join("stats/features.csv")).first().map(String::as_str) != Some("firm_id") {
        problems.push("stats/features.csv header".into());
    }
    problems
}

fn run_pipeline(base: &Path, name: &str, workers: usize) -> (PathBuf, f64) {
    let data = base.join("data");
    let mut cfg = PipelineConfig::default();
    cfg.synth_dir = data.clone();
    cfg.input.deals = data.join("deals.csv");
    cfg.input.firms = data.join("firms.csv");
    cfg.input.investors = data.join("investors.csv");
    cfg.output_dir = base.join(name);
    cfg.workers = workers;
    let pool = thread_pool(workers).unwrap();
    let start = Instant::now();
    pool.install(|| {
        let mut p = Pipeline::new(cfg).unwrap();
        p.run(&[Stage::Synth]).unwrap();
        p.run_all().unwrap();
    });
    (base.join(name), start.elapsed().as_secs_f64())
}

#[test]
fn criterion_9_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, secs) = run_pipeline(tmp.path(), "serial", 1);
    let (b, _) = run_pipeline(tmp.path(), "parallel", 4);
    let (c, _) = run_pipeline(tmp.path(), "parallel_again", 4);
    let problems = schema_problems(&a);
    let (da, db, dc) = (tree_digest(&a), tree_digest(&b), tree_digest(&c));
    let identical_workers = da == db;
    let identical_rerun = db == dc;
    let pass = secs < 300.0 && problems.is_empty() && identical_workers && identical_rerun;
    verdict(
        9,
        "end-to-end",
        pass,
        &format!(
            "synth + all in {secs:.1}s with 1 worker, {} artifacts, schema problems {problems:?}, workers 1 vs 4 identical: {identical_workers}, re-run identical: {identical_rerun}",
            da.len()
        ),
    );
}
