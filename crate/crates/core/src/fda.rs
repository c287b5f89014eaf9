//! Birth-aligned cumulative funding trajectories and functional k-means.

use crate::ingest::{year_offset, Dataset, DealRecord, FirmRecord};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdaError {
    #[error("firm {0} has no birth year")]
    MissingBirthYear(String),
    #[error("step {step} does not divide the horizon {horizon}")]
    BadStep { step: f64, horizon: f64 },
    #[error("need at least {need} curves, found {found}")]
    TooFewCurves { need: usize, found: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Cumulative money raised as a right-continuous step function of years
/// since birth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundingTrajectory {
    pub firm_id: String,
    /// Strictly increasing jump times in `[0, horizon)`.
    pub times: Vec<f64>,
    pub amounts: Vec<f64>,
    /// Running totals; `cumulative[i]` is the value on `[times[i], times[i+1])`.
    pub cumulative: Vec<f64>,
    /// Deals dated before the birth year (dropped).
    pub negative_offsets: Vec<String>,
    /// Deals without a known amount (dropped).
    pub unknown_amounts: Vec<String>,
    pub excluded_after_horizon: usize,
}

impl FundingTrajectory {
    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 0.0,
            i => self.cumulative[i - 1],
        }
    }

    /// Total in-horizon money raised.
    pub fn terminal(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

pub fn build_trajectory(
    firm: &FirmRecord,
    deals: &[&DealRecord],
    horizon: f64,
) -> Result<FundingTrajectory, FdaError> {
    let birth = firm
        .birth_year
        .ok_or_else(|| FdaError::MissingBirthYear(firm.firm_id.clone()))?;
    let mut jumps: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut out = FundingTrajectory {
        firm_id: firm.firm_id.clone(),
        times: Vec::new(),
        amounts: Vec::new(),
        cumulative: Vec::new(),
        negative_offsets: Vec::new(),
        unknown_amounts: Vec::new(),
        excluded_after_horizon: 0,
    };
    let mut sorted: Vec<&&DealRecord> = deals.iter().collect();
    sorted.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.deal_id.cmp(&b.deal_id)));
    for d in sorted {
        let t = year_offset(d.date, birth);
        if t < 0.0 {
            log::warn!("deal {} predates the birth of {}; dropped", d.deal_id, firm.firm_id);
            out.negative_offsets.push(d.deal_id.clone());
            continue;
        }
        if t >= horizon {
            out.excluded_after_horizon += 1;
            continue;
        }
        let Some(a) = d.amount_usd else {
            out.unknown_amounts.push(d.deal_id.clone());
            continue;
        };
        // Non-negative finite floats order the same as their bit patterns.
        jumps.entry(t.to_bits()).or_insert((t, 0.0)).1 += a;
    }
    let mut acc = 0.0;
    for (_, (t, a)) in jumps {
        acc += a;
        out.times.push(t);
        out.amounts.push(a);
        out.cumulative.push(acc);
    }
    Ok(out)
}

/// Trajectories of every cohort firm, in firm id order.
pub fn build_trajectories(
    d: &Dataset,
    cohort: &BTreeSet<String>,
    horizon: f64,
) -> Result<Vec<FundingTrajectory>, FdaError> {
    let by_firm = d.deals_by_firm();
    cohort
        .iter()
        .filter_map(|id| d.firms.get(id))
        .map(|f| {
            let deals = by_firm.get(f.firm_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            build_trajectory(f, deals, horizon)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    RawUsd,
    Log1pUsd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryGrid<F> {
    pub firm_ids: Vec<String>,
    pub times: Vec<F>,
    pub values: Matrix<F>,
    pub scale: Scale,
}

impl<F: Scalar> TrajectoryGrid<F> {
    pub fn len(&self) -> usize {
        self.firm_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.firm_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        self.values.row(i)
    }

    pub fn row_of(&self, firm: &str) -> Option<&[F]> {
        self.firm_ids.iter().position(|f| f == firm).map(|i| self.row(i))
    }

    pub fn terminal(&self) -> Vec<F> {
        self.values.column(self.times.len() - 1)
    }

    /// Rows for `ids`, in the given order; unknown ids are skipped.
    pub fn select(&self, ids: &[String]) -> Self {
        let idx: BTreeMap<&str, usize> = self.firm_ids.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
        let rows: Vec<usize> = ids.iter().filter_map(|f| idx.get(f.as_str()).copied()).collect();
        TrajectoryGrid {
            firm_ids: rows.iter().map(|&i| self.firm_ids[i].clone()).collect(),
            times: self.times.clone(),
            values: Matrix::from_fn(rows.len(), self.times.len(), |r, c| self.values[(rows[r], c)]),
            scale: self.scale,
        }
    }

    /// Trapezoidal quadrature weights of the grid.
    pub fn weights(&self) -> Vec<F> {
        trapezoid_weights(&self.times)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FdaError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["firm_id", "t", "value"])?;
        for (i, f) in self.firm_ids.iter().enumerate() {
            for (g, t) in self.times.iter().enumerate() {
                out.write_record([f.as_str(), &t.to_string(), &self.values[(i, g)].to_string()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn trapezoid_weights<F: Scalar>(t: &[F]) -> Vec<F> {
    let n = t.len();
    let half = F::lit(0.5);
    (0..n)
        .map(|i| {
            let left = if i > 0 { t[i] - t[i - 1] } else { F::zero() };
            let right = if i + 1 < n { t[i + 1] - t[i] } else { F::zero() };
            half * (left + right)
        })
        .collect()
}

/// Uniform grid `g * horizon / n` for `g = 0..=n`.
pub fn uniform_grid(step: f64, horizon: f64) -> Result<Vec<f64>, FdaError> {
    let n = (horizon / step).round();
    if !(n >= 1.0) || (n * step - horizon).abs() > 1e-9 * horizon {
        return Err(FdaError::BadStep { step, horizon });
    }
    let n = n as usize;
    Ok((0..=n).map(|g| g as f64 * horizon / n as f64).collect())
}

pub fn resample_to_grid<F: Scalar>(
    trajs: &[FundingTrajectory],
    step: f64,
    horizon: f64,
    scale: Scale,
) -> Result<TrajectoryGrid<F>, FdaError> {
    let times = uniform_grid(step, horizon)?;
    let rows: Vec<Vec<F>> = trajs
        .par_iter()
        .map(|tr| {
            times
                .iter()
                .map(|&t| {
                    let v = tr.value_at(t);
                    F::lit(match scale {
                        Scale::RawUsd => v,
                        Scale::Log1pUsd => v.ln_1p(),
                    })
                })
                .collect()
        })
        .collect();
    let cols = times.len();
    Ok(TrajectoryGrid {
        firm_ids: trajs.iter().map(|t| t.firm_id.clone()).collect(),
        times: times.into_iter().map(F::lit).collect(),
        values: Matrix::from_fn(rows.len(), cols, |r, c| rows[r][c]),
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    /// A restart replaces the incumbent only if its inertia is lower by more
    /// than this relative margin.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 2,
            restarts: 20,
            seed: 42,
            tol: 1e-8,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    High,
    Low,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::High => "high",
            Regime::Low => "low",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeLabeling<F> {
    pub subsector: String,
    /// Clustered firms in id order.
    pub firm_ids: Vec<String>,
    pub assignment: Vec<usize>,
    pub labels: BTreeMap<String, Regime>,
    pub centroids: Vec<Vec<F>>,
    /// Index of the centroid with the largest terminal value.
    pub high: usize,
    pub inertia: F,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<F>,
}

impl<F: Scalar> RegimeLabeling<F> {
    pub fn count(&self, r: Regime) -> usize {
        self.labels.values().filter(|&&x| x == r).count()
    }
}

fn dist2<F: Scalar>(a: &[F], b: &[F], w: &[F]) -> F {
    a.iter()
        .zip(b)
        .zip(w)
        .fold(F::zero(), |acc, ((&x, &y), &wi)| acc + wi * (x - y) * (x - y))
}

fn nearest<F: Scalar>(row: &[F], centroids: &[Vec<F>], w: &[F]) -> (usize, F) {
    let mut best = (0, dist2(row, &centroids[0], w));
    for (c, cen) in centroids.iter().enumerate().skip(1) {
        let d = dist2(row, cen, w);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

struct Run<F> {
    assignment: Vec<usize>,
    centroids: Vec<Vec<F>>,
    inertia: F,
    history: Vec<F>,
}

fn plus_plus<F: Scalar>(rows: &[&[F]], k: usize, w: &[F], rng: &mut ChaCha8Rng) -> Vec<Vec<F>> {
    let n = rows.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d: Vec<F> = rows.iter().map(|r| dist2(r, rows[chosen[0]], w)).collect();
    while chosen.len() < k {
        let total: F = d.iter().copied().sum();
        let next = if total > F::zero() {
            let mut u = F::lit(rng.random::<f64>()) * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if di > F::zero() && u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            while d[pick] == F::zero() {
                pick -= 1;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            d[i] = d[i].min(dist2(r, rows[next], w));
        }
    }
    chosen.iter().map(|&i| rows[i].to_vec()).collect()
}

fn lloyd<F: Scalar>(rows: &[&[F]], mut centroids: Vec<Vec<F>>, w: &[F], max_iter: usize) -> Run<F> {
    let n = rows.len();
    let k = centroids.len();
    let p = w.len();
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut next: Vec<(usize, F)> = rows.iter().map(|r| nearest(r, &centroids, w)).collect();
        let mut sizes = vec![0usize; k];
        for &(c, _) in &next {
            sizes[c] += 1;
        }
        // Re-seed empty clusters at the row farthest from its centroid.
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[next[i].0] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if next[b].1 >= next[i].1 => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far.filter(|&i| next[i].1 > F::zero()) {
                sizes[next[i].0] -= 1;
                sizes[c] = 1;
                next[i] = (c, F::zero());
            }
        }
        let changed = next.iter().zip(&assignment).any(|(&(c, _), &a)| c != a);
        assignment = next.iter().map(|&(c, _)| c).collect();
        for (c, cen) in centroids.iter_mut().enumerate() {
            if sizes[c] == 0 {
                continue;
            }
            cen.iter_mut().for_each(|v| *v = F::zero());
            for (i, r) in rows.iter().enumerate() {
                if assignment[i] == c {
                    for g in 0..p {
                        cen[g] += r[g];
                    }
                }
            }
            let m = F::count(sizes[c]);
            cen.iter_mut().for_each(|v| *v /= m);
        }
        let inertia = rows
            .iter()
            .zip(&assignment)
            .fold(F::zero(), |acc, (r, &c)| acc + dist2(r, &centroids[c], w));
        history.push(inertia);
        if !changed {
            break;
        }
    }
    let inertia = history.last().copied().unwrap_or(F::zero());
    Run {
        assignment,
        centroids,
        inertia,
        history,
    }
}

/// Functional k-means under the trapezoid-weighted L2 metric. Rows are
/// processed in firm id order, so the labels do not depend on input order.
pub fn functional_kmeans<F: Scalar>(
    grid: &TrajectoryGrid<F>,
    params: &KMeansParams,
) -> Result<RegimeLabeling<F>, FdaError> {
    functional_kmeans_named(grid, params, "")
}

fn functional_kmeans_named<F: Scalar>(
    grid: &TrajectoryGrid<F>,
    params: &KMeansParams,
    subsector: &str,
) -> Result<RegimeLabeling<F>, FdaError> {
    let k = params.k.max(1);
    if grid.len() < k {
        return Err(FdaError::TooFewCurves {
            need: k,
            found: grid.len(),
        });
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid.firm_ids[a].cmp(&grid.firm_ids[b]));
    let rows: Vec<&[F]> = order.iter().map(|&i| grid.row(i)).collect();
    let w = grid.weights();
    let runs: Vec<Run<F>> = (0..params.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(r as u64);
            let init = plus_plus(&rows, k, &w, &mut rng);
            lloyd(&rows, init, &w, params.max_iter)
        })
        .collect();
    let margin = F::one() - F::lit(params.tol);
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia * margin { r } else { best })
        .expect("at least one restart");
    let last = grid.times.len() - 1;
    let high = (0..k).fold(0, |h, c| if best.centroids[c][last] > best.centroids[h][last] { c } else { h });
    let firm_ids: Vec<String> = order.iter().map(|&i| grid.firm_ids[i].clone()).collect();
    let labels = firm_ids
        .iter()
        .zip(&best.assignment)
        .map(|(f, &c)| (f.clone(), if c == high { Regime::High } else { Regime::Low }))
        .collect();
    Ok(RegimeLabeling {
        subsector: subsector.to_owned(),
        firm_ids,
        assignment: best.assignment,
        labels,
        centroids: best.centroids,
        high,
        inertia: best.inertia,
        inertia_history: best.history,
    })
}

#[derive(Clone, Debug)]
pub struct SubsectorClustering<F> {
    pub labelings: BTreeMap<String, RegimeLabeling<F>>,
    /// Sub-sectors skipped for having fewer than `2k` firms, with their size.
    pub skipped: Vec<(String, usize)>,
}

impl<F: Scalar> SubsectorClustering<F> {
    /// Union of the per-sector labels.
    pub fn labels(&self) -> BTreeMap<String, Regime> {
        self.labelings
            .values()
            .flat_map(|l| l.labels.iter().map(|(f, &r)| (f.clone(), r)))
            .collect()
    }

    pub fn write_labels_csv<W: Write>(&self, w: W) -> Result<(), FdaError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["firm_id", "subsector", "regime"])?;
        for (s, l) in &self.labelings {
            for (f, r) in &l.labels {
                out.write_record([f.as_str(), s.as_str(), r.as_str()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_centroids_csv<W: Write>(&self, times: &[F], w: W) -> Result<(), FdaError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["subsector", "cluster", "regime", "t", "value"])?;
        for (s, l) in &self.labelings {
            for (c, cen) in l.centroids.iter().enumerate() {
                let regime = if c == l.high { Regime::High } else { Regime::Low };
                for (t, v) in times.iter().zip(cen) {
                    out.write_record([s.as_str(), &c.to_string(), regime.as_str(), &t.to_string(), &v.to_string()])?;
                }
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Clusters each sub-sector independently with the same parameters.
pub fn cluster_by_subsector<F: Scalar>(
    grids: &BTreeMap<String, TrajectoryGrid<F>>,
    params: &KMeansParams,
) -> Result<SubsectorClustering<F>, FdaError> {
    let mut skipped = Vec::new();
    let mut todo = Vec::new();
    for (s, g) in grids {
        if g.len() < 2 * params.k {
            log::warn!("sub-sector {s} has {} firms; skipped", g.len());
            skipped.push((s.clone(), g.len()));
        } else {
            todo.push((s, g));
        }
    }
    let done: Vec<Result<(String, RegimeLabeling<F>), FdaError>> = todo
        .par_iter()
        .map(|(s, g)| functional_kmeans_named(g, params, s).map(|l| ((*s).clone(), l)))
        .collect();
    Ok(SubsectorClustering {
        labelings: done.into_iter().collect::<Result<_, _>>()?,
        skipped,
    })
}

/// Splits a grid by firm sub-sector; firms without one are dropped.
pub fn grids_by_subsector<F: Scalar>(grid: &TrajectoryGrid<F>, d: &Dataset) -> BTreeMap<String, TrajectoryGrid<F>> {
    let mut ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for f in &grid.firm_ids {
        if let Some(s) = d.firms.get(f).and_then(|r| r.subsector.clone()) {
            ids.entry(s).or_default().push(f.clone());
        }
    }
    ids.into_iter().map(|(s, f)| (s, grid.select(&f))).collect()
}
