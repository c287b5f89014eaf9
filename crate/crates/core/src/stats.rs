//! Feature transforms and de-correlation, logistic and linear regressions,
//! best subset selection and function-on-scalar regression.

use crate::centrality::FirmFeatureVector;
use crate::fda::TrajectoryGrid;
use crate::linalg::{Cholesky, HouseholderQr, LinalgError, Matrix};
use crate::scalar::{mean, sample_sd, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("column {0} has zero variance")]
    ConstantColumn(String),
    #[error("column {0} has values at or below -1; log1p undefined")]
    InvalidLog(String),
    #[error("need at least {need} features, found {found}")]
    TooFewFeatures { need: usize, found: usize },
    #[error("at most 20 features can be searched exhaustively, got {0}")]
    TooManyFeatures(usize),
    #[error("response has a single class")]
    SingleClass,
    #[error("minority class has {0} rows; at least 2 required")]
    TooFewMinority(usize),
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("{n} rows cannot support {p} predictors plus an intercept")]
    TooFewRows { n: usize, p: usize },
    #[error("unknown feature {0}")]
    UnknownFeature(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl From<LinalgError> for StatsError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Dimension(s) => StatsError::Dimension(s),
            _ => StatsError::SingularDesign,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Log1p,
    Zscore,
    Log1pThenZscore,
}

/// Firms by named features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<F> {
    pub row_ids: Vec<String>,
    pub names: Vec<String>,
    pub data: Matrix<F>,
    pub transforms: BTreeMap<String, Transform>,
}

impl<F: Scalar> FeatureMatrix<F> {
    pub fn new(row_ids: Vec<String>, names: Vec<String>, data: Matrix<F>) -> Result<Self, StatsError> {
        if data.rows() != row_ids.len() || data.cols() != names.len() {
            return Err(StatsError::Dimension(format!(
                "{}x{} data for {} rows and {} names",
                data.rows(),
                data.cols(),
                row_ids.len(),
                names.len()
            )));
        }
        let transforms = names.iter().map(|n| (n.clone(), Transform::None)).collect();
        Ok(FeatureMatrix {
            row_ids,
            names,
            data,
            transforms,
        })
    }

    /// Matrix from columns given as `(name, values)`.
    pub fn from_columns(row_ids: Vec<String>, columns: Vec<(String, Vec<F>)>) -> Result<Self, StatsError> {
        let n = row_ids.len();
        if let Some((name, _)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(StatsError::Dimension(format!("column {name} length differs from {n} rows")));
        }
        let data = Matrix::from_fn(n, columns.len(), |i, j| columns[j].1[i]);
        Self::new(row_ids, columns.into_iter().map(|(n, _)| n).collect(), data)
    }

    /// Rows of the firms that have every requested feature. Returns the
    /// matrix and, for each excluded firm, the names it lacks.
    pub fn from_features(fv: &[FirmFeatureVector<F>], names: &[String]) -> (Self, Vec<(String, Vec<String>)>) {
        let mut rows = Vec::new();
        let mut excluded = Vec::new();
        for f in fv {
            let lacking: Vec<String> = names.iter().filter(|n| f.get(n).is_none()).cloned().collect();
            if lacking.is_empty() {
                rows.push(f);
            } else {
                excluded.push((f.firm_id.clone(), lacking));
            }
        }
        let data = Matrix::from_fn(rows.len(), names.len(), |i, j| rows[i].get(&names[j]).expect("checked"));
        let m = Self::new(rows.iter().map(|f| f.firm_id.clone()).collect(), names.to_vec(), data)
            .expect("consistent dimensions");
        (m, excluded)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<F>> {
        self.column_index(name).map(|j| self.data.column(j))
    }

    /// Columns `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self, StatsError> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| StatsError::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureMatrix {
            row_ids: self.row_ids.clone(),
            names: names.to_vec(),
            data: Matrix::from_fn(self.n_rows(), idx.len(), |i, j| self.data[(i, idx[j])]),
            transforms: names.iter().map(|n| (n.clone(), self.transforms[n])).collect(),
        })
    }

    /// Rows at `rows`, in that order.
    pub fn take_rows(&self, rows: &[usize]) -> Self {
        FeatureMatrix {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            names: self.names.clone(),
            data: Matrix::from_fn(rows.len(), self.n_cols(), |i, j| self.data[(rows[i], j)]),
            transforms: self.transforms.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(std::iter::once("firm_id").chain(self.names.iter().map(String::as_str)))?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let row: Vec<String> = self.data.row(i).iter().map(|v| v.to_string()).collect();
            out.write_record(std::iter::once(id.as_str()).chain(row.iter().map(String::as_str)))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformPolicy {
    /// Columns log1p-transformed before scaling.
    pub log1p: Vec<String>,
    pub zscore: bool,
}

impl Default for TransformPolicy {
    fn default() -> Self {
        TransformPolicy {
            log1p: vec!["firm_voterank".into(), "inv_max_degree".into(), "firm_eigenvector".into()],
            zscore: true,
        }
    }
}

pub fn zscore<F: Scalar>(xs: &[F]) -> Option<Vec<F>> {
    let m = mean(xs);
    let s = sample_sd(xs);
    if !(s > F::zero()) {
        return None;
    }
    Some(xs.iter().map(|&x| (x - m) / s).collect())
}

/// log1p on the policy's columns (those present), then z-scoring of every
/// column if enabled.
pub fn apply_transforms<F: Scalar>(m: &FeatureMatrix<F>, policy: &TransformPolicy) -> Result<FeatureMatrix<F>, StatsError> {
    let mut out = m.clone();
    for (j, name) in m.names.iter().enumerate() {
        let mut col = m.data.column(j);
        let mut t = m.transforms[name];
        if policy.log1p.contains(name) {
            if col.iter().any(|&v| !(v > -F::one())) {
                return Err(StatsError::InvalidLog(name.clone()));
            }
            col.iter_mut().for_each(|v| *v = v.ln_1p());
            t = Transform::Log1p;
        }
        if policy.zscore {
            col = zscore(&col).ok_or_else(|| StatsError::ConstantColumn(name.clone()))?;
            t = if t == Transform::Log1p { Transform::Log1pThenZscore } else { Transform::Zscore };
        }
        for (i, v) in col.into_iter().enumerate() {
            out.data[(i, j)] = v;
        }
        out.transforms.insert(name.clone(), t);
    }
    Ok(out)
}

pub fn pearson<F: Scalar>(a: &[F], b: &[F]) -> F {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (F::zero(), F::zero(), F::zero());
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).max(-F::one()).min(F::one())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationDistance {
    /// `1 - r`: anti-correlated features are far apart.
    #[default]
    OneMinusR,
    OneMinusAbsR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DendrogramNode {
    Leaf { feature: String },
    Merge { height: f64, left: Box<DendrogramNode>, right: Box<DendrogramNode> },
}

impl DendrogramNode {
    pub fn height(&self) -> f64 {
        match self {
            DendrogramNode::Leaf { .. } => 0.0,
            DendrogramNode::Merge { height, .. } => *height,
        }
    }

    /// Merge heights in post-order (left subtree, right subtree, node).
    pub fn merge_heights(&self) -> Vec<f64> {
        match self {
            DendrogramNode::Leaf { .. } => Vec::new(),
            DendrogramNode::Merge { height, left, right } => {
                let mut h = left.merge_heights();
                h.extend(right.merge_heights());
                h.push(*height);
                h
            }
        }
    }

    pub fn leaves(&self) -> Vec<&str> {
        match self {
            DendrogramNode::Leaf { feature } => vec![feature],
            DendrogramNode::Merge { left, right, .. } => {
                let mut l = left.leaves();
                l.extend(right.leaves());
                l
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dedup {
    /// One representative per cluster, in input column order.
    pub selected: Vec<String>,
    pub clusters: Vec<Vec<String>>,
    pub dendrogram: DendrogramNode,
    /// Heights of the successive merges.
    pub heights: Vec<f64>,
}

/// Complete-linkage clustering of the features under a correlation
/// distance, cut to `k` clusters; each cluster is represented by its medoid
/// (largest mean |r| to the other members).
pub fn correlation_dedup<F: Scalar>(
    m: &FeatureMatrix<F>,
    k: usize,
    distance: CorrelationDistance,
) -> Result<Dedup, StatsError> {
    let p = m.n_cols();
    if p < k.max(1) {
        return Err(StatsError::TooFewFeatures { need: k.max(1), found: p });
    }
    let cols: Vec<Vec<F>> = (0..p).map(|j| m.data.column(j)).collect();
    for (j, c) in cols.iter().enumerate() {
        if !(sample_sd(c) > F::zero()) {
            return Err(StatsError::ConstantColumn(m.names[j].clone()));
        }
    }
    let mut r = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            r[i][j] = if i == j { 1.0 } else { pearson(&cols[i], &cols[j]).as_f64() };
        }
    }
    let dist = |a: usize, b: usize| match distance {
        CorrelationDistance::OneMinusR => 1.0 - r[a][b],
        CorrelationDistance::OneMinusAbsR => 1.0 - r[a][b].abs(),
    };
    let mut clusters: Vec<(Vec<usize>, DendrogramNode)> = (0..p)
        .map(|j| (vec![j], DendrogramNode::Leaf { feature: m.names[j].clone() }))
        .collect();
    let mut heights = Vec::new();
    let mut cut: Option<Vec<Vec<usize>>> = (k >= p).then(|| clusters.iter().map(|c| c.0.clone()).collect());
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = clusters[a]
                    .0
                    .iter()
                    .flat_map(|&i| clusters[b].0.iter().map(move |&j| (i, j)))
                    .map(|(i, j)| dist(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (h, a, b) = best;
        let (mb, nb) = clusters.remove(b);
        let (ma, na) = clusters.remove(a);
        let mut members = ma;
        members.extend(mb);
        members.sort_unstable();
        let node = DendrogramNode::Merge {
            height: h,
            left: Box::new(na),
            right: Box::new(nb),
        };
        clusters.insert(a, (members, node));
        heights.push(h);
        if clusters.len() == k {
            cut = Some(clusters.iter().map(|c| c.0.clone()).collect());
        }
    }
    let cut = cut.unwrap_or_else(|| vec![(0..p).collect()]);
    let mut selected: Vec<usize> = cut
        .iter()
        .map(|members| {
            let score = |i: usize| {
                let others = members.iter().filter(|&&j| j != i);
                let n = members.len().saturating_sub(1).max(1) as f64;
                others.map(|&j| r[i][j].abs()).sum::<f64>() / n
            };
            *members
                .iter()
                .max_by(|&&a, &&b| {
                    score(a)
                        .partial_cmp(&score(b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| m.names[b].cmp(&m.names[a]))
                })
                .expect("non-empty cluster")
        })
        .collect();
    selected.sort_unstable();
    let root = clusters.pop().expect("at least one feature").1;
    Ok(Dedup {
        selected: selected.iter().map(|&j| m.names[j].clone()).collect(),
        clusters: cut
            .iter()
            .map(|c| c.iter().map(|&j| m.names[j].clone()).collect())
            .collect(),
        dendrogram: root,
        heights,
    })
}

fn design<F: Scalar>(x: &FeatureMatrix<F>) -> Matrix<F> {
    Matrix::from_fn(x.n_rows(), x.n_cols() + 1, |i, j| if j == 0 { F::one() } else { x.data[(i, j - 1)] })
}

fn coefficient_names<F>(x: &FeatureMatrix<F>) -> Vec<String> {
    std::iter::once("intercept".to_string()).chain(x.names.iter().cloned()).collect()
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * n.sf(z.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogisticFit<F> {
    pub names: Vec<String>,
    pub coefficients: Vec<F>,
    pub std_errors: Vec<F>,
    pub z_values: Vec<F>,
    /// Two-sided Wald p-values.
    pub p_values: Vec<F>,
    pub deviance: F,
    pub null_deviance: F,
    pub deviance_explained: F,
    pub iterations: usize,
    pub converged: bool,
    /// Fitted probabilities collapsed to 0 or 1: the MLE does not exist.
    pub separation: bool,
    pub n: usize,
}

impl<F: Scalar> LogisticFit<F> {
    pub fn coefficient(&self, name: &str) -> Option<F> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn p_value(&self, name: &str) -> Option<F> {
        self.names.iter().position(|n| n == name).map(|i| self.p_values[i])
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn logistic_deviance<F: Scalar>(eta: &[F], y: &[bool]) -> F {
    let two = F::lit(2.0);
    eta.iter()
        .zip(y)
        .fold(F::zero(), |acc, (&e, &yi)| acc + two * if yi { softplus(-e) } else { softplus(e) })
}

/// Maximum-likelihood logistic regression with intercept, by iteratively
/// reweighted least squares.
pub fn logistic_fit<F: Scalar>(
    x: &FeatureMatrix<F>,
    y: &[bool],
    opts: &LogisticOptions,
) -> Result<LogisticFit<F>, StatsError> {
    let n = x.n_rows();
    if y.len() != n {
        return Err(StatsError::Dimension(format!("{} labels for {n} rows", y.len())));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == n {
        return Err(StatsError::SingleClass);
    }
    let xd = design(x);
    let p = xd.cols();
    HouseholderQr::new(&xd)?;
    let tol = F::lit(opts.tol).max(F::epsilon() * F::lit(100.0));
    let ybar = F::count(pos) / F::count(n);
    let null_eta = vec![(ybar / (F::one() - ybar)).ln(); n];
    let null_deviance = logistic_deviance(&null_eta, y);

    let mut beta = vec![F::zero(); p];
    let mut eta = vec![F::zero(); n];
    let mut dev_old = logistic_deviance(&eta, y);
    let mut converged = false;
    let mut iterations = 0;
    let floor = F::epsilon() * F::epsilon();
    for it in 1..=opts.max_iter {
        iterations = it;
        let mut a = Matrix::zeros(n, p);
        let mut b = vec![F::zero(); n];
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let w = (mu * (F::one() - mu)).max(floor);
            let yi = if y[i] { F::one() } else { F::zero() };
            let sw = w.sqrt();
            for j in 0..p {
                a[(i, j)] = sw * xd[(i, j)];
            }
            b[i] = sw * (eta[i] + (yi - mu) / w);
        }
        let Ok(qr) = HouseholderQr::new(&a) else { break };
        let next = qr.solve(&b);
        let next_eta = xd.matvec(&next);
        let dev = logistic_deviance(&next_eta, y);
        beta = next;
        eta = next_eta;
        if (dev - dev_old).abs() / (dev.abs() + F::lit(0.1)) < tol {
            converged = true;
            dev_old = dev;
            break;
        }
        dev_old = dev;
    }
    let deviance = dev_old;
    let max_eta = eta.iter().fold(F::zero(), |m, &e| m.max(e.abs()));
    let separation = deviance < F::lit(1e-8) * null_deviance.max(F::one()) || max_eta > F::lit(30.0);
    if separation {
        log::warn!("logistic fit: fitted probabilities at 0 or 1 (separation)");
    }

    let mut a = Matrix::zeros(n, p);
    for i in 0..n {
        let mu = sigmoid(eta[i]);
        let sw = (mu * (F::one() - mu)).max(floor).sqrt();
        for j in 0..p {
            a[(i, j)] = sw * xd[(i, j)];
        }
    }
    let cov = HouseholderQr::new(&a).map(|q| q.gram_inverse()).ok();
    let std_errors: Vec<F> = (0..p)
        .map(|j| cov.as_ref().map_or(F::infinity(), |c| c[(j, j)].max(F::zero()).sqrt()))
        .collect();
    let z_values: Vec<F> = beta.iter().zip(&std_errors).map(|(&b, &s)| b / s).collect();
    let p_values = z_values.iter().map(|z| F::lit(normal_two_sided(z.as_f64()))).collect();
    Ok(LogisticFit {
        names: coefficient_names(x),
        deviance_explained: (F::one() - deviance / null_deviance).max(F::zero()).min(F::one()),
        coefficients: beta,
        std_errors,
        z_values,
        p_values,
        deviance,
        null_deviance,
        iterations,
        converged: converged && !separation,
        separation,
        n,
    })
}

/// Likelihood-ratio p-values for dropping each feature (intercept excluded).
pub fn likelihood_ratio_pvalues<F: Scalar>(
    x: &FeatureMatrix<F>,
    y: &[bool],
    opts: &LogisticOptions,
) -> Result<Vec<F>, StatsError> {
    let full = logistic_fit(x, y, opts)?;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    x.names
        .iter()
        .map(|drop| {
            let keep: Vec<String> = x.names.iter().filter(|n| *n != drop).cloned().collect();
            let reduced = logistic_fit(&x.select(&keep)?, y, opts)?;
            let lr = (reduced.deviance - full.deviance).max(F::zero()).as_f64();
            Ok(F::lit(chi.sf(lr)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepetitionRecord<F> {
    pub repetition: usize,
    pub rows: usize,
    pub coefficients: Vec<F>,
    pub p_values: Vec<F>,
    pub deviance_explained: F,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResamplingSummary<F> {
    pub names: Vec<String>,
    pub repetitions: usize,
    pub minority_size: usize,
    pub minority_is_positive: bool,
    pub records: Vec<RepetitionRecord<F>>,
    /// Means and sample SDs over converged repetitions.
    pub mean: Vec<F>,
    pub sd: Vec<F>,
    pub mean_deviance_explained: F,
    pub converged: usize,
    pub not_converged: usize,
}

impl<F: Scalar> ResamplingSummary<F> {
    /// Rows `repetition, coefficient, estimate, neg_log_p` (natural log).
    pub fn write_scatter_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["repetition", "coefficient", "estimate", "neg_log_p", "converged"])?;
        for r in &self.records {
            for (j, name) in self.names.iter().enumerate() {
                let (b, p) = match (r.coefficients.get(j), r.p_values.get(j)) {
                    (Some(b), Some(p)) => (b.to_string(), (-p.ln()).to_string()),
                    _ => (String::new(), String::new()),
                };
                out.write_record([&r.repetition.to_string(), name.as_str(), &b, &p, &r.converged.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Seeded RNG of task `index` under `master`.
pub fn task_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Repeated logistic fits on the minority class plus an equally sized
/// random subset (without replacement) of the majority class.
pub fn balanced_resampling<F: Scalar>(
    x: &FeatureMatrix<F>,
    y: &[bool],
    reps: usize,
    seed: u64,
    opts: &LogisticOptions,
) -> Result<ResamplingSummary<F>, StatsError> {
    if y.len() != x.n_rows() {
        return Err(StatsError::Dimension(format!("{} labels for {} rows", y.len(), x.n_rows())));
    }
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    let minority_is_positive = pos.len() <= neg.len();
    let (minority, majority) = if minority_is_positive { (&pos, &neg) } else { (&neg, &pos) };
    if minority.len() < 2 {
        return Err(StatsError::TooFewMinority(minority.len()));
    }
    let m = minority.len();
    let records: Vec<RepetitionRecord<F>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = task_rng(seed, r as u64);
            let mut rows: Vec<usize> = minority.clone();
            rows.extend(rand::seq::index::sample(&mut rng, majority.len(), m).into_iter().map(|i| majority[i]));
            rows.sort_unstable();
            let xs = x.take_rows(&rows);
            let ys: Vec<bool> = rows.iter().map(|&i| y[i]).collect();
            match logistic_fit(&xs, &ys, opts) {
                Ok(f) => RepetitionRecord {
                    repetition: r,
                    rows: rows.len(),
                    coefficients: f.coefficients,
                    p_values: f.p_values,
                    deviance_explained: f.deviance_explained,
                    converged: f.converged,
                    error: None,
                },
                Err(e) => RepetitionRecord {
                    repetition: r,
                    rows: rows.len(),
                    coefficients: Vec::new(),
                    p_values: Vec::new(),
                    deviance_explained: F::nan(),
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let names = coefficient_names(x);
    let ok: Vec<&RepetitionRecord<F>> = records.iter().filter(|r| r.converged).collect();
    let col = |j: usize| ok.iter().map(|r| r.coefficients[j]).collect::<Vec<F>>();
    let devs: Vec<F> = ok.iter().map(|r| r.deviance_explained).collect();
    Ok(ResamplingSummary {
        mean: (0..names.len()).map(|j| mean(&col(j))).collect(),
        sd: (0..names.len()).map(|j| sample_sd(&col(j))).collect(),
        mean_deviance_explained: mean(&devs),
        converged: ok.len(),
        not_converged: records.len() - ok.len(),
        names,
        repetitions: reps,
        minority_size: m,
        minority_is_positive,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearFit<F> {
    pub names: Vec<String>,
    pub coefficients: Vec<F>,
    pub std_errors: Vec<F>,
    pub t_values: Vec<F>,
    pub p_values: Vec<F>,
    pub r_squared: F,
    pub adj_r_squared: F,
    pub residual_se: F,
    pub f_statistic: F,
    pub f_p_value: F,
    pub rss: F,
    pub n: usize,
}

impl<F: Scalar> LinearFit<F> {
    pub fn coefficient(&self, name: &str) -> Option<F> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }
}

/// QR of the intercept-augmented design, shared by scalar and pointwise fits.
struct OlsDesign<F> {
    xd: Matrix<F>,
    qr: HouseholderQr<F>,
    gram_inv: Matrix<F>,
}

impl<F: Scalar> OlsDesign<F> {
    fn new(x: &FeatureMatrix<F>) -> Result<Self, StatsError> {
        let (n, p) = (x.n_rows(), x.n_cols());
        if n <= p + 1 {
            return Err(StatsError::TooFewRows { n, p });
        }
        let xd = design(x);
        let qr = HouseholderQr::new(&xd)?;
        let gram_inv = qr.gram_inverse();
        Ok(OlsDesign { xd, qr, gram_inv })
    }

    /// Coefficients, standard errors and residual sum of squares.
    fn solve(&self, y: &[F]) -> (Vec<F>, Vec<F>, F) {
        let beta = self.qr.solve(y);
        let fitted = self.xd.matvec(&beta);
        let rss = y.iter().zip(&fitted).fold(F::zero(), |a, (&yi, &fi)| a + (yi - fi) * (yi - fi));
        let df = F::count(self.xd.rows() - self.xd.cols());
        let s2 = rss / df;
        let se = (0..beta.len()).map(|j| (s2 * self.gram_inv[(j, j)]).max(F::zero()).sqrt()).collect();
        (beta, se, rss)
    }
}

/// Ordinary least squares with intercept via Householder QR.
pub fn ols_fit<F: Scalar>(x: &FeatureMatrix<F>, y: &[F]) -> Result<LinearFit<F>, StatsError> {
    if y.len() != x.n_rows() {
        return Err(StatsError::Dimension(format!("{} responses for {} rows", y.len(), x.n_rows())));
    }
    let d = OlsDesign::new(x)?;
    let (n, p) = (x.n_rows(), x.n_cols());
    let df = (n - p - 1) as f64;
    let (beta, se, rss) = d.solve(y);
    let ybar = mean(y);
    let tss = y.iter().fold(F::zero(), |a, &v| a + (v - ybar) * (v - ybar));
    let r2 = if tss > F::zero() {
        (F::one() - rss / tss).max(F::zero()).min(F::one())
    } else {
        F::one()
    };
    let adj = F::one() - (F::one() - r2) * F::count(n - 1) / F::lit(df);
    let t = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let t_values: Vec<F> = beta.iter().zip(&se).map(|(&b, &s)| b / s).collect();
    let p_values = t_values
        .iter()
        .map(|tv| {
            let a = tv.as_f64().abs();
            F::lit(if a.is_nan() { f64::NAN } else { 2.0 * t.sf(a) })
        })
        .collect();
    let (f_statistic, f_p_value) = if p == 0 {
        (F::nan(), F::nan())
    } else {
        let f = ((tss - rss) / F::count(p)) / (rss / F::lit(df));
        let dist = FisherSnedecor::new(p as f64, df).expect("positive degrees of freedom");
        let fp = if f.is_finite() { dist.sf(f.as_f64().max(0.0)) } else { 0.0 };
        (f, F::lit(fp))
    };
    Ok(LinearFit {
        names: coefficient_names(x),
        coefficients: beta,
        std_errors: se,
        t_values,
        p_values,
        r_squared: r2,
        adj_r_squared: adj,
        residual_se: (rss / F::lit(df)).sqrt(),
        f_statistic,
        f_p_value,
        rss,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetResult<F> {
    pub size: usize,
    /// Feature names, sorted.
    pub features: Vec<String>,
    pub rss: F,
}

/// For each size up to `max_size`, the feature subset (with intercept)
/// minimizing the residual sum of squares. Among equal RSS the
/// lexicographically first sorted name list wins.
pub fn best_subset<F: Scalar>(x: &FeatureMatrix<F>, y: &[F], max_size: usize) -> Result<Vec<SubsetResult<F>>, StatsError> {
    let p = x.n_cols();
    if p > 20 {
        return Err(StatsError::TooManyFeatures(p));
    }
    if y.len() != x.n_rows() {
        return Err(StatsError::Dimension(format!("{} responses for {} rows", y.len(), x.n_rows())));
    }
    let n = x.n_rows();
    let cols: Vec<Vec<F>> = (0..p)
        .map(|j| {
            let c = x.data.column(j);
            let m = mean(&c);
            c.into_iter().map(|v| v - m).collect()
        })
        .collect();
    let ybar = mean(y);
    let yc: Vec<F> = y.iter().map(|&v| v - ybar).collect();
    let dot = |a: &[F], b: &[F]| a.iter().zip(b).fold(F::zero(), |s, (&u, &v)| s + u * v);
    let gram: Vec<Vec<F>> = (0..p).map(|i| (0..p).map(|j| dot(&cols[i], &cols[j])).collect()).collect();
    let xty: Vec<F> = (0..p).map(|j| dot(&cols[j], &yc)).collect();
    let yty = dot(&yc, &yc);

    // Columns in name order so that combinations enumerate lexicographically.
    let mut by_name: Vec<usize> = (0..p).collect();
    by_name.sort_by(|&a, &b| x.names[a].cmp(&x.names[b]));

    let rss_of = |subset: &[usize]| -> Option<F> {
        let s = subset.len();
        let g = Matrix::from_fn(s, s, |a, b| gram[subset[a]][subset[b]]);
        let c: Vec<F> = subset.iter().map(|&j| xty[j]).collect();
        let ch = Cholesky::new(&g).ok()?;
        let beta = ch.solve(&c);
        Some(yty - dot(&beta, &c))
    };

    let mut out = Vec::new();
    for size in 1..=max_size.min(p).min(n.saturating_sub(2)) {
        let mut best: Option<(F, Vec<usize>)> = None;
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            let subset: Vec<usize> = comb.iter().map(|&i| by_name[i]).collect();
            if let Some(rss) = rss_of(&subset) {
                if best.as_ref().is_none_or(|(b, _)| rss < *b) {
                    best = Some((rss, subset));
                }
            }
            // Next combination in lexicographic order.
            let mut i = size;
            while i > 0 && comb[i - 1] == p - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            comb[i - 1] += 1;
            for j in i..size {
                comb[j] = comb[j - 1] + 1;
            }
        }
        if let Some((rss, subset)) = best {
            out.push(SubsetResult {
                size,
                features: subset.iter().map(|&j| x.names[j].clone()).collect(),
                rss: rss.max(F::zero()),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FunctionalFit<F> {
    pub names: Vec<String>,
    pub times: Vec<F>,
    /// `estimates[j][g]`: coefficient `j` at grid point `g`.
    pub estimates: Vec<Vec<F>>,
    pub std_errors: Vec<Vec<F>>,
    pub lower: Vec<Vec<F>>,
    pub upper: Vec<Vec<F>>,
    pub smoothing_bandwidth: Option<f64>,
}

impl<F: Scalar> FunctionalFit<F> {
    pub fn curve(&self, name: &str) -> Option<&[F]> {
        self.names.iter().position(|n| n == name).map(|j| self.estimates[j].as_slice())
    }

    /// Rows `coefficient, t, estimate, lower, upper`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["coefficient", "t", "estimate", "lower", "upper"])?;
        for (j, name) in self.names.iter().enumerate() {
            for g in 0..self.times.len() {
                out.write_record([
                    name.clone(),
                    self.times[g].to_string(),
                    self.estimates[j][g].to_string(),
                    self.lower[j][g].to_string(),
                    self.upper[j][g].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

const BAND_Z: f64 = 1.96;

fn gaussian_smooth<F: Scalar>(times: &[F], ys: &[F], bandwidth: f64) -> Vec<F> {
    times
        .iter()
        .map(|&t0| {
            let (mut num, mut den) = (F::zero(), F::zero());
            for (&t, &y) in times.iter().zip(ys) {
                let u = (t - t0).as_f64() / bandwidth;
                let k = F::lit((-0.5 * u * u).exp());
                num += k * y;
                den += k;
            }
            num / den
        })
        .collect()
}

/// Pointwise least squares of each grid column on the features, with
/// `estimate ± 1.96 SE` bands and optional Gaussian-kernel smoothing of the
/// coefficient and SE curves.
pub fn function_on_scalar_fit<F: Scalar>(
    grid: &TrajectoryGrid<F>,
    x: &FeatureMatrix<F>,
    smoothing: Option<f64>,
) -> Result<FunctionalFit<F>, StatsError> {
    let aligned = grid.select(&x.row_ids);
    if aligned.firm_ids != x.row_ids {
        return Err(StatsError::Dimension("feature rows missing from the trajectory grid".into()));
    }
    let d = OlsDesign::new(x)?;
    let g = grid.times.len();
    let per_point: Vec<(Vec<F>, Vec<F>)> = (0..g)
        .into_par_iter()
        .map(|c| {
            let (b, se, _) = d.solve(&aligned.values.column(c));
            (b, se)
        })
        .collect();
    let p = x.n_cols() + 1;
    let mut estimates: Vec<Vec<F>> = (0..p).map(|j| per_point.iter().map(|(b, _)| b[j]).collect()).collect();
    let mut std_errors: Vec<Vec<F>> = (0..p).map(|j| per_point.iter().map(|(_, s)| s[j]).collect()).collect();
    if let Some(h) = smoothing {
        estimates = estimates.iter().map(|e| gaussian_smooth(&grid.times, e, h)).collect();
        std_errors = std_errors.iter().map(|e| gaussian_smooth(&grid.times, e, h)).collect();
    }
    let z = F::lit(BAND_Z);
    let band = |sign: F| -> Vec<Vec<F>> {
        estimates
            .iter()
            .zip(&std_errors)
            .map(|(e, s)| e.iter().zip(s).map(|(&b, &se)| b + sign * z * se).collect())
            .collect()
    };
    Ok(FunctionalFit {
        names: coefficient_names(x),
        times: grid.times.clone(),
        lower: band(-F::one()),
        upper: band(F::one()),
        estimates,
        std_errors,
        smoothing_bandwidth: smoothing,
    })
}

/// Scalar outcome: z-scored log1p of the terminal trajectory values.
pub fn aggregate_outcome<F: Scalar>(terminal: &[F]) -> Result<Vec<F>, StatsError> {
    let logged: Vec<F> = terminal.iter().map(|v| v.ln_1p()).collect();
    zscore(&logged).ok_or_else(|| StatsError::ConstantColumn("aggregate_money".into()))
}
