//! Per-firm feature vectors.
//!
//! Investor-side features are maxima over a firm's investors, read from the
//! investor projection of the firm's birth year. Firm-side features are read
//! from the cumulative firm projection of the year of the firm's first
//! in-horizon deal.

use super::{compute, CentralityError, CentralityOptions, CentralityTable, Measure};
use crate::graph::{ProjectedGraph, Side};
use crate::ingest::{year_offset, Dataset};
use crate::scalar::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const INV_MAX_DEGREE: &str = "inv_max_degree";
pub const INV_MAX_CURRENT_FLOW: &str = "inv_max_current_flow_betweenness";
pub const FIRM_EIGENVECTOR: &str = "firm_eigenvector";
pub const FIRM_CLOSENESS: &str = "firm_closeness";
pub const FIRM_VOTERANK: &str = "firm_voterank";

pub fn firm_feature_name(m: Measure) -> String {
    format!("firm_{}", m.as_str())
}

pub fn investor_feature_name(m: Measure) -> String {
    format!("inv_max_{}", m.as_str())
}

/// All eighteen feature names, firm side first, in measure order.
pub fn extended_feature_names() -> Vec<String> {
    Measure::ALL
        .iter()
        .map(|&m| firm_feature_name(m))
        .chain(Measure::ALL.iter().map(|&m| investor_feature_name(m)))
        .collect()
}

/// Which of a firm's investors enter the investor-side maxima.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvestorScope {
    /// Investors with a deal in the firm during its birth year.
    #[default]
    BirthYear,
    /// Every investor with an in-horizon deal in the firm that also appears
    /// in the birth-year investor projection.
    AllInHorizon,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingReason {
    /// No projection exists for the required year.
    NoProjection,
    /// The firm (or all of its investors) is absent from the projection.
    NotInProjection,
    /// The firm is isolated, so its eigenvector component is degenerate.
    DegenerateComponent,
    /// The measure failed on that graph.
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirmFeatureVector<F> {
    pub firm_id: String,
    pub birth_year: i32,
    pub first_funding_year: i32,
    /// Investors whose values entered the investor-side maxima.
    pub investors: Vec<String>,
    pub values: BTreeMap<String, F>,
    pub missing: BTreeMap<String, MissingReason>,
}

impl<F: Scalar> FirmFeatureVector<F> {
    pub fn get(&self, name: &str) -> Option<F> {
        self.values.get(name).copied()
    }

    pub fn has_all(&self, names: &[String]) -> bool {
        names.iter().all(|n| self.values.contains_key(n))
    }
}

type Key = (Side, i32, Measure);

/// Centrality tables keyed by (side, year, measure).
#[derive(Debug, Default)]
pub struct CentralityStore<F> {
    tables: BTreeMap<Key, Result<CentralityTable<F>, CentralityError>>,
}

impl<F: Scalar> CentralityStore<F> {
    /// Evaluates every measure on every graph; tasks run in parallel and are
    /// stored by key, so the result does not depend on scheduling.
    pub fn compute(graphs: &[&ProjectedGraph], measures: &[Measure], opts: &CentralityOptions) -> Self {
        let tasks: Vec<(&ProjectedGraph, Measure)> = graphs
            .iter()
            .flat_map(|g| measures.iter().map(move |&m| (*g, m)))
            .collect();
        let results: Vec<(Key, Result<CentralityTable<F>, CentralityError>)> = tasks
            .par_iter()
            .map(|&(g, m)| ((g.side(), g.year(), m), compute(m, g, opts)))
            .collect();
        CentralityStore {
            tables: results.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, table: Result<CentralityTable<F>, CentralityError>, key: (Side, i32, Measure)) {
        self.tables.insert(key, table);
    }

    pub fn get(&self, side: Side, year: i32, measure: Measure) -> Option<&Result<CentralityTable<F>, CentralityError>> {
        self.tables.get(&(side, year, measure))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key, &Result<CentralityTable<F>, CentralityError>)> {
        self.tables.iter()
    }
}

/// Years at which features are measured: birth years (investor side) and
/// first in-horizon funding years (firm side) of the cohort.
pub fn measurement_years(d: &Dataset, cohort: &BTreeSet<String>, horizon: u32) -> (BTreeSet<i32>, BTreeSet<i32>) {
    let mut investor_years = BTreeSet::new();
    let mut firm_years = BTreeSet::new();
    let by_firm = d.deals_by_firm();
    for id in cohort {
        let Some(birth) = d.firms.get(id).and_then(|f| f.birth_year) else { continue };
        investor_years.insert(birth);
        if let Some(first) = first_funding_year(by_firm.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]), birth, horizon) {
            firm_years.insert(first);
        }
    }
    (firm_years, investor_years)
}

fn in_horizon(date: chrono::NaiveDate, birth: i32, horizon: u32) -> bool {
    (0.0..f64::from(horizon)).contains(&year_offset(date, birth))
}

fn first_funding_year(deals: &[&crate::ingest::DealRecord], birth: i32, horizon: u32) -> Option<i32> {
    deals
        .iter()
        .filter(|d| in_horizon(d.date, birth, horizon))
        .map(|d| d.year)
        .min()
}

fn lookup<'a, F: Scalar>(
    store: &'a CentralityStore<F>,
    side: Side,
    year: i32,
    m: Measure,
) -> Result<&'a CentralityTable<F>, MissingReason> {
    match store.get(side, year, m) {
        None => Err(MissingReason::NoProjection),
        Some(Err(e)) => Err(MissingReason::Failed(e.to_string())),
        Some(Ok(t)) => Ok(t),
    }
}

/// Builds the feature vector of every cohort firm. Unavailable features are
/// recorded in `missing`, never zero-filled.
pub fn assemble_firm_features<F: Scalar>(
    d: &Dataset,
    cohort: &BTreeSet<String>,
    store: &CentralityStore<F>,
    scope: InvestorScope,
    horizon: u32,
) -> Vec<FirmFeatureVector<F>> {
    let by_firm = d.deals_by_firm();
    let mut out = Vec::new();
    for id in cohort {
        let Some(birth) = d.firms.get(id).and_then(|f| f.birth_year) else { continue };
        let deals = by_firm.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let Some(first) = first_funding_year(deals, birth, horizon) else { continue };
        let investors: BTreeSet<&str> = deals
            .iter()
            .filter(|x| match scope {
                InvestorScope::BirthYear => x.year == birth,
                InvestorScope::AllInHorizon => in_horizon(x.date, birth, horizon),
            })
            .map(|x| x.investor_id.as_str())
            .collect();
        let mut fv = FirmFeatureVector {
            firm_id: id.clone(),
            birth_year: birth,
            first_funding_year: first,
            investors: Vec::new(),
            values: BTreeMap::new(),
            missing: BTreeMap::new(),
        };
        let mut used: BTreeSet<&str> = BTreeSet::new();
        for m in Measure::ALL {
            let name = investor_feature_name(m);
            match lookup(store, Side::Investors, birth, m) {
                Err(r) => {
                    fv.missing.insert(name, r);
                }
                Ok(t) => {
                    let best = investors
                        .iter()
                        .filter_map(|i| t.get(i).map(|v| (*i, v)))
                        .inspect(|(i, _)| {
                            used.insert(i);
                        })
                        .map(|(_, v)| v)
                        .reduce(F::max);
                    match best {
                        Some(v) => {
                            fv.values.insert(name, v);
                        }
                        None => {
                            fv.missing.insert(name, MissingReason::NotInProjection);
                        }
                    }
                }
            }
        }
        fv.investors = used.into_iter().map(str::to_owned).collect();

        let isolated = match lookup(store, Side::Firms, first, Measure::Degree) {
            Ok(t) => t.get(id).map(|v| v == F::zero()),
            Err(_) => None,
        };
        for m in Measure::ALL {
            let name = firm_feature_name(m);
            match lookup(store, Side::Firms, first, m) {
                Err(r) => {
                    fv.missing.insert(name, r);
                }
                Ok(t) => match t.get(id) {
                    None => {
                        fv.missing.insert(name, MissingReason::NotInProjection);
                    }
                    Some(_) if m == Measure::Eigenvector && isolated == Some(true) => {
                        fv.missing.insert(name, MissingReason::DegenerateComponent);
                    }
                    Some(v) => {
                        fv.values.insert(name, v);
                    }
                },
            }
        }
        out.push(fv);
    }
    out
}
