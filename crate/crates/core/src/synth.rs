//! Synthetic venture markets with planted regimes and a planted coupling
//! between firm centrality and funding scale.

use crate::fda::Regime;
use crate::graph::{build_bipartite, firm_projections, FirmLinkRule};
use crate::ingest::{
    continent_for_country, write_deals, write_firms, write_investors, Dataset, DealRecord, FirmRecord, FirmStatus,
    IngestError, InvestorRecord,
};
use crate::scalar::{mean, sample_sd};
use chrono::{Datelike, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_investors: usize,
    pub n_firms: usize,
    pub start_year: i32,
    pub end_year: i32,
    pub n_subsectors: usize,
    /// Mean rounds per firm; counts are `1 + Poisson(mean - 1)`.
    pub rounds_mean: f64,
    /// Mean investors per round; counts are `1 + Poisson(mean - 1)`.
    pub investors_per_round_mean: f64,
    /// Log-normal parameters of a firm's total in-horizon funding (log USD).
    pub amount_mu: f64,
    pub amount_sigma: f64,
    /// Investor weight is `1 + strength * deals_so_far`.
    pub attachment_strength: f64,
    /// Funding scale multiplier `exp(gamma * c)`, `c` the standardized
    /// log1p firm degree at the first funding year.
    pub gamma: f64,
    pub high_fraction: f64,
    pub high_ratio: f64,
    pub horizon: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_investors: 450,
            n_firms: 2000,
            start_year: 2000,
            end_year: 2020,
            n_subsectors: 5,
            rounds_mean: 3.0,
            investors_per_round_mean: 2.0,
            amount_mu: 16.0,
            amount_sigma: 0.3,
            attachment_strength: 1.0,
            gamma: 0.3,
            high_fraction: 0.1,
            high_ratio: 10.0,
            horizon: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_owned()));
        if self.n_investors == 0 || self.n_firms == 0 || self.n_subsectors == 0 {
            return bad("counts must be positive");
        }
        if self.end_year - self.start_year < self.horizon as i32 {
            return bad("year span shorter than the horizon");
        }
        if !(self.rounds_mean >= 1.0 && self.investors_per_round_mean >= 1.0) {
            return bad("round and investor means must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.high_fraction) {
            return bad("high_fraction must lie in [0, 1]");
        }
        if !(self.amount_sigma >= 0.0 && self.high_ratio > 0.0 && self.attachment_strength >= 0.0) {
            return bad("sigma, ratio and attachment strength must be non-negative");
        }
        if !self.gamma.is_finite() || !self.amount_mu.is_finite() {
            return bad("gamma and mu must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub firm_id: String,
    pub true_regime: Regime,
    /// `gamma * c` on the log scale.
    pub true_effect_component: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: Vec<GroundTruth>,
}

const COUNTRIES: [&str; 10] = ["US", "US", "US", "GB", "DE", "FR", "CN", "IN", "CA", "IL"];
const STATUSES: [FirmStatus; 4] = [FirmStatus::Active, FirmStatus::Acquired, FirmStatus::Ipo, FirmStatus::Dead];

fn poisson_plus_one(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    1 + Poisson::new(mean - 1.0).expect("positive rate").sample(rng) as usize
}

fn date_at(birth: i32, t: f64) -> NaiveDate {
    let year = birth + t.floor() as i32;
    let days = if NaiveDate::from_ymd_opt(year, 2, 29).is_some() { 366.0 } else { 365.0 };
    let ordinal0 = ((t - t.floor()) * days).floor() as u32;
    NaiveDate::from_yo_opt(year, ordinal0.min(days as u32 - 1) + 1).expect("valid ordinal")
}

struct Round {
    firm: usize,
    date: NaiveDate,
    investors: Vec<usize>,
}

/// Mean years between successive rounds of a firm.
const ROUND_GAP_YEARS: f64 = 1.5;

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fw = cfg.n_firms.to_string().len();
    let iw = cfg.n_investors.to_string().len();
    let last_birth = cfg.end_year - cfg.horizon as i32;

    let firms: Vec<FirmRecord> = (0..cfg.n_firms)
        .map(|i| {
            let id = format!("firm{:0w$}", i + 1, w = fw);
            let birth = rng.random_range(cfg.start_year..=last_birth);
            let sector = format!("sector_{}", rng.random_range(0..cfg.n_subsectors) + 1);
            let mut f = FirmRecord::new(id, Some(birth), Some(&sector));
            let country = COUNTRIES[rng.random_range(0..COUNTRIES.len())];
            f.country = Some(country.to_owned());
            f.continent = continent_for_country(country).map(str::to_owned);
            f.status = STATUSES[rng.random_range(0..STATUSES.len())];
            f
        })
        .collect();
    let investors: Vec<InvestorRecord> = (0..cfg.n_investors)
        .map(|i| {
            let id = format!("inv{:0w$}", i + 1, w = iw);
            InvestorRecord {
                name: id.clone(),
                investor_id: id,
            }
        })
        .collect();

    let n_high = (cfg.high_fraction * cfg.n_firms as f64).round() as usize;
    let mut high = vec![false; cfg.n_firms];
    for i in sample(&mut rng, cfg.n_firms, n_high) {
        high[i] = true;
    }

    let horizon = f64::from(cfg.horizon);
    let mut rounds = Vec::new();
    for (f, firm) in firms.iter().enumerate() {
        let birth = firm.birth_year.expect("generated with a birth year");
        let k = poisson_plus_one(&mut rng, cfg.rounds_mean);
        // Follow-on rounds arrive after exponential gaps; any past the
        // horizon are not raised.
        let mut t = rng.random_range(0.0..1.5);
        let mut times = vec![t];
        for _ in 1..k {
            let gap: f64 = Exp1.sample(&mut rng);
            t += ROUND_GAP_YEARS * gap;
            if t >= horizon {
                break;
            }
            times.push(t);
        }
        for t in times {
            rounds.push(Round {
                firm: f,
                date: date_at(birth, t),
                investors: Vec::new(),
            });
        }
    }
    rounds.sort_by(|a, b| a.date.cmp(&b.date).then(a.firm.cmp(&b.firm)));

    let mut deals_so_far = vec![0usize; cfg.n_investors];
    for r in &mut rounds {
        let m = poisson_plus_one(&mut rng, cfg.investors_per_round_mean).min(cfg.n_investors);
        let mut weight: Vec<f64> = deals_so_far
            .iter()
            .map(|&d| 1.0 + cfg.attachment_strength * d as f64)
            .collect();
        for _ in 0..m {
            let total: f64 = weight.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weight.iter().rposition(|&w| w > 0.0).expect("an investor remains");
            for (i, &w) in weight.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            weight[pick] = 0.0;
            r.investors.push(pick);
        }
        r.investors.sort_unstable();
        for &i in &r.investors {
            deals_so_far[i] += 1;
        }
    }

    // Network position at each firm's first funding year.
    let mut deals = Vec::new();
    let rw = rounds.len().to_string().len();
    let mut round_ids = Vec::with_capacity(rounds.len());
    for (ri, r) in rounds.iter().enumerate() {
        let rid = format!("r{:0w$}", ri + 1, w = rw);
        for &i in &r.investors {
            deals.push(DealRecord::new(
                String::new(),
                rid.clone(),
                investors[i].investor_id.clone(),
                firms[r.firm].firm_id.clone(),
                0.0,
                r.date,
            ));
        }
        round_ids.push(rid);
    }
    let skeleton = Dataset::from_deals(deals, firms.clone());
    let g = build_bipartite(&skeleton).expect("generated ids are disjoint");
    let mut first_year = vec![i32::MAX; cfg.n_firms];
    for r in &rounds {
        first_year[r.firm] = first_year[r.firm].min(r.date.year());
    }
    let mut years: Vec<i32> = first_year.clone();
    years.sort_unstable();
    years.dedup();
    let projections = firm_projections(&g, &years, FirmLinkRule::SameYear);
    let skeletons: BTreeMap<i32, _> = projections.iter().map(|(y, p)| (*y, p.skeleton())).collect();
    let log_degree: Vec<f64> = firms
        .iter()
        .zip(&first_year)
        .map(|(f, y)| {
            let deg = projections[y]
                .node_index(&f.firm_id)
                .map_or(0, |i| skeletons[y].degree(i));
            (deg as f64).ln_1p()
        })
        .collect();
    let (mu, sd) = (mean(&log_degree), sample_sd(&log_degree));
    let c: Vec<f64> = log_degree
        .iter()
        .map(|&v| if sd > 0.0 { (v - mu) / sd } else { 0.0 })
        .collect();

    // Funding: firm total split over rounds by Dirichlet(1) shares, then
    // equally over each round's investors.
    let scale = LogNormal::new(cfg.amount_mu, cfg.amount_sigma).map_err(|e| SynthError::Config(e.to_string()))?;
    let totals: Vec<f64> = (0..cfg.n_firms)
        .map(|f| {
            let base: f64 = scale.sample(&mut rng);
            base * if high[f] { cfg.high_ratio } else { 1.0 } * (cfg.gamma * c[f]).exp()
        })
        .collect();
    let mut by_firm: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (ri, r) in rounds.iter().enumerate() {
        by_firm.entry(r.firm).or_default().push(ri);
    }
    let mut round_amount = vec![0.0; rounds.len()];
    for (f, rs) in &by_firm {
        let e: Vec<f64> = rs.iter().map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = e.iter().sum();
        for (&ri, ei) in rs.iter().zip(&e) {
            round_amount[ri] = totals[*f] * ei / s;
        }
    }
    let mut deals = Vec::new();
    let dw = rounds.iter().map(|r| r.investors.len()).sum::<usize>().to_string().len();
    for (ri, r) in rounds.iter().enumerate() {
        let share = round_amount[ri] / r.investors.len() as f64;
        for &i in &r.investors {
            deals.push(DealRecord::new(
                format!("d{:0w$}", deals.len() + 1, w = dw),
                round_ids[ri].clone(),
                investors[i].investor_id.clone(),
                firms[r.firm].firm_id.clone(),
                share,
                r.date,
            ));
        }
    }

    let truth = firms
        .iter()
        .enumerate()
        .map(|(f, r)| GroundTruth {
            firm_id: r.firm_id.clone(),
            true_regime: if high[f] { Regime::High } else { Regime::Low },
            true_effect_component: cfg.gamma * c[f],
        })
        .collect();
    Ok(SynthOutput {
        dataset: Dataset {
            deals,
            firms: firms.into_iter().map(|f| (f.firm_id.clone(), f)).collect(),
            investors: investors.into_iter().map(|i| (i.investor_id.clone(), i)).collect(),
        },
        truth,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, SynthError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `deals.csv`, `firms.csv`, `investors.csv` and `ground_truth.csv`.
pub fn write_output(out: &SynthOutput, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_deals(create(dir, "deals.csv")?, &out.dataset.deals)?;
    write_firms(create(dir, "firms.csv")?, out.dataset.firms.values())?;
    write_investors(create(dir, "investors.csv")?, out.dataset.investors.values())?;
    let mut w = csv::Writer::from_writer(create(dir, "ground_truth.csv")?);
    let io = |e: csv::Error| SynthError::Ingest(IngestError::from(e));
    w.write_record(["firm_id", "true_regime", "true_effect_component"]).map_err(io)?;
    for t in &out.truth {
        w.write_record([t.firm_id.as_str(), t.true_regime.as_str(), &t.true_effect_component.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))?;
    Ok(())
}
