//! Deal, firm and investor tables: CSV parsing, validation and the analysis
//! cohort (firms with a known birth year, a known sub-sector and funding
//! inside the horizon after birth).

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("line {line}: expected {expected} columns, found {found}")]
    MalformedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: missing amount")]
    MissingAmount { line: u64 },
    #[error("line {line}: bad amount `{value}`")]
    BadAmount { line: u64, value: String },
    #[error("line {line}: bad date `{value}`")]
    BadDate { line: u64, value: String },
    #[error("line {line}: bad year `{value}`")]
    BadYear { line: u64, value: String },
    #[error("line {line}: unknown firm status `{value}`")]
    BadStatus { line: u64, value: String },
    #[error("line {line}: duplicate deal id `{id}`")]
    DuplicateDealId { line: u64, id: String },
    #[error("line {line}: duplicate firm id `{id}`")]
    DuplicateFirmId { line: u64, id: String },
    #[error("line {line}: duplicate investor id `{id}`")]
    DuplicateInvestorId { line: u64, id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirmStatus {
    Active,
    Acquired,
    Ipo,
    Dead,
    Unknown,
}

impl FirmStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FirmStatus::Active => "active",
            FirmStatus::Acquired => "acquired",
            FirmStatus::Ipo => "ipo",
            FirmStatus::Dead => "dead",
            FirmStatus::Unknown => "unknown",
        }
    }
}

impl fmt::Display for FirmStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FirmStatus {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "active" => Ok(FirmStatus::Active),
            "acquired" => Ok(FirmStatus::Acquired),
            "ipo" => Ok(FirmStatus::Ipo),
            "dead" | "inactive" => Ok(FirmStatus::Dead),
            "unknown" | "" => Ok(FirmStatus::Unknown),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DealRecord {
    pub deal_id: String,
    pub round_id: String,
    pub investor_id: String,
    pub firm_id: String,
    /// US dollars; `None` only when parsed with `allow_missing_amount`.
    pub amount_usd: Option<f64>,
    pub date: NaiveDate,
    pub year: i32,
}

impl DealRecord {
    pub fn new(
        deal_id: impl Into<String>,
        round_id: impl Into<String>,
        investor_id: impl Into<String>,
        firm_id: impl Into<String>,
        amount_usd: f64,
        date: NaiveDate,
    ) -> Self {
        DealRecord {
            deal_id: deal_id.into(),
            round_id: round_id.into(),
            investor_id: investor_id.into(),
            firm_id: firm_id.into(),
            amount_usd: Some(amount_usd),
            date,
            year: date.year(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmRecord {
    pub firm_id: String,
    pub name: String,
    pub birth_year: Option<i32>,
    pub subsector: Option<String>,
    pub status: FirmStatus,
    pub country: Option<String>,
    pub continent: Option<String>,
}

impl FirmRecord {
    pub fn new(firm_id: impl Into<String>, birth_year: Option<i32>, subsector: Option<&str>) -> Self {
        let firm_id = firm_id.into();
        FirmRecord {
            name: firm_id.clone(),
            firm_id,
            birth_year,
            subsector: subsector.map(str::to_owned),
            status: FirmStatus::Unknown,
            country: None,
            continent: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvestorRecord {
    pub investor_id: String,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub deals: Vec<DealRecord>,
    pub firms: BTreeMap<String, FirmRecord>,
    pub investors: BTreeMap<String, InvestorRecord>,
}

impl Dataset {
    /// Builds a dataset, registering bare entity records for any ids the
    /// deals mention but the maps lack.
    pub fn from_deals(deals: Vec<DealRecord>, firms: Vec<FirmRecord>) -> Self {
        let mut d = Dataset {
            deals,
            firms: firms.into_iter().map(|f| (f.firm_id.clone(), f)).collect(),
            investors: BTreeMap::new(),
        };
        for deal in &d.deals {
            d.investors
                .entry(deal.investor_id.clone())
                .or_insert_with(|| InvestorRecord {
                    investor_id: deal.investor_id.clone(),
                    name: deal.investor_id.clone(),
                });
            d.firms
                .entry(deal.firm_id.clone())
                .or_insert_with(|| FirmRecord::new(deal.firm_id.clone(), None, None));
        }
        d
    }

    /// Deals grouped by firm, each group in (date, deal_id) order.
    pub fn deals_by_firm(&self) -> BTreeMap<&str, Vec<&DealRecord>> {
        let mut out: BTreeMap<&str, Vec<&DealRecord>> = BTreeMap::new();
        for deal in &self.deals {
            out.entry(deal.firm_id.as_str()).or_default().push(deal);
        }
        for v in out.values_mut() {
            v.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.deal_id.cmp(&b.deal_id)));
        }
        out
    }
}

/// Column names for the deals table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DealSchema {
    pub deal_id: String,
    pub round_id: String,
    pub investor_id: String,
    pub firm_id: String,
    pub amount_usd: String,
    pub date: String,
}

impl Default for DealSchema {
    fn default() -> Self {
        DealSchema {
            deal_id: "deal_id".into(),
            round_id: "round_id".into(),
            investor_id: "investor_id".into(),
            firm_id: "firm_id".into(),
            amount_usd: "amount_usd".into(),
            date: "date".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Keep deals with an empty amount field (as `None`) instead of failing.
    pub allow_missing_amount: bool,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn check_width(rec: &csv::StringRecord, expected: usize) -> Result<(), IngestError> {
    if rec.len() != expected {
        return Err(IngestError::MalformedRow {
            line: line_of(rec),
            expected,
            found: rec.len(),
        });
    }
    Ok(())
}

fn opt(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_owned())
}

/// Parses the deals table. Empty amounts are an error.
pub fn parse_deals<R: Read>(stream: R, schema: &DealSchema) -> Result<Vec<DealRecord>, IngestError> {
    parse_deals_with(stream, schema, ParseOptions::default())
}

pub fn parse_deals_with<R: Read>(
    stream: R,
    schema: &DealSchema,
    options: ParseOptions,
) -> Result<Vec<DealRecord>, IngestError> {
    let mut rdr = reader(stream);
    let headers = rdr.headers()?.clone();
    let idx = [
        column(&headers, &schema.deal_id)?,
        column(&headers, &schema.round_id)?,
        column(&headers, &schema.investor_id)?,
        column(&headers, &schema.firm_id)?,
        column(&headers, &schema.amount_usd)?,
        column(&headers, &schema.date)?,
    ];
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, headers.len())?;
        let line = line_of(&rec);
        let field = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let deal_id = field(0).to_owned();
        let amount_raw = field(4);
        let amount_usd = if amount_raw.is_empty() {
            if !options.allow_missing_amount {
                return Err(IngestError::MissingAmount { line });
            }
            None
        } else {
            match amount_raw.parse::<f64>() {
                Ok(a) if a.is_finite() && a >= 0.0 => Some(a),
                _ => {
                    return Err(IngestError::BadAmount {
                        line,
                        value: amount_raw.to_owned(),
                    })
                }
            }
        };
        let date_raw = field(5);
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| IngestError::BadDate {
            line,
            value: date_raw.to_owned(),
        })?;
        if !seen.insert(deal_id.clone()) {
            return Err(IngestError::DuplicateDealId { line, id: deal_id });
        }
        out.push(DealRecord {
            deal_id,
            round_id: field(1).to_owned(),
            investor_id: field(2).to_owned(),
            firm_id: field(3).to_owned(),
            amount_usd,
            date,
            year: date.year(),
        });
    }
    Ok(out)
}

/// Parses the firms table (`firm_id, name, birth_year, subsector, status,
/// country, continent`). A blank continent is derived from the country.
pub fn parse_firms<R: Read>(stream: R) -> Result<Vec<FirmRecord>, IngestError> {
    let mut rdr = reader(stream);
    let headers = rdr.headers()?.clone();
    let names = ["firm_id", "name", "birth_year", "subsector", "status", "country", "continent"];
    let idx = names
        .iter()
        .map(|n| column(&headers, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, headers.len())?;
        let line = line_of(&rec);
        let field = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let firm_id = field(0).to_owned();
        let birth_year = match field(2) {
            "" => None,
            s => Some(s.parse::<i32>().map_err(|_| IngestError::BadYear {
                line,
                value: s.to_owned(),
            })?),
        };
        let status = field(4).parse().map_err(|_| IngestError::BadStatus {
            line,
            value: field(4).to_owned(),
        })?;
        let country = opt(field(5));
        let continent = opt(field(6)).or_else(|| {
            country
                .as_deref()
                .and_then(continent_for_country)
                .map(str::to_owned)
        });
        if !seen.insert(firm_id.clone()) {
            return Err(IngestError::DuplicateFirmId { line, id: firm_id });
        }
        out.push(FirmRecord {
            firm_id,
            name: field(1).to_owned(),
            birth_year,
            subsector: opt(field(3)),
            status,
            country,
            continent,
        });
    }
    Ok(out)
}

pub fn parse_investors<R: Read>(stream: R) -> Result<Vec<InvestorRecord>, IngestError> {
    let mut rdr = reader(stream);
    let headers = rdr.headers()?.clone();
    let id = column(&headers, "investor_id")?;
    let name = column(&headers, "name")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, headers.len())?;
        let investor_id = rec.get(id).unwrap_or("").trim().to_owned();
        if !seen.insert(investor_id.clone()) {
            return Err(IngestError::DuplicateInvestorId {
                line: line_of(&rec),
                id: investor_id,
            });
        }
        out.push(InvestorRecord {
            investor_id,
            name: rec.get(name).unwrap_or("").trim().to_owned(),
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads the three tables from disk.
pub fn load_dataset(
    deals: &Path,
    firms: &Path,
    investors: &Path,
    options: ParseOptions,
) -> Result<Dataset, IngestError> {
    let deals = parse_deals_with(open(deals)?, &DealSchema::default(), options)?;
    let firms = parse_firms(open(firms)?)?;
    let investors = parse_investors(open(investors)?)?;
    Ok(Dataset {
        deals,
        firms: firms.into_iter().map(|f| (f.firm_id.clone(), f)).collect(),
        investors: investors
            .into_iter()
            .map(|i| (i.investor_id.clone(), i))
            .collect(),
    })
}

fn fmt_amount(a: Option<f64>) -> String {
    a.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_deals<W: Write>(w: W, deals: &[DealRecord]) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["deal_id", "round_id", "investor_id", "firm_id", "amount_usd", "date"])?;
    for d in deals {
        wtr.write_record([
            d.deal_id.as_str(),
            d.round_id.as_str(),
            d.investor_id.as_str(),
            d.firm_id.as_str(),
            fmt_amount(d.amount_usd).as_str(),
            d.date.format("%Y-%m-%d").to_string().as_str(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_firms<'a, W: Write>(
    w: W,
    firms: impl IntoIterator<Item = &'a FirmRecord>,
) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["firm_id", "name", "birth_year", "subsector", "status", "country", "continent"])?;
    for f in firms {
        wtr.write_record([
            f.firm_id.as_str(),
            f.name.as_str(),
            f.birth_year.map(|y| y.to_string()).unwrap_or_default().as_str(),
            f.subsector.as_deref().unwrap_or(""),
            f.status.as_str(),
            f.country.as_deref().unwrap_or(""),
            f.continent.as_deref().unwrap_or(""),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_investors<'a, W: Write>(
    w: W,
    investors: impl IntoIterator<Item = &'a InvestorRecord>,
) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["investor_id", "name"])?;
    for i in investors {
        wtr.write_record([i.investor_id.as_str(), i.name.as_str()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    DanglingReference,
    BirthAfterDeal,
    NegativeAmount,
    DuplicateDealId,
    YearMismatch,
    ZeroAmount,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub entity_id: String,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Conditions that are allowed but worth knowing about (zero-amount deals).
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = HashSet::new();
    for deal in &d.deals {
        let mut push = |entity: &str, rule: Rule, detail: String| {
            report.violations.push(Violation {
                entity_id: entity.to_owned(),
                rule,
                detail,
            })
        };
        if !ids.insert(deal.deal_id.as_str()) {
            push(&deal.deal_id, Rule::DuplicateDealId, String::new());
        }
        if !d.firms.contains_key(&deal.firm_id) {
            push(&deal.deal_id, Rule::DanglingReference, format!("unknown firm {}", deal.firm_id));
        }
        if !d.investors.contains_key(&deal.investor_id) {
            push(
                &deal.deal_id,
                Rule::DanglingReference,
                format!("unknown investor {}", deal.investor_id),
            );
        }
        if deal.year != deal.date.year() {
            push(&deal.deal_id, Rule::YearMismatch, format!("{} vs {}", deal.year, deal.date));
        }
        match deal.amount_usd {
            Some(a) if !(a >= 0.0) => push(&deal.deal_id, Rule::NegativeAmount, a.to_string()),
            Some(a) if a == 0.0 => report.warnings.push(Violation {
                entity_id: deal.deal_id.clone(),
                rule: Rule::ZeroAmount,
                detail: String::new(),
            }),
            _ => {}
        }
        if let Some(birth) = d.firms.get(&deal.firm_id).and_then(|f| f.birth_year) {
            if birth > deal.year {
                report.violations.push(Violation {
                    entity_id: deal.firm_id.clone(),
                    rule: Rule::BirthAfterDeal,
                    detail: format!("born {birth}, deal {} in {}", deal.deal_id, deal.year),
                });
            }
        }
    }
    report
}

/// Fractional years between 1 January of `birth_year` and `date`.
/// Whole years land exactly on integers.
pub fn year_offset(date: NaiveDate, birth_year: i32) -> f64 {
    let days_in_year = if NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some() {
        366.0
    } else {
        365.0
    };
    f64::from(date.year() - birth_year) + f64::from(date.ordinal0()) / days_in_year
}

/// Firms with a known birth year and sub-sector and at least one deal in
/// `[0, horizon_years)` after birth. Firms with an in-horizon deal of unknown
/// amount are dropped, since their trajectories cannot be built.
pub fn filter_analysis_cohort(d: &Dataset, horizon_years: u32) -> BTreeSet<String> {
    let horizon = f64::from(horizon_years.max(1));
    let mut in_horizon: BTreeMap<&str, bool> = BTreeMap::new();
    for deal in &d.deals {
        let Some(firm) = d.firms.get(&deal.firm_id) else { continue };
        let (Some(birth), Some(_)) = (firm.birth_year, firm.subsector.as_ref()) else {
            continue;
        };
        let off = year_offset(deal.date, birth);
        if !(0.0..horizon).contains(&off) {
            continue;
        }
        let ok = in_horizon.entry(deal.firm_id.as_str()).or_insert(true);
        if deal.amount_usd.is_none() {
            *ok = false;
        }
    }
    in_horizon
        .into_iter()
        .filter(|(_, ok)| *ok)
        .map(|(id, _)| id.to_owned())
        .collect()
}

/// Continent for a country name or ISO code; `None` when unknown.
pub fn continent_for_country(country: &str) -> Option<&'static str> {
    const NA: &str = "North America";
    const SA: &str = "South America";
    const EU: &str = "Europe";
    const AS: &str = "Asia";
    const AF: &str = "Africa";
    const OC: &str = "Oceania";
    const TABLE: &[(&str, &str)] = &[
        ("united states", NA), ("usa", NA), ("us", NA), ("canada", NA), ("ca", NA),
        ("mexico", NA), ("mx", NA),
        ("brazil", SA), ("br", SA), ("argentina", SA), ("ar", SA), ("chile", SA),
        ("cl", SA), ("colombia", SA), ("co", SA), ("peru", SA),
        ("united kingdom", EU), ("uk", EU), ("gb", EU), ("germany", EU), ("de", EU),
        ("france", EU), ("fr", EU), ("italy", EU), ("it", EU), ("spain", EU), ("es", EU),
        ("netherlands", EU), ("nl", EU), ("switzerland", EU), ("ch", EU), ("sweden", EU),
        ("se", EU), ("denmark", EU), ("dk", EU), ("norway", EU), ("no", EU),
        ("finland", EU), ("fi", EU), ("belgium", EU), ("be", EU), ("austria", EU),
        ("at", EU), ("ireland", EU), ("ie", EU), ("portugal", EU), ("pt", EU),
        ("poland", EU), ("pl", EU), ("israel", AS), ("il", AS),
        ("china", AS), ("cn", AS), ("japan", AS), ("jp", AS), ("india", AS), ("in", AS),
        ("south korea", AS), ("kr", AS), ("singapore", AS), ("sg", AS), ("taiwan", AS),
        ("tw", AS), ("hong kong", AS), ("hk", AS), ("indonesia", AS), ("id", AS),
        ("united arab emirates", AS), ("ae", AS),
        ("australia", OC), ("au", OC), ("new zealand", OC), ("nz", OC),
        ("south africa", AF), ("za", AF), ("nigeria", AF), ("ng", AF), ("kenya", AF),
        ("ke", AF), ("egypt", AF), ("eg", AF),
    ];
    let key = country.trim().to_ascii_lowercase();
    TABLE.iter().find(|(c, _)| *c == key).map(|(_, k)| *k)
}
