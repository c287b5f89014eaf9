//! Config-driven orchestration of the analysis stages and their artifacts.
//!
//! Every stage writes deterministic CSV/JSON files under the output
//! directory and records their SHA-256 in `manifest.json`.

use crate::centrality::{
    assemble_firm_features, extended_feature_names, measurement_years, CentralityOptions, CentralityStore,
    FirmFeatureVector, InvestorScope, Measure,
};
use crate::community::{composition_profile, louvain, rank_communities, CommunityProfile, Partition};
use crate::fda::{
    build_trajectories, cluster_by_subsector, grids_by_subsector, resample_to_grid, FundingTrajectory, KMeansParams,
    Regime, Scale, SubsectorClustering, TrajectoryGrid,
};
use crate::graph::{build_bipartite, firm_projections, project_investors, FirmLinkRule, ProjectedGraph, Side};
use crate::ingest::{filter_analysis_cohort, load_dataset, validate_dataset, Dataset, ParseOptions, ValidationReport};
use crate::stats::{
    aggregate_outcome, apply_transforms, balanced_resampling, best_subset, correlation_dedup, function_on_scalar_fit,
    logistic_fit, ols_fit, CorrelationDistance, FeatureMatrix, LogisticOptions, StatsError, TransformPolicy,
};
use crate::synth::{generate, write_output, SynthConfig};
use crate::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

mod plot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub deals: PathBuf,
    pub firms: PathBuf,
    pub investors: PathBuf,
    pub allow_missing_amount: bool,
    /// Treat validation violations as fatal.
    pub strict_validation: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            deals: "data/deals.csv".into(),
            firms: "data/firms.csv".into(),
            investors: "data/investors.csv".into(),
            allow_missing_amount: false,
            strict_validation: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub firm_link: FirmLinkRule,
    pub investor_scope: InvestorScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralityConfig {
    pub measures: Vec<Measure>,
    pub options: CentralityOptions,
}

impl Default for CentralityConfig {
    fn default() -> Self {
        CentralityConfig {
            measures: Measure::ALL.to_vec(),
            options: CentralityOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunityConfig {
    pub resolution: f64,
    pub top_k: usize,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        CommunityConfig { resolution: 1.0, top_k: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub grid_step: f64,
    /// Curve scale used for clustering.
    pub cluster_scale: Scale,
    pub k: usize,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        let k = KMeansParams::default();
        TrajectoryConfig {
            grid_step: 0.1,
            cluster_scale: Scale::RawUsd,
            k: k.k,
            restarts: k.restarts,
            tol: k.tol,
            max_iter: k.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub transforms: TransformPolicy,
    pub dedup_k: usize,
    pub distance: CorrelationDistance,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            transforms: TransformPolicy::default(),
            dedup_k: 4,
            distance: CorrelationDistance::OneMinusR,
        }
    }
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub reps: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub features: Vec<String>,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        let o = LogisticOptions::default();
        LogisticConfig {
            reps: 1000,
            tol: o.tol,
            max_iter: o.max_iter,
            features: names(&["inv_max_degree", "inv_max_current_flow_betweenness", "firm_eigenvector", "firm_closeness"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub best_subset_max: usize,
    pub feature_sets: BTreeMap<String, Vec<String>>,
    /// Response scale of the functional regression.
    pub functional_scale: Scale,
    pub functional_smoothing: Option<f64>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        let mut sets = BTreeMap::new();
        sets.insert("set1".to_string(), LogisticConfig::default().features);
        sets.insert(
            "set2".to_string(),
            names(&["inv_max_current_flow_betweenness", "firm_voterank", "firm_closeness", "firm_eigenvector"]),
        );
        RegressionConfig {
            best_subset_max: 4,
            feature_sets: sets,
            functional_scale: Scale::Log1pUsd,
            functional_smoothing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output_dir: PathBuf,
    /// Directory the `synth` stage writes its tables to.
    pub synth_dir: PathBuf,
    pub seed: u64,
    pub horizon: u32,
    /// Worker threads; 0 uses the machine's parallelism.
    pub workers: usize,
    pub projection: ProjectionConfig,
    pub centrality: CentralityConfig,
    pub community: CommunityConfig,
    pub trajectories: TrajectoryConfig,
    pub features: FeatureConfig,
    pub logistic: LogisticConfig,
    pub regression: RegressionConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputConfig::default(),
            output_dir: "out".into(),
            synth_dir: "data".into(),
            seed: 42,
            horizon: 10,
            workers: 0,
            projection: ProjectionConfig::default(),
            centrality: CentralityConfig::default(),
            community: CommunityConfig::default(),
            trajectories: TrajectoryConfig::default(),
            features: FeatureConfig::default(),
            logistic: LogisticConfig::default(),
            regression: RegressionConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

pub const ENV_OVERRIDES: [&str; 5] = ["VCNET_DEALS", "VCNET_FIRMS", "VCNET_INVESTORS", "VCNET_OUT", "VCNET_SYNTH_DIR"];

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.input.deals,
            &mut cfg.input.firms,
            &mut cfg.input.investors,
            &mut cfg.output_dir,
            &mut cfg.synth_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the path-only environment overrides.
    pub fn apply_env(&mut self) {
        let get = |k: &str| std::env::var_os(k).map(PathBuf::from);
        if let Some(p) = get("VCNET_DEALS") {
            self.input.deals = p;
        }
        if let Some(p) = get("VCNET_FIRMS") {
            self.input.firms = p;
        }
        if let Some(p) = get("VCNET_INVESTORS") {
            self.input.investors = p;
        }
        if let Some(p) = get("VCNET_OUT") {
            self.output_dir = p;
        }
        if let Some(p) = get("VCNET_SYNTH_DIR") {
            self.synth_dir = p;
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.trajectories.grid_step > 0.0) {
            return bad("grid_step must be positive".into());
        }
        if self.trajectories.k < 2 {
            return bad("k-means needs k >= 2".into());
        }
        if self.features.dedup_k == 0 {
            return bad("dedup_k must be positive".into());
        }
        let known: BTreeSet<String> = extended_feature_names().into_iter().collect();
        let sets = self.regression.feature_sets.values().chain(std::iter::once(&self.logistic.features));
        for f in sets.flatten() {
            if !known.contains(f) {
                return bad(format!("unknown feature {f}"));
            }
        }
        for f in &self.features.transforms.log1p {
            if !known.contains(f) {
                return bad(format!("unknown feature {f} in transforms"));
            }
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the analytic settings, serialized as JSON. Paths and the
    /// worker count are left out; inputs are identified by content instead.
    pub fn hash(&self) -> String {
        let mut analytic = self.clone();
        let defaults = PipelineConfig::default();
        analytic.input.deals = defaults.input.deals;
        analytic.input.firms = defaults.input.firms;
        analytic.input.investors = defaults.input.investors;
        analytic.output_dir = defaults.output_dir;
        analytic.synth_dir = defaults.synth_dir;
        analytic.workers = 0;
        let text = serde_json::to_string(&analytic).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn measure_of(feature: &str) -> Measure {
    let m = feature.strip_prefix("firm_").or_else(|| feature.strip_prefix("inv_max_")).unwrap_or(feature);
    m.parse().expect("known feature names carry a measure")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    IngestCheck,
    BuildGraphs,
    Centrality,
    Communities,
    Trajectories,
    Cluster,
    Features,
    RegressLogistic,
    RegressScalar,
    RegressFunctional,
    Synth,
}

impl Stage {
    /// Stages of `all`, in dependency order.
    pub const ANALYSIS: [Stage; 10] = [
        Stage::IngestCheck,
        Stage::BuildGraphs,
        Stage::Centrality,
        Stage::Communities,
        Stage::Trajectories,
        Stage::Cluster,
        Stage::Features,
        Stage::RegressLogistic,
        Stage::RegressScalar,
        Stage::RegressFunctional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::IngestCheck => "ingest-check",
            Stage::BuildGraphs => "build-graphs",
            Stage::Centrality => "centrality",
            Stage::Communities => "communities",
            Stage::Trajectories => "trajectories",
            Stage::Cluster => "cluster",
            Stage::Features => "features",
            Stage::RegressLogistic => "regress-logistic",
            Stage::RegressScalar => "regress-scalar",
            Stage::RegressFunctional => "regress-functional",
            Stage::Synth => "synth",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing CSV to memory cannot fail");
    buf
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Labels the model rows by regime; firms without a label are dropped.
struct ModelData {
    x: FeatureMatrix<f64>,
    excluded_missing: usize,
}

/// Lazily computed intermediate results shared by the stages.
#[derive(Default)]
struct State {
    dataset: Option<Dataset>,
    report: Option<ValidationReport>,
    cohort: Option<BTreeSet<String>>,
    firm_graphs: Option<BTreeMap<i32, ProjectedGraph>>,
    investor_graphs: Option<BTreeMap<i32, ProjectedGraph>>,
    store: Option<CentralityStore<f64>>,
    trajectories: Option<Vec<FundingTrajectory>>,
    clustering: Option<SubsectorClustering<f64>>,
    features: Option<Vec<FirmFeatureVector<f64>>>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    plots: bool,
    state: State,
    manifest: Manifest,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            ..Manifest::default()
        };
        Ok(Pipeline {
            cfg,
            plots: false,
            state: State::default(),
            manifest,
        })
    }

    pub fn with_plots(mut self, plots: bool) -> Self {
        self.plots = plots;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Error> {
        let path = self.out().join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.manifest.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Runs the stages in order, then writes the merged manifest.
    pub fn run(&mut self, stages: &[Stage]) -> Result<(), Error> {
        for &s in stages {
            log::info!("stage {}", s.as_str());
            self.run_stage(s)?;
            let name = s.as_str().to_string();
            if !self.manifest.stages.contains(&name) {
                self.manifest.stages.push(name);
            }
        }
        self.write_manifest()
    }

    pub fn run_all(&mut self) -> Result<(), Error> {
        self.run(&Stage::ANALYSIS)
    }

    fn write_manifest(&mut self) -> Result<(), Error> {
        let path = self.out().join("manifest.json");
        let mut merged = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)
                .ok()
                .filter(|m| m.config_sha256 == self.manifest.config_sha256)
                .unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        merged.tool = self.manifest.tool.clone();
        merged.version = self.manifest.version.clone();
        merged.config_sha256 = self.manifest.config_sha256.clone();
        merged.seed = self.manifest.seed;
        merged.inputs.extend(self.manifest.inputs.clone());
        merged.artifacts.extend(self.manifest.artifacts.clone());
        for s in &self.manifest.stages {
            if !merged.stages.contains(s) {
                merged.stages.push(s.clone());
            }
        }
        merged.stages.sort_by_key(|s| {
            Stage::ANALYSIS
                .iter()
                .chain([Stage::Synth].iter())
                .position(|x| x.as_str() == s)
                .unwrap_or(usize::MAX)
        });
        std::fs::create_dir_all(self.out()).map_err(|e| io_err(self.out(), e))?;
        std::fs::write(&path, json_bytes(&merged)).map_err(|e| io_err(&path, e))?;
        self.manifest = merged;
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn run_stage(&mut self, s: Stage) -> Result<(), Error> {
        match s {
            Stage::IngestCheck => self.stage_ingest(),
            Stage::BuildGraphs => self.stage_graphs(),
            Stage::Centrality => self.stage_centrality(),
            Stage::Communities => self.stage_communities(),
            Stage::Trajectories => self.stage_trajectories(),
            Stage::Cluster => self.stage_cluster(),
            Stage::Features => self.stage_features(),
            Stage::RegressLogistic => self.stage_logistic(),
            Stage::RegressScalar => self.stage_scalar(),
            Stage::RegressFunctional => self.stage_functional(),
            Stage::Synth => self.stage_synth(),
        }
    }

    // ---- lazily computed inputs ----

    fn ensure_dataset(&mut self) -> Result<(), Error> {
        if self.state.dataset.is_some() {
            return Ok(());
        }
        let inp = &self.cfg.input;
        let opts = ParseOptions {
            allow_missing_amount: inp.allow_missing_amount,
        };
        let d = load_dataset(&inp.deals, &inp.firms, &inp.investors, opts)?;
        for (k, p) in [("deals", &inp.deals), ("firms", &inp.firms), ("investors", &inp.investors)] {
            let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
            self.manifest.inputs.insert(k.to_string(), sha256_hex(&bytes));
        }
        let report = validate_dataset(&d);
        if self.cfg.input.strict_validation && !report.is_clean() {
            let first = &report.violations[0];
            return Err(Error::Data(format!(
                "{} validation violations; first: {:?} on {} ({})",
                report.violations.len(),
                first.rule,
                first.entity_id,
                first.detail
            )));
        }
        self.state.cohort = Some(filter_analysis_cohort(&d, self.cfg.horizon));
        self.state.report = Some(report);
        self.state.dataset = Some(d);
        Ok(())
    }

    fn data(&self) -> (&Dataset, &BTreeSet<String>) {
        (
            self.state.dataset.as_ref().expect("dataset loaded"),
            self.state.cohort.as_ref().expect("cohort computed"),
        )
    }

    fn ensure_graphs(&mut self) -> Result<(), Error> {
        if self.state.firm_graphs.is_some() {
            return Ok(());
        }
        self.ensure_dataset()?;
        let (d, cohort) = self.data();
        let g = build_bipartite(d)?;
        let (firm_years, inv_years) = measurement_years(d, cohort, self.cfg.horizon);
        let fy: Vec<i32> = firm_years.into_iter().collect();
        let firms = firm_projections(&g, &fy, self.cfg.projection.firm_link);
        let invs = {
            use rayon::prelude::*;
            let iy: Vec<i32> = inv_years.into_iter().collect();
            iy.par_iter().map(|&y| (y, project_investors(&g, y))).collect::<Vec<_>>()
        };
        self.state.firm_graphs = Some(firms);
        self.state.investor_graphs = Some(invs.into_iter().collect());
        Ok(())
    }

    fn ensure_store(&mut self) -> Result<(), Error> {
        if self.state.store.is_some() {
            return Ok(());
        }
        self.ensure_graphs()?;
        let graphs: Vec<&ProjectedGraph> = self
            .state
            .firm_graphs
            .as_ref()
            .expect("built")
            .values()
            .chain(self.state.investor_graphs.as_ref().expect("built").values())
            .collect();
        let store = CentralityStore::compute(&graphs, &self.cfg.centrality.measures, &self.cfg.centrality.options);
        self.state.store = Some(store);
        Ok(())
    }

    fn ensure_trajectories(&mut self) -> Result<(), Error> {
        if self.state.trajectories.is_some() {
            return Ok(());
        }
        self.ensure_dataset()?;
        let (d, cohort) = self.data();
        let t = build_trajectories(d, cohort, f64::from(self.cfg.horizon))?;
        self.state.trajectories = Some(t);
        Ok(())
    }

    fn grid(&self, scale: Scale) -> Result<TrajectoryGrid<f64>, Error> {
        let t = self.state.trajectories.as_ref().expect("trajectories built");
        Ok(resample_to_grid(t, self.cfg.trajectories.grid_step, f64::from(self.cfg.horizon), scale)?)
    }

    fn kmeans_params(&self) -> KMeansParams {
        let t = &self.cfg.trajectories;
        KMeansParams {
            k: t.k,
            restarts: t.restarts,
            seed: self.cfg.seed,
            tol: t.tol,
            max_iter: t.max_iter,
        }
    }

    fn ensure_clustering(&mut self) -> Result<(), Error> {
        if self.state.clustering.is_some() {
            return Ok(());
        }
        self.ensure_trajectories()?;
        let grid = self.grid(self.cfg.trajectories.cluster_scale)?;
        let by_sector = grids_by_subsector(&grid, self.data().0);
        let c = cluster_by_subsector(&by_sector, &self.kmeans_params())?;
        self.state.clustering = Some(c);
        Ok(())
    }

    fn ensure_features(&mut self) -> Result<(), Error> {
        if self.state.features.is_some() {
            return Ok(());
        }
        self.ensure_store()?;
        let (d, cohort) = self.data();
        let fv = assemble_firm_features(
            d,
            cohort,
            self.state.store.as_ref().expect("computed"),
            self.cfg.projection.investor_scope,
            self.cfg.horizon,
        );
        self.state.features = Some(fv);
        Ok(())
    }

    /// Transformed model matrix for `names` over the cohort firms having all
    /// of them (and, if `labelled`, a regime label).
    fn model_matrix(&mut self, names: &[String], labelled: bool) -> Result<ModelData, Error> {
        for f in names {
            let m = measure_of(f);
            if !self.cfg.centrality.measures.contains(&m) {
                return Err(Error::Config(format!("feature {f} needs measure {m}, which is not enabled")));
            }
        }
        self.ensure_features()?;
        if labelled {
            self.ensure_clustering()?;
        }
        let fv = self.state.features.as_ref().expect("assembled");
        let labels = labelled.then(|| self.state.clustering.as_ref().expect("clustered").labels());
        let rows: Vec<FirmFeatureVector<f64>> = fv
            .iter()
            .filter(|f| labels.as_ref().is_none_or(|l| l.contains_key(&f.firm_id)))
            .cloned()
            .collect();
        let (raw, excluded) = FeatureMatrix::from_features(&rows, names);
        let x = apply_transforms(&raw, &self.cfg.features.transforms).map_err(numerical)?;
        Ok(ModelData {
            x,
            excluded_missing: excluded.len(),
        })
    }

    // ---- stages ----

    fn stage_ingest(&mut self) -> Result<(), Error> {
        self.ensure_dataset()?;
        let (d, cohort) = self.data();
        let report = self.state.report.as_ref().expect("validated");
        let body = json!({
            "deals": d.deals.len(),
            "firms": d.firms.len(),
            "investors": d.investors.len(),
            "cohort_size": cohort.len(),
            "horizon": self.cfg.horizon,
            "violations": report.violations,
            "warnings": report.warnings,
        });
        let cohort_csv = csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["firm_id"])?;
            for f in cohort {
                w.write_record([f])?;
            }
            w.flush()?;
            Ok(())
        });
        self.write("ingest/validation.json", &json_bytes(&body))?;
        self.write("ingest/cohort.csv", &cohort_csv)
    }

    fn stage_graphs(&mut self) -> Result<(), Error> {
        self.ensure_graphs()?;
        let mut files = Vec::new();
        let mut summary = Vec::new();
        for (side, graphs) in [
            (Side::Firms, self.state.firm_graphs.as_ref().expect("built")),
            (Side::Investors, self.state.investor_graphs.as_ref().expect("built")),
        ] {
            for (y, g) in graphs {
                let mut edges = Vec::new();
                g.write_edges_csv(&mut edges)?;
                let mut nodes = Vec::new();
                g.write_nodes_csv(&mut nodes)?;
                files.push((format!("graphs/{side}_{y}_edges.csv"), edges));
                files.push((format!("graphs/{side}_{y}_nodes.csv"), nodes));
                summary.push(json!({"side": side, "year": y, "nodes": g.node_count(), "edges": g.edge_count()}));
            }
        }
        for (rel, bytes) in files {
            self.write(&rel, &bytes)?;
        }
        self.write("graphs/summary.json", &json_bytes(&summary))
    }

    fn stage_centrality(&mut self) -> Result<(), Error> {
        self.ensure_store()?;
        let store = self.state.store.as_ref().expect("computed");
        let measures = self.cfg.centrality.measures.clone();
        let mut files = Vec::new();
        let mut failures = Vec::new();
        for (side, graphs) in [
            (Side::Firms, self.state.firm_graphs.as_ref().expect("built")),
            (Side::Investors, self.state.investor_graphs.as_ref().expect("built")),
        ] {
            for &y in graphs.keys() {
                let tables: Vec<_> = measures.iter().map(|&m| (m, store.get(side, y, m))).collect();
                for (m, t) in &tables {
                    if let Some(Err(e)) = t {
                        failures.push(json!({"side": side, "year": y, "measure": m, "error": e.to_string()}));
                    }
                }
                // Long format; failed measures contribute no rows.
                let bytes = csv_bytes(|b| {
                    let mut w = csv::Writer::from_writer(b);
                    w.write_record(["node_id", "measure", "year", "side", "value"])?;
                    let (year, side_name) = (y.to_string(), side.as_str());
                    for (m, t) in &tables {
                        let Some(Ok(t)) = t else { continue };
                        for (node, v) in t.iter() {
                            w.write_record([node, m.as_str(), &year, side_name, &v.to_string()])?;
                        }
                    }
                    w.flush()?;
                    Ok(())
                });
                files.push((format!("centrality/{side}_{y}.csv"), bytes));
            }
        }
        for (rel, bytes) in files {
            self.write(&rel, &bytes)?;
        }
        self.write("centrality/failures.json", &json_bytes(&failures))
    }

    fn stage_communities(&mut self) -> Result<(), Error> {
        use rayon::prelude::*;
        self.ensure_graphs()?;
        let graphs: Vec<&ProjectedGraph> = self.state.firm_graphs.as_ref().expect("built").values().collect();
        let (seed, res, top_k) = (self.cfg.seed, self.cfg.community.resolution, self.cfg.community.top_k);
        let parts: Vec<Partition> = graphs.par_iter().map(|g| louvain(g, seed, res)).collect();
        let firms = &self.data().0.firms;
        let mut files = Vec::new();
        for p in &parts {
            let assign = csv_bytes(|b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["node_id", "community"])?;
                for (n, c) in p.nodes().iter().zip(p.assignment()) {
                    w.write_record([n.as_str(), &c.to_string()])?;
                }
                w.flush()?;
                Ok(())
            });
            files.push((format!("communities/firms_{}.csv", p.year), assign));
            let ranked = rank_communities(p);
            let profiles: Vec<CommunityProfile> = ranked
                .iter()
                .take(top_k)
                .map(|&c| composition_profile(p, c, firms).expect("ranked communities exist"))
                .collect();
            let body = json!({
                "year": p.year,
                "nodes": p.nodes().len(),
                "communities": p.community_count(),
                "modularity": p.modularity,
                "pass_modularity": p.pass_modularity,
                "ranking": ranked,
                "top": profiles,
            });
            files.push((format!("communities/profiles_{}.json", p.year), json_bytes(&body)));
        }
        for (rel, bytes) in files {
            self.write(&rel, &bytes)?;
        }
        Ok(())
    }

    fn stage_trajectories(&mut self) -> Result<(), Error> {
        self.ensure_trajectories()?;
        let grid = self.grid(Scale::RawUsd)?;
        let mut bytes = Vec::new();
        grid.write_csv(&mut bytes)?;
        self.write("fda/trajectories.csv", &bytes)?;
        let trajs = self.state.trajectories.as_ref().expect("built");
        let flags: Vec<_> = trajs
            .iter()
            .filter(|t| !t.negative_offsets.is_empty() || !t.unknown_amounts.is_empty())
            .map(|t| json!({"firm_id": t.firm_id, "negative_offsets": t.negative_offsets, "unknown_amounts": t.unknown_amounts}))
            .collect();
        let terminal = csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["firm_id", "terminal_usd", "jumps", "excluded_after_horizon"])?;
            for t in trajs {
                w.write_record([
                    t.firm_id.as_str(),
                    &t.terminal().to_string(),
                    &t.times.len().to_string(),
                    &t.excluded_after_horizon.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        });
        self.write("fda/terminal.csv", &terminal)?;
        self.write("fda/trajectory_flags.json", &json_bytes(&flags))
    }

    fn stage_cluster(&mut self) -> Result<(), Error> {
        self.ensure_clustering()?;
        let c = self.state.clustering.as_ref().expect("clustered");
        let times = self.grid(self.cfg.trajectories.cluster_scale)?.times;
        let mut labels = Vec::new();
        c.write_labels_csv(&mut labels)?;
        let mut centroids = Vec::new();
        c.write_centroids_csv(&times, &mut centroids)?;
        let summary: BTreeMap<&String, _> = c
            .labelings
            .iter()
            .map(|(s, l)| {
                (
                    s,
                    json!({
                        "firms": l.firm_ids.len(),
                        "high": l.count(Regime::High),
                        "low": l.count(Regime::Low),
                        "inertia": l.inertia,
                        "inertia_history": l.inertia_history,
                    }),
                )
            })
            .collect();
        let body = json!({
            "scale": self.cfg.trajectories.cluster_scale,
            "subsectors": summary,
            "skipped": c.skipped,
            "high_total": c.labels().values().filter(|&&r| r == Regime::High).count(),
            "low_total": c.labels().values().filter(|&&r| r == Regime::Low).count(),
        });
        self.write("fda/labels.csv", &labels)?;
        self.write("fda/centroids.csv", &centroids)?;
        self.write("fda/clusters.json", &json_bytes(&body))?;
        if self.plots {
            let svg = plot::centroids_svg(&self.out().join("fda/centroids.csv"))?;
            self.write("fda/centroids.svg", svg.as_bytes())?;
        }
        Ok(())
    }

    fn stage_features(&mut self) -> Result<(), Error> {
        self.ensure_features()?;
        let fv = self.state.features.as_ref().expect("assembled");
        let all = extended_feature_names();
        let table = csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            let header: Vec<&str> = ["firm_id", "birth_year", "first_funding_year"]
                .into_iter()
                .chain(all.iter().map(String::as_str))
                .collect();
            w.write_record(&header)?;
            for f in fv {
                let mut row = vec![f.firm_id.clone(), f.birth_year.to_string(), f.first_funding_year.to_string()];
                row.extend(all.iter().map(|n| f.get(n).map(|v| v.to_string()).unwrap_or_default()));
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        });
        let mut missing: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for f in fv {
            for (name, reason) in &f.missing {
                let key = serde_json::to_value(reason)
                    .ok()
                    .and_then(|v| match v {
                        serde_json::Value::String(s) => Some(s),
                        serde_json::Value::Object(o) => o.keys().next().cloned(),
                        _ => None,
                    })
                    .unwrap_or_default();
                *missing.entry(name.clone()).or_default().entry(key).or_default() += 1;
            }
        }

        // De-correlation over the non-constant features, on firms having all.
        let usable: Vec<String> = all
            .iter()
            .filter(|n| {
                let vals: Vec<f64> = fv.iter().filter_map(|f| f.get(n)).collect();
                vals.len() > 2 && crate::scalar::sample_sd(&vals) > 0.0
            })
            .cloned()
            .collect();
        let (raw, excluded) = FeatureMatrix::from_features(fv, &usable);
        let dedup = apply_transforms(&raw, &self.cfg.features.transforms)
            .and_then(|x| correlation_dedup(&x, self.cfg.features.dedup_k.min(usable.len()), self.cfg.features.distance))
            .map_err(numerical)?;
        let body = json!({
            "features": usable,
            "dropped_constant_or_sparse": all.iter().filter(|n| !usable.contains(n)).collect::<Vec<_>>(),
            "rows": raw.n_rows(),
            "excluded_rows": excluded.len(),
            "distance": self.cfg.features.distance,
            "k": self.cfg.features.dedup_k,
            "selected": dedup.selected,
            "clusters": dedup.clusters,
            "heights": dedup.heights,
            "dendrogram": dedup.dendrogram,
        });
        self.write("stats/features.csv", &table)?;
        self.write("stats/feature_missing.json", &json_bytes(&missing))?;
        self.write("stats/dedup.json", &json_bytes(&body))
    }

    fn stage_logistic(&mut self) -> Result<(), Error> {
        let names = self.cfg.logistic.features.clone();
        let md = self.model_matrix(&names, true)?;
        let labels = self.state.clustering.as_ref().expect("clustered").labels();
        let y: Vec<bool> = md.x.row_ids.iter().map(|f| labels[f] == Regime::High).collect();
        let opts = LogisticOptions {
            tol: self.cfg.logistic.tol,
            max_iter: self.cfg.logistic.max_iter,
        };
        let full = logistic_fit(&md.x, &y, &opts).map_err(numerical)?;
        let lr = crate::stats::likelihood_ratio_pvalues(&md.x, &y, &opts).map_err(numerical)?;
        let rs = balanced_resampling(&md.x, &y, self.cfg.logistic.reps, self.cfg.seed, &opts).map_err(numerical)?;
        let mut scatter = Vec::new();
        rs.write_scatter_csv(&mut scatter)?;
        let body = json!({
            "features": names,
            "rows": md.x.n_rows(),
            "positives": y.iter().filter(|&&v| v).count(),
            "excluded_missing_features": md.excluded_missing,
            "transforms": md.x.transforms,
            "full_fit": full,
            "full_fit_lr_p_values": lr,
        });
        let summary = json!({
            "repetitions": rs.repetitions,
            "minority_size": rs.minority_size,
            "minority_is_positive": rs.minority_is_positive,
            "rows_per_repetition": 2 * rs.minority_size,
            "names": rs.names,
            "mean": rs.mean,
            "sd": rs.sd,
            "mean_deviance_explained": rs.mean_deviance_explained,
            "converged": rs.converged,
            "not_converged": rs.not_converged,
        });
        self.write("stats/logistic_full.json", &json_bytes(&body))?;
        self.write("stats/logistic_resampling.json", &json_bytes(&summary))?;
        self.write("stats/logistic_scatter.csv", &scatter)?;
        if self.plots {
            let svg = plot::scatter_svg(&self.out().join("stats/logistic_scatter.csv"))?;
            self.write("stats/logistic_scatter.svg", svg.as_bytes())?;
        }
        Ok(())
    }

    /// Scalar outcome for the rows of `x`, from the trajectories.
    fn outcome_for(&mut self, x: &FeatureMatrix<f64>) -> Result<Vec<f64>, Error> {
        self.ensure_trajectories()?;
        let term: BTreeMap<&str, f64> = self
            .state
            .trajectories
            .as_ref()
            .expect("built")
            .iter()
            .map(|t| (t.firm_id.as_str(), t.terminal()))
            .collect();
        let raw: Vec<f64> = x.row_ids.iter().map(|f| term[f.as_str()]).collect();
        aggregate_outcome(&raw).map_err(numerical)
    }

    fn stage_scalar(&mut self) -> Result<(), Error> {
        let sets = self.cfg.regression.feature_sets.clone();
        let mut fits = BTreeMap::new();
        for (name, feats) in &sets {
            let md = self.model_matrix(feats, false)?;
            let y = self.outcome_for(&md.x)?;
            let fit = ols_fit(&md.x, &y).map_err(numerical)?;
            fits.insert(
                name.clone(),
                json!({"features": feats, "excluded_missing_features": md.excluded_missing, "fit": fit}),
            );
        }
        // Best subset over every non-constant feature.
        self.ensure_features()?;
        let fv = self.state.features.as_ref().expect("assembled");
        let usable: Vec<String> = extended_feature_names()
            .into_iter()
            .filter(|n| {
                let vals: Vec<f64> = fv.iter().filter_map(|f| f.get(n)).collect();
                vals.len() > 2 && crate::scalar::sample_sd(&vals) > 0.0
            })
            .collect();
        let md = self.model_matrix(&usable, false)?;
        let y = self.outcome_for(&md.x)?;
        let subsets = best_subset(&md.x, &y, self.cfg.regression.best_subset_max).map_err(numerical)?;
        let body = json!({
            "outcome": "zscore(log1p(terminal_usd))",
            "models": fits,
            "best_subset": {
                "features": usable,
                "rows": md.x.n_rows(),
                "excluded_missing_features": md.excluded_missing,
                "subsets": subsets,
            },
        });
        self.write("stats/scalar.json", &json_bytes(&body))
    }

    fn stage_functional(&mut self) -> Result<(), Error> {
        let sets = self.cfg.regression.feature_sets.clone();
        self.ensure_trajectories()?;
        let grid = self.grid(self.cfg.regression.functional_scale)?;
        let mut summary = BTreeMap::new();
        for (name, feats) in &sets {
            let md = self.model_matrix(feats, false)?;
            let fit = function_on_scalar_fit(&grid, &md.x, self.cfg.regression.functional_smoothing).map_err(numerical)?;
            let mut bytes = Vec::new();
            fit.write_csv(&mut bytes)?;
            let rel = format!("stats/functional_{name}.csv");
            self.write(&rel, &bytes)?;
            if self.plots {
                let svg = plot::bands_svg(&self.out().join(&rel))?;
                self.write(&format!("stats/functional_{name}.svg"), svg.as_bytes())?;
            }
            summary.insert(
                name.clone(),
                json!({"features": feats, "rows": md.x.n_rows(), "excluded_missing_features": md.excluded_missing}),
            );
        }
        let body = json!({
            "response_scale": self.cfg.regression.functional_scale,
            "smoothing_bandwidth": self.cfg.regression.functional_smoothing,
            "band": "estimate +/- 1.96 se",
            "models": summary,
        });
        self.write("stats/functional.json", &json_bytes(&body))
    }

    fn stage_synth(&mut self) -> Result<(), Error> {
        let mut cfg = self.cfg.synth.clone();
        cfg.horizon = self.cfg.horizon;
        let out = generate(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let dir = self.cfg.synth_dir.clone();
        write_output(&out, &dir).map_err(|e| Error::Data(e.to_string()))?;
        for name in ["deals.csv", "firms.csv", "investors.csv", "ground_truth.csv"] {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
            self.manifest.inputs.insert(format!("synth/{name}"), sha256_hex(&bytes));
        }
        Ok(())
    }
}

fn numerical(e: StatsError) -> Error {
    match e {
        StatsError::SingularDesign | StatsError::ConstantColumn(_) | StatsError::InvalidLog(_) => {
            Error::Numerical(e.to_string())
        }
        _ => Error::Data(e.to_string()),
    }
}

pub use rayon::ThreadPool;

/// Thread pool with `workers` threads (0 = machine parallelism).
pub fn thread_pool(workers: usize) -> Result<ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}
