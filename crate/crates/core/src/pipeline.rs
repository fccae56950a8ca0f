//! Stage orchestration. Each stage reads its predecessors' artifacts from
//! the per-dataset output directory and writes its own, so any stage can be
//! rerun in isolation and `all` is exactly the stages run in order.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! manifest.json
//! <dataset>/matches.csv, cleaned_points.csv, match_results.csv, cleaning_report.json   (ingest)
//! <dataset>/split.json, features_s{1,2}.csv, standardization.json                      (features)
//! <dataset>/fit_s{1,2}.json                                                             (fit)
//! <dataset>/sqs_s{1,2}.csv, profiles.csv                                                (score)
//! <dataset>/welo_ratings.csv                                                            (welo)
//! <dataset>/eval.csv, eval.json, eval.txt, scatter_s{1,2}.csv                           (evaluate)
//! <dataset>/rankings.txt, rankings.csv                                                  (rank)
//! ```
//!
//! CSV and text artifacts start with a `# ` provenance line; JSON artifacts
//! wrap their payload as `{"provenance": ..., "data": ...}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate_serve_type, format_table, server_outcomes, split_matches, EvalRow, ScatterPoint, ServeTypeEval,
    SplitAssignment, DEFAULT_TRAIN_FRACTION,
};
use crate::features::{aggregate, filter_min_serves, standardize, ServerFeatures, Standardization, ZScores, DEFAULT_MIN_SERVES};
use crate::glmm::{build_design, fit_glmm, DesignReport, FitOptions, GlmmFit};
use crate::ingest::{
    derive_match_results, load_matches, load_points, matches_file, parse_match_id, points_file, resolve_and_clean,
    CleaningReport, ColumnMap, Dataset, LocationBin, MatchMeta, MatchResult, PointRecord, ServeDepth, ServeWidth,
    SEASONS,
};
use crate::sqs::{compute_sqs, format_rankings, rank_all, serving_profiles, top_k, SqsEntry};
use crate::welo::{ratings_at_cutoff, RatingRow};

/// Bumped whenever a stage's output format or semantics change.
pub const STAGE_VERSION: u32 = 1;

/// Rows per serve type in the ranking tables.
pub const RANKING_TOP_K: usize = 10;

const SERVE_TYPES: [u8; 2] = [1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub datasets: Vec<Dataset>,
    pub years: Vec<i32>,
    pub seed: u64,
    pub min_serves: usize,
    pub split_fraction: f64,
    /// Logical column field -> header name overrides (see [`ColumnMap::set`]).
    pub column_map: BTreeMap<String, String>,
    /// Upper bound on datasets processed concurrently.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            datasets: Dataset::all().to_vec(),
            years: SEASONS.to_vec(),
            seed: 20240501,
            min_serves: DEFAULT_MIN_SERVES,
            split_fraction: DEFAULT_TRAIN_FRACTION,
            column_map: BTreeMap::new(),
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

fn config_err(key: &str, value: &str, what: impl fmt::Display) -> Error {
    Error::Config(format!("`{key} = {value}`: {what}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| config_err(key, value, e)))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| config_err(key, value, e))
}

impl PipelineConfig {
    /// Parses a `key = value` file body on top of the defaults. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Sets one key. Keys: `data_dir`, `output_dir` (or `out`), `datasets`,
    /// `years`, `seed`, `min_serves`, `split_fraction`, `jobs`, and
    /// `column.<field>` for header overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "output_dir" | "out" => self.output_dir = PathBuf::from(value),
            "datasets" => self.datasets = parse_list(key, value)?,
            "years" => self.years = parse_list(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "min_serves" => self.min_serves = parse_one(key, value)?,
            "split_fraction" => self.split_fraction = parse_one(key, value)?,
            "jobs" => self.jobs = parse_one(key, value)?,
            _ => match key.strip_prefix("column.") {
                Some(field) => {
                    ColumnMap::default().set(field, value)?;
                    self.column_map.insert(field.to_string(), value.to_string());
                }
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.years.is_empty() {
            return Err(Error::Config("no years configured".into()));
        }
        if let Some(y) = self.years.iter().find(|y| !SEASONS.contains(y)) {
            return Err(Error::Config(format!("year {y} is not one of {SEASONS:?}")));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} not in (0, 1)", self.split_fraction)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.columns()?;
        Ok(())
    }

    pub fn columns(&self) -> Result<ColumnMap> {
        let mut map = ColumnMap::default();
        for (field, header) in &self.column_map {
            map.set(field, header)?;
        }
        Ok(map)
    }

    /// SHA-256 over the settings that affect artifact contents. Paths and
    /// `jobs` are excluded so the same analysis hashes the same anywhere.
    pub fn config_hash(&self) -> String {
        let mut datasets: Vec<String> = self.datasets.iter().map(|d| d.to_string()).collect();
        datasets.sort();
        datasets.dedup();
        let mut years = self.years.clone();
        years.sort_unstable();
        years.dedup();
        let mut canon = format!(
            "datasets={}\nyears={:?}\nseed={}\nmin_serves={}\nsplit_fraction={:?}\nstage_version={STAGE_VERSION}\n",
            datasets.join(","),
            years,
            self.seed,
            self.min_serves,
            self.split_fraction,
        );
        for (k, v) in &self.column_map {
            canon.push_str(&format!("column.{k}={v}\n"));
        }
        format!("{:x}", Sha256::digest(canon.as_bytes()))
    }

    pub fn dataset_dir(&self, dataset: Dataset) -> PathBuf {
        self.output_dir.join(dataset.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Features,
    Fit,
    Score,
    Welo,
    Evaluate,
    Rank,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Features,
        Stage::Fit,
        Stage::Score,
        Stage::Welo,
        Stage::Evaluate,
        Stage::Rank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Fit => "fit",
            Stage::Score => "score",
            Stage::Welo => "welo",
            Stage::Evaluate => "evaluate",
            Stage::Rank => "rank",
        }
    }

    /// Files this stage writes into the dataset directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["matches.csv", "cleaned_points.csv", "match_results.csv", "cleaning_report.json"],
            Stage::Features => &["split.json", "features_s1.csv", "features_s2.csv", "standardization.json"],
            Stage::Fit => &["fit_s1.json", "fit_s2.json"],
            Stage::Score => &["sqs_s1.csv", "sqs_s2.csv", "profiles.csv"],
            Stage::Welo => &["welo_ratings.csv"],
            Stage::Evaluate => &["eval.csv", "eval.json", "eval.txt", "scatter_s1.csv", "scatter_s2.csv"],
            Stage::Rank => &["rankings.txt", "rankings.csv"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// What a run should execute: one stage or every stage in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Only(Stage),
}

impl StageSelection {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageSelection::All => Stage::ALL.to_vec(),
            StageSelection::Only(s) => vec![s],
        }
    }
}

impl FromStr for StageSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            Ok(StageSelection::All)
        } else {
            s.parse().map(StageSelection::Only)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub stage: Stage,
    pub stage_version: u32,
}

impl Provenance {
    fn line(&self) -> String {
        format!(
            "# config_hash={} seed={} stage={} stage_version={}\n",
            self.config_hash, self.seed, self.stage, self.stage_version
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    provenance: Provenance,
    data: T,
}

/// Artifact I/O for one dataset directory.
struct Artifacts<'a> {
    dir: PathBuf,
    config_hash: &'a str,
    seed: u64,
}

impl Artifacts<'_> {
    fn provenance(&self, stage: Stage) -> Provenance {
        Provenance {
            config_hash: self.config_hash.to_string(),
            seed: self.seed,
            stage,
            stage_version: STAGE_VERSION,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn write_csv<T: Serialize>(&self, stage: Stage, name: &str, rows: &[T]) -> Result<()> {
        let mut buf = self.provenance(stage).line().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(self.path(name), e))?;
        }
        self.write_bytes(name, &buf)
    }

    fn write_json<T: Serialize>(&self, stage: Stage, name: &str, data: &T) -> Result<()> {
        let env = Envelope {
            provenance: self.provenance(stage),
            data,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    fn write_text(&self, stage: Stage, name: &str, text: &str) -> Result<()> {
        let mut s = self.provenance(stage).line();
        s.push_str(text);
        self.write_bytes(name, s.as_bytes())
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path))
        }
    }

    fn check_provenance(&self, name: &str, found: &str) {
        if found != self.config_hash {
            log::warn!(
                "{} was written under config {found}, current config is {}",
                self.path(name).display(),
                self.config_hash
            );
        }
    }

    fn read_csv<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        let path = self.require(name)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if let Some(hash) = text
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().find_map(|t| t.strip_prefix("config_hash=")))
        {
            self.check_provenance(name, hash);
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.require(name)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let env: Envelope<T> = serde_json::from_slice(&bytes)?;
        self.check_provenance(name, &env.provenance.config_hash);
        Ok(env.data)
    }
}

/// Flat CSV form of a cleaned point.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PointRow {
    match_id: String,
    server: String,
    returner: String,
    serve_type: u8,
    speed_mph: f64,
    serve_width: ServeWidth,
    serve_depth: ServeDepth,
    rally_count: u32,
    server_won: bool,
    efficient: bool,
}

impl From<&PointRecord> for PointRow {
    fn from(p: &PointRecord) -> Self {
        Self {
            match_id: p.match_id.clone(),
            server: p.server.clone(),
            returner: p.returner.clone(),
            serve_type: p.serve_type,
            speed_mph: p.speed_mph,
            serve_width: p.location.width,
            serve_depth: p.location.depth,
            rally_count: p.rally_count,
            server_won: p.server_won,
            efficient: p.efficient,
        }
    }
}

impl From<PointRow> for PointRecord {
    fn from(r: PointRow) -> Self {
        Self {
            match_id: r.match_id,
            server: r.server,
            returner: r.returner,
            serve_type: r.serve_type,
            speed_mph: r.speed_mph,
            location: LocationBin::new(r.serve_width, r.serve_depth),
            rally_count: r.rally_count,
            server_won: r.server_won,
            efficient: r.efficient,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureRow {
    server: String,
    serve_type: u8,
    n: usize,
    avg_speed: f64,
    sd_speed: f64,
    modal_width: ServeWidth,
    modal_depth: ServeDepth,
    loc_entropy: f64,
    avg_speed_z: Option<f64>,
    sd_speed_z: Option<f64>,
    loc_entropy_z: Option<f64>,
}

impl From<&ServerFeatures> for FeatureRow {
    fn from(f: &ServerFeatures) -> Self {
        Self {
            server: f.server.clone(),
            serve_type: f.serve_type,
            n: f.n,
            avg_speed: f.avg_speed,
            sd_speed: f.sd_speed,
            modal_width: f.modal_loc.width,
            modal_depth: f.modal_loc.depth,
            loc_entropy: f.loc_entropy,
            avg_speed_z: f.z.map(|z| z.avg_speed),
            sd_speed_z: f.z.map(|z| z.sd_speed),
            loc_entropy_z: f.z.map(|z| z.loc_entropy),
        }
    }
}

impl From<FeatureRow> for ServerFeatures {
    fn from(r: FeatureRow) -> Self {
        let z = match (r.avg_speed_z, r.sd_speed_z, r.loc_entropy_z) {
            (Some(avg_speed), Some(sd_speed), Some(loc_entropy)) => Some(ZScores {
                avg_speed,
                sd_speed,
                loc_entropy,
            }),
            _ => None,
        };
        Self {
            server: r.server,
            serve_type: r.serve_type,
            n: r.n,
            avg_speed: r.avg_speed,
            sd_speed: r.sd_speed,
            modal_loc: LocationBin::new(r.modal_width, r.modal_depth),
            loc_entropy: r.loc_entropy,
            z,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SqsRow {
    rank: usize,
    server: String,
    serve_type: u8,
    n_train_serves: usize,
    sqs: f64,
    sqs_centered: f64,
}

impl From<SqsRow> for SqsEntry {
    fn from(r: SqsRow) -> Self {
        Self {
            server: r.server,
            serve_type: r.serve_type,
            sqs: r.sqs,
            sqs_centered: r.sqs_centered,
            n_train_serves: r.n_train_serves,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalCsvRow {
    dataset: String,
    serve_type: u8,
    outcome: String,
    predictor: String,
    n_servers: usize,
    coefficient: Option<f64>,
    coefficient_per_sd: Option<f64>,
    std_error: Option<f64>,
    p_value: Option<f64>,
    pearson_r: Option<f64>,
    pearson_r_weighted: Option<f64>,
    error: Option<String>,
}

impl From<&EvalRow> for EvalCsvRow {
    fn from(r: &EvalRow) -> Self {
        Self {
            dataset: r.dataset.to_string(),
            serve_type: r.serve_type,
            outcome: r.outcome.label().to_string(),
            predictor: r.predictor.label(r.serve_type),
            n_servers: r.n_servers,
            coefficient: r.coefficient,
            coefficient_per_sd: r.coefficient_per_sd,
            std_error: r.std_error,
            p_value: r.p_value,
            pearson_r: r.pearson_r,
            pearson_r_weighted: r.pearson_r_weighted,
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankingRow {
    serve_type: u8,
    rank: usize,
    server: String,
    sqs: f64,
    sqs_centered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearIngest {
    pub year: i32,
    pub matches: usize,
    pub malformed_match_rows: usize,
    /// Point rows of this dataset whose match id is absent from the matches file.
    pub points_without_match: usize,
    pub cleaning: CleaningReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset: String,
    pub total: CleaningReport,
    pub match_results: usize,
    pub years: Vec<YearIngest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub serve_type: u8,
    pub design: DesignReport,
    pub fit: GlmmFit,
}

fn stage_ingest(cfg: &PipelineConfig, dataset: Dataset, art: &Artifacts) -> Result<()> {
    let columns = cfg.columns()?;
    let mut years: Vec<i32> = cfg.years.clone();
    years.sort_unstable();
    years.dedup();

    let mut all_matches: Vec<MatchMeta> = Vec::new();
    let mut all_points: Vec<PointRecord> = Vec::new();
    let mut all_results: Vec<MatchResult> = Vec::new();
    let mut per_year = Vec::with_capacity(years.len());
    let mut total = CleaningReport {
        input_rows: 0,
        kept: 0,
        dropped_by_reason: BTreeMap::new(),
    };

    for year in years {
        let loaded = load_matches(&matches_file(&cfg.data_dir, year, dataset.tournament), &columns)?;
        let matches: Vec<MatchMeta> = loaded
            .records
            .into_iter()
            .filter(|m| m.dataset() == dataset && m.year == year)
            .collect();
        let ids: BTreeSet<&str> = matches.iter().map(|m| m.match_id.as_str()).collect();
        let raw = load_points(&points_file(&cfg.data_dir, year, dataset.tournament), &columns)?;
        let mut without_match = 0;
        let mine: Vec<_> = raw
            .into_iter()
            .filter(|p| {
                if ids.contains(p.match_id.as_str()) {
                    return true;
                }
                if let Some((_, t, g, _)) = parse_match_id(&p.match_id) {
                    if t == dataset.tournament && g == dataset.gender {
                        without_match += 1;
                    }
                }
                false
            })
            .collect();
        if without_match > 0 {
            log::warn!("{dataset} {year}: {without_match} point rows reference matches missing from the matches file");
        }
        let cleaned = resolve_and_clean(&mine, &matches)?;
        all_results.extend(derive_match_results(&mine, &matches));

        total.input_rows += cleaned.report.input_rows;
        total.kept += cleaned.report.kept;
        for (k, v) in &cleaned.report.dropped_by_reason {
            *total.dropped_by_reason.entry(k.clone()).or_default() += v;
        }
        per_year.push(YearIngest {
            year,
            matches: matches.len(),
            malformed_match_rows: loaded.malformed.len(),
            points_without_match: without_match,
            cleaning: cleaned.report,
        });
        all_matches.extend(matches);
        all_points.extend(cleaned.points);
    }
    all_results.sort_by_key(|r| r.date_order);

    let stage = Stage::Ingest;
    art.write_csv(stage, "matches.csv", &all_matches)?;
    let rows: Vec<PointRow> = all_points.iter().map(PointRow::from).collect();
    art.write_csv(stage, "cleaned_points.csv", &rows)?;
    art.write_csv(stage, "match_results.csv", &all_results)?;
    let report = IngestReport {
        dataset: dataset.to_string(),
        total,
        match_results: all_results.len(),
        years: per_year,
    };
    art.write_json(stage, "cleaning_report.json", &report)
}

fn read_points(art: &Artifacts) -> Result<Vec<PointRecord>> {
    Ok(art
        .read_csv::<PointRow>("cleaned_points.csv")?
        .into_iter()
        .map(PointRecord::from)
        .collect())
}

fn read_features(art: &Artifacts, serve_type: u8) -> Result<Vec<ServerFeatures>> {
    Ok(art
        .read_csv::<FeatureRow>(&format!("features_s{serve_type}.csv"))?
        .into_iter()
        .map(ServerFeatures::from)
        .collect())
}

fn read_sqs(art: &Artifacts, serve_type: u8) -> Result<Vec<SqsEntry>> {
    Ok(art
        .read_csv::<SqsRow>(&format!("sqs_s{serve_type}.csv"))?
        .into_iter()
        .map(SqsEntry::from)
        .collect())
}

fn stage_features(cfg: &PipelineConfig, art: &Artifacts) -> Result<()> {
    let matches: Vec<MatchMeta> = art.read_csv("matches.csv")?;
    let points = read_points(art)?;
    let split = split_matches(&matches, cfg.seed, cfg.split_fraction)?;
    let train: Vec<PointRecord> = points.into_iter().filter(|p| split.is_train(&p.match_id)).collect();

    let mut params: BTreeMap<String, Standardization> = BTreeMap::new();
    let mut tables = Vec::new();
    for st in SERVE_TYPES {
        let kept = filter_min_serves(aggregate(&train, st), cfg.min_serves);
        let (feats, scale) = standardize(kept)?;
        params.insert(format!("s{st}"), scale);
        tables.push((st, feats));
    }

    let stage = Stage::Features;
    art.write_json(stage, "split.json", &split)?;
    for (st, feats) in &tables {
        let rows: Vec<FeatureRow> = feats.iter().map(FeatureRow::from).collect();
        art.write_csv(stage, &format!("features_s{st}.csv"), &rows)?;
    }
    art.write_json(stage, "standardization.json", &params)
}

fn stage_fit(art: &Artifacts) -> Result<()> {
    let split: SplitAssignment = art.read_json("split.json")?;
    let points = read_points(art)?;
    let train: Vec<PointRecord> = points.into_iter().filter(|p| split.is_train(&p.match_id)).collect();
    let mut fits = Vec::new();
    for st in SERVE_TYPES {
        let features = read_features(art, st)?;
        let (design, report) = build_design(&train, &features, st, None)?;
        let fit = fit_glmm(&design, FitOptions::default())?;
        if !fit.converged {
            log::warn!("serve type {st}: variance search did not converge");
        }
        fits.push(FitArtifact {
            serve_type: st,
            design: report,
            fit,
        });
    }
    for f in &fits {
        art.write_json(Stage::Fit, &format!("fit_s{}.json", f.serve_type), f)?;
    }
    Ok(())
}

fn stage_score(art: &Artifacts) -> Result<()> {
    let mut scored = Vec::new();
    for st in SERVE_TYPES {
        let fit: FitArtifact = art.read_json(&format!("fit_s{st}.json"))?;
        let features = read_features(art, st)?;
        scored.push(compute_sqs(&fit.fit, &features)?);
    }
    for (st, entries) in SERVE_TYPES.iter().zip(&scored) {
        let rows: Vec<SqsRow> = rank_all(entries)
            .into_iter()
            .map(|r| SqsRow {
                rank: r.rank,
                server: r.entry.server,
                serve_type: r.entry.serve_type,
                n_train_serves: r.entry.n_train_serves,
                sqs: r.entry.sqs,
                sqs_centered: r.entry.sqs_centered,
            })
            .collect();
        art.write_csv(Stage::Score, &format!("sqs_s{st}.csv"), &rows)?;
    }
    art.write_csv(Stage::Score, "profiles.csv", &serving_profiles(&scored[0], &scored[1]))
}

fn stage_welo(art: &Artifacts) -> Result<()> {
    let split: SplitAssignment = art.read_json("split.json")?;
    let results: Vec<MatchResult> = art.read_csv("match_results.csv")?;
    let train: Vec<MatchResult> = results.into_iter().filter(|r| split.is_train(&r.match_id)).collect();
    let state = ratings_at_cutoff(&train, i64::MAX)?;
    art.write_csv(Stage::Welo, "welo_ratings.csv", &state.table())
}

fn stage_evaluate(dataset: Dataset, art: &Artifacts) -> Result<()> {
    let sqs: Vec<Vec<SqsEntry>> = SERVE_TYPES.iter().map(|&st| read_sqs(art, st)).collect::<Result<_>>()?;
    let ratings: Vec<RatingRow> = art.read_csv("welo_ratings.csv")?;
    let split: SplitAssignment = art.read_json("split.json")?;
    let points = read_points(art)?;
    let test: Vec<PointRecord> = points.into_iter().filter(|p| split.is_test(&p.match_id)).collect();
    let welo: HashMap<String, f64> = ratings.into_iter().map(|r| (r.player, r.rating)).collect();

    let evals: Vec<ServeTypeEval> = SERVE_TYPES
        .iter()
        .zip(&sqs)
        .map(|(&st, scores)| evaluate_serve_type(dataset, st, scores, &welo, &server_outcomes(&test, st)))
        .collect();

    let stage = Stage::Evaluate;
    let rows: Vec<EvalCsvRow> = evals.iter().flat_map(|e| e.rows.iter().map(EvalCsvRow::from)).collect();
    art.write_csv(stage, "eval.csv", &rows)?;
    art.write_json(stage, "eval.json", &evals)?;
    let mut text = String::new();
    for e in &evals {
        let which = if e.serve_type == 1 { "first" } else { "second" };
        text.push_str(&format_table(&format!("{}, {which} serves (test split)", dataset.label()), &e.rows));
        text.push('\n');
    }
    art.write_text(stage, "eval.txt", &text)?;
    for e in &evals {
        let pts: &[ScatterPoint] = &e.points;
        art.write_csv(stage, &format!("scatter_s{}.csv", e.serve_type), pts)?;
    }
    Ok(())
}

fn stage_rank(dataset: Dataset, art: &Artifacts) -> Result<()> {
    let first = read_sqs(art, 1)?;
    let second = read_sqs(art, 2)?;
    let title = format!("{} (scores fitted on the training split)", dataset.label());
    let text = format_rankings(&title, &first, &second, RANKING_TOP_K);
    art.write_text(Stage::Rank, "rankings.txt", &text)?;
    let rows: Vec<RankingRow> = [(1u8, &first), (2u8, &second)]
        .into_iter()
        .flat_map(|(st, entries)| {
            top_k(entries, RANKING_TOP_K).into_iter().map(move |r| RankingRow {
                serve_type: st,
                rank: r.rank,
                server: r.entry.server,
                sqs: r.entry.sqs,
                sqs_centered: r.entry.sqs_centered,
            })
        })
        .collect();
    art.write_csv(Stage::Rank, "rankings.csv", &rows)
}

/// Runs one stage for one dataset.
pub fn run_stage(cfg: &PipelineConfig, dataset: Dataset, stage: Stage) -> Result<()> {
    let hash = cfg.config_hash();
    let art = Artifacts {
        dir: cfg.dataset_dir(dataset),
        config_hash: &hash,
        seed: cfg.seed,
    };
    match stage {
        Stage::Ingest => stage_ingest(cfg, dataset, &art),
        Stage::Features => stage_features(cfg, &art),
        Stage::Fit => stage_fit(&art),
        Stage::Score => stage_score(&art),
        Stage::Welo => stage_welo(&art),
        Stage::Evaluate => stage_evaluate(dataset, &art),
        Stage::Rank => stage_rank(dataset, &art),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStatus {
    pub dataset: String,
    pub ok: bool,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stage_version: u32,
    pub datasets: Vec<DatasetStatus>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.manifest.datasets.iter().all(|d| d.ok)
    }

    /// 0 when every dataset succeeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else {
            1
        }
    }
}

fn hash_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((format!("{:x}", Sha256::digest(&bytes)), bytes.len() as u64))
}

fn collect_artifacts(cfg: &PipelineConfig, datasets: &[Dataset]) -> Result<Vec<ArtifactEntry>> {
    let mut out = Vec::new();
    for &ds in datasets {
        let dir = cfg.dataset_dir(ds);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let (sha256, bytes) = hash_file(&dir.join(&name))?;
            out.push(ArtifactEntry {
                path: format!("{ds}/{name}"),
                sha256,
                bytes,
            });
        }
    }
    Ok(out)
}

/// Runs the selected stages for every configured dataset, datasets in
/// parallel up to `cfg.jobs`. A failing stage stops its dataset only; the
/// manifest records each dataset's status and every artifact on disk.
pub fn run(cfg: &PipelineConfig, selection: StageSelection) -> Result<RunSummary> {
    cfg.validate()?;
    let mut datasets = cfg.datasets.clone();
    datasets.sort();
    datasets.dedup();
    let stages = selection.stages();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let statuses: Vec<DatasetStatus> = pool.install(|| {
        datasets
            .par_iter()
            .map(|&ds| {
                for &stage in &stages {
                    log::info!("{ds}: {stage}");
                    if let Err(e) = run_stage(cfg, ds, stage) {
                        log::error!("{ds}: stage `{stage}` failed: {e}");
                        return DatasetStatus {
                            dataset: ds.to_string(),
                            ok: false,
                            failed_stage: Some(stage),
                            error: Some(format!("stage `{stage}` failed: {e}")),
                        };
                    }
                }
                DatasetStatus {
                    dataset: ds.to_string(),
                    ok: true,
                    failed_stage: None,
                    error: None,
                }
            })
            .collect()
    });

    let manifest = Manifest {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        stage_version: STAGE_VERSION,
        datasets: statuses,
        artifacts: collect_artifacts(cfg, &datasets)?,
    };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let manifest_path = cfg.output_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&manifest_path, bytes).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(RunSummary {
        manifest,
        manifest_path,
    })
}
