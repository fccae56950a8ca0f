//! Python bindings: feature helpers, the crossed random-intercept GLMM,
//! weighted Elo, the grouped binomial GLM, simulation and the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyTuple};

use sqs_core::glmm::{self, DesignMatrix, FitOptions, VarianceComponents};
use sqs_core::ingest::Tournament;
use sqs_core::pipeline::{self, StageSelection};
use sqs_core::simulate::{self, SlamSim};
use sqs_core::welo::{self, MatchResult, WeloState};
use sqs_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NotConverged(_) | Error::NotPositiveDefinite => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Shannon entropy (bits) of a serve-location count table.
#[pyfunction]
fn location_entropy(counts: Vec<u64>) -> PyResult<f64> {
    sqs_core::features::location_entropy(counts).map_err(to_py)
}

/// Probability that a player rated `r_a` beats one rated `r_b`.
#[pyfunction]
fn expected_score(r_a: f64, r_b: f64) -> f64 {
    welo::expected_score(r_a, r_b)
}

/// Elo K-factor after `matches` matches.
#[pyfunction]
fn k_factor(matches: u32) -> f64 {
    welo::k_factor(matches)
}

/// Winner's share of games, clamped to [0.5, 1].
#[pyfunction]
fn match_weight(games_winner: u32, games_loser: u32) -> f64 {
    welo::match_weight(&MatchResult {
        match_id: String::new(),
        winner: String::new(),
        loser: String::new(),
        games_winner,
        games_loser,
        date_order: 0,
    })
}

/// Pearson correlation of two equal-length sequences.
#[pyfunction]
fn pearson_r(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    sqs_core::eval::pearson_r(&x, &y).map_err(to_py)
}

/// Fits `logit(p) = a + g x` to grouped binomial counts and returns a dict
/// with the estimates, standard errors and the Wald p-value of `g`.
#[pyfunction]
fn grouped_binomial_glm<'py>(
    py: Python<'py>,
    successes: Vec<u64>,
    trials: Vec<u64>,
    x: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let g = sqs_core::eval::grouped_binomial_glm(&successes, &trials, &x).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("intercept", g.intercept)?;
    d.set_item("intercept_se", g.intercept_se)?;
    d.set_item("coefficient", g.coefficient)?;
    d.set_item("std_error", g.std_error)?;
    d.set_item("z", g.z)?;
    d.set_item("p_value", g.p_value)?;
    d.set_item("iterations", g.iterations)?;
    Ok(d)
}

/// Running weighted Elo ratings. Results must be fed in increasing
/// `date_order`.
#[pyclass(name = "WeightedElo")]
#[derive(Default)]
struct PyWeightedElo {
    state: WeloState,
}

#[pymethods]
impl PyWeightedElo {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[pyo3(signature = (winner, loser, games_winner, games_loser, date_order, match_id = String::new()))]
    fn update(
        &mut self,
        winner: String,
        loser: String,
        games_winner: u32,
        games_loser: u32,
        date_order: i64,
        match_id: String,
    ) -> PyResult<()> {
        self.state
            .update(&MatchResult {
                match_id,
                winner,
                loser,
                games_winner,
                games_loser,
                date_order,
            })
            .map_err(to_py)
    }

    fn rating(&self, player: &str) -> f64 {
        self.state.rating(player)
    }

    fn matches_played(&self, player: &str) -> u32 {
        self.state.matches_played(player)
    }

    /// `(player, rating, matches_played)` tuples sorted by player.
    fn table(&self) -> Vec<(String, f64, u32)> {
        self.state
            .table()
            .into_iter()
            .map(|r| (r.player, r.rating, r.matches_played))
            .collect()
    }
}

/// A fitted crossed random-intercept logistic model.
#[pyclass(name = "GlmmFit", frozen)]
struct PyGlmmFit {
    fit: glmm::GlmmFit,
}

#[pymethods]
impl PyGlmmFit {
    /// `(name, estimate, std_error)` per fixed-effect column.
    #[getter]
    fn fixed_effects(&self) -> Vec<(String, f64, f64)> {
        self.fit
            .fixed_effects
            .iter()
            .map(|f| (f.name.clone(), f.estimate, f.std_error))
            .collect()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.fit.vc.sigma2
    }

    #[getter]
    fn tau2(&self) -> f64 {
        self.fit.vc.tau2
    }

    #[getter]
    fn laplace_loglik(&self) -> f64 {
        self.fit.laplace_loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.fit.converged
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.fit.n_points
    }

    #[getter]
    fn degenerate(&self) -> Vec<String> {
        self.fit.degenerate.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.fit.warnings.clone()
    }

    #[getter]
    fn server_effects(&self) -> BTreeMap<String, f64> {
        self.fit.servers.iter().map(|r| (r.player.clone(), r.estimate)).collect()
    }

    #[getter]
    fn returner_effects(&self) -> BTreeMap<String, f64> {
        self.fit.returners.iter().map(|r| (r.player.clone(), r.estimate)).collect()
    }

    /// Linear predictor `x'beta + u_server` with the returner effect at
    /// zero, for one row of covariates.
    fn predict_logit(&self, x: Vec<f64>, server: &str) -> PyResult<f64> {
        let beta = self.fit.beta();
        if x.len() != beta.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} covariates, got {}",
                beta.len(),
                x.len()
            )));
        }
        let u = self
            .fit
            .servers
            .iter()
            .find(|r| r.player == server)
            .ok_or_else(|| to_py(Error::UnknownServer(server.to_string())))?
            .estimate;
        Ok(x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + u)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.fit).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "GlmmFit(n_points={}, sigma2={:.4}, tau2={:.4}, laplace_loglik={:.3}, converged={})",
            self.fit.n_points,
            self.fit.vc.sigma2,
            self.fit.vc.tau2,
            self.fit.laplace_loglik,
            if self.fit.converged { "True" } else { "False" }
        )
    }
}

fn index_labels(names: &[String]) -> (Vec<usize>, Vec<String>) {
    let labels: Vec<String> = names.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index = names
        .iter()
        .map(|n| labels.binary_search(n).expect("label present"))
        .collect();
    (index, labels)
}

/// Fits the model to point-level arrays. `x` holds one row of covariates
/// per point (include a column of ones for an intercept). Omit `returners`
/// for a server-only model. Passing both `sigma2` and `tau2` skips the
/// variance search and fits at those values.
#[pyfunction]
#[pyo3(signature = (y, x, servers, returners = None, column_names = None, sigma2 = None, tau2 = None))]
#[allow(clippy::too_many_arguments)]
fn fit_glmm(
    py: Python<'_>,
    y: Vec<bool>,
    x: Vec<Vec<f64>>,
    servers: Vec<String>,
    returners: Option<Vec<String>>,
    column_names: Option<Vec<String>>,
    sigma2: Option<f64>,
    tau2: Option<f64>,
) -> PyResult<PyGlmmFit> {
    let n = y.len();
    let p = x.first().map_or(0, Vec::len);
    if x.len() != n || x.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("x must have one row of equal length per point"));
    }
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let (server_index, server_labels) = index_labels(&servers);
    let (returner_index, returner_labels) = returners.as_deref().map(index_labels).unwrap_or_default();
    let names = column_names.unwrap_or_else(|| (0..p).map(|j| format!("x{j}")).collect());
    let design = DesignMatrix::new(y, xm, server_index, returner_index, server_labels, returner_labels, names)
        .map_err(to_py)?;
    let fit = py
        .detach(|| match (sigma2, tau2) {
            (Some(s), Some(t)) => glmm::fit_at(&design, VarianceComponents::new(s, t)),
            (None, None) => glmm::fit_glmm(&design, FitOptions::default()),
            _ => Err(Error::Invalid("give both sigma2 and tau2, or neither".into())),
        })
        .map_err(to_py)?;
    Ok(PyGlmmFit { fit })
}

/// Writes seeded synthetic `<year>-<slam>-matches.csv` and `-points.csv`
/// files for one tournament into `directory`.
#[pyfunction]
#[pyo3(signature = (directory, tournament, seed, years = None, players_per_draw = None, matches_per_year = None))]
fn simulate_slam(
    directory: PathBuf,
    tournament: &str,
    seed: u64,
    years: Option<Vec<i32>>,
    players_per_draw: Option<usize>,
    matches_per_year: Option<usize>,
) -> PyResult<()> {
    let tournament: Tournament = tournament.parse().map_err(to_py)?;
    let mut sim = SlamSim::default();
    if let Some(y) = years {
        sim.years = y;
    }
    if let Some(p) = players_per_draw {
        sim.players_per_draw = p;
    }
    if let Some(m) = matches_per_year {
        sim.matches_per_year = m;
    }
    simulate::write_slam_files(&directory, tournament, &sim, seed).map_err(to_py)
}

fn setting_text(value: &Bound<'_, PyAny>) -> PyResult<String> {
    if value.is_instance_of::<PyList>() || value.is_instance_of::<PyTuple>() {
        let parts: Vec<String> = value
            .try_iter()?
            .map(|item| item.and_then(|i| i.str().map(|s| s.to_string())))
            .collect::<PyResult<_>>()?;
        Ok(parts.join(","))
    } else {
        Ok(value.str()?.to_string())
    }
}

/// Pipeline settings. Keyword arguments use the config-file keys
/// (`data_dir`, `output_dir`, `datasets`, `years`, `seed`, `min_serves`,
/// `split_fraction`, `jobs`); lists are accepted for `datasets` and `years`.
#[pyclass(name = "PipelineConfig")]
struct PyPipelineConfig {
    cfg: pipeline::PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[new]
    #[pyo3(signature = (**settings))]
    fn new(settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = pipeline::PipelineConfig::default();
        if let Some(settings) = settings {
            for (k, v) in settings.iter() {
                cfg.set(&k.extract::<String>()?, &setting_text(&v)?).map_err(to_py)?;
            }
        }
        cfg.validate().map_err(to_py)?;
        Ok(Self { cfg })
    }

    /// Reads a `key = value` config file.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            cfg: pipeline::PipelineConfig::from_file(&path).map_err(to_py)?,
        })
    }

    /// Sets one config-file key, e.g. `set("column.speed_mph", "Speed_KMH")`.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.cfg.set(key, &setting_text(value)?).map_err(to_py)
    }

    fn config_hash(&self) -> String {
        self.cfg.config_hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[getter]
    fn datasets(&self) -> Vec<String> {
        self.cfg.datasets.iter().map(|d| d.to_string()).collect()
    }

    #[getter]
    fn years(&self) -> Vec<i32> {
        self.cfg.years.clone()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.cfg.output_dir.clone()
    }

    /// Runs one stage (or `"all"`) for every configured dataset and
    /// returns the outcome. A failing dataset does not raise; inspect
    /// `RunResult.datasets` or `exit_code`.
    #[pyo3(signature = (stage = "all"))]
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<PyRunResult> {
        let selection: StageSelection = stage.parse().map_err(to_py)?;
        let cfg = self.cfg.clone();
        let summary = py.detach(|| pipeline::run(&cfg, selection)).map_err(to_py)?;
        Ok(PyRunResult {
            exit_code: summary.exit_code(),
            manifest_path: summary.manifest_path.clone(),
            config_hash: summary.manifest.config_hash.clone(),
            datasets: summary
                .manifest
                .datasets
                .iter()
                .map(|d| (d.dataset.clone(), d.ok, d.error.clone()))
                .collect(),
            artifacts: summary.manifest.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "PipelineConfig(data_dir={:?}, output_dir={:?}, datasets={:?}, years={:?}, seed={})",
            self.cfg.data_dir,
            self.cfg.output_dir,
            self.datasets(),
            self.cfg.years,
            self.cfg.seed
        )
    }
}

/// Outcome of a pipeline run.
#[pyclass(name = "RunResult", frozen, get_all)]
struct PyRunResult {
    exit_code: i32,
    manifest_path: PathBuf,
    config_hash: String,
    /// `(dataset, ok, error)` per dataset.
    datasets: Vec<(String, bool, Option<String>)>,
    /// `(relative path, sha256)` per artifact.
    artifacts: Vec<(String, String)>,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn all_ok(&self) -> bool {
        self.datasets.iter().all(|d| d.1)
    }
}

#[pymodule]
fn sqs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightedElo>()?;
    m.add_class::<PyGlmmFit>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(location_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(expected_score, m)?)?;
    m.add_function(wrap_pyfunction!(k_factor, m)?)?;
    m.add_function(wrap_pyfunction!(match_weight, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(grouped_binomial_glm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_glmm, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_slam, m)?)?;
    Ok(())
}
