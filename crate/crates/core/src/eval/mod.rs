//! Out-of-sample evaluation: server-level test outcomes regressed on a
//! predictor (SQS or wElo) with grouped binomial GLMs, plus correlations.

mod glm;
mod split;

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

pub use glm::{grouped_binomial_glm, normal_cdf, pearson_r, two_sided_p, weighted_pearson_r, GroupedGlm};
pub use split::{split_matches, SplitAssignment, DEFAULT_TRAIN_FRACTION};

use crate::features::ColumnScale;
use crate::ingest::{Dataset, PointRecord};
use crate::sqs::SqsEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerOutcome {
    pub server: String,
    pub serve_type: u8,
    pub n_points: u64,
    pub n_won: u64,
    pub n_efficient: u64,
}

/// Per-server test counts for one serve type, sorted by server.
pub fn server_outcomes(test_points: &[PointRecord], serve_type: u8) -> Vec<ServerOutcome> {
    let mut map: BTreeMap<&str, ServerOutcome> = BTreeMap::new();
    for p in test_points.iter().filter(|p| p.serve_type == serve_type) {
        let o = map.entry(p.server.as_str()).or_insert_with(|| ServerOutcome {
            server: p.server.clone(),
            serve_type,
            n_points: 0,
            n_won: 0,
            n_efficient: 0,
        });
        o.n_points += 1;
        o.n_won += p.server_won as u64;
        o.n_efficient += p.efficient as u64;
    }
    map.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    ServeEff,
    WinPct,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::ServeEff => "Serve efficiency",
            Outcome::WinPct => "Win percentage",
        }
    }

    fn successes(self, o: &ServerOutcome) -> u64 {
        match self {
            Outcome::ServeEff => o.n_efficient,
            Outcome::WinPct => o.n_won,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Predictor {
    Sqs,
    Welo,
}

impl Predictor {
    pub fn label(self, serve_type: u8) -> String {
        match self {
            Predictor::Sqs => format!("SQS_{serve_type}"),
            Predictor::Welo => "wElo".to_string(),
        }
    }
}

/// One line of an out-of-sample results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: Dataset,
    pub serve_type: u8,
    pub outcome: Outcome,
    pub predictor: Predictor,
    pub n_servers: usize,
    /// Log-odds change per predictor unit.
    pub coefficient: Option<f64>,
    /// Log-odds change per predictor standard deviation (across the servers).
    pub coefficient_per_sd: Option<f64>,
    pub std_error: Option<f64>,
    pub p_value: Option<f64>,
    pub pearson_r: Option<f64>,
    /// Correlation weighted by each server's test serve count.
    pub pearson_r_weighted: Option<f64>,
    pub error: Option<String>,
}

/// Rows for one serve type plus bookkeeping about excluded servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeTypeEval {
    pub serve_type: u8,
    pub rows: Vec<EvalRow>,
    /// Test servers without a training score, dropped from every row.
    pub excluded_servers: usize,
    /// (server, predictor value, outcome rates) used in the regressions.
    pub points: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub server: String,
    pub sqs: f64,
    pub welo: f64,
    pub n_points: u64,
    pub serve_eff: f64,
    pub win_pct: f64,
}

fn regress(dataset: Dataset, serve_type: u8, outcome: Outcome, predictor: Predictor, x: &[f64], outs: &[&ServerOutcome]) -> EvalRow {
    let mut row = EvalRow {
        dataset,
        serve_type,
        outcome,
        predictor,
        n_servers: outs.len(),
        coefficient: None,
        coefficient_per_sd: None,
        std_error: None,
        p_value: None,
        pearson_r: None,
        pearson_r_weighted: None,
        error: None,
    };
    let successes: Vec<u64> = outs.iter().map(|o| outcome.successes(o)).collect();
    let trials: Vec<u64> = outs.iter().map(|o| o.n_points).collect();
    let rates: Vec<f64> = successes.iter().zip(&trials).map(|(s, n)| *s as f64 / *n as f64).collect();
    let weights: Vec<f64> = trials.iter().map(|&n| n as f64).collect();
    let mut errors = Vec::new();
    match grouped_binomial_glm(&successes, &trials, x) {
        Ok(fit) => {
            row.coefficient = Some(fit.coefficient);
            row.coefficient_per_sd = Some(fit.coefficient * ColumnScale::fit(x).sd);
            row.std_error = Some(fit.std_error);
            row.p_value = Some(fit.p_value);
        }
        Err(e) => errors.push(format!("regression: {e}")),
    }
    match pearson_r(x, &rates) {
        Ok(r) => row.pearson_r = Some(r),
        Err(e) => errors.push(format!("correlation: {e}")),
    }
    row.pearson_r_weighted = weighted_pearson_r(x, &rates, &weights).ok();
    if !errors.is_empty() {
        row.error = Some(errors.join("; "));
    }
    row
}

/// Four rows (2 outcomes x 2 predictors) for one serve type. Servers
/// enter only if they have both a training score and test points; the same
/// server set is used for both predictors. Players missing from `welo`
/// get the initial rating.
pub fn evaluate_serve_type(
    dataset: Dataset,
    serve_type: u8,
    sqs: &[SqsEntry],
    welo: &HashMap<String, f64>,
    outcomes: &[ServerOutcome],
) -> ServeTypeEval {
    let scores: HashMap<&str, f64> = sqs.iter().map(|e| (e.server.as_str(), e.sqs)).collect();
    let kept: Vec<&ServerOutcome> = outcomes
        .iter()
        .filter(|o| o.n_points > 0 && scores.contains_key(o.server.as_str()))
        .collect();
    let excluded = outcomes.iter().filter(|o| o.n_points > 0).count() - kept.len();
    if excluded > 0 {
        log::info!("{dataset} serve {serve_type}: {excluded} test servers have no training score");
    }
    let x_sqs: Vec<f64> = kept.iter().map(|o| scores[o.server.as_str()]).collect();
    let x_welo: Vec<f64> = kept
        .iter()
        .map(|o| welo.get(&o.server).copied().unwrap_or(crate::welo::INITIAL_RATING))
        .collect();

    let mut rows = Vec::with_capacity(4);
    for outcome in [Outcome::ServeEff, Outcome::WinPct] {
        rows.push(regress(dataset, serve_type, outcome, Predictor::Sqs, &x_sqs, &kept));
        rows.push(regress(dataset, serve_type, outcome, Predictor::Welo, &x_welo, &kept));
    }
    let points = kept
        .iter()
        .zip(x_sqs.iter().zip(&x_welo))
        .map(|(o, (s, w))| ScatterPoint {
            server: o.server.clone(),
            sqs: *s,
            welo: *w,
            n_points: o.n_points,
            serve_eff: o.n_efficient as f64 / o.n_points as f64,
            win_pct: o.n_won as f64 / o.n_points as f64,
        })
        .collect();
    ServeTypeEval {
        serve_type,
        rows,
        excluded_servers: excluded,
        points,
    }
}

/// Formats a p-value the way results tables do: scientific below 1e-3.
pub fn format_p(p: f64) -> String {
    if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{}", (p * 1000.0).round() / 1000.0)
    }
}

struct Cell(Option<f64>, usize);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{:.*}", self.1, v),
            None => write!(f, "NA"),
        }
    }
}

/// Aligned text table with the columns of the published results tables.
pub fn format_table(title: &str, rows: &[EvalRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<17} {:<9} {:>4} {:>12} {:>10} {:>16}",
        "Outcome", "Predictor", "n", "Coefficient", "p-value", "Correlation (r)"
    );
    for r in rows {
        let p = r.p_value.map(format_p).unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            out,
            "{:<17} {:<9} {:>4} {:>12} {:>10} {:>16}",
            r.outcome.label(),
            r.predictor.label(r.serve_type),
            r.n_servers,
            Cell(r.coefficient, 3).to_string(),
            p,
            Cell(r.pearson_r, 3).to_string(),
        );
    }
    out
}
