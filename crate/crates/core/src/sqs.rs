//! Server Quality Scores: the fitted server-side linear predictor against an
//! average returner, on the log-odds scale.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ServerFeatures;
use crate::glmm::GlmmFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqsEntry {
    pub server: String,
    pub serve_type: u8,
    pub sqs: f64,
    pub sqs_centered: f64,
    pub n_train_serves: usize,
}

/// Fixed-effect prediction at each server's features plus its server
/// effect, with the returner effect at zero. Entries come back centered.
pub fn compute_sqs(fit: &GlmmFit, features: &[ServerFeatures]) -> Result<Vec<SqsEntry>> {
    let layout = fit
        .layout
        .as_ref()
        .ok_or_else(|| Error::Invalid("fit has no feature layout; scores need a feature-built design".into()))?;
    let beta = fit.beta();
    let effects = fit.server_effects();
    let entries = features
        .iter()
        .map(|f| {
            let u = effects
                .get(f.server.as_str())
                .ok_or_else(|| Error::UnknownServer(f.server.clone()))?;
            let fixed: f64 = layout.row(f).iter().zip(&beta).map(|(x, b)| x * b).sum();
            Ok(SqsEntry {
                server: f.server.clone(),
                serve_type: f.serve_type,
                sqs: fixed + u,
                sqs_centered: 0.0,
                n_train_serves: f.n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(center_scores(entries))
}

/// Subtracts the group mean; a single entry centers to zero.
pub fn center_scores(mut entries: Vec<SqsEntry>) -> Vec<SqsEntry> {
    if entries.is_empty() {
        return entries;
    }
    let mean = entries.iter().map(|e| e.sqs).sum::<f64>() / entries.len() as f64;
    for e in &mut entries {
        e.sqs_centered = e.sqs - mean;
    }
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub rank: usize,
    pub entry: SqsEntry,
}

/// Descending by centered score, ties by server name.
pub fn rank_all(entries: &[SqsEntry]) -> Vec<Ranked> {
    let mut sorted: Vec<&SqsEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        b.sqs_centered
            .total_cmp(&a.sqs_centered)
            .then_with(|| a.server.cmp(&b.server))
    });
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| Ranked {
            rank: i + 1,
            entry: e.clone(),
        })
        .collect()
}

pub fn top_k(entries: &[SqsEntry], k: usize) -> Vec<Ranked> {
    let mut all = rank_all(entries);
    all.truncate(k.max(1));
    all
}

/// First- and second-serve scores for one player; a side is absent when
/// the player was not modelled for that serve type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingProfile {
    pub player: String,
    pub first: Option<f64>,
    pub second: Option<f64>,
}

pub fn serving_profiles(first: &[SqsEntry], second: &[SqsEntry]) -> Vec<ServingProfile> {
    let mut map: BTreeMap<&str, ServingProfile> = BTreeMap::new();
    for (entries, is_first) in [(first, true), (second, false)] {
        for e in entries {
            let p = map.entry(e.server.as_str()).or_insert_with(|| ServingProfile {
                player: e.server.clone(),
                first: None,
                second: None,
            });
            if is_first {
                p.first = Some(e.sqs);
            } else {
                p.second = Some(e.sqs);
            }
        }
    }
    map.into_values().collect()
}

/// Side-by-side first/second serve top-k table.
pub fn format_rankings(title: &str, first: &[SqsEntry], second: &[SqsEntry], k: usize) -> String {
    let a = top_k(first, k);
    let b = top_k(second, k);
    let width = a
        .iter()
        .chain(&b)
        .map(|r| r.entry.server.chars().count())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{title}: top {k} SQS rankings (centered)");
    let half = 4 + 2 + width + 2 + 7;
    let _ = writeln!(out, "{:<half$}    Second serve", "First serve");
    let header = format!("{:>4}  {:<width$}  {:>7}", "Rank", "Server", "SQS");
    let _ = writeln!(out, "{header}    {header}");
    let cell = |r: Option<&Ranked>| match r {
        Some(r) => format!("{:>4}  {:<width$}  {:>7.3}", r.rank, r.entry.server, r.entry.sqs_centered),
        None => " ".repeat(half),
    };
    for i in 0..a.len().max(b.len()) {
        let line = format!("{}    {}", cell(a.get(i)), cell(b.get(i)));
        let _ = writeln!(out, "{}", line.trim_end());
    }
    out
}
