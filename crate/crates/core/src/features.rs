//! Per-server serve summaries and their within-dataset standardization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LocationBin, PointRecord, ServeDepth, ServeWidth};

/// Servers need strictly more serves than this to be modelled.
pub const DEFAULT_MIN_SERVES: usize = 20;

/// Maximum possible location entropy: log2 of the number of bins.
pub fn max_entropy() -> f64 {
    (LocationBin::COUNT as f64).log2()
}

pub fn bin_index(bin: LocationBin) -> usize {
    let w = ServeWidth::ALL.iter().position(|w| *w == bin.width).unwrap();
    let d = ServeDepth::ALL.iter().position(|d| *d == bin.depth).unwrap();
    w * ServeDepth::ALL.len() + d
}

pub fn bin_from_index(i: usize) -> LocationBin {
    LocationBin::new(
        ServeWidth::ALL[i / ServeDepth::ALL.len()],
        ServeDepth::ALL[i % ServeDepth::ALL.len()],
    )
}

/// Base-2 Shannon entropy of a count table; empty bins contribute nothing.
pub fn location_entropy<I>(counts: I) -> Result<f64>
where
    I: IntoIterator<Item = u64>,
{
    let counts: Vec<u64> = counts.into_iter().filter(|c| *c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let total = total as f64;
    let h = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    // A single occupied bin gives -1*log2(1) = -0.0.
    Ok(h.max(0.0))
}

/// Mergeable sufficient statistics for one server and serve type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServeStats {
    pub n: u64,
    mean: f64,
    m2: f64,
    pub bins: [u64; LocationBin::COUNT],
}

impl ServeStats {
    pub fn push(&mut self, speed: f64, bin: LocationBin) {
        self.n += 1;
        let delta = speed - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (speed - self.mean);
        self.bins[bin_index(bin)] += 1;
    }

    /// Pairwise combination of two partial summaries.
    pub fn merge(&mut self, other: &ServeStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.n += other.n;
        for (a, b) in self.bins.iter_mut().zip(other.bins.iter()) {
            *a += b;
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample (n - 1) standard deviation; 0 for a single serve.
    pub fn sd(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0).sqrt()
        }
    }

    /// Most frequent bin; ties go to the lexicographically smallest bin.
    pub fn modal_bin(&self) -> Option<LocationBin> {
        let mut best: Option<(usize, u64)> = None;
        for (i, &c) in self.bins.iter().enumerate() {
            if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
                best = Some((i, c));
            }
        }
        best.map(|(i, _)| bin_from_index(i))
    }

    pub fn entropy(&self) -> Result<f64> {
        location_entropy(self.bins.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScores {
    pub avg_speed: f64,
    pub sd_speed: f64,
    pub loc_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerFeatures {
    pub server: String,
    pub serve_type: u8,
    pub n: usize,
    pub avg_speed: f64,
    pub sd_speed: f64,
    pub modal_loc: LocationBin,
    pub loc_entropy: f64,
    /// Unset until [`standardize`] runs.
    pub z: Option<ZScores>,
}

impl ServerFeatures {
    fn from_stats(server: String, serve_type: u8, stats: &ServeStats) -> Self {
        Self {
            server,
            serve_type,
            n: stats.n as usize,
            avg_speed: stats.mean(),
            sd_speed: stats.sd(),
            modal_loc: stats.modal_bin().expect("non-empty stats"),
            loc_entropy: stats.entropy().expect("non-empty stats"),
            z: None,
        }
    }
}

/// Per-server statistics for one serve type, keyed by server name.
pub fn accumulate<'a, I>(points: I, serve_type: u8) -> BTreeMap<String, ServeStats>
where
    I: IntoIterator<Item = &'a PointRecord>,
{
    let mut stats: BTreeMap<String, ServeStats> = BTreeMap::new();
    for p in points.into_iter().filter(|p| p.serve_type == serve_type) {
        stats
            .entry(p.server.clone())
            .or_default()
            .push(p.speed_mph, p.location);
    }
    stats
}

pub fn features_from_stats(stats: &BTreeMap<String, ServeStats>, serve_type: u8) -> Vec<ServerFeatures> {
    stats
        .iter()
        .filter(|(_, s)| s.n > 0)
        .map(|(name, s)| ServerFeatures::from_stats(name.clone(), serve_type, s))
        .collect()
}

/// One row per server with at least one serve of `serve_type`, sorted by
/// server name. Z-scores are left unset.
pub fn aggregate(points: &[PointRecord], serve_type: u8) -> Vec<ServerFeatures> {
    features_from_stats(&accumulate(points, serve_type), serve_type)
}

/// Keeps servers with strictly more than `threshold` serves.
pub fn filter_min_serves(features: Vec<ServerFeatures>, threshold: usize) -> Vec<ServerFeatures> {
    features.into_iter().filter(|f| f.n > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScale {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let sd = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, sd }
    }

    pub fn is_constant(&self) -> bool {
        !(self.sd > 1e-12 * self.mean.abs().max(1.0))
    }

    /// Constant columns map to 0.
    pub fn z(&self, x: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (x - self.mean) / self.sd
        }
    }
}

/// Training-set scaling reused whenever features are re-evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub serve_type: u8,
    pub n_servers: usize,
    pub avg_speed: ColumnScale,
    pub sd_speed: ColumnScale,
    pub loc_entropy: ColumnScale,
}

impl Standardization {
    pub fn apply(&self, f: &mut ServerFeatures) {
        f.z = Some(ZScores {
            avg_speed: self.avg_speed.z(f.avg_speed),
            sd_speed: self.sd_speed.z(f.sd_speed),
            loc_entropy: self.loc_entropy.z(f.loc_entropy),
        });
    }

    pub fn constant_columns(&self) -> Vec<&'static str> {
        [
            ("avg_speed", &self.avg_speed),
            ("sd_speed", &self.sd_speed),
            ("loc_entropy", &self.loc_entropy),
        ]
        .into_iter()
        .filter(|(_, c)| c.is_constant())
        .map(|(name, _)| name)
        .collect()
    }
}

/// Z-scores the three continuous columns with sample sd across the given
/// rows. Constant columns are reported via
/// [`Standardization::constant_columns`] and get z = 0.
pub fn standardize(mut features: Vec<ServerFeatures>) -> Result<(Vec<ServerFeatures>, Standardization)> {
    if features.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: features.len(),
        });
    }
    let col = |f: fn(&ServerFeatures) -> f64| -> Vec<f64> { features.iter().map(f).collect() };
    let params = Standardization {
        serve_type: features[0].serve_type,
        n_servers: features.len(),
        avg_speed: ColumnScale::fit(&col(|f| f.avg_speed)),
        sd_speed: ColumnScale::fit(&col(|f| f.sd_speed)),
        loc_entropy: ColumnScale::fit(&col(|f| f.loc_entropy)),
    };
    for c in params.constant_columns() {
        log::warn!("serve type {}: column {c} is constant; z set to 0", params.serve_type);
    }
    for f in &mut features {
        params.apply(f);
    }
    Ok((features, params))
}
