use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ServerFeatures;
use crate::ingest::{LocationBin, PointRecord};

/// Column layout of the server-level fixed effects:
/// `[intercept, avg_speed_z, sd_speed_z, one-hot(modal_loc) minus reference, loc_entropy_z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedLayout {
    pub reference: LocationBin,
    /// Non-reference levels, in column order.
    pub levels: Vec<LocationBin>,
}

impl FixedLayout {
    /// Reference = most common modal bin across servers (ties to the
    /// smallest bin); remaining observed bins become indicator columns.
    pub fn from_features(features: &[ServerFeatures], reference: Option<LocationBin>) -> Self {
        let mut counts: BTreeMap<LocationBin, usize> = BTreeMap::new();
        for f in features {
            *counts.entry(f.modal_loc).or_default() += 1;
        }
        let reference = reference.unwrap_or_else(|| {
            let mut best: Option<(LocationBin, usize)> = None;
            for (&bin, &c) in &counts {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((bin, c));
                }
            }
            best.map(|(b, _)| b).expect("at least one server")
        });
        let levels = counts.keys().copied().filter(|b| *b != reference).collect();
        Self { reference, levels }
    }

    pub fn n_columns(&self) -> usize {
        4 + self.levels.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec![
            "(Intercept)".to_string(),
            "avg_speed_z".to_string(),
            "sd_speed_z".to_string(),
        ];
        names.extend(self.levels.iter().map(|b| format!("modal_loc[{b}]")));
        names.push("loc_entropy_z".to_string());
        names
    }

    /// Fixed-effect covariates for one server. Panics if z-scores are unset.
    pub fn row(&self, f: &ServerFeatures) -> Vec<f64> {
        let z = f.z.expect("features must be standardized");
        let mut row = Vec::with_capacity(self.n_columns());
        row.extend([1.0, z.avg_speed, z.sd_speed]);
        row.extend(self.levels.iter().map(|b| if *b == f.modal_loc { 1.0 } else { 0.0 }));
        row.push(z.loc_entropy);
        row
    }
}

/// Point-level design for the crossed random-intercept logistic model.
///
/// Indices are 0-based into the label vectors. A design with no returner
/// labels has no returner random effect.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y: Vec<bool>,
    pub x: DMatrix<f64>,
    pub server_index: Vec<usize>,
    pub returner_index: Vec<usize>,
    pub server_labels: Vec<String>,
    pub returner_labels: Vec<String>,
    pub column_names: Vec<String>,
    pub layout: Option<FixedLayout>,
}

impl DesignMatrix {
    pub fn new(
        y: Vec<bool>,
        x: DMatrix<f64>,
        server_index: Vec<usize>,
        returner_index: Vec<usize>,
        server_labels: Vec<String>,
        returner_labels: Vec<String>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Invalid("design has no rows".into()));
        }
        if x.nrows() != n || server_index.len() != n {
            return Err(Error::Invalid("design row counts differ".into()));
        }
        if !(returner_index.len() == n || (returner_index.is_empty() && returner_labels.is_empty())) {
            return Err(Error::Invalid("returner index length differs from rows".into()));
        }
        if column_names.len() != x.ncols() {
            return Err(Error::Invalid("column name count differs from columns".into()));
        }
        if server_labels.is_empty() {
            return Err(Error::Invalid("design needs at least one server level".into()));
        }
        if server_index.iter().any(|&j| j >= server_labels.len())
            || returner_index.iter().any(|&k| k >= returner_labels.len())
        {
            return Err(Error::Invalid("random-effect index out of range".into()));
        }
        let design = Self {
            y,
            x,
            server_index,
            returner_index,
            server_labels,
            returner_labels,
            column_names,
            layout: None,
        };
        design.check_rank()?;
        Ok(design)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_servers(&self) -> usize {
        self.server_labels.len()
    }

    pub fn n_returners(&self) -> usize {
        self.returner_labels.len()
    }

    /// Incremental Cholesky on X'X; a pivot that collapses relative to its
    /// diagonal means the column lies in the span of earlier ones.
    fn check_rank(&self) -> Result<()> {
        let xtx = self.x.transpose() * &self.x;
        let p = xtx.nrows();
        let mut l = DMatrix::<f64>::zeros(p, p);
        for k in 0..p {
            let mut d = xtx[(k, k)];
            for j in 0..k {
                d -= l[(k, j)] * l[(k, j)];
            }
            if !(d > 1e-10 * xtx[(k, k)].max(f64::MIN_POSITIVE)) {
                return Err(Error::RankDeficientX(self.column_names[k].clone()));
            }
            let dk = d.sqrt();
            l[(k, k)] = dk;
            for i in k + 1..p {
                let mut s = xtx[(i, k)];
                for j in 0..k {
                    s -= l[(i, j)] * l[(k, j)];
                }
                l[(i, k)] = s / dk;
            }
        }
        Ok(())
    }

    /// Duplicates every row `times` times (used for weight-invariance checks).
    pub fn replicated(&self, times: usize) -> Self {
        let n = self.n_rows();
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..n).collect();
        let x = DMatrix::from_fn(rows.len(), self.n_fixed(), |i, c| self.x[(rows[i], c)]);
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x,
            server_index: rows.iter().map(|&i| self.server_index[i]).collect(),
            returner_index: if self.returner_index.is_empty() {
                Vec::new()
            } else {
                rows.iter().map(|&i| self.returner_index[i]).collect()
            },
            server_labels: self.server_labels.clone(),
            returner_labels: self.returner_labels.clone(),
            column_names: self.column_names.clone(),
            layout: self.layout.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignReport {
    pub points_in: usize,
    /// Points of this serve type whose server has no feature row.
    pub excluded_points: usize,
    pub excluded_servers: usize,
    /// Location levels with no rows (dropped from the one-hot block).
    pub dropped_levels: Vec<String>,
}

/// Builds the point-level design for one serve type from cleaned points and
/// standardized, filtered server features.
pub fn build_design(
    points: &[PointRecord],
    features: &[ServerFeatures],
    serve_type: u8,
    reference: Option<LocationBin>,
) -> Result<(DesignMatrix, DesignReport)> {
    let feats: HashMap<&str, &ServerFeatures> = features
        .iter()
        .filter(|f| f.serve_type == serve_type)
        .map(|f| (f.server.as_str(), f))
        .collect();
    if feats.values().any(|f| f.z.is_none()) {
        return Err(Error::Invalid("features must be standardized before building the design".into()));
    }

    let mut report = DesignReport::default();
    let mut kept: Vec<&PointRecord> = Vec::new();
    let mut excluded_servers: BTreeMap<&str, ()> = BTreeMap::new();
    for p in points.iter().filter(|p| p.serve_type == serve_type) {
        report.points_in += 1;
        if feats.contains_key(p.server.as_str()) {
            kept.push(p);
        } else {
            report.excluded_points += 1;
            excluded_servers.insert(p.server.as_str(), ());
        }
    }
    report.excluded_servers = excluded_servers.len();
    if kept.is_empty() {
        return Err(Error::NoPoints(serve_type));
    }

    let server_labels: Vec<String> = {
        let set: BTreeMap<&str, ()> = kept.iter().map(|p| (p.server.as_str(), ())).collect();
        set.into_keys().map(String::from).collect()
    };
    let returner_labels: Vec<String> = {
        let set: BTreeMap<&str, ()> = kept.iter().map(|p| (p.returner.as_str(), ())).collect();
        set.into_keys().map(String::from).collect()
    };
    let server_pos: HashMap<&str, usize> =
        server_labels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let returner_pos: HashMap<&str, usize> =
        returner_labels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let used: Vec<ServerFeatures> = server_labels.iter().map(|s| feats[s.as_str()].clone()).collect();
    let mut layout = FixedLayout::from_features(&used, reference);
    // Levels observed only among servers without points cannot be estimated.
    let observed: BTreeMap<LocationBin, ()> = used.iter().map(|f| (f.modal_loc, ())).collect();
    layout.levels.retain(|b| {
        let keep = observed.contains_key(b);
        if !keep {
            log::warn!("modal location level {b} has no rows; dropped");
            report.dropped_levels.push(b.to_string());
        }
        keep
    });

    let server_rows: Vec<Vec<f64>> = used.iter().map(|f| layout.row(f)).collect();
    let server_index: Vec<usize> = kept.iter().map(|p| server_pos[p.server.as_str()]).collect();
    let x = DMatrix::from_fn(kept.len(), layout.n_columns(), |i, c| server_rows[server_index[i]][c]);

    let mut design = DesignMatrix::new(
        kept.iter().map(|p| p.efficient).collect(),
        x,
        server_index,
        kept.iter().map(|p| returner_pos[p.returner.as_str()]).collect(),
        server_labels,
        returner_labels,
        layout.column_names(),
    )?;
    design.layout = Some(layout);
    Ok((design, report))
}
