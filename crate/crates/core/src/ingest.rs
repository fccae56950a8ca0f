//! Raw match/point CSV parsing and the cleaning rules that turn raw rows into
//! model-ready [`PointRecord`]s.
//!
//! The defaults follow the public slam point-by-point layout: one
//! `<year>-<slam>-matches.csv` and one `<year>-<slam>-points.csv` per
//! tournament-year, with match ids of the form `2019-wimbledon-1101`
//! (match numbers `1xxx` are men's singles, `2xxx` women's singles).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seasons pooled by the study (2020 was not played at Wimbledon).
pub const SEASONS: [i32; 6] = [2018, 2019, 2021, 2022, 2023, 2024];

/// Efficient serve: won within the first three shots.
pub const EFFICIENT_MAX_RALLY: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tournament {
    #[serde(rename = "wimbledon")]
    Wimbledon,
    #[serde(rename = "usopen")]
    UsOpen,
}

impl Tournament {
    pub fn code(self) -> &'static str {
        match self {
            Tournament::Wimbledon => "wimbledon",
            Tournament::UsOpen => "usopen",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Tournament::Wimbledon => "Wimbledon",
            Tournament::UsOpen => "U.S. Open",
        }
    }
}

impl FromStr for Tournament {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wimbledon" => Ok(Tournament::Wimbledon),
            "usopen" | "us-open" | "us_open" => Ok(Tournament::UsOpen),
            other => Err(Error::Invalid(format!("unknown tournament `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    W,
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" | "men" | "male" => Ok(Gender::M),
            "W" | "w" | "F" | "f" | "women" | "female" => Ok(Gender::W),
            other => Err(Error::Invalid(format!("unknown gender `{other}`"))),
        }
    }
}

/// A tournament-gender group. All fitting happens per dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Dataset {
    pub tournament: Tournament,
    pub gender: Gender,
}

impl Dataset {
    pub fn new(tournament: Tournament, gender: Gender) -> Self {
        Self { tournament, gender }
    }

    pub fn all() -> [Dataset; 4] {
        use Gender::*;
        use Tournament::*;
        [
            Dataset::new(Wimbledon, M),
            Dataset::new(Wimbledon, W),
            Dataset::new(UsOpen, M),
            Dataset::new(UsOpen, W),
        ]
    }

    pub fn label(&self) -> String {
        let who = match self.gender {
            Gender::M => "men's",
            Gender::W => "women's",
        };
        format!("{} {} singles", self.tournament.display_name(), who)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{:?}", self.tournament.code(), self.gender)
    }
}

impl FromStr for Dataset {
    type Err = Error;

    /// Accepts `wimbledon-M`, `usopen-W`, `wimbledon:men` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let (t, g) = s
            .rsplit_once(['-', ':', '/'])
            .ok_or_else(|| Error::Invalid(format!("dataset `{s}` is not <tournament>-<gender>")))?;
        Ok(Dataset::new(t.parse()?, g.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchMeta {
    pub match_id: String,
    pub year: i32,
    pub tournament: Tournament,
    pub gender: Gender,
    /// Draw position number from the id; orders matches within a season.
    pub match_num: u32,
    pub player1: String,
    pub player2: String,
}

impl MatchMeta {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(self.tournament, self.gender)
    }

    /// Monotone within a dataset: season first, then draw order.
    pub fn date_order(&self) -> i64 {
        self.year as i64 * 100_000 + self.match_num as i64
    }
}

/// Splits `2019-wimbledon-1101` into (year, tournament, gender, match number).
pub fn parse_match_id(id: &str) -> Option<(i32, Tournament, Gender, u32)> {
    let mut parts = id.trim().splitn(3, '-');
    let year: i32 = parts.next()?.parse().ok()?;
    let tournament: Tournament = parts.next()?.parse().ok()?;
    let num: u32 = parts.next()?.parse().ok()?;
    let gender = match num / 1000 {
        1 => Gender::M,
        2 => Gender::W,
        _ => return None,
    };
    Some((year, tournament, gender, num))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServeWidth {
    B,
    BC,
    BW,
    C,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServeDepth {
    #[serde(rename = "CTL")]
    Ctl,
    #[serde(rename = "NCTL")]
    Nctl,
}

impl ServeWidth {
    pub const ALL: [ServeWidth; 5] = [
        ServeWidth::B,
        ServeWidth::BC,
        ServeWidth::BW,
        ServeWidth::C,
        ServeWidth::W,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ServeWidth::B => "B",
            ServeWidth::BC => "BC",
            ServeWidth::BW => "BW",
            ServeWidth::C => "C",
            ServeWidth::W => "W",
        }
    }

    pub fn parse(code: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.code().eq_ignore_ascii_case(code.trim()))
    }
}

impl ServeDepth {
    pub const ALL: [ServeDepth; 2] = [ServeDepth::Ctl, ServeDepth::Nctl];

    pub fn code(self) -> &'static str {
        match self {
            ServeDepth::Ctl => "CTL",
            ServeDepth::Nctl => "NCTL",
        }
    }

    pub fn parse(code: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.code().eq_ignore_ascii_case(code.trim()))
    }
}

/// Discrete serve placement cell. Ordering is lexicographic on the codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationBin {
    pub width: ServeWidth,
    pub depth: ServeDepth,
}

impl LocationBin {
    pub const COUNT: usize = 10;

    pub fn new(width: ServeWidth, depth: ServeDepth) -> Self {
        Self { width, depth }
    }

    pub fn parse(width: &str, depth: &str) -> Option<Self> {
        Some(Self::new(ServeWidth::parse(width)?, ServeDepth::parse(depth)?))
    }

    pub fn all() -> impl Iterator<Item = LocationBin> {
        ServeWidth::ALL
            .into_iter()
            .flat_map(|w| ServeDepth::ALL.into_iter().map(move |d| LocationBin::new(w, d)))
    }
}

impl fmt::Display for LocationBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.width.code(), self.depth.code())
    }
}

impl FromStr for LocationBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        s.split_once(',')
            .and_then(|(w, d)| LocationBin::parse(w, d))
            .ok_or_else(|| Error::Invalid(format!("bad location bin `{s}`")))
    }
}

/// One point row as read; every field may be missing or invalid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawPoint {
    pub match_id: String,
    pub point_server: Option<u8>,
    pub serve_number: Option<i64>,
    pub speed_mph: Option<f64>,
    pub serve_width: String,
    pub serve_depth: String,
    pub rally_count: Option<i64>,
    pub point_winner: Option<u8>,
    /// Non-zero only on the point that ends a game.
    pub game_winner: Option<u8>,
    /// Non-zero only on the point that ends a set.
    pub set_winner: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub match_id: String,
    pub server: String,
    pub returner: String,
    pub serve_type: u8,
    pub speed_mph: f64,
    pub location: LocationBin,
    pub rally_count: u32,
    pub server_won: bool,
    pub efficient: bool,
}

impl PointRecord {
    /// Inverse of the cleaning join, used to re-feed cleaned points.
    pub fn to_raw(&self, meta: &MatchMeta) -> RawPoint {
        let server_slot = if meta.player1 == self.server { 1 } else { 2 };
        let winner = if self.server_won { server_slot } else { 3 - server_slot };
        RawPoint {
            match_id: self.match_id.clone(),
            point_server: Some(server_slot),
            serve_number: Some(self.serve_type as i64),
            speed_mph: Some(self.speed_mph),
            serve_width: self.location.width.code().to_string(),
            serve_depth: self.location.depth.code().to_string(),
            rally_count: Some(self.rally_count as i64),
            point_winner: Some(winner),
            game_winner: None,
            set_winner: None,
        }
    }
}

/// Header names for each logical column. Headers vary across seasons in
/// the public files, so every name is overridable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub match_id: String,
    pub player1: String,
    pub player2: String,
    pub point_server: String,
    pub serve_number: String,
    pub speed_mph: String,
    pub serve_width: String,
    pub serve_depth: String,
    pub rally_count: String,
    pub point_winner: String,
    pub game_winner: String,
    pub set_winner: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            match_id: "match_id".into(),
            player1: "player1".into(),
            player2: "player2".into(),
            point_server: "PointServer".into(),
            serve_number: "ServeNumber".into(),
            speed_mph: "Speed_MPH".into(),
            serve_width: "ServeWidth".into(),
            serve_depth: "ServeDepth".into(),
            rally_count: "RallyCount".into(),
            point_winner: "PointWinner".into(),
            game_winner: "GameWinner".into(),
            set_winner: "SetWinner".into(),
        }
    }
}

impl ColumnMap {
    /// Overrides one logical column by its field name.
    pub fn set(&mut self, field: &str, header: &str) -> Result<()> {
        let slot = match field {
            "match_id" => &mut self.match_id,
            "player1" => &mut self.player1,
            "player2" => &mut self.player2,
            "point_server" => &mut self.point_server,
            "serve_number" => &mut self.serve_number,
            "speed_mph" => &mut self.speed_mph,
            "serve_width" => &mut self.serve_width,
            "serve_depth" => &mut self.serve_depth,
            "rally_count" => &mut self.rally_count,
            "point_winner" => &mut self.point_winner,
            "game_winner" => &mut self.game_winner,
            "set_winner" => &mut self.set_winner,
            other => return Err(Error::Config(format!("unknown column field `{other}`"))),
        };
        *slot = header.to_string();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// 1-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

/// Parsed records plus the rows that were reported and skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub malformed: Vec<MalformedRow>,
}

fn column_index(
    headers: &csv::StringRecord,
    name: &str,
    path: &Path,
) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).from_reader(rdr)
}

pub fn load_matches(path: &Path, columns: &ColumnMap) -> Result<Loaded<MatchMeta>> {
    load_matches_from(open(path)?, path, columns)
}

pub fn load_matches_from<R: Read>(
    rdr: R,
    path: &Path,
    columns: &ColumnMap,
) -> Result<Loaded<MatchMeta>> {
    let mut rdr = reader(rdr);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, &columns.match_id, path)?;
    let p1_col = column_index(&headers, &columns.player1, path)?;
    let p2_col = column_index(&headers, &columns.player2, path)?;

    let mut out = Loaded {
        records: Vec::new(),
        malformed: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.malformed.push(MalformedRow {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let (id, p1, p2) = (field(id_col), field(p1_col), field(p2_col));
        let reason = if id.is_empty() {
            Some("empty match id".to_string())
        } else if p1.is_empty() || p2.is_empty() {
            Some("missing player name".to_string())
        } else if p1 == p2 {
            Some("player1 equals player2".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            out.malformed.push(MalformedRow { row, reason });
            continue;
        }
        match parse_match_id(id) {
            Some((year, tournament, gender, match_num)) if SEASONS.contains(&year) => {
                out.records.push(MatchMeta {
                    match_id: id.to_string(),
                    year,
                    tournament,
                    gender,
                    match_num,
                    player1: p1.to_string(),
                    player2: p2.to_string(),
                });
            }
            Some((year, ..)) => out.malformed.push(MalformedRow {
                row,
                reason: format!("season {year} outside the pooled seasons"),
            }),
            None => out.malformed.push(MalformedRow {
                row,
                reason: format!("unrecognised match id `{id}`"),
            }),
        }
    }
    Ok(out)
}

pub fn load_points(path: &Path, columns: &ColumnMap) -> Result<Vec<RawPoint>> {
    load_points_from(open(path)?, path, columns)
}

pub fn load_points_from<R: Read>(rdr: R, path: &Path, columns: &ColumnMap) -> Result<Vec<RawPoint>> {
    let mut rdr = reader(rdr);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| column_index(&headers, name, path);
    let id_col = col(&columns.match_id)?;
    let server_col = col(&columns.point_server)?;
    let serve_col = col(&columns.serve_number)?;
    let speed_col = col(&columns.speed_mph)?;
    let width_col = col(&columns.serve_width)?;
    let depth_col = col(&columns.serve_depth)?;
    let rally_col = col(&columns.rally_count)?;
    let winner_col = col(&columns.point_winner)?;
    // Only needed for match results; absent in some exports.
    let game_col = col(&columns.game_winner).ok();
    let set_col = col(&columns.set_winner).ok();

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let int = |c: usize| parse_int(field(c));
        let slot = |c: usize| int(c).and_then(|v| u8::try_from(v).ok());
        out.push(RawPoint {
            match_id: field(id_col).to_string(),
            point_server: slot(server_col),
            serve_number: int(serve_col),
            speed_mph: field(speed_col).parse::<f64>().ok().filter(|v| v.is_finite()),
            serve_width: field(width_col).to_string(),
            serve_depth: field(depth_col).to_string(),
            rally_count: int(rally_col),
            point_winner: slot(winner_col),
            game_winner: game_col.and_then(slot),
            set_winner: set_col.and_then(slot),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Integers sometimes arrive as `2.0` in the public files.
fn parse_int(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    (f.is_finite() && f.fract() == 0.0).then_some(f as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    MissingLocation,
    InvalidServeNumber,
    ZeroSpeed,
    MissingRallyCount,
    InvalidServerOrWinner,
}

impl DropReason {
    pub const ALL: [DropReason; 5] = [
        DropReason::MissingLocation,
        DropReason::InvalidServeNumber,
        DropReason::ZeroSpeed,
        DropReason::MissingRallyCount,
        DropReason::InvalidServerOrWinner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::MissingLocation => "missing location",
            DropReason::InvalidServeNumber => "invalid serve number",
            DropReason::ZeroSpeed => "zero speed",
            DropReason::MissingRallyCount => "missing rally count",
            DropReason::InvalidServerOrWinner => "invalid server or winner",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_rows: usize,
    pub kept: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
}

impl CleaningReport {
    pub fn dropped(&self, reason: DropReason) -> usize {
        self.dropped_by_reason.get(reason.as_str()).copied().unwrap_or(0)
    }
}

/// Applies the first failing rule, in the order the rules are listed in
/// [`DropReason::ALL`].
pub fn clean_point(raw: &RawPoint, meta: &MatchMeta) -> std::result::Result<PointRecord, DropReason> {
    let location = LocationBin::parse(&raw.serve_width, &raw.serve_depth)
        .ok_or(DropReason::MissingLocation)?;
    let serve_type = match raw.serve_number {
        Some(1) => 1,
        Some(2) => 2,
        _ => return Err(DropReason::InvalidServeNumber),
    };
    let speed_mph = raw
        .speed_mph
        .filter(|s| *s > 0.0)
        .ok_or(DropReason::ZeroSpeed)?;
    let rally_count = raw
        .rally_count
        .filter(|r| *r >= 1)
        .and_then(|r| u32::try_from(r).ok())
        .ok_or(DropReason::MissingRallyCount)?;
    let (server, returner) = match raw.point_server {
        Some(1) => (&meta.player1, &meta.player2),
        Some(2) => (&meta.player2, &meta.player1),
        _ => return Err(DropReason::InvalidServerOrWinner),
    };
    let server_won = match raw.point_winner {
        Some(w @ (1 | 2)) => Some(w) == raw.point_server,
        _ => return Err(DropReason::InvalidServerOrWinner),
    };
    Ok(PointRecord {
        match_id: raw.match_id.clone(),
        server: server.clone(),
        returner: returner.clone(),
        serve_type,
        speed_mph,
        location,
        rally_count,
        server_won,
        efficient: server_won && rally_count <= EFFICIENT_MAX_RALLY,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cleaned {
    pub points: Vec<PointRecord>,
    pub report: CleaningReport,
}

pub fn resolve_and_clean(raw: &[RawPoint], matches: &[MatchMeta]) -> Result<Cleaned> {
    let by_id: HashMap<&str, &MatchMeta> =
        matches.iter().map(|m| (m.match_id.as_str(), m)).collect();
    let mut counts: BTreeMap<DropReason, usize> = BTreeMap::new();
    let mut points = Vec::with_capacity(raw.len());
    for r in raw {
        let meta = by_id
            .get(r.match_id.as_str())
            .ok_or_else(|| Error::UnknownMatchId(r.match_id.clone()))?;
        match clean_point(r, meta) {
            Ok(p) => points.push(p),
            Err(reason) => *counts.entry(reason).or_default() += 1,
        }
    }
    let report = CleaningReport {
        input_rows: raw.len(),
        kept: points.len(),
        dropped_by_reason: DropReason::ALL
            .into_iter()
            .map(|r| (r.as_str().to_string(), counts.get(&r).copied().unwrap_or(0)))
            .collect(),
    };
    Ok(Cleaned { points, report })
}

/// Match outcome used by the rating baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub match_id: String,
    pub winner: String,
    pub loser: String,
    pub games_winner: u32,
    pub games_loser: u32,
    pub date_order: i64,
}

/// Derives winner, loser and games from the game/set-ending markers in the
/// raw point rows. Matches with no recorded games are skipped. Output is
/// sorted by `date_order`.
pub fn derive_match_results(raw: &[RawPoint], matches: &[MatchMeta]) -> Vec<MatchResult> {
    #[derive(Default)]
    struct Tally {
        games: [u32; 2],
        sets: [u32; 2],
    }
    let mut tallies: HashMap<&str, Tally> = HashMap::new();
    for r in raw {
        let t = tallies.entry(r.match_id.as_str()).or_default();
        if let Some(g @ (1 | 2)) = r.game_winner {
            t.games[g as usize - 1] += 1;
        }
        if let Some(s @ (1 | 2)) = r.set_winner {
            t.sets[s as usize - 1] += 1;
        }
    }

    let mut out: Vec<MatchResult> = matches
        .iter()
        .filter_map(|m| {
            let t = tallies.get(m.match_id.as_str())?;
            if t.games[0] + t.games[1] == 0 {
                return None;
            }
            let p1_wins = match t.sets[0].cmp(&t.sets[1]) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => match t.games[0].cmp(&t.games[1]) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => return None,
                },
            };
            let (winner, loser, gw, gl) = if p1_wins {
                (&m.player1, &m.player2, t.games[0], t.games[1])
            } else {
                (&m.player2, &m.player1, t.games[1], t.games[0])
            };
            Some(MatchResult {
                match_id: m.match_id.clone(),
                winner: winner.clone(),
                loser: loser.clone(),
                games_winner: gw,
                games_loser: gl,
                date_order: m.date_order(),
            })
        })
        .collect();
    out.sort_by_key(|r| r.date_order);
    out
}

/// File names used by the public slam point-by-point repository.
pub fn matches_file(data_dir: &Path, year: i32, tournament: Tournament) -> PathBuf {
    data_dir.join(format!("{year}-{}-matches.csv", tournament.code()))
}

pub fn points_file(data_dir: &Path, year: i32, tournament: Tournament) -> PathBuf {
    data_dir.join(format!("{year}-{}-points.csv", tournament.code()))
}
