//! Seeded synthetic data: point-level designs drawn from the crossed
//! random-intercept model with known parameters, and complete slam
//! point-by-point files for exercising the pipeline end to end.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::glmm::DesignMatrix;
use crate::ingest::{matches_file, points_file, LocationBin, Tournament};
use crate::math::logistic;

/// Parameters of a simulated design. `beta` follows the column order
/// `(Intercept), avg_speed_z, sd_speed_z, loc_a, loc_b, loc_entropy_z`,
/// where `loc_a`/`loc_b` are indicators of two non-reference modal bins.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmSim {
    pub servers: usize,
    pub returners: usize,
    /// Points per server are drawn uniformly from this inclusive range.
    pub points_per_server: (usize, usize),
    pub beta: [f64; 6],
    pub sigma: f64,
    pub tau: f64,
    /// Probabilities of the reference, `loc_a` and `loc_b` modal bins.
    pub loc_probs: [f64; 3],
}

impl Default for GlmmSim {
    fn default() -> Self {
        Self {
            servers: 200,
            returners: 150,
            points_per_server: (80, 120),
            beta: [-0.3, 0.25, 0.10, 0.15, -0.10, -0.05],
            sigma: 0.3,
            tau: 0.2,
            loc_probs: [0.5, 0.25, 0.25],
        }
    }
}

pub const SIM_COLUMNS: [&str; 6] = [
    "(Intercept)",
    "avg_speed_z",
    "sd_speed_z",
    "modal_loc[W,CTL]",
    "modal_loc[B,CTL]",
    "loc_entropy_z",
];

#[derive(Debug, Clone)]
pub struct SimulatedDesign {
    pub design: DesignMatrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Draws server covariates, random intercepts and Bernoulli outcomes.
pub fn simulate_glmm(sim: &GlmmSim, seed: u64) -> Result<SimulatedDesign> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let (lo, hi) = sim.points_per_server;
    if sim.servers == 0 || lo == 0 || hi < lo {
        return Err(Error::Invalid("simulation needs servers and a valid points range".into()));
    }

    let rows: Vec<[f64; 6]> = (0..sim.servers)
        .map(|_| {
            let r: f64 = rng.gen();
            let (a, b) = if r < sim.loc_probs[0] {
                (0.0, 0.0)
            } else if r < sim.loc_probs[0] + sim.loc_probs[1] {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            [1.0, std.sample(&mut rng), std.sample(&mut rng), a, b, std.sample(&mut rng)]
        })
        .collect();
    let u: Vec<f64> = (0..sim.servers).map(|_| sim.sigma * std.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..sim.returners).map(|_| sim.tau * std.sample(&mut rng)).collect();

    let mut y = Vec::new();
    let mut server_index = Vec::new();
    let mut returner_index = Vec::new();
    for (j, row) in rows.iter().enumerate() {
        let fixed: f64 = row.iter().zip(&sim.beta).map(|(x, b)| x * b).sum();
        for _ in 0..rng.gen_range(lo..=hi) {
            let mut eta = fixed + u[j];
            if sim.returners > 0 {
                let k = rng.gen_range(0..sim.returners);
                eta += v[k];
                returner_index.push(k);
            }
            y.push(rng.gen::<f64>() < logistic(eta));
            server_index.push(j);
        }
    }
    let x = DMatrix::from_fn(y.len(), 6, |i, c| rows[server_index[i]][c]);
    let design = DesignMatrix::new(
        y,
        x,
        server_index,
        returner_index,
        (0..sim.servers).map(|j| format!("S{j:03}")).collect(),
        (0..sim.returners).map(|k| format!("R{k:03}")).collect(),
        SIM_COLUMNS.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok(SimulatedDesign { design, u, v })
}

/// Settings for synthetic slam files covering both draws of a tournament.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamSim {
    pub years: Vec<i32>,
    pub players_per_draw: usize,
    pub matches_per_year: usize,
    /// Share of point rows corrupted in a way the cleaning rules drop.
    pub noise: f64,
}

impl Default for SlamSim {
    fn default() -> Self {
        Self {
            years: vec![2018, 2019],
            players_per_draw: 24,
            matches_per_year: 40,
            noise: 0.02,
        }
    }
}

struct Player {
    name: String,
    skill: f64,
    ret: f64,
    speed: f64,
    speed_sd: f64,
    /// Cumulative placement distribution over the ten bins.
    placement: Vec<f64>,
}

fn make_players(rng: &mut ChaCha8Rng, prefix: &str, n: usize, base_speed: f64) -> Vec<Player> {
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|i| {
            let skill = 0.45 * std.sample(rng);
            let w: Vec<f64> = (0..LocationBin::COUNT).map(|_| (1.2 * std.sample(rng)).exp()).collect();
            let total: f64 = w.iter().sum();
            let placement = w
                .iter()
                .scan(0.0, |acc, x| {
                    *acc += x / total;
                    Some(*acc)
                })
                .collect();
            Player {
                name: format!("{prefix} Player {i:02}"),
                skill,
                ret: 0.25 * std.sample(rng),
                speed: base_speed + 6.0 * skill + 3.0 * std.sample(rng),
                speed_sd: 3.0 + 4.0 * rng.gen::<f64>(),
                placement,
            }
        })
        .collect()
}

struct PointOut {
    server_slot: u8,
    serve_number: u8,
    speed: f64,
    bin: LocationBin,
    rally: u32,
    winner_slot: u8,
    game_winner: u8,
    set_winner: u8,
}

fn play_point(rng: &mut ChaCha8Rng, server: &Player, returner: &Player, server_slot: u8) -> PointOut {
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let serve_number = if rng.gen::<f64>() < 0.62 { 1 } else { 2 };
    let drop = if serve_number == 1 { 0.0 } else { 18.0 };
    let speed = (server.speed - drop + server.speed_sd * std.sample(rng)).max(60.0);
    let r: f64 = rng.gen();
    let bin_i = server.placement.iter().position(|c| r <= *c).unwrap_or(LocationBin::COUNT - 1);
    let bin = crate::features::bin_from_index(bin_i);
    let base = if serve_number == 1 { -0.2 } else { -0.9 };
    let efficient = rng.gen::<f64>() < logistic(base + server.skill - returner.ret);
    let (rally, server_won) = if efficient {
        (rng.gen_range(1..=3), true)
    } else {
        let rally = rng.gen_range(2..=14);
        // Short non-efficient rallies are points the server lost.
        (rally, rally > 3 && rng.gen::<f64>() < 0.5 + 0.1 * server.skill)
    };
    PointOut {
        server_slot,
        serve_number,
        speed: (speed * 10.0).round() / 10.0,
        bin,
        rally,
        winner_slot: if server_won { server_slot } else { 3 - server_slot },
        game_winner: 0,
        set_winner: 0,
    }
}

/// Best-of-three match with standard game and set scoring (7-6 by a single
/// deciding game at 6-6).
fn play_match(rng: &mut ChaCha8Rng, p1: &Player, p2: &Player) -> Vec<PointOut> {
    let mut out = Vec::new();
    let mut sets = [0u32; 2];
    let mut server_slot = 1u8;
    while sets[0] < 2 && sets[1] < 2 {
        let mut games = [0u32; 2];
        loop {
            let (srv, ret) = if server_slot == 1 { (p1, p2) } else { (p2, p1) };
            let mut pts = [0u32; 2];
            let game_winner = loop {
                let p = play_point(rng, srv, ret, server_slot);
                pts[p.winner_slot as usize - 1] += 1;
                out.push(p);
                let (a, b) = (pts[0], pts[1]);
                if (a >= 4 || b >= 4) && a.abs_diff(b) >= 2 {
                    break if a > b { 1u8 } else { 2u8 };
                }
            };
            out.last_mut().expect("point played").game_winner = game_winner;
            games[game_winner as usize - 1] += 1;
            server_slot = 3 - server_slot;
            let (a, b) = (games[0], games[1]);
            if (a >= 6 || b >= 6) && (a.abs_diff(b) >= 2 || a + b == 13) {
                let set_winner = if a > b { 1u8 } else { 2u8 };
                out.last_mut().expect("point played").set_winner = set_winner;
                sets[set_winner as usize - 1] += 1;
                break;
            }
        }
    }
    out
}

/// Writes `{year}-{slam}-matches.csv` and `{year}-{slam}-points.csv` for
/// every configured year, men's and women's draws together.
pub fn write_slam_files(dir: &Path, tournament: Tournament, sim: &SlamSim, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = [
        (1000u32, make_players(&mut rng, "M", sim.players_per_draw, 118.0)),
        (2000u32, make_players(&mut rng, "W", sim.players_per_draw, 104.0)),
    ];
    if sim.players_per_draw < 2 {
        return Err(Error::Invalid("need at least two players per draw".into()));
    }
    let corrupt_kinds = ["width", "serve", "speed", "rally", "winner"];

    for &year in &sim.years {
        let mpath = matches_file(dir, year, tournament);
        let ppath = points_file(dir, year, tournament);
        let mut mw = csv::Writer::from_path(&mpath)?;
        let mut pw = csv::Writer::from_path(&ppath)?;
        mw.write_record(["match_id", "year", "slam", "match_num", "player1", "player2"])?;
        pw.write_record([
            "match_id",
            "PointNumber",
            "PointServer",
            "ServeNumber",
            "Speed_MPH",
            "ServeWidth",
            "ServeDepth",
            "RallyCount",
            "PointWinner",
            "GameWinner",
            "SetWinner",
        ])?;
        for (offset, players) in &draws {
            let idx: Vec<usize> = (0..players.len()).collect();
            for m in 0..sim.matches_per_year {
                let pair: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
                let (p1, p2) = (&players[*pair[0]], &players[*pair[1]]);
                let num = offset + 101 + m as u32;
                let id = format!("{year}-{}-{num}", tournament.code());
                mw.write_record([id.as_str(), &year.to_string(), tournament.code(), &num.to_string(), &p1.name, &p2.name])?;
                for (i, p) in play_match(&mut rng, p1, p2).iter().enumerate() {
                    let mut rec = [
                        id.clone(),
                        (i + 1).to_string(),
                        p.server_slot.to_string(),
                        p.serve_number.to_string(),
                        format!("{}", p.speed),
                        p.bin.width.code().to_string(),
                        p.bin.depth.code().to_string(),
                        p.rally.to_string(),
                        p.winner_slot.to_string(),
                        p.game_winner.to_string(),
                        p.set_winner.to_string(),
                    ];
                    if rng.gen::<f64>() < sim.noise {
                        match *corrupt_kinds.choose(&mut rng).expect("non-empty") {
                            "width" => rec[5].clear(),
                            "serve" => rec[3] = "0".into(),
                            "speed" => rec[4] = "0".into(),
                            "rally" => rec[7].clear(),
                            _ => rec[8] = "0".into(),
                        }
                    }
                    pw.write_record(&rec)?;
                }
            }
        }
        mw.flush().map_err(|e| Error::io(&mpath, e))?;
        pw.flush().map_err(|e| Error::io(&ppath, e))?;
    }
    Ok(())
}
