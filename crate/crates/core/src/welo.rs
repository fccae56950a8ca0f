//! Weighted Elo: the standard logistic Elo update scaled by the winner's
//! share of games, with a K-factor that decays in matches played.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::ingest::MatchResult;

pub const INITIAL_RATING: f64 = 1500.0;

/// Probability that a player rated `r_a` beats one rated `r_b`.
pub fn expected_score(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

/// Winner's games share, clamped to [0.5, 1].
pub fn match_weight(result: &MatchResult) -> f64 {
    let total = result.games_winner + result.games_loser;
    if total == 0 {
        return 1.0;
    }
    (result.games_winner as f64 / total as f64).clamp(0.5, 1.0)
}

/// `250 / (matches + 5)^0.4`.
pub fn k_factor(match_count: u32) -> f64 {
    250.0 / (match_count as f64 + 5.0).powf(0.4)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeloState {
    ratings: HashMap<String, f64>,
    match_counts: HashMap<String, u32>,
    last_order: Option<i64>,
}

impl WeloState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rating(&self, player: &str) -> f64 {
        self.ratings.get(player).copied().unwrap_or(INITIAL_RATING)
    }

    pub fn matches_played(&self, player: &str) -> u32 {
        self.match_counts.get(player).copied().unwrap_or(0)
    }

    /// Applies one result. Results must arrive in strictly increasing
    /// `date_order`.
    pub fn update(&mut self, result: &MatchResult) -> Result<()> {
        if let Some(prev) = self.last_order {
            if result.date_order <= prev {
                return Err(Error::OutOfOrder {
                    previous: prev,
                    got: result.date_order,
                });
            }
        }
        if result.winner == result.loser {
            return Err(Error::Invalid(format!("{} plays themselves", result.winner)));
        }
        let (rw, rl) = (self.rating(&result.winner), self.rating(&result.loser));
        let kw = k_factor(self.matches_played(&result.winner));
        let kl = k_factor(self.matches_played(&result.loser));
        let w = match_weight(result);
        let ew = expected_score(rw, rl);
        let el = 1.0 - ew;

        self.ratings.insert(result.winner.clone(), rw + kw * w * (1.0 - ew));
        self.ratings.insert(result.loser.clone(), rl - kl * w * el);
        *self.match_counts.entry(result.winner.clone()).or_default() += 1;
        *self.match_counts.entry(result.loser.clone()).or_default() += 1;
        self.last_order = Some(result.date_order);
        Ok(())
    }

    /// Sorted (player, rating, matches) rows.
    pub fn table(&self) -> Vec<RatingRow> {
        let sorted: BTreeMap<&String, &f64> = self.ratings.iter().collect();
        sorted
            .into_iter()
            .map(|(p, r)| RatingRow {
                player: p.clone(),
                rating: *r,
                matches_played: self.matches_played(p),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub player: String,
    pub rating: f64,
    pub matches_played: u32,
}

/// Folds every result with `date_order <= cutoff`. Results must be sorted.
pub fn ratings_at_cutoff(results: &[MatchResult], cutoff: i64) -> Result<WeloState> {
    let mut state = WeloState::new();
    for r in results.iter().take_while(|r| r.date_order <= cutoff) {
        state.update(r)?;
    }
    Ok(state)
}
