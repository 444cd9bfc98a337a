//! Round-robin best-response dynamics over the bid grid.
//!
//! Firms move in index order, each replacing its bid with the enumeration
//! best response against the others' current bids. The run ends at an
//! equilibrium (a full round of unchanged bids), a cycle (a repeated
//! (bids, next mover) state), or a move cap.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatchError;
use crate::firm::{best_response_enumerate, firm_profit, DispatchOracle};
use crate::model::MarketInstance;
use crate::profit_improves;
use crate::scalar::Scalar;

/// One best-response turn; `from == to` when the mover kept its bid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameMove<S> {
    pub mover: usize,
    pub from: u32,
    pub to: u32,
    pub profit: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GameEnd {
    /// Every firm kept its bid for a full round.
    Equilibrium,
    /// The (bids, next mover) state at move `first_seen` recurred; the cycle
    /// spans `period` moves.
    Cycle { first_seen: usize, period: usize },
    /// Move cap reached without equilibrium or recurrence.
    MoveCap,
}

/// A strictly improving unilateral deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation<S> {
    pub firm: usize,
    pub to: u32,
    pub gain: S,
}

/// Equilibrium audit at a bid vector: per-firm profits and any improving
/// deviations found by full enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashCheck<S> {
    pub bids: Vec<u32>,
    pub profits: Vec<S>,
    pub deviations: Vec<Deviation<S>>,
    pub is_nash: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameOutcome<S> {
    pub moves: Vec<GameMove<S>>,
    pub end: GameEnd,
    pub final_bids: Vec<u32>,
    /// Distinct bid vectors dispatched over the whole run.
    pub distinct_solves: usize,
    /// Present when the run ended in equilibrium.
    pub certificate: Option<NashCheck<S>>,
}

/// Default move cap: four sweeps of the grid per firm.
pub fn default_move_cap<S: Scalar>(market: &MarketInstance<S>) -> usize {
    4 * market.bid_grid.levels() as usize * market.m()
}

/// Verify whether `bids` is a Nash equilibrium by full enumeration for each
/// firm. Deviations must clear the shared relative profit tolerance, so
/// solver noise on a genuine equilibrium does not fail the check.
pub fn certify_nash<S: Scalar>(
    oracle: &DispatchOracle<'_, S>,
    bids: &[u32],
) -> Result<NashCheck<S>, DispatchError> {
    let market = oracle.market();
    let grid = market.bid_grid;
    let at = oracle.solve(bids);
    let sol = match at.as_ref() {
        Ok(s) => s,
        Err(_) => {
            return Err(DispatchError::Numerical { worst: f64::INFINITY, iterations: 0 });
        }
    };
    let profits: Vec<S> =
        (0..market.m()).map(|m| firm_profit(grid.bid(bids[m]), sol, m)).collect();
    let mut deviations = Vec::new();
    for m in 0..market.m() {
        let br = best_response_enumerate(oracle, bids, m)?;
        if profit_improves(br.best_profit, profits[m]) {
            deviations.push(Deviation { firm: m, to: br.best_index, gain: br.best_profit - profits[m] });
        }
    }
    Ok(NashCheck { bids: bids.to_vec(), profits, is_nash: deviations.is_empty(), deviations })
}

/// Run the dynamics from `start` (grid indices, one per firm) with a fresh
/// oracle. `max_moves` defaults to [`default_move_cap`].
pub fn run_best_response<S: Scalar>(
    market: &MarketInstance<S>,
    start: &[u32],
    max_moves: Option<usize>,
) -> Result<GameOutcome<S>, DispatchError> {
    let oracle = DispatchOracle::new(market);
    run_best_response_with(&oracle, start, max_moves)
}

/// Same as [`run_best_response`] but sharing a caller-provided oracle, so
/// repeated runs on one instance reuse dispatch solves.
pub fn run_best_response_with<S: Scalar>(
    oracle: &DispatchOracle<'_, S>,
    start: &[u32],
    max_moves: Option<usize>,
) -> Result<GameOutcome<S>, DispatchError> {
    let market = oracle.market();
    let m = market.m();
    let levels = market.bid_grid.levels();
    assert_eq!(start.len(), m, "one starting bid index per firm");
    assert!(
        start.iter().all(|&b| (1..=levels).contains(&b)),
        "starting bid indices must lie on the grid"
    );
    let cap = max_moves.unwrap_or_else(|| default_move_cap(market));

    let mut state = start.to_vec();
    let mut mover = 0usize;
    let mut moves: Vec<GameMove<S>> = Vec::new();
    let mut seen: HashMap<(Vec<u32>, usize), usize> = HashMap::new();
    let mut stays = 0usize;
    let mut end = GameEnd::MoveCap;

    while moves.len() < cap {
        if let Some(&first) = seen.get(&(state.clone(), mover)) {
            end = GameEnd::Cycle { first_seen: first, period: moves.len() - first };
            break;
        }
        seen.insert((state.clone(), mover), moves.len());

        let br = best_response_enumerate(oracle, &state, mover)?;
        let from = state[mover];
        moves.push(GameMove { mover, from, to: br.best_index, profit: br.best_profit });
        state[mover] = br.best_index;

        if br.best_index == from {
            stays += 1;
            if stays == m {
                end = GameEnd::Equilibrium;
                break;
            }
        } else {
            stays = 0;
        }
        mover = (mover + 1) % m;
    }

    let certificate = if end == GameEnd::Equilibrium {
        Some(certify_nash(oracle, &state)?)
    } else {
        None
    };

    Ok(GameOutcome {
        moves,
        end,
        final_bids: state,
        distinct_solves: oracle.cached_count(),
        certificate,
    })
}

/// Replay a recorded trace and report the first repeated (bids, next mover)
/// state, if any, as (first_seen, period). Matches the online detection in
/// [`run_best_response`].
pub fn detect_cycle<S>(start: &[u32], firms: usize, moves: &[GameMove<S>]) -> Option<(usize, usize)> {
    let mut state = start.to_vec();
    let mut seen: HashMap<(Vec<u32>, usize), usize> = HashMap::new();
    for (t, mv) in moves.iter().enumerate() {
        let mover = t % firms;
        debug_assert_eq!(mv.mover, mover, "trace mover order");
        if let Some(&first) = seen.get(&(state.clone(), mover)) {
            return Some((first, t - first));
        }
        seen.insert((state.clone(), mover), t);
        state[mv.mover] = mv.to;
    }
    let final_mover = moves.len() % firms;
    seen.get(&(state, final_mover)).map(|&first| (first, moves.len() - first))
}
