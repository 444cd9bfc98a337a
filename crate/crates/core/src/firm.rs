//! Firm-level economics: profit from a dispatch, a caching dispatch oracle
//! keyed by bid indices, enumeration best response over the bid grid, and a
//! closed-form response that refuses unless its preconditions hold.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{solve_dispatch, DispatchError, DispatchSolution};
use crate::model::MarketInstance;
use crate::scalar::Scalar;
use crate::theory::{CMinEstimate, CapacityBounds};
use crate::profit_improves;

/// A firm's profit is its bid times the energy it was paid to charge; the
/// model carries no operating cost on the storage side.
pub fn firm_profit<S: Scalar>(bid: S, sol: &DispatchSolution<S>, firm: usize) -> S {
    bid * sol.charged_energy(firm)
}

pub type SharedDispatch<S> = Arc<Result<DispatchSolution<S>, DispatchError>>;

/// Memoizing dispatch solver shared across a game: one QP solve per distinct
/// bid-index vector, so a full best-response run costs at most levels^M
/// distinct solves regardless of how many moves it takes.
pub struct DispatchOracle<'a, S> {
    base: &'a MarketInstance<S>,
    cache: Mutex<HashMap<Vec<u32>, SharedDispatch<S>>>,
    solves: AtomicUsize,
}

impl<'a, S: Scalar> DispatchOracle<'a, S> {
    pub fn new(base: &'a MarketInstance<S>) -> Self {
        Self { base, cache: Mutex::new(HashMap::new()), solves: AtomicUsize::new(0) }
    }

    pub fn market(&self) -> &MarketInstance<S> {
        self.base
    }

    /// Dispatch at the given bid indices, cached. Concurrent misses on the
    /// same key may both solve; the result is identical either way and only
    /// one survives in the cache.
    pub fn solve(&self, bids: &[u32]) -> SharedDispatch<S> {
        debug_assert_eq!(bids.len(), self.base.m());
        if let Some(hit) = self.cache.lock().unwrap().get(bids) {
            return Arc::clone(hit);
        }
        let trial = self.base.with_bid_indices(bids);
        let result = Arc::new(solve_dispatch(&trial));
        self.solves.fetch_add(1, Ordering::Relaxed);
        let mut cache = self.cache.lock().unwrap();
        Arc::clone(cache.entry(bids.to_vec()).or_insert(result))
    }

    /// Number of QP solves performed (diagnostic; may exceed the cache size
    /// under concurrent misses).
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Number of distinct bid vectors solved.
    pub fn cached_count(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// One evaluated bid level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfitPoint<S> {
    pub index: u32,
    pub bid: S,
    pub charged_mwh: S,
    pub profit: S,
}

/// Result of enumerating every bid level for one firm with the others held
/// fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestResponse<S> {
    pub firm: usize,
    pub best_index: u32,
    pub best_profit: S,
    /// Profit curve over the grid, ascending by index.
    pub curve: Vec<ProfitPoint<S>>,
    /// Bid levels whose dispatch failed, with the failure text.
    pub skipped: Vec<(u32, String)>,
}

/// Enumerate all bid levels for `firm`, holding the other bids at `current`.
/// Candidates solve in parallel through the oracle; the argmax scan is
/// sequential and ascending, so profit ties resolve to the lowest bid no
/// matter how many worker threads ran.
pub fn best_response_enumerate<S: Scalar>(
    oracle: &DispatchOracle<'_, S>,
    current: &[u32],
    firm: usize,
) -> Result<BestResponse<S>, DispatchError> {
    let grid = oracle.market().bid_grid;
    let levels = grid.levels();
    let evaluated: Vec<(u32, SharedDispatch<S>)> = (1..=levels)
        .into_par_iter()
        .map(|idx| {
            let mut bids = current.to_vec();
            bids[firm] = idx;
            (idx, oracle.solve(&bids))
        })
        .collect();

    let mut curve = Vec::with_capacity(levels as usize);
    let mut skipped = Vec::new();
    for (idx, shared) in &evaluated {
        match shared.as_ref() {
            Ok(sol) => {
                let bid = grid.bid(*idx);
                let charged = sol.charged_energy(firm);
                curve.push(ProfitPoint { index: *idx, bid, charged_mwh: charged, profit: bid * charged });
            }
            Err(e) => skipped.push((*idx, e.to_string())),
        }
    }
    if curve.is_empty() {
        let (_, shared) = &evaluated[0];
        return Err(match shared.as_ref() {
            Err(DispatchError::Infeasible(d)) => DispatchError::Infeasible(d.clone()),
            Err(DispatchError::TooLarge { firm_steps, cap }) => {
                DispatchError::TooLarge { firm_steps: *firm_steps, cap: *cap }
            }
            Err(DispatchError::Numerical { worst, iterations }) => {
                DispatchError::Numerical { worst: *worst, iterations: *iterations }
            }
            Ok(_) => unreachable!("empty curve with a successful solve"),
        });
    }

    let mut best = curve[0];
    for p in &curve[1..] {
        if profit_improves(p.profit, best.profit) {
            best = *p;
        }
    }
    Ok(BestResponse { firm, best_index: best.index, best_profit: best.profit, curve, skipped })
}

#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("closed-form response preconditions not met: {0:?}")]
    PreconditionsNotMet(Vec<String>),
}

/// Closed-form best response chosen by the oracle-free rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormResponse<S> {
    pub index: u32,
    pub profit: S,
}

/// Closed-form duopoly best response: undercut the opponent by one grid step
/// when the contested volume is worth more than retreating to the price cap,
/// retreat otherwise.
///
/// Refuses with the full list of failed preconditions unless the closed
/// forms provably coincide with enumeration: two firms, both able to capture
/// volume, the arbitrage threshold strictly below both loss bids, room to
/// undercut above the threshold, an opponent below the cap, the tie option
/// dominated, and no sub-threshold bid that could out-earn the choice.
pub fn best_response_closed_form<S: Scalar>(
    market: &MarketInstance<S>,
    bounds: &CapacityBounds<S>,
    c_min: &CMinEstimate<S>,
    firm: usize,
    other_idx: u32,
) -> Result<ClosedFormResponse<S>, ClosedFormError> {
    let grid = market.bid_grid;
    let levels = grid.levels();
    let mut failed = Vec::new();
    if market.m() != 2 {
        failed.push(format!("needs a duopoly, market has {} firms", market.m()));
        return Err(ClosedFormError::PreconditionsNotMet(failed));
    }
    let e_max = bounds.e_max_share[firm];
    let e_min = bounds.e_min_share[firm];
    let e_split = bounds.e_split_share.as_ref().expect("duopoly bounds")[firm];
    if !(e_max > S::zero()) || !(bounds.e_max_share[1 - firm] > S::zero()) {
        failed.push("a firm can capture no volume".to_string());
    }
    for i in 0..2 {
        match bounds.loss_bid[i] {
            Some(l) if c_min.bid < l => {}
            _ => failed.push(format!("arbitrage threshold not below firm {i}'s loss bid")),
        }
    }
    if other_idx >= levels {
        failed.push("opponent already at the price cap".to_string());
    }
    if c_min.index + 1 > other_idx {
        failed.push("no room to undercut above the arbitrage threshold".to_string());
    }
    if !failed.is_empty() {
        return Err(ClosedFormError::PreconditionsNotMet(failed));
    }

    let undercut_profit = grid.bid(other_idx - 1) * e_max;
    let retreat_profit = grid.bid(levels) * e_min;
    let tie_profit = grid.bid(other_idx) * e_split;

    let (index, profit) = if profit_improves(retreat_profit, undercut_profit) {
        // Retreating wins only if the tie cannot match it; enumeration would
        // take the lower tied bid.
        if profit_improves(retreat_profit, tie_profit) {
            (levels, retreat_profit)
        } else {
            failed.push("tie at the opponent's bid matches retreating".to_string());
            return Err(ClosedFormError::PreconditionsNotMet(failed));
        }
    } else {
        if profit_improves(tie_profit, undercut_profit) {
            failed.push("tie at the opponent's bid beats undercutting".to_string());
            return Err(ClosedFormError::PreconditionsNotMet(failed));
        }
        (other_idx - 1, undercut_profit)
    };

    if c_min.index > 1 {
        let dive_bound = grid.bid(c_min.index - 1) * bounds.headroom[firm];
        if profit_improves(dive_bound, profit) {
            failed.push(format!(
                "a bid below the arbitrage threshold could earn up to {dive_bound} against {profit}"
            ));
            return Err(ClosedFormError::PreconditionsNotMet(failed));
        }
    }
    Ok(ClosedFormResponse { index, profit })
}
