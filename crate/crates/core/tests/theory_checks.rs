//! Closed-form theory cross-checked against the dispatch solver: capacity
//! shares, the arbitrage threshold, and stability verdicts on a family that
//! crosses the boundary.

mod common;

use approx::assert_abs_diff_eq;
use storgame::dispatch::solve_dispatch;
use storgame::theory::{
    absorb_analysis, capacity_bounds, estimate_c_min, predict_stability, walk_best_response,
    MoveKind, Verdict, WalkEnd,
};

/// Forced absorption, headrooms, and the three share vectors on a market
/// small enough to verify by hand.
#[test]
fn capacity_bounds_follow_the_share_arithmetic() {
    // Net [30, -10, 20, 60], floor 5: absorb max(0, 5 - net) = 15 MWh in
    // step 1 only. Headrooms 12 and 9.
    let mut market = common::boundary_family_market(0);
    market.firms[0].e_max = 12.0;
    market.firms[1].e_max = 9.0;

    let absorb = absorb_analysis(&market);
    assert_abs_diff_eq!(absorb.e_absorb, 15.0, epsilon = 1e-12);
    assert_eq!(absorb.members, vec![false, true, false, false]);
    assert_eq!(absorb.transitions, 2);

    let bounds = capacity_bounds(&market);
    assert_eq!(bounds.headroom, vec![12.0, 9.0]);
    // Cheaper bidder takes min(15, headroom); the loser keeps the rest.
    assert_eq!(bounds.e_max_share, vec![12.0, 9.0]);
    assert_eq!(bounds.e_min_share, vec![6.0, 3.0]);
    // Tie: as even as the headrooms allow.
    assert_eq!(bounds.e_split_share, Some(vec![7.5, 7.5]));
    // Loss bid: cap * e_min / e_max.
    let loss = bounds.loss_bid;
    assert_abs_diff_eq!(loss[0].unwrap(), 100.0 * 6.0 / 12.0, epsilon = 1e-12);
    assert_abs_diff_eq!(loss[1].unwrap(), 100.0 * 3.0 / 9.0, epsilon = 1e-12);
}

/// When the bid step already exceeds the arbitrage ceiling the threshold
/// sits at the grid floor; energy beyond the forced absorption is zero at
/// every bid on the grid.
#[test]
fn coarse_grids_put_the_threshold_at_the_floor() {
    let market = common::boundary_family_market(10);
    let c_min = estimate_c_min(&market).unwrap();
    assert_eq!(c_min.index, 1);
    assert!(c_min.analytic_bound < market.bid_grid.delta_bid);
}

/// On a fine grid the threshold is interior: charging exceeds the forced
/// absorption below it and matches the forced absorption at and above it.
#[test]
fn threshold_separates_arbitrage_from_balance() {
    let mut market = common::boundary_family_market(10);
    market.bid_grid = storgame::model::BidGrid::new(0.25, 25.0).unwrap();
    for f in &mut market.firms {
        f.bid = 25.0;
    }
    let c_min = estimate_c_min(&market).unwrap();
    assert!(c_min.index > 1, "span 70 at a 0.02 slope needs ~1.4 $/MWh");
    let forced = absorb_analysis(&market).e_absorb;

    let charged_at = |idx: u32| {
        let bids = vec![idx; 2];
        let sol = solve_dispatch(&market.with_bid_indices(&bids)).unwrap();
        sol.charged_energy(0) + sol.charged_energy(1)
    };
    assert!(charged_at(c_min.index - 1) > forced + 1e-6);
    assert_abs_diff_eq!(charged_at(c_min.index), forced, epsilon = 1e-6);
}

/// With bids at or above the threshold, the dispatcher charges exactly the
/// forced profile step by step, and splits totals by bid order exactly as
/// the share bounds predict.
#[test]
fn solved_shares_match_the_bounds_at_balance_bids() {
    let mut rng = common::rng(31);
    let mut checked = 0;
    while checked < 6 {
        let market = common::day_random_market(&mut rng, 2);
        if market.m() != 2 {
            continue;
        }
        let Ok(c_min) = estimate_c_min(&market) else { continue };
        let levels = market.bid_grid.levels();
        if c_min.index + 1 >= levels {
            continue;
        }
        let bounds = capacity_bounds(&market);

        // Distinct bids: the lower bidder takes its max share.
        let lo = c_min.index;
        let hi = levels;
        let sol = solve_dispatch(&market.with_bid_indices(&[lo, hi])).unwrap();
        for k in 0..market.k() {
            let fleet = sol.charge_power[0][k] + sol.charge_power[1][k];
            assert_abs_diff_eq!(fleet, market.forced(k).max(0.0), epsilon = 1e-6);
        }
        assert_abs_diff_eq!(sol.charged_energy(0), bounds.e_max_share[0], epsilon = 1e-6);
        assert_abs_diff_eq!(sol.charged_energy(1), bounds.e_min_share[1], epsilon = 1e-6);

        // Tied bids: the even split.
        let sol = solve_dispatch(&market.with_bid_indices(&[hi, hi])).unwrap();
        let split = bounds.e_split_share.as_ref().unwrap();
        assert_abs_diff_eq!(sol.charged_energy(0), split[0], epsilon = 1e-6);
        assert_abs_diff_eq!(sol.charged_energy(1), split[1], epsilon = 1e-6);
        checked += 1;
    }
}

/// Small fleets leave the losing bidder a floor share worth defending at
/// the cap; big fleets drive it to zero and the war dies at the grid floor.
#[test]
fn verdict_flips_across_the_capacity_boundary() {
    let tight = common::boundary_family_market(2); // capacity multiple ~1.19
    let report = predict_stability(&tight).unwrap();
    assert_eq!(report.verdict, Verdict::Unstable, "reasons: {:?}", report.reasons);
    assert!(report.assumption_checks.iter().all(|c| c.passed));

    let roomy = common::boundary_family_market(30); // capacity multiple ~2.51
    let report = predict_stability(&roomy).unwrap();
    assert_eq!(report.verdict, Verdict::Stable, "reasons: {:?}", report.reasons);
    assert!(report.assumption_checks.iter().all(|c| c.passed));
}

/// The walk's cycle alternates one-step undercuts with retreats to the cap:
/// each move either shaves the rival's bid by one grid step or snaps back
/// to the cap, never anything else.
#[test]
fn unstable_walks_descend_and_snap_back() {
    let market = common::boundary_family_market(2);
    let bounds = capacity_bounds(&market);
    let c_min = estimate_c_min(&market).unwrap();
    let levels = market.bid_grid.levels();
    let walk = walk_best_response(&bounds, &market.bid_grid, c_min.index, (levels, levels));
    let WalkEnd::Cycle { first_seen, .. } = walk.end else {
        panic!("expected a cycle, got {:?}", walk.end);
    };

    let mut state = [levels, levels];
    let (mut undercuts, mut retreats) = (0, 0);
    for (i, mv) in walk.moves.iter().enumerate() {
        let rival = state[1 - mv.mover];
        assert_eq!(state[mv.mover], mv.from, "trace out of order at move {i}");
        match mv.kind {
            MoveKind::Stay => assert_eq!(mv.to, mv.from),
            MoveKind::Undercut => assert_eq!(mv.to + 1, rival, "undercut is one step"),
            MoveKind::Tie => assert_eq!(mv.to, rival),
            MoveKind::Retreat => assert_eq!(mv.to, levels, "retreat goes to the cap"),
        }
        if i >= first_seen {
            match mv.kind {
                MoveKind::Undercut => undercuts += 1,
                MoveKind::Retreat => retreats += 1,
                MoveKind::Stay => {}
                MoveKind::Tie => panic!("tie inside the cycle window: {mv:?}"),
            }
        }
        state[mv.mover] = mv.to;
    }
    assert!(undercuts > 0 && retreats > 0, "cycle must both descend and snap back");
}
