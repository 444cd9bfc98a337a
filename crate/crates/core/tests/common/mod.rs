//! Shared fixtures for the integration suites: seeded instance generators
//! and an exhaustive grid-search dispatcher used as an independent oracle.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storgame::model::{BidGrid, GeneratorModel, MarketInstance, StorageFirm, TimeGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small market (1-2 firms, 2-4 hourly steps) suitable for the
/// exhaustive oracle. Retries until the feasibility screen passes.
pub fn small_random_market(rng: &mut ChaCha8Rng) -> MarketInstance<f64> {
    loop {
        let k = rng.gen_range(2..=4usize);
        let m = rng.gen_range(1..=2usize);
        let grid = TimeGrid::hourly(k).unwrap();
        let mut net: Vec<f64> = (0..k).map(|_| rng.gen_range(20.0..80.0)).collect();
        // One step dips low, sometimes below zero, so absorption shows up.
        let dip = rng.gen_range(0..k);
        net[dip] = rng.gen_range(-30.0..10.0);
        let a = rng.gen_range(0.01..0.05);
        let p_gmin = if rng.gen_bool(0.7) { rng.gen_range(0.0..25.0) } else { 0.0 };
        let bid_grid = BidGrid::new(5.0, 100.0).unwrap();
        let firms: Vec<StorageFirm<f64>> = (0..m)
            .map(|_| {
                let e_max = rng.gen_range(5.0..40.0);
                let e_0 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..e_max / 2.0) };
                let bid = bid_grid.bid(rng.gen_range(1..=bid_grid.levels()));
                StorageFirm::new(e_max, e_0, bid).unwrap()
            })
            .collect();
        let gen = match GeneratorModel::new(a, 0.0, p_gmin) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if let Ok(market) = MarketInstance::new(grid, net, gen, firms, bid_grid) {
            return market;
        }
    }
}

/// Random day-length market (1-3 firms, 24 hourly steps): a lumpy demand
/// curve minus a solar bell, generation floor as a fraction of peak, fleet
/// capacity a multiple of the forced absorption.
pub fn day_random_market(rng: &mut ChaCha8Rng, m_max: usize) -> MarketInstance<f64> {
    loop {
        let k = 24usize;
        let grid = TimeGrid::hourly(k).unwrap();
        let base = rng.gen_range(400.0..700.0);
        let amp_m = rng.gen_range(100.0..400.0);
        let amp_e = rng.gen_range(100.0..400.0);
        let solar_peak = rng.gen_range(200.0..900.0);
        let mut peak: f64 = 0.0;
        let net: Vec<f64> = (0..k)
            .map(|step| {
                let h = step as f64 + 0.5;
                let demand = base
                    + amp_m * (-((h - 8.5) / 2.5).powi(2)).exp()
                    + amp_e * (-((h - 19.5) / 2.3).powi(2)).exp();
                peak = peak.max(demand);
                demand - solar_peak * (-((h - 12.5) / 3.0).powi(2)).exp()
            })
            .collect();
        let flex = rng.gen_range(0.05..0.30);
        let p_gmin = flex * peak;
        let e_absorb: f64 = net.iter().map(|&v| (p_gmin - v).max(0.0)).sum();
        if e_absorb < 1.0 {
            continue;
        }
        let fleet = e_absorb * rng.gen_range(1.05..3.0);
        let m = rng.gen_range(1..=m_max);
        // Random capacity split, no firm below a tenth of the fleet.
        let mut weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total_w: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total_w);
        let bid_grid = BidGrid::new(5.0, 100.0).unwrap();
        let firms: Vec<StorageFirm<f64>> = weights
            .iter()
            .map(|w| {
                let bid = bid_grid.bid(rng.gen_range(1..=bid_grid.levels()));
                StorageFirm::new(w * fleet, 0.0, bid).unwrap()
            })
            .collect();
        let gen = GeneratorModel::new(rng.gen_range(0.01..0.04), 0.0, p_gmin).unwrap();
        if let Ok(market) = MarketInstance::new(grid, net, gen, firms, bid_grid) {
            return market;
        }
    }
}

/// Two-firm family crossing the stability boundary: a fixed 4-step day with
/// 15 MWh of forced absorption, equal capacity split, fleet capacity
/// `1.1 + 0.047 j` times the absorbed energy. The bid step (2) exceeds the
/// arbitrage ceiling `a * (max net - min net) * delta` (1.4), so the
/// undercutting threshold sits at the grid floor for every member.
pub fn boundary_family_market(j: usize) -> MarketInstance<f64> {
    let grid = TimeGrid::hourly(4).unwrap();
    let net = vec![30.0, -10.0, 20.0, 60.0];
    let gen = GeneratorModel::new(0.02, 0.0, 5.0).unwrap();
    let bid_grid = BidGrid::new(2.0, 100.0).unwrap();
    let cap_multiple = 1.1 + 0.047 * j as f64;
    let per_firm = cap_multiple * 15.0 / 2.0;
    let c_max = bid_grid.bid(bid_grid.levels());
    let firms = vec![
        StorageFirm::new(per_firm, 0.0, c_max).unwrap(),
        StorageFirm::new(per_firm, 0.0, c_max).unwrap(),
    ];
    MarketInstance::new(grid, net, gen, firms, bid_grid).unwrap()
}

/// Run `f` on a dedicated rayon pool with `threads` workers.
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("pool")
        .install(f)
}

/// One firm's candidate schedule on the oracle grid.
struct GridProfile {
    powers: Vec<f64>,
    payment: f64,
}

/// Enumerate every grid schedule for one firm that keeps the state of
/// charge in bounds and returns it to the start. Powers live on a symmetric
/// grid of `points` values spanning [-e_max/delta, +e_max/delta].
fn firm_profiles(
    e_max: f64,
    e_0: f64,
    bid: f64,
    delta: f64,
    k: usize,
    points: usize,
) -> Vec<GridProfile> {
    let p_max = e_max / delta;
    let h = 2.0 * p_max / (points - 1) as f64;
    let mid = (points - 1) / 2;
    let mut out = Vec::new();
    // Depth-first walk over the k-step grid with state-of-charge pruning.
    let mut idx = vec![0usize; k];
    let mut depth = 0usize;
    let mut soc = vec![e_0; k + 1];
    loop {
        if depth == k {
            if (soc[k] - e_0).abs() <= 1e-9 {
                let powers: Vec<f64> =
                    idx.iter().map(|&i| (i as f64 - mid as f64) * h).collect();
                let payment: f64 =
                    bid * delta * powers.iter().map(|&p| p.max(0.0)).sum::<f64>();
                out.push(GridProfile { powers, payment });
            }
            depth -= 1;
            idx[depth] += 1;
        }
        loop {
            if idx[depth] >= points {
                if depth == 0 {
                    return out;
                }
                idx[depth] = 0;
                depth -= 1;
                idx[depth] += 1;
                continue;
            }
            let p = (idx[depth] as f64 - mid as f64) * h;
            let next = soc[depth] + p * delta;
            if (-1e-9..=e_max + 1e-9).contains(&next) {
                soc[depth + 1] = next;
                depth += 1;
                break;
            }
            idx[depth] += 1;
        }
    }
}

/// Exhaustive grid-search dispatch: best total cost over all feasible
/// combinations of per-firm grid schedules, or None when no combination
/// clears the generation floor. `points` values per power variable.
pub fn grid_search_cost(market: &MarketInstance<f64>, points: usize) -> Option<f64> {
    let k = market.k();
    let delta = market.delta();
    let per_firm: Vec<Vec<GridProfile>> = market
        .firms
        .iter()
        .map(|f| firm_profiles(f.e_max, f.e_0, f.bid, delta, k, points))
        .collect();

    let gen_cost = |total_storage: &[f64]| -> Option<f64> {
        let mut cost = 0.0;
        for step in 0..k {
            let g = market.net_load[step] + total_storage[step];
            if g < market.gen.p_gmin - 1e-9 {
                return None;
            }
            cost += market.gen.cost(g, delta);
        }
        Some(cost)
    };

    let mut best: Option<f64> = None;
    let mut consider = |cost: f64| {
        if best.map_or(true, |b| cost < b) {
            best = Some(cost);
        }
    };
    match per_firm.len() {
        1 => {
            for pa in &per_firm[0] {
                if let Some(gc) = gen_cost(&pa.powers) {
                    consider(gc + pa.payment);
                }
            }
        }
        2 => {
            let mut combined = vec![0.0; k];
            for pa in &per_firm[0] {
                for pb in &per_firm[1] {
                    for step in 0..k {
                        combined[step] = pa.powers[step] + pb.powers[step];
                    }
                    if let Some(gc) = gen_cost(&combined) {
                        consider(gc + pa.payment + pb.payment);
                    }
                }
            }
        }
        _ => panic!("oracle covers 1 or 2 firms"),
    }
    best
}

/// Worst-case cost distance between the continuous optimum and the best
/// point of a grid with step `h` per power variable: each variable may move
/// by up to `h`, changing generation cost by at most a*(|g|+h)*h*delta per
/// step it touches and payments by at most bid*h*delta.
pub fn grid_resolution_tolerance(
    market: &MarketInstance<f64>,
    sol: &storgame::dispatch::DispatchSolution<f64>,
) -> f64 {
    let delta = market.delta();
    let a = market.gen.a;
    let mut tol = 0.0;
    for firm in &market.firms {
        let points = 21.0;
        let h = 2.0 * firm.e_max / delta / (points - 1.0);
        for step in 0..market.k() {
            let g = sol.gen[step].abs();
            tol += h * delta * (a * (g + h) + firm.bid);
        }
    }
    tol
}
