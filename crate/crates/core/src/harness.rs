//! Experiment harness: profile ingestion, instance construction from sweep
//! parameters, stability sweeps, price-cap and arbitrage studies, and
//! deterministic result export.
//!
//! Grid points are embarrassingly parallel; every study collects records in
//! grid order, so output files are bitwise identical regardless of worker
//! count. Exported floats are rounded to 9 significant digits at record
//! construction, which makes export -> import -> export idempotent.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{solve_dispatch, DispatchError, DispatchSolution};
use crate::firm::{firm_profit, DispatchOracle};
use crate::game::{run_best_response_with, GameEnd};
use crate::model::{
    build_net_load, scale_solar_to_share, BidGrid, GeneratorModel, MarketInstance, ModelError,
    StorageFirm, TimeGrid,
};
use crate::scalar::Scalar;
use crate::theory::{predict_stability, StabilityReport, Verdict};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv row {row}, column {column}: {message}")]
    Csv { row: usize, column: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("{0}")]
    Invalid(String),
}

/// A day of demand and solar-shape samples on a uniform grid. The solar
/// column is a shape, not a magnitude: instances scale it to an energy share.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSet<S> {
    pub grid: TimeGrid<S>,
    pub demand: Vec<S>,
    pub solar_shape: Vec<S>,
}

const PROFILE_HEADER: &str = "hour,demand_mw,solar_mw";

/// Load a profile CSV: header `hour,demand_mw,solar_mw`, one row per step.
/// Hours must start at 0 and advance uniformly; the spacing becomes the step
/// length of the time grid, so sub-hourly and multi-hour files both work.
/// Errors carry row and column diagnostics; data rows are numbered from 1.
pub fn load_profiles_csv<S: Scalar>(path: &Path) -> Result<ProfileSet<S>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_profiles_csv(&text)
}

pub fn parse_profiles_csv<S: Scalar>(text: &str) -> Result<ProfileSet<S>, HarnessError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim_end() != PROFILE_HEADER {
        return Err(HarnessError::Csv {
            row: 0,
            column: "header".into(),
            message: format!("expected `{PROFILE_HEADER}`, got `{header}`"),
        });
    }
    let mut hours = Vec::new();
    let mut demand = Vec::new();
    let mut solar = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(HarnessError::Csv {
                row,
                column: "(row)".into(),
                message: format!("expected 3 cells, got {}", cells.len()),
            });
        }
        let d = parse_cell(cells[1], row, "demand_mw")?;
        let s = parse_cell(cells[2], row, "solar_mw")?;
        if s < 0.0 {
            return Err(HarnessError::Csv {
                row,
                column: "solar_mw".into(),
                message: format!("solar must be >= 0, got {s}"),
            });
        }
        hours.push(parse_cell(cells[0], row, "hour")?);
        demand.push(S::c(d));
        solar.push(S::c(s));
    }
    if demand.len() < 2 {
        return Err(HarnessError::Csv {
            row: demand.len(),
            column: "(row)".into(),
            message: format!("need at least 2 data rows, got {}", demand.len()),
        });
    }
    // The hour column carries the step length: rows must start at zero and
    // advance uniformly.
    let delta = hours[1] - hours[0];
    if delta <= 0.0 {
        return Err(HarnessError::Csv {
            row: 2,
            column: "hour".into(),
            message: format!("hours must increase, got step {delta}"),
        });
    }
    for (i, &hour) in hours.iter().enumerate() {
        let expected = i as f64 * delta;
        if (hour - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(HarnessError::Csv {
                row: i + 1,
                column: "hour".into(),
                message: format!("expected {expected} on a uniform grid, got {hour}"),
            });
        }
    }
    let grid = TimeGrid::new(demand.len(), S::c(delta))?;
    Ok(ProfileSet { grid, demand, solar_shape: solar })
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, HarnessError> {
    let v: f64 = cell.trim().parse().map_err(|_| HarnessError::Csv {
        row,
        column: column.into(),
        message: format!("not a number: `{}`", cell.trim()),
    })?;
    if !v.is_finite() {
        return Err(HarnessError::Csv {
            row,
            column: column.into(),
            message: format!("not finite: `{}`", cell.trim()),
        });
    }
    Ok(v)
}

/// Write a profile CSV in the format [`load_profiles_csv`] reads. Values use
/// full shortest-round-trip precision so a load after a write reproduces the
/// series exactly.
pub fn write_profiles_csv<S: Scalar>(profiles: &ProfileSet<S>) -> String {
    let mut out = String::from(PROFILE_HEADER);
    out.push('\n');
    let delta = profiles.grid.delta.as_f64();
    for (k, (d, s)) in profiles.demand.iter().zip(&profiles.solar_shape).enumerate() {
        out.push_str(&format!("{},{},{}\n", k as f64 * delta, d.as_f64(), s.as_f64()));
    }
    out
}

pub fn save_profiles_csv<S: Scalar>(
    profiles: &ProfileSet<S>,
    path: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(path, write_profiles_csv(profiles))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Constant demand; exercises no-dip markets.
    Flat,
    /// Tent profile dipping to a midday minimum.
    TriangleDip,
    /// Morning and evening demand peaks with a high midday saddle, the
    /// qualitative shape of a spring weekday system load.
    TwoPeak,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flat" => Ok(Self::Flat),
            "triangle-dip" => Ok(Self::TriangleDip),
            "two-peak" => Ok(Self::TwoPeak),
            other => Err(format!("unknown profile kind `{other}` (flat, triangle-dip, two-peak)")),
        }
    }
}

/// Generate a synthetic day: a demand curve per `kind` plus a midday solar
/// bell shape. With a seed, both series get deterministic multiplicative
/// jitter of up to 2 percent, for randomized test-instance generation.
pub fn synth_profile<S: Scalar>(
    kind: SynthKind,
    steps: usize,
    seed: Option<u64>,
) -> Result<ProfileSet<S>, HarnessError> {
    if steps < 2 {
        return Err(HarnessError::Invalid(format!("need at least 2 steps, got {steps}")));
    }
    let delta = 24.0 / steps as f64;
    let mut demand = Vec::with_capacity(steps);
    let mut solar = Vec::with_capacity(steps);
    for k in 0..steps {
        let h = (k as f64 + 0.5) * delta;
        let d = match kind {
            SynthKind::Flat => 800.0,
            SynthKind::TriangleDip => 900.0 - 400.0 * (1.0 - (h - 12.0).abs() / 12.0),
            SynthKind::TwoPeak => {
                620.0
                    + 360.0 * (-((h - 8.5) / 2.5).powi(2)).exp()
                    + 380.0 * (-((h - 19.5) / 2.3).powi(2)).exp()
            }
        };
        let s = (-((h - 12.5) / 3.0).powi(2)).exp();
        demand.push(d);
        solar.push(s);
    }
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in demand.iter_mut().chain(solar.iter_mut()) {
            let u: f64 = rng.gen_range(-1.0..1.0);
            *v *= 1.0 + 0.02 * u;
        }
    }
    Ok(ProfileSet {
        grid: TimeGrid::new(steps, S::c(delta))?,
        demand: demand.into_iter().map(S::c).collect(),
        solar_shape: solar.into_iter().map(S::c).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketStructure {
    Monopoly,
    Duopoly,
}

impl MarketStructure {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Monopoly => "monopoly",
            Self::Duopoly => "duopoly",
        }
    }
}

impl std::str::FromStr for MarketStructure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "monopoly" => Ok(Self::Monopoly),
            "duopoly" => Ok(Self::Duopoly),
            other => Err(format!("unknown market structure `{other}` (monopoly, duopoly)")),
        }
    }
}

/// Everything needed to turn a profile set into a market instance.
#[derive(Clone, Debug)]
pub struct InstanceParams<S> {
    /// Solar energy as a fraction of daily demand energy, in [0, 1).
    pub solar_share: S,
    /// Fleet energy capacity as a multiple of the absorbed excess energy.
    pub ess_cap: S,
    /// Generation floor as a fraction of peak demand, in (0, 1].
    pub flexibility: S,
    pub structure: MarketStructure,
    /// First firm's share of fleet capacity under a duopoly, in (0, 1).
    pub ess_frac: S,
    pub bid_grid: BidGrid<S>,
    pub gen_a: S,
    pub gen_b: S,
}

impl<S: Scalar> InstanceParams<S> {
    /// Defaults: duopoly split 2:1, quadratic cost 0.02 with no fixed term,
    /// bid grid 1..100 in steps of 1.
    pub fn defaults() -> Self {
        Self {
            solar_share: S::c(0.5),
            ess_cap: S::c(1.5),
            flexibility: S::c(0.125),
            structure: MarketStructure::Duopoly,
            ess_frac: S::c(2.0 / 3.0),
            bid_grid: BidGrid::new(S::one(), S::c(100.0)).unwrap(),
            gen_a: S::c(0.02),
            gen_b: S::zero(),
        }
    }
}

/// Fraction of daily demand energy used as fleet capacity when a grid point
/// has no absorption at all (nothing for `ess_cap` to be relative to).
const NO_ABSORB_CAPACITY_FRAC: f64 = 0.05;

/// Build a market instance: scale solar to the requested energy share, set
/// the generation floor from peak demand, and size the storage fleet off the
/// absorbed excess energy of the scaled net load. Initial charge is zero and
/// every firm starts at the price cap.
pub fn build_instance<S: Scalar>(
    profiles: &ProfileSet<S>,
    params: &InstanceParams<S>,
) -> Result<MarketInstance<S>, HarnessError> {
    if !(params.ess_cap > S::zero()) {
        return Err(HarnessError::Invalid(format!(
            "storage capacity multiple must be > 0, got {}",
            params.ess_cap
        )));
    }
    if !(params.flexibility > S::zero()) || params.flexibility > S::one() {
        return Err(HarnessError::Invalid(format!(
            "generation floor fraction {} outside (0, 1]",
            params.flexibility
        )));
    }
    if params.structure == MarketStructure::Duopoly
        && !(params.ess_frac > S::zero() && params.ess_frac < S::one())
    {
        return Err(HarnessError::Invalid(format!(
            "duopoly capacity share {} outside (0, 1)",
            params.ess_frac
        )));
    }

    let solar = scale_solar_to_share(&profiles.demand, &profiles.solar_shape, params.solar_share)?;
    let net = build_net_load(&profiles.demand, &solar)?;
    let delta = profiles.grid.delta;
    let peak = profiles.demand.iter().fold(S::zero(), |a, &d| a.max(d));
    let p_gmin = params.flexibility * peak;

    let e_absorb: S =
        net.iter().map(|&n| (p_gmin - n).max(S::zero())).sum::<S>() * delta;
    let daily: S = profiles.demand.iter().copied().sum::<S>() * delta;
    let total_capacity = if e_absorb > S::c(1e-9) * daily.max(S::one()) {
        params.ess_cap * e_absorb
    } else {
        S::c(NO_ABSORB_CAPACITY_FRAC) * daily
    };

    let c_max = params.bid_grid.c_max;
    let firms = match params.structure {
        MarketStructure::Monopoly => vec![StorageFirm::new(total_capacity, S::zero(), c_max)?],
        MarketStructure::Duopoly => vec![
            StorageFirm::new(params.ess_frac * total_capacity, S::zero(), c_max)?,
            StorageFirm::new((S::one() - params.ess_frac) * total_capacity, S::zero(), c_max)?,
        ],
    };
    let gen = GeneratorModel::new(params.gen_a, params.gen_b, p_gmin)?;
    Ok(MarketInstance::new(profiles.grid, net, gen, firms, params.bid_grid)?)
}

/// Sweep axes. The cross product of the three lists is evaluated at a fixed
/// market structure and capacity split.
#[derive(Clone, Debug)]
pub struct SweepGrid<S> {
    pub solar_shares: Vec<S>,
    pub ess_caps: Vec<S>,
    pub flexibility_levels: Vec<S>,
    pub structure: MarketStructure,
    pub ess_frac: S,
}

impl<S: Scalar> SweepGrid<S> {
    /// The reference duopoly grid: solar 30 to 70 percent in steps of 10,
    /// capacity 120 to 300 percent in steps of 20, floors at 12.5 and 25
    /// percent of peak, capacity split 2:1.
    pub fn reference() -> Self {
        Self {
            solar_shares: (3..=7).map(|i| S::c(i as f64 / 10.0)).collect(),
            ess_caps: (6..=15).map(|i| S::c(i as f64 / 5.0)).collect(),
            flexibility_levels: vec![S::c(0.125), S::c(0.25)],
            structure: MarketStructure::Duopoly,
            ess_frac: S::c(2.0 / 3.0),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.solar_shares.is_empty()
            || self.ess_caps.is_empty()
            || self.flexibility_levels.is_empty()
        {
            return Err(HarnessError::Invalid("sweep grid has an empty axis".into()));
        }
        for &v in &self.solar_shares {
            if !(v > S::zero() && v < S::one()) {
                return Err(HarnessError::Invalid(format!("solar share {v} outside (0, 1)")));
            }
        }
        for &v in &self.ess_caps {
            if !(v > S::zero()) {
                return Err(HarnessError::Invalid(format!("capacity multiple {v} must be > 0")));
            }
        }
        for &v in &self.flexibility_levels {
            if !(v > S::zero()) || v > S::one() {
                return Err(HarnessError::Invalid(format!("floor fraction {v} outside (0, 1]")));
            }
        }
        if self.structure == MarketStructure::Duopoly
            && !(self.ess_frac > S::zero() && self.ess_frac < S::one())
        {
            return Err(HarnessError::Invalid(format!(
                "duopoly capacity share {} outside (0, 1)",
                self.ess_frac
            )));
        }
        Ok(())
    }
}

/// Shared non-axis parameters for sweep-style studies.
#[derive(Clone, Debug)]
pub struct SweepConfig<S> {
    pub bid_grid: BidGrid<S>,
    pub gen_a: S,
    pub gen_b: S,
}

impl<S: Scalar> SweepConfig<S> {
    pub fn standard() -> Self {
        Self {
            bid_grid: BidGrid::new(S::one(), S::c(100.0)).unwrap(),
            gen_a: S::c(0.02),
            gen_b: S::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordOutcome {
    /// The instance failed the feasibility screen.
    Infeasible,
    NashEquilibrium,
    Cycle,
    MoveCap,
    /// Dispatch failed somewhere in prediction or simulation.
    SolverFailure,
}

impl RecordOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Infeasible => "infeasible",
            Self::NashEquilibrium => "nash_equilibrium",
            Self::Cycle => "cycle",
            Self::MoveCap => "move_cap",
            Self::SolverFailure => "solver_failure",
        }
    }
}

/// One grid point's results. `runtime_ms` and `report` stay in memory only;
/// exports omit them so repeated runs produce identical files.
#[derive(Clone, Debug)]
pub struct SweepRecord<S> {
    pub solar_share: S,
    pub ess_cap: S,
    pub flexibility: S,
    pub structure: MarketStructure,
    pub ess_frac: S,
    pub verdict: Option<Verdict>,
    pub assumptions_pass: Option<bool>,
    pub outcome: RecordOutcome,
    /// Bid values at the equilibrium, present only for a Nash ending.
    pub equilibrium_bids: Option<Vec<S>>,
    /// Per-firm profit at the final visited state.
    pub profits: Vec<S>,
    /// Predictor vs simulation, defined when the verdict is decisive and the
    /// game ended in an equilibrium or a cycle.
    pub agreement: Option<bool>,
    pub report: Option<StabilityReport<S>>,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult<S> {
    pub records: Vec<SweepRecord<S>>,
}

impl<S: Scalar> SweepResult<S> {
    /// Fraction of counted points (feasible, solver-clean) whose dynamics
    /// reached a Nash equilibrium, among records passing `pred`.
    pub fn stable_share_where<F: Fn(&SweepRecord<S>) -> bool>(&self, pred: F) -> Option<f64> {
        let mut counted = 0usize;
        let mut stable = 0usize;
        for r in &self.records {
            if !pred(r) {
                continue;
            }
            match r.outcome {
                RecordOutcome::Infeasible | RecordOutcome::SolverFailure => {}
                RecordOutcome::NashEquilibrium => {
                    counted += 1;
                    stable += 1;
                }
                RecordOutcome::Cycle | RecordOutcome::MoveCap => counted += 1,
            }
        }
        (counted > 0).then(|| stable as f64 / counted as f64)
    }

    /// Stable share per distinct value along one axis, ascending.
    pub fn margin<F: Fn(&SweepRecord<S>) -> S>(&self, axis: F) -> Vec<(S, f64)> {
        let mut values: Vec<S> = self.records.iter().map(&axis).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        values.dedup_by(|a, b| *a == *b);
        values
            .into_iter()
            .filter_map(|v| self.stable_share_where(|r| axis(r) == v).map(|s| (v, s)))
            .collect()
    }
}

/// Evaluate the full grid: per point, build the instance, run the stability
/// predictor and the best-response dynamics from the cap, and record both.
/// Points run in parallel; the record order is the deterministic nested grid
/// order (solar outer, capacity, floor inner).
pub fn sweep_stability<S: Scalar>(
    profiles: &ProfileSet<S>,
    grid: &SweepGrid<S>,
    config: &SweepConfig<S>,
) -> Result<SweepResult<S>, HarnessError> {
    grid.validate()?;
    let mut points = Vec::new();
    for &share in &grid.solar_shares {
        for &cap in &grid.ess_caps {
            for &flex in &grid.flexibility_levels {
                points.push((share, cap, flex));
            }
        }
    }
    let records: Vec<SweepRecord<S>> = points
        .par_iter()
        .map(|&(share, cap, flex)| evaluate_point(profiles, grid, config, share, cap, flex))
        .collect();
    Ok(SweepResult { records })
}

fn evaluate_point<S: Scalar>(
    profiles: &ProfileSet<S>,
    grid: &SweepGrid<S>,
    config: &SweepConfig<S>,
    share: S,
    cap: S,
    flex: S,
) -> SweepRecord<S> {
    let start = std::time::Instant::now();
    let mut record = SweepRecord {
        solar_share: share,
        ess_cap: cap,
        flexibility: flex,
        structure: grid.structure,
        ess_frac: grid.ess_frac,
        verdict: None,
        assumptions_pass: None,
        outcome: RecordOutcome::SolverFailure,
        equilibrium_bids: None,
        profits: Vec::new(),
        agreement: None,
        report: None,
        runtime_ms: 0.0,
    };
    let params = InstanceParams {
        solar_share: share,
        ess_cap: cap,
        flexibility: flex,
        structure: grid.structure,
        ess_frac: grid.ess_frac,
        bid_grid: config.bid_grid,
        gen_a: config.gen_a,
        gen_b: config.gen_b,
    };
    let market = match build_instance(profiles, &params) {
        Ok(m) => m,
        Err(HarnessError::Model(ModelError::Infeasible(_))) => {
            record.outcome = RecordOutcome::Infeasible;
            record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            return record;
        }
        Err(_) => {
            record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            return record;
        }
    };

    match predict_stability(&market) {
        Ok(report) => {
            record.verdict = Some(report.verdict);
            record.assumptions_pass = Some(report.assumption_checks.iter().all(|c| c.passed));
            record.report = Some(report);
        }
        Err(_) => {
            record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            return record;
        }
    }

    let oracle = DispatchOracle::new(&market);
    let levels = market.bid_grid.levels();
    let start_bids = vec![levels; market.m()];
    let outcome = match run_best_response_with(&oracle, &start_bids, None) {
        Ok(o) => o,
        Err(_) => {
            record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            return record;
        }
    };

    record.outcome = match outcome.end {
        GameEnd::Equilibrium => RecordOutcome::NashEquilibrium,
        GameEnd::Cycle { .. } => RecordOutcome::Cycle,
        GameEnd::MoveCap => RecordOutcome::MoveCap,
    };
    if outcome.end == GameEnd::Equilibrium {
        record.equilibrium_bids =
            Some(outcome.final_bids.iter().map(|&i| market.bid_grid.bid(i)).collect());
    }
    if let Ok(sol) = oracle.solve(&outcome.final_bids).as_ref() {
        record.profits = (0..market.m())
            .map(|m| firm_profit(market.bid_grid.bid(outcome.final_bids[m]), sol, m))
            .collect();
    }
    record.agreement = match (record.verdict, &outcome.end) {
        (Some(Verdict::Stable), GameEnd::Equilibrium) => Some(true),
        (Some(Verdict::Stable), GameEnd::Cycle { .. }) => Some(false),
        (Some(Verdict::Unstable), GameEnd::Cycle { .. }) => Some(true),
        (Some(Verdict::Unstable), GameEnd::Equilibrium) => Some(false),
        _ => None,
    };
    record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    record
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriceCapRow<S> {
    pub cap: S,
    pub flexibility: S,
    pub points: usize,
    pub stable_points: usize,
    pub stable_share: f64,
}

#[derive(Clone, Debug)]
pub struct PriceCapResult<S> {
    pub rows: Vec<PriceCapRow<S>>,
}

/// Rerun the sweep once per price cap (the bid grid keeps its step and drops
/// its top), reporting the stable share per cap and floor level. Caps must be
/// grid multiples of the step, sorted ascending or descending.
pub fn price_cap_study<S: Scalar>(
    profiles: &ProfileSet<S>,
    grid: &SweepGrid<S>,
    config: &SweepConfig<S>,
    caps: &[S],
) -> Result<PriceCapResult<S>, HarnessError> {
    if caps.is_empty() {
        return Err(HarnessError::Invalid("need at least one price cap".into()));
    }
    let ascending = caps.windows(2).all(|w| w[0] <= w[1]);
    let descending = caps.windows(2).all(|w| w[0] >= w[1]);
    if !ascending && !descending {
        return Err(HarnessError::Invalid("price caps must be sorted".into()));
    }
    let delta = config.bid_grid.delta_bid;
    let mut rows = Vec::new();
    for &cap in caps {
        let capped = SweepConfig {
            bid_grid: BidGrid::floor_capped(delta, cap)?,
            gen_a: config.gen_a,
            gen_b: config.gen_b,
        };
        let sweep = sweep_stability(profiles, grid, &capped)?;
        for &flex in &grid.flexibility_levels {
            let counted = sweep
                .records
                .iter()
                .filter(|r| {
                    r.flexibility == flex
                        && !matches!(
                            r.outcome,
                            RecordOutcome::Infeasible | RecordOutcome::SolverFailure
                        )
                })
                .count();
            let stable = sweep
                .records
                .iter()
                .filter(|r| {
                    r.flexibility == flex && r.outcome == RecordOutcome::NashEquilibrium
                })
                .count();
            rows.push(PriceCapRow {
                cap,
                flexibility: flex,
                points: counted,
                stable_points: stable,
                stable_share: if counted > 0 { stable as f64 / counted as f64 } else { 0.0 },
            });
        }
    }
    Ok(PriceCapResult { rows })
}

/// Energy charged beyond the forced balancing volume, per scenario and bid
/// level. Charged energy within `ARBITRAGE_FLOOR_MWH` of the balancing volume
/// counts as zero arbitrage; that floor is the dispatch solver's own
/// acceptance resolution.
pub const ARBITRAGE_FLOOR_MWH: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArbitrageRow<S> {
    pub solar_share: S,
    pub bid: S,
    pub charged_mwh: S,
    pub balancing_mwh: S,
    pub arbitrage_mwh: S,
    /// Arbitrage energy over the capacity left after balancing.
    pub arbitrage_share: S,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseProfile<S> {
    pub solar_share: S,
    /// 1 at the price cap (balancing only), 2 at the grid floor.
    pub case: u8,
    pub bid: S,
    pub net_load_mw: Vec<S>,
    pub storage_mw: Vec<S>,
    pub generation_mw: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct ArbitrageResult<S> {
    pub rows: Vec<ArbitrageRow<S>>,
    /// Largest bid with nonzero arbitrage, per scenario in input order.
    pub thresholds: Vec<(S, Option<S>)>,
    pub profiles: Vec<CaseProfile<S>>,
    /// The fixed fleet capacity shared by all scenarios.
    pub fleet_mwh: S,
}

#[derive(Clone, Debug)]
pub struct ArbitrageConfig<S> {
    /// Fleet capacity as a multiple of the largest scenario's absorbed
    /// energy, so one fixed fleet serves every scenario.
    pub ess_cap: S,
    /// Generation floor fraction of peak demand.
    pub flexibility: S,
    pub bid_grid: BidGrid<S>,
    pub gen_a: S,
    pub gen_b: S,
}

impl<S: Scalar> ArbitrageConfig<S> {
    pub fn standard() -> Self {
        Self {
            ess_cap: S::c(1.5),
            flexibility: S::c(0.55),
            bid_grid: BidGrid::new(S::one(), S::c(100.0)).unwrap(),
            gen_a: S::c(0.02),
            gen_b: S::zero(),
        }
    }
}

/// For each solar scenario and every bid level, dispatch a single fleet that
/// is sized once (off the largest scenario's absorbed energy) and measure how
/// much charging exceeds the forced balancing volume.
pub fn arbitrage_study<S: Scalar>(
    profiles: &ProfileSet<S>,
    scenarios: &[S],
    config: &ArbitrageConfig<S>,
) -> Result<ArbitrageResult<S>, HarnessError> {
    if scenarios.is_empty() {
        return Err(HarnessError::Invalid("need at least one solar scenario".into()));
    }
    let delta = profiles.grid.delta;
    let peak = profiles.demand.iter().fold(S::zero(), |a, &d| a.max(d));
    let p_gmin = config.flexibility * peak;
    let daily: S = profiles.demand.iter().copied().sum::<S>() * delta;

    // Net load and balancing energy per scenario.
    let mut nets = Vec::with_capacity(scenarios.len());
    let mut balancing = Vec::with_capacity(scenarios.len());
    for &share in scenarios {
        let solar = scale_solar_to_share(&profiles.demand, &profiles.solar_shape, share)?;
        let net = build_net_load(&profiles.demand, &solar)?;
        let e: S = net.iter().map(|&n| (p_gmin - n).max(S::zero())).sum::<S>() * delta;
        nets.push(net);
        balancing.push(e);
    }
    let e_ref = balancing.iter().fold(S::zero(), |a, &e| a.max(e));
    let fleet = if e_ref > S::c(1e-9) * daily.max(S::one()) {
        config.ess_cap * e_ref
    } else {
        S::c(NO_ABSORB_CAPACITY_FRAC) * daily
    };

    let levels = config.bid_grid.levels();
    let gen = GeneratorModel::new(config.gen_a, config.gen_b, p_gmin)?;

    let solve_at = |scenario: usize, level: u32| -> Result<DispatchSolution<S>, HarnessError> {
        let market = MarketInstance::new(
            profiles.grid,
            nets[scenario].clone(),
            gen,
            vec![StorageFirm::new(fleet, S::zero(), config.bid_grid.bid(level))?],
            config.bid_grid,
        )?;
        Ok(solve_dispatch(&market)?)
    };

    let tasks: Vec<(usize, u32)> =
        (0..scenarios.len()).flat_map(|s| (1..=levels).map(move |l| (s, l))).collect();
    let solved: Vec<Result<ArbitrageRow<S>, HarnessError>> = tasks
        .par_iter()
        .map(|&(s, l)| {
            let sol = solve_at(s, l)?;
            let charged = sol.charged_energy(0);
            let raw = charged - balancing[s];
            let arb = if raw.as_f64() <= ARBITRAGE_FLOOR_MWH { S::zero() } else { raw };
            let headroom = fleet - balancing[s];
            let share = if headroom > S::zero() { arb / headroom } else { S::zero() };
            Ok(ArbitrageRow {
                solar_share: scenarios[s],
                bid: config.bid_grid.bid(l),
                charged_mwh: charged,
                balancing_mwh: balancing[s],
                arbitrage_mwh: arb,
                arbitrage_share: share,
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(solved.len());
    for r in solved {
        rows.push(r?);
    }

    let mut thresholds = Vec::with_capacity(scenarios.len());
    for (s, &share) in scenarios.iter().enumerate() {
        let best = rows
            .iter()
            .skip(s * levels as usize)
            .take(levels as usize)
            .filter(|r| r.arbitrage_mwh > S::zero())
            .map(|r| r.bid)
            .fold(None, |acc: Option<S>, b| Some(acc.map_or(b, |a| a.max(b))));
        thresholds.push((share, best));
    }

    let mut case_profiles = Vec::new();
    for (s, &share) in scenarios.iter().enumerate() {
        for (case, level) in [(1u8, levels), (2u8, 1)] {
            let sol = solve_at(s, level)?;
            let k = profiles.grid.steps;
            let mut storage = vec![S::zero(); k];
            for m in 0..sol.power.len() {
                for (kk, v) in storage.iter_mut().enumerate() {
                    *v += sol.power[m][kk];
                }
            }
            let generation: Vec<S> =
                nets[s].iter().zip(&storage).map(|(&n, &p)| n + p).collect();
            case_profiles.push(CaseProfile {
                solar_share: share,
                case,
                bid: config.bid_grid.bid(level),
                net_load_mw: nets[s].clone(),
                storage_mw: storage,
                generation_mw: generation,
            });
        }
    }

    Ok(ArbitrageResult { rows, thresholds, profiles: case_profiles, fleet_mwh: fleet })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown format `{other}` (csv, json)")),
        }
    }
}

/// 9 significant digits, the export resolution for every float.
fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Round to the export resolution, so JSON numbers match the CSV cells and a
/// parsed export re-serializes to identical bytes.
fn round9(v: f64) -> f64 {
    fmt9(v).parse().unwrap()
}

fn opt_bool(b: Option<bool>) -> String {
    b.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt_bool(cell: &str, row: usize, column: &str) -> Result<Option<bool>, HarnessError> {
    match cell {
        "" => Ok(None),
        "true" => Ok(Some(true)),
        "false" => Ok(Some(false)),
        other => Err(HarnessError::Csv {
            row,
            column: column.into(),
            message: format!("expected true/false/empty, got `{other}`"),
        }),
    }
}

/// A sweep record as exported: floats rounded, report and runtime dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRowExport {
    pub solar_share: f64,
    pub ess_cap: f64,
    pub flexibility: f64,
    pub structure: String,
    pub ess_frac: f64,
    pub verdict: String,
    pub assumptions_pass: Option<bool>,
    pub outcome: String,
    pub equilibrium_bids: Option<Vec<f64>>,
    pub profits: Vec<f64>,
    pub agreement: Option<bool>,
}

const SWEEP_HEADER: &str = "solar_share,ess_cap,flexibility,structure,ess_frac,verdict,assumptions_pass,outcome,eq_bid_0,eq_bid_1,profit_0,profit_1,agreement";

pub fn sweep_export_rows<S: Scalar>(result: &SweepResult<S>) -> Vec<SweepRowExport> {
    result
        .records
        .iter()
        .map(|r| SweepRowExport {
            solar_share: round9(r.solar_share.as_f64()),
            ess_cap: round9(r.ess_cap.as_f64()),
            flexibility: round9(r.flexibility.as_f64()),
            structure: r.structure.as_str().into(),
            ess_frac: round9(r.ess_frac.as_f64()),
            verdict: match r.verdict {
                None => String::new(),
                Some(Verdict::Stable) => "stable".into(),
                Some(Verdict::Unstable) => "unstable".into(),
                Some(Verdict::Inconclusive) => "inconclusive".into(),
            },
            assumptions_pass: r.assumptions_pass,
            outcome: r.outcome.as_str().into(),
            equilibrium_bids: r
                .equilibrium_bids
                .as_ref()
                .map(|bids| bids.iter().map(|b| round9(b.as_f64())).collect()),
            profits: r.profits.iter().map(|p| round9(p.as_f64())).collect(),
            agreement: r.agreement,
        })
        .collect()
}

pub fn sweep_rows_to_csv(rows: &[SweepRowExport]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let bid = |i: usize| {
            r.equilibrium_bids
                .as_ref()
                .and_then(|b| b.get(i))
                .map(|&v| fmt9(v))
                .unwrap_or_default()
        };
        let profit =
            |i: usize| r.profits.get(i).map(|&v| fmt9(v)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt9(r.solar_share),
            fmt9(r.ess_cap),
            fmt9(r.flexibility),
            r.structure,
            fmt9(r.ess_frac),
            r.verdict,
            opt_bool(r.assumptions_pass),
            r.outcome,
            bid(0),
            bid(1),
            profit(0),
            profit(1),
            opt_bool(r.agreement),
        ));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRowExport>, HarnessError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != SWEEP_HEADER {
        return Err(HarnessError::Csv {
            row: 0,
            column: "header".into(),
            message: format!("unexpected sweep header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 13 {
            return Err(HarnessError::Csv {
                row,
                column: "(row)".into(),
                message: format!("expected 13 cells, got {}", cells.len()),
            });
        }
        let opt_cell = |idx: usize, col: &str| -> Result<Option<f64>, HarnessError> {
            if cells[idx].is_empty() {
                Ok(None)
            } else {
                parse_cell(cells[idx], row, col).map(Some)
            }
        };
        let bids: Vec<f64> = [opt_cell(8, "eq_bid_0")?, opt_cell(9, "eq_bid_1")?]
            .into_iter()
            .flatten()
            .collect();
        let profits: Vec<f64> = [opt_cell(10, "profit_0")?, opt_cell(11, "profit_1")?]
            .into_iter()
            .flatten()
            .collect();
        rows.push(SweepRowExport {
            solar_share: parse_cell(cells[0], row, "solar_share")?,
            ess_cap: parse_cell(cells[1], row, "ess_cap")?,
            flexibility: parse_cell(cells[2], row, "flexibility")?,
            structure: cells[3].into(),
            ess_frac: parse_cell(cells[4], row, "ess_frac")?,
            verdict: cells[5].into(),
            assumptions_pass: parse_opt_bool(cells[6], row, "assumptions_pass")?,
            outcome: cells[7].into(),
            equilibrium_bids: (!bids.is_empty()).then_some(bids),
            profits,
            agreement: parse_opt_bool(cells[12], row, "agreement")?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct SweepJson {
    schema: String,
    records: Vec<SweepRowExport>,
}

pub fn sweep_to_json(rows: Vec<SweepRowExport>) -> String {
    let mut s =
        serde_json::to_string_pretty(&SweepJson { schema: "sweep/v1".into(), records: rows })
            .expect("sweep rows serialize");
    s.push('\n');
    s
}

pub fn parse_sweep_json(text: &str) -> Result<Vec<SweepRowExport>, HarnessError> {
    let parsed: SweepJson = serde_json::from_str(text)
        .map_err(|e| HarnessError::Invalid(format!("bad sweep json: {e}")))?;
    if parsed.schema != "sweep/v1" {
        return Err(HarnessError::Invalid(format!("unknown schema `{}`", parsed.schema)));
    }
    Ok(parsed.records)
}

pub fn write_sweep<S: Scalar>(
    result: &SweepResult<S>,
    path: &Path,
    format: ExportFormat,
) -> Result<(), HarnessError> {
    let rows = sweep_export_rows(result);
    let text = match format {
        ExportFormat::Csv => sweep_rows_to_csv(&rows),
        ExportFormat::Json => sweep_to_json(rows),
    };
    std::fs::write(path, text)?;
    Ok(())
}

const PRICE_CAP_HEADER: &str = "cap,flexibility,points,stable_points,stable_share";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceCapRowExport {
    pub cap: f64,
    pub flexibility: f64,
    pub points: usize,
    pub stable_points: usize,
    pub stable_share: f64,
}

pub fn price_cap_export_rows<S: Scalar>(result: &PriceCapResult<S>) -> Vec<PriceCapRowExport> {
    result
        .rows
        .iter()
        .map(|r| PriceCapRowExport {
            cap: round9(r.cap.as_f64()),
            flexibility: round9(r.flexibility.as_f64()),
            points: r.points,
            stable_points: r.stable_points,
            stable_share: round9(r.stable_share),
        })
        .collect()
}

pub fn price_cap_rows_to_csv(rows: &[PriceCapRowExport]) -> String {
    let mut out = String::from(PRICE_CAP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt9(r.cap),
            fmt9(r.flexibility),
            r.points,
            r.stable_points,
            fmt9(r.stable_share),
        ));
    }
    out
}

pub fn parse_price_cap_csv(text: &str) -> Result<Vec<PriceCapRowExport>, HarnessError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != PRICE_CAP_HEADER {
        return Err(HarnessError::Csv {
            row: 0,
            column: "header".into(),
            message: format!("unexpected price-cap header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(HarnessError::Csv {
                row,
                column: "(row)".into(),
                message: format!("expected 5 cells, got {}", cells.len()),
            });
        }
        let count = |idx: usize, col: &str| -> Result<usize, HarnessError> {
            cells[idx].parse().map_err(|_| HarnessError::Csv {
                row,
                column: col.into(),
                message: format!("not a count: `{}`", cells[idx]),
            })
        };
        rows.push(PriceCapRowExport {
            cap: parse_cell(cells[0], row, "cap")?,
            flexibility: parse_cell(cells[1], row, "flexibility")?,
            points: count(2, "points")?,
            stable_points: count(3, "stable_points")?,
            stable_share: parse_cell(cells[4], row, "stable_share")?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct PriceCapJson {
    schema: String,
    rows: Vec<PriceCapRowExport>,
}

pub fn write_price_cap<S: Scalar>(
    result: &PriceCapResult<S>,
    path: &Path,
    format: ExportFormat,
) -> Result<(), HarnessError> {
    let rows = price_cap_export_rows(result);
    let text = match format {
        ExportFormat::Csv => price_cap_rows_to_csv(&rows),
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&PriceCapJson {
                schema: "price_cap/v1".into(),
                rows,
            })
            .expect("price cap rows serialize");
            s.push('\n');
            s
        }
    };
    std::fs::write(path, text)?;
    Ok(())
}

const ARBITRAGE_HEADER: &str =
    "solar_share,bid,charged_mwh,balancing_mwh,arbitrage_mwh,arbitrage_share";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageRowExport {
    pub solar_share: f64,
    pub bid: f64,
    pub charged_mwh: f64,
    pub balancing_mwh: f64,
    pub arbitrage_mwh: f64,
    pub arbitrage_share: f64,
}

pub fn arbitrage_export_rows<S: Scalar>(result: &ArbitrageResult<S>) -> Vec<ArbitrageRowExport> {
    result
        .rows
        .iter()
        .map(|r| ArbitrageRowExport {
            solar_share: round9(r.solar_share.as_f64()),
            bid: round9(r.bid.as_f64()),
            charged_mwh: round9(r.charged_mwh.as_f64()),
            balancing_mwh: round9(r.balancing_mwh.as_f64()),
            arbitrage_mwh: round9(r.arbitrage_mwh.as_f64()),
            arbitrage_share: round9(r.arbitrage_share.as_f64()),
        })
        .collect()
}

pub fn arbitrage_rows_to_csv(rows: &[ArbitrageRowExport]) -> String {
    let mut out = String::from(ARBITRAGE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt9(r.solar_share),
            fmt9(r.bid),
            fmt9(r.charged_mwh),
            fmt9(r.balancing_mwh),
            fmt9(r.arbitrage_mwh),
            fmt9(r.arbitrage_share),
        ));
    }
    out
}

pub fn parse_arbitrage_csv(text: &str) -> Result<Vec<ArbitrageRowExport>, HarnessError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != ARBITRAGE_HEADER {
        return Err(HarnessError::Csv {
            row: 0,
            column: "header".into(),
            message: format!("unexpected arbitrage header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(HarnessError::Csv {
                row,
                column: "(row)".into(),
                message: format!("expected 6 cells, got {}", cells.len()),
            });
        }
        rows.push(ArbitrageRowExport {
            solar_share: parse_cell(cells[0], row, "solar_share")?,
            bid: parse_cell(cells[1], row, "bid")?,
            charged_mwh: parse_cell(cells[2], row, "charged_mwh")?,
            balancing_mwh: parse_cell(cells[3], row, "balancing_mwh")?,
            arbitrage_mwh: parse_cell(cells[4], row, "arbitrage_mwh")?,
            arbitrage_share: parse_cell(cells[5], row, "arbitrage_share")?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct ArbitrageJson {
    schema: String,
    fleet_mwh: f64,
    rows: Vec<ArbitrageRowExport>,
    thresholds: Vec<ArbitrageThresholdExport>,
    profiles: Vec<CaseProfileExport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArbitrageThresholdExport {
    pub solar_share: f64,
    pub max_arbitrage_bid: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseProfileExport {
    pub solar_share: f64,
    pub case: u8,
    pub bid: f64,
    pub net_load_mw: Vec<f64>,
    pub storage_mw: Vec<f64>,
    pub generation_mw: Vec<f64>,
}

pub fn write_arbitrage<S: Scalar>(
    result: &ArbitrageResult<S>,
    path: &Path,
    format: ExportFormat,
) -> Result<(), HarnessError> {
    let rows = arbitrage_export_rows(result);
    let text = match format {
        ExportFormat::Csv => arbitrage_rows_to_csv(&rows),
        ExportFormat::Json => {
            let r9 = |v: &[S]| -> Vec<f64> { v.iter().map(|x| round9(x.as_f64())).collect() };
            let doc = ArbitrageJson {
                schema: "arbitrage/v1".into(),
                fleet_mwh: round9(result.fleet_mwh.as_f64()),
                rows,
                thresholds: result
                    .thresholds
                    .iter()
                    .map(|&(s, b)| ArbitrageThresholdExport {
                        solar_share: round9(s.as_f64()),
                        max_arbitrage_bid: b.map(|v| round9(v.as_f64())),
                    })
                    .collect(),
                profiles: result
                    .profiles
                    .iter()
                    .map(|p| CaseProfileExport {
                        solar_share: round9(p.solar_share.as_f64()),
                        case: p.case,
                        bid: round9(p.bid.as_f64()),
                        net_load_mw: r9(&p.net_load_mw),
                        storage_mw: r9(&p.storage_mw),
                        generation_mw: r9(&p.generation_mw),
                    })
                    .collect(),
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("arbitrage serializes");
            s.push('\n');
            s
        }
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Companion CSV for the arbitrage case profiles, one row per scenario, case
/// and step.
pub fn write_arbitrage_profiles<S: Scalar>(
    result: &ArbitrageResult<S>,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out =
        String::from("solar_share,case,bid,step,net_load_mw,storage_mw,generation_mw\n");
    for p in &result.profiles {
        for k in 0..p.net_load_mw.len() {
            out.push_str(&format!(
                "{},{},{},{k},{},{},{}\n",
                fmt9(p.solar_share.as_f64()),
                p.case,
                fmt9(p.bid.as_f64()),
                fmt9(p.net_load_mw[k].as_f64()),
                fmt9(p.storage_mw[k].as_f64()),
                fmt9(p.generation_mw[k].as_f64()),
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
