//! Market data model: time grid, net load, generator fleet, storage firms,
//! and the bid grid, with construction-time invariant checks.
//!
//! Sign conventions: storage power `p` is positive when charging (the grid
//! delivers energy to the battery) and negative when discharging. Net load is
//! demand minus renewable generation, so conventional output at step `k` is
//! `net_load[k] + sum_m p[m][k]` and must stay at or above the fleet's
//! minimum feasible output `p_gmin`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Uniform time grid: `steps` intervals of `delta` hours each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<S> {
    pub steps: usize,
    pub delta: S,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(steps: usize, delta: S) -> Result<Self, ModelError> {
        if steps < 2 {
            return Err(ModelError::Invalid(format!("time grid needs >= 2 steps, got {steps}")));
        }
        if !(delta > S::zero()) || !delta.is_finite() {
            return Err(ModelError::Invalid(format!("step length must be positive, got {delta}")));
        }
        Ok(Self { steps, delta })
    }

    /// Hourly grid over one day.
    pub fn hourly(steps: usize) -> Result<Self, ModelError> {
        Self::new(steps, S::one())
    }
}

/// Aggregate conventional fleet with quadratic cost 0.5*a*p^2 + b ($/h) and a
/// minimum feasible output `p_gmin` (MW).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel<S> {
    pub a: S,
    pub b: S,
    pub p_gmin: S,
}

impl<S: Scalar> GeneratorModel<S> {
    pub fn new(a: S, b: S, p_gmin: S) -> Result<Self, ModelError> {
        if !(a > S::zero()) || !a.is_finite() {
            return Err(ModelError::Invalid(format!("quadratic cost coefficient a must be > 0, got {a}")));
        }
        if !b.is_finite() || b < S::zero() {
            return Err(ModelError::Invalid(format!("fixed cost b must be finite and >= 0, got {b}")));
        }
        if !p_gmin.is_finite() || p_gmin < S::zero() {
            return Err(ModelError::Invalid(format!("minimum output must be finite and >= 0, got {p_gmin}")));
        }
        Ok(Self { a, b, p_gmin })
    }

    /// Generation cost over one step of length `delta` at output `p` ($).
    pub fn cost(&self, p: S, delta: S) -> S {
        (S::c(0.5) * self.a * p * p + self.b) * delta
    }
}

/// One storage firm: energy capacity `e_max` (MWh), initial state of charge
/// `e_0` (MWh), and its current price bid (\$/MWh of charged energy).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageFirm<S> {
    pub e_max: S,
    pub e_0: S,
    pub bid: S,
}

impl<S: Scalar> StorageFirm<S> {
    pub fn new(e_max: S, e_0: S, bid: S) -> Result<Self, ModelError> {
        if !(e_max > S::zero()) || !e_max.is_finite() {
            return Err(ModelError::Invalid(format!("capacity must be > 0, got {e_max}")));
        }
        if !e_0.is_finite() || e_0 < S::zero() || e_0 > e_max {
            return Err(ModelError::Invalid(format!("initial charge {e_0} outside [0, {e_max}]")));
        }
        if !(bid > S::zero()) || !bid.is_finite() {
            return Err(ModelError::Invalid(format!("bid must be > 0, got {bid}")));
        }
        Ok(Self { e_max, e_0, bid })
    }
}

/// Discrete bid grid {delta_bid, 2*delta_bid, ..., c_max}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidGrid<S> {
    pub delta_bid: S,
    pub c_max: S,
    levels: u32,
}

impl<S: Scalar> BidGrid<S> {
    pub fn new(delta_bid: S, c_max: S) -> Result<Self, ModelError> {
        Self::with_min_levels(delta_bid, c_max, 20)
    }

    /// Like [`BidGrid::new`] but allowing a coarse grid, down to the
    /// single-level cap = step case. Regulatory price-cap studies push the
    /// cap toward the floor, where the fine-grid requirement of the standard
    /// constructor no longer makes sense.
    pub fn floor_capped(delta_bid: S, c_max: S) -> Result<Self, ModelError> {
        Self::with_min_levels(delta_bid, c_max, 1)
    }

    fn with_min_levels(delta_bid: S, c_max: S, min_levels: u32) -> Result<Self, ModelError> {
        if !(delta_bid > S::zero()) || !delta_bid.is_finite() || !c_max.is_finite() {
            return Err(ModelError::Invalid(format!(
                "bid grid needs positive step and finite cap, got step {delta_bid}, cap {c_max}"
            )));
        }
        let ratio = (c_max / delta_bid).as_f64();
        let levels = ratio.round();
        if (ratio - levels).abs() > 1e-9 * levels.max(1.0) {
            return Err(ModelError::Invalid(format!(
                "bid step {delta_bid} must divide price cap {c_max} exactly"
            )));
        }
        let levels = levels as u32;
        if levels < min_levels {
            return Err(ModelError::Invalid(format!(
                "bid grid too coarse: c_max/delta_bid = {levels}, need >= {min_levels}"
            )));
        }
        Ok(Self { delta_bid, c_max, levels })
    }

    /// Number of bid levels.
    #[inline]
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Bid value at 1-based grid index.
    #[inline]
    pub fn bid(&self, index: u32) -> S {
        debug_assert!(index >= 1 && index <= self.levels);
        S::from_u32(index).unwrap() * self.delta_bid
    }

    /// Grid index of a bid that is (numerically) an exact grid multiple.
    pub fn index_of(&self, bid: S) -> Option<u32> {
        let ratio = (bid / self.delta_bid).as_f64();
        let idx = ratio.round();
        if idx >= 1.0
            && idx <= self.levels as f64
            && (ratio - idx).abs() <= 1e-9 * idx.max(1.0)
        {
            Some(idx as u32)
        } else {
            None
        }
    }
}

/// Why a market instance admits no feasible dispatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Infeasibility {
    /// Cumulative forced absorption exceeds total storage capacity at a step.
    CapacityShortfall { step: usize, required_mwh: f64, capacity_mwh: f64 },
    /// Energy forced into storage cannot be discharged again within the
    /// horizon while conventional output stays above its floor.
    UndischargeableSurplus { surplus_mwh: f64 },
}

impl core::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Infeasibility::CapacityShortfall { step, required_mwh, capacity_mwh } => write!(
                f,
                "storage capacity shortfall at step {step}: need {required_mwh} MWh held, fleet holds {capacity_mwh} MWh"
            ),
            Infeasibility::UndischargeableSurplus { surplus_mwh } => write!(
                f,
                "{surplus_mwh} MWh of forced absorption cannot be discharged within the horizon"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model data: {0}")]
    Invalid(String),
    #[error("no feasible dispatch exists: {0}")]
    Infeasible(Infeasibility),
}

/// Full market instance for one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance<S> {
    pub grid: TimeGrid<S>,
    /// Net load per step (MW): demand minus renewable generation.
    pub net_load: Vec<S>,
    pub gen: GeneratorModel<S>,
    pub firms: Vec<StorageFirm<S>>,
    pub bid_grid: BidGrid<S>,
}

impl<S: Scalar> MarketInstance<S> {
    pub fn new(
        grid: TimeGrid<S>,
        net_load: Vec<S>,
        gen: GeneratorModel<S>,
        firms: Vec<StorageFirm<S>>,
        bid_grid: BidGrid<S>,
    ) -> Result<Self, ModelError> {
        if net_load.len() != grid.steps {
            return Err(ModelError::Invalid(format!(
                "net load has {} entries for {} steps",
                net_load.len(),
                grid.steps
            )));
        }
        if let Some(v) = net_load.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::Invalid(format!("net load contains non-finite value {v}")));
        }
        if firms.is_empty() {
            return Err(ModelError::Invalid("need at least one storage firm".into()));
        }
        let instance = Self { grid, net_load, gen, firms, bid_grid };
        instance.check_feasible()?;
        Ok(instance)
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.firms.len()
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.grid.steps
    }

    #[inline]
    pub fn delta(&self) -> S {
        self.grid.delta
    }

    /// Power the fleet is forced to absorb at step k (MW, negative when the
    /// net load sits above the generation floor).
    #[inline]
    pub fn forced(&self, k: usize) -> S {
        self.gen.p_gmin - self.net_load[k]
    }

    /// Total fleet capacity expressed as a power sum bound (MW over one step).
    pub fn total_capacity_power(&self) -> S {
        self.firms.iter().map(|f| f.e_max).sum::<S>() / self.grid.delta
    }

    /// Clone with firm bids replaced by bid-grid values at `indices`.
    pub fn with_bid_indices(&self, indices: &[u32]) -> Self {
        debug_assert_eq!(indices.len(), self.m());
        let mut out = self.clone();
        for (firm, &idx) in out.firms.iter_mut().zip(indices) {
            firm.bid = self.bid_grid.bid(idx);
        }
        out
    }

    /// Exact feasibility test, O(K).
    ///
    /// A dispatch exists iff the minimal-state-of-charge policy
    /// `S_k = max(S_{k-1} + forced_k, 0)` (aggregate MWh, floor at empty)
    /// never needs to hold more than the fleet's total capacity and returns
    /// to the initial aggregate charge by the end of the horizon. Minimality
    /// makes the test exact: any feasible trajectory dominates this one.
    pub fn check_feasible(&self) -> Result<(), ModelError> {
        let delta = self.grid.delta;
        let cap: S = self.firms.iter().map(|f| f.e_max).sum();
        let s0: S = self.firms.iter().map(|f| f.e_0).sum();
        let tol = S::c(1e-9) * cap.max(S::one());
        let mut s = s0;
        for k in 0..self.k() {
            let forced_energy = self.forced(k) * delta;
            s = (s + forced_energy).max(S::zero());
            if forced_energy > S::zero() && s > cap + tol {
                return Err(ModelError::Infeasible(Infeasibility::CapacityShortfall {
                    step: k,
                    required_mwh: s.as_f64(),
                    capacity_mwh: cap.as_f64(),
                }));
            }
        }
        if s > s0 + tol {
            return Err(ModelError::Infeasible(Infeasibility::UndischargeableSurplus {
                surplus_mwh: (s - s0).as_f64(),
            }));
        }
        Ok(())
    }
}

/// Net load = demand - renewable, elementwise.
pub fn build_net_load<S: Scalar>(demand: &[S], renewable: &[S]) -> Result<Vec<S>, ModelError> {
    if demand.len() != renewable.len() {
        return Err(ModelError::Invalid(format!(
            "demand has {} entries, renewable {}",
            demand.len(),
            renewable.len()
        )));
    }
    for (k, (d, r)) in demand.iter().zip(renewable).enumerate() {
        if !d.is_finite() || !r.is_finite() {
            return Err(ModelError::Invalid(format!("non-finite profile entry at step {k}")));
        }
    }
    Ok(demand.iter().zip(renewable).map(|(&d, &r)| d - r).collect())
}

/// Scale a non-negative solar shape so that solar energy equals `share` of
/// demand energy; `share` in [0, 1).
pub fn scale_solar_to_share<S: Scalar>(
    demand: &[S],
    shape: &[S],
    share: S,
) -> Result<Vec<S>, ModelError> {
    if demand.len() != shape.len() {
        return Err(ModelError::Invalid(format!(
            "demand has {} entries, solar shape {}",
            demand.len(),
            shape.len()
        )));
    }
    if !(share >= S::zero()) || !(share < S::one()) {
        return Err(ModelError::Invalid(format!("solar share {share} outside [0, 1)")));
    }
    if shape.iter().any(|v| !v.is_finite() || *v < S::zero()) {
        return Err(ModelError::Invalid("solar shape must be non-negative and finite".into()));
    }
    if share == S::zero() {
        return Ok(vec![S::zero(); demand.len()]);
    }
    let demand_sum: S = demand.iter().copied().sum();
    let shape_sum: S = shape.iter().copied().sum();
    if !(shape_sum > S::zero()) {
        return Err(ModelError::Invalid("solar shape sums to zero; cannot scale to a positive share".into()));
    }
    let scale = share * demand_sum / shape_sum;
    Ok(shape.iter().map(|&v| v * scale).collect())
}
