//! Strategic energy-storage bidding in a wholesale electricity market:
//! centrally dispatched storage under price bids, best-response dynamics
//! between storage firms, and stability analysis of the resulting game.

// Index loops in the numeric kernels mirror the subscripts in the math they
// implement, and the negated comparisons are NaN-rejecting input guards that
// `partial_cmp` rewrites would silently let through.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dispatch;
pub mod firm;
pub mod game;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod qp;
pub mod scalar;
pub mod theory;

pub use scalar::Scalar;

/// Concrete f64 instantiations, the precision every study runs at.
pub type MarketInstance = model::MarketInstance<f64>;
pub type StorageFirm = model::StorageFirm<f64>;
pub type GeneratorModel = model::GeneratorModel<f64>;
pub type TimeGrid = model::TimeGrid<f64>;
pub type BidGrid = model::BidGrid<f64>;
pub type DispatchSolution = dispatch::DispatchSolution<f64>;
pub type StabilityReport = theory::StabilityReport<f64>;
pub type GameOutcome = game::GameOutcome<f64>;
pub type ProfileSet = harness::ProfileSet<f64>;

/// Relative tolerance at which two profits count as tied. Shared by
/// enumeration best response and the closed-form walk so both resolve the
/// same near-ties the same way: the lower bid wins.
pub const PROFIT_TIE_TOL: f64 = 1e-9;

/// Whether `candidate` is strictly better than `incumbent` at the shared
/// relative tolerance.
pub fn profit_improves<S: Scalar>(candidate: S, incumbent: S) -> bool {
    candidate > incumbent + S::c(PROFIT_TIE_TOL) * incumbent.abs().max(S::one())
}

/// Whether two profits are indistinguishable at the shared tolerance.
pub fn profits_tied<S: Scalar>(a: S, b: S) -> bool {
    (a - b).abs() <= S::c(PROFIT_TIE_TOL) * a.abs().max(b.abs()).max(S::one())
}
