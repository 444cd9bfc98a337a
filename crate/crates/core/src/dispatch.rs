//! Central dispatch: given net load, the conventional fleet, and storage
//! bids, minimize total system cost (quadratic generation cost plus bid
//! payments for charged energy) over storage schedules.
//!
//! The problem is assembled as a convex QP in the stacked variable
//! x = (P; P_chg) with P the net storage powers (charging positive) and
//! P_chg the metered charging powers the firms are paid for. Variables are
//! firm-major within each step: P[k*M + m] is firm m at step k, and the
//! P_chg block starts at offset M*K.
//!
//! Constraint rows, in order: charging split (p - p_chg <= 0), charging
//! non-negativity, state-of-charge upper bounds, state-of-charge lower
//! bounds, the generation floor, then per-firm periodicity as equalities.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Infeasibility, MarketInstance, ModelError};
use crate::qp::{self, KktResiduals, QpProblem, SolveOptions, SparseRow};
use crate::scalar::Scalar;

/// Diagonal curvature added to the QP so the objective is strictly convex.
/// The cost only fixes per-step totals; how firms split a step is a flat
/// direction, and this term both selects the balanced split and keeps the
/// interior-point normal matrix well conditioned on that face. Firm totals
/// are pinned by bid gaps orders of magnitude larger, so the selection
/// never moves them.
pub const CURVATURE_REG: f64 = 1e-5;

/// Powers below this magnitude (MW) are snapped to zero after the solve.
pub const POWER_SNAP_MW: f64 = 1e-9;

/// Hard cap on M*K so the dense solver stays within its design envelope.
pub const MAX_FIRM_STEPS: usize = 512;

/// Variable and row layout of the assembled dispatch QP.
#[derive(Clone, Copy, Debug)]
pub struct QpLayout {
    pub firms: usize,
    pub steps: usize,
    /// Number of decision variables, 2*M*K.
    pub n: usize,
    pub rows_split: usize,
    pub rows_chg_nonneg: usize,
    pub rows_soc_upper: usize,
    pub rows_soc_lower: usize,
    pub rows_floor: usize,
    pub row_count: usize,
}

impl QpLayout {
    fn new(m: usize, k: usize) -> Self {
        let mk = m * k;
        Self {
            firms: m,
            steps: k,
            n: 2 * mk,
            rows_split: 0,
            rows_chg_nonneg: mk,
            rows_soc_upper: 2 * mk,
            rows_soc_lower: 3 * mk,
            rows_floor: 4 * mk,
            row_count: 4 * mk + k,
        }
    }

    /// Column of firm `m`'s net power at step `k`.
    #[inline]
    pub fn idx_p(&self, m: usize, k: usize) -> usize {
        k * self.firms + m
    }

    /// Column of firm `m`'s metered charging power at step `k`.
    #[inline]
    pub fn idx_chg(&self, m: usize, k: usize) -> usize {
        self.firms * self.steps + k * self.firms + m
    }
}

/// Assembled dispatch QP plus the affine map back to dollars:
/// true cost = objective_scale * qp_objective + objective_offset.
#[derive(Clone, Debug)]
pub struct DispatchQp<S> {
    pub problem: QpProblem<S>,
    pub layout: QpLayout,
    pub objective_scale: S,
    pub objective_offset: S,
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("no feasible dispatch exists: {0}")]
    Infeasible(Infeasibility),
    #[error("instance too large: {firm_steps} firm-steps exceeds the {cap} cap")]
    TooLarge { firm_steps: usize, cap: usize },
    #[error("dispatch solve failed: worst KKT residual {worst} after {iterations} iterations")]
    Numerical { worst: f64, iterations: usize },
}

/// Cost decomposition of a dispatch, all in dollars over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown<S> {
    /// Conventional generation cost sum over steps.
    pub generation: S,
    /// Payment to each storage firm for metered charging.
    pub payments: Vec<S>,
    pub total: S,
}

/// Solved dispatch with schedules, costs, and solver diagnostics.
///
/// `kkt` is measured at the solver's point against the assembled
/// (curvature-regularized) QP, before any equal-bid reallocation; the
/// reallocation preserves aggregates and costs but not stationarity of the
/// regularized objective, so primal checks on the final schedules live in
/// [`validate_dispatch`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DispatchSolution<S> {
    pub delta: S,
    /// Net storage power [firm][step], MW, charging positive.
    pub power: Vec<Vec<S>>,
    /// Metered charging power [firm][step], MW.
    pub charge_power: Vec<Vec<S>>,
    /// State of charge [firm][0..=steps], MWh.
    pub soc: Vec<Vec<S>>,
    /// Conventional generation [step], MW.
    pub gen: Vec<S>,
    pub cost: CostBreakdown<S>,
    /// Raw QP objective at the solver's point (scaled units).
    pub qp_objective: S,
    pub kkt: KktResiduals<S>,
    pub iterations: usize,
    pub polished: bool,
    /// Whether the equal-bid reallocation replaced the solver's split.
    pub remixed: bool,
}

impl<S: Scalar> DispatchSolution<S> {
    /// Energy charged by firm `m` over the horizon (MWh).
    pub fn charged_energy(&self, m: usize) -> S {
        self.charge_power[m].iter().copied().sum::<S>() * self.delta
    }
}

/// Build the dispatch QP for a market instance.
pub fn assemble_qp<S: Scalar>(market: &MarketInstance<S>) -> Result<DispatchQp<S>, DispatchError> {
    let m = market.m();
    let k = market.k();
    if m * k > MAX_FIRM_STEPS {
        return Err(DispatchError::TooLarge { firm_steps: m * k, cap: MAX_FIRM_STEPS });
    }
    let layout = QpLayout::new(m, k);
    let n = layout.n;
    let delta = market.delta();
    let a = market.gen.a;

    let mut q = crate::linalg::Mat::zeros(n, n);
    for kk in 0..k {
        for m1 in 0..m {
            for m2 in 0..m {
                q.add_at(layout.idx_p(m1, kk), layout.idx_p(m2, kk), S::one());
            }
        }
    }
    let reg = S::c(CURVATURE_REG);
    for i in 0..n {
        q.add_at(i, i, reg);
    }

    let mut r = vec![S::zero(); n];
    for kk in 0..k {
        for mm in 0..m {
            r[layout.idx_p(mm, kk)] = market.net_load[kk];
            r[layout.idx_chg(mm, kk)] = market.firms[mm].bid / a;
        }
    }

    let rows = layout.row_count;
    let mut g_rows: Vec<SparseRow<S>> = Vec::with_capacity(rows);
    let mut g_rhs: Vec<S> = Vec::with_capacity(rows);

    // p - p_chg <= 0
    for kk in 0..k {
        for mm in 0..m {
            g_rows.push(SparseRow::new(
                vec![layout.idx_p(mm, kk) as u32, layout.idx_chg(mm, kk) as u32],
                vec![S::one(), -S::one()],
            ));
            g_rhs.push(S::zero());
        }
    }
    // -p_chg <= 0
    for kk in 0..k {
        for mm in 0..m {
            g_rows.push(SparseRow::new(vec![layout.idx_chg(mm, kk) as u32], vec![-S::one()]));
            g_rhs.push(S::zero());
        }
    }
    // State of charge after step kk: sum_{j<=kk} p_m,j within [-e_0, e_max - e_0]/delta.
    for kk in 1..=k {
        for mm in 0..m {
            let cols: Vec<u32> = (0..kk).map(|j| layout.idx_p(mm, j) as u32).collect();
            g_rows.push(SparseRow::new(cols, vec![S::one(); kk]));
            g_rhs.push((market.firms[mm].e_max - market.firms[mm].e_0) / delta);
        }
    }
    for kk in 1..=k {
        for mm in 0..m {
            let cols: Vec<u32> = (0..kk).map(|j| layout.idx_p(mm, j) as u32).collect();
            g_rows.push(SparseRow::new(cols, vec![-S::one(); kk]));
            g_rhs.push(market.firms[mm].e_0 / delta);
        }
    }
    // Generation floor: -sum_m p_m,k <= net_load_k - p_gmin.
    for kk in 0..k {
        let cols: Vec<u32> = (0..m).map(|mm| layout.idx_p(mm, kk) as u32).collect();
        g_rows.push(SparseRow::new(cols, vec![-S::one(); m]));
        g_rhs.push(market.net_load[kk] - market.gen.p_gmin);
    }

    // Periodicity: each firm ends the horizon at its initial charge.
    let mut e_rows: Vec<SparseRow<S>> = Vec::with_capacity(m);
    for mm in 0..m {
        let cols: Vec<u32> = (0..k).map(|kk| layout.idx_p(mm, kk) as u32).collect();
        e_rows.push(SparseRow::new(cols, vec![S::one(); k]));
    }
    let e_rhs = vec![S::zero(); m];

    let mut offset = S::zero();
    for kk in 0..k {
        offset += market.gen.cost(market.net_load[kk], delta);
    }

    Ok(DispatchQp {
        problem: QpProblem { n, q, r, g_rows, g_rhs, e_rows, e_rhs },
        layout,
        objective_scale: a * delta,
        objective_offset: offset,
    })
}

/// Solve the dispatch problem with default solver options.
pub fn solve_dispatch<S: Scalar>(
    market: &MarketInstance<S>,
) -> Result<DispatchSolution<S>, DispatchError> {
    solve_dispatch_with(market, &SolveOptions::default())
}

pub fn solve_dispatch_with<S: Scalar>(
    market: &MarketInstance<S>,
    opts: &SolveOptions<S>,
) -> Result<DispatchSolution<S>, DispatchError> {
    if let Err(ModelError::Infeasible(detail)) = market.check_feasible() {
        return Err(DispatchError::Infeasible(detail));
    }
    let qp = assemble_qp(market)?;
    let sol = qp::solve(&qp.problem, opts).map_err(|e| match e {
        // The exact feasibility check passed, so a presolve contradiction
        // can only be numerical noise.
        qp::QpError::Inconsistent(_) => {
            DispatchError::Numerical { worst: f64::INFINITY, iterations: 0 }
        }
        qp::QpError::Numerical { worst, iterations } => {
            DispatchError::Numerical { worst, iterations }
        }
    })?;

    let m = market.m();
    let k = market.k();
    let snap = S::c(POWER_SNAP_MW);
    let mut power = vec![vec![S::zero(); k]; m];
    let mut charge = vec![vec![S::zero(); k]; m];
    for mm in 0..m {
        for kk in 0..k {
            let p = sol.x[qp.layout.idx_p(mm, kk)];
            let c = sol.x[qp.layout.idx_chg(mm, kk)];
            power[mm][kk] = if p.abs() < snap { S::zero() } else { p };
            charge[mm][kk] = if c.abs() < snap { S::zero() } else { c.max(S::zero()) };
        }
    }

    let remixed = equal_bid_remix(market, &mut power, &mut charge);

    let delta = market.delta();
    let mut soc = vec![vec![S::zero(); k + 1]; m];
    for mm in 0..m {
        soc[mm][0] = market.firms[mm].e_0;
        for kk in 0..k {
            soc[mm][kk + 1] = soc[mm][kk] + delta * power[mm][kk];
        }
    }
    let gen: Vec<S> = (0..k)
        .map(|kk| market.net_load[kk] + (0..m).map(|mm| power[mm][kk]).sum::<S>())
        .collect();

    let generation: S = gen.iter().map(|&g| market.gen.cost(g, delta)).sum();
    let payments: Vec<S> = (0..m)
        .map(|mm| market.firms[mm].bid * delta * charge[mm].iter().copied().sum::<S>())
        .collect();
    let total = generation + payments.iter().copied().sum::<S>();

    Ok(DispatchSolution {
        delta,
        power,
        charge_power: charge,
        soc,
        gen,
        cost: CostBreakdown { generation, payments, total },
        qp_objective: sol.objective,
        kkt: sol.kkt,
        iterations: sol.iterations,
        polished: sol.polished,
        remixed,
    })
}

/// Canonical reallocation for a two-firm tie.
///
/// When both firms bid the same price the QP's split between them is
/// degenerate: any division of the aggregate schedule that respects the
/// capacities has identical cost, and the solver lands wherever its
/// trajectory happened to end. Downstream payoff comparisons need a
/// deterministic canonical point, so the aggregate is reassigned
/// proportionally with per-firm targets
/// `t_1 = min(max(V/2, V - cap_2), cap_1)`, `t_2 = V - t_1`,
/// where V is the peak of the aggregate state-of-charge path (in power
/// units) and cap_m the per-firm headroom. The split is equal whenever both
/// capacities allow it and saturates the smaller firm otherwise.
///
/// Applies only when per-step powers are sign-aligned (proportional
/// reassignment then provably preserves the aggregate, the generation cost,
/// and total payments); reverts if the reassigned schedules violate any
/// constraint numerically.
fn equal_bid_remix<S: Scalar>(
    market: &MarketInstance<S>,
    power: &mut [Vec<S>],
    charge: &mut [Vec<S>],
) -> bool {
    let m = market.m();
    let k = market.k();
    if m != 2 || market.firms[0].bid != market.firms[1].bid {
        return false;
    }
    let align_tol = S::c(1e-7);
    for kk in 0..k {
        let (p1, p2) = (power[0][kk], power[1][kk]);
        if (p1 > align_tol && p2 < -align_tol) || (p1 < -align_tol && p2 > align_tol) {
            return false;
        }
    }
    let delta = market.delta();
    let caps = [
        (market.firms[0].e_max - market.firms[0].e_0) / delta,
        (market.firms[1].e_max - market.firms[1].e_0) / delta,
    ];
    let mut cum = S::zero();
    let mut peak = S::zero();
    let agg: Vec<S> = (0..k).map(|kk| power[0][kk] + power[1][kk]).collect();
    for &p in &agg {
        cum += p;
        peak = peak.max(cum);
    }
    if peak <= S::c(POWER_SNAP_MW) {
        return false;
    }
    let t1 = (peak * S::c(0.5)).max(peak - caps[1]).min(caps[0]);
    let alpha = [t1 / peak, (peak - t1) / peak];

    let proposed: Vec<Vec<S>> =
        (0..2).map(|mm| agg.iter().map(|&p| p * alpha[mm]).collect()).collect();

    // Revert unless the proportional schedules are primal feasible; a
    // nonzero initial charge can push the lower state-of-charge bound past
    // what proportionality guarantees.
    let tol = S::c(1e-7);
    for mm in 0..2 {
        let mut e = market.firms[mm].e_0;
        for kk in 0..k {
            e += delta * proposed[mm][kk];
            if e < -tol || e > market.firms[mm].e_max + tol {
                return false;
            }
        }
        if (e - market.firms[mm].e_0).abs() > tol {
            return false;
        }
    }

    for mm in 0..2 {
        for kk in 0..k {
            power[mm][kk] = proposed[mm][kk];
            charge[mm][kk] = proposed[mm][kk].max(S::zero());
        }
    }
    true
}

/// Primal checks on final schedules: generation floor, state-of-charge
/// bounds, periodicity, and the charging-split identity
/// p_chg = max(p, 0). Returns human-readable violations; empty means valid.
pub fn validate_dispatch<S: Scalar>(
    market: &MarketInstance<S>,
    sol: &DispatchSolution<S>,
    tol: S,
) -> Vec<String> {
    let mut out = Vec::new();
    let m = market.m();
    let k = market.k();
    for kk in 0..k {
        if sol.gen[kk] < market.gen.p_gmin - tol {
            out.push(format!(
                "generation {} below floor {} at step {kk}",
                sol.gen[kk], market.gen.p_gmin
            ));
        }
    }
    for mm in 0..m {
        let e_max = market.firms[mm].e_max;
        for kk in 0..=k {
            let e = sol.soc[mm][kk];
            if e < -tol * e_max.max(S::one()) || e > e_max + tol * e_max.max(S::one()) {
                out.push(format!("state of charge {e} outside [0, {e_max}] for firm {mm} at step {kk}"));
            }
        }
        if (sol.soc[mm][k] - market.firms[mm].e_0).abs() > tol * e_max.max(S::one()) {
            out.push(format!(
                "firm {mm} ends at {} MWh, started at {} MWh",
                sol.soc[mm][k], market.firms[mm].e_0
            ));
        }
        for kk in 0..k {
            let want = sol.power[mm][kk].max(S::zero());
            if (sol.charge_power[mm][kk] - want).abs() > tol {
                out.push(format!(
                    "metered charging {} differs from positive part {} for firm {mm} at step {kk}",
                    sol.charge_power[mm][kk], want
                ));
            }
        }
    }
    out
}

/// Dump the assembled QP as labeled sparse triplets, one `row col value`
/// line per entry, for offline inspection.
pub fn write_qp_debug<S: Scalar, W: io::Write>(qp: &DispatchQp<S>, w: &mut W) -> io::Result<()> {
    writeln!(w, "section Q")?;
    for i in 0..qp.problem.n {
        for j in 0..qp.problem.n {
            let v = qp.problem.q.get(i, j);
            if v != S::zero() {
                writeln!(w, "{i} {j} {v}")?;
            }
        }
    }
    writeln!(w, "section r")?;
    for (i, v) in qp.problem.r.iter().enumerate() {
        writeln!(w, "{i} 0 {v}")?;
    }
    writeln!(w, "section Hineq")?;
    for (i, row) in qp.problem.g_rows.iter().enumerate() {
        for (c, v) in row.cols.iter().zip(&row.vals) {
            writeln!(w, "{i} {c} {v}")?;
        }
    }
    writeln!(w, "section g")?;
    for (i, v) in qp.problem.g_rhs.iter().enumerate() {
        writeln!(w, "{i} 0 {v}")?;
    }
    writeln!(w, "section Heq")?;
    for (i, row) in qp.problem.e_rows.iter().enumerate() {
        for (c, v) in row.cols.iter().zip(&row.vals) {
            writeln!(w, "{i} {c} {v}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BidGrid, GeneratorModel, StorageFirm, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn four_step_market(firms: Vec<StorageFirm<f64>>) -> MarketInstance<f64> {
        MarketInstance::new(
            TimeGrid::hourly(4).unwrap(),
            vec![30.0, -10.0, 20.0, 60.0],
            GeneratorModel::new(0.02, 0.0, 5.0).unwrap(),
            firms,
            BidGrid::new(1.0, 100.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_firm_reference_dispatch() {
        // Forced absorption of 15 MW in the dip hour, discharged into the
        // peak hour; charging beyond the forced minimum never pays at an
        // 8 $/MWh bid.
        let market = four_step_market(vec![StorageFirm::new(40.0, 0.0, 8.0).unwrap()]);
        let sol = solve_dispatch(&market).unwrap();
        let expect = [0.0, 15.0, 0.0, -15.0];
        for k in 0..4 {
            assert_abs_diff_eq!(sol.power[0][k], expect[k], epsilon = 1e-7);
            assert_abs_diff_eq!(sol.charge_power[0][k], expect[k].max(0.0), epsilon = 1e-7);
        }
        assert_abs_diff_eq!(sol.cost.generation, 33.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.cost.payments[0], 120.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.cost.total, 153.5, epsilon = 1e-6);
        // QP objective maps back to dollars through the affine scale, up to
        // the curvature tie-break term the dollar cost excludes.
        let qp = assemble_qp(&market).unwrap();
        assert_abs_diff_eq!(
            qp.objective_scale * sol.qp_objective + qp.objective_offset,
            sol.cost.total,
            epsilon = 1e-3
        );
        assert!(sol.kkt.max() < 1e-6, "kkt {:?}", sol.kkt);
        assert!(validate_dispatch(&market, &sol, 1e-6).is_empty());
        assert_abs_diff_eq!(sol.charged_energy(0), 15.0, epsilon = 1e-7);
    }

    #[test]
    fn equal_bids_use_canonical_split() {
        // 5 MWh firm saturates, 30 MWh firm takes the rest of the 15 MW dip.
        let market = four_step_market(vec![
            StorageFirm::new(5.0, 0.0, 8.0).unwrap(),
            StorageFirm::new(30.0, 0.0, 8.0).unwrap(),
        ]);
        let sol = solve_dispatch(&market).unwrap();
        assert!(sol.remixed);
        let expect1 = [0.0, 5.0, 0.0, -5.0];
        let expect2 = [0.0, 10.0, 0.0, -10.0];
        for k in 0..4 {
            assert_abs_diff_eq!(sol.power[0][k], expect1[k], epsilon = 1e-9);
            assert_abs_diff_eq!(sol.power[1][k], expect2[k], epsilon = 1e-9);
        }
        assert!(validate_dispatch(&market, &sol, 1e-6).is_empty());
        // Equal headroom splits the dip evenly.
        let even = four_step_market(vec![
            StorageFirm::new(30.0, 0.0, 8.0).unwrap(),
            StorageFirm::new(30.0, 0.0, 8.0).unwrap(),
        ]);
        let sol = solve_dispatch(&even).unwrap();
        assert_abs_diff_eq!(sol.power[0][1], 7.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.power[1][1], 7.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.cost.payments[0], sol.cost.payments[1], epsilon = 1e-9);
    }

    #[test]
    fn cheaper_bid_captures_forced_charging() {
        let market = four_step_market(vec![
            StorageFirm::new(40.0, 0.0, 10.0).unwrap(),
            StorageFirm::new(40.0, 0.0, 20.0).unwrap(),
        ]);
        let sol = solve_dispatch(&market).unwrap();
        assert_abs_diff_eq!(sol.power[0][1], 15.0, epsilon = 1e-6);
        for k in 0..4 {
            assert!(sol.power[1][k].abs() < 1e-6, "firm 2 moved: {:?}", sol.power[1]);
        }
        assert!(!sol.remixed);
        assert_abs_diff_eq!(sol.cost.payments[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_market_is_rejected_before_solving() {
        let market = MarketInstance::new(
            TimeGrid::hourly(4).unwrap(),
            vec![30.0, -10.0, 20.0, 60.0],
            GeneratorModel::new(0.02, 0.0, 5.0).unwrap(),
            vec![StorageFirm::new(40.0, 0.0, 8.0).unwrap()],
            BidGrid::new(1.0, 100.0).unwrap(),
        )
        .unwrap();
        // Shrink capacity below the forced 15 MWh after construction to hit
        // the solver-side guard.
        let mut broken = market;
        broken.firms[0].e_max = 10.0;
        assert!(matches!(solve_dispatch(&broken), Err(DispatchError::Infeasible(_))));
    }

    #[test]
    fn validation_flags_corrupted_schedules() {
        let market = four_step_market(vec![StorageFirm::new(40.0, 0.0, 8.0).unwrap()]);
        let mut sol = solve_dispatch(&market).unwrap();
        sol.gen[1] = 0.0;
        sol.soc[0][2] = 80.0;
        sol.charge_power[0][3] = 5.0;
        let violations = validate_dispatch(&market, &sol, 1e-6);
        assert_eq!(violations.len(), 3, "{violations:?}");
    }

    #[test]
    fn debug_dump_lists_all_sections() {
        let market = four_step_market(vec![StorageFirm::new(40.0, 0.0, 8.0).unwrap()]);
        let qp = assemble_qp(&market).unwrap();
        let mut buf = Vec::new();
        write_qp_debug(&qp, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for section in ["section Q", "section r", "section Hineq", "section g", "section Heq"] {
            assert!(text.contains(section), "missing {section}");
        }
        // Bid over marginal cost slope lands in the charging block of r.
        assert!(text.contains("4 0 400"), "{text}");
    }

    #[test]
    fn oversized_instance_is_refused() {
        let k = 300;
        let net: Vec<f64> = vec![100.0; k];
        let market = MarketInstance::new(
            TimeGrid::hourly(k).unwrap(),
            net,
            GeneratorModel::new(0.02, 0.0, 10.0).unwrap(),
            vec![StorageFirm::new(40.0, 0.0, 8.0).unwrap(); 2],
            BidGrid::new(1.0, 100.0).unwrap(),
        )
        .unwrap();
        assert!(matches!(solve_dispatch(&market), Err(DispatchError::TooLarge { .. })));
    }
}
