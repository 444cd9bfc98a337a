//! Dense convex quadratic programming:
//!
//! ```text
//! minimize   0.5 x'Qx + r'x
//! subject to Gx <= g,  Ex = e
//! ```
//!
//! with Q symmetric positive semidefinite (callers add a small diagonal
//! regularization when Q is singular). The solver is a Mehrotra
//! predictor-corrector interior-point method followed by an active-set
//! polish step that re-solves the equality-constrained KKT system for the
//! fixed active set and refines it against the unregularized matrix. The
//! polish recovers near-machine-precision residuals that the interior-point
//! iteration alone cannot reach on degenerate problems.
//!
//! The entire pipeline is deterministic: no randomization, no threading, a
//! fixed iteration order. Identical inputs produce bitwise-identical
//! solutions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_in_place, cholesky_solve, ldlt_in_place, ldlt_solve, Mat};
use crate::scalar::{dot, inf_norm, Scalar};

/// Sparse constraint row: sorted unique column indices with coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseRow<S> {
    pub cols: Vec<u32>,
    pub vals: Vec<S>,
}

impl<S: Scalar> SparseRow<S> {
    pub fn new(cols: Vec<u32>, vals: Vec<S>) -> Self {
        debug_assert_eq!(cols.len(), vals.len());
        debug_assert!(cols.windows(2).all(|w| w[0] < w[1]), "columns must be sorted unique");
        Self { cols, vals }
    }

    #[inline]
    pub fn dot(&self, x: &[S]) -> S {
        let mut acc = S::zero();
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            acc += v * x[c as usize];
        }
        acc
    }

    /// out += coeff * row, scattered into a dense vector.
    #[inline]
    pub fn axpy_into(&self, coeff: S, out: &mut [S]) {
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            out[c as usize] += coeff * v;
        }
    }

    /// Whether this row equals `lambda * other` for some scalar, and if so
    /// which lambda (matched on identical sparsity, values to 1e-12 relative).
    fn scalar_multiple_of(&self, other: &SparseRow<S>) -> Option<S> {
        if self.cols != other.cols || self.cols.is_empty() {
            return None;
        }
        let lambda = self.vals[0] / other.vals[0];
        let tol = S::c(1e-12);
        for (&a, &b) in self.vals.iter().zip(&other.vals) {
            let diff = a - lambda * b;
            if diff.abs() > tol * a.abs().max(b.abs()).max(S::one()) {
                return None;
            }
        }
        Some(lambda)
    }
}

/// Problem data. `q` stores the full symmetric matrix.
#[derive(Clone, Debug)]
pub struct QpProblem<S> {
    pub n: usize,
    pub q: Mat<S>,
    pub r: Vec<S>,
    pub g_rows: Vec<SparseRow<S>>,
    pub g_rhs: Vec<S>,
    pub e_rows: Vec<SparseRow<S>>,
    pub e_rhs: Vec<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions<S> {
    /// Interior-point iteration cap.
    pub max_iter: usize,
    /// Relative tolerance on scaled residuals and duality gap.
    pub tol: S,
    /// Absolute ceiling on the worst KKT residual for a solve to count as
    /// successful after polish.
    pub accept_tol: S,
}

impl<S: Scalar> Default for SolveOptions<S> {
    fn default() -> Self {
        Self { max_iter: 60, tol: S::c(1e-10), accept_tol: S::c(1e-6) }
    }
}

/// Worst-case KKT residuals at a candidate solution, all absolute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals<S> {
    /// inf-norm of Qx + r + G'z + E'y.
    pub stationarity: S,
    /// Largest violation of Gx <= g (0 when feasible).
    pub primal_ineq: S,
    /// inf-norm of Ex - e.
    pub primal_eq: S,
    /// Largest |(g - Gx)_i * z_i|.
    pub complementarity: S,
    /// Largest negative part of z (0 when all multipliers are signed).
    pub dual_sign: S,
}

impl<S: Scalar> KktResiduals<S> {
    pub fn max(&self) -> S {
        self.stationarity
            .max(self.primal_ineq)
            .max(self.primal_eq)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution<S> {
    pub x: Vec<S>,
    /// Inequality multipliers, one per input row (presolved rows carry 0).
    pub z: Vec<S>,
    /// Equality multipliers.
    pub y: Vec<S>,
    /// 0.5 x'Qx + r'x at the returned point.
    pub objective: S,
    pub iterations: usize,
    pub kkt: KktResiduals<S>,
    /// Whether the active-set polish was accepted over the raw interior point.
    pub polished: bool,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("inconsistent constraints: {0}")]
    Inconsistent(String),
    #[error("solver failed to reach the required accuracy: worst residual {worst} after {iterations} iterations")]
    Numerical { worst: f64, iterations: usize },
}

/// KKT residuals of (x, z, y) for `p`. Public so callers can audit solutions
/// against the exact problem data.
pub fn kkt_residuals<S: Scalar>(p: &QpProblem<S>, x: &[S], z: &[S], y: &[S]) -> KktResiduals<S> {
    let mut grad = vec![S::zero(); p.n];
    p.q.matvec(x, &mut grad);
    for (gi, &ri) in grad.iter_mut().zip(&p.r) {
        *gi += ri;
    }
    for (row, &zi) in p.g_rows.iter().zip(z) {
        row.axpy_into(zi, &mut grad);
    }
    for (row, &yi) in p.e_rows.iter().zip(y) {
        row.axpy_into(yi, &mut grad);
    }
    let mut out = KktResiduals {
        stationarity: inf_norm(&grad),
        ..KktResiduals::default()
    };
    for ((row, &gi), &zi) in p.g_rows.iter().zip(&p.g_rhs).zip(z) {
        let slack = gi - row.dot(x);
        out.primal_ineq = out.primal_ineq.max(-slack);
        out.complementarity = out.complementarity.max((slack.max(S::zero()) * zi).abs());
        out.dual_sign = out.dual_sign.max(-zi);
    }
    out.primal_ineq = out.primal_ineq.max(S::zero());
    out.dual_sign = out.dual_sign.max(S::zero());
    for (row, &ei) in p.e_rows.iter().zip(&p.e_rhs) {
        out.primal_eq = out.primal_eq.max((row.dot(x) - ei).abs());
    }
    out
}

fn objective<S: Scalar>(p: &QpProblem<S>, x: &[S]) -> S {
    let mut qx = vec![S::zero(); p.n];
    p.q.matvec(x, &mut qx);
    let mut obj = S::zero();
    for i in 0..p.n {
        obj += (S::c(0.5) * qx[i] + p.r[i]) * x[i];
    }
    obj
}

/// Solve the QP. Runs an implied-equality presolve, the interior-point loop,
/// and the polish pass; returns the best point found if it meets
/// `opts.accept_tol`, an error otherwise.
pub fn solve<S: Scalar>(p: &QpProblem<S>, opts: &SolveOptions<S>) -> Result<QpSolution<S>, QpError> {
    debug_assert_eq!(p.r.len(), p.n);
    debug_assert_eq!(p.g_rows.len(), p.g_rhs.len());
    debug_assert_eq!(p.e_rows.len(), p.e_rhs.len());

    // Presolve: an inequality row that is a scalar multiple of an equality row
    // is either redundant (positive constant slack), an implied equality
    // (zero slack, which would destroy the strict interior the interior-point
    // method needs), or a contradiction. Drop the first two kinds; their
    // multiplier is fixed at zero, which completes the KKT system exactly.
    let mut keep: Vec<usize> = Vec::with_capacity(p.g_rows.len());
    for (i, (row, &gi)) in p.g_rows.iter().zip(&p.g_rhs).enumerate() {
        let mut drop = false;
        for (erow, &ei) in p.e_rows.iter().zip(&p.e_rhs) {
            if let Some(lambda) = row.scalar_multiple_of(erow) {
                let slack = gi - lambda * ei;
                let scale = gi.abs().max(ei.abs()).max(S::one());
                if slack < -S::c(1e-9) * scale {
                    return Err(QpError::Inconsistent(format!(
                        "inequality row {i} contradicts an equality row by {slack}"
                    )));
                }
                drop = true;
                break;
            }
        }
        if !drop {
            keep.push(i);
        }
    }

    let reduced;
    let work = if keep.len() == p.g_rows.len() {
        p
    } else {
        reduced = QpProblem {
            n: p.n,
            q: p.q.clone(),
            r: p.r.clone(),
            g_rows: keep.iter().map(|&i| p.g_rows[i].clone()).collect(),
            g_rhs: keep.iter().map(|&i| p.g_rhs[i]).collect(),
            e_rows: p.e_rows.clone(),
            e_rhs: p.e_rhs.clone(),
        };
        &reduced
    };

    let mut sol = solve_presolved(work, opts)?;

    if keep.len() != p.g_rows.len() {
        let mut z_full = vec![S::zero(); p.g_rows.len()];
        for (slot, &i) in keep.iter().enumerate() {
            z_full[i] = sol.z[slot];
        }
        sol.z = z_full;
        sol.kkt = kkt_residuals(p, &sol.x, &sol.z, &sol.y);
        sol.objective = objective(p, &sol.x);
    }
    Ok(sol)
}

fn solve_presolved<S: Scalar>(
    p: &QpProblem<S>,
    opts: &SolveOptions<S>,
) -> Result<QpSolution<S>, QpError> {
    let n = p.n;
    let mi = p.g_rows.len();
    let me = p.e_rows.len();

    if mi == 0 {
        // Pure equality-constrained QP: one KKT solve.
        let (x, _z, y) = active_kkt_solve(p, &[])
            .ok_or(QpError::Numerical { worst: f64::INFINITY, iterations: 0 })?;
        let kkt = kkt_residuals(p, &x, &[], &y);
        let worst = kkt.max();
        if worst > opts.accept_tol {
            return Err(QpError::Numerical { worst: worst.as_f64(), iterations: 0 });
        }
        return Ok(QpSolution {
            objective: objective(p, &x),
            x,
            z: Vec::new(),
            y,
            iterations: 0,
            kkt,
            polished: true,
        });
    }

    let (mut x, mut s, mut z, mut y) = initial_point(p)?;

    let tau = S::c(0.995);
    let w_lo = S::c(1e-12);
    let w_hi = S::c(1e14);
    let g_scale = S::one() + inf_norm(&p.g_rhs).max(inf_norm(&p.e_rhs));
    let r_scale = S::one() + inf_norm(&p.r);

    let mut iterations = 0;
    let mut best: Option<BestIterate<S>> = None;
    let mut stalled = 0usize;

    for iter in 0..opts.max_iter {
        iterations = iter;

        // Residuals at the current iterate.
        let mut rd = vec![S::zero(); n];
        p.q.matvec(&x, &mut rd);
        for i in 0..n {
            rd[i] += p.r[i];
        }
        for (row, &zi) in p.g_rows.iter().zip(&z) {
            row.axpy_into(zi, &mut rd);
        }
        for (row, &yi) in p.e_rows.iter().zip(&y) {
            row.axpy_into(yi, &mut rd);
        }
        let rp: Vec<S> = (0..mi).map(|i| p.g_rows[i].dot(&x) + s[i] - p.g_rhs[i]).collect();
        let re: Vec<S> = (0..me).map(|i| p.e_rows[i].dot(&x) - p.e_rhs[i]).collect();
        let mu = s.iter().zip(&z).map(|(&si, &zi)| si * zi).sum::<S>() / S::c(mi as f64);

        let track = kkt_residuals(p, &x, &z, &y).max();
        if best.as_ref().map_or(true, |(b, _, _, _)| track < *b) {
            best = Some((track, x.clone(), z.clone(), y.clone()));
            stalled = 0;
        } else {
            stalled += 1;
        }
        // The KKT maximum is not monotone along the central path, so spikes
        // alone are fine; a long run without a new best means the Newton
        // directions have degraded past recovery. Stop and let the
        // active-set polish finish from the best iterate.
        if stalled >= 25 {
            break;
        }

        let obj_scale = S::one() + objective(p, &x).abs();
        if inf_norm(&rd) <= opts.tol * r_scale
            && inf_norm(&rp) <= opts.tol * g_scale
            && inf_norm(&re) <= opts.tol * g_scale
            && mu * S::c(mi as f64) <= opts.tol * obj_scale
        {
            break;
        }

        // Normal matrix N = Q + G' diag(z/s) G, with the ratio clipped to keep
        // the factorization finite as the iterates approach the boundary.
        let w: Vec<S> = s
            .iter()
            .zip(&z)
            .map(|(&si, &zi)| (zi / si).max(w_lo).min(w_hi))
            .collect();
        let mut nmat = p.q.clone();
        for (row, &wi) in p.g_rows.iter().zip(&w) {
            for (ai, &va) in row.cols.iter().zip(&row.vals) {
                for (bi, &vb) in row.cols.iter().zip(&row.vals) {
                    nmat.add_at(*ai as usize, *bi as usize, wi * va * vb);
                }
            }
        }
        let chol = factor_spd(nmat)?;

        // Schur complement for the equality multipliers.
        let mut ninv_et = Mat::zeros(n, me);
        let mut schur_chol = None;
        if me > 0 {
            let mut col = vec![S::zero(); n];
            for j in 0..me {
                col.iter_mut().for_each(|v| *v = S::zero());
                p.e_rows[j].axpy_into(S::one(), &mut col);
                let sol = chol_solve_vec(&chol, &col);
                for i in 0..n {
                    ninv_et.set(i, j, sol[i]);
                }
            }
            let mut schur = Mat::zeros(me, me);
            for i in 0..me {
                for j in 0..me {
                    let mut acc = S::zero();
                    for (ci, &vi) in p.e_rows[i].cols.iter().zip(&p.e_rows[i].vals) {
                        acc += vi * ninv_et.get(*ci as usize, j);
                    }
                    schur.set(i, j, acc);
                }
            }
            schur_chol = Some(factor_spd(schur)?);
        }

        let solve_newton = |rc: &[S]| -> (Vec<S>, Vec<S>, Vec<S>, Vec<S>) {
            // rhs_x = -rd - G'((z*rp - rc)/s)
            let mut rhs_x: Vec<S> = rd.iter().map(|&v| -v).collect();
            for i in 0..mi {
                let coeff = (z[i] * rp[i] - rc[i]) / s[i];
                p.g_rows[i].axpy_into(-coeff, &mut rhs_x);
            }
            let (dx, dy);
            if me > 0 {
                let base = chol_solve_vec(&chol, &rhs_x);
                // (E N^-1 E') dy = E base + re
                let mut rhs_y = vec![S::zero(); me];
                for i in 0..me {
                    rhs_y[i] = p.e_rows[i].dot(&base) + re[i];
                }
                let dyv = chol_solve_vec(schur_chol.as_ref().unwrap(), &rhs_y);
                let mut shifted = rhs_x.clone();
                for j in 0..me {
                    p.e_rows[j].axpy_into(-dyv[j], &mut shifted);
                }
                dx = chol_solve_vec(&chol, &shifted);
                dy = dyv;
            } else {
                dx = chol_solve_vec(&chol, &rhs_x);
                dy = Vec::new();
            }
            let mut ds = vec![S::zero(); mi];
            let mut dz = vec![S::zero(); mi];
            for i in 0..mi {
                ds[i] = -rp[i] - p.g_rows[i].dot(&dx);
                dz[i] = (-rc[i] - z[i] * ds[i]) / s[i];
            }
            (dx, ds, dz, dy)
        };

        // Affine predictor.
        let rc_aff: Vec<S> = s.iter().zip(&z).map(|(&si, &zi)| si * zi).collect();
        let (_, ds_aff, dz_aff, _) = solve_newton(&rc_aff);
        let aff_p = step_length(&s, &ds_aff);
        let aff_d = step_length(&z, &dz_aff);
        let mu_aff = (0..mi)
            .map(|i| (s[i] + aff_p * ds_aff[i]) * (z[i] + aff_d * dz_aff[i]))
            .sum::<S>()
            / S::c(mi as f64);
        let sigma = {
            let ratio = (mu_aff / mu).max(S::zero()).min(S::one());
            ratio * ratio * ratio
        };

        // Corrector with centering.
        let rc: Vec<S> = (0..mi)
            .map(|i| s[i] * z[i] + ds_aff[i] * dz_aff[i] - sigma * mu)
            .collect();
        let (dx, ds, dz, dy) = solve_newton(&rc);

        // Separate primal and dual steps; a blocking dual no longer freezes
        // the primal tail (and vice versa), which matters near degenerate
        // corners where a slack must be driven all the way to zero.
        let alpha_p = (tau * step_length(&s, &ds)).min(S::one());
        let alpha_d = (tau * step_length(&z, &dz)).min(S::one());
        if std::env::var_os("QP_TRACE").is_some() {
            eprintln!(
                "iter {iter:>3} mu {:.3e} sigma {:.3e} a_p {:.3e} a_d {:.3e} kkt {:.3e}",
                mu.as_f64(),
                sigma.as_f64(),
                alpha_p.as_f64(),
                alpha_d.as_f64(),
                track.as_f64()
            );
        }
        for i in 0..n {
            x[i] += alpha_p * dx[i];
        }
        for i in 0..mi {
            s[i] += alpha_p * ds[i];
            z[i] += alpha_d * dz[i];
        }
        for j in 0..me {
            y[j] += alpha_d * dy[j];
        }
        iterations = iter + 1;
    }

    let (ipm_worst, bx, bz, by) = best.expect("at least one iterate recorded");
    let (mut out_x, mut out_z, mut out_y, mut out_worst) = (bx, bz, by, ipm_worst);
    let mut polished = false;

    if let Some((px, pz, py)) = polish(p, &out_x, &out_z, opts.accept_tol) {
        let pk = kkt_residuals(p, &px, &pz, &py);
        if std::env::var_os("QP_TRACE").is_some() {
            eprintln!(
                "polish candidate: stat {:.3e} p_ineq {:.3e} p_eq {:.3e} comp {:.3e} dual {:.3e} (ipm best {:.3e})",
                pk.stationarity.as_f64(),
                pk.primal_ineq.as_f64(),
                pk.primal_eq.as_f64(),
                pk.complementarity.as_f64(),
                pk.dual_sign.as_f64(),
                out_worst.as_f64()
            );
        }
        if pk.max() < out_worst {
            out_x = px;
            out_z = pz;
            out_y = py;
            out_worst = pk.max();
            polished = true;
        }
    }

    // Degenerate corners can stall with a tiny dual left on a clearly
    // inactive row, so complementarity dominates the residual while the
    // primal point is fine. Zeroing those duals is one more candidate;
    // keep it only when the worst residual improves.
    {
        let mut tz = out_z.clone();
        let mut changed = false;
        for i in 0..mi {
            let slack = p.g_rhs[i] - p.g_rows[i].dot(&out_x);
            if tz[i] > S::zero() && slack > tz[i] {
                tz[i] = S::zero();
                changed = true;
            }
        }
        if changed {
            let tk = kkt_residuals(p, &out_x, &tz, &out_y);
            if tk.max() < out_worst {
                out_z = tz;
                out_worst = tk.max();
            }
        }
    }

    if out_worst > opts.accept_tol {
        return Err(QpError::Numerical { worst: out_worst.as_f64(), iterations });
    }
    let kkt = kkt_residuals(p, &out_x, &out_z, &out_y);
    Ok(QpSolution {
        objective: objective(p, &out_x),
        x: out_x,
        z: out_z,
        y: out_y,
        iterations,
        kkt,
        polished,
    })
}

fn chol_solve_vec<S: Scalar>(l: &Mat<S>, b: &[S]) -> Vec<S> {
    let mut out = b.to_vec();
    cholesky_solve(l, &mut out);
    out
}

fn ldlt_solve_vec<S: Scalar>(f: &Mat<S>, b: &[S]) -> Vec<S> {
    let mut out = b.to_vec();
    ldlt_solve(f, &mut out);
    out
}

fn factor_spd<S: Scalar>(mut m: Mat<S>) -> Result<Mat<S>, QpError> {
    let n = m.nrows();
    let mut trace = S::zero();
    for i in 0..n {
        trace += m.get(i, i);
    }
    let mut bump = S::c(1e-12) * (trace / S::c(n as f64)).max(S::one());
    for attempt in 0..6 {
        let mut trial = m.clone();
        if cholesky_in_place(&mut trial).is_ok() {
            return Ok(trial);
        }
        if attempt == 5 {
            break;
        }
        for i in 0..n {
            m.add_at(i, i, bump);
        }
        bump *= S::c(100.0);
    }
    Err(QpError::Numerical { worst: f64::INFINITY, iterations: 0 })
}

/// Largest step in [0, 1] keeping v + alpha*dv strictly positive.
fn step_length<S: Scalar>(v: &[S], dv: &[S]) -> S {
    let mut alpha = S::one();
    for (&vi, &di) in v.iter().zip(dv) {
        if di < S::zero() {
            alpha = alpha.min(-vi / di);
        }
    }
    alpha
}

/// Lowest KKT residual seen so far with its iterate (worst, x, z, y).
type BestIterate<S> = (S, Vec<S>, Vec<S>, Vec<S>);

/// Starting iterate (x, s, z, y).
type StartPoint<S> = (Vec<S>, Vec<S>, Vec<S>, Vec<S>);

/// Mehrotra starting point: solve the equality-constrained least-squares
/// relaxation, then shift slacks and multipliers into the positive orthant.
fn initial_point<S: Scalar>(p: &QpProblem<S>) -> Result<StartPoint<S>, QpError> {
    let n = p.n;
    let mi = p.g_rows.len();
    let me = p.e_rows.len();

    let mut nmat = p.q.clone();
    for row in &p.g_rows {
        for (ai, &va) in row.cols.iter().zip(&row.vals) {
            for (bi, &vb) in row.cols.iter().zip(&row.vals) {
                nmat.add_at(*ai as usize, *bi as usize, va * vb);
            }
        }
    }
    for i in 0..n {
        nmat.add_at(i, i, S::c(1e-10));
    }
    let chol = factor_spd(nmat)?;

    // rhs = -r + G'g
    let mut rhs: Vec<S> = p.r.iter().map(|&v| -v).collect();
    for (row, &gi) in p.g_rows.iter().zip(&p.g_rhs) {
        row.axpy_into(gi, &mut rhs);
    }

    let x;
    let mut y = vec![S::zero(); me];
    if me > 0 {
        let base = chol_solve_vec(&chol, &rhs);
        let mut ninv_et = Mat::zeros(n, me);
        let mut col = vec![S::zero(); n];
        for j in 0..me {
            col.iter_mut().for_each(|v| *v = S::zero());
            p.e_rows[j].axpy_into(S::one(), &mut col);
            let sol = chol_solve_vec(&chol, &col);
            for i in 0..n {
                ninv_et.set(i, j, sol[i]);
            }
        }
        let mut schur = Mat::zeros(me, me);
        for i in 0..me {
            for j in 0..me {
                let mut acc = S::zero();
                for (ci, &vi) in p.e_rows[i].cols.iter().zip(&p.e_rows[i].vals) {
                    acc += vi * ninv_et.get(*ci as usize, j);
                }
                schur.set(i, j, acc);
            }
        }
        let schur_chol = factor_spd(schur)?;
        let mut rhs_y = vec![S::zero(); me];
        for i in 0..me {
            rhs_y[i] = p.e_rows[i].dot(&base) - p.e_rhs[i];
        }
        y = chol_solve_vec(&schur_chol, &rhs_y);
        let mut shifted = rhs;
        for j in 0..me {
            p.e_rows[j].axpy_into(-y[j], &mut shifted);
        }
        x = chol_solve_vec(&chol, &shifted);
    } else {
        x = chol_solve_vec(&chol, &rhs);
    }

    let mut s = vec![S::zero(); mi];
    let mut z = vec![S::zero(); mi];
    for i in 0..mi {
        let resid = p.g_rows[i].dot(&x) - p.g_rhs[i];
        s[i] = -resid;
        z[i] = resid;
    }
    let ds = s.iter().fold(S::zero(), |a, &v| a.max(-v * S::c(1.5)));
    let dz = z.iter().fold(S::zero(), |a, &v| a.max(-v * S::c(1.5)));
    let floor = S::one();
    for v in s.iter_mut() {
        *v += ds;
    }
    for v in z.iter_mut() {
        *v += dz;
    }
    let dot: S = s.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let ssum: S = s.iter().copied().sum();
    let zsum: S = z.iter().copied().sum();
    let shift_s = if zsum > S::zero() { S::c(0.5) * dot / zsum } else { floor };
    let shift_z = if ssum > S::zero() { S::c(0.5) * dot / ssum } else { floor };
    for v in s.iter_mut() {
        *v = (*v + shift_s).max(floor * S::c(1e-2));
    }
    for v in z.iter_mut() {
        *v = (*v + shift_z).max(floor * S::c(1e-2));
    }
    Ok((x, s, z, y))
}

/// Solve the equality-constrained KKT system for a fixed active set via a
/// regularized quasi-definite LDL' factorization plus iterative refinement
/// against the unregularized matrix. Returns (x, z_active, y).
fn active_kkt_solve<S: Scalar>(
    p: &QpProblem<S>,
    active: &[usize],
) -> Option<(Vec<S>, Vec<S>, Vec<S>)> {
    let n = p.n;
    let na = active.len();
    let me = p.e_rows.len();
    let dim = n + na + me;

    let mut trace = S::zero();
    for i in 0..n {
        trace += p.q.get(i, i);
    }
    let scale = (trace / S::c(n as f64)).max(S::one());

    let mut rho = S::c(1e-11) * scale;
    for _ in 0..3 {
        let mut kkt = Mat::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt.set(i, j, p.q.get(i, j));
            }
            kkt.add_at(i, i, rho);
        }
        for (slot, &ai) in active.iter().enumerate() {
            let row = &p.g_rows[ai];
            for (ci, &v) in row.cols.iter().zip(&row.vals) {
                kkt.set(n + slot, *ci as usize, v);
                kkt.set(*ci as usize, n + slot, v);
            }
            kkt.set(n + slot, n + slot, -rho);
        }
        for (slot, row) in p.e_rows.iter().enumerate() {
            for (ci, &v) in row.cols.iter().zip(&row.vals) {
                kkt.set(n + na + slot, *ci as usize, v);
                kkt.set(*ci as usize, n + na + slot, v);
            }
            kkt.set(n + na + slot, n + na + slot, -rho);
        }

        let mut rhs = vec![S::zero(); dim];
        for i in 0..n {
            rhs[i] = -p.r[i];
        }
        for (slot, &ai) in active.iter().enumerate() {
            rhs[n + slot] = p.g_rhs[ai];
        }
        for (slot, &ei) in p.e_rhs.iter().enumerate() {
            rhs[n + na + slot] = ei;
        }

        let mut factor = kkt.clone();
        if ldlt_in_place(&mut factor, rho * S::c(1e-3)).is_err() {
            rho *= S::c(100.0);
            continue;
        }

        // Iterative refinement against the unregularized KKT operator.
        let apply = |v: &[S], out: &mut [S]| {
            out.iter_mut().for_each(|o| *o = S::zero());
            let (vx, rest) = v.split_at(n);
            let (vz, vy) = rest.split_at(na);
            let mut qx = vec![S::zero(); n];
            p.q.matvec(vx, &mut qx);
            out[..n].copy_from_slice(&qx);
            for (slot, &ai) in active.iter().enumerate() {
                p.g_rows[ai].axpy_into(vz[slot], &mut out[..n]);
                out[n + slot] = p.g_rows[ai].dot(vx);
            }
            for (slot, row) in p.e_rows.iter().enumerate() {
                row.axpy_into(vy[slot], &mut out[..n]);
                out[n + na + slot] = row.dot(vx);
            }
        };

        let mut sol = ldlt_solve_vec(&factor, &rhs);
        let mut resid = vec![S::zero(); dim];
        for _ in 0..4 {
            apply(&sol, &mut resid);
            for i in 0..dim {
                resid[i] = rhs[i] - resid[i];
            }
            if inf_norm(&resid) <= S::c(1e-14) * (S::one() + inf_norm(&rhs)) {
                break;
            }
            let corr = ldlt_solve_vec(&factor, &resid);
            for i in 0..dim {
                sol[i] += corr[i];
            }
        }
        let x = sol[..n].to_vec();
        let z = sol[n..n + na].to_vec();
        let y = sol[n + na..].to_vec();
        return Some((x, z, y));
    }
    None
}

/// Greedily select a linearly independent subset of the inequality rows in
/// `order`, treating the equality rows as already spanned. Modified
/// Gram-Schmidt with one reorthogonalization pass; the constraint rows here
/// are small integer patterns, so dependencies are exact and any modest
/// threshold separates them cleanly.
fn independent_subset<S: Scalar>(p: &QpProblem<S>, order: &[usize]) -> Vec<usize> {
    let n = p.n;
    let norm2 = |v: &[S]| v.iter().fold(S::zero(), |a, &x| a + x * x).sqrt();
    let mut basis: Vec<Vec<S>> = Vec::new();
    let push_if_independent = |basis: &mut Vec<Vec<S>>, row: &SparseRow<S>| -> bool {
        let mut v = vec![S::zero(); n];
        row.axpy_into(S::one(), &mut v);
        let scale = norm2(&v);
        if scale == S::zero() {
            return false;
        }
        for _ in 0..2 {
            for b in basis.iter() {
                let c = dot(&v, b);
                for (vi, &bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let rem = norm2(&v);
        if rem <= S::c(1e-8) * scale {
            return false;
        }
        let inv = S::one() / rem;
        for vi in v.iter_mut() {
            *vi *= inv;
        }
        basis.push(v);
        true
    };
    for row in &p.e_rows {
        push_if_independent(&mut basis, row);
    }
    let mut kept = Vec::with_capacity(order.len());
    for &i in order {
        if basis.len() == n {
            break;
        }
        if push_if_independent(&mut basis, &p.g_rows[i]) {
            kept.push(i);
        }
    }
    kept
}

/// Inequality rows whose polish multiplier came out clearly negative.
fn negatives_to_drop<S: Scalar>(active: &[usize], z_a: &[S], drop_tol: S) -> Vec<usize> {
    active
        .iter()
        .zip(z_a)
        .filter(|(_, &z)| z < -drop_tol)
        .map(|(&i, _)| i)
        .collect()
}

/// Active-set polish: guess the active set from the interior-point iterate,
/// solve the reduced KKT system exactly, and repair the guess by dropping
/// rows with negative multipliers and adding violated rows. Degenerate
/// guesses are pruned to an independent subset first, keeping the rows the
/// interior-point method weighted most; pruned rows keep a zero multiplier.
fn polish<S: Scalar>(
    p: &QpProblem<S>,
    x_ipm: &[S],
    z_ipm: &[S],
    accept_tol: S,
) -> Option<(Vec<S>, Vec<S>, Vec<S>)> {
    let mi = p.g_rows.len();
    let mut candidates: Vec<usize> = (0..mi)
        .filter(|&i| {
            let slack = p.g_rhs[i] - p.g_rows[i].dot(x_ipm);
            z_ipm[i] >= slack
        })
        .collect();

    for _pass in 0..40 {
        let mut order = candidates.clone();
        order.sort_by(|&a, &b| {
            z_ipm[b]
                .partial_cmp(&z_ipm[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut active = independent_subset(p, &order);
        active.sort_unstable();
        let (x, z_a, y) = active_kkt_solve(p, &active)?;
        // Multipliers surviving the drop get clamped to zero on output, so
        // the threshold must sit below the acceptance tolerance in absolute
        // terms; scaling it by the multiplier magnitude would let clamping
        // errors above the acceptance bar through.
        let drop_tol = S::c(0.1) * accept_tol;

        // Batch the repairs: drop every clearly wrong pin and add every
        // violated row in one pass. The caller's acceptance check guards
        // against a walk that fails to settle within the pass budget.
        let negatives: Vec<usize> = negatives_to_drop(&active, &z_a, drop_tol);
        let mut changed = false;
        if !negatives.is_empty() {
            candidates.retain(|i| !negatives.contains(i));
            changed = true;
        }

        let mut added = 0usize;
        for i in 0..mi {
            if candidates.contains(&i) {
                continue;
            }
            let viol = p.g_rows[i].dot(&x) - p.g_rhs[i];
            let tol = S::c(1e-9) * (S::one() + p.g_rhs[i].abs());
            if viol > tol {
                candidates.push(i);
                added += 1;
            }
        }
        if added > 0 {
            candidates.sort_unstable();
            changed = true;
        }
        if changed {
            continue;
        }

        let mut z = vec![S::zero(); mi];
        for (slot, &ai) in active.iter().enumerate() {
            z[ai] = z_a[slot].max(S::zero());
        }
        return Some((x, z, y));
    }
    None
}
