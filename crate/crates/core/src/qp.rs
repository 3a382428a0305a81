//! Dense convex quadratic programming by operator splitting.
//!
//! Solves `min 1/2 z' P z + q' z  s.t.  G z <= g, A z = b` with an
//! ADMM scheme: Ruiz equilibration, a single Cholesky factorization of
//! `P + sigma I + C' rho C` per solve, over-relaxed iterations with
//! residual-driven step-size adaptation, primal infeasibility
//! certificates, warm starting, and an optional active-set polish for
//! high-accuracy solutions on small problems. Everything is deterministic
//! for fixed inputs.
//!
//! Constraint rows are stored sparsely; the planner's horizon-stacked
//! problems have a few nonzeros per input row and O(k) per state row, and
//! forming the normal matrix row-by-row keeps the per-solve cost low.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::real::{real, to_f64, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix has negative eigenvalue {0:.3e}")]
    NotPositiveSemidefinite(f64),
}

/// One sparse constraint row with bounds `lb <= a' z <= ub`.
///
/// Inequalities use `lb = -inf`; equalities have `lb = ub`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow<T> {
    pub entries: Vec<(usize, T)>,
    pub lb: T,
    pub ub: T,
}

/// Convex QP data. `P` is symmetrized on ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    p: DMatrix<T>,
    q: DVector<T>,
    rows: Vec<ConstraintRow<T>>,
}

impl<T: Real> QpProblem<T> {
    /// Create a problem with cost only; constraint rows are added after.
    /// `P` is symmetrized; definiteness is checked by [`Self::check_psd`].
    pub fn new(p: DMatrix<T>, q: DVector<T>) -> Result<Self, QpError> {
        if !p.is_square() || p.nrows() != q.len() {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, q has length {}",
                p.nrows(),
                p.ncols(),
                q.len()
            )));
        }
        let sym = (&p + p.transpose()) * real::<T>(0.5);
        Ok(Self {
            p: sym,
            q,
            rows: Vec::new(),
        })
    }

    /// Dense convenience constructor for `G z <= g`.
    pub fn from_dense(
        p: DMatrix<T>,
        q: DVector<T>,
        g: &DMatrix<T>,
        g_ub: &DVector<T>,
    ) -> Result<Self, QpError> {
        let mut prob = Self::new(p, q)?;
        if g.nrows() != g_ub.len() {
            return Err(QpError::Dimension("G rows != g length".into()));
        }
        for i in 0..g.nrows() {
            let mut row = Vec::new();
            for j in 0..g.ncols() {
                if g[(i, j)] != T::zero() {
                    row.push((j, g[(i, j)]));
                }
            }
            prob.add_ineq_row(row, g_ub[i])?;
        }
        Ok(prob)
    }

    pub fn add_ineq_row(&mut self, entries: Vec<(usize, T)>, ub: T) -> Result<(), QpError> {
        self.push_row(entries, T::from_f64(f64::NEG_INFINITY).unwrap(), ub)
    }

    pub fn add_eq_row(&mut self, entries: Vec<(usize, T)>, b: T) -> Result<(), QpError> {
        self.push_row(entries, b, b)
    }

    fn push_row(&mut self, entries: Vec<(usize, T)>, lb: T, ub: T) -> Result<(), QpError> {
        let n = self.num_vars();
        if entries.iter().any(|&(j, _)| j >= n) {
            return Err(QpError::Dimension("row index out of range".into()));
        }
        self.rows.push(ConstraintRow { entries, lb, ub });
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[ConstraintRow<T>] {
        &self.rows
    }

    pub fn cost(&self, z: &DVector<T>) -> T {
        let pz = &self.p * z;
        real::<T>(0.5) * z.dot(&pz) + self.q.dot(z)
    }

    /// Reject cost matrices with eigenvalues below `-tol`.
    pub fn check_psd(&self, tol: T) -> Result<(), QpError> {
        let eig = self.p.clone().symmetric_eigenvalues();
        let min = eig.iter().copied().fold(T::zero(), |a, b| a.min(b));
        if min < -tol {
            return Err(QpError::NotPositiveSemidefinite(to_f64(min)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T> {
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub z: DVector<T>,
    /// Multipliers per constraint row (nonnegative on inequality rows).
    pub duals: DVector<T>,
    pub status: QpStatus,
    pub residuals: KktResiduals<T>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings<T> {
    pub tol_primal: T,
    pub tol_dual: T,
    pub tol_comp: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    /// Over-relaxation parameter.
    pub alpha: T,
    /// Refine the converged iterate by solving the KKT system of the
    /// detected active set. Worth it on small problems.
    pub polish: bool,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            tol_primal: real(1e-5),
            tol_dual: real(1e-5),
            tol_comp: real(1e-4),
            max_iter: 4000,
            rho: real(0.1),
            sigma: real(1e-6),
            alpha: real(1.6),
            polish: true,
        }
    }
}

/// Primal/dual pair carried between solves.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart<T> {
    pub z: DVector<T>,
    pub duals: DVector<T>,
}

/// Operator-splitting QP solver. One solve at a time per instance;
/// separate instances are independent.
#[derive(Debug, Clone)]
pub struct QpSolver<T> {
    pub settings: QpSettings<T>,
}

impl<T: Real> Default for QpSolver<T> {
    fn default() -> Self {
        Self {
            settings: QpSettings::default(),
        }
    }
}

const RUIZ_ITERS: usize = 5;
const CHECK_EVERY: usize = 10;
const RHO_ADAPT_EVERY: usize = 50;
const EQ_RHO_FACTOR: f64 = 1e3;

impl<T: Real> QpSolver<T> {
    pub fn new(settings: QpSettings<T>) -> Self {
        Self { settings }
    }

    pub fn solve(&self, prob: &QpProblem<T>, warm: Option<&WarmStart<T>>) -> QpSolution<T> {
        let n = prob.num_vars();
        let m = prob.num_rows();
        let st = &self.settings;
        let zero = T::zero();
        let one = T::one();

        if m == 0 {
            // Unconstrained: a single regularized solve.
            let mut k = prob.p.clone();
            for i in 0..n {
                k[(i, i)] += st.sigma;
            }
            let z = Cholesky::new(k)
                .map(|ch| ch.solve(&(-prob.q.clone())))
                .unwrap_or_else(|| DVector::zeros(n));
            let dual_res = (&prob.p * &z + &prob.q).amax();
            return QpSolution {
                z,
                duals: DVector::zeros(0),
                status: QpStatus::Optimal,
                residuals: KktResiduals {
                    primal: zero,
                    dual: dual_res,
                    complementarity: zero,
                },
                iterations: 1,
            };
        }

        // --- Ruiz equilibration on [P C'; C 0] plus cost normalization.
        let mut d = DVector::from_element(n, one);
        let mut e = DVector::from_element(m, one);
        let mut c_cost = one;
        {
            let mut p_s = prob.p.clone();
            let mut rows_s = prob.rows.to_vec();
            let mut q_s = prob.q.clone();
            for _ in 0..RUIZ_ITERS {
                let mut col_max = DVector::from_element(n, zero);
                for j in 0..n {
                    for i in 0..n {
                        col_max[j] = col_max[j].max(p_s[(i, j)].abs());
                    }
                }
                for row in rows_s.iter() {
                    for &(j, v) in &row.entries {
                        col_max[j] = col_max[j].max(v.abs());
                    }
                }
                let mut dd = DVector::from_element(n, one);
                for j in 0..n {
                    if col_max[j] > real(1e-12) {
                        dd[j] = one / col_max[j].sqrt();
                    }
                }
                let mut ee = DVector::from_element(m, one);
                for (i, row) in rows_s.iter().enumerate() {
                    let mut rmax = zero;
                    for &(_, v) in &row.entries {
                        rmax = rmax.max(v.abs());
                    }
                    if rmax > real(1e-12) {
                        ee[i] = one / rmax.sqrt();
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        p_s[(i, j)] = dd[i] * p_s[(i, j)] * dd[j];
                    }
                }
                for i in 0..n {
                    q_s[i] *= dd[i];
                }
                for (i, row) in rows_s.iter_mut().enumerate() {
                    for entry in row.entries.iter_mut() {
                        entry.1 = ee[i] * entry.1 * dd[entry.0];
                    }
                }
                for j in 0..n {
                    d[j] *= dd[j];
                }
                for i in 0..m {
                    e[i] *= ee[i];
                }
                // Cost scaling: mean column norm of P against |q|.
                let mut pmax = zero;
                for j in 0..n {
                    let mut cm = zero;
                    for i in 0..n {
                        cm = cm.max(p_s[(i, j)].abs());
                    }
                    pmax += cm;
                }
                pmax /= T::from_usize(n).unwrap();
                let qmax = q_s.amax();
                let denom = pmax.max(qmax).max(real(1e-8));
                let gamma = one / denom;
                p_s *= gamma;
                q_s *= gamma;
                c_cost *= gamma;
            }
        }

        // Scaled data.
        let mut p_bar = prob.p.clone();
        for i in 0..n {
            for j in 0..n {
                p_bar[(i, j)] = c_cost * d[i] * p_bar[(i, j)] * d[j];
            }
        }
        let q_bar = DVector::from_fn(n, |i, _| c_cost * d[i] * prob.q[i]);
        let rows_bar: Vec<ConstraintRow<T>> = prob
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| ConstraintRow {
                entries: row
                    .entries
                    .iter()
                    .map(|&(j, v)| (j, e[i] * v * d[j]))
                    .collect(),
                lb: if row.lb.is_finite() {
                    e[i] * row.lb
                } else {
                    row.lb
                },
                ub: if row.ub.is_finite() {
                    e[i] * row.ub
                } else {
                    row.ub
                },
            })
            .collect();
        let is_eq: Vec<bool> = prob.rows.iter().map(|r| r.lb == r.ub).collect();

        let mut rho = st.rho;
        let rho_vec = |rho: T| -> DVector<T> {
            DVector::from_fn(m, |i, _| {
                if is_eq[i] {
                    rho * real(EQ_RHO_FACTOR)
                } else {
                    rho
                }
            })
        };
        let mut rhos = rho_vec(rho);

        let factor = |rhos: &DVector<T>| -> Cholesky<T, nalgebra::Dyn> {
            let mut k = p_bar.clone();
            for i in 0..n {
                k[(i, i)] += st.sigma;
            }
            for (i, row) in rows_bar.iter().enumerate() {
                for &(j1, v1) in &row.entries {
                    for &(j2, v2) in &row.entries {
                        k[(j1, j2)] += rhos[i] * v1 * v2;
                    }
                }
            }
            let mut reg = st.sigma;
            loop {
                match Cholesky::new(k.clone()) {
                    Some(ch) => return ch,
                    None => {
                        reg *= real(100.0);
                        for i in 0..n {
                            k[(i, i)] += reg;
                        }
                        assert!(to_f64(reg) < 1.0, "KKT matrix could not be factorized");
                    }
                }
            }
        };
        let mut kkt = factor(&rhos);

        let matvec = |rows: &[ConstraintRow<T>], x: &DVector<T>| -> DVector<T> {
            let mut out = DVector::zeros(m);
            for (i, row) in rows.iter().enumerate() {
                let mut acc = zero;
                for &(j, v) in &row.entries {
                    acc += v * x[j];
                }
                out[i] = acc;
            }
            out
        };
        let t_matvec = |rows: &[ConstraintRow<T>], y: &DVector<T>| -> DVector<T> {
            let mut out = DVector::zeros(n);
            for (i, row) in rows.iter().enumerate() {
                for &(j, v) in &row.entries {
                    out[j] += v * y[i];
                }
            }
            out
        };

        // Warm start (scaled in) or cold start.
        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(m);
        if let Some(w) = warm {
            if w.z.len() == n && w.duals.len() == m {
                for j in 0..n {
                    x[j] = w.z[j] / d[j];
                }
                for i in 0..m {
                    y[i] = c_cost * w.duals[i] / e[i];
                }
            }
        }
        let mut z = matvec(&rows_bar, &x);
        for i in 0..m {
            z[i] = z[i].max(rows_bar[i].lb).min(rows_bar[i].ub);
        }

        // Unscaled residuals; complementarity over inequality rows only.
        let residuals = |x: &DVector<T>, y: &DVector<T>| -> KktResiduals<T> {
            let cx = matvec(&rows_bar, x);
            let mut prim = zero;
            let mut comp = zero;
            for i in 0..m {
                let v = cx[i] / e[i];
                let ub = prob.rows[i].ub;
                let lb = prob.rows[i].lb;
                let viol = (v - ub).max(if lb.is_finite() { lb - v } else { zero });
                prim = prim.max(viol.max(zero));
                if !is_eq[i] {
                    let y_un = y[i] * e[i] / c_cost;
                    comp = comp.max((y_un * (ub - v)).abs().min(y_un.abs()));
                }
            }
            let px = &p_bar * x;
            let cty = t_matvec(&rows_bar, y);
            let mut dual = zero;
            for j in 0..n {
                let r = (px[j] + q_bar[j] + cty[j]) / (d[j] * c_cost);
                dual = dual.max(r.abs());
            }
            KktResiduals {
                primal: prim,
                dual,
                complementarity: comp,
            }
        };

        let mut status = QpStatus::MaxIter;
        let mut res = residuals(&x, &y);
        let mut iterations = 0;
        if res.primal <= st.tol_primal && res.dual <= st.tol_dual {
            status = QpStatus::Optimal;
        } else {
            for iter in 1..=st.max_iter {
                iterations = iter;
                // x update.
                let mut rhs = -q_bar.clone();
                for j in 0..n {
                    rhs[j] += st.sigma * x[j];
                }
                let mut w = DVector::zeros(m);
                for i in 0..m {
                    w[i] = rhos[i] * z[i] - y[i];
                }
                rhs += t_matvec(&rows_bar, &w);
                let x_new = kkt.solve(&rhs);
                // Over-relaxed splitting step.
                let cx = matvec(&rows_bar, &x_new);
                let mut z_new = DVector::zeros(m);
                let mut dy = DVector::zeros(m);
                for i in 0..m {
                    let v = st.alpha * cx[i] + (one - st.alpha) * z[i];
                    let cand = v + y[i] / rhos[i];
                    let clamped = cand.max(rows_bar[i].lb).min(rows_bar[i].ub);
                    z_new[i] = clamped;
                    let y_next = y[i] + rhos[i] * (v - clamped);
                    dy[i] = y_next - y[i];
                    y[i] = y_next;
                }
                x = x_new;
                z = z_new;

                if iter % CHECK_EVERY == 0 || iter == st.max_iter {
                    res = residuals(&x, &y);
                    if res.primal <= st.tol_primal && res.dual <= st.tol_dual {
                        status = QpStatus::Optimal;
                        break;
                    }
                    // Primal infeasibility certificate from the dual update
                    // direction: C' dy ~ 0 with negative support value.
                    let dy_inf = dy.amax();
                    if dy_inf > real(1e-12) {
                        let ct_dy = t_matvec(&rows_bar, &dy);
                        let mut support = zero;
                        let mut bounded = true;
                        for i in 0..m {
                            let pos = dy[i].max(zero);
                            let neg = (-dy[i]).max(zero);
                            if rows_bar[i].ub.is_finite() {
                                support += rows_bar[i].ub * pos;
                            } else if pos > real::<T>(1e-10) * dy_inf {
                                bounded = false;
                            }
                            if rows_bar[i].lb.is_finite() {
                                support -= rows_bar[i].lb * neg;
                            } else if neg > real::<T>(1e-10) * dy_inf {
                                bounded = false;
                            }
                        }
                        if bounded
                            && ct_dy.amax() <= real::<T>(1e-10) * dy_inf
                            && support < -real::<T>(1e-10) * dy_inf
                        {
                            status = QpStatus::PrimalInfeasible;
                            break;
                        }
                    }
                    // Step-size adaptation on the residual ratio.
                    if iter % RHO_ADAPT_EVERY == 0 {
                        let ratio =
                            ((res.primal + real(1e-14)) / (res.dual + real(1e-14))).sqrt();
                        let new_rho = (rho * ratio).max(real(1e-6)).min(real(1e6));
                        if new_rho > rho * real(5.0) || new_rho < rho / real(5.0) {
                            rho = new_rho;
                            rhos = rho_vec(rho);
                            kkt = factor(&rhos);
                        }
                    }
                }
            }
        }

        // Unscale.
        let mut z_out = DVector::zeros(n);
        for j in 0..n {
            z_out[j] = d[j] * x[j];
        }
        let mut duals = DVector::zeros(m);
        for i in 0..m {
            let v = y[i] * e[i] / c_cost;
            duals[i] = if is_eq[i] { v } else { v.max(zero) };
        }

        if status == QpStatus::Optimal && st.polish {
            if let Some((zp, dp)) = polish(prob, &z_out, &duals, st) {
                let check = kkt_residuals_unscaled(prob, &zp, &dp);
                if check.primal <= res.primal.max(st.tol_primal)
                    && check.dual <= res.dual.max(st.tol_dual)
                {
                    return QpSolution {
                        z: zp,
                        duals: dp,
                        status,
                        residuals: check,
                        iterations: iterations.max(1),
                    };
                }
            }
        }

        let res_final = kkt_residuals_unscaled(prob, &z_out, &duals);
        QpSolution {
            z: z_out,
            duals,
            status,
            residuals: res_final,
            iterations: iterations.max(1),
        }
    }
}

fn kkt_residuals_unscaled<T: Real>(
    prob: &QpProblem<T>,
    z: &DVector<T>,
    duals: &DVector<T>,
) -> KktResiduals<T> {
    let zero = T::zero();
    let mut prim = zero;
    let mut comp = zero;
    let mut grad = &prob.p * z + &prob.q;
    for (i, row) in prob.rows.iter().enumerate() {
        let mut v = zero;
        for &(j, c) in &row.entries {
            v += c * z[j];
        }
        let viol = (v - row.ub).max(if row.lb.is_finite() { row.lb - v } else { zero });
        prim = prim.max(viol.max(zero));
        if row.lb != row.ub {
            comp = comp.max((duals[i] * (v - row.ub)).abs().min(duals[i].abs()));
        }
        for &(j, c) in &row.entries {
            grad[j] += c * duals[i];
        }
    }
    KktResiduals {
        primal: prim,
        dual: grad.amax(),
        complementarity: comp,
    }
}

/// Active-set refinement: re-solve the equality-constrained KKT system of
/// the rows the converged iterate deems active.
fn polish<T: Real>(
    prob: &QpProblem<T>,
    z: &DVector<T>,
    duals: &DVector<T>,
    st: &QpSettings<T>,
) -> Option<(DVector<T>, DVector<T>)> {
    let n = prob.num_vars();
    let zero = T::zero();
    let mut active: Vec<(usize, T)> = Vec::new();
    for (i, row) in prob.rows.iter().enumerate() {
        let mut v = zero;
        for &(j, c) in &row.entries {
            v += c * z[j];
        }
        if row.lb == row.ub {
            active.push((i, row.ub));
        } else {
            let slack = row.ub - v;
            let scale = T::one() + row.ub.abs();
            if duals[i] > st.tol_comp || slack.abs() <= real::<T>(1e-7) * scale {
                active.push((i, row.ub));
            }
        }
    }
    let na = active.len();
    if na > n + 8 {
        return None;
    }
    let dim = n + na;
    let mut kkt = DMatrix::<T>::zeros(dim, dim);
    let delta = real::<T>(1e-10);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = prob.p[(i, j)];
        }
        kkt[(i, i)] += delta;
    }
    for (a, &(ri, _)) in active.iter().enumerate() {
        for &(j, c) in &prob.rows[ri].entries {
            kkt[(n + a, j)] = c;
            kkt[(j, n + a)] = c;
        }
        kkt[(n + a, n + a)] = -delta;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -prob.q[j];
    }
    for (a, &(_, b)) in active.iter().enumerate() {
        rhs[n + a] = b;
    }
    let lu = kkt.full_piv_lu();
    let sol = lu.solve(&rhs)?;
    let zp = DVector::from_fn(n, |i, _| sol[i]);
    let mut dp = DVector::zeros(prob.num_rows());
    for (a, &(ri, _)) in active.iter().enumerate() {
        let v = sol[n + a];
        dp[ri] = if prob.rows[ri].lb == prob.rows[ri].ub {
            v
        } else {
            v.max(zero)
        };
    }
    Some((zp, dp))
}
