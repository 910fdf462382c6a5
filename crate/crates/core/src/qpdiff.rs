//! Quadratic programs with linear inequality rows, plus implicit
//! differentiation of the solution through the KKT conditions.
//!
//! The per-cycle control projection has two decision variables, so
//! [`solve_qp`] enumerates candidate active sets exactly. [`DenseQp`] is a
//! general dual active-set solver used for the relaxed re-solve and for the
//! stacked MPC problems of the expert. Both share [`kkt_backward`].

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{ConstraintRow, RowKind};

/// Weight on the squared shared slack in the relaxed re-solve.
pub const SLACK_WEIGHT: f64 = 1e4;
const FEAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub u_ref: Vector2<f64>,
    /// SPD weight of `1/2 (u - u_ref)^T W (u - u_ref)`.
    pub weight: Matrix2<f64>,
    pub rows: Vec<ConstraintRow>,
}

impl QpProblem {
    pub fn new(u_ref: Vector2<f64>, rows: Vec<ConstraintRow>) -> Self {
        Self {
            u_ref,
            weight: Matrix2::identity(),
            rows,
        }
    }

    pub fn objective(&self, u: &Vector2<f64>) -> f64 {
        let d = u - self.u_ref;
        0.5 * d.dot(&(self.weight * d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    /// Solved with a shared slack on the non-bound rows.
    Relaxed,
    /// The bound rows alone are inconsistent.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub u_star: Vector2<f64>,
    pub lambdas: Vec<f64>,
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    /// Shared slack (0 unless relaxed).
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    pub grad_u_ref: Vector2<f64>,
    pub grad_h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QpError {
    #[error("quadratic term is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

fn feasible(rows: &[ConstraintRow], u: &Vector2<f64>) -> bool {
    rows.iter()
        .all(|r| r.residual(u) <= FEAS_TOL * (1.0 + r.h.abs() + r.g.norm()))
}

/// Exact minimizer over at most two simultaneously active rows.
///
/// Candidates are the unconstrained point, every single-row projection
/// and every pairwise vertex; the feasible candidate of least objective wins,
/// with multipliers taken from its KKT system. Falls back to the relaxed
/// re-solve when no candidate is feasible.
pub fn solve_qp(problem: &QpProblem) -> QpResult {
    let rows = &problem.rows;
    let w = &problem.weight;
    let Some(w_inv) = w.try_inverse() else {
        return relaxed_solve(problem);
    };

    // Strictly convex: the first candidate that is feasible with nonnegative
    // multipliers satisfies KKT and is the unique minimizer, so candidates are
    // tried cheapest first and the search stops there.
    let feasible_kkt = |u: &Vector2<f64>, lambdas: &[f64]| feasible(rows, u) && lambdas.iter().all(|l| *l >= -1e-12);
    let found = |u: Vector2<f64>, active: &[usize], lams: &[f64]| {
        let mut lambdas = vec![0.0; rows.len()];
        let mut set = Vec::new();
        for (k, l) in active.iter().zip(lams) {
            lambdas[*k] = *l;
            if *l > 0.0 {
                set.push(*k);
            }
        }
        QpResult {
            u_star: u,
            lambdas,
            active_set: set,
            status: QpStatus::Optimal,
            slack: 0.0,
        }
    };

    if feasible_kkt(&problem.u_ref, &[]) {
        return found(problem.u_ref, &[], &[]);
    }
    for (k, r) in rows.iter().enumerate() {
        let denom = r.g.dot(&(w_inv * r.g));
        if denom <= 1e-300 {
            continue;
        }
        let viol = r.residual(&problem.u_ref);
        if viol <= 0.0 {
            continue;
        }
        let lam = viol / denom;
        let u = problem.u_ref - w_inv * r.g * lam;
        if feasible_kkt(&u, &[lam]) {
            return found(u, &[k], &[lam]);
        }
    }
    let mut best: Option<QpResult> = None;
    'pairs: for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let (ri, rj) = (&rows[i], &rows[j]);
            let a = Matrix2::new(ri.g[0], ri.g[1], rj.g[0], rj.g[1]);
            let det = a.determinant();
            let scale = ri.g.norm() * rj.g.norm();
            if scale == 0.0 || det.abs() <= 1e-12 * scale {
                continue;
            }
            let Some(a_inv) = a.try_inverse() else { continue };
            let u = a_inv * Vector2::new(ri.h, rj.h);
            // W (u - u_ref) + A^T lambda = 0.
            let lam = -(a_inv.transpose() * (w * (u - problem.u_ref)));
            if lam[0] < -1e-12 || lam[1] < -1e-12 {
                continue;
            }
            if feasible_kkt(&u, &[]) {
                best = Some(found(u, &[i, j], &[lam[0].max(0.0), lam[1].max(0.0)]));
                break 'pairs;
            }
        }
    }

    match best {
        Some(c) => c,
        None => relaxed_solve(problem),
    }
}

/// Variables `(omega, a, s)`: every non-bound row becomes `g.u - s <= h`,
/// plus `s >= 0`, with `SLACK_WEIGHT/2 s^2` added to the objective.
fn relaxed_dense(problem: &QpProblem) -> DenseQp {
    let m = problem.rows.len();
    let mut h = DMatrix::zeros(3, 3);
    h.view_mut((0, 0), (2, 2)).copy_from(&problem.weight);
    h[(2, 2)] = SLACK_WEIGHT;
    let wu = problem.weight * problem.u_ref;
    let c = DVector::from_vec(vec![-wu[0], -wu[1], 0.0]);
    let mut a = DMatrix::zeros(m + 1, 3);
    let mut b = DVector::zeros(m + 1);
    for (k, r) in problem.rows.iter().enumerate() {
        a[(k, 0)] = r.g[0];
        a[(k, 1)] = r.g[1];
        if r.kind != RowKind::Bound {
            a[(k, 2)] = -1.0;
        }
        b[k] = r.h;
    }
    a[(m, 2)] = -1.0;
    DenseQp { h, c, a, b }
}

fn relaxed_solve(problem: &QpProblem) -> QpResult {
    let m = problem.rows.len();
    let dense = relaxed_dense(problem);
    match dense.solve() {
        Ok(sol) => {
            let lambdas = sol.lambda.iter().take(m).copied().collect();
            let active_set = sol.active.iter().copied().filter(|k| *k < m).collect();
            QpResult {
                u_star: Vector2::new(sol.x[0], sol.x[1]),
                lambdas,
                active_set,
                status: QpStatus::Relaxed,
                slack: sol.x[2].max(0.0),
            }
        }
        Err(_) => QpResult {
            u_star: problem.u_ref,
            lambdas: vec![0.0; m],
            active_set: vec![],
            status: QpStatus::Infeasible,
            slack: 0.0,
        },
    }
}

/// Gradients of a scalar loss with respect to `u_ref` and every row's `h`,
/// given `grad_u = dL/du*`.
///
/// Active rows with multipliers at or below 1e-10 are treated as inactive.
/// Relaxed solutions are differentiated through the slack-augmented system.
/// Infeasible results, or a singular reduced KKT system, give zero gradients.
pub fn qp_backward(problem: &QpProblem, result: &QpResult, grad_u: &Vector2<f64>) -> QpGradients {
    let m = problem.rows.len();
    let zero = QpGradients {
        grad_u_ref: Vector2::zeros(),
        grad_h: vec![0.0; m],
    };
    match result.status {
        QpStatus::Infeasible => zero,
        QpStatus::Optimal => {
            let active: Vec<usize> = result
                .active_set
                .iter()
                .copied()
                .filter(|k| result.lambdas[*k] > 1e-10)
                .collect();
            let h = DMatrix::from_iterator(2, 2, problem.weight.iter().copied());
            let mut a = DMatrix::zeros(active.len(), 2);
            for (r, k) in active.iter().enumerate() {
                a[(r, 0)] = problem.rows[*k].g[0];
                a[(r, 1)] = problem.rows[*k].g[1];
            }
            let gx = DVector::from_vec(vec![grad_u[0], grad_u[1]]);
            let Some((zx, zl)) = kkt_backward(&h, &a, &gx) else {
                log::warn!("singular KKT system in qp_backward; zero gradient");
                return zero;
            };
            let zx = Vector2::new(zx[0], zx[1]);
            let mut grad_h = vec![0.0; m];
            for (r, k) in active.iter().enumerate() {
                grad_h[*k] = zl[r];
            }
            QpGradients {
                grad_u_ref: problem.weight.transpose() * zx,
                grad_h,
            }
        }
        QpStatus::Relaxed => {
            let dense = relaxed_dense(problem);
            let Ok(sol) = dense.solve() else {
                return zero;
            };
            let active: Vec<usize> = sol.active.iter().copied().filter(|k| sol.lambda[*k] > 1e-10).collect();
            let mut a = DMatrix::zeros(active.len(), 3);
            for (r, k) in active.iter().enumerate() {
                for c in 0..3 {
                    a[(r, c)] = dense.a[(*k, c)];
                }
            }
            let gx = DVector::from_vec(vec![grad_u[0], grad_u[1], 0.0]);
            let Some((zx, zl)) = kkt_backward(&dense.h, &a, &gx) else {
                log::warn!("singular KKT system in relaxed qp_backward; zero gradient");
                return zero;
            };
            let mut grad_h = vec![0.0; m];
            for (r, k) in active.iter().enumerate() {
                if *k < m {
                    grad_h[*k] = zl[r];
                }
            }
            QpGradients {
                grad_u_ref: problem.weight.transpose() * Vector2::new(zx[0], zx[1]),
                grad_h,
            }
        }
    }
}

/// Solves `[H A^T; A 0] [z_x; z_l] = [g; 0]`.
///
/// For `min 1/2 x^T H x + c^T x s.t. A x = b` on the active rows, the
/// solution sensitivities are `dL/dc = -z_x` and `dL/db = z_l`.
pub fn kkt_backward(
    h: &DMatrix<f64>,
    a_active: &DMatrix<f64>,
    grad_x: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let k = a_active.nrows();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    if k > 0 {
        kkt.view_mut((0, n), (n, k)).copy_from(&a_active.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(a_active);
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(grad_x);
    let z = kkt.lu().solve(&rhs)?;
    if z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((z.rows(0, n).into_owned(), z.rows(n, k).into_owned()))
}

/// `min 1/2 x^T H x + c^T x  s.t.  A x <= b`, H positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl DenseQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }

    /// Dual active-set method: start from the unconstrained minimizer and add
    /// the most violated row each outer iteration, dropping rows whose
    /// multipliers would turn negative.
    pub fn solve(&self) -> Result<DenseSolution, QpError> {
        let n = self.h.nrows();
        let m = self.a.nrows();
        let chol = self.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let mut x = -chol.solve(&self.c);
        let mut active: Vec<usize> = Vec::new();
        let mut lambda = DVector::<f64>::zeros(m);
        let row_norm: Vec<f64> = (0..m).map(|k| self.a.row(k).norm().max(1e-300)).collect();
        let max_iter = 10 * (m + n) + 50;
        let mut iterations = 0;

        loop {
            // Most violated row, scaled.
            let mut p = None;
            let mut worst = 0.0;
            for k in 0..m {
                if active.contains(&k) {
                    continue;
                }
                let s = (self.a.row(k).dot(&x.transpose()) - self.b[k]) / row_norm[k];
                if s > FEAS_TOL * (1.0 + self.b[k].abs() / row_norm[k]) && s > worst {
                    worst = s;
                    p = Some(k);
                }
            }
            let Some(p) = p else { break };
            let a_p: DVector<f64> = self.a.row(p).transpose();
            let mut lam_p = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpError::IterationLimit);
                }
                let k = active.len();
                let mut kkt = DMatrix::zeros(n + k, n + k);
                kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
                for (r, idx) in active.iter().enumerate() {
                    for c in 0..n {
                        kkt[(n + r, c)] = self.a[(*idx, c)];
                        kkt[(c, n + r)] = self.a[(*idx, c)];
                    }
                }
                let mut rhs = DVector::zeros(n + k);
                rhs.rows_mut(0, n).copy_from(&(-&a_p));
                let sol = kkt.lu().solve(&rhs).ok_or(QpError::Infeasible)?;
                let dx = sol.rows(0, n).into_owned();
                let dl = sol.rows(n, k).into_owned();

                let mut t_dual = f64::INFINITY;
                let mut block = None;
                for r in 0..k {
                    if dl[r] < 0.0 {
                        let t = -lambda[active[r]] / dl[r];
                        if t < t_dual {
                            t_dual = t;
                            block = Some(r);
                        }
                    }
                }
                let curvature = a_p.dot(&dx);
                let dependent = dx.norm() <= 1e-12 * (1.0 + a_p.norm());
                if dependent {
                    let Some(r) = block else {
                        return Err(QpError::Infeasible);
                    };
                    for (rr, idx) in active.iter().enumerate() {
                        lambda[*idx] += t_dual * dl[rr];
                    }
                    lam_p += t_dual;
                    lambda[active[r]] = 0.0;
                    active.remove(r);
                    continue;
                }
                let viol = a_p.dot(&x) - self.b[p];
                let t_primal = if curvature < 0.0 {
                    -viol / curvature
                } else {
                    f64::INFINITY
                };
                let t = t_primal.min(t_dual);
                x += &dx * t;
                for (rr, idx) in active.iter().enumerate() {
                    lambda[*idx] += t * dl[rr];
                }
                lam_p += t;
                if t_primal <= t_dual {
                    lambda[p] = lam_p;
                    active.push(p);
                    break;
                }
                let r = block.expect("dual step without blocking row");
                lambda[active[r]] = 0.0;
                active.remove(r);
            }
        }
        for k in 0..m {
            if lambda[k] < 0.0 {
                lambda[k] = 0.0;
            }
        }
        Ok(DenseSolution {
            x,
            lambda,
            active,
            iterations,
        })
    }
}
