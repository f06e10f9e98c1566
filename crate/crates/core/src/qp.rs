//! Convex quadratic programs by Douglas–Rachford splitting.
//!
//! Solves
//!
//! ```text
//! minimize ½ xᵀPx + qᵀx   subject to   l ≤ Ax ≤ u
//! ```
//!
//! by splitting the problem into `f(x, z) = ½xᵀPx + qᵀx + δ{Ax = z}` and
//! `g(z) = δ_[l,u](z)` and running relaxed Douglas–Rachford in the metric
//! `diag(σI, R)`. The prox of `f` is one solve with the fixed SPD matrix
//! `P + σI + AᵀRA` (factored once); the prox of `g` is a clamp. Because the
//! metric is fixed, the fixed-point residual `‖s⁺ − s‖_M` is nonincreasing,
//! which [`QpSolution::trace`] exposes.
//!
//! Once the splitting iterate is close, the active set is guessed from the
//! dual variables and the reduced KKT system is solved directly (with
//! iterative refinement). A polished point is accepted only if it passes the
//! full KKT check at the requested tolerances.
//!
//! Infeasibility is read off the displacement of the DR sequence, which
//! converges to a nonzero vector exactly when the problem has no solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        QpProblem {
            p: DMatrix::zeros(n, n),
            q: DVector::zeros(n),
            a: DMatrix::zeros(0, n),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        }
    }

    pub fn nvars(&self) -> usize {
        self.q.len()
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// ∞-norm distance of `Ax` to the box `[l, u]`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..ax.len()).fold(0.0, |m, i| m.max(self.l[i] - ax[i]).max(ax[i] - self.u[i]))
    }

    /// ∞-norm of `Px + q + Aᵀy`.
    pub fn stationarity(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.p * x + &self.q + self.a.transpose() * y).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Multiplier on `rho` for equality rows.
    pub eq_rho_scale: f64,
    pub max_iter: usize,
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    /// Tolerance of the infeasibility certificates (relative to the displacement norm).
    pub tol_certificate: f64,
    pub scaling_iters: usize,
    /// Record the DR fixed-point residual at every iteration.
    pub record_trace: bool,
    /// Skip polishing (pure splitting; only useful for diagnostics).
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eq_rho_scale: 1e3,
            max_iter: 200_000,
            tol_stationarity: 1e-8,
            tol_feasibility: 1e-10,
            tol_certificate: 1e-6,
            scaling_iters: 10,
            record_trace: false,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// Multipliers of `l ≤ Ax ≤ u`; `y_i > 0` at active upper bounds, `< 0` at lower.
    pub y: DVector<f64>,
    pub objective: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Fixed-point residuals `‖s_{k+1} − s_k‖_M` (empty unless requested).
    pub trace: Vec<f64>,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn ruiz(prob: &QpProblem, iters: usize) -> Scaling {
    let n = prob.nvars();
    let m = prob.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    let clampn = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut v: f64 = p.column(j).amax();
            if m > 0 {
                v = v.max(a.column(j).amax());
            }
            dd[j] = 1.0 / clampn(v).sqrt();
        }
        let mut ee = DVector::from_element(m, 1.0);
        for i in 0..m {
            ee[i] = 1.0 / clampn(a.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                a[(i, j)] *= ee[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }
    let qn = prob.q.component_mul(&d).amax();
    let pn = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
    let c = 1.0 / clampn(pn.max(qn));
    Scaling { d, e, c }
}

fn project(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Solves the QP.
pub fn solve(prob: &QpProblem, settings: &QpSettings) -> QpSolution {
    let n = prob.nvars();
    let m = prob.nrows();
    let sc = ruiz(prob, settings.scaling_iters);
    // scaled data
    let mut ps = prob.p.clone();
    let mut a_s = prob.a.clone();
    for j in 0..n {
        for i in 0..n {
            ps[(i, j)] *= sc.c * sc.d[i] * sc.d[j];
        }
        for i in 0..m {
            a_s[(i, j)] *= sc.e[i] * sc.d[j];
        }
    }
    let qs = prob.q.component_mul(&sc.d) * sc.c;
    let ls = DVector::from_fn(m, |i, _| prob.l[i] * sc.e[i]);
    let us = DVector::from_fn(m, |i, _| prob.u[i] * sc.e[i]);
    let rho = DVector::from_fn(m, |i, _| {
        if prob.l[i] == prob.u[i] {
            settings.rho * settings.eq_rho_scale
        } else if prob.l[i].is_infinite() && prob.u[i].is_infinite() {
            1e-6
        } else {
            settings.rho
        }
    });
    let sigma = settings.sigma;
    let mut k = ps.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if m > 0 {
        let ra = DMatrix::from_fn(m, n, |i, j| rho[i] * a_s[(i, j)]);
        k += a_s.transpose() * ra;
    }
    let chol = match k.clone().cholesky() {
        Some(c) => c,
        None => {
            // Regularize and retry; P is PSD so this only guards against rounding.
            let mut k2 = k;
            for i in 0..n {
                k2[(i, i)] += 1e-9;
            }
            k2.cholesky().expect("P + σI + AᵀRA is SPD")
        }
    };

    let unscale_x = |xs: &DVector<f64>| xs.component_mul(&sc.d);
    let unscale_y = |ys: &DVector<f64>| ys.component_mul(&sc.e) / sc.c;

    let mut sx = DVector::zeros(n);
    let mut sz = DVector::zeros(m);
    let mut trace = Vec::new();
    let mut prev_y = DVector::zeros(m);
    let mut prev_x = DVector::zeros(n);
    let mut pinf_hits = 0usize;
    let mut dinf_hits = 0usize;
    let mut next_polish = 25usize;
    let check_every = 5usize;
    let mut last: Option<(DVector<f64>, DVector<f64>)> = None;

    for it in 1..=settings.max_iter {
        let rhs = &sx * sigma - &qs + a_s.transpose() * rho.component_mul(&sz);
        let xt = chol.solve(&rhs);
        let zt = &a_s * &xt;
        let r = &zt * 2.0 - &sz;
        let zb = DVector::from_fn(m, |i, _| project(r[i], ls[i], us[i]));
        let ys = (r - &zb).component_mul(&rho);
        let dsx = (&xt - &sx) * settings.alpha;
        let dsz = (&zb - &zt) * settings.alpha;
        if settings.record_trace {
            let fx = sigma * dsx.norm_squared();
            let fz: f64 = (0..m).map(|i| rho[i] * dsz[i] * dsz[i]).sum();
            trace.push((fx + fz).sqrt());
        }
        sx += dsx;
        sz += dsz;

        if it % check_every == 0 || it == settings.max_iter {
            let x = unscale_x(&xt);
            let y = unscale_y(&ys);
            // infeasibility certificates from successive differences
            let dy = &y - &prev_y;
            let dx = &x - &prev_x;
            if primal_infeasible(prob, &dy, settings.tol_certificate) {
                pinf_hits += 1;
            } else {
                pinf_hits = 0;
            }
            if dual_infeasible(prob, &dx, settings.tol_certificate) {
                dinf_hits += 1;
            } else {
                dinf_hits = 0;
            }
            if pinf_hits >= 3 {
                return finish(prob, QpStatus::PrimalInfeasible, x, y, it, false, trace);
            }
            if dinf_hits >= 3 {
                return finish(prob, QpStatus::DualInfeasible, x, y, it, false, trace);
            }
            let stat = prob.stationarity(&x, &y);
            let feas = prob.infeasibility(&x);
            if stat <= settings.tol_stationarity && feas <= settings.tol_feasibility {
                return finish(prob, QpStatus::Solved, x, y, it, false, trace);
            }
            if settings.polish && (it >= next_polish || (stat < 1e-5 && feas < 1e-5)) {
                next_polish = (next_polish * 2).max(it + 25);
                let z = DVector::from_fn(m, |i, _| zb[i] / sc.e[i]);
                if let Some((xp, yp)) = polish(prob, &z, &y, settings) {
                    return finish(prob, QpStatus::Solved, xp, yp, it, true, trace);
                }
            }
            last = Some((x, y));
        }
        // keep one-step history for the certificates
        if (it + 1) % check_every == 0 {
            prev_x = unscale_x(&xt);
            prev_y = unscale_y(&ys);
        }
    }
    let (x, y) = last.unwrap_or_else(|| (DVector::zeros(n), DVector::zeros(m)));
    finish(prob, QpStatus::MaxIter, x, y, settings.max_iter, false, trace)
}

fn finish(
    prob: &QpProblem,
    status: QpStatus,
    x: DVector<f64>,
    y: DVector<f64>,
    iterations: usize,
    polished: bool,
    trace: Vec<f64>,
) -> QpSolution {
    QpSolution {
        status,
        objective: prob.objective(&x),
        stationarity: prob.stationarity(&x, &y),
        feasibility: prob.infeasibility(&x),
        x,
        y,
        iterations,
        polished,
        trace,
    }
}

fn primal_infeasible(prob: &QpProblem, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm < 1e-9 {
        return false;
    }
    if (prob.a.transpose() * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if prob.u[i].is_infinite() {
                if dy[i] > eps * norm {
                    return false;
                }
            } else {
                support += prob.u[i] * dy[i];
            }
        } else if dy[i] < 0.0 {
            if prob.l[i].is_infinite() {
                if -dy[i] > eps * norm {
                    return false;
                }
            } else {
                support += prob.l[i] * dy[i];
            }
        }
    }
    support < -eps * norm
}

fn dual_infeasible(prob: &QpProblem, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = dx.amax();
    if norm < 1e-9 {
        return false;
    }
    if (&prob.p * dx).amax() > eps * norm || prob.q.dot(dx) > -eps * norm {
        return false;
    }
    let adx = &prob.a * dx;
    for i in 0..adx.len() {
        let lo_fin = prob.l[i].is_finite();
        let hi_fin = prob.u[i].is_finite();
        if hi_fin && adx[i] > eps * norm {
            return false;
        }
        if lo_fin && adx[i] < -eps * norm {
            return false;
        }
    }
    true
}

/// Reduced-KKT polish from an approximate primal-dual pair.
fn polish(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>, settings: &QpSettings) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.nvars();
    let m = prob.nrows();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if prob.l[i] == prob.u[i] {
            active.push((i, prob.l[i]));
        } else if prob.l[i].is_finite() && z[i] - prob.l[i] < -y[i] {
            active.push((i, prob.l[i]));
        } else if prob.u[i].is_finite() && prob.u[i] - z[i] < y[i] {
            active.push((i, prob.u[i]));
        }
    }
    let na = active.len();
    let dim = n + na;
    let delta = 1e-7;
    let mut k0 = DMatrix::zeros(dim, dim);
    k0.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for (r, &(i, _)) in active.iter().enumerate() {
        for j in 0..n {
            let v = prob.a[(i, j)];
            k0[(n + r, j)] = v;
            k0[(j, n + r)] = v;
        }
    }
    let mut kd = k0.clone();
    for i in 0..n {
        kd[(i, i)] += delta;
    }
    for r in 0..na {
        kd[(n + r, n + r)] -= delta;
    }
    let lu = kd.lu();
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -prob.q[i];
    }
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs[n + r] = b;
    }
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..50 {
        let res = &rhs - &k0 * &sol;
        if res.amax() < 1e-15 * (1.0 + rhs.amax()) {
            break;
        }
        let corr = lu.solve(&res)?;
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(m);
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    // dual sign check: y ∈ N_[l,u](Ax)
    for &(i, b) in &active {
        if prob.l[i] == prob.u[i] {
            continue;
        }
        let yi = yp[i];
        let at_upper = b == prob.u[i];
        if (at_upper && yi < -settings.tol_stationarity) || (!at_upper && yi > settings.tol_stationarity) {
            return None;
        }
        if (at_upper && yi < 0.0) || (!at_upper && yi > 0.0) {
            yp[i] = 0.0;
        }
    }
    let stat = prob.stationarity(&x, &yp);
    let feas = prob.infeasibility(&x);
    (stat <= settings.tol_stationarity && feas <= settings.tol_feasibility).then_some((x, yp))
}
