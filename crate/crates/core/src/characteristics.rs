//! Hamiltonian trajectories and the method of characteristics.
//!
//! A pair `(x, p)` with `x` primal-adapted and `p` in the dual schedule is a
//! Hamiltonian trajectory when, at every stage,
//!
//! ```text
//! (𝔼ᵗ[Δp_t], 𝔼ᵗ[p_t]) ∈ ∂L_t(x_{t−1}, Δx_t)
//! ```
//!
//! which is certified through Fenchel–Young residuals (zero exactly on the
//! subdifferential). Adding `−p_T ∈ ∂g(𝔼[x_T])` gives the transversality
//! condition. Such a trajectory transports subgradients of the value
//! functions: `−𝔼[p_s] ∈ ∂V_s(𝔼[x_s])`.

use crate::bolza::{self, BolzaError, BolzaProblem, SolveConfig, SolveStatus};
use crate::convexcalc::{ConvexError, LiftedConvex};
use crate::extreal::ExtReal;
use crate::linalg::dot;
use crate::oracleverify::{finite_diff_subgradient, SlopeInterval};
use crate::probspace::{check_adapted, AdaptedReport, Process, Schedule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharError {
    #[error(transparent)]
    Bolza(#[from] BolzaError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error("stage cost L_{t} is +inf at atom {atom}")]
    InfiniteStage { t: usize, atom: usize },
    #[error("terminal cost is +inf at the mean terminal state")]
    InfiniteTerminal,
    #[error("η is not certified as a subgradient (gap {gap})")]
    NotSubgradient { gap: f64 },
    #[error("primal or dual solve failed: {0}")]
    SolveFailed(String),
    #[error("solutions do not form a Hamiltonian trajectory: {0}")]
    Inconsistent(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianTrajectory {
    pub x: Process,
    pub p: Process,
    /// `(t, residual)` for `t ∈ [s+1, T]`.
    pub per_stage_residuals: Vec<(usize, f64)>,
    pub transversality_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResidual {
    pub t: usize,
    pub residual: f64,
    pub worst_atom: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub pass: bool,
    pub tolerance: f64,
    pub primal_adapted: AdaptedReport,
    pub dual_adapted: AdaptedReport,
    pub el_residuals: Vec<StageResidual>,
    pub transversality_residual: Option<f64>,
    pub mean_x_start: Vec<f64>,
    pub mean_p_start: Vec<f64>,
    pub failure: Option<String>,
}

fn check_shapes(p: &BolzaProblem, x: &Process, pp: &Process) -> Result<(), CharError> {
    let ok = |q: &Process| q.dim == p.n() && q.first == p.start() && q.last == p.end() && q.atoms() == p.tree().atoms();
    if !ok(x) || !ok(pp) {
        return Err(CharError::Shape("trajectory does not match the problem window".into()));
    }
    Ok(())
}

/// Largest Euler–Lagrange Fenchel–Young residual over atoms at stage `t`,
/// with the atom where it occurs.
pub fn el_residual_at(p: &BolzaProblem, x: &Process, pp: &Process, t: usize) -> Result<(f64, usize), CharError> {
    check_shapes(p, x, pp)?;
    let tree = p.tree();
    let ep = tree.cond_expect(pp.at(t), t).map_err(BolzaError::from)?;
    let epm = tree.cond_expect(pp.at(t - 1), t).map_err(BolzaError::from)?;
    let mut worst = (f64::NEG_INFINITY, 0);
    for a in 0..tree.atoms() {
        let mut z = x.get(t - 1, a).to_vec();
        z.extend(x.get(t, a).iter().zip(x.get(t - 1, a)).map(|(u, v)| u - v));
        // q-slot (against x) gets 𝔼ᵗ[Δp_t], p-slot (against v) gets 𝔼ᵗ[p_t]
        let mut y: Vec<f64> = ep[a].iter().zip(&epm[a]).map(|(u, v)| u - v).collect();
        y.extend(ep[a].iter().copied());
        let r = match p.lagrangian(t, a).fy_residual(&z, &y) {
            Ok(r) => r,
            Err(ConvexError::InfiniteAtPoint) => return Err(CharError::InfiniteStage { t, atom: a }),
            Err(e) => return Err(e.into()),
        };
        if r > worst.0 {
            worst = (r, a);
        }
    }
    Ok(worst)
}

pub fn el_residual(p: &BolzaProblem, x: &Process, pp: &Process, t: usize) -> Result<f64, CharError> {
    Ok(el_residual_at(p, x, pp, t)?.0)
}

/// `fy_residual(g, 𝔼[x_T], −p_T)`.
pub fn transversality_residual(p: &BolzaProblem, x: &Process, pp: &Process) -> Result<f64, CharError> {
    let y = x.mean(p.tree(), p.end());
    let neg: Vec<f64> = pp.get(p.end(), 0).iter().map(|v| -v).collect();
    match p.terminal().fy_residual(&y, &neg) {
        Ok(r) => Ok(r),
        Err(ConvexError::InfiniteAtPoint) => Err(CharError::InfiniteTerminal),
        Err(e) => Err(e.into()),
    }
}

/// Verifies schedules, every Euler–Lagrange inclusion and transversality.
pub fn check_trajectory(p: &BolzaProblem, x: &Process, pp: &Process, tol: f64) -> Result<TrajectoryVerdict, CharError> {
    check_shapes(p, x, pp)?;
    let tree = p.tree();
    let primal_adapted = check_adapted(tree, x, Schedule::Primal);
    let dual_adapted = check_adapted(tree, pp, Schedule::Dual);
    let mut verdict = TrajectoryVerdict {
        pass: false,
        tolerance: tol,
        mean_x_start: x.mean(tree, p.start()),
        mean_p_start: pp.mean(tree, p.start()),
        primal_adapted,
        dual_adapted,
        el_residuals: vec![],
        transversality_residual: None,
        failure: None,
    };
    if !verdict.primal_adapted.adapted || !verdict.dual_adapted.adapted {
        verdict.failure = Some("measurability schedule violated".into());
        return Ok(verdict);
    }
    for t in p.start() + 1..=p.end() {
        match el_residual_at(p, x, pp, t) {
            Ok((residual, worst_atom)) => verdict.el_residuals.push(StageResidual { t, residual, worst_atom }),
            Err(CharError::InfiniteStage { t, atom }) => {
                verdict.failure = Some(format!("stage cost at t = {t} is +inf at atom {atom}"));
                return Ok(verdict);
            }
            Err(e) => return Err(e),
        }
    }
    match transversality_residual(p, x, pp) {
        Ok(r) => verdict.transversality_residual = Some(r),
        Err(CharError::InfiniteTerminal) => {
            verdict.failure = Some("terminal cost is +inf at the mean terminal state".into());
            return Ok(verdict);
        }
        Err(e) => return Err(e),
    }
    let worst_el = verdict.el_residuals.iter().map(|r| r.residual).fold(0.0, f64::max);
    let tr = verdict.transversality_residual.unwrap_or(f64::INFINITY);
    verdict.pass = worst_el <= tol && tr <= tol;
    if !verdict.pass {
        verdict.failure = Some(if tr > tol {
            format!("transversality residual {tr:.3e} exceeds {tol:.1e}")
        } else {
            format!("Euler-Lagrange residual {worst_el:.3e} exceeds {tol:.1e}")
        });
    }
    Ok(verdict)
}

/// Packages a verified pair.
pub fn trajectory_from(verdict: &TrajectoryVerdict, x: Process, p: Process) -> HamiltonianTrajectory {
    HamiltonianTrajectory {
        x,
        p,
        per_stage_residuals: verdict.el_residuals.iter().map(|r| (r.t, r.residual)).collect(),
        transversality_residual: verdict.transversality_residual.unwrap_or(f64::INFINITY),
    }
}

/// `H_t(x, p) = sup_v p·v − L_t(x, v)`; `−∞` when the `x`-section is empty.
pub fn hamiltonian_eval(p: &BolzaProblem, t: usize, atom: usize, x: &[f64], pvec: &[f64]) -> Result<ExtReal, CharError> {
    let n = p.n();
    let l = p.lagrangian(t, atom);
    let fixed: Vec<usize> = (0..n).collect();
    match l.section(&fixed, x)? {
        None => Ok(ExtReal::NegInf),
        Some(sec) => Ok(sec.conjugate(pvec)?.value),
    }
}

/// The two partial functions of `H_t` at `(x, p)`: `p ↦ H_t(x, p)` and
/// `x ↦ −H_t(x, p) = inf_v L_t(x, v) − p·v`, as lifted convex functions
/// for [`crate::convexcalc::saddle_subgrad_check`]. `None` when the
/// `x`-section is empty.
pub fn hamiltonian_sections(
    p: &BolzaProblem,
    t: usize,
    atom: usize,
    x: &[f64],
    pvec: &[f64],
) -> Result<Option<(LiftedConvex, LiftedConvex)>, CharError> {
    let n = p.n();
    let l = p.lagrangian(t, atom);
    let fixed: Vec<usize> = (0..n).collect();
    let Some(sec) = l.section(&fixed, x)? else {
        return Ok(None);
    };
    let in_p = sec.conjugate_fn()?;
    let mut tilt = vec![0.0; n];
    tilt.extend(pvec.iter().map(|v| -v));
    let v_idx: Vec<usize> = (n..2 * n).collect();
    let in_x = l.add_affine(&tilt, 0.0).hide(&v_idx)?;
    Ok(Some((in_p, in_x)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgradCertificate {
    pub s: usize,
    pub mean_x: Vec<f64>,
    /// `−𝔼[p_s]`, the claimed element of `∂V_s(𝔼[x_s])`.
    pub subgradient: Vec<f64>,
    pub primal_value: ExtReal,
    pub dual_value: ExtReal,
    /// `|V_s + W_s − 𝔼[x_s]·(−𝔼[p_s])|`.
    pub fy_gap: f64,
    pub slopes: Vec<SlopeInterval>,
    pub inside_slopes: bool,
    pub pass: bool,
}

/// Finite-difference step used by [`propagate_subgradient`].
pub const FD_STEP: f64 = 1e-4;

/// Slack on slope intervals: value accuracy `≈1e-10` over the step.
pub const FD_SLACK: f64 = 1e-6;

/// Emits `(𝔼[x_s], −𝔼[p_s])` for every `s` in the window and certifies it
/// both by the Fenchel–Young gap of `(V_s, W_s)` and by finite differences
/// of `V_s`.
pub fn propagate_subgradient(
    p: &BolzaProblem,
    traj: &HamiltonianTrajectory,
    gap_tol: f64,
    cfg: &SolveConfig,
) -> Result<Vec<SubgradCertificate>, CharError> {
    check_shapes(p, &traj.x, &traj.p)?;
    let tree = p.tree();
    let mut out = Vec::new();
    for s in p.start()..=p.end() {
        let ps = p.with_start(s)?;
        let mean_x = traj.x.mean(tree, s);
        let eta: Vec<f64> = traj.p.mean(tree, s).iter().map(|v| -v).collect();
        let pv = bolza::solve_primal(&ps.with_xi(&mean_x), cfg);
        let d = bolza::dualize(&ps)?.with_eta(&eta);
        let dv = bolza::solve_dual(&d, cfg);
        let fy_gap = match (pv.optimal_value, dv.optimal_value) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => (a + b - dot(&mean_x, &eta)).abs(),
            _ => f64::INFINITY,
        };
        let value_at = |xi: &[f64]| -> ExtReal {
            let r = bolza::solve_primal(&ps.with_xi(xi), cfg);
            if r.status == SolveStatus::Optimal {
                r.optimal_value
            } else {
                ExtReal::PosInf
            }
        };
        let slopes = finite_diff_subgradient(value_at, &mean_x, FD_STEP);
        let inside_slopes = slopes.iter().zip(&eta).all(|(iv, g)| iv.contains(*g, FD_SLACK));
        out.push(SubgradCertificate {
            s,
            mean_x,
            subgradient: eta,
            primal_value: pv.optimal_value,
            dual_value: dv.optimal_value,
            fy_gap,
            pass: fy_gap <= gap_tol && inside_slopes,
            slopes,
            inside_slopes,
        });
    }
    Ok(out)
}

/// Solves the primal at ξ and the dual at η, pairs them and verifies the
/// pair. Requires `η ∈ ∂V_s(ξ)` up to `cfg.tol_certification`.
pub fn recover_trajectory(
    p: &BolzaProblem,
    xi: &[f64],
    eta: &[f64],
    cfg: &SolveConfig,
) -> Result<(HamiltonianTrajectory, TrajectoryVerdict), CharError> {
    let pp = p.with_xi(xi);
    let pr = bolza::solve_primal(&pp, cfg);
    let d = bolza::dualize(&pp)?.with_eta(eta);
    let dr = bolza::solve_dual(&d, cfg);
    let gap = match (pr.optimal_value, dr.optimal_value) {
        (ExtReal::Finite(a), ExtReal::Finite(b)) => (a + b - dot(xi, eta)).abs(),
        _ => f64::INFINITY,
    };
    if gap > cfg.tol_certification {
        return Err(CharError::NotSubgradient { gap });
    }
    let (Some(x), Some(pt)) = (pr.trajectory, dr.trajectory) else {
        return Err(CharError::SolveFailed(format!("primal {:?}, dual {:?}", pr.status, dr.status)));
    };
    let verdict = check_trajectory(&pp, &x, &pt, cfg.tol_certification)?;
    if !verdict.pass {
        return Err(CharError::Inconsistent(verdict.failure.clone().unwrap_or_default()));
    }
    Ok((trajectory_from(&verdict, x, pt), verdict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bolza::Stage;
    use crate::convexcalc::{saddle_subgrad_check, SetDescriptor, StructuredConvex};
    use crate::probspace::ScenarioTree;
    use nalgebra::{DMatrix, DVector};

    fn diag(q: &[f64]) -> LiftedConvex {
        LiftedConvex::from(StructuredConvex::quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(q))).unwrap())
    }

    fn quad_problem() -> BolzaProblem {
        BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, diag(&[0.0, 1.0]))], diag(&[1.0]), vec![2.0], 0)
            .unwrap()
    }

    fn path(v: &[f64]) -> Process {
        Process { dim: 1, first: 0, last: v.len() - 1, values: v.iter().map(|&a| vec![vec![a]]).collect() }
    }

    #[test]
    fn el_residual_examples() {
        let p = quad_problem();
        let x = path(&[2.0, 1.0]);
        assert!(el_residual(&p, &x, &path(&[-2.0, -2.0]), 1).unwrap().abs() < 1e-12);
        assert!((el_residual(&p, &x, &path(&[0.0, 0.0]), 1).unwrap() - 1.0).abs() < 1e-12);

        let zero = BolzaProblem::new(
            ScenarioTree::deterministic(0, 1),
            1,
            vec![Stage::uniform(1, 1, LiftedConvex::from(StructuredConvex::zero(2)))],
            LiftedConvex::from(StructuredConvex::zero(1)),
            vec![0.0],
            0,
        )
        .unwrap();
        assert_eq!(el_residual(&zero, &path(&[0.3, -4.0]), &path(&[0.0, 0.0]), 1).unwrap(), 0.0);
    }

    #[test]
    fn check_trajectory_examples() {
        let p = quad_problem();
        let x = path(&[2.0, 1.0]);
        let v = check_trajectory(&p, &x, &path(&[-2.0, -2.0]), 1e-6).unwrap();
        assert!(v.pass, "{v:?}");
        assert!(v.transversality_residual.unwrap().abs() < 1e-12);

        let v = check_trajectory(&p, &x, &path(&[-2.0, -2.5]), 1e-6).unwrap();
        assert!(!v.pass);
        assert!(v.transversality_residual.unwrap() > 1e-3);

        // p_T varying across atoms violates the dual schedule
        let tree = ScenarioTree::new(vec![0.5, 0.5], 0, vec![vec![vec![0, 1]], vec![vec![0], vec![1]]]).unwrap();
        let p2 = BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 2, diag(&[0.0, 1.0]))], diag(&[1.0]), vec![2.0], 0).unwrap();
        let x2 = Process { dim: 1, first: 0, last: 1, values: vec![vec![vec![2.0], vec![2.0]], vec![vec![1.0], vec![1.0]]] };
        let p2t = Process { dim: 1, first: 0, last: 1, values: vec![vec![vec![-2.0], vec![-2.0]], vec![vec![-2.0], vec![-1.0]]] };
        let v = check_trajectory(&p2, &x2, &p2t, 1e-6).unwrap();
        assert!(!v.pass);
        assert!(v.el_residuals.is_empty());
    }

    #[test]
    fn hamiltonian_examples() {
        let l = diag(&[1.0, 1.0]);
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, l)], diag(&[1.0]), vec![0.0], 0).unwrap();
        assert!(hamiltonian_eval(&p, 1, 0, &[1.0], &[2.0]).unwrap().to_f64().abs() < 1e-12);

        let still = LiftedConvex::from(StructuredConvex::indicator(2, &SetDescriptor::boxed(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 0.0])).unwrap());
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, still)], diag(&[1.0]), vec![0.0], 0).unwrap();
        for pv in [-3.0, 0.0, 5.0] {
            assert_eq!(hamiltonian_eval(&p, 1, 0, &[0.7], &[pv]).unwrap(), ExtReal::Finite(0.0));
        }

        let boxed = LiftedConvex::from(
            StructuredConvex::new(
                DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0])),
                DVector::zeros(2),
                0.0,
                &SetDescriptor::boxed(vec![-1.0, f64::NEG_INFINITY], vec![1.0, f64::INFINITY]),
            )
            .unwrap(),
        );
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, boxed)], diag(&[1.0]), vec![0.0], 0).unwrap();
        assert_eq!(hamiltonian_eval(&p, 1, 0, &[2.0], &[1.0]).unwrap(), ExtReal::NegInf);
    }

    #[test]
    fn sections_certify_the_saddle_subgradient() {
        // L = x² + v²: H = p²/4 − x², at (1, 2) the candidate is (−2, 1)
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, diag(&[1.0, 1.0]))], diag(&[1.0]), vec![0.0], 0).unwrap();
        let (hp, hx) = hamiltonian_sections(&p, 1, 0, &[1.0], &[2.0]).unwrap().unwrap();
        let (a, b) = saddle_subgrad_check(&hp, &hx, &[1.0], &[2.0], (&[-2.0], &[1.0])).unwrap();
        assert!(a.abs() < 1e-8 && b.abs() < 1e-8, "{a} {b}");
    }

    #[test]
    fn recover_and_propagate_on_quadratic() {
        let p = quad_problem();
        let cfg = SolveConfig::default();
        let (traj, verdict) = recover_trajectory(&p, &[2.0], &[2.0], &cfg).unwrap();
        assert!(verdict.pass);
        assert!((traj.x.get(1, 0)[0] - 1.0).abs() < 1e-8);
        assert!((traj.p.get(0, 0)[0] + 2.0).abs() < 1e-8);
        let certs = propagate_subgradient(&p, &traj, 1e-5, &cfg).unwrap();
        assert!(certs.iter().all(|c| c.pass), "{certs:?}");
        assert!((certs[0].subgradient[0] - 2.0).abs() < 1e-8);

        match recover_trajectory(&p, &[2.0], &[0.0], &cfg) {
            Err(CharError::NotSubgradient { gap }) => assert!((gap - 2.0).abs() < 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_problem_recovers_zero_adjoint() {
        let zero = BolzaProblem::new(
            ScenarioTree::deterministic(0, 1),
            1,
            vec![Stage::uniform(1, 1, LiftedConvex::from(StructuredConvex::zero(2)))],
            LiftedConvex::from(StructuredConvex::zero(1)),
            vec![0.0],
            0,
        )
        .unwrap();
        let cfg = SolveConfig::default();
        let (traj, _) = recover_trajectory(&zero, &[3.0], &[0.0], &cfg).unwrap();
        assert!(traj.p.values.iter().flatten().flatten().all(|v| v.abs() < 1e-9));
        let certs = propagate_subgradient(&zero, &traj, 1e-5, &cfg).unwrap();
        assert!(certs.iter().all(|c| c.pass));
    }

    #[test]
    fn two_stage_chain_intermediate_subgradient() {
        // L_t = x² + v² on two deterministic stages, g = y²
        let l = diag(&[1.0, 1.0]);
        let p = BolzaProblem::new(
            ScenarioTree::deterministic(0, 2),
            1,
            vec![Stage::uniform(1, 1, l.clone()), Stage::uniform(2, 1, l)],
            diag(&[1.0]),
            vec![1.0],
            0,
        )
        .unwrap();
        let cfg = SolveConfig::default();
        let sg = bolza::value_and_subgradient(&p, &[1.0], &cfg).unwrap();
        let eta = sg.eta.unwrap();
        let (traj, _) = recover_trajectory(&p, &[1.0], &eta, &cfg).unwrap();
        let certs = propagate_subgradient(&p, &traj, 1e-5, &cfg).unwrap();
        for c in &certs {
            assert!(c.pass, "{c:?}");
            let mid = 0.5 * (c.slopes[0].left + c.slopes[0].right);
            assert!((mid - c.subgradient[0]).abs() < 1e-3);
        }
    }
}
