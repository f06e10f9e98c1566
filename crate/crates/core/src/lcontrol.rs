//! Linear-convex control: `x_{t+1} = A x_t + B u_t + w_t` with convex stage
//! costs, its Bolza form, control recovery, Hamiltonians, and the
//! linear-quadratic characteristic system.

use crate::bolza::{self, BolzaError, BolzaProblem, SolveConfig, SolveStatus, Stage, StageCell};
use crate::characteristics::HamiltonianTrajectory;
use crate::convexcalc::{ConvexError, Constraints, LiftedConvex, SetDescriptor, StructuredConvex};
use crate::extreal::ExtReal;
use crate::linalg::{lstsq_min_norm, min_eigenvalue, spectrum};
use crate::probspace::{build_tree, check_adapted, NoiseSample, Process, Schedule, ScenarioTree, TreeError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Zero-mean tolerance for noise samples.
pub const NOISE_MEAN_TOL: f64 = 1e-10;
/// Smallest accepted eigenvalue of `R`.
pub const R_MIN_EIG: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error(transparent)]
    Bolza(#[from] BolzaError),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("noise at time {t} has mean {mean:?}")]
    NonzeroMean { t: usize, mean: Vec<f64> },
    #[error("the initial state set must be a bounded box")]
    UnboundedInitialSet,
    #[error("stage {t}: the reduced Lagrangian is improper ({source})")]
    Improper { t: usize, source: ConvexError },
    #[error("no minimizing control at time {t}, atom {atom}")]
    NoControl { t: usize, atom: usize },
    #[error("R is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("ξ is not interior to the initial state set")]
    BoundaryXi,
    #[error("initial state on atom {atom} leaves the interior of the initial state set")]
    BoundaryState { atom: usize },
    #[error("η is inconsistent with ξ (system residual {residual:e})")]
    InconsistentEta { residual: f64 },
}

/// `x_{t+1} = A x_t + B u_t + w_t` on `[τ, T]` with stage costs `ℓ_t(x, u)`,
/// mixed constraints `(x, u) ∈ D_t`, control sets `U_t`, state sets `X_t`
/// and terminal cost `g(𝔼 x_T)`. Per-time lists have one entry per
/// `t ∈ [τ, T−1]`, except `state_sets` which covers `[τ, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LcParts {
    pub n: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub start: usize,
    pub end: usize,
    pub stage_costs: Vec<StructuredConvex>,
    pub mixed: Vec<SetDescriptor>,
    pub control_sets: Vec<SetDescriptor>,
    pub state_sets: Vec<SetDescriptor>,
    pub terminal: StructuredConvex,
    pub noise: Vec<Vec<NoiseSample>>,
    pub gamma: Option<Vec<NoiseSample>>,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqMatrices {
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// A validated linear-convex problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LcRepr", into = "LcRepr")]
pub struct LcProblem {
    parts: LcParts,
    lq: Option<LqMatrices>,
    tree: ScenarioTree,
    /// `ℓ_t + δ_{D_t} + δ_{U_t}(u) + δ_{X_t}(x)` over `(x, u)`.
    stage_fns: Vec<StructuredConvex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

impl<T: Clone> OneOrMany<T> {
    fn expand(self, len: usize, what: &str) -> Result<Vec<T>, LcError> {
        match self {
            OneOrMany::One(v) => Ok(vec![v; len]),
            OneOrMany::Many(v) if v.len() == len => Ok(v),
            OneOrMany::Many(v) if v.len() == 1 => Ok(vec![v[0].clone(); len]),
            OneOrMany::Many(v) => Err(LcError::Invalid(format!("{what}: expected {len} entries, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRepr {
    w: Vec<f64>,
    prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NoiseStageRepr {
    t: usize,
    samples: Vec<SampleRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LcRepr {
    n: usize,
    m: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    horizon: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage_costs: Option<OneOrMany<StructuredConvex>>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    p: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal: Option<StructuredConvex>,
    #[serde(rename = "U", default, skip_serializing_if = "Option::is_none")]
    u: Option<OneOrMany<SetDescriptor>>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    x: Option<OneOrMany<SetDescriptor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mixed: Option<OneOrMany<SetDescriptor>>,
    #[serde(default)]
    noise: Vec<NoiseStageRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<SampleRepr>>,
    xi: Vec<f64>,
}

fn matrix(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>, LcError> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(LcError::Invalid(format!("{what} must be {nr}x{nc}")));
    }
    Ok(crate::linalg::mat_from_rows(rows, nc))
}

fn samples(s: Vec<SampleRepr>) -> Vec<NoiseSample> {
    s.into_iter().map(|s| NoiseSample::new(s.w, s.prob)).collect()
}

impl TryFrom<LcRepr> for LcProblem {
    type Error = LcError;
    fn try_from(r: LcRepr) -> Result<Self, LcError> {
        let (n, m) = (r.n, r.m);
        let [start, end] = r.horizon;
        if end <= start {
            return Err(LcError::Invalid(format!("horizon [{start}, {end}] is empty")));
        }
        let k = end - start;
        let a = matrix(&r.a, n, n, "A")?;
        let b = matrix(&r.b, n, m, "B")?;
        let lq = match (&r.p, &r.r, &r.q) {
            (None, None, None) => None,
            (Some(p), Some(rr), Some(q)) => {
                Some(LqMatrices { p: matrix(p, n, n, "P")?, r: matrix(rr, m, m, "R")?, q: matrix(q, n, n, "Q")? })
            }
            _ => return Err(LcError::Invalid("P, R and Q must be given together".into())),
        };
        let (stage_costs, terminal) = match (&lq, r.stage_costs, r.terminal) {
            (Some(lq), None, None) => {
                let f = lq_stage_cost(&lq.p, &lq.r)?;
                (vec![f; k], StructuredConvex::quadratic(lq.q.clone())?)
            }
            (None, Some(costs), Some(g)) => (costs.expand(k, "stage_costs")?, g),
            (Some(_), _, _) => return Err(LcError::Invalid("give either P/R/Q or stage_costs/terminal".into())),
            _ => return Err(LcError::Invalid("stage_costs and terminal are required without P/R/Q".into())),
        };
        let mut noise = vec![vec![NoiseSample::new(vec![0.0; n], 1.0)]; k];
        let mut seen = vec![false; k];
        for st in r.noise {
            if st.t < start || st.t >= end {
                return Err(LcError::Invalid(format!("noise time {} outside [{start}, {}]", st.t, end - 1)));
            }
            if std::mem::replace(&mut seen[st.t - start], true) {
                return Err(LcError::Invalid(format!("noise for time {} given twice", st.t)));
            }
            noise[st.t - start] = samples(st.samples);
        }
        let parts = LcParts {
            n,
            m,
            a,
            b,
            start,
            end,
            stage_costs,
            mixed: r.mixed.map(|v| v.expand(k, "mixed")).transpose()?.unwrap_or_else(|| vec![SetDescriptor::All; k]),
            control_sets: r.u.map(|v| v.expand(k, "U")).transpose()?.unwrap_or_else(|| vec![SetDescriptor::All; k]),
            state_sets: r.x.map(|v| v.expand(k + 1, "X")).transpose()?.unwrap_or_else(|| vec![SetDescriptor::All; k + 1]),
            terminal,
            noise,
            gamma: r.gamma.map(samples),
            xi: r.xi,
        };
        LcProblem::build(parts, lq)
    }
}

impl From<LcProblem> for LcRepr {
    fn from(lc: LcProblem) -> Self {
        let p = lc.parts;
        let rows = crate::linalg::mat_to_rows;
        let (stage_costs, terminal, pm, rm, qm) = match &lc.lq {
            Some(lq) => (None, None, Some(rows(&lq.p)), Some(rows(&lq.r)), Some(rows(&lq.q))),
            None => (Some(OneOrMany::Many(p.stage_costs.clone())), Some(p.terminal.clone()), None, None, None),
        };
        let to_repr = |s: &[NoiseSample]| s.iter().map(|s| SampleRepr { w: s.value.clone(), prob: s.prob }).collect::<Vec<_>>();
        LcRepr {
            n: p.n,
            m: p.m,
            a: rows(&p.a),
            b: rows(&p.b),
            horizon: [p.start, p.end],
            stage_costs,
            p: pm,
            r: rm,
            q: qm,
            terminal,
            u: Some(OneOrMany::Many(p.control_sets)),
            x: Some(OneOrMany::Many(p.state_sets)),
            mixed: Some(OneOrMany::Many(p.mixed)),
            noise: p.noise.iter().enumerate().map(|(i, s)| NoiseStageRepr { t: p.start + i, samples: to_repr(s) }).collect(),
            gamma: p.gamma.as_deref().map(to_repr),
            xi: p.xi,
        }
    }
}

/// `xᵀPx + uᵀRu` over `(x, u)`.
fn lq_stage_cost(p: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<StructuredConvex, ConvexError> {
    let (n, m) = (p.nrows(), r.nrows());
    let mut quad = DMatrix::zeros(n + m, n + m);
    quad.view_mut((0, 0), (n, n)).copy_from(p);
    quad.view_mut((n, n), (m, m)).copy_from(r);
    StructuredConvex::quadratic(quad)
}

/// Selection `(x, u) ↦ x` or `↦ u` as a matrix over `n + m` coordinates.
fn selector(rows: usize, offset: usize, cols: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        s[(i, offset + i)] = 1.0;
    }
    s
}

fn embed(set: &SetDescriptor, dim: usize, offset: usize, total: usize) -> Result<Constraints, ConvexError> {
    set.flatten(dim)?.precompose(&selector(dim, offset, total), &DVector::zeros(dim))
}

impl LcProblem {
    pub fn new(parts: LcParts) -> Result<Self, LcError> {
        Self::build(parts, None)
    }

    fn build(parts: LcParts, lq: Option<LqMatrices>) -> Result<Self, LcError> {
        let (n, m) = (parts.n, parts.m);
        let k = parts.end.checked_sub(parts.start).filter(|&k| k > 0).ok_or_else(|| LcError::Invalid("horizon is empty".into()))?;
        if parts.a.shape() != (n, n) || parts.b.shape() != (n, m) || parts.xi.len() != n {
            return Err(LcError::Invalid(format!("A must be {n}x{n}, B {n}x{m}, ξ of length {n}")));
        }
        let lens = [parts.stage_costs.len(), parts.mixed.len(), parts.control_sets.len(), parts.noise.len()];
        if lens.iter().any(|&l| l != k) || parts.state_sets.len() != k + 1 {
            return Err(LcError::Invalid(format!("per-time lists must have {k} entries ({} for state sets)", k + 1)));
        }
        if parts.stage_costs.iter().any(|f| f.dim() != n + m) || parts.terminal.dim() != n {
            return Err(LcError::Invalid(format!("stage costs act on ℝ^{}, the terminal cost on ℝ^{n}", n + m)));
        }
        let x0 = parts.state_sets[0].flatten(n)?;
        if x0.has_rows() || x0.lo.iter().chain(&x0.hi).any(|v| !v.is_finite()) {
            return Err(LcError::UnboundedInitialSet);
        }
        for (i, stage) in parts.noise.iter().enumerate() {
            if stage.iter().any(|s| s.value.len() != n) {
                return Err(LcError::Invalid(format!("noise at time {} must have dimension {n}", parts.start + i)));
            }
            let mean: Vec<f64> = (0..n).map(|j| stage.iter().map(|s| s.prob * s.value[j]).sum()).collect();
            if mean.iter().any(|v| v.abs() > NOISE_MEAN_TOL) {
                return Err(LcError::NonzeroMean { t: parts.start + i, mean });
            }
        }
        let tree = build_tree(parts.gamma.as_deref(), &parts.noise, parts.start)?;
        let d = n + m;
        let mut stage_fns = Vec::with_capacity(k);
        for i in 0..k {
            let t = parts.start + i;
            let cons = parts.mixed[i]
                .flatten(d)?
                .intersect(&embed(&parts.control_sets[i], m, n, d)?)?
                .intersect(&embed(&parts.state_sets[i], n, 0, d)?)?;
            let f = parts.stage_costs[i].constrained(&cons).map_err(|e| match e {
                ConvexError::EmptyDomain => LcError::Invalid(format!("stage {t} has no feasible (x, u)")),
                e => e.into(),
            })?;
            stage_fns.push(f);
        }
        Ok(LcProblem { parts, lq, tree, stage_fns })
    }

    pub fn parts(&self) -> &LcParts {
        &self.parts
    }
    pub fn n(&self) -> usize {
        self.parts.n
    }
    pub fn m(&self) -> usize {
        self.parts.m
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.parts.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.parts.b
    }
    pub fn start(&self) -> usize {
        self.parts.start
    }
    pub fn end(&self) -> usize {
        self.parts.end
    }
    pub fn xi(&self) -> &[f64] {
        &self.parts.xi
    }
    pub fn terminal(&self) -> &StructuredConvex {
        &self.parts.terminal
    }
    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }
    pub fn lq(&self) -> Option<&LqMatrices> {
        self.lq.as_ref()
    }

    pub fn with_xi(&self, xi: &[f64]) -> Self {
        let mut out = self.clone();
        out.parts.xi = xi.to_vec();
        out
    }

    /// The stage cost at time `t ∈ [τ, T−1]` with all of its constraints.
    pub fn stage_function(&self, t: usize) -> Result<StructuredConvex, LcError> {
        self.stage_fns
            .get(t.wrapping_sub(self.parts.start))
            .cloned()
            .ok_or_else(|| LcError::Invalid(format!("no stage cost at time {t}")))
    }

    /// Initial state box `X_τ`.
    pub fn initial_box(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.parts.state_sets[0].flatten(self.parts.n).expect("validated at construction");
        (c.lo, c.hi)
    }

    /// Empirical noise covariance `Σ prob · w wᵀ` per stage.
    pub fn noise_covariance(&self) -> Vec<DMatrix<f64>> {
        let n = self.parts.n;
        self.parts
            .noise
            .iter()
            .map(|stage| {
                stage.iter().fold(DMatrix::zeros(n, n), |acc, s| {
                    let w = DVector::from_column_slice(&s.value);
                    acc + &w * w.transpose() * s.prob
                })
            })
            .collect()
    }

    fn noise_at(&self, t: usize, atom: usize) -> &[f64] {
        self.tree.noise_at(t, atom).expect("tree is built from the noise")
    }
}

/// Maps Bolza nodes back to controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHandle {
    n: usize,
    m: usize,
    tree: ScenarioTree,
    /// `Φ_t` over `(x, v, u)`, indexed by `t − τ − 1` then by cell at `t`.
    phis: Vec<Vec<StructuredConvex>>,
}

/// The Bolza form: `L_t(x, v) = inf_u Φ_t(x, v, u)` with
/// `Φ_t = ℓ_{t−1}(x, u) + δ{v = (A−I)x + Bu + w_{t−1}} + δ_{D_{t−1}} + δ_{U_{t−1}}(u) + δ_{X_{t−1}}(x)`.
pub fn lc_to_bolza(lc: &LcProblem) -> Result<(BolzaProblem, ControlHandle), LcError> {
    let (n, m) = (lc.n(), lc.m());
    let d = 2 * n + m;
    let tree = lc.tree();
    // (x, v, u) ↦ (x, u)
    let mut sel = DMatrix::zeros(n + m, d);
    for i in 0..n {
        sel[(i, i)] = 1.0;
    }
    for j in 0..m {
        sel[(n + j, 2 * n + j)] = 1.0;
    }
    let mut dyn_a = DMatrix::zeros(n, d);
    dyn_a.view_mut((0, 0), (n, n)).copy_from(&(lc.a() - DMatrix::identity(n, n)));
    dyn_a.view_mut((0, n), (n, n)).copy_from(&(-DMatrix::identity(n, n)));
    dyn_a.view_mut((0, 2 * n), (n, m)).copy_from(lc.b());
    let mut stages = Vec::new();
    let mut phis = Vec::new();
    for t in lc.start() + 1..=lc.end() {
        let base = lc.stage_function(t - 1)?.precompose(&sel, &DVector::zeros(n + m))?;
        let mut cells = Vec::new();
        let mut fns = Vec::new();
        for cell in tree.partition(t) {
            let w = lc.noise_at(t - 1, cell[0]);
            let mut dynamics = Constraints::unconstrained(d);
            dynamics.eq_a = dyn_a.clone();
            dynamics.eq_b = -DVector::from_column_slice(w);
            let phi = base.constrained(&dynamics).map_err(|e| match e {
                ConvexError::EmptyDomain => LcError::Invalid(format!("stage {t} admits no transition")),
                e => e.into(),
            })?;
            let lifted = LiftedConvex::new(phi.clone(), 2 * n).map_err(|source| LcError::Improper { t, source })?;
            cells.push(StageCell { atoms: cell.clone(), f: lifted });
            fns.push(phi);
        }
        stages.push(Stage { t, cells });
        phis.push(fns);
    }
    let p = BolzaProblem::new(tree.clone(), n, stages, LiftedConvex::from(lc.terminal().clone()), lc.xi().to_vec(), lc.start())?;
    Ok((p, ControlHandle { n, m, tree: tree.clone(), phis }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProcess {
    /// `u_t` for `t ∈ [τ, T−1]`.
    pub u: Process,
    /// Whether `u_t` is measurable at time `t` (not only at `t + 1`).
    pub adapted: bool,
    pub deviation: f64,
}

/// Least-norm minimizing controls along a Bolza trajectory.
pub fn recover_control(handle: &ControlHandle, x: &Process) -> Result<ControlProcess, LcError> {
    let (n, m) = (handle.n, handle.m);
    let tree = &handle.tree;
    let (start, end) = (tree.start(), tree.end());
    if x.first != start || x.last != end || x.dim != n {
        return Err(LcError::Invalid("trajectory does not match the problem window".into()));
    }
    let kept: Vec<usize> = (0..2 * n).collect();
    let mut u = Process::zeros(m, start, end - 1, tree.atoms());
    for t in start + 1..=end {
        for (c, cell) in tree.partition(t).iter().enumerate() {
            let phi = &handle.phis[t - start - 1][c];
            let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
            for &a in cell {
                let mut point = x.get(t - 1, a).to_vec();
                point.extend(x.get(t, a).iter().zip(x.get(t - 1, a)).map(|(b, c)| b - c));
                let ua = match &last {
                    Some((pt, ua)) if *pt == point => ua.clone(),
                    _ => {
                        let proj = phi.inf_project(&kept, &point)?;
                        let ua = proj.minimizer.filter(|_| proj.value.is_finite()).ok_or(LcError::NoControl { t: t - 1, atom: a })?;
                        last = Some((point, ua.clone()));
                        ua
                    }
                };
                u.at_mut(t - 1)[a] = ua;
            }
        }
    }
    let report = check_adapted(tree, &u, Schedule::Primal);
    Ok(ControlProcess { u, adapted: report.adapted, deviation: report.deviation })
}

/// Cost of a state/control pair in the original formulation; `+∞` when
/// the dynamics or a constraint fail.
pub fn lc_objective(lc: &LcProblem, x: &Process, u: &Process) -> ExtReal {
    let tree = lc.tree();
    let (n, m) = (lc.n(), lc.m());
    let mut total = 0.0;
    let mut z = vec![0.0; n + m];
    for t in lc.start()..lc.end() {
        let f = &lc.stage_fns[t - lc.start()];
        for a in 0..tree.atoms() {
            let (xt, ut, xn) = (x.get(t, a), u.get(t, a), x.get(t + 1, a));
            let w = lc.noise_at(t, a);
            let mut gap: f64 = 0.0;
            for i in 0..n {
                let mut s = w[i] - xn[i];
                for j in 0..n {
                    s += lc.a()[(i, j)] * xt[j];
                }
                for j in 0..m {
                    s += lc.b()[(i, j)] * ut[j];
                }
                gap = gap.max(s.abs());
            }
            if gap > 1e-8 * (1.0 + crate::linalg::norm_inf(xn)) {
                return ExtReal::PosInf;
            }
            z[..n].copy_from_slice(xt);
            z[n..].copy_from_slice(ut);
            match f.value(&z) {
                ExtReal::Finite(v) => total += tree.prob(a) * v,
                other => return other,
            }
        }
    }
    lc.terminal().value(&x.mean(tree, lc.end())).add(ExtReal::Finite(total))
}

/// `sup_u {p·Bu − ℓ_{t−1}(x, u)} + p·((A−I)x + w_{t−1})` over the feasible
/// controls; `−∞` when no control is feasible at `x` (in particular when
/// `x ∉ X_{t−1}`).
pub fn hamiltonian_lc(lc: &LcProblem, t: usize, atom: usize, x: &[f64], p: &[f64]) -> Result<ExtReal, LcError> {
    let n = lc.n();
    if t <= lc.start() || t > lc.end() || x.len() != n || p.len() != n {
        return Err(LcError::Invalid(format!("hamiltonian needs t in [{}, {}] and vectors of length {n}", lc.start() + 1, lc.end())));
    }
    let f = LiftedConvex::from(lc.stage_function(t - 1)?);
    let idx: Vec<usize> = (0..n).collect();
    let Some(section) = f.section(&idx, x)? else {
        return Ok(ExtReal::NegInf);
    };
    let pv = DVector::from_column_slice(p);
    let y = lc.b().transpose() * &pv;
    let inner = section.conjugate(y.as_slice())?.value;
    Ok(inner.add(ExtReal::Finite(drift(lc, t, atom, x, p))))
}

/// `p·((A−I)x + w_{t−1})`.
fn drift(lc: &LcProblem, t: usize, atom: usize, x: &[f64], p: &[f64]) -> f64 {
    let n = lc.n();
    let w = lc.noise_at(t - 1, atom);
    let xv = DVector::from_column_slice(x);
    let dr = (lc.a() - DMatrix::identity(n, n)) * xv + DVector::from_column_slice(w);
    dr.dot(&DVector::from_column_slice(p))
}

/// A linear-quadratic problem: `ℓ_t = xᵀPx + uᵀRu`, `g = yᵀQy`, no mixed
/// constraints, unconstrained controls, and only `X_τ` restricting states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LcProblem", into = "LcProblem")]
pub struct LqProblem {
    lc: LcProblem,
}

impl TryFrom<LcProblem> for LqProblem {
    type Error = LcError;
    fn try_from(lc: LcProblem) -> Result<Self, LcError> {
        let lq = lc.lq.as_ref().ok_or_else(|| LcError::Invalid("P, R and Q are required".into()))?;
        let min_eig = min_eigenvalue(&lq.r);
        if min_eig < R_MIN_EIG {
            return Err(LcError::NotPositiveDefinite { min_eig });
        }
        if min_eigenvalue(&lq.q) < -1e-10 || min_eigenvalue(&lq.p) < -1e-10 {
            return Err(LcError::Invalid("P and Q must be positive semidefinite".into()));
        }
        let p = &lc.parts;
        let all = |s: &SetDescriptor| s.flatten(0).ok().is_some_and(|c| c.is_all()) || matches!(s, SetDescriptor::All);
        if !p.mixed.iter().all(all) || !p.control_sets.iter().all(all) || !p.state_sets[1..].iter().all(all) {
            return Err(LcError::Invalid("LQ problems have no mixed, control or non-initial state constraints".into()));
        }
        Ok(LqProblem { lc })
    }
}

impl From<LqProblem> for LcProblem {
    fn from(q: LqProblem) -> Self {
        q.lc
    }
}

/// Data of an [`LqProblem`]; `noise[k]` holds the samples of `w_{start+k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqParts {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub start: usize,
    pub end: usize,
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    pub noise: Vec<Vec<NoiseSample>>,
    pub gamma: Option<Vec<NoiseSample>>,
    pub xi: Vec<f64>,
}

impl LqProblem {
    pub fn new(q: LqParts) -> Result<Self, LcError> {
        let (n, m) = (q.a.nrows(), q.b.ncols());
        if q.p.shape() != (n, n) || q.r.shape() != (m, m) || q.q.shape() != (n, n) {
            return Err(LcError::Invalid(format!("P, Q must be {n}x{n} and R {m}x{m}")));
        }
        let k = q.end.saturating_sub(q.start);
        let mut state_sets = vec![SetDescriptor::All; k + 1];
        state_sets[0] = SetDescriptor::boxed(q.x0_lower, q.x0_upper);
        let parts = LcParts {
            n,
            m,
            a: q.a,
            b: q.b,
            start: q.start,
            end: q.end,
            stage_costs: vec![lq_stage_cost(&q.p, &q.r)?; k],
            mixed: vec![SetDescriptor::All; k],
            control_sets: vec![SetDescriptor::All; k],
            state_sets,
            terminal: StructuredConvex::quadratic(q.q.clone())?,
            noise: q.noise,
            gamma: q.gamma,
            xi: q.xi,
        };
        LqProblem::try_from(LcProblem::build(parts, Some(LqMatrices { p: q.p, r: q.r, q: q.q }))?)
    }

    pub fn lc(&self) -> &LcProblem {
        &self.lc
    }

    fn mats(&self) -> &LqMatrices {
        self.lc.lq.as_ref().expect("checked at construction")
    }

    pub fn with_xi(&self, xi: &[f64]) -> Self {
        LqProblem { lc: self.lc.with_xi(xi) }
    }
}

/// `¼(Bᵀp)ᵀR⁻¹(Bᵀp) − xᵀPx + p·((A−I)x + w_{t−1})`, and `−∞` at `t = τ+1`
/// for `x ∉ X_τ`.
pub fn hamiltonian_lq(lq: &LqProblem, t: usize, atom: usize, x: &[f64], p: &[f64]) -> Result<ExtReal, LcError> {
    let lc = &lq.lc;
    let n = lc.n();
    if t <= lc.start() || t > lc.end() || x.len() != n || p.len() != n {
        return Err(LcError::Invalid(format!("hamiltonian needs t in [{}, {}] and vectors of length {n}", lc.start() + 1, lc.end())));
    }
    if t == lc.start() + 1 {
        let (lo, hi) = lc.initial_box();
        if (0..n).any(|i| x[i] < lo[i] || x[i] > hi[i]) {
            return Ok(ExtReal::NegInf);
        }
    }
    let mats = lq.mats();
    let y = lc.b().transpose() * DVector::from_column_slice(p);
    let rinv_y = mats.r.clone().lu().solve(&y).ok_or(LcError::NotPositiveDefinite { min_eig: 0.0 })?;
    let xv = DVector::from_column_slice(x);
    let h = 0.25 * y.dot(&rinv_y) - xv.dot(&(&mats.p * &xv)) + drift(lc, t, atom, x, p);
    Ok(ExtReal::Finite(h))
}

/// How the start-time multiplier is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// `𝔼^τ[p_τ] = −η`.
    Given(Vec<f64>),
    /// `𝔼^τ[p_τ]` constant, value determined by the system.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqCharacteristics {
    pub trajectory: HamiltonianTrajectory,
    pub control: ControlProcess,
    pub value: f64,
    /// `−𝔼[p_τ]`.
    pub eta: Vec<f64>,
    /// The linear system was rank deficient; the least-norm solution is returned.
    pub degenerate: bool,
    pub system_residual: f64,
    pub unknowns: usize,
    pub equations: usize,
}

/// Index bookkeeping for the characteristic system.
struct Layout {
    n: usize,
    start: usize,
    end: usize,
    /// Offset of `x_t` cells (cells of the time-`t` partition).
    x_off: Vec<usize>,
    /// Offset of `p_t` cells (cells of the time-`t+1` partition), `t < T`.
    p_off: Vec<usize>,
    /// Offset of `p_T`.
    p_end: usize,
    total: usize,
}

impl Layout {
    fn new(tree: &ScenarioTree, n: usize) -> Self {
        let (start, end) = (tree.start(), tree.end());
        let mut off = 0;
        let mut x_off = Vec::new();
        for t in start..=end {
            x_off.push(off);
            off += tree.partition(t).len() * n;
        }
        let mut p_off = Vec::new();
        for t in start..end {
            p_off.push(off);
            off += tree.partition(t + 1).len() * n;
        }
        let p_end = off;
        Layout { n, start, end, x_off, p_off, p_end, total: off + n }
    }
    fn x(&self, t: usize, cell: usize) -> usize {
        self.x_off[t - self.start] + cell * self.n
    }
    fn p(&self, t: usize, cell: usize) -> usize {
        if t == self.end {
            self.p_end
        } else {
            self.p_off[t - self.start] + cell * self.n
        }
    }
}

/// Rows accumulated as `(coefficients, rhs)` blocks of height `n`.
struct System {
    rows: Vec<(Vec<(usize, DMatrix<f64>)>, DVector<f64>)>,
}

impl System {
    fn push(&mut self, terms: Vec<(usize, DMatrix<f64>)>, rhs: DVector<f64>) {
        self.rows.push((terms, rhs));
    }
    fn assemble(&self, n: usize, cols: usize) -> (DMatrix<f64>, DVector<f64>) {
        let nr = self.rows.len() * n;
        let mut a = DMatrix::zeros(nr, cols);
        let mut b = DVector::zeros(nr);
        for (k, (terms, rhs)) in self.rows.iter().enumerate() {
            for (col, blk) in terms {
                let mut v = a.view_mut((k * n, *col), (n, blk.ncols()));
                v += blk;
            }
            b.rows_mut(k * n, n).copy_from(rhs);
        }
        (a, b)
    }
}

/// `𝔼^t[p_t]` on cell `c` of the time-`t` partition as weighted blocks.
fn cond_mean_terms(tree: &ScenarioTree, lay: &Layout, t: usize, c: usize, scale: &DMatrix<f64>) -> Vec<(usize, DMatrix<f64>)> {
    if t == lay.end {
        return vec![(lay.p(t, 0), scale.clone())];
    }
    let pc = tree.cell_prob(t, c);
    tree.children(t, c, t + 1)
        .into_iter()
        .map(|d| (lay.p(t, d), scale * (tree.cell_prob(t + 1, d) / pc)))
        .collect()
}

/// Solves the LQ characteristic system: forward dynamics, adjoint
/// equations, transversality `p_T = −2Q𝔼[x_T]`, `𝔼[x_τ] = ξ` and the
/// start-time multiplier condition, all at once.
pub fn lq_solve_characteristics(lq: &LqProblem, xi: &[f64], mode: &EtaMode) -> Result<LqCharacteristics, LcError> {
    let lc = &lq.lc;
    let mats = lq.mats();
    let (n, m) = (lc.n(), lc.m());
    let tree = lc.tree();
    let (start, end) = (lc.start(), lc.end());
    if xi.len() != n {
        return Err(LcError::Invalid(format!("ξ must have length {n}")));
    }
    let (lo, hi) = lc.initial_box();
    if (0..n).any(|i| !(xi[i] > lo[i] && xi[i] < hi[i])) {
        return Err(LcError::BoundaryXi);
    }
    let lay = Layout::new(tree, n);
    let id = DMatrix::<f64>::identity(n, n);
    let rinv = mats.r.clone().try_inverse().ok_or(LcError::NotPositiveDefinite { min_eig: 0.0 })?;
    let k = lc.b() * &rinv * lc.b().transpose() * 0.5;
    let at = lc.a().transpose();
    let mut sys = System { rows: Vec::new() };
    for t in start + 1..=end {
        for (c, cell) in tree.partition(t).iter().enumerate() {
            let prev = tree.cell_of(t - 1, cell[0]);
            let w = DVector::from_column_slice(lc.noise_at(t - 1, cell[0]));
            // x_t − A x_{t−1} − K 𝔼^t[p_t] = w_{t−1}
            let mut terms = vec![(lay.x(t, c), id.clone()), (lay.x(t - 1, prev), -lc.a())];
            terms.extend(cond_mean_terms(tree, &lay, t, c, &(-&k)));
            sys.push(terms, w);
            // Aᵀ 𝔼^t[p_t] − p_{t−1} − 2P x_{t−1} = 0
            let mut terms = cond_mean_terms(tree, &lay, t, c, &at);
            terms.push((lay.p(t - 1, c), -id.clone()));
            terms.push((lay.x(t - 1, prev), -&mats.p * 2.0));
            sys.push(terms, DVector::zeros(n));
        }
    }
    // p_T + 2Q 𝔼[x_T] = 0
    let mut terms = vec![(lay.p(end, 0), id.clone())];
    for c in 0..tree.partition(end).len() {
        terms.push((lay.x(end, c), &mats.q * (2.0 * tree.cell_prob(end, c))));
    }
    sys.push(terms, DVector::zeros(n));
    // 𝔼[x_τ] = ξ
    let terms = (0..tree.partition(start).len()).map(|c| (lay.x(start, c), &id * tree.cell_prob(start, c))).collect();
    sys.push(terms, DVector::from_column_slice(xi));
    let cells0 = tree.partition(start).len();
    match mode {
        EtaMode::Free => {
            for c in 1..cells0 {
                let mut terms = cond_mean_terms(tree, &lay, start, c, &id);
                terms.extend(cond_mean_terms(tree, &lay, start, 0, &(-&id)));
                sys.push(terms, DVector::zeros(n));
            }
        }
        EtaMode::Given(eta) => {
            if eta.len() != n {
                return Err(LcError::Invalid(format!("η must have length {n}")));
            }
            for c in 0..cells0 {
                sys.push(cond_mean_terms(tree, &lay, start, c, &id), -DVector::from_column_slice(eta));
            }
        }
    }
    let (a, b) = sys.assemble(n, lay.total);
    let (z, residual, rank) = lstsq_min_norm(&a, &b);
    let scale = 1.0 + b.amax();
    if matches!(mode, EtaMode::Given(_)) && residual > 1e-8 * scale {
        return Err(LcError::InconsistentEta { residual });
    }

    let atoms = tree.atoms();
    let mut x = Process::zeros(n, start, end, atoms);
    let mut p = Process::zeros(n, start, end, atoms);
    for a_ in 0..atoms {
        for t in start..=end {
            let xo = lay.x(t, tree.cell_of(t, a_));
            x.at_mut(t)[a_] = z.rows(xo, n).iter().copied().collect();
            let po = if t == end { lay.p(end, 0) } else { lay.p(t, tree.cell_of(t + 1, a_)) };
            p.at_mut(t)[a_] = z.rows(po, n).iter().copied().collect();
        }
        if (0..n).any(|i| !(x.get(start, a_)[i] > lo[i] && x.get(start, a_)[i] < hi[i])) {
            return Err(LcError::BoundaryState { atom: a_ });
        }
    }
    // u_t = ½R⁻¹Bᵀ𝔼^{t+1}[p_{t+1}]
    let half = &rinv * lc.b().transpose() * 0.5;
    let mut u = Process::zeros(m, start, end - 1, atoms);
    let mut per_stage = Vec::new();
    for t in start + 1..=end {
        let ep = tree.cond_expect(p.at(t), t)?;
        let mut worst: f64 = 0.0;
        for a_ in 0..atoms {
            let epv = DVector::from_column_slice(&ep[a_]);
            u.at_mut(t - 1)[a_] = (&half * &epv).iter().copied().collect();
            let xp = DVector::from_column_slice(x.get(t - 1, a_));
            let xt = DVector::from_column_slice(x.get(t, a_));
            let w = DVector::from_column_slice(lc.noise_at(t - 1, a_));
            let dyn_res = (&xt - lc.a() * &xp - &k * &epv - w).amax();
            let adj = &at * &epv - DVector::from_column_slice(p.get(t - 1, a_)) - &mats.p * &xp * 2.0;
            worst = worst.max(dyn_res).max(adj.amax());
        }
        per_stage.push((t, worst));
    }
    let mean_xt = DVector::from_vec(x.mean(tree, end));
    let transversality = (DVector::from_column_slice(p.get(end, 0)) + &mats.q * &mean_xt * 2.0).amax();

    let mut value = mean_xt.dot(&(&mats.q * &mean_xt));
    for t in start..end {
        for a_ in 0..atoms {
            let xv = DVector::from_column_slice(x.get(t, a_));
            let uv = DVector::from_column_slice(u.get(t, a_));
            value += tree.prob(a_) * (xv.dot(&(&mats.p * &xv)) + uv.dot(&(&mats.r * &uv)));
        }
    }
    let eta: Vec<f64> = p.mean(tree, start).iter().map(|v| -v).collect();
    let report = check_adapted(tree, &u, Schedule::Primal);
    Ok(LqCharacteristics {
        trajectory: HamiltonianTrajectory { x, p, per_stage_residuals: per_stage, transversality_residual: transversality },
        control: ControlProcess { u, adapted: report.adapted, deviation: report.deviation },
        value,
        eta,
        degenerate: rank < lay.total,
        system_residual: residual,
        unknowns: lay.total,
        equations: a.nrows(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub status: CheckStatus,
    pub evidence: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
}

impl AssumptionCheck {
    fn new(name: &str, status: CheckStatus, evidence: impl Into<String>) -> Self {
        AssumptionCheck { name: name.into(), status, evidence: evidence.into(), constants: BTreeMap::new(), witness: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub epsilon: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Default margin of the strict-feasibility probe.
pub const PROBE_EPS: f64 = 1e-3;

fn is_bounded(set: &SetDescriptor, dim: usize) -> Option<f64> {
    let c = set.flatten(dim).ok()?;
    c.lo.iter().chain(&c.hi).all(|v| v.is_finite()).then(|| c.lo.iter().chain(&c.hi).fold(0.0f64, |r, v| r.max(v.abs())))
}

/// Diagnostics for the structured existence assumptions of an LC problem,
/// plus the qualification checks of its Bolza form.
pub fn check_assumptions_lc(lc: &LcProblem, eps: f64, cfg: &SolveConfig) -> AssumptionReport {
    let (n, m) = (lc.n(), lc.m());
    let mut checks = Vec::new();

    // bounded feasible controls
    let mut status = CheckStatus::Pass;
    let mut notes = Vec::new();
    for i in 0..lc.end() - lc.start() {
        let t = lc.start() + i;
        let parts = lc.parts();
        if let Some(r) = is_bounded(&parts.control_sets[i], m) {
            notes.push(format!("t={t}: U bounded (radius {r})"));
            continue;
        }
        let has_mixed = parts.mixed[i].flatten(n + m).map(|c| !c.is_all()).unwrap_or(true);
        if has_mixed {
            match mixed_controls_bounded(lc, t) {
                Some(true) => notes.push(format!("t={t}: feasible controls bounded at every probe state")),
                Some(false) => {
                    status = CheckStatus::Fail;
                    notes.push(format!("t={t}: feasible control set unbounded at a probe state"));
                }
                None => {
                    if status == CheckStatus::Pass {
                        status = CheckStatus::Inconclusive;
                    }
                    notes.push(format!("t={t}: no probe state admits a feasible control"));
                }
            }
        } else if curvature_in_u(lc, i) > R_MIN_EIG {
            notes.push(format!("t={t}: vacuous, no mixed constraints and the cost is coercive in u"));
        } else {
            if status == CheckStatus::Pass {
                status = CheckStatus::Inconclusive;
            }
            notes.push(format!("t={t}: U unbounded and no coercivity in u"));
        }
    }
    checks.push(AssumptionCheck::new("bounded_controls", status, notes.join("; ")));

    // coercivity of the reduced Lagrangian
    let bnorm = lc.b().norm().max(f64::MIN_POSITIVE);
    let c1 = spectrum(&{
        let d = lc.a() - DMatrix::identity(n, n);
        d.transpose() * d
    })
    .values
    .last()
    .copied()
    .unwrap_or(0.0)
    .sqrt();
    let wmax = lc.parts().noise.iter().flatten().map(|s| DVector::from_column_slice(&s.value).norm()).fold(0.0, f64::max);
    let mut check = AssumptionCheck::new("control_coercivity", CheckStatus::Pass, "");
    let mut lam_min = f64::INFINITY;
    let mut notes = Vec::new();
    for i in 0..lc.end() - lc.start() {
        let t = lc.start() + i;
        if is_bounded(&lc.parts().control_sets[i], m).is_some() {
            notes.push(format!("t={t}: U bounded"));
            continue;
        }
        let ruu = u_block(lc, i);
        let sp = spectrum(&ruu);
        let lam = sp.values.first().copied().unwrap_or(f64::INFINITY);
        lam_min = lam_min.min(lam);
        if lam <= R_MIN_EIG {
            check.status = CheckStatus::Fail;
            check.witness.get_or_insert_with(|| sp.vectors.column(0).iter().copied().collect());
            notes.push(format!("t={t}: u-curvature has eigenvalue {lam:e}; the cost is not coercive along the witness direction"));
        } else {
            notes.push(format!("t={t}: u-curvature λ_min = {lam}"));
        }
    }
    if check.status == CheckStatus::Pass && lam_min.is_finite() {
        notes.push(format!("θ(s) = λ_min·s²/‖B‖² with λ_min = {lam_min}, ‖B‖ = {bnorm} (sufficient condition, heuristic)"));
        check.constants.insert("lambda_min".into(), lam_min);
        check.constants.insert("c1".into(), c1);
        check.constants.insert("c2".into(), wmax);
        check.constants.insert("b_norm".into(), bnorm);
    }
    check.evidence = notes.join("; ");
    checks.push(check);

    match lc_to_bolza(lc) {
        Ok((p, _)) => checks.extend(bolza_checks(&p, eps, cfg)),
        Err(e) => {
            for name in ["feasible_start", "bounded_recourse", "strict_feasibility"] {
                checks.push(AssumptionCheck::new(name, CheckStatus::Fail, format!("reduction failed: {e}")));
            }
            checks.push(h3());
        }
    }
    AssumptionReport { epsilon: eps, checks }
}

/// Qualification checks on a Bolza problem; the structured checks need the
/// LC form and are reported inconclusive.
pub fn check_assumptions_bolza(p: &BolzaProblem, eps: f64, cfg: &SolveConfig) -> AssumptionReport {
    let mut checks = vec![
        AssumptionCheck::new("bounded_controls", CheckStatus::Inconclusive, "needs the linear-convex form"),
        AssumptionCheck::new("control_coercivity", CheckStatus::Inconclusive, "needs the linear-convex form"),
    ];
    checks.extend(bolza_checks(p, eps, cfg));
    AssumptionReport { epsilon: eps, checks }
}

fn h3() -> AssumptionCheck {
    AssumptionCheck::new("measurability", CheckStatus::Pass, "finite Ω: every map on a finite tree is measurable for its partition")
}

fn u_block(lc: &LcProblem, i: usize) -> DMatrix<f64> {
    let (n, m) = (lc.n(), lc.m());
    lc.parts().stage_costs[i].quad().view((n, n), (m, m)).into_owned()
}

fn curvature_in_u(lc: &LcProblem, i: usize) -> f64 {
    min_eigenvalue(&u_block(lc, i))
}

/// Boundedness of `{u ∈ U : (x, u) ∈ D_t}` at probe states (the origin and
/// ξ): `Some(true)` if bounded at every probe admitting a control.
fn mixed_controls_bounded(lc: &LcProblem, t: usize) -> Option<bool> {
    let (n, m) = (lc.n(), lc.m());
    let f = lc.stage_function(t).ok()?;
    let ind = StructuredConvex::from_parts(DMatrix::zeros(n + m, n + m), DVector::zeros(n + m), 0.0, f.constraints().clone());
    let idx: Vec<usize> = (0..n).collect();
    let mut any = false;
    for x in [vec![0.0; n], lc.xi().to_vec()] {
        let Ok(Some(section)) = LiftedConvex::from(ind.clone()).section(&idx, &x) else { continue };
        any = true;
        for j in 0..m {
            for s in [1.0, -1.0] {
                let mut c = vec![0.0; m];
                c[j] = s;
                match section.base().add_affine(&c, 0.0).minimize_all(false) {
                    Ok(r) if r.unbounded => return Some(false),
                    Ok(_) => {}
                    Err(_) => return None,
                }
            }
        }
    }
    any.then_some(true)
}

fn bolza_checks(p: &BolzaProblem, eps: f64, cfg: &SolveConfig) -> Vec<AssumptionCheck> {
    let n = p.n();
    let tree = p.tree();
    let rep = bolza::solve_primal(p, cfg);
    let traj = match (rep.status, &rep.trajectory) {
        (SolveStatus::Optimal, Some(x)) => x.clone(),
        (SolveStatus::Infeasible, _) => {
            return vec![
                AssumptionCheck::new("feasible_start", CheckStatus::Fail, "no adapted trajectory with finite cost and the given mean"),
                AssumptionCheck::new("bounded_recourse", CheckStatus::Inconclusive, "no feasible trajectory to probe around"),
                AssumptionCheck::new("strict_feasibility", CheckStatus::Fail, "the problem is infeasible"),
                h3(),
            ];
        }
        (status, _) => {
            let msg = format!("primal solve ended with status {status:?}");
            return vec![
                AssumptionCheck::new("feasible_start", CheckStatus::Inconclusive, msg.clone()),
                AssumptionCheck::new("bounded_recourse", CheckStatus::Inconclusive, msg.clone()),
                AssumptionCheck::new("strict_feasibility", CheckStatus::Inconclusive, msg),
                h3(),
            ];
        }
    };
    let a5 = AssumptionCheck::new(
        "feasible_start",
        CheckStatus::Pass,
        format!("optimal trajectory has finite cost {} and mean ξ", rep.optimal_value),
    );

    // strict feasibility: all ±ε coordinate probes around the trajectory stay finite
    let mut h2 = AssumptionCheck::new("strict_feasibility", CheckStatus::Pass, format!("every ±{eps} coordinate probe around the optimal trajectory is finite"));
    let mut h1 = AssumptionCheck::new("bounded_recourse", CheckStatus::Pass, "every probe state admits a finite transition continuing into the next stage's domain");
    let idx: Vec<usize> = (0..n).collect();
    'outer: for t in p.start() + 1..=p.end() {
        for cell in tree.partition(t) {
            let a = cell[0];
            let l = p.lagrangian(t, a);
            let x0 = traj.get(t - 1, a).to_vec();
            let v0: Vec<f64> = traj.get(t, a).iter().zip(&x0).map(|(b, c)| b - c).collect();
            for k in 0..2 * n {
                for s in [eps, -eps] {
                    let mut z = x0.clone();
                    z.extend(&v0);
                    z[k] += s;
                    let finite = l.value(&z).map(|v| v.is_finite()).unwrap_or(false);
                    if !finite && h2.status == CheckStatus::Pass {
                        h2.status = CheckStatus::Inconclusive;
                        h2.evidence = format!("probe at t={t}, atom {a} leaves the domain; another trajectory may still be strictly feasible");
                        h2.witness = Some(z.clone());
                    }
                    // bounded recourse: probe states x0 ± ε e_k
                    if k < n && h1.status == CheckStatus::Pass {
                        let xs = z[..n].to_vec();
                        match recourse(p, t, a, &idx, &xs) {
                            Some(true) | None => {}
                            Some(false) => {
                                h1.status = CheckStatus::Inconclusive;
                                h1.evidence = format!("the least-norm transition from a probe state at t={t}, atom {a} does not continue");
                                h1.witness = Some(xs);
                            }
                        }
                    }
                }
            }
            if h1.status != CheckStatus::Pass && h2.status != CheckStatus::Pass {
                break 'outer;
            }
        }
    }
    vec![a5, h1, h2, h3()]
}

/// `None` when `x` is outside the stage domain; otherwise whether the
/// least-norm transition from `x` lands in the next stage's state domain.
fn recourse(p: &BolzaProblem, t: usize, atom: usize, idx: &[usize], x: &[f64]) -> Option<bool> {
    let section = p.lagrangian(t, atom).section(idx, x).ok()??;
    let proj = section.base().minimize_all(true).ok()?;
    let Some(z) = proj.minimizer else { return Some(false) };
    if t == p.end() {
        return Some(true);
    }
    let next: Vec<f64> = x.iter().zip(&z[..x.len()]).map(|(a, b)| a + b).collect();
    // the next stage's cell structure refines the current one, any atom of the cell works
    Some(matches!(p.lagrangian(t + 1, atom).section(idx, &next), Ok(Some(_))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::check_trajectory;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_lc(a: f64, w: f64, u_set: SetDescriptor) -> LcProblem {
        let cost = StructuredConvex::quadratic(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).unwrap();
        LcProblem::new(LcParts {
            n: 1,
            m: 1,
            a: m1(a),
            b: m1(1.0),
            start: 0,
            end: 1,
            stage_costs: vec![cost],
            mixed: vec![SetDescriptor::All],
            control_sets: vec![u_set],
            state_sets: vec![SetDescriptor::cube(1, -10.0, 10.0), SetDescriptor::All],
            terminal: StructuredConvex::zero(1),
            // ±w keeps the noise centered; atom 0 carries +w
            noise: vec![if w == 0.0 { vec![NoiseSample::new(vec![0.0], 1.0)] } else { vec![NoiseSample::new(vec![w], 0.5), NoiseSample::new(vec![-w], 0.5)] }],
            gamma: None,
            xi: vec![1.0],
        })
        .unwrap_or_else(|e| panic!("{e}"))
    }

    pub(crate) fn one_step(noise: Vec<NoiseSample>, xi: f64) -> LqProblem {
        LqProblem::new(LqParts {
            a: m1(1.0),
            b: m1(1.0),
            p: m1(0.0),
            r: m1(1.0),
            q: m1(1.0),
            start: 0,
            end: 1,
            x0_lower: vec![-10.0],
            x0_upper: vec![10.0],
            noise: vec![noise],
            gamma: None,
            xi: vec![xi],
        })
        .unwrap()
    }

    #[test]
    fn reduction_examples() {
        let lc = scalar_lc(1.0, 0.0, SetDescriptor::All);
        let (p, _) = lc_to_bolza(&lc).unwrap();
        for (x, v) in [(0.0, 2.0), (3.0, -1.5)] {
            let val = p.lagrangian(1, 0).value(&[x, v]).unwrap().to_f64();
            assert!((val - v * v).abs() < 1e-8, "{val}");
        }
        let lc = scalar_lc(1.0, 0.0, SetDescriptor::cube(1, -1.0, 1.0));
        let (p, _) = lc_to_bolza(&lc).unwrap();
        assert_eq!(p.lagrangian(1, 0).value(&[0.0, 2.0]).unwrap(), ExtReal::PosInf);

        let lc = scalar_lc(2.0, 1.0, SetDescriptor::All);
        let (p, h) = lc_to_bolza(&lc).unwrap();
        assert!((p.lagrangian(1, 0).value(&[1.0, 3.0]).unwrap().to_f64() - 1.0).abs() < 1e-8);
        let mut x = Process::zeros(1, 0, 1, 2);
        x.at_mut(0)[0] = vec![1.0];
        x.at_mut(0)[1] = vec![1.0];
        x.at_mut(1)[0] = vec![4.0];
        x.at_mut(1)[1] = vec![2.0];
        let u = recover_control(&h, &x).unwrap();
        assert!((u.u.get(0, 0)[0] - 1.0).abs() < 1e-7 && (u.u.get(0, 1)[0] - 1.0).abs() < 1e-7);
        assert!(u.adapted);
    }

    #[test]
    fn recovered_control_on_box_face() {
        let lc = scalar_lc(1.0, 0.0, SetDescriptor::cube(1, -0.5, 0.5));
        let (p, h) = lc_to_bolza(&lc).unwrap();
        let mut x = Process::zeros(1, 0, 1, 1);
        x.at_mut(0)[0] = vec![1.0];
        x.at_mut(1)[0] = vec![0.5];
        let u = recover_control(&h, &x).unwrap();
        assert!((u.u.get(0, 0)[0] + 0.5).abs() < 1e-7);
        let direct = lc_objective(&lc, &x, &u.u).to_f64();
        let bolza = p.primal_objective(&x, crate::exec::Exec::Sequential).unwrap().to_f64();
        assert!((direct - 0.25).abs() < 1e-7 && (bolza - direct).abs() < 1e-7);
    }

    #[test]
    fn hamiltonian_examples() {
        let lq = one_step(vec![NoiseSample::new(vec![0.0], 1.0)], 2.0);
        let mut lq_p = lq.clone();
        lq_p.lc.lq.as_mut().unwrap().p = m1(1.0);
        assert!((hamiltonian_lq(&lq_p, 1, 0, &[1.0], &[2.0]).unwrap().to_f64() - 0.0).abs() < 1e-12);
        assert_eq!(hamiltonian_lq(&lq, 1, 0, &[3.0], &[0.0]).unwrap(), ExtReal::Finite(0.0));
        assert_eq!(hamiltonian_lq(&lq, 1, 0, &[11.0], &[0.0]).unwrap(), ExtReal::NegInf);
        let lc = scalar_lc(1.0, 0.0, SetDescriptor::cube(1, -1.0, 1.0));
        assert!((hamiltonian_lc(&lc, 1, 0, &[0.0], &[4.0]).unwrap().to_f64() - 3.0).abs() < 1e-7);
        for (x, p) in [(0.5, 1.5), (-3.0, -0.7), (9.0, 2.0)] {
            let a = hamiltonian_lc(lq.lc(), 1, 0, &[x], &[p]).unwrap().to_f64();
            let b = hamiltonian_lq(&lq, 1, 0, &[x], &[p]).unwrap().to_f64();
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert_eq!(hamiltonian_lc(lq.lc(), 1, 0, &[11.0], &[1.0]).unwrap(), ExtReal::NegInf);
    }

    #[test]
    fn one_step_characteristics() {
        let lq = one_step(vec![NoiseSample::new(vec![0.0], 1.0)], 2.0);
        let ch = lq_solve_characteristics(&lq, &[2.0], &EtaMode::Free).unwrap();
        let tr = &ch.trajectory;
        assert!((tr.x.get(0, 0)[0] - 2.0).abs() < 1e-10 && (tr.x.get(1, 0)[0] - 1.0).abs() < 1e-10);
        assert!((tr.p.get(0, 0)[0] + 2.0).abs() < 1e-10 && (tr.p.get(1, 0)[0] + 2.0).abs() < 1e-10);
        assert!((ch.control.u.get(0, 0)[0] + 1.0).abs() < 1e-10);
        assert!((ch.value - 2.0).abs() < 1e-10 && !ch.degenerate);
        assert!(tr.transversality_residual < 1e-12);
        assert!((ch.eta[0] - 2.0).abs() < 1e-10);

        let (p, _) = lc_to_bolza(lq.lc()).unwrap();
        let v = check_trajectory(&p, &tr.x, &tr.p, 1e-6).unwrap();
        assert!(v.pass, "{v:?}");

        let given = lq_solve_characteristics(&lq, &[2.0], &EtaMode::Given(vec![2.0])).unwrap();
        assert!((given.value - 2.0).abs() < 1e-10);
        assert!(matches!(lq_solve_characteristics(&lq, &[2.0], &EtaMode::Given(vec![1.0])), Err(LcError::InconsistentEta { .. })));
        assert!(matches!(lq_solve_characteristics(&lq, &[10.0], &EtaMode::Free), Err(LcError::BoundaryXi)));
    }

    #[test]
    fn stochastic_one_step() {
        let noise = vec![NoiseSample::new(vec![1.0], 0.5), NoiseSample::new(vec![-1.0], 0.5)];
        let lq = one_step(noise, 2.0);
        let ch = lq_solve_characteristics(&lq, &[2.0], &EtaMode::Free).unwrap();
        for a in 0..2 {
            assert!((ch.control.u.get(0, a)[0] + 1.0).abs() < 1e-10);
        }
        let xt: Vec<f64> = (0..2).map(|a| ch.trajectory.x.get(1, a)[0]).collect();
        assert!((xt[0] - 2.0).abs() < 1e-10 && xt[1].abs() < 1e-10);
        assert!((ch.value - 2.0).abs() < 1e-10);
        let zero = lq_solve_characteristics(&lq, &[0.0], &EtaMode::Free).unwrap();
        assert!(zero.value.abs() < 1e-12 && zero.control.u.get(0, 0)[0].abs() < 1e-12);
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let mut lq = one_step(vec![NoiseSample::new(vec![0.0], 1.0)], 2.0);
        lq.lc.lq.as_mut().unwrap().q = m1(0.0);
        let ch = lq_solve_characteristics(&lq, &[2.0], &EtaMode::Free).unwrap();
        assert!(ch.value.abs() < 1e-12);
    }

    #[test]
    fn assumption_examples() {
        let cfg = SolveConfig::default();
        let lq = one_step(vec![NoiseSample::new(vec![0.0], 1.0)], 2.0);
        let rep = check_assumptions_lc(lq.lc(), PROBE_EPS, &cfg);
        for name in ["bounded_controls", "feasible_start", "control_coercivity", "bounded_recourse", "strict_feasibility", "measurability"] {
            assert_eq!(rep.get(name).unwrap().status, CheckStatus::Pass, "{name}: {:?}", rep.get(name));
        }

        let mut parts = lq.lc().parts().clone();
        parts.stage_costs = vec![StructuredConvex::zero(2)];
        parts.terminal = StructuredConvex::quadratic(m1(1.0)).unwrap();
        let singular = LcProblem::new(parts.clone()).unwrap();
        let rep = check_assumptions_lc(&singular, PROBE_EPS, &cfg);
        let a6 = rep.get("control_coercivity").unwrap();
        assert_eq!(a6.status, CheckStatus::Fail);
        assert!(a6.witness.is_some());

        parts.stage_costs = vec![StructuredConvex::zero(2).add_affine(&[0.0, 1.0], 0.0)];
        let linear = LcProblem::new(parts).unwrap();
        let rep = check_assumptions_lc(&linear, PROBE_EPS, &cfg);
        assert_eq!(rep.get("bounded_controls").unwrap().status, CheckStatus::Inconclusive);
        assert_eq!(rep.get("control_coercivity").unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"n":1,"m":1,"A":[[1]],"B":[[1]],"horizon":[0,1],"P":[[0]],"R":[[1]],"Q":[[1]],
            "X":[{"kind":"box","lower":[-10],"upper":[10]},{"kind":"all"}],
            "noise":[{"t":0,"samples":[{"w":[1],"prob":0.5},{"w":[-1],"prob":0.5}]}],"xi":[2]}"#;
        let lq: LqProblem = serde_json::from_str(text).unwrap();
        assert_eq!(lq.lc().tree().atoms(), 2);
        let back: LqProblem = serde_json::from_str(&serde_json::to_string(&lq).unwrap()).unwrap();
        assert_eq!(back, lq);
        let bad = text.replace("\"w\":[1],\"prob\":0.5", "\"w\":[2],\"prob\":0.5");
        assert!(serde_json::from_str::<LqProblem>(&bad).is_err());
    }
}
