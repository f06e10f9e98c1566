//! Primal and dual stochastic Bolza problems on a scenario tree.
//!
//! The primal value function is
//!
//! ```text
//! V_s(ξ) = inf { 𝔼[Σ_{t=s+1}^T L_t(x_{t−1}, Δx_t)] + g(𝔼[x_T]) : x adapted, 𝔼[x_s] = ξ }
//! ```
//!
//! and the dual one is
//!
//! ```text
//! W_s(η) = inf { 𝔼[Σ_{t=s+1}^T M_t(𝔼ᵗ[p_t], 𝔼ᵗ[Δp_t])] + f(p_T) : p ∈ 𝒫_s, 𝔼[p_s] = −η }
//! ```
//!
//! with `M_t(p, q) = L_t*(q, p)` and `f(b) = g*(−b)`. Here `p_{t−1}` is
//! measurable at time `t`, `𝔼^s[p_s]` and `p_T` are constant.
//!
//! Both problems are solved by writing them as one convex QP over the
//! cell values of the process (adaptedness is then exact by construction)
//! plus the hidden variables of every lifted stage function, and handing
//! that to the Douglas–Rachford engine in [`crate::qp`].

use crate::convexcalc::{ConvexError, LiftedConvex};
use crate::exec::{self, Exec};
use crate::extreal::ExtReal;
use crate::probspace::{check_adapted, Process, Schedule, ScenarioTree, TreeError};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BolzaError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("value is +inf at ξ = {0:?}")]
    InfiniteValue(Vec<f64>),
}

/// Solver tolerances and limits, echoed into every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    /// Fenchel–Young / certificate tolerance.
    pub tol_certification: f64,
    /// Gap below which a duality report is labeled strong.
    pub gap_strong: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol_stationarity: 1e-8,
            tol_feasibility: 1e-10,
            tol_certification: 1e-6,
            gap_strong: 1e-5,
            max_iter: 200_000,
            exec: Exec::default(),
        }
    }
}

impl SolveConfig {
    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol_stationarity: self.tol_stationarity,
            tol_feasibility: self.tol_feasibility,
            max_iter: self.max_iter,
            ..QpSettings::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub optimal_value: ExtReal,
    pub trajectory: Option<Process>,
    pub iterations: usize,
    pub stationarity_residual: f64,
    pub feasibility_residual: f64,
    pub polished: bool,
}

/// Stage functions at one time, assigned to atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub t: usize,
    pub cells: Vec<StageCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCell {
    pub atoms: Vec<usize>,
    #[serde(rename = "L", alias = "M")]
    pub f: LiftedConvex,
}

impl Stage {
    /// The same function on every atom.
    pub fn uniform(t: usize, atoms: usize, f: LiftedConvex) -> Self {
        Stage { t, cells: vec![StageCell { atoms: (0..atoms).collect(), f }] }
    }

    fn func_of(&self, atom: usize) -> Option<&LiftedConvex> {
        self.cells.iter().find(|c| c.atoms.contains(&atom)).map(|c| &c.f)
    }
}

/// Checks that `stages` covers `t = first+1 ..= end`, every atom gets a
/// function of input dimension `2n`, and the assignment is measurable.
fn validate_stages(tree: &ScenarioTree, n: usize, stages: &[Stage], what: &str) -> Result<(), BolzaError> {
    let first = tree.start();
    if stages.len() != tree.end() - first {
        return Err(BolzaError::Invalid(format!("{what}: expected {} stages, got {}", tree.end() - first, stages.len())));
    }
    for (k, st) in stages.iter().enumerate() {
        let t = first + 1 + k;
        if st.t != t {
            return Err(BolzaError::Invalid(format!("{what}: stage {k} has t = {}, expected {t}", st.t)));
        }
        let mut owner = vec![usize::MAX; tree.atoms()];
        for (ci, cell) in st.cells.iter().enumerate() {
            if cell.f.dim() != 2 * n {
                return Err(BolzaError::Invalid(format!("{what}: stage {t} function has input dimension {}, expected {}", cell.f.dim(), 2 * n)));
            }
            for &a in &cell.atoms {
                if a >= tree.atoms() || owner[a] != usize::MAX {
                    return Err(BolzaError::Invalid(format!("{what}: stage {t} cells do not partition the atoms")));
                }
                owner[a] = ci;
            }
        }
        if owner.contains(&usize::MAX) {
            return Err(BolzaError::Invalid(format!("{what}: stage {t} leaves some atom without a function")));
        }
        for cell in tree.partition(t) {
            if cell.iter().any(|&a| owner[a] != owner[cell[0]]) {
                return Err(BolzaError::Invalid(format!(
                    "{what}: stage {t} function is not constant on the cells of the time-{t} partition"
                )));
            }
        }
    }
    Ok(())
}

/// A primal stochastic Bolza problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BolzaRepr", into = "BolzaRepr")]
pub struct BolzaProblem {
    tree: ScenarioTree,
    n: usize,
    stages: Vec<Stage>,
    terminal: LiftedConvex,
    xi: Vec<f64>,
    start: usize,
}

#[derive(Serialize, Deserialize)]
struct BolzaRepr {
    tree: ScenarioTree,
    n: usize,
    window: [usize; 2],
    stages: Vec<Stage>,
    terminal: LiftedConvex,
    xi: Vec<f64>,
    start: usize,
}

impl TryFrom<BolzaRepr> for BolzaProblem {
    type Error = BolzaError;
    fn try_from(r: BolzaRepr) -> Result<Self, BolzaError> {
        if r.window != [r.tree.start(), r.tree.end()] {
            return Err(BolzaError::Invalid(format!(
                "window {:?} does not match the tree times [{}, {}]",
                r.window,
                r.tree.start(),
                r.tree.end()
            )));
        }
        BolzaProblem::new(r.tree, r.n, r.stages, r.terminal, r.xi, r.start)
    }
}

impl From<BolzaProblem> for BolzaRepr {
    fn from(p: BolzaProblem) -> Self {
        BolzaRepr { window: [p.tree.start(), p.tree.end()], tree: p.tree, n: p.n, stages: p.stages, terminal: p.terminal, xi: p.xi, start: p.start }
    }
}

impl BolzaProblem {
    pub fn new(
        tree: ScenarioTree,
        n: usize,
        stages: Vec<Stage>,
        terminal: LiftedConvex,
        xi: Vec<f64>,
        start: usize,
    ) -> Result<Self, BolzaError> {
        validate_stages(&tree, n, &stages, "primal")?;
        if terminal.dim() != n || xi.len() != n {
            return Err(BolzaError::Invalid(format!("terminal cost and ξ must have dimension {n}")));
        }
        if start < tree.start() || start > tree.end() {
            return Err(BolzaError::Invalid(format!("start {start} outside [{}, {}]", tree.start(), tree.end())));
        }
        Ok(BolzaProblem { tree, n, stages, terminal, xi, start })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.tree.end()
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn terminal(&self) -> &LiftedConvex {
        &self.terminal
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// `L_t` at `atom`.
    pub fn lagrangian(&self, t: usize, atom: usize) -> &LiftedConvex {
        self.stages[t - self.tree.start() - 1].func_of(atom).expect("validated stage")
    }

    pub fn with_xi(&self, xi: &[f64]) -> Self {
        BolzaProblem { xi: xi.to_vec(), ..self.clone() }
    }

    pub fn with_start(&self, start: usize) -> Result<Self, BolzaError> {
        if start < self.tree.start() || start > self.tree.end() {
            return Err(BolzaError::Invalid(format!("start {start} outside the window")));
        }
        Ok(BolzaProblem { start, ..self.clone() })
    }

    /// Primal cost of `x` (window `[start, T]`); the mean constraint is not
    /// checked here, see [`BolzaProblem::primal_infeasibility`].
    pub fn primal_objective(&self, x: &Process, exec: Exec) -> Result<ExtReal, BolzaError> {
        self.check_window(x)?;
        let tree = &self.tree;
        let terms = exec::map_indexed(exec, self.end() - self.start, |k| -> Result<ExtReal, BolzaError> {
            let t = self.start + 1 + k;
            let mut total = ExtReal::Finite(0.0);
            for cell in tree.partition(t) {
                let a = cell[0];
                let mut z = x.get(t - 1, a).to_vec();
                z.extend(x.get(t, a).iter().zip(x.get(t - 1, a)).map(|(u, v)| u - v));
                let w: f64 = cell.iter().map(|&b| tree.prob(b)).sum();
                total = total.add(self.lagrangian(t, a).value(&z)?.scale(w));
            }
            Ok(total)
        });
        let mut total = ExtReal::Finite(0.0);
        for term in terms {
            total = total.add(term?);
        }
        Ok(total.add(self.terminal.value(&x.mean(tree, self.end()))?))
    }

    /// Adaptedness deviation plus ∞-distance of `𝔼[x_s]` from ξ.
    pub fn primal_infeasibility(&self, x: &Process) -> f64 {
        let adapted = check_adapted(&self.tree, x, Schedule::Primal).deviation;
        let mean = x.mean(&self.tree, self.start);
        adapted.max(mean.iter().zip(&self.xi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    fn check_window(&self, x: &Process) -> Result<(), BolzaError> {
        if x.dim != self.n || x.first != self.start || x.last != self.end() || x.atoms() != self.tree.atoms() {
            return Err(BolzaError::Invalid("process does not match the problem window".into()));
        }
        Ok(())
    }
}

/// The dual problem: `M_t(p, q) = L_t*(q, p)` and `f(b) = g*(−b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DualRepr", into = "DualRepr")]
pub struct DualBolzaProblem {
    tree: ScenarioTree,
    n: usize,
    stages: Vec<Stage>,
    terminal: LiftedConvex,
    eta: Vec<f64>,
    start: usize,
}

#[derive(Serialize, Deserialize)]
struct DualRepr {
    tree: ScenarioTree,
    n: usize,
    window: [usize; 2],
    stages: Vec<Stage>,
    terminal: LiftedConvex,
    eta: Vec<f64>,
    start: usize,
}

impl TryFrom<DualRepr> for DualBolzaProblem {
    type Error = BolzaError;
    fn try_from(r: DualRepr) -> Result<Self, BolzaError> {
        if r.window != [r.tree.start(), r.tree.end()] {
            return Err(BolzaError::Invalid("window does not match the tree".into()));
        }
        validate_stages(&r.tree, r.n, &r.stages, "dual")?;
        if r.terminal.dim() != r.n || r.eta.len() != r.n {
            return Err(BolzaError::Invalid("dual terminal cost and η must have dimension n".into()));
        }
        Ok(DualBolzaProblem { tree: r.tree, n: r.n, stages: r.stages, terminal: r.terminal, eta: r.eta, start: r.start })
    }
}

impl From<DualBolzaProblem> for DualRepr {
    fn from(d: DualBolzaProblem) -> Self {
        DualRepr { window: [d.tree.start(), d.tree.end()], tree: d.tree, n: d.n, stages: d.stages, terminal: d.terminal, eta: d.eta, start: d.start }
    }
}

impl DualBolzaProblem {
    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.tree.end()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn terminal(&self) -> &LiftedConvex {
        &self.terminal
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// `M_t` at `atom`, as a function of `(p, q)`.
    pub fn lagrangian(&self, t: usize, atom: usize) -> &LiftedConvex {
        self.stages[t - self.tree.start() - 1].func_of(atom).expect("validated stage")
    }

    pub fn with_eta(&self, eta: &[f64]) -> Self {
        DualBolzaProblem { eta: eta.to_vec(), ..self.clone() }
    }

    pub fn with_start(&self, start: usize) -> Result<Self, BolzaError> {
        if start < self.tree.start() || start > self.tree.end() {
            return Err(BolzaError::Invalid(format!("start {start} outside the window")));
        }
        Ok(DualBolzaProblem { start, ..self.clone() })
    }

    /// Dual cost of `p` (window `[start, T]`).
    pub fn dual_objective(&self, p: &Process, exec: Exec) -> Result<ExtReal, BolzaError> {
        if p.dim != self.n || p.first != self.start || p.last != self.end() || p.atoms() != self.tree.atoms() {
            return Err(BolzaError::Invalid("process does not match the problem window".into()));
        }
        let tree = &self.tree;
        let terms = exec::map_indexed(exec, self.end() - self.start, |k| -> Result<ExtReal, BolzaError> {
            let t = self.start + 1 + k;
            let ep = tree.cond_expect(p.at(t), t)?;
            let epm = tree.cond_expect(p.at(t - 1), t)?;
            let mut total = ExtReal::Finite(0.0);
            for cell in tree.partition(t) {
                let a = cell[0];
                let mut z = ep[a].clone();
                z.extend(ep[a].iter().zip(&epm[a]).map(|(u, v)| u - v));
                let w: f64 = cell.iter().map(|&b| tree.prob(b)).sum();
                total = total.add(self.lagrangian(t, a).value(&z)?.scale(w));
            }
            Ok(total)
        });
        let mut total = ExtReal::Finite(0.0);
        for term in terms {
            total = total.add(term?);
        }
        Ok(total.add(self.terminal.value(p.get(self.end(), 0))?))
    }

    /// Dual-schedule deviation plus ∞-distance of `𝔼^s[p_s]` from −η.
    pub fn dual_infeasibility(&self, p: &Process) -> f64 {
        let adapted = check_adapted(&self.tree, p, Schedule::Dual).deviation;
        let ce = self.tree.cond_expect(p.at(self.start), self.start).expect("window inside tree");
        let off = ce
            .iter()
            .flat_map(|v| v.iter().zip(&self.eta).map(|(a, e)| (a + e).abs()))
            .fold(0.0, f64::max);
        adapted.max(off)
    }
}

/// Conjugates every stage and the terminal cost.
pub fn dualize(p: &BolzaProblem) -> Result<DualBolzaProblem, BolzaError> {
    let n = p.n;
    // M(p, q) = L*(q, p): input i of L* (x-slot for i < n) reads q = (p, q)[n + i]
    let perm: Vec<usize> = (n..2 * n).chain(0..n).collect();
    let mut stages = Vec::with_capacity(p.stages.len());
    for st in &p.stages {
        let mut cells = Vec::with_capacity(st.cells.len());
        for cell in &st.cells {
            let m = cell.f.conjugate_fn()?.permute(&perm)?;
            cells.push(StageCell { atoms: cell.atoms.clone(), f: m });
        }
        stages.push(Stage { t: st.t, cells });
    }
    let neg = -DMatrix::<f64>::identity(n, n);
    let f = p.terminal.conjugate_fn()?.precompose(&neg, &DVector::zeros(n))?;
    let eta = vec![0.0; n];
    Ok(DualBolzaProblem { tree: p.tree.clone(), n, stages, terminal: f, eta, start: p.start })
}

/// Affine expression `Σ coeff · var + offset`.
#[derive(Debug, Clone, Default)]
struct Expr {
    terms: Vec<(usize, f64)>,
    offset: f64,
}

impl Expr {
    fn var(i: usize) -> Self {
        Expr { terms: vec![(i, 1.0)], offset: 0.0 }
    }

    fn add(mut self, other: &Expr, scale: f64) -> Self {
        for &(i, c) in &other.terms {
            self.terms.push((i, scale * c));
        }
        self.offset += scale * other.offset;
        self
    }
}

/// Incremental QP assembly over weighted lifted terms.
#[derive(Default)]
struct Builder {
    nvars: usize,
    p_entries: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    constant: f64,
    rows: Vec<(Vec<(usize, f64)>, f64, f64)>,
}

impl Builder {
    fn add_vars(&mut self, k: usize) -> usize {
        let s = self.nvars;
        self.nvars += k;
        self.q.resize(self.nvars, 0.0);
        s
    }

    fn add_row(&mut self, e: &Expr, lo: f64, hi: f64) {
        self.rows.push((e.terms.clone(), lo - e.offset, hi - e.offset));
    }

    fn add_linear(&mut self, e: &Expr, w: f64) {
        for &(i, c) in &e.terms {
            self.q[i] += w * c;
        }
        self.constant += w * e.offset;
    }

    /// Adds `w · F(inputs)` with fresh hidden variables; returns their offset.
    fn add_term(&mut self, w: f64, f: &LiftedConvex, inputs: &[Expr]) -> usize {
        let base = f.base();
        let d = base.dim();
        let h0 = self.add_vars(f.hidden());
        let mut map: Vec<Expr> = inputs.to_vec();
        for j in 0..f.hidden() {
            map.push(Expr::var(h0 + j));
        }
        let q = base.quad();
        let c = base.lin();
        let b = DVector::from_fn(d, |i, _| map[i].offset);
        let qb = q * &b;
        for i in 0..d {
            for j in 0..d {
                let qij = q[(i, j)];
                if qij == 0.0 {
                    continue;
                }
                for &(a, ca) in &map[i].terms {
                    for &(bb, cb) in &map[j].terms {
                        self.p_entries.push((a, bb, 2.0 * w * qij * ca * cb));
                    }
                }
            }
            let coef = 2.0 * qb[i] + c[i];
            for &(a, ca) in &map[i].terms {
                self.q[a] += w * ca * coef;
            }
        }
        self.constant += w * (b.dot(&qb) + c.dot(&b) + base.constant());
        let cons = base.constraints();
        for i in 0..d {
            if cons.lo[i].is_finite() || cons.hi[i].is_finite() {
                self.add_row(&map[i], cons.lo[i], cons.hi[i]);
            }
        }
        let combine = |row: nalgebra::DVectorView<f64>| -> Expr {
            let mut e = Expr::default();
            for i in 0..d {
                if row[i] != 0.0 {
                    e = e.add(&map[i], row[i]);
                }
            }
            e
        };
        for r in 0..cons.eq_a.nrows() {
            let e = combine(cons.eq_a.row(r).transpose().as_view());
            self.add_row(&e, cons.eq_b[r], cons.eq_b[r]);
        }
        for r in 0..cons.in_a.nrows() {
            let e = combine(cons.in_a.row(r).transpose().as_view());
            self.add_row(&e, f64::NEG_INFINITY, cons.in_b[r]);
        }
        h0
    }

    fn build(&self) -> QpProblem {
        let n = self.nvars;
        let mut p = DMatrix::zeros(n, n);
        for &(i, j, v) in &self.p_entries {
            p[(i, j)] += v;
        }
        let p = crate::linalg::symmetrize(&p);
        let m = self.rows.len();
        let mut a = DMatrix::zeros(m, n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (r, (terms, lo, hi)) in self.rows.iter().enumerate() {
            for &(i, c) in terms {
                a[(r, i)] += c;
            }
            l[r] = *lo;
            u[r] = *hi;
        }
        QpProblem { p, q: DVector::from_vec(self.q.clone()), a, l, u }
    }
}

struct Solved {
    status: SolveStatus,
    value: ExtReal,
    x: DVector<f64>,
    iterations: usize,
    stationarity: f64,
    feasibility: f64,
    polished: bool,
}

fn run(b: &Builder, cfg: &SolveConfig) -> Solved {
    let prob = b.build();
    let sol = qp::solve(&prob, &cfg.qp_settings());
    let (status, value) = match sol.status {
        QpStatus::Solved => (SolveStatus::Optimal, ExtReal::Finite(sol.objective + b.constant)),
        QpStatus::PrimalInfeasible => (SolveStatus::Infeasible, ExtReal::PosInf),
        QpStatus::DualInfeasible => (SolveStatus::Unbounded, ExtReal::NegInf),
        QpStatus::MaxIter => (SolveStatus::MaxIter, ExtReal::Finite(sol.objective + b.constant)),
    };
    Solved {
        status,
        value,
        x: sol.x,
        iterations: sol.iterations,
        stationarity: sol.stationarity,
        feasibility: sol.feasibility,
        polished: sol.polished,
    }
}

fn report(s: &Solved, traj: Option<Process>) -> SolveReport {
    let ok = matches!(s.status, SolveStatus::Optimal | SolveStatus::MaxIter);
    SolveReport {
        status: s.status,
        optimal_value: s.value,
        trajectory: if ok { traj } else { None },
        iterations: s.iterations,
        stationarity_residual: s.stationarity,
        feasibility_residual: s.feasibility,
        polished: s.polished,
    }
}

enum PrimalMode<'a> {
    Mean(&'a [f64]),
    Tilt(&'a [f64]),
}

/// `idx[t - s][cell]` is the first variable of `x_t` on that cell.
fn assemble_primal(p: &BolzaProblem, mode: PrimalMode) -> (Builder, Vec<Vec<usize>>) {
    let n = p.n;
    let tree = &p.tree;
    let (s, end) = (p.start, p.end());
    let mut b = Builder::default();
    let mut idx = Vec::new();
    for t in s..=end {
        let cells = tree.partition(t).len();
        let first = b.add_vars(cells * n);
        idx.push((0..cells).map(|c| first + c * n).collect::<Vec<_>>());
    }
    let xvar = |t: usize, a: usize, i: usize| idx[t - s][tree.cell_of(t, a)] + i;
    for t in s + 1..=end {
        for cell in tree.partition(t) {
            let a = cell[0];
            let w: f64 = cell.iter().map(|&c| tree.prob(c)).sum();
            let mut inputs: Vec<Expr> = (0..n).map(|i| Expr::var(xvar(t - 1, a, i))).collect();
            for i in 0..n {
                inputs.push(Expr::var(xvar(t, a, i)).add(&Expr::var(xvar(t - 1, a, i)), -1.0));
            }
            b.add_term(w, p.lagrangian(t, a), &inputs);
        }
    }
    // terminal cost on 𝔼[x_T]
    let mean_expr = |t: usize, i: usize| {
        let mut e = Expr::default();
        for (c, cell) in tree.partition(t).iter().enumerate() {
            let w: f64 = cell.iter().map(|&a| tree.prob(a)).sum();
            e.terms.push((idx[t - s][c] + i, w));
        }
        e
    };
    let term_inputs: Vec<Expr> = (0..n).map(|i| mean_expr(end, i)).collect();
    b.add_term(1.0, &p.terminal, &term_inputs);
    match mode {
        PrimalMode::Mean(xi) => {
            for i in 0..n {
                b.add_row(&mean_expr(s, i), xi[i], xi[i]);
            }
        }
        PrimalMode::Tilt(eta) => {
            for i in 0..n {
                b.add_linear(&mean_expr(s, i), -eta[i]);
            }
        }
    }
    (b, idx)
}

fn primal_process(p: &BolzaProblem, idx: &[Vec<usize>], x: &DVector<f64>) -> Process {
    let tree = &p.tree;
    let mut out = Process::zeros(p.n, p.start, p.end(), tree.atoms());
    for t in p.start..=p.end() {
        for a in 0..tree.atoms() {
            let v0 = idx[t - p.start][tree.cell_of(t, a)];
            out.at_mut(t)[a] = (0..p.n).map(|i| x[v0 + i]).collect();
        }
    }
    out
}

/// Computes `V_s(ξ)` and an optimal trajectory.
pub fn solve_primal(p: &BolzaProblem, cfg: &SolveConfig) -> SolveReport {
    let (b, idx) = assemble_primal(p, PrimalMode::Mean(&p.xi));
    let s = run(&b, cfg);
    let traj = primal_process(p, &idx, &s.x);
    report(&s, Some(traj))
}

/// `inf_y V_s(y) − y·η`, which equals `−W_s(η)` under strong duality.
pub fn tilted_primal(p: &BolzaProblem, eta: &[f64], cfg: &SolveConfig) -> SolveReport {
    let (b, idx) = assemble_primal(p, PrimalMode::Tilt(eta));
    let s = run(&b, cfg);
    let traj = primal_process(p, &idx, &s.x);
    report(&s, Some(traj))
}

enum DualMode<'a> {
    Fixed(&'a [f64]),
    /// Minimize `W_s(η) − ξ·η` over η as well.
    Free(&'a [f64]),
}

/// `idx[t - s][cell of partitions[t+1]]` for `t < T`; `idx[T - s][0]` for `p_T`.
fn assemble_dual(d: &DualBolzaProblem, mode: DualMode) -> (Builder, Vec<Vec<usize>>) {
    let n = d.n;
    let tree = &d.tree;
    let (s, end) = (d.start, d.end());
    let mut b = Builder::default();
    let mut idx = Vec::new();
    for t in s..end {
        let cells = tree.partition(t + 1).len();
        let first = b.add_vars(cells * n);
        idx.push((0..cells).map(|c| first + c * n).collect::<Vec<_>>());
    }
    let last = b.add_vars(n);
    idx.push(vec![last]);
    let pvar = |t: usize, a: usize, i: usize| {
        if t == end {
            idx[t - s][0] + i
        } else {
            idx[t - s][tree.cell_of(t + 1, a)] + i
        }
    };
    // 𝔼ᵗ[p_t] on the cell of partitions[t] containing atom a
    let cond = |t: usize, a: usize, i: usize| -> Expr {
        if t == end {
            return Expr::var(pvar(t, a, i));
        }
        let cell = &tree.partition(t)[tree.cell_of(t, a)];
        let mass: f64 = cell.iter().map(|&c| tree.prob(c)).sum();
        let mut e = Expr::default();
        for &c in cell {
            e.terms.push((pvar(t, c, i), tree.prob(c) / mass));
        }
        e
    };
    for t in s + 1..=end {
        for cell in tree.partition(t) {
            let a = cell[0];
            let w: f64 = cell.iter().map(|&c| tree.prob(c)).sum();
            let ep: Vec<Expr> = (0..n).map(|i| cond(t, a, i)).collect();
            let mut inputs = ep.clone();
            for i in 0..n {
                // p_{t−1} is already measurable at t
                inputs.push(ep[i].clone().add(&Expr::var(pvar(t - 1, a, i)), -1.0));
            }
            b.add_term(w, d.lagrangian(t, a), &inputs);
        }
    }
    let term_inputs: Vec<Expr> = (0..n).map(|i| Expr::var(idx[end - s][0] + i)).collect();
    b.add_term(1.0, &d.terminal, &term_inputs);
    let cells_s: Vec<usize> = tree.partition(s).iter().map(|c| c[0]).collect();
    match mode {
        DualMode::Fixed(eta) => {
            for &a in &cells_s {
                for i in 0..n {
                    b.add_row(&cond(s, a, i), -eta[i], -eta[i]);
                }
            }
        }
        DualMode::Free(xi) => {
            for &a in &cells_s[1..] {
                for i in 0..n {
                    let e = cond(s, a, i).add(&cond(s, cells_s[0], i), -1.0);
                    b.add_row(&e, 0.0, 0.0);
                }
            }
            // + ξ·𝔼[p_s]
            for &a in &cells_s {
                let mass: f64 = tree.partition(s)[tree.cell_of(s, a)].iter().map(|&c| tree.prob(c)).sum();
                for i in 0..n {
                    b.add_linear(&cond(s, a, i), mass * xi[i]);
                }
            }
        }
    }
    (b, idx)
}

fn dual_process(d: &DualBolzaProblem, idx: &[Vec<usize>], x: &DVector<f64>) -> Process {
    let tree = &d.tree;
    let mut out = Process::zeros(d.n, d.start, d.end(), tree.atoms());
    for t in d.start..=d.end() {
        for a in 0..tree.atoms() {
            let v0 = if t == d.end() { idx[t - d.start][0] } else { idx[t - d.start][tree.cell_of(t + 1, a)] };
            out.at_mut(t)[a] = (0..d.n).map(|i| x[v0 + i]).collect();
        }
    }
    out
}

/// Computes `W_s(η)` and an optimal dual trajectory.
pub fn solve_dual(d: &DualBolzaProblem, cfg: &SolveConfig) -> SolveReport {
    let (b, idx) = assemble_dual(d, DualMode::Fixed(&d.eta));
    let s = run(&b, cfg);
    let traj = dual_process(d, &idx, &s.x);
    report(&s, Some(traj))
}

/// Minimizes `W_s(η) − ξ·η` jointly over η and the dual process; the
/// optimal η is `−𝔼[p_s]` of the returned trajectory.
pub fn solve_dual_free(d: &DualBolzaProblem, xi: &[f64], cfg: &SolveConfig) -> SolveReport {
    let (b, idx) = assemble_dual(d, DualMode::Free(xi));
    let s = run(&b, cfg);
    let traj = dual_process(d, &idx, &s.x);
    report(&s, Some(traj))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgradientReport {
    pub value: ExtReal,
    /// Certified `η ∈ ∂V_s(ξ)`, if the certificate passed.
    pub eta: Option<Vec<f64>>,
    /// The candidate whether or not it was certified.
    pub candidate: Option<Vec<f64>>,
    pub dual_value: ExtReal,
    /// `|V_s(ξ) + W_s(η) − ξ·η|`.
    pub residual: f64,
    pub certified: bool,
    pub primal: SolveReport,
    pub dual: Option<SolveReport>,
}

/// `V_s(ξ)` and a subgradient `η = −𝔼[p_s]` from the dual solution, certified
/// by the Fenchel–Young gap.
pub fn value_and_subgradient(p: &BolzaProblem, xi: &[f64], cfg: &SolveConfig) -> Result<SubgradientReport, BolzaError> {
    let p = p.with_xi(xi);
    let primal = solve_primal(&p, cfg);
    let v = match primal.optimal_value {
        ExtReal::Finite(v) if primal.status == SolveStatus::Optimal || primal.status == SolveStatus::MaxIter => v,
        ExtReal::PosInf => return Err(BolzaError::InfiniteValue(xi.to_vec())),
        _ => {
            return Ok(SubgradientReport {
                value: primal.optimal_value,
                eta: None,
                candidate: None,
                dual_value: ExtReal::PosInf,
                residual: f64::INFINITY,
                certified: false,
                primal,
                dual: None,
            })
        }
    };
    let d = dualize(&p)?;
    let free = solve_dual_free(&d, xi, cfg);
    let Some(ptraj) = free.trajectory.as_ref().filter(|_| free.status == SolveStatus::Optimal) else {
        return Ok(SubgradientReport {
            value: ExtReal::Finite(v),
            eta: None,
            candidate: None,
            dual_value: ExtReal::PosInf,
            residual: f64::INFINITY,
            certified: false,
            primal,
            dual: Some(free),
        });
    };
    let eta: Vec<f64> = ptraj.mean(&d.tree, d.start).iter().map(|v| -v).collect();
    let fixed = solve_dual(&d.with_eta(&eta), cfg);
    let residual = match fixed.optimal_value {
        ExtReal::Finite(w) => (v + w - crate::linalg::dot(xi, &eta)).abs(),
        _ => f64::INFINITY,
    };
    let certified = residual <= cfg.tol_certification;
    Ok(SubgradientReport {
        value: ExtReal::Finite(v),
        eta: certified.then(|| eta.clone()),
        candidate: Some(eta),
        dual_value: fixed.optimal_value,
        residual,
        certified,
        primal,
        dual: Some(fixed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub primal_value: ExtReal,
    pub dual_value: ExtReal,
    /// `V + W − ξ·η` (+∞ when either side is +∞).
    pub gap: ExtReal,
    pub weak_duality_holds: bool,
    pub strong: bool,
    pub label: String,
    pub primal_status: SolveStatus,
    pub dual_status: SolveStatus,
    /// Slack of the pairwise inequality at a user-supplied feasible pair.
    pub pair_slack: Option<ExtReal>,
}

/// Weak-duality tolerance.
pub const WEAK_TOL: f64 = 1e-7;

/// Cost of `x` plus cost of `p` minus `ξ·η`, for a feasible pair.
pub fn pair_slack(p: &BolzaProblem, d: &DualBolzaProblem, x: &Process, pp: &Process, exec: Exec) -> Result<ExtReal, BolzaError> {
    let a = p.primal_objective(x, exec)?;
    let b = d.dual_objective(pp, exec)?;
    Ok(a.add(b).add(ExtReal::Finite(-crate::linalg::dot(p.xi(), d.eta()))))
}

pub fn duality_report(
    p: &BolzaProblem,
    xi: &[f64],
    eta: &[f64],
    cfg: &SolveConfig,
    pair: Option<(&Process, &Process)>,
) -> Result<DualityReport, BolzaError> {
    let p = p.with_xi(xi);
    let d = dualize(&p)?.with_eta(eta);
    let pr = solve_primal(&p, cfg);
    let dr = solve_dual(&d, cfg);
    let pairing = crate::linalg::dot(xi, eta);
    let gap = pr.optimal_value.add(dr.optimal_value).add(ExtReal::Finite(-pairing));
    let weak = gap.to_f64() >= -WEAK_TOL;
    let strong = matches!(gap, ExtReal::Finite(g) if g <= cfg.gap_strong);
    let pair_slack = match pair {
        Some((x, pp)) => Some(pair_slack(&p, &d, x, pp, cfg.exec)?),
        None => None,
    };
    Ok(DualityReport {
        xi: xi.to_vec(),
        eta: eta.to_vec(),
        primal_value: pr.optimal_value,
        dual_value: dr.optimal_value,
        gap,
        weak_duality_holds: weak,
        strong,
        label: if strong { "strong" } else { "weak only" }.to_string(),
        primal_status: pr.status,
        dual_status: dr.status,
        pair_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexcalc::{SetDescriptor, StructuredConvex};

    fn diag(q: &[f64]) -> LiftedConvex {
        LiftedConvex::from(StructuredConvex::quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(q))).unwrap())
    }

    /// 1 atom, L(x, v) = v², g(y) = y², one step.
    fn quad_problem(xi: f64) -> BolzaProblem {
        let tree = ScenarioTree::deterministic(0, 1);
        BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 1, diag(&[0.0, 1.0]))], diag(&[1.0]), vec![xi], 0).unwrap()
    }

    fn flat_problem() -> BolzaProblem {
        let tree = ScenarioTree::deterministic(0, 1);
        let zero = |d| LiftedConvex::from(StructuredConvex::zero(d));
        BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 1, zero(2))], zero(1), vec![0.0], 0).unwrap()
    }

    fn cfg() -> SolveConfig {
        SolveConfig::default()
    }

    #[test]
    fn quadratic_primal() {
        let r = solve_primal(&quad_problem(2.0), &cfg());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.optimal_value.to_f64() - 2.0).abs() < 1e-9);
        let x = r.trajectory.unwrap();
        assert!((x.get(1, 0)[0] - 1.0).abs() < 1e-9);
        assert!(r.stationarity_residual <= 1e-8 && r.feasibility_residual <= 1e-10);
    }

    #[test]
    fn zero_problem_and_infeasible_problem() {
        let r = solve_primal(&flat_problem(), &cfg());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.optimal_value, ExtReal::Finite(0.0));

        let tree = ScenarioTree::deterministic(0, 1);
        let stay = LiftedConvex::from(StructuredConvex::indicator(2, &SetDescriptor::boxed(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 0.0])).unwrap());
        let at_zero = LiftedConvex::from(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 0.0, 0.0)).unwrap());
        let p = BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 1, stay)], at_zero, vec![1.0], 0).unwrap();
        let r = solve_primal(&p, &cfg());
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert_eq!(r.optimal_value, ExtReal::PosInf);
    }

    #[test]
    fn dualize_examples() {
        let d = dualize(&quad_problem(2.0)).unwrap();
        let m = d.lagrangian(1, 0);
        assert!((m.value(&[2.0, 0.0]).unwrap().to_f64() - 1.0).abs() < 1e-9);
        assert_eq!(m.value(&[2.0, 0.3]).unwrap(), ExtReal::PosInf);
        assert!((d.terminal().value(&[-3.0]).unwrap().to_f64() - 2.25).abs() < 1e-9);

        let tree = ScenarioTree::deterministic(0, 1);
        let p = BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 1, diag(&[1.0, 1.0]))], diag(&[1.0]), vec![0.0], 0).unwrap();
        let d = dualize(&p).unwrap();
        let v = d.lagrangian(1, 0).value(&[2.0, 4.0]).unwrap().to_f64();
        assert!((v - (1.0 + 4.0)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_dual() {
        let d = dualize(&quad_problem(2.0)).unwrap().with_eta(&[2.0]);
        let r = solve_dual(&d, &cfg());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.optimal_value.to_f64() - 2.0).abs() < 1e-8);
        let p = r.trajectory.unwrap();
        assert!((p.get(0, 0)[0] + 2.0).abs() < 1e-8 && (p.get(1, 0)[0] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn zero_and_infeasible_duals() {
        // M ≡ 0 stages, f = δ{0}, η = 0
        let tree = ScenarioTree::deterministic(0, 1);
        let zero = LiftedConvex::from(StructuredConvex::zero(2));
        let origin = LiftedConvex::from(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 0.0, 0.0)).unwrap());
        let d = DualBolzaProblem { tree: tree.clone(), n: 1, stages: vec![Stage::uniform(1, 1, zero.clone())], terminal: origin, eta: vec![0.0], start: 0 };
        let r = solve_dual(&d, &cfg());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.optimal_value.to_f64().abs() < 1e-12);
        // f with domain [1, 2] but M forcing p constant and η = 0 ⇒ p_T = 0 excluded
        let boxed = LiftedConvex::from(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 1.0, 2.0)).unwrap());
        let still = LiftedConvex::from(StructuredConvex::indicator(2, &SetDescriptor::boxed(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 0.0])).unwrap());
        let d = DualBolzaProblem { tree, n: 1, stages: vec![Stage::uniform(1, 1, still)], terminal: boxed, eta: vec![0.0], start: 0 };
        let r = solve_dual(&d, &cfg());
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert_eq!(r.optimal_value, ExtReal::PosInf);
    }

    #[test]
    fn subgradient_examples() {
        let r = value_and_subgradient(&quad_problem(2.0), &[2.0], &cfg()).unwrap();
        assert!(r.certified, "{r:?}");
        assert!((r.eta.unwrap()[0] - 2.0).abs() < 1e-7);
        assert!(r.residual <= 1e-6);
        let r = value_and_subgradient(&flat_problem(), &[0.7], &cfg()).unwrap();
        assert!(r.certified);
        assert!(r.eta.unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn infeasible_xi_is_an_error() {
        let tree = ScenarioTree::deterministic(0, 1);
        let stay = LiftedConvex::from(StructuredConvex::indicator(2, &SetDescriptor::boxed(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 0.0])).unwrap());
        let at_zero = LiftedConvex::from(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 0.0, 0.0)).unwrap());
        let p = BolzaProblem::new(tree, 1, vec![Stage::uniform(1, 1, stay)], at_zero, vec![1.0], 0).unwrap();
        assert!(matches!(value_and_subgradient(&p, &[1.0], &cfg()), Err(BolzaError::InfiniteValue(_))));
    }

    #[test]
    fn tilted_examples() {
        let r = tilted_primal(&quad_problem(0.0), &[2.0], &cfg());
        assert!((r.optimal_value.to_f64() + 2.0).abs() < 1e-8);
        let r = tilted_primal(&quad_problem(0.0), &[0.0], &cfg());
        assert!(r.optimal_value.to_f64().abs() < 1e-8);
        let r = tilted_primal(&flat_problem(), &[1.0], &cfg());
        assert_eq!(r.status, SolveStatus::Unbounded);
        assert_eq!(r.optimal_value, ExtReal::NegInf);
    }

    #[test]
    fn duality_report_examples() {
        let r = duality_report(&quad_problem(2.0), &[2.0], &[2.0], &cfg(), None).unwrap();
        assert!(r.gap.to_f64().abs() < 1e-7 && r.strong);
        let r = duality_report(&quad_problem(2.0), &[2.0], &[0.0], &cfg(), None).unwrap();
        assert!((r.gap.to_f64() - 2.0).abs() < 1e-7);
        assert!(r.weak_duality_holds && !r.strong);
        assert_eq!(r.label, "weak only");
    }

    #[test]
    fn terminal_value_functions() {
        // V_T = g, W_T(η) = g*(η)
        let p = quad_problem(0.0).with_start(1).unwrap().with_xi(&[1.5]);
        let r = solve_primal(&p, &cfg());
        assert!((r.optimal_value.to_f64() - 2.25).abs() < 1e-9);
        let d = dualize(&p).unwrap().with_eta(&[3.0]);
        let r = solve_dual(&d, &cfg());
        assert!((r.optimal_value.to_f64() - 2.25).abs() < 1e-8);
    }

    #[test]
    fn json_round_trip() {
        let p = quad_problem(2.0);
        let s = serde_json::to_string(&p).unwrap();
        let q: BolzaProblem = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        let d = dualize(&p).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        let e: DualBolzaProblem = serde_json::from_str(&s).unwrap();
        assert_eq!(d, e);
    }
}
