//! Brute-force oracles and randomized checks.
//!
//! Nothing here calls the QP engine on the problem being checked: the grid
//! oracles evaluate objectives pointwise, and the fuzzer only evaluates costs
//! of randomly drawn feasible pairs.
//!
//! Random instances follow a fixed distribution so failures can be replayed:
//! PSD parts are `UᵀΛU` with `U` a random orthogonal matrix (QR of a Gaussian
//! matrix) and `Λ` uniform in `[0.1, 10]`; boxes are centered at 0 with
//! half-widths uniform in `[0.5, 5]`; atom probabilities come from a
//! symmetric Dirichlet(1); primal cell values are uniform in `[−0.25, 0.25]`.

use crate::bolza::{self, BolzaProblem, Stage, StageCell};
use crate::convexcalc::{LiftedConvex, SetDescriptor, StructuredConvex};
use crate::exec::{self, Exec};
use crate::extreal::ExtReal;
use crate::lcontrol::{LcProblem, LqParts, LqProblem};
use crate::probspace::{NoiseSample, Process, ScenarioTree};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("grid needs {required} evaluations, cap is {cap}")]
    BudgetExceeded { required: f64, cap: u64 },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("instance is not oracle-tractable: {0}")]
    NotTractable(String),
}

/// Default evaluation cap.
pub const GRID_CAP: u64 = 10_000_000;

/// A rectangular grid over the free scalars of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: f64,
    pub cap: u64,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, step: f64) -> Self {
        GridSpec { lower, upper, step, cap: GRID_CAP }
    }

    fn counts(&self) -> Result<Vec<usize>, OracleError> {
        if self.lower.len() != self.upper.len() {
            return Err(OracleError::BadGrid("bounds have different lengths".into()));
        }
        if !(self.step > 0.0) {
            return Err(OracleError::BadGrid("step must be positive".into()));
        }
        let mut counts = Vec::new();
        let mut total = 1.0f64;
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if !l.is_finite() || !u.is_finite() || u < l {
                return Err(OracleError::BadGrid(format!("bad bounds [{l}, {u}]")));
            }
            let k = ((u - l) / self.step + 1e-9).floor() as usize + 1;
            total *= k as f64;
            counts.push(k);
        }
        if total > self.cap as f64 {
            return Err(OracleError::BudgetExceeded { required: total, cap: self.cap });
        }
        Ok(counts)
    }

    fn point(&self, k: usize, i: usize) -> f64 {
        self.lower[k] + i as f64 * self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub value: ExtReal,
    pub argmin: Option<Vec<f64>>,
    pub evaluations: u64,
    /// `step ×` the largest axis slope seen around the argmin.
    pub accuracy_bound: f64,
}

/// Exhaustive minimization of `f` over the grid; ties go to the first point
/// in lexicographic order. Parallel over the first coordinate.
pub fn grid_search<F>(spec: &GridSpec, exec: Exec, f: F) -> Result<GridResult, OracleError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let counts = spec.counts()?;
    let k = counts.len();
    let evaluations: u64 = counts.iter().map(|&c| c as u64).product();
    if k == 0 {
        let v = f(&[]);
        return Ok(GridResult { value: ExtReal::from_f64(v), argmin: v.is_finite().then(Vec::new), evaluations: 1, accuracy_bound: 0.0 });
    }
    let inner: Vec<usize> = counts[1..].to_vec();
    let rows = exec::map_indexed(exec, counts[0], |i0| {
        let mut idx = vec![0usize; k];
        idx[0] = i0;
        let mut z: Vec<f64> = (0..k).map(|j| spec.point(j, idx[j])).collect();
        let mut best = (f64::INFINITY, usize::MAX);
        let mut lin = 0usize;
        loop {
            let v = f(&z);
            if v < best.0 {
                best = (v, lin);
            }
            lin += 1;
            // odometer over coordinates 1..k
            let mut j = k - 1;
            loop {
                if j == 0 {
                    return best;
                }
                idx[j] += 1;
                if idx[j] < inner[j - 1] {
                    z[j] = spec.point(j, idx[j]);
                    break;
                }
                idx[j] = 0;
                z[j] = spec.point(j, 0);
                j -= 1;
            }
        }
    });
    let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
    for (i0, (v, lin)) in rows.into_iter().enumerate() {
        if v < best.0 {
            best = (v, i0, lin);
        }
    }
    if !best.0.is_finite() {
        return Ok(GridResult { value: ExtReal::PosInf, argmin: None, evaluations, accuracy_bound: f64::INFINITY });
    }
    let mut idx = vec![0usize; k];
    idx[0] = best.1;
    let mut rest = best.2;
    for j in (1..k).rev() {
        idx[j] = rest % counts[j];
        rest /= counts[j];
    }
    let z: Vec<f64> = (0..k).map(|j| spec.point(j, idx[j])).collect();
    let mut slope: f64 = 0.0;
    for j in 0..k {
        for dir in [-1i64, 1] {
            let ni = idx[j] as i64 + dir;
            if ni < 0 || ni >= counts[j] as i64 {
                continue;
            }
            let mut zz = z.clone();
            zz[j] = spec.point(j, ni as usize);
            let v = f(&zz);
            if v.is_finite() {
                slope = slope.max((v - best.0).abs() / spec.step);
            }
        }
    }
    Ok(GridResult { value: ExtReal::Finite(best.0), argmin: Some(z), evaluations, accuracy_bound: spec.step * slope })
}

/// Number of free scalars of [`grid_oracle`]: every cell value of `x_t`,
/// `t ∈ [s, T]`, except the first cell of `x_s` (fixed by the mean).
pub fn grid_dimension(p: &BolzaProblem) -> usize {
    let cells: usize = (p.start()..=p.end()).map(|t| p.tree().partition(t).len()).sum();
    (cells - 1) * p.n()
}

/// Brute-force `V_s(ξ)` over adapted grids.
///
/// Free scalars are ordered by time, then cell, then component. Only
/// stage functions without hidden variables are supported.
pub fn grid_oracle(p: &BolzaProblem, spec: &GridSpec, exec: Exec) -> Result<GridResult, OracleError> {
    let k = grid_dimension(p);
    if spec.lower.len() != k {
        return Err(OracleError::BadGrid(format!("grid has {} coordinates, problem has {k} free scalars", spec.lower.len())));
    }
    let tree = p.tree();
    let (s, end, n) = (p.start(), p.end(), p.n());
    // stage terms: (weight, function, cell of x_{t−1}, cell of x_t)
    let mut terms: Vec<(f64, &StructuredConvex, usize, usize, usize)> = Vec::new();
    for t in s + 1..=end {
        for cell in tree.partition(t) {
            let a = cell[0];
            let f = p
                .lagrangian(t, a)
                .as_structured()
                .ok_or_else(|| OracleError::NotTractable("stage function has hidden variables".into()))?;
            let w: f64 = cell.iter().map(|&b| tree.prob(b)).sum();
            terms.push((w, f, t, tree.cell_of(t - 1, a), tree.cell_of(t, a)));
        }
    }
    let g = p
        .terminal()
        .as_structured()
        .ok_or_else(|| OracleError::NotTractable("terminal cost has hidden variables".into()))?;
    let offsets: Vec<usize> = {
        let mut o = vec![0];
        for t in s..=end {
            o.push(o.last().unwrap() + tree.partition(t).len() * n);
        }
        o
    };
    let probs_s: Vec<f64> = (0..tree.partition(s).len()).map(|c| tree.cell_prob(s, c)).collect();
    let probs_t: Vec<f64> = (0..tree.partition(end).len()).map(|c| tree.cell_prob(end, c)).collect();
    let xi = p.xi().to_vec();
    let objective = |free: &[f64]| -> f64 {
        // full cell vector with the first cell of x_s recovered from the mean
        let mut full = vec![0.0; offsets[offsets.len() - 1]];
        full[n..].copy_from_slice(free);
        for i in 0..n {
            let rest: f64 = (1..probs_s.len()).map(|c| probs_s[c] * full[c * n + i]).sum();
            full[i] = (xi[i] - rest) / probs_s[0];
        }
        let mut z = vec![0.0; 2 * n];
        let mut total = 0.0;
        for &(w, f, t, c0, c1) in &terms {
            let a0 = offsets[t - 1 - s] + c0 * n;
            let a1 = offsets[t - s] + c1 * n;
            for i in 0..n {
                z[i] = full[a0 + i];
                z[n + i] = full[a1 + i] - full[a0 + i];
            }
            let v = f.value_f64(&z);
            if !v.is_finite() {
                return f64::INFINITY;
            }
            total += w * v;
        }
        let mut y = vec![0.0; n];
        for (c, pc) in probs_t.iter().enumerate() {
            for i in 0..n {
                y[i] += pc * full[offsets[end - s] + c * n + i];
            }
        }
        total + g.value_f64(&y)
    };
    grid_search(spec, exec, objective)
}

/// Free scalars of [`lc_grid_oracle`]: the cells of `x_τ` except the first,
/// then `u_t` on the cells of the time-`t` partition for `t ∈ [τ, T−1]`.
pub fn lc_grid_dimension(lc: &LcProblem, tree: &ScenarioTree) -> usize {
    let xs = (tree.partition(lc.start()).len() - 1) * lc.n();
    let us: usize = (lc.start()..lc.end()).map(|t| tree.partition(t).len() * lc.m()).sum();
    xs + us
}

/// Brute-force value of the original linear-convex problem: enumerates
/// initial states and non-anticipative controls, simulates the dynamics and
/// evaluates the stage costs pointwise.
pub fn lc_grid_oracle(lc: &LcProblem, spec: &GridSpec, exec: Exec) -> Result<GridResult, OracleError> {
    let tree = lc.tree();
    let k = lc_grid_dimension(lc, tree);
    if spec.lower.len() != k {
        return Err(OracleError::BadGrid(format!("grid has {} coordinates, problem has {k} free scalars", spec.lower.len())));
    }
    let (n, m, tau, end) = (lc.n(), lc.m(), lc.start(), lc.end());
    let stage_fns: Vec<StructuredConvex> =
        (tau..end).map(|t| lc.stage_function(t)).collect::<Result<_, _>>().map_err(|e| OracleError::NotTractable(e.to_string()))?;
    let atoms = tree.atoms();
    let cs = tree.partition(tau).len();
    let probs_s: Vec<f64> = (0..cs).map(|c| tree.cell_prob(tau, c)).collect();
    let a = lc.a().clone();
    let b = lc.b().clone();
    let xi = lc.xi().to_vec();
    let u_off: Vec<usize> = {
        let mut o = vec![(cs - 1) * n];
        for t in tau..end {
            o.push(o.last().unwrap() + tree.partition(t).len() * m);
        }
        o
    };
    let objective = |free: &[f64]| -> f64 {
        let mut x0 = vec![vec![0.0; n]; cs];
        for c in 1..cs {
            x0[c].copy_from_slice(&free[(c - 1) * n..c * n]);
        }
        for i in 0..n {
            let rest: f64 = (1..cs).map(|c| probs_s[c] * x0[c][i]).sum();
            x0[0][i] = (xi[i] - rest) / probs_s[0];
        }
        let mut x: Vec<Vec<f64>> = (0..atoms).map(|at| x0[tree.cell_of(tau, at)].clone()).collect();
        let mut z = vec![0.0; n + m];
        let mut total = 0.0;
        for t in tau..end {
            let f = &stage_fns[t - tau];
            let mut next = vec![vec![0.0; n]; atoms];
            for at in 0..atoms {
                let uo = u_off[t - tau] + tree.cell_of(t, at) * m;
                let u = &free[uo..uo + m];
                z[..n].copy_from_slice(&x[at]);
                z[n..].copy_from_slice(u);
                let v = f.value_f64(&z);
                if !v.is_finite() {
                    return f64::INFINITY;
                }
                total += tree.prob(at) * v;
                let w = tree.noise_at(t, at).expect("tree built from noise");
                for i in 0..n {
                    let mut s = w[i];
                    for j in 0..n {
                        s += a[(i, j)] * x[at][j];
                    }
                    for j in 0..m {
                        s += b[(i, j)] * u[j];
                    }
                    next[at][i] = s;
                }
            }
            x = next;
        }
        let y = tree.expect(&x);
        total + lc.terminal().value_f64(&y)
    };
    grid_search(spec, exec, objective)
}

/// Left and right difference quotients of a convex function along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeInterval {
    pub left: f64,
    pub right: f64,
    /// One of the probes was infeasible and its side is unbounded.
    pub one_sided: bool,
}

impl SlopeInterval {
    pub fn contains(&self, g: f64, slack: f64) -> bool {
        g >= self.left - slack && g <= self.right + slack
    }
}

/// Two-sided difference quotients of `v` at `xi` along each axis. For convex
/// `v`, every subgradient component lies in its interval.
pub fn finite_diff_subgradient<F>(v: F, xi: &[f64], h: f64) -> Vec<SlopeInterval>
where
    F: Fn(&[f64]) -> ExtReal,
{
    let v0 = v(xi).to_f64();
    (0..xi.len())
        .map(|i| {
            let mut lo = xi.to_vec();
            lo[i] -= h;
            let mut hi = xi.to_vec();
            hi[i] += h;
            let (vl, vr) = (v(&lo), v(&hi));
            let left = match vl {
                ExtReal::Finite(a) => (v0 - a) / h,
                _ => f64::NEG_INFINITY,
            };
            let right = match vr {
                ExtReal::Finite(b) => (b - v0) / h,
                _ => f64::INFINITY,
            };
            SlopeInterval { left, right, one_sided: !vl.is_finite() || !vr.is_finite() }
        })
        .collect()
}

/// Size limits of random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzLimits {
    pub max_atoms: usize,
    pub max_horizon: usize,
    pub max_n: usize,
}

impl Default for FuzzLimits {
    fn default() -> Self {
        FuzzLimits { max_atoms: 8, max_horizon: 3, max_n: 2 }
    }
}

/// The generator for instance `index` of a run with `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Random orthogonal matrix (QR of a Gaussian matrix, signs fixed).
pub fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `UᵀΛU` with eigenvalues uniform in `[lo, hi]`.
pub fn random_psd<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let u = random_orthogonal(rng, d);
    let lam = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.random_range(lo..=hi)));
    crate::linalg::symmetrize(&(u.transpose() * lam * u))
}

/// Symmetric Dirichlet(1) probabilities, all positive, summing to 1.
pub fn random_probs<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        let p: Vec<f64> = g.iter().map(|v| v / s).collect();
        if p.iter().all(|&v| v > 1e-6) {
            // put the rounding error on the largest weight
            let mut p = p;
            let imax = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            let rest: f64 = (0..k).filter(|&i| i != imax).map(|i| p[i]).sum();
            p[imax] = 1.0 - rest;
            return p;
        }
    }
}

/// A random tree with `atoms` atoms on times `[start, start + horizon]`:
/// the last partition is the finest and each earlier one merges cells of the
/// next at random.
pub fn random_tree<R: Rng>(rng: &mut R, atoms: usize, start: usize, horizon: usize) -> ScenarioTree {
    let probs = random_probs(rng, atoms);
    let mut parts: Vec<Vec<Vec<usize>>> = vec![(0..atoms).map(|a| vec![a]).collect()];
    for _ in 0..horizon {
        let fine = parts.last().unwrap();
        let groups = rng.random_range(1..=fine.len());
        let mut merged: Vec<Vec<usize>> = vec![Vec::new(); groups];
        for cell in fine {
            merged[rng.random_range(0..groups)].extend(cell.iter().copied());
        }
        merged.retain(|c| !c.is_empty());
        parts.push(merged);
    }
    parts.reverse();
    ScenarioTree::new(probs, start, parts).expect("merging produces a refining chain")
}

/// Random `zᵀQz + c·z` with `Q` from [`random_psd`] and, with probability
/// ½, a centered box.
pub fn random_function<R: Rng>(rng: &mut R, d: usize, with_box: bool) -> StructuredConvex {
    let q = random_psd(rng, d, 0.1, 10.0);
    let c = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let domain = if with_box && rng.random_bool(0.5) {
        let hw: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..=5.0)).collect();
        SetDescriptor::boxed(hw.iter().map(|h| -h).collect(), hw)
    } else {
        SetDescriptor::All
    };
    StructuredConvex::new(q, c, 0.0, &domain).expect("random function is proper")
}

/// A random Bolza problem within `limits` (ξ is set to 0; callers pick it).
pub fn random_problem<R: Rng>(rng: &mut R, limits: &FuzzLimits) -> BolzaProblem {
    let n = rng.random_range(1..=limits.max_n);
    let horizon = rng.random_range(1..=limits.max_horizon);
    let atoms = rng.random_range(1..=limits.max_atoms);
    let tree = random_tree(rng, atoms, 0, horizon);
    let mut stages = Vec::new();
    for t in 1..=horizon {
        let cells = tree
            .partition(t)
            .iter()
            .map(|cell| StageCell { atoms: cell.clone(), f: LiftedConvex::from(random_function(rng, 2 * n, true)) })
            .collect();
        stages.push(Stage { t, cells });
    }
    let g = LiftedConvex::from(random_function(rng, n, true));
    BolzaProblem::new(tree, n, stages, g, vec![0.0; n], 0).expect("random problem is well formed")
}

/// Random adapted process with cell values uniform in `[−r, r]`.
pub fn random_primal<R: Rng>(rng: &mut R, p: &BolzaProblem, r: f64) -> Process {
    let tree = p.tree();
    let mut x = Process::zeros(p.n(), p.start(), p.end(), tree.atoms());
    for t in p.start()..=p.end() {
        for cell in tree.partition(t) {
            let v: Vec<f64> = (0..p.n()).map(|_| rng.random_range(-r..=r)).collect();
            for &a in cell {
                x.at_mut(t)[a].clone_from(&v);
            }
        }
    }
    x
}

/// Random element of the dual process set: `p_{t−1}` constant on the cells
/// at time `t`, `p_T` constant, and `𝔼^s[p_s]` shifted to one common value.
pub fn random_dual<R: Rng>(rng: &mut R, p: &BolzaProblem, r: f64) -> Process {
    let tree = p.tree();
    let (s, end, n) = (p.start(), p.end(), p.n());
    let mut out = Process::zeros(n, s, end, tree.atoms());
    for t in s..end {
        for cell in tree.partition(t + 1) {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-r..=r)).collect();
            for &a in cell {
                out.at_mut(t)[a].clone_from(&v);
            }
        }
    }
    let last: Vec<f64> = (0..n).map(|_| rng.random_range(-r..=r)).collect();
    for a in 0..tree.atoms() {
        out.at_mut(end)[a].clone_from(&last);
    }
    if s < end {
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-r..=r)).collect();
        let ce = tree.cond_expect(out.at(s), s).expect("start inside tree");
        for a in 0..tree.atoms() {
            for i in 0..n {
                out.at_mut(s)[a][i] += target[i] - ce[a][i];
            }
        }
    }
    out
}

/// Kinds drawn by [`random_family_member`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Rank-deficient PSD quadratic, no constraints.
    SingularQuadratic,
    /// Separable quadratic on a box.
    DiagonalBox,
    /// Dense PSD quadratic on a box.
    QuadraticBox,
    /// Dense PSD quadratic on a polyhedron containing a ball around 0.
    QuadraticPolyhedron,
    /// PSD quadratic on an affine subspace through 0.
    QuadraticAffine,
}

pub const FAMILY: [FamilyKind; 5] = [
    FamilyKind::SingularQuadratic,
    FamilyKind::DiagonalBox,
    FamilyKind::QuadraticBox,
    FamilyKind::QuadraticPolyhedron,
    FamilyKind::QuadraticAffine,
];

/// A random member of the structured family in dimension `d`.
pub fn random_family_member<R: Rng>(rng: &mut R, kind: FamilyKind, d: usize) -> StructuredConvex {
    let lin = DVector::from_fn(d, |_, _| normal(rng));
    let half_widths = |rng: &mut R| -> Vec<f64> { (0..d).map(|_| rng.random_range(0.5..=5.0)).collect() };
    let (quad, domain) = match kind {
        FamilyKind::SingularQuadratic => {
            let u = random_orthogonal(rng, d);
            let rank = rng.random_range(0..d);
            let lam = DVector::from_fn(d, |i, _| if i < rank { rng.random_range(0.1..=10.0) } else { 0.0 });
            (crate::linalg::symmetrize(&(u.transpose() * DMatrix::from_diagonal(&lam) * u)), SetDescriptor::All)
        }
        FamilyKind::DiagonalBox => {
            let q = DVector::from_fn(d, |_, _| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.1..=10.0) });
            let hw = half_widths(rng);
            (DMatrix::from_diagonal(&q), SetDescriptor::boxed(hw.iter().map(|h| -h).collect(), hw))
        }
        FamilyKind::QuadraticBox => {
            let hw = half_widths(rng);
            (random_psd(rng, d, 0.1, 10.0), SetDescriptor::boxed(hw.iter().map(|h| -h).collect(), hw))
        }
        FamilyKind::QuadraticPolyhedron => {
            let rows = d + 2;
            let a: Vec<Vec<f64>> = (0..rows).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
            let b: Vec<f64> = a.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() * rng.random_range(0.5..=3.0)).collect();
            (random_psd(rng, d, 0.1, 10.0), SetDescriptor::Polyhedron { a, b })
        }
        FamilyKind::QuadraticAffine => {
            let a = vec![(0..d).map(|_| normal(rng)).collect::<Vec<f64>>()];
            (random_psd(rng, d, 0.1, 10.0), SetDescriptor::Affine { a, b: vec![0.0] })
        }
    };
    StructuredConvex::new(quad, lin, 0.0, &domain).expect("family members are proper")
}

/// Size limits of random LQ instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqLimits {
    pub max_n: usize,
    pub max_m: usize,
    pub max_horizon: usize,
    /// Samples per noise stage (1 or 2).
    pub max_samples: usize,
    pub initial_info: bool,
}

impl Default for LqLimits {
    fn default() -> Self {
        LqLimits { max_n: 2, max_m: 2, max_horizon: 2, max_samples: 2, initial_info: true }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Centered two-point (or degenerate) noise: `w₁ ~ N(0, ½²)` with weight
/// `π ∈ [0.3, 0.7]` and `w₂ = −π w₁ / (1 − π)`.
fn random_noise<R: Rng>(rng: &mut R, n: usize, samples: usize) -> Vec<NoiseSample> {
    if samples < 2 {
        return vec![NoiseSample::new(vec![0.0; n], 1.0)];
    }
    let pi: f64 = rng.random_range(0.3..=0.7);
    let w1: Vec<f64> = (0..n).map(|_| 0.5 * normal(rng)).collect();
    let w2: Vec<f64> = w1.iter().map(|w| -pi * w / (1.0 - pi)).collect();
    vec![NoiseSample::new(w1, pi), NoiseSample::new(w2, 1.0 - pi)]
}

/// A random qualified LQ instance: `A = I + 0.3 G`, `B` Gaussian,
/// `P, Q` from [`random_psd`], `R` with eigenvalues in `[0.5, 5]`,
/// `X_τ = [−10, 10]ⁿ` and `ξ` uniform in `[−1, 1]ⁿ`.
pub fn random_lq<R: Rng>(rng: &mut R, limits: &LqLimits) -> LqProblem {
    let n = rng.random_range(1..=limits.max_n);
    let m = rng.random_range(1..=limits.max_m);
    let horizon = rng.random_range(1..=limits.max_horizon);
    let a = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| 0.3 * normal(rng));
    let b = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
    let p = random_psd(rng, n, 0.1, 10.0);
    let r = random_psd(rng, m, 0.5, 5.0);
    let q = random_psd(rng, n, 0.1, 10.0);
    let noise = (0..horizon)
        .map(|_| {
            let k = rng.random_range(1..=limits.max_samples);
            random_noise(rng, n, k)
        })
        .collect();
    let gamma = (limits.initial_info && rng.random_bool(0.5)).then(|| random_noise(rng, n, 2));
    let xi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    LqProblem::new(LqParts {
        a,
        b,
        p,
        r,
        q,
        start: 0,
        end: horizon,
        x0_lower: vec![-10.0; n],
        x0_upper: vec![10.0; n],
        noise,
        gamma,
        xi,
    })
    .expect("random LQ instance is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzViolation {
    pub index: u64,
    pub slack: f64,
    /// Replayable instance: problem (with ξ), η, and the pair.
    pub instance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub count: u64,
    pub limits: FuzzLimits,
    pub tolerance: f64,
    pub violations: Vec<FuzzViolation>,
    pub min_slack: Option<f64>,
    /// Per-instance slacks, in index order.
    pub slacks: Vec<f64>,
}

/// Cost of a random feasible primal/dual pair on a random instance.
pub fn fuzz_instance(seed: u64, index: u64, limits: &FuzzLimits) -> (f64, serde_json::Value) {
    let mut rng = instance_rng(seed, index);
    let p0 = random_problem(&mut rng, limits);
    let x = random_primal(&mut rng, &p0, 0.25);
    let xi = x.mean(p0.tree(), p0.start());
    let p = p0.with_xi(&xi);
    let pp = random_dual(&mut rng, &p, 2.0);
    let eta: Vec<f64> = pp.mean(p.tree(), p.start()).iter().map(|v| -v).collect();
    let d = bolza::dualize(&p).expect("random problems dualize").with_eta(&eta);
    let slack = bolza::pair_slack(&p, &d, &x, &pp, Exec::Sequential).expect("shapes match");
    let instance = serde_json::json!({ "problem": p, "eta": eta, "x": x, "p": pp });
    (slack.to_f64(), instance)
}

/// Weak-duality fuzzing: `count` random instances, one random feasible pair
/// each; a slack below `−tol` is a violation.
pub fn fuzz_weak_duality(seed: u64, count: u64, limits: &FuzzLimits, tol: f64, exec: Exec) -> FuzzReport {
    let results = exec::map_indexed(exec, count as usize, |i| {
        let (slack, inst) = fuzz_instance(seed, i as u64, limits);
        (slack, if slack < -tol { Some(inst) } else { None })
    });
    let mut violations = Vec::new();
    let mut slacks = Vec::with_capacity(results.len());
    for (i, (slack, inst)) in results.into_iter().enumerate() {
        slacks.push(slack);
        if let Some(instance) = inst {
            violations.push(FuzzViolation { index: i as u64, slack, instance });
        }
    }
    let min_slack = slacks.iter().copied().reduce(f64::min);
    FuzzReport { seed, count, limits: *limits, tolerance: tol, violations, min_slack, slacks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bolza::Stage;

    fn diag(q: &[f64]) -> LiftedConvex {
        LiftedConvex::from(StructuredConvex::quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(q))).unwrap())
    }

    #[test]
    fn grid_on_quadratic_instance() {
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, diag(&[0.0, 1.0]))], diag(&[1.0]), vec![2.0], 0)
            .unwrap();
        assert_eq!(grid_dimension(&p), 1);
        // x_1 = ξ + Δx with Δx ∈ [−10, 10]
        let spec = GridSpec::new(vec![-8.0], vec![12.0], 1e-3);
        let r = grid_oracle(&p, &spec, Exec::default()).unwrap();
        assert!((r.value.to_f64() - 2.0).abs() < 1e-3);
        assert!((r.argmin.unwrap()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn grid_on_zero_and_infeasible() {
        let zero = |d| LiftedConvex::from(StructuredConvex::zero(d));
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, zero(2))], zero(1), vec![0.5], 0).unwrap();
        let r = grid_oracle(&p, &GridSpec::new(vec![-1.0], vec![1.0], 0.1), Exec::Sequential).unwrap();
        assert_eq!(r.value, ExtReal::Finite(0.0));

        let still = LiftedConvex::from(StructuredConvex::indicator(2, &SetDescriptor::boxed(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 0.0])).unwrap());
        let origin = LiftedConvex::from(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 0.0, 0.0)).unwrap());
        let p = BolzaProblem::new(ScenarioTree::deterministic(0, 1), 1, vec![Stage::uniform(1, 1, still)], origin, vec![1.0], 0).unwrap();
        let r = grid_oracle(&p, &GridSpec::new(vec![-2.0], vec![2.0], 0.01), Exec::Sequential).unwrap();
        assert_eq!(r.value, ExtReal::PosInf);
    }

    #[test]
    fn grid_budget_is_enforced() {
        let spec = GridSpec::new(vec![0.0; 3], vec![1.0; 3], 1e-3);
        assert!(matches!(grid_search(&spec, Exec::Sequential, |_| 0.0), Err(OracleError::BudgetExceeded { .. })));
    }

    #[test]
    fn grid_search_is_order_independent() {
        let spec = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], 0.01);
        let f = |z: &[f64]| (z[0] - 0.3).powi(2) + (z[1] + 0.2).abs();
        let a = grid_search(&spec, Exec::Sequential, f).unwrap();
        let b = grid_search(&spec, Exec::Parallel, f).unwrap();
        assert_eq!(a, b);
        let z = a.argmin.unwrap();
        assert!((z[0] - 0.3).abs() < 1e-9 && (z[1] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_examples() {
        let iv = finite_diff_subgradient(|x| ExtReal::Finite(0.5 * x[0] * x[0]), &[2.0], 1e-4);
        assert!((iv[0].left - 1.99995).abs() < 1e-9 && (iv[0].right - 2.00005).abs() < 1e-9);
        assert!(iv[0].contains(2.0, 0.0));
        let iv = finite_diff_subgradient(|_| ExtReal::Finite(0.0), &[1.0], 1e-4);
        assert_eq!((iv[0].left, iv[0].right), (0.0, 0.0));
        let iv = finite_diff_subgradient(|x| ExtReal::Finite(x[0].abs()), &[0.0], 1e-4);
        assert_eq!((iv[0].left, iv[0].right), (-1.0, 1.0));
        let iv = finite_diff_subgradient(|x| if x[0] >= 0.0 { ExtReal::Finite(x[0]) } else { ExtReal::PosInf }, &[0.0], 1e-4);
        assert!(iv[0].one_sided && iv[0].left == f64::NEG_INFINITY);
    }

    #[test]
    fn random_trees_refine() {
        let mut rng = instance_rng(7, 0);
        for _ in 0..50 {
            let t = random_tree(&mut rng, 6, 0, 3);
            assert!(t.check_refinement().is_ok());
            assert_eq!(t.partition(3).len(), 6);
        }
    }

    #[test]
    fn random_dual_is_in_the_dual_set() {
        let mut rng = instance_rng(3, 1);
        let limits = FuzzLimits::default();
        for _ in 0..20 {
            let p = random_problem(&mut rng, &limits);
            let pp = random_dual(&mut rng, &p, 1.0);
            let eta: Vec<f64> = pp.mean(p.tree(), p.start()).iter().map(|v| -v).collect();
            let d = bolza::dualize(&p).unwrap().with_eta(&eta);
            assert!(d.dual_infeasibility(&pp) < 1e-12);
        }
    }

    #[test]
    fn fuzz_small_run_and_determinism() {
        let limits = FuzzLimits::default();
        let a = fuzz_weak_duality(42, 12, &limits, 1e-7, Exec::Parallel);
        assert!(a.violations.is_empty(), "{:?}", a.min_slack);
        let b = fuzz_weak_duality(42, 12, &limits, 1e-7, Exec::Sequential);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let empty = fuzz_weak_duality(42, 0, &limits, 1e-7, Exec::Parallel);
        assert!(empty.violations.is_empty() && empty.slacks.is_empty() && empty.min_slack.is_none());
    }
}
