//! Quadratic-plus-polyhedral convex functions.
//!
//! [`StructuredConvex`] is `f(z) = zᵀQz + c·z + k + δ_C(z)` with `Q ⪰ 0` and `C`
//! a polyhedron given by a [`SetDescriptor`]. Note the quadratic carries no ½.
//!
//! [`LiftedConvex`] is the inf-projection `F(x) = inf_h f(x, h)` of a
//! structured function. The family is closed under conjugation: by QP duality
//!
//! ```text
//! f*(w) = min { ¼ rᵀQ⁺r − k + b·m  :  r = w − c + Dm,  r ⊥ ker Q,  m ∈ cone }
//! ```
//!
//! where `m` collects the multipliers of the constraints of `C`, so `f*` is
//! again a lifted function (with the multipliers as hidden variables). This
//! is what lets the dual Lagrangians and the dual terminal cost be built
//! symbolically and fed to the same QP machinery as the primal.
//!
//! Numerical work (conjugates without closed form, prox with coupling
//! constraints, partial minimization) goes through [`crate::qp`].

use crate::extreal::{bounds_serde, ExtReal};
use crate::linalg::{lstsq_min_norm, min_eigenvalue, psd_pinv_and_null, spectrum};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point violating the domain by more than this is outside it.
pub const FEAS_TOL: f64 = 1e-8;
/// Smallest admissible eigenvalue of a quadratic part.
pub const PSD_TOL: f64 = 1e-10;
/// Relaxation applied to domain rows when minimizing out hidden variables.
pub const RELAX: f64 = 1e-9;
/// Affine consistency tolerance for domain descriptors.
pub const AFFINE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic part is not symmetric")]
    NotSymmetric,
    #[error("quadratic part is not positive semidefinite (min eigenvalue {min_eig})")]
    NotPsd { min_eig: f64 },
    #[error("box has lower > upper at coordinate {index}")]
    BadBox { index: usize },
    #[error("affine system is inconsistent (residual {residual})")]
    InconsistentAffine { residual: f64 },
    #[error("domain is empty")]
    EmptyDomain,
    #[error("function takes the value -inf (not proper)")]
    Improper,
    #[error("function is +inf at the given point")]
    InfiniteAtPoint,
    #[error("step must be positive")]
    BadStep,
    #[error("inner solve did not converge: {0}")]
    Solver(String),
}

/// A polyhedral set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetDescriptor {
    #[default]
    All,
    Box {
        #[serde(with = "bounds_serde")]
        lower: Vec<f64>,
        #[serde(with = "bounds_serde")]
        upper: Vec<f64>,
    },
    /// `{z : a z = b}`
    Affine { a: Vec<Vec<f64>>, b: Vec<f64> },
    /// `{z : a z ≤ b}`
    Polyhedron { a: Vec<Vec<f64>>, b: Vec<f64> },
    Intersection { sets: Vec<SetDescriptor> },
}

impl SetDescriptor {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        SetDescriptor::Box { lower, upper }
    }

    /// The interval `[lo, hi]` in every one of `dim` coordinates.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        SetDescriptor::Box { lower: vec![lo; dim], upper: vec![hi; dim] }
    }

    /// Normal form over `dim` coordinates.
    pub fn flatten(&self, dim: usize) -> Result<Constraints, ConvexError> {
        let mut c = Constraints::unconstrained(dim);
        self.flatten_into(&mut c)?;
        c.validate()?;
        Ok(c)
    }

    fn flatten_into(&self, c: &mut Constraints) -> Result<(), ConvexError> {
        let dim = c.dim();
        let rows = |a: &[Vec<f64>], b: &[f64]| -> Result<(DMatrix<f64>, DVector<f64>), ConvexError> {
            if a.len() != b.len() || a.iter().any(|r| r.len() != dim) {
                return Err(ConvexError::Dimension(format!("constraint rows must have {dim} columns")));
            }
            Ok((crate::linalg::mat_from_rows(a, dim), DVector::from_column_slice(b)))
        };
        match self {
            SetDescriptor::All => {}
            SetDescriptor::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(ConvexError::Dimension(format!("box must have {dim} coordinates")));
                }
                for i in 0..dim {
                    c.lo[i] = c.lo[i].max(lower[i]);
                    c.hi[i] = c.hi[i].min(upper[i]);
                }
            }
            SetDescriptor::Affine { a, b } => {
                let (m, v) = rows(a, b)?;
                c.eq_a = stack(&c.eq_a, &m);
                c.eq_b = stack_vec(&c.eq_b, &v);
            }
            SetDescriptor::Polyhedron { a, b } => {
                let (m, v) = rows(a, b)?;
                c.in_a = stack(&c.in_a, &m);
                c.in_b = stack_vec(&c.in_b, &v);
            }
            SetDescriptor::Intersection { sets } => {
                for s in sets {
                    s.flatten_into(c)?;
                }
            }
        }
        Ok(())
    }
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols().max(b.ncols()));
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    m
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Normalized polyhedron `lo ≤ z ≤ hi, eq_a z = eq_b, in_a z ≤ in_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub in_a: DMatrix<f64>,
    pub in_b: DVector<f64>,
}

impl Constraints {
    pub fn unconstrained(dim: usize) -> Self {
        Constraints {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
            eq_a: DMatrix::zeros(0, dim),
            eq_b: DVector::zeros(0),
            in_a: DMatrix::zeros(0, dim),
            in_b: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn has_rows(&self) -> bool {
        self.eq_a.nrows() > 0 || self.in_a.nrows() > 0
    }

    pub fn is_all(&self) -> bool {
        !self.has_rows() && self.lo.iter().all(|v| *v == f64::NEG_INFINITY) && self.hi.iter().all(|v| *v == f64::INFINITY)
    }

    fn validate(&self) -> Result<(), ConvexError> {
        for i in 0..self.dim() {
            if self.lo[i] > self.hi[i] || self.lo[i] == f64::INFINITY || self.hi[i] == f64::NEG_INFINITY {
                return Err(ConvexError::BadBox { index: i });
            }
        }
        if self.eq_a.nrows() > 0 {
            let (_, res, _) = lstsq_min_norm(&self.eq_a, &self.eq_b);
            if res > AFFINE_TOL * (1.0 + self.eq_b.amax()) {
                return Err(ConvexError::InconsistentAffine { residual: res });
            }
        }
        Ok(())
    }

    /// ∞-norm violation of `z`.
    pub fn violation(&self, z: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.dim() {
            v = v.max(self.lo[i] - z[i]).max(z[i] - self.hi[i]);
        }
        let zv = DVector::from_column_slice(z);
        if self.eq_a.nrows() > 0 {
            v = v.max((&self.eq_a * &zv - &self.eq_b).amax());
        }
        if self.in_a.nrows() > 0 {
            let r = &self.in_a * &zv - &self.in_b;
            v = v.max(r.max());
        }
        v
    }

    pub fn to_descriptor(&self) -> SetDescriptor {
        let mut sets = Vec::new();
        if self.lo.iter().any(|v| v.is_finite()) || self.hi.iter().any(|v| v.is_finite()) {
            sets.push(SetDescriptor::Box { lower: self.lo.clone(), upper: self.hi.clone() });
        }
        if self.eq_a.nrows() > 0 {
            sets.push(SetDescriptor::Affine {
                a: crate::linalg::mat_to_rows(&self.eq_a),
                b: self.eq_b.iter().copied().collect(),
            });
        }
        if self.in_a.nrows() > 0 {
            sets.push(SetDescriptor::Polyhedron {
                a: crate::linalg::mat_to_rows(&self.in_a),
                b: self.in_b.iter().copied().collect(),
            });
        }
        match sets.len() {
            0 => SetDescriptor::All,
            1 => sets.pop().unwrap(),
            _ => SetDescriptor::Intersection { sets },
        }
    }

    /// Both sets of constraints at once.
    pub fn intersect(&self, other: &Constraints) -> Result<Constraints, ConvexError> {
        if self.dim() != other.dim() {
            return Err(ConvexError::Dimension("constraint dimensions differ".into()));
        }
        let mut c = self.clone();
        for i in 0..c.dim() {
            c.lo[i] = c.lo[i].max(other.lo[i]);
            c.hi[i] = c.hi[i].min(other.hi[i]);
            if c.lo[i] > c.hi[i] {
                return Err(ConvexError::EmptyDomain);
            }
        }
        c.eq_a = stack(&c.eq_a, &other.eq_a);
        c.eq_b = stack_vec(&c.eq_b, &other.eq_b);
        c.in_a = stack(&c.in_a, &other.in_a);
        c.in_b = stack_vec(&c.in_b, &other.in_b);
        c.validate()?;
        Ok(c)
    }

    /// Constraints on `x` for `z = m x + b ∈ C`. Box rows whose row of `m`
    /// has a single nonzero stay boxes; other box rows become inequalities.
    pub fn precompose(&self, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<Constraints, ConvexError> {
        let k = m.ncols();
        let mut out = Constraints::unconstrained(k);
        let mut extra_a: Vec<DVector<f64>> = Vec::new();
        let mut extra_b: Vec<f64> = Vec::new();
        for i in 0..self.dim() {
            let (lo, hi) = (self.lo[i] - b[i], self.hi[i] - b[i]);
            if !lo.is_finite() && !hi.is_finite() {
                continue;
            }
            let nz: Vec<usize> = (0..k).filter(|&j| m[(i, j)] != 0.0).collect();
            match nz.as_slice() {
                [] => {
                    if lo > FEAS_TOL || hi < -FEAS_TOL {
                        return Err(ConvexError::EmptyDomain);
                    }
                }
                [j] => {
                    let a = m[(i, *j)];
                    let (l, h) = if a > 0.0 { (lo / a, hi / a) } else { (hi / a, lo / a) };
                    out.lo[*j] = out.lo[*j].max(l);
                    out.hi[*j] = out.hi[*j].min(h);
                }
                _ => {
                    let row = m.row(i).transpose();
                    if hi.is_finite() {
                        extra_a.push(row.clone());
                        extra_b.push(hi);
                    }
                    if lo.is_finite() {
                        extra_a.push(-row);
                        extra_b.push(-lo);
                    }
                }
            }
        }
        for i in 0..k {
            if out.lo[i] > out.hi[i] {
                if out.lo[i] - out.hi[i] <= FEAS_TOL {
                    let mid = 0.5 * (out.lo[i] + out.hi[i]);
                    out.lo[i] = mid;
                    out.hi[i] = mid;
                } else {
                    return Err(ConvexError::EmptyDomain);
                }
            }
        }
        if self.eq_a.nrows() > 0 {
            out.eq_a = &self.eq_a * m;
            out.eq_b = &self.eq_b - &self.eq_a * b;
        }
        let mut in_a = if self.in_a.nrows() > 0 { &self.in_a * m } else { DMatrix::zeros(0, k) };
        let mut in_b = if self.in_a.nrows() > 0 { &self.in_b - &self.in_a * b } else { DVector::zeros(0) };
        if !extra_a.is_empty() {
            let ea = DMatrix::from_fn(extra_a.len(), k, |r, j| extra_a[r][j]);
            in_a = stack(&in_a, &ea);
            in_b = stack_vec(&in_b, &DVector::from_vec(extra_b));
        }
        out.in_a = in_a;
        out.in_b = in_b;
        Ok(out)
    }

    /// QP rows: box rows for coordinates with a finite bound, then equality
    /// rows (relaxed by `relax`), then inequality rows.
    fn qp_rows(&self, relax: f64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, RowLayout) {
        let d = self.dim();
        let boxed: Vec<usize> = (0..d).filter(|&i| self.lo[i].is_finite() || self.hi[i].is_finite()).collect();
        let ne = self.eq_a.nrows();
        let ni = self.in_a.nrows();
        let m = boxed.len() + ne + ni;
        let mut a = DMatrix::zeros(m, d);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (r, &i) in boxed.iter().enumerate() {
            a[(r, i)] = 1.0;
            if self.lo[i] == self.hi[i] && relax == 0.0 {
                l[r] = self.lo[i];
                u[r] = self.hi[i];
            } else {
                l[r] = self.lo[i] - relax;
                u[r] = self.hi[i] + relax;
            }
        }
        let off = boxed.len();
        for r in 0..ne {
            a.row_mut(off + r).copy_from(&self.eq_a.row(r));
            l[off + r] = self.eq_b[r] - relax;
            u[off + r] = self.eq_b[r] + relax;
        }
        let off2 = off + ne;
        for r in 0..ni {
            a.row_mut(off2 + r).copy_from(&self.in_a.row(r));
            l[off2 + r] = f64::NEG_INFINITY;
            u[off2 + r] = self.in_b[r] + relax;
        }
        (a, l, u, RowLayout { boxed, ne, ni })
    }
}

struct RowLayout {
    boxed: Vec<usize>,
    ne: usize,
    ni: usize,
}

enum Minimized {
    Optimal { z: DVector<f64>, value: f64, y_eq: DVector<f64>, y_in: DVector<f64> },
    Infeasible,
    Unbounded,
}

fn inner_settings() -> QpSettings {
    QpSettings { tol_stationarity: 1e-9, tol_feasibility: 1e-10, max_iter: 100_000, ..QpSettings::default() }
}

/// Minimizes `zᵀQz + c·z` over the constraints (value excludes any constant).
fn minimize(quad: &DMatrix<f64>, lin: &DVector<f64>, cons: &Constraints, relax: f64) -> Result<Minimized, ConvexError> {
    if relax > 0.0 {
        // exact rows first; the relaxed solve only absorbs rounding-level inconsistencies
        if let Ok(m @ (Minimized::Optimal { .. } | Minimized::Unbounded)) = minimize_rows(quad, lin, cons, 0.0) {
            return Ok(m);
        }
    }
    minimize_rows(quad, lin, cons, relax)
}

fn minimize_rows(quad: &DMatrix<f64>, lin: &DVector<f64>, cons: &Constraints, relax: f64) -> Result<Minimized, ConvexError> {
    let (a, l, u, layout) = cons.qp_rows(relax);
    let prob = QpProblem { p: quad * 2.0, q: lin.clone(), a, l, u };
    let sol = qp::solve(&prob, &inner_settings());
    match sol.status {
        QpStatus::Solved => {
            let off = layout.boxed.len();
            let y_eq = sol.y.rows(off, layout.ne).into_owned();
            let y_in = sol.y.rows(off + layout.ne, layout.ni).into_owned();
            let value = sol.x.dot(&(quad * &sol.x)) + lin.dot(&sol.x);
            Ok(Minimized::Optimal { z: sol.x, value, y_eq, y_in })
        }
        QpStatus::PrimalInfeasible => Ok(Minimized::Infeasible),
        QpStatus::DualInfeasible => Ok(Minimized::Unbounded),
        QpStatus::MaxIter => {
            if sol.stationarity <= 1e-6 && sol.feasibility <= 1e-7 {
                let value = sol.x.dot(&(quad * &sol.x)) + lin.dot(&sol.x);
                let off = layout.boxed.len();
                Ok(Minimized::Optimal {
                    y_eq: sol.y.rows(off, layout.ne).into_owned(),
                    y_in: sol.y.rows(off + layout.ne, layout.ni).into_owned(),
                    z: sol.x,
                    value,
                })
            } else {
                Err(ConvexError::Solver(format!(
                    "stationarity {:.2e}, feasibility {:.2e} after {} iterations",
                    sol.stationarity, sol.feasibility, sol.iterations
                )))
            }
        }
    }
}

fn is_feasible(cons: &Constraints) -> Result<bool, ConvexError> {
    if !cons.has_rows() {
        return Ok((0..cons.dim()).all(|i| cons.lo[i] <= cons.hi[i]));
    }
    let d = cons.dim();
    match minimize(&DMatrix::zeros(d, d), &DVector::zeros(d), cons, 0.0)? {
        Minimized::Optimal { .. } => Ok(true),
        Minimized::Infeasible => Ok(false),
        Minimized::Unbounded => Ok(true),
    }
}

/// Result of [`StructuredConvex::eval_subgrad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: ExtReal,
    pub subgradient: Option<Vec<f64>>,
    /// Coordinates sitting on a finite box bound.
    pub active_box: Vec<usize>,
    /// Inequality rows holding with equality.
    pub active_rows: Vec<usize>,
}

/// Result of a conjugate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjValue {
    pub value: ExtReal,
    /// A maximizer `z` of `w·z − f(z)`; it lies in `∂f*(w)`.
    pub maximizer: Option<Vec<f64>>,
    pub unbounded: bool,
}

/// Result of an inf-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct InfProjection {
    pub value: ExtReal,
    /// Least-norm minimizer over the eliminated coordinates.
    pub minimizer: Option<Vec<f64>>,
    pub unbounded: bool,
}

/// `z ↦ zᵀQz + c·z + k + δ_C(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredConvex {
    quad: DMatrix<f64>,
    lin: DVector<f64>,
    constant: f64,
    cons: Constraints,
}

#[derive(Serialize, Deserialize)]
struct FunctionRepr {
    #[serde(default)]
    quad: Vec<Vec<f64>>,
    lin: Vec<f64>,
    #[serde(rename = "const", default)]
    constant: f64,
    #[serde(default)]
    domain: SetDescriptor,
    #[serde(default, skip_serializing_if = "is_zero")]
    hidden: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl FunctionRepr {
    fn build(self) -> Result<(StructuredConvex, usize), ConvexError> {
        let d = self.lin.len();
        let quad = if self.quad.is_empty() {
            DMatrix::zeros(d, d)
        } else {
            if self.quad.len() != d || self.quad.iter().any(|r| r.len() != d) {
                return Err(ConvexError::Dimension(format!("quad must be {d}x{d}")));
            }
            crate::linalg::mat_from_rows(&self.quad, d)
        };
        let f = StructuredConvex::new(quad, DVector::from_vec(self.lin), self.constant, &self.domain)?;
        Ok((f, self.hidden))
    }

    fn from_parts(f: &StructuredConvex, hidden: usize) -> Self {
        FunctionRepr {
            quad: crate::linalg::mat_to_rows(&f.quad),
            lin: f.lin.iter().copied().collect(),
            constant: f.constant,
            domain: f.cons.to_descriptor(),
            hidden,
        }
    }
}

impl Serialize for StructuredConvex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FunctionRepr::from_parts(self, 0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StructuredConvex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = FunctionRepr::deserialize(d)?;
        if repr.hidden != 0 {
            return Err(serde::de::Error::custom("hidden variables are not allowed here"));
        }
        repr.build().map(|(f, _)| f).map_err(serde::de::Error::custom)
    }
}

impl StructuredConvex {
    /// Validated constructor: symmetric PSD quadratic part, nonempty domain.
    pub fn new(quad: DMatrix<f64>, lin: DVector<f64>, constant: f64, domain: &SetDescriptor) -> Result<Self, ConvexError> {
        let d = lin.len();
        if quad.nrows() != d || quad.ncols() != d {
            return Err(ConvexError::Dimension(format!("quad must be {d}x{d}")));
        }
        let scale = quad.amax().max(1.0);
        if (&quad - quad.transpose()).amax() > 1e-10 * scale {
            return Err(ConvexError::NotSymmetric);
        }
        let quad = crate::linalg::symmetrize(&quad);
        if d > 0 {
            let min_eig = min_eigenvalue(&quad);
            if min_eig < -PSD_TOL * scale {
                return Err(ConvexError::NotPsd { min_eig });
            }
        }
        let cons = domain.flatten(d)?;
        if !is_feasible(&cons)? {
            return Err(ConvexError::EmptyDomain);
        }
        Ok(StructuredConvex { quad, lin, constant, cons })
    }

    pub(crate) fn from_parts(quad: DMatrix<f64>, lin: DVector<f64>, constant: f64, cons: Constraints) -> Self {
        StructuredConvex { quad, lin, constant, cons }
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_parts(DMatrix::zeros(dim, dim), DVector::zeros(dim), 0.0, Constraints::unconstrained(dim))
    }

    /// `zᵀQz`.
    pub fn quadratic(quad: DMatrix<f64>) -> Result<Self, ConvexError> {
        let d = quad.nrows();
        Self::new(quad, DVector::zeros(d), 0.0, &SetDescriptor::All)
    }

    pub fn indicator(dim: usize, domain: &SetDescriptor) -> Result<Self, ConvexError> {
        Self::new(DMatrix::zeros(dim, dim), DVector::zeros(dim), 0.0, domain)
    }

    /// Separable `Σ q_i z_i² + c_i z_i` plus a box.
    pub fn diag_box(q: &[f64], c: &[f64], constant: f64, lower: &[f64], upper: &[f64]) -> Result<Self, ConvexError> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            DVector::from_column_slice(c),
            constant,
            &SetDescriptor::boxed(lower.to_vec(), upper.to_vec()),
        )
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn quad(&self) -> &DMatrix<f64> {
        &self.quad
    }

    pub fn lin(&self) -> &DVector<f64> {
        &self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn constraints(&self) -> &Constraints {
        &self.cons
    }

    pub fn domain(&self) -> SetDescriptor {
        self.cons.to_descriptor()
    }

    fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.quad[(i, j)] == 0.0))
    }

    fn smooth_value(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.quad * z)) + self.lin.dot(z) + self.constant
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.cons.violation(z) <= FEAS_TOL
    }

    /// Allocation-free value (`+∞` outside the domain), for brute-force loops.
    pub fn value_f64(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        if z.len() != d {
            return f64::INFINITY;
        }
        let c = &self.cons;
        for i in 0..d {
            if z[i] < c.lo[i] - FEAS_TOL || z[i] > c.hi[i] + FEAS_TOL {
                return f64::INFINITY;
            }
        }
        for r in 0..c.eq_a.nrows() {
            let v: f64 = (0..d).map(|j| c.eq_a[(r, j)] * z[j]).sum();
            if (v - c.eq_b[r]).abs() > FEAS_TOL {
                return f64::INFINITY;
            }
        }
        for r in 0..c.in_a.nrows() {
            let v: f64 = (0..d).map(|j| c.in_a[(r, j)] * z[j]).sum();
            if v - c.in_b[r] > FEAS_TOL {
                return f64::INFINITY;
            }
        }
        let mut total = self.constant;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.quad[(i, j)] * z[j];
            }
            total += z[i] * row + self.lin[i] * z[i];
        }
        total
    }

    pub fn value(&self, z: &[f64]) -> ExtReal {
        if z.len() != self.dim() || !self.contains(z) {
            return ExtReal::PosInf;
        }
        ExtReal::Finite(self.smooth_value(&DVector::from_column_slice(z)))
    }

    /// Value and one subgradient (`2Qz + c`; the normal-cone part is taken
    /// to be 0 and the active faces are listed).
    pub fn eval_subgrad(&self, z: &[f64]) -> Evaluation {
        let value = self.value(z);
        if !value.is_finite() {
            return Evaluation { value, subgradient: None, active_box: vec![], active_rows: vec![] };
        }
        let zv = DVector::from_column_slice(z);
        let g = &self.quad * &zv * 2.0 + &self.lin;
        let active_box = (0..self.dim())
            .filter(|&i| (z[i] - self.cons.lo[i]).abs() <= FEAS_TOL || (z[i] - self.cons.hi[i]).abs() <= FEAS_TOL)
            .collect();
        let active_rows = if self.cons.in_a.nrows() > 0 {
            let r = &self.cons.in_a * &zv - &self.cons.in_b;
            (0..r.len()).filter(|&i| r[i].abs() <= FEAS_TOL).collect()
        } else {
            vec![]
        };
        Evaluation { value, subgradient: Some(g.iter().copied().collect()), active_box, active_rows }
    }

    /// `f*(w) = sup_z w·z − f(z)`.
    pub fn conjugate(&self, w: &[f64]) -> Result<ConjValue, ConvexError> {
        let d = self.dim();
        if w.len() != d {
            return Err(ConvexError::Dimension(format!("conjugate point must have {d} coordinates")));
        }
        let wv = DVector::from_column_slice(w);
        let r = &wv - &self.lin;
        if self.cons.is_all() {
            // sup_z r·z − zᵀQz: finite iff r ⊥ ker Q.
            let (pinv, null) = psd_pinv_and_null(&self.quad);
            let tol = 1e-9 * (1.0 + wv.amax() + self.lin.amax());
            if null.ncols() > 0 && (null.transpose() * &r).amax() > tol {
                return Ok(ConjValue { value: ExtReal::PosInf, maximizer: None, unbounded: true });
            }
            let z = &pinv * &r * 0.5;
            let value = 0.25 * r.dot(&(&pinv * &r)) - self.constant;
            return Ok(ConjValue { value: ExtReal::Finite(value), maximizer: Some(z.iter().copied().collect()), unbounded: false });
        }
        if self.is_diagonal() && !self.cons.has_rows() {
            let mut z = vec![0.0; d];
            let mut value = -self.constant;
            for i in 0..d {
                let q = self.quad[(i, i)];
                let (lo, hi) = (self.cons.lo[i], self.cons.hi[i]);
                let ri = r[i];
                let zi = if q > 0.0 {
                    (ri / (2.0 * q)).clamp(lo, hi)
                } else {
                    let tol = 1e-12 * (1.0 + w[i].abs() + self.lin[i].abs());
                    if ri > tol {
                        hi
                    } else if ri < -tol {
                        lo
                    } else {
                        0.0f64.clamp(lo, hi)
                    }
                };
                if !zi.is_finite() {
                    return Ok(ConjValue { value: ExtReal::PosInf, maximizer: None, unbounded: true });
                }
                z[i] = zi;
                value += ri * zi - q * zi * zi;
            }
            return Ok(ConjValue { value: ExtReal::Finite(value), maximizer: Some(z), unbounded: false });
        }
        match minimize(&self.quad, &(-r), &self.cons, 0.0)? {
            Minimized::Optimal { z, value, .. } => Ok(ConjValue {
                value: ExtReal::Finite(-value - self.constant),
                maximizer: Some(z.iter().copied().collect()),
                unbounded: false,
            }),
            Minimized::Unbounded => Ok(ConjValue { value: ExtReal::PosInf, maximizer: None, unbounded: true }),
            Minimized::Infeasible => Err(ConvexError::EmptyDomain),
        }
    }

    /// `argmin_w f(w) + ‖w − z‖² / (2 step)`.
    pub fn prox(&self, z: &[f64], step: f64) -> Result<Vec<f64>, ConvexError> {
        if !(step > 0.0) {
            return Err(ConvexError::BadStep);
        }
        let d = self.dim();
        if z.len() != d {
            return Err(ConvexError::Dimension(format!("prox point must have {d} coordinates")));
        }
        if self.is_diagonal() && !self.cons.has_rows() {
            return Ok((0..d)
                .map(|i| {
                    let q = self.quad[(i, i)];
                    ((z[i] / step - self.lin[i]) / (2.0 * q + 1.0 / step)).clamp(self.cons.lo[i], self.cons.hi[i])
                })
                .collect());
        }
        let mut quad = self.quad.clone();
        for i in 0..d {
            quad[(i, i)] += 0.5 / step;
        }
        let lin = &self.lin - DVector::from_column_slice(z) / step;
        match minimize(&quad, &lin, &self.cons, 0.0)? {
            Minimized::Optimal { z, .. } => Ok(z.iter().copied().collect()),
            _ => Err(ConvexError::Solver("prox subproblem failed".into())),
        }
    }

    /// `x ↦ f(Mx + b)`.
    pub fn precompose(&self, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<StructuredConvex, ConvexError> {
        if m.nrows() != self.dim() || b.len() != self.dim() {
            return Err(ConvexError::Dimension("precomposition map does not match the input dimension".into()));
        }
        let quad = crate::linalg::symmetrize(&(m.transpose() * &self.quad * m));
        let lin = m.transpose() * (&self.quad * b * 2.0 + &self.lin);
        let constant = b.dot(&(&self.quad * b)) + self.lin.dot(b) + self.constant;
        let cons = self.cons.precompose(m, b)?;
        Ok(StructuredConvex { quad, lin, constant, cons })
    }

    /// Pointwise sum; errors with `EmptyDomain` when the domains do not meet.
    pub fn sum(&self, other: &StructuredConvex) -> Result<StructuredConvex, ConvexError> {
        if self.dim() != other.dim() {
            return Err(ConvexError::Dimension("summands have different dimensions".into()));
        }
        self.constrained(&other.cons).map(|f| StructuredConvex {
            quad: &f.quad + &other.quad,
            lin: &f.lin + &other.lin,
            constant: f.constant + other.constant,
            cons: f.cons,
        })
    }

    /// Adds the indicator of `extra`.
    pub fn constrained(&self, extra: &Constraints) -> Result<StructuredConvex, ConvexError> {
        let cons = self.cons.intersect(extra).map_err(|e| match e {
            ConvexError::InconsistentAffine { .. } => ConvexError::EmptyDomain,
            e => e,
        })?;
        if !is_feasible(&cons)? {
            return Err(ConvexError::EmptyDomain);
        }
        Ok(StructuredConvex { quad: self.quad.clone(), lin: self.lin.clone(), constant: self.constant, cons })
    }

    /// Adds `c·z + k`.
    pub fn add_affine(&self, c: &[f64], k: f64) -> StructuredConvex {
        let mut f = self.clone();
        f.lin += DVector::from_column_slice(c);
        f.constant += k;
        f
    }

    /// Sets the coordinates in `fixed` to `values`; the result is a function
    /// of the remaining coordinates (in increasing order). The domain of the
    /// result may be empty; the caller decides how to detect that.
    pub fn restrict(&self, fixed: &[usize], values: &[f64]) -> Result<StructuredConvex, ConvexError> {
        let d = self.dim();
        let mut is_fixed = vec![false; d];
        for &i in fixed {
            if i >= d {
                return Err(ConvexError::Dimension(format!("index {i} out of range")));
            }
            is_fixed[i] = true;
        }
        let free: Vec<usize> = (0..d).filter(|&i| !is_fixed[i]).collect();
        let mut m = DMatrix::zeros(d, free.len());
        for (k, &i) in free.iter().enumerate() {
            m[(i, k)] = 1.0;
        }
        let mut b = DVector::zeros(d);
        for (&i, &v) in fixed.iter().zip(values) {
            b[i] = v;
        }
        self.precompose(&m, &b)
    }

    /// Minimizes out the coordinates not in `kept`, with `kept` fixed at
    /// `point`. Ties are broken by the least Euclidean norm.
    pub fn inf_project(&self, kept: &[usize], point: &[f64]) -> Result<InfProjection, ConvexError> {
        let section = match self.restrict(kept, point) {
            Ok(s) => s,
            Err(ConvexError::EmptyDomain) => return Ok(InfProjection { value: ExtReal::PosInf, minimizer: None, unbounded: false }),
            Err(e) => return Err(e),
        };
        section.minimize_all(true)
    }

    /// `inf f` with a least-norm minimizer.
    pub fn minimize_all(&self, least_norm: bool) -> Result<InfProjection, ConvexError> {
        let d = self.dim();
        if d == 0 {
            return Ok(InfProjection { value: ExtReal::Finite(self.constant), minimizer: Some(vec![]), unbounded: false });
        }
        let (z, value) = match minimize(&self.quad, &self.lin, &self.cons, RELAX)? {
            Minimized::Optimal { z, value, .. } => (z, value),
            Minimized::Infeasible => return Ok(InfProjection { value: ExtReal::PosInf, minimizer: None, unbounded: false }),
            Minimized::Unbounded => return Ok(InfProjection { value: ExtReal::NegInf, minimizer: None, unbounded: true }),
        };
        let mut best = z;
        if least_norm && min_eigenvalue(&self.quad) <= PSD_TOL * self.quad.amax().max(1.0) {
            // The minimizers form {z ∈ C : Qz = Qz*, c·z = c·z*}.
            let mut cons = self.cons.clone();
            let qz = &self.quad * &best;
            let crow = DMatrix::from_row_slice(1, d, self.lin.as_slice());
            cons.eq_a = stack(&stack(&cons.eq_a, &self.quad), &crow);
            cons.eq_b = stack_vec(&stack_vec(&cons.eq_b, &qz), &DVector::from_element(1, self.lin.dot(&best)));
            if let Ok(Minimized::Optimal { z, .. }) = minimize(&(DMatrix::identity(d, d) * 0.5), &DVector::zeros(d), &cons, RELAX) {
                best = z;
            }
        }
        Ok(InfProjection {
            value: ExtReal::Finite(value + self.constant),
            minimizer: Some(best.iter().copied().collect()),
            unbounded: false,
        })
    }
}

/// `x ↦ inf_h f(x, h)` where `f` is a [`StructuredConvex`] over `(x, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedConvex {
    base: StructuredConvex,
    visible: usize,
}

impl Serialize for LiftedConvex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FunctionRepr::from_parts(&self.base, self.hidden()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for LiftedConvex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = FunctionRepr::deserialize(d)?;
        let (base, hidden) = repr.build().map_err(serde::de::Error::custom)?;
        if hidden > base.dim() {
            return Err(serde::de::Error::custom("more hidden variables than inputs"));
        }
        let visible = base.dim() - hidden;
        LiftedConvex::new(base, visible).map_err(serde::de::Error::custom)
    }
}

impl From<StructuredConvex> for LiftedConvex {
    fn from(base: StructuredConvex) -> Self {
        let visible = base.dim();
        LiftedConvex { base, visible }
    }
}

impl LiftedConvex {
    /// The first `visible` coordinates of `base` are the inputs; the rest
    /// are minimized out. Rejects functions that are −∞.
    pub fn new(base: StructuredConvex, visible: usize) -> Result<Self, ConvexError> {
        if visible > base.dim() {
            return Err(ConvexError::Dimension("visible exceeds the base dimension".into()));
        }
        let f = LiftedConvex { base, visible };
        if f.hidden() > 0 {
            // Unboundedness in h does not depend on x, so one probe decides.
            if let InfProjection { unbounded: true, .. } = f.base.minimize_all(false)? {
                return Err(ConvexError::Improper);
            }
        }
        Ok(f)
    }

    pub(crate) fn from_parts(base: StructuredConvex, visible: usize) -> Self {
        LiftedConvex { base, visible }
    }

    pub fn base(&self) -> &StructuredConvex {
        &self.base
    }

    pub fn visible(&self) -> usize {
        self.visible
    }

    pub fn hidden(&self) -> usize {
        self.base.dim() - self.visible
    }

    pub fn dim(&self) -> usize {
        self.visible
    }

    /// The plain structured function when there are no hidden variables.
    pub fn as_structured(&self) -> Option<&StructuredConvex> {
        (self.hidden() == 0).then_some(&self.base)
    }

    fn visible_idx(&self) -> Vec<usize> {
        (0..self.visible).collect()
    }

    pub fn value(&self, x: &[f64]) -> Result<ExtReal, ConvexError> {
        Ok(self.eval_subgrad(x)?.value)
    }

    /// Value and a subgradient (from the multipliers of the inner problem).
    pub fn eval_subgrad(&self, x: &[f64]) -> Result<Evaluation, ConvexError> {
        if x.len() != self.visible {
            return Err(ConvexError::Dimension(format!("point must have {} coordinates", self.visible)));
        }
        if self.hidden() == 0 {
            return Ok(self.base.eval_subgrad(x));
        }
        let inf = Evaluation { value: ExtReal::PosInf, subgradient: None, active_box: vec![], active_rows: vec![] };
        let cons = &self.base.cons;
        if (0..self.visible).any(|i| x[i] < cons.lo[i] - FEAS_TOL || x[i] > cons.hi[i] + FEAS_TOL) {
            return Ok(inf);
        }
        let section = match self.base.restrict(&self.visible_idx(), x) {
            Ok(s) => s,
            Err(ConvexError::EmptyDomain) => return Ok(inf),
            Err(e) => return Err(e),
        };
        match minimize(&section.quad, &section.lin, &section.cons, RELAX)? {
            Minimized::Infeasible => Ok(inf),
            Minimized::Unbounded => Err(ConvexError::Improper),
            Minimized::Optimal { z: h, value, y_eq, y_in } => {
                let n = self.visible;
                let full = DVector::from_iterator(self.base.dim(), x.iter().copied().chain(h.iter().copied()));
                let grad = &self.base.quad * &full * 2.0 + &self.base.lin;
                let mut g: DVector<f64> = grad.rows(0, n).into_owned();
                if cons.eq_a.nrows() > 0 {
                    g += cons.eq_a.columns(0, n).transpose() * &y_eq;
                }
                if cons.in_a.nrows() > 0 {
                    g += cons.in_a.columns(0, n).transpose() * &y_in;
                }
                let active_box = (0..n)
                    .filter(|&i| (x[i] - cons.lo[i]).abs() <= FEAS_TOL || (x[i] - cons.hi[i]).abs() <= FEAS_TOL)
                    .collect();
                Ok(Evaluation {
                    value: ExtReal::Finite(value + section.constant),
                    subgradient: Some(g.iter().copied().collect()),
                    active_box,
                    active_rows: vec![],
                })
            }
        }
    }

    /// Least-norm minimizer over the hidden variables at `x`.
    pub fn hidden_minimizer(&self, x: &[f64]) -> Result<InfProjection, ConvexError> {
        self.base.inf_project(&self.visible_idx(), x)
    }

    /// `F*(y) = f*(y, 0)`.
    pub fn conjugate(&self, y: &[f64]) -> Result<ConjValue, ConvexError> {
        if y.len() != self.visible {
            return Err(ConvexError::Dimension(format!("point must have {} coordinates", self.visible)));
        }
        let mut w = y.to_vec();
        w.resize(self.base.dim(), 0.0);
        let mut c = self.base.conjugate(&w)?;
        if let Some(z) = c.maximizer.as_mut() {
            z.truncate(self.visible);
        }
        Ok(c)
    }

    /// The conjugate as a lifted function (hidden variables are the
    /// constraint multipliers of the base).
    pub fn conjugate_fn(&self) -> Result<LiftedConvex, ConvexError> {
        let f = &self.base;
        let d = f.dim();
        let nv = self.visible;
        let cons = &f.cons;
        // multiplier columns D and their objective coefficients b
        let mut cols: Vec<DVector<f64>> = Vec::new();
        let mut coef: Vec<f64> = Vec::new();
        let mut free: Vec<bool> = Vec::new();
        for i in 0..d {
            let e = DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
            let (lo, hi) = (cons.lo[i], cons.hi[i]);
            if lo.is_finite() && lo == hi {
                cols.push(e);
                coef.push(-lo);
                free.push(true);
                continue;
            }
            if lo.is_finite() {
                cols.push(e.clone());
                coef.push(-lo);
                free.push(false);
            }
            if hi.is_finite() {
                cols.push(-e);
                coef.push(hi);
                free.push(false);
            }
        }
        for r in 0..cons.eq_a.nrows() {
            cols.push(-cons.eq_a.row(r).transpose());
            coef.push(cons.eq_b[r]);
            free.push(true);
        }
        for r in 0..cons.in_a.nrows() {
            cols.push(-cons.in_a.row(r).transpose());
            coef.push(cons.in_b[r]);
            free.push(false);
        }
        let nm = cols.len();
        let dim = nv + nm;
        // r = J u − c with u = (y, m)
        let mut j = DMatrix::zeros(d, dim);
        for i in 0..nv {
            j[(i, i)] = 1.0;
        }
        for (k, col) in cols.iter().enumerate() {
            j.set_column(nv + k, col);
        }
        let (pinv, null) = psd_pinv_and_null(&f.quad);
        let quad = crate::linalg::symmetrize(&(j.transpose() * &pinv * &j * 0.25));
        let mut lin = j.transpose() * (&pinv * &f.lin) * (-0.5);
        for k in 0..nm {
            lin[nv + k] += coef[k];
        }
        let constant = 0.25 * f.lin.dot(&(&pinv * &f.lin)) - f.constant;
        let mut out = Constraints::unconstrained(dim);
        for k in 0..nm {
            if !free[k] {
                out.lo[nv + k] = 0.0;
            }
        }
        if null.ncols() > 0 {
            let nt = null.transpose();
            let a = &nt * &j;
            let b = &nt * &f.lin;
            // drop identically-zero rows, which must then read 0 = 0
            let mut keep = Vec::new();
            for r in 0..a.nrows() {
                if a.row(r).amax() > 1e-12 {
                    keep.push(r);
                } else if b[r].abs() > 1e-9 * (1.0 + f.lin.amax()) {
                    return Err(ConvexError::Improper);
                }
            }
            out.eq_a = DMatrix::from_fn(keep.len(), dim, |r, c| a[(keep[r], c)]);
            out.eq_b = DVector::from_fn(keep.len(), |r, _| b[keep[r]]);
            if out.eq_a.nrows() > 0 {
                let (_, res, _) = lstsq_min_norm(&out.eq_a, &out.eq_b);
                if res > AFFINE_TOL * (1.0 + out.eq_b.amax()) {
                    return Err(ConvexError::Improper);
                }
            }
        }
        Ok(LiftedConvex::from_parts(StructuredConvex::from_parts(quad, lin, constant, out), nv))
    }

    /// `x ↦ F(Mx + b)`.
    pub fn precompose(&self, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<LiftedConvex, ConvexError> {
        let (nh, k) = (self.hidden(), m.ncols());
        let mut big = DMatrix::zeros(self.base.dim(), k + nh);
        big.view_mut((0, 0), m.shape()).copy_from(m);
        for i in 0..nh {
            big[(self.visible + i, k + i)] = 1.0;
        }
        let mut bb = DVector::zeros(self.base.dim());
        bb.rows_mut(0, self.visible).copy_from(b);
        Ok(LiftedConvex::from_parts(self.base.precompose(&big, &bb)?, k))
    }

    /// Reorders (and possibly sign-flips) inputs: `x ↦ F(Px)` for a permutation `perm`
    /// where input `i` of `F` reads `x[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<LiftedConvex, ConvexError> {
        let n = self.visible;
        let mut m = DMatrix::zeros(n, n);
        for (i, &p) in perm.iter().enumerate() {
            m[(i, p)] = 1.0;
        }
        self.precompose(&m, &DVector::zeros(n))
    }

    /// Adds `c·x + k` on the visible inputs.
    pub fn add_affine(&self, c: &[f64], k: f64) -> LiftedConvex {
        let mut full = c.to_vec();
        full.resize(self.base.dim(), 0.0);
        LiftedConvex::from_parts(self.base.add_affine(&full, k), self.visible)
    }

    /// Fixes visible coordinates `fixed` at `values`; the rest stay visible.
    /// Returns `None` when the section is empty.
    pub fn section(&self, fixed: &[usize], values: &[f64]) -> Result<Option<LiftedConvex>, ConvexError> {
        let f = match self.base.restrict(fixed, values) {
            Ok(f) => f,
            Err(ConvexError::EmptyDomain) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !is_feasible_relaxed(&f.cons)? {
            return Ok(None);
        }
        Ok(Some(LiftedConvex::from_parts(f, self.visible - fixed.len())))
    }

    /// Moves visible coordinates `idx` to the hidden block.
    pub fn hide(&self, idx: &[usize]) -> Result<LiftedConvex, ConvexError> {
        let d = self.base.dim();
        let mut order: Vec<usize> = (0..self.visible).filter(|i| !idx.contains(i)).collect();
        let nv = order.len();
        order.extend(idx.iter().copied());
        order.extend(self.visible..d);
        let mut m = DMatrix::zeros(d, d);
        for (k, &i) in order.iter().enumerate() {
            m[(i, k)] = 1.0;
        }
        let base = self.base.precompose(&m, &DVector::zeros(d))?;
        LiftedConvex::new(base, nv)
    }

    /// Prox on the visible inputs.
    pub fn prox(&self, z: &[f64], step: f64) -> Result<Vec<f64>, ConvexError> {
        if self.hidden() == 0 {
            return self.base.prox(z, step);
        }
        if !(step > 0.0) {
            return Err(ConvexError::BadStep);
        }
        let mut quad = self.base.quad.clone();
        let mut lin = self.base.lin.clone();
        for i in 0..self.visible {
            quad[(i, i)] += 0.5 / step;
            lin[i] -= z[i] / step;
        }
        match minimize(&quad, &lin, &self.base.cons, 0.0)? {
            Minimized::Optimal { z, .. } => Ok(z.iter().take(self.visible).copied().collect()),
            _ => Err(ConvexError::Solver("prox subproblem failed".into())),
        }
    }

    /// `F(z) + F*(y) − z·y`.
    pub fn fy_residual(&self, z: &[f64], y: &[f64]) -> Result<f64, ConvexError> {
        let fz = self.value(z)?.finite().ok_or(ConvexError::InfiniteAtPoint)?;
        match self.conjugate(y)?.value {
            ExtReal::Finite(c) => Ok(fz + c - crate::linalg::dot(z, y)),
            _ => Ok(f64::INFINITY),
        }
    }
}

fn is_feasible_relaxed(cons: &Constraints) -> Result<bool, ConvexError> {
    if !cons.has_rows() {
        return Ok(true);
    }
    let d = cons.dim();
    Ok(!matches!(minimize(&DMatrix::zeros(d, d), &DVector::zeros(d), cons, RELAX)?, Minimized::Infeasible))
}

pub fn eval_subgrad(f: &StructuredConvex, z: &[f64]) -> Evaluation {
    f.eval_subgrad(z)
}

pub fn conjugate(f: &StructuredConvex, y: &[f64]) -> Result<ConjValue, ConvexError> {
    f.conjugate(y)
}

pub fn prox(f: &StructuredConvex, z: &[f64], step: f64) -> Result<Vec<f64>, ConvexError> {
    f.prox(z, step)
}

pub fn inf_project(f: &StructuredConvex, kept: &[usize], point: &[f64]) -> Result<InfProjection, ConvexError> {
    f.inf_project(kept, point)
}

/// `f(z) + f*(y) − z·y`; nonnegative, and zero exactly when `y ∈ ∂f(z)`.
pub fn fy_residual(f: &LiftedConvex, z: &[f64], y: &[f64]) -> Result<f64, ConvexError> {
    f.fy_residual(z, y)
}

/// Membership test for the concave-convex subdifferential of a saddle
/// function `h(x, p)` at `(x, p)`.
///
/// `convex_in_p` is `p ↦ h(x, p)` and `convex_in_x` is `x ↦ −h(x, p)`. The
/// candidate `(a, b)` is claimed to lie in `∂h(x, p) = [−∂(−h(·, p))(x)] × ∂h(x, ·)(p)`.
/// Returns the Fenchel–Young residuals `(p-part at (p, b), x-part at (x, −a))`.
pub fn saddle_subgrad_check(
    convex_in_p: &LiftedConvex,
    convex_in_x: &LiftedConvex,
    x: &[f64],
    p: &[f64],
    candidate: (&[f64], &[f64]),
) -> Result<(f64, f64), ConvexError> {
    let (a, b) = candidate;
    let rp = convex_in_p.fy_residual(p, b)?;
    let neg_a: Vec<f64> = a.iter().map(|v| -v).collect();
    let rx = convex_in_x.fy_residual(x, &neg_a)?;
    Ok((rp, rx))
}

/// Smallest eigenvalue of the quadratic part (diagnostics).
pub fn curvature(f: &StructuredConvex) -> f64 {
    if f.dim() == 0 {
        return f64::INFINITY;
    }
    spectrum(&f.quad).values[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    fn sq() -> StructuredConvex {
        StructuredConvex::quadratic(DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    fn unit_box() -> StructuredConvex {
        StructuredConvex::indicator(1, &SetDescriptor::cube(1, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn eval_examples() {
        let e = sq().eval_subgrad(&[3.0]);
        assert_eq!(e.value, ExtReal::Finite(9.0));
        assert_eq!(e.subgradient, Some(vec![6.0]));
        let e = unit_box().eval_subgrad(&[0.0]);
        assert_eq!(e.value, ExtReal::Finite(0.0));
        assert_eq!(e.subgradient, Some(vec![0.0]));
        assert!(e.active_box.is_empty());
        let e = unit_box().eval_subgrad(&[2.0]);
        assert_eq!(e.value, ExtReal::PosInf);
        assert!(e.subgradient.is_none());
    }

    #[test]
    fn conjugate_examples() {
        assert!((sq().conjugate(&[2.0]).unwrap().value.to_f64() - 1.0).abs() < 1e-14);
        assert!((unit_box().conjugate(&[-3.0]).unwrap().value.to_f64() - 3.0).abs() < 1e-14);
        let half = StructuredConvex::diag_box(&[1.0], &[0.0], 0.0, &[0.0], &[INF]).unwrap();
        assert_eq!(half.conjugate(&[-5.0]).unwrap().value, ExtReal::Finite(0.0));
        assert!((half.conjugate(&[3.0]).unwrap().value.to_f64() - 2.25).abs() < 1e-14);
    }

    #[test]
    fn conjugate_unbounded_is_flagged() {
        let lin = StructuredConvex::new(DMatrix::zeros(1, 1), DVector::from_element(1, 1.0), 0.0, &SetDescriptor::All).unwrap();
        let c = lin.conjugate(&[2.0]).unwrap();
        assert!(c.unbounded);
        assert_eq!(c.value, ExtReal::PosInf);
        assert_eq!(lin.conjugate(&[1.0]).unwrap().value, ExtReal::Finite(0.0));
    }

    #[test]
    fn conjugate_through_qp_matches_closed_form() {
        // non-diagonal quadratic plus a box, checked against a brute-force scan
        let f = StructuredConvex::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_column_slice(&[0.3, -0.2]),
            0.1,
            &SetDescriptor::cube(2, -1.0, 1.0),
        )
        .unwrap();
        let y = [1.5, -0.7];
        let c = f.conjugate(&y).unwrap().value.to_f64();
        let mut best = f64::NEG_INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let z = [-1.0 + 2.0 * i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64];
                let v = y[0] * z[0] + y[1] * z[1] - f.value(&z).to_f64();
                best = best.max(v);
            }
        }
        assert!(c >= best - 1e-12 && c - best < 1e-3, "{c} vs {best}");
    }

    #[test]
    fn prox_examples() {
        assert!((sq().prox(&[3.0], 1.0).unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(unit_box().prox(&[5.0], 0.7).unwrap(), vec![1.0]);
        assert_eq!(StructuredConvex::zero(2).prox(&[1.5, -2.0], 3.0).unwrap(), vec![1.5, -2.0]);
        assert_eq!(sq().prox(&[1.0], 0.0), Err(ConvexError::BadStep));
    }

    fn dynamics_phi(u_box: Option<(f64, f64)>) -> StructuredConvex {
        // Φ(x, v, u) = u² + δ{v = x + u} (+ δ_[lo,hi](u))
        let mut sets = vec![SetDescriptor::Affine { a: vec![vec![1.0, -1.0, 1.0]], b: vec![0.0] }];
        if let Some((lo, hi)) = u_box {
            sets.push(SetDescriptor::boxed(vec![-INF, -INF, lo], vec![INF, INF, hi]));
        }
        StructuredConvex::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 0.0, 1.0])),
            DVector::zeros(3),
            0.0,
            &SetDescriptor::Intersection { sets },
        )
        .unwrap()
    }

    #[test]
    fn inf_project_examples() {
        let r = dynamics_phi(None).inf_project(&[0, 1], &[1.0, 3.0]).unwrap();
        assert!((r.value.to_f64() - 4.0).abs() < 1e-9);
        assert!((r.minimizer.unwrap()[0] - 2.0).abs() < 1e-9);
        let r = dynamics_phi(Some((-1.0, 1.0))).inf_project(&[0, 1], &[0.0, 2.0]).unwrap();
        assert_eq!(r.value, ExtReal::PosInf);
        assert!(r.minimizer.is_none());
        let free_u = StructuredConvex::diag_box(&[0.0, 0.0, 1.0], &[0.0; 3], 0.0, &[-INF; 3], &[INF; 3]).unwrap();
        let r = free_u.inf_project(&[0, 1], &[0.4, -7.0]).unwrap();
        assert!(r.value.to_f64().abs() < 1e-12);
        assert!(r.minimizer.unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn inf_project_least_norm_tie_break() {
        // inf over (a, b) of δ{a + b = x}: every split is optimal, least norm is (x/2, x/2)
        let f = StructuredConvex::indicator(3, &SetDescriptor::Affine { a: vec![vec![-1.0, 1.0, 1.0]], b: vec![0.0] }).unwrap();
        let r = f.inf_project(&[0], &[2.0]).unwrap();
        let m = r.minimizer.unwrap();
        assert!((m[0] - 1.0).abs() < 1e-7 && (m[1] - 1.0).abs() < 1e-7, "{m:?}");
    }

    #[test]
    fn fy_examples() {
        let f = LiftedConvex::from(sq());
        assert!(f.fy_residual(&[1.0], &[2.0]).unwrap().abs() < 1e-14);
        assert!((f.fy_residual(&[1.0], &[0.0]).unwrap() - 1.0).abs() < 1e-14);
        let b = LiftedConvex::from(unit_box());
        assert!(b.fy_residual(&[1.0], &[7.0]).unwrap().abs() < 1e-14);
        assert_eq!(b.fy_residual(&[2.0], &[0.0]), Err(ConvexError::InfiniteAtPoint));
    }

    #[test]
    fn saddle_examples() {
        // h(x, p) = p²/4 − x² at (1, 2)
        let hp = LiftedConvex::from(StructuredConvex::new(DMatrix::from_element(1, 1, 0.25), DVector::zeros(1), -1.0, &SetDescriptor::All).unwrap());
        let hx = LiftedConvex::from(StructuredConvex::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), -1.0, &SetDescriptor::All).unwrap());
        let (a, b) = saddle_subgrad_check(&hp, &hx, &[1.0], &[2.0], (&[-2.0], &[1.0])).unwrap();
        assert!(a.abs() < 1e-14 && b.abs() < 1e-14);
        let (a, b) = saddle_subgrad_check(&hp, &hx, &[1.0], &[2.0], (&[0.0], &[0.0])).unwrap();
        assert!((a - 1.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14);
        // h(x, p) = x·p at (0, 0): p ↦ 0, x ↦ 0
        let zero = LiftedConvex::from(StructuredConvex::zero(1));
        let (a, b) = saddle_subgrad_check(&zero, &zero, &[0.0], &[0.0], (&[0.0], &[0.0])).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn symbolic_conjugate_of_stage_lagrangian() {
        // L(x, v) = v²  ⇒  L*(q, p) = p²/4 + δ{q = 0}
        let l = LiftedConvex::from(StructuredConvex::quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0]))).unwrap());
        let m = l.conjugate_fn().unwrap();
        assert!((m.value(&[0.0, 2.0]).unwrap().to_f64() - 1.0).abs() < 1e-9);
        assert_eq!(m.value(&[0.5, 2.0]).unwrap(), ExtReal::PosInf);
        // the biconjugate recovers L
        let back = m.conjugate_fn().unwrap();
        for (x, v) in [(0.3, -1.2), (2.0, 0.5)] {
            assert!((back.value(&[x, v]).unwrap().to_f64() - v * v).abs() < 1e-7);
        }
    }

    #[test]
    fn symbolic_conjugate_with_box_and_lifting() {
        // F(x) = inf_u { u² : x = u, u ∈ [0, ∞) } = x² on x ≥ 0
        let base = StructuredConvex::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0])),
            DVector::zeros(2),
            0.0,
            &SetDescriptor::Intersection {
                sets: vec![
                    SetDescriptor::Affine { a: vec![vec![1.0, -1.0]], b: vec![0.0] },
                    SetDescriptor::boxed(vec![-INF, 0.0], vec![INF, INF]),
                ],
            },
        )
        .unwrap();
        let f = LiftedConvex::new(base, 1).unwrap();
        assert!((f.value(&[1.5]).unwrap().to_f64() - 2.25).abs() < 1e-8);
        assert_eq!(f.value(&[-1.0]).unwrap(), ExtReal::PosInf);
        let g = f.conjugate_fn().unwrap();
        for y in [-5.0, -0.1, 0.0, 1.0, 3.0] {
            let expect = if y >= 0.0 { y * y / 4.0 } else { 0.0 };
            assert!((g.value(&[y]).unwrap().to_f64() - expect).abs() < 1e-7, "y={y}");
            assert!((f.conjugate(&[y]).unwrap().value.to_f64() - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn lifted_subgradient_from_multipliers() {
        // F(x) = inf_u { u² : u = 2x } = 4x², F'(1) = 8
        let base = StructuredConvex::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0])),
            DVector::zeros(2),
            0.0,
            &SetDescriptor::Affine { a: vec![vec![2.0, -1.0]], b: vec![0.0] },
        )
        .unwrap();
        let f = LiftedConvex::new(base, 1).unwrap();
        let e = f.eval_subgrad(&[1.0]).unwrap();
        assert!((e.value.to_f64() - 4.0).abs() < 1e-8);
        assert!((e.subgradient.unwrap()[0] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn improper_lift_is_rejected() {
        // inf_h h is −∞
        let base = StructuredConvex::new(DMatrix::zeros(2, 2), DVector::from_column_slice(&[0.0, 1.0]), 0.0, &SetDescriptor::All).unwrap();
        assert_eq!(LiftedConvex::new(base, 1), Err(ConvexError::Improper));
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            StructuredConvex::quadratic(DMatrix::from_element(1, 1, -1.0)),
            Err(ConvexError::NotPsd { .. })
        ));
        assert_eq!(StructuredConvex::indicator(1, &SetDescriptor::cube(1, 1.0, 0.0)), Err(ConvexError::BadBox { index: 0 }));
        let bad = SetDescriptor::Affine { a: vec![vec![1.0], vec![1.0]], b: vec![0.0, 1.0] };
        assert!(matches!(StructuredConvex::indicator(1, &bad), Err(ConvexError::InconsistentAffine { .. })));
        let empty = SetDescriptor::Intersection {
            sets: vec![
                SetDescriptor::Polyhedron { a: vec![vec![1.0, 1.0]], b: vec![-1.0] },
                SetDescriptor::cube(2, 0.0, 1.0),
            ],
        };
        assert_eq!(StructuredConvex::indicator(2, &empty), Err(ConvexError::EmptyDomain));
    }

    #[test]
    fn json_round_trip_with_infinite_bounds() {
        let f = StructuredConvex::diag_box(&[1.0, 0.0], &[0.5, 0.0], 2.0, &[0.0, -INF], &[INF, 3.0]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"+inf\"") && s.contains("\"-inf\""));
        let g: StructuredConvex = serde_json::from_str(&s).unwrap();
        assert_eq!(f, g);
    }
}
