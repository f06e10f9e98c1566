//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff used for ranks, pseudo-inverses and null spaces.
pub const EIG_REL_TOL: f64 = 1e-12;

pub fn mat_from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Spectral data of a symmetric matrix, sorted ascending.
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn spectrum(m: &DMatrix<f64>) -> Spectrum {
    let n = m.nrows();
    if n == 0 {
        return Spectrum { values: vec![], vectors: DMatrix::zeros(0, 0) };
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Spectrum { values, vectors }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    spectrum(m).values.first().copied().unwrap_or(f64::INFINITY)
}

fn cutoff(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    EIG_REL_TOL * scale.max(1.0)
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix and an orthonormal
/// basis (columns) of its null space.
pub fn psd_pinv_and_null(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sp = spectrum(m);
    let tol = cutoff(&sp.values);
    let mut pinv = DMatrix::zeros(n, n);
    let mut null_cols = Vec::new();
    for (k, &lam) in sp.values.iter().enumerate() {
        let v = sp.vectors.column(k);
        if lam > tol {
            pinv += (v * v.transpose()) / lam;
        } else {
            null_cols.push(v.into_owned());
        }
    }
    let null = if null_cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&null_cols) };
    (pinv, null)
}

/// Least-norm least-squares solution of `a x = b` with its residual norm and rank.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = 1e-11 * smax.max(1e-300) * (a.nrows().max(a.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd.solve(b, tol).expect("svd computed with u and v");
    let r = (a * &x - b).norm();
    (x, r, rank)
}
