use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues of a symmetric matrix, largest first.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Solves `a x = rhs` for symmetric positive (semi-)definite `a`. Cholesky
/// first; falls back to an eigendecomposition pseudo-inverse when the
/// factorization breaks down.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(rhs);
    }
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = max * f64::EPSILON * a.nrows() as f64;
    let proj = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, l)| if l.abs() > cutoff { p / l } else { 0.0 }),
    );
    &eig.eigenvectors * scaled
}

/// `sum_i w_i p_i p_i'` for the given rows.
pub fn weighted_outer_sum<'a, I>(dim: usize, rows: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for (w, p) in rows {
        for a in 0..dim {
            let wa = w * p[a];
            for b in a..dim {
                m[(a, b)] += wa * p[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}
