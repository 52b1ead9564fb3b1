//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Minimum-norm least squares via SVD. Tolerates rank deficiency.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = x.ncols();
    if p == 0 {
        return DVector::zeros(0);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * (x.nrows().max(p) as f64);
    svd.solve(y, eps).unwrap_or_else(|_| DVector::zeros(p))
}

/// Outcome of factoring a Gram matrix `XᵀX` with a symmetric eigendecomposition.
pub struct GramFactor {
    pub inverse: DMatrix<f64>,
}

/// Rank-revealing factorization of `XᵀX`. Columns are scaled to unit
/// diagonal first so the rank decision does not depend on units.
///
/// On rank deficiency returns the indices of columns that load on the
/// numerical null space.
pub fn factor_gram(gram: &DMatrix<f64>, rel_tol: f64) -> Result<GramFactor, Vec<usize>> {
    let p = gram.nrows();
    let scale: Vec<f64> = (0..p)
        .map(|i| {
            let d = gram[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let zero_cols: Vec<usize> = (0..p).filter(|&i| scale[i] == 0.0).collect();
    if !zero_cols.is_empty() {
        return Err(zero_cols);
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let threshold = lmax * rel_tol;
    let mut dependent = Vec::new();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= threshold {
            let v = eig.eigenvectors.column(k);
            for i in 0..p {
                if v[i].abs() > 1e-6 && !dependent.contains(&i) {
                    dependent.push(i);
                }
            }
        }
    }
    if !dependent.is_empty() {
        dependent.sort_unstable();
        return Err(dependent);
    }
    let mut inv_scaled = DMatrix::zeros(p, p);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        inv_scaled += (v * v.transpose()) / l;
    }
    let inverse = DMatrix::from_fn(p, p, |i, j| inv_scaled[(i, j)] * scale[i] * scale[j]);
    Ok(GramFactor { inverse })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divisor n).
pub fn pop_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_detects_duplicate_columns() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 1., 1., 2., 2., 1., 3., 3., 1., 5., 5.]);
        let g = x.transpose() * &x;
        let dep = factor_gram(&g, 1e-12).err().unwrap();
        assert_eq!(dep, vec![1, 2]);
    }

    #[test]
    fn least_squares_exact_line() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 1., 1., 2., 1., 4.]);
        let y = DVector::from_vec(vec![2., 4., 8.]);
        let b = least_squares(&x, &y);
        assert!((b[0]).abs() < 1e-10 && (b[1] - 2.0).abs() < 1e-10);
    }
}
