//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Complex, DMatrix};

pub type Mat = DMatrix<f64>;

/// Returns `(m + m') / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= tol * scale
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn is_spd(m: &Mat) -> bool {
    is_symmetric(m, 1e-10) && m.nrows() > 0 && min_sym_eigenvalue(m) > 0.0
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Numerical rank of a complex matrix: singular values above
/// `rel_tol * sigma_max` are counted.
pub fn complex_rank(m: &DMatrix<Complex<f64>>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Builds an `n x n` matrix from row-major nested vectors.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn scalar(x: f64) -> Mat {
    Mat::from_element(1, 1, x)
}

/// Row-major entries, the order used in CSV exports.
pub fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_rank_deficient_complex_matrix() {
        let m = DMatrix::from_row_slice(
            3,
            2,
            &[
                Complex::new(1.0, 0.0),
                Complex::new(2.0, 0.0),
                Complex::new(2.0, 0.0),
                Complex::new(4.0, 0.0),
                Complex::new(0.0, 0.0),
                Complex::new(0.0, 0.0),
            ],
        );
        assert_eq!(complex_rank(&m, 1e-10), 1);
    }

    #[test]
    fn spd_detection() {
        assert!(is_spd(&Mat::identity(2, 2)));
        assert!(!is_spd(&Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])));
        assert!(!is_spd(&Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])));
    }

    #[test]
    fn rows_roundtrip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_rows(&to_rows(&m)).unwrap(), m);
        assert_eq!(row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_none());
    }
}
