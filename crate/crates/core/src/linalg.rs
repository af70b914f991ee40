//! Small dense solves backed by nalgebra.

use nalgebra::DMatrix;

use crate::tensor::FactorMatrix;

/// Pivots below this fraction of the largest pivot count as zero.
const SINGULAR_RATIO: f64 = 1e-13;

fn to_na(m: &FactorMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> FactorMatrix {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    FactorMatrix::from_parts(m.nrows(), m.ncols(), data)
}

/// Solves `X (gram + ridge I) = rhs` for `X` with a fully pivoted LU of the
/// symmetric Gram matrix. Returns `None` when the system is singular: any
/// relatively tiny pivot without a ridge, an exactly zero pivot with one.
pub(crate) fn solve_gram_right(
    rhs: &FactorMatrix,
    gram: &FactorMatrix,
    ridge: f64,
) -> Option<FactorMatrix> {
    let k = gram.rows();
    let mut g = to_na(gram);
    for i in 0..k {
        g[(i, i)] += ridge;
    }
    let lu = g.full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..k).map(|i| u[(i, i)].abs()).collect();
    let largest = pivots.iter().cloned().fold(0.0, f64::max);
    let threshold = if ridge == 0.0 {
        SINGULAR_RATIO * largest
    } else {
        0.0
    };
    if largest == 0.0 || pivots.iter().any(|&p| p <= threshold) {
        return None;
    }
    // gram is symmetric, so X^T = (gram + ridge I)^{-1} rhs^T.
    let sol = lu.solve(&to_na(rhs).transpose())?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(from_na(&sol.transpose()))
}

/// Thin QR of a tall matrix: `a = q r` with `q` having orthonormal columns.
pub(crate) fn thin_qr(a: &FactorMatrix) -> (FactorMatrix, FactorMatrix) {
    debug_assert!(a.rows() >= a.cols());
    let qr = to_na(a).qr();
    (from_na(&qr.q()), from_na(&qr.r()))
}

/// The `count` leading eigenvectors (as columns) of a symmetric matrix,
/// ordered by decreasing eigenvalue.
pub(crate) fn leading_eigvecs(sym: &FactorMatrix, count: usize) -> FactorMatrix {
    let eig = to_na(sym).symmetric_eigen();
    let mut order: Vec<usize> = (0..sym.rows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let n = sym.rows();
    let mut data = Vec::with_capacity(n * count);
    for i in 0..n {
        for &j in &order[..count] {
            data.push(eig.eigenvectors[(i, j)]);
        }
    }
    FactorMatrix::from_parts(n, count, data)
}

/// `a a^T` for a row-major matrix.
pub(crate) fn gram_rows(a: &FactorMatrix) -> FactorMatrix {
    let (r, c) = (a.rows(), a.cols());
    let d = a.data();
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        for j in i..r {
            let s: f64 = d[i * c..(i + 1) * c]
                .iter()
                .zip(&d[j * c..(j + 1) * c])
                .map(|(x, y)| x * y)
                .sum();
            out[i * r + j] = s;
            out[j * r + i] = s;
        }
    }
    FactorMatrix::from_parts(r, r, out)
}

/// `a b^T` for row-major matrices with equal column counts.
pub(crate) fn mul_transposed(a: &FactorMatrix, b: &FactorMatrix) -> FactorMatrix {
    debug_assert_eq!(a.cols(), b.cols());
    let c = a.cols();
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.push(
                da[i * c..(i + 1) * c]
                    .iter()
                    .zip(&db[j * c..(j + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum(),
            );
        }
    }
    FactorMatrix::from_parts(a.rows(), b.rows(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let gram = FactorMatrix::from_rows(&[&[2., 1.], &[1., 3.]]).unwrap();
        let x = FactorMatrix::from_rows(&[&[1., -1.], &[0.5, 2.]]).unwrap();
        let rhs = x.matmul(&gram).unwrap();
        let got = solve_gram_right(&rhs, &gram, 0.0).unwrap();
        for (a, b) in got.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn detects_singular() {
        let gram = FactorMatrix::from_rows(&[&[1., 2.], &[2., 4.]]).unwrap();
        let rhs = FactorMatrix::from_rows(&[&[1., 1.]]).unwrap();
        assert!(solve_gram_right(&rhs, &gram, 0.0).is_none());
        assert!(solve_gram_right(&rhs, &gram, 1e-3).is_some());
    }

    #[test]
    fn qr_reconstructs() {
        let a = FactorMatrix::from_rows(&[&[1., 2.], &[3., 4.], &[5., 7.]]).unwrap();
        let (q, r) = thin_qr(&a);
        assert_eq!((q.rows(), q.cols(), r.rows(), r.cols()), (3, 2, 2, 2));
        let back = q.matmul(&r).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let qtq = q.transpose().matmul(&q).unwrap();
        assert!((qtq.get(0, 0) - 1.0).abs() < 1e-12 && qtq.get(0, 1).abs() < 1e-12);
    }
}
