//! Two-dimensional principal-component projection of exported vectors.

use crate::error::{bail, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `samples x 2`.
    pub coords: Matrix,
    /// `2 x features`, rows are unit principal directions.
    pub components: Matrix,
    pub mean: Matrix,
}

/// Projects the rows of `data` onto their two leading principal directions.
/// Each direction's sign is fixed so that its largest-magnitude entry is positive.
pub fn pca2d(data: &Matrix) -> Result<Projection> {
    let (n, d) = data.shape();
    if n < 3 {
        bail!(Validation, "projection needs at least 3 samples, got {n}");
    }
    if d == 0 || !data.is_finite() {
        bail!(Validation, "projection needs finite vectors of positive width");
    }
    let mean = data.col_sums().scale(1.0 / n as f64);
    let centered = Matrix::from_vec(n, d, (0..n * d).map(|i| data.data()[i] - mean.data()[i % d]).collect());
    let cov = centered.transpose().matmul(&centered).scale(1.0 / (n - 1) as f64);
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: alloc::vec::Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Matrix::zeros(2, d);
    for (k, &idx) in order.iter().take(2).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut lead = 0;
        for i in 0..d {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components.set(k, i, sign * col[i]);
        }
    }
    let coords = centered.matmul(&components.transpose());
    Ok(Projection { coords, components, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_data_keeps_distances() {
        // points on the plane spanned by two orthonormal vectors in R^4, offset from the origin
        let e1 = [0.5, 0.5, 0.5, 0.5];
        let e2 = [0.5, -0.5, 0.5, -0.5];
        let pts: [(f64, f64); 6] = [(0.0, 0.0), (1.0, 2.0), (-1.5, 0.3), (2.2, -1.0), (0.4, 0.9), (-0.7, -2.1)];
        let rows: alloc::vec::Vec<[f64; 4]> =
            pts.iter().map(|(a, b)| core::array::from_fn(|i| 3.0 + a * e1[i] + b * e2[i])).collect();
        let data = Matrix::from_rows(&rows);
        let p = pca2d(&data).unwrap();
        assert_eq!(p.coords.rows(), 6);
        for i in 0..6 {
            for j in 0..6 {
                let d_in: f64 = data.row(i).iter().zip(data.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                let d_out: f64 = p.coords.row(i).iter().zip(p.coords.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!((libm::sqrt(d_in) - libm::sqrt(d_out)).abs() < 1e-6);
            }
        }
        let m = p.coords.col_sums();
        assert!(m.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn too_few_samples() {
        assert!(pca2d(&Matrix::zeros(2, 3)).is_err());
    }
}
