//! Symmetric eigendecomposition with a deterministic sign convention.

use nalgebra::{DMatrix, SymmetricEigen};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const PSD_SLACK: f64 = 1e-8;
const MAX_SWEEPS: usize = 10_000;

/// Eigenvalues in descending order; `vectors` holds one eigenvector per column.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// `d x d`, row-major.
    pub vectors: Tensor<f64>,
}

fn square(c: &Tensor<impl Scalar>) -> Result<usize> {
    match c.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::shape(format!("eigh needs a square matrix, got {s:?}"))),
    }
}

/// Flip `col` so its largest-magnitude entry is non-negative (first wins ties).
pub fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}

pub fn eigh_psd<T: Scalar>(c: &Tensor<T>) -> Result<Eigen> {
    let d = square(c)?;
    c.check_finite("eigh input")?;
    let scale = c.max_abs().f64().max(1.0);
    for i in 0..d {
        for j in (i + 1)..d {
            let (a, b) = (c.data()[i * d + j].f64(), c.data()[j * d + i].f64());
            if (a - b).abs() > SYMMETRY_TOL * scale {
                return Err(Error::contract(format!(
                    "matrix is not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
        }
    }
    let m = DMatrix::from_fn(d, d, |i, j| {
        0.5 * (c.data()[i * d + j].f64() + c.data()[j * d + i].f64())
    });
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, MAX_SWEEPS)
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let lowest = eig.eigenvalues[order[d - 1]];
    if lowest < -PSD_SLACK * scale {
        return Err(Error::contract(format!(
            "matrix is not positive semidefinite (eigenvalue {lowest})"
        )));
    }
    let mut vectors = vec![0.0; d * d];
    let mut values = Vec::with_capacity(d);
    for (k, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        fix_sign(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            vectors[i * d + k] = v;
        }
        values.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(Eigen {
        values,
        vectors: Tensor::new(vec![d, d], vectors)?,
    })
}

/// QR-based orthonormalization of the columns of a row-major `rows x cols`
/// matrix. Each output column keeps a non-negative dot product with its
/// input column, so a nearly orthonormal basis moves only slightly.
pub fn orthonormalize_columns(rows: usize, cols: usize, a: &[f64]) -> Result<Vec<f64>> {
    if cols > rows || a.len() != rows * cols {
        return Err(Error::shape(format!(
            "cannot orthonormalize {cols} columns of length {rows}"
        )));
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| a[i * cols + j]);
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = vec![0.0; rows * cols];
    for j in 0..cols {
        if r[(j, j)].abs() < 1e-12 {
            return Err(Error::numeric("rank-deficient basis during re-orthonormalization"));
        }
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            out[i * cols + j] = s * q[(i, j)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[d, d], v).unwrap()
    }

    #[test]
    fn diagonal() {
        let e = eigh_psd(&m(2, &[2.0, 0.0, 0.0, 5.0])).unwrap();
        assert_eq!(e.values, vec![5.0, 2.0]);
        assert_eq!(e.vectors.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two() {
        let e = eigh_psd(&m(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = e.vectors.data();
        assert!((u[0] - h).abs() < 1e-12 && (u[2] - h).abs() < 1e-12);
        // second column is +-(1,-1)/sqrt2; the first entry wins the tie
        assert!((u[1] - h).abs() < 1e-12 && (u[3] + h).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_is_rejected() {
        assert!(matches!(
            eigh_psd(&m(2, &[1.0, 0.5, 0.0, 1.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn indefinite_is_rejected() {
        assert!(matches!(
            eigh_psd(&m(2, &[0.0, 1.0, 1.0, 0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn qr_keeps_orientation() {
        let a = [1.0, 0.1, 0.0, -1.0, 0.0, 0.0];
        let q = orthonormalize_columns(3, 2, &a).unwrap();
        assert!(q[0] > 0.9 && q[3] < -0.9);
    }
}
