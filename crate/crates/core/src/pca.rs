//! Principal components: fit (`h`), forward projection (`f`) and inverse
//! reconstruction (`g`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::eigh::fix_sign;
use crate::numerics::{eigh_psd, gemm, Scalar, Tape, Tensor, Trans, Var};

/// Eigenvalues below this are treated as zero-variance directions.
pub const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaComponents {
    pub mean: Vec<f64>,
    /// `d x k`, orthonormal columns.
    pub basis: Tensor<f64>,
}

impl PcaComponents {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.basis.shape()[1]
    }

    /// Column `j` of the basis.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let k = self.k();
        (0..self.dim()).map(|i| self.basis.data()[i * k + j]).collect()
    }

    /// `max |U^T U - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self
            .basis
            .matmul(Trans::Yes, &self.basis, Trans::No)
            .expect("basis is d x k");
        let k = self.k();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.data()[i * k + j] - target).abs());
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.basis.all_finite()
    }
}

fn matrix_dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::contract(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

/// Mean and top-`k` eigenvectors of the unnormalised scatter matrix.
pub fn fit_pca<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<PcaComponents> {
    let (n, d) = matrix_dims(x, "fit_pca")?;
    if n == 0 {
        return Err(Error::contract("fit_pca needs at least one row"));
    }
    if k == 0 || k > d {
        return Err(Error::contract(format!(
            "fit_pca: k = {k} must lie in 1..={d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v.f64() - m))
        .collect();
    let mut scatter = vec![0.0; d * d];
    gemm(d, n, d, &centered, Trans::Yes, &centered, Trans::No, &mut scatter, false);
    let eig = eigh_psd(&Tensor::new(vec![d, d], scatter)?)?;

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        if eig.values[j] < ZERO_VARIANCE {
            break;
        }
        cols.push((0..d).map(|i| eig.vectors.data()[i * d + j]).collect());
    }
    complete_canonical(&mut cols, d, k);
    let mut basis = vec![0.0; d * k];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            basis[i * k + j] = col[i];
        }
    }
    Ok(PcaComponents {
        mean,
        basis: Tensor::new(vec![d, k], basis)?,
    })
}

/// Extend `cols` to `k` orthonormal columns using canonical vectors.
fn complete_canonical(cols: &mut Vec<Vec<f64>>, d: usize, k: usize) {
    let mut e = 0;
    while cols.len() < k && e < d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        e += 1;
        for c in cols.iter() {
            let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.5 {
            v.iter_mut().for_each(|a| *a /= norm);
            fix_sign(&mut v);
            cols.push(v);
        }
    }
}

/// `(X - mu) U`
pub fn forward_pca<T: Scalar>(x: &Tensor<T>, comp: &PcaComponents) -> Result<Tensor<T>> {
    let (_, d) = matrix_dims(x, "forward_pca")?;
    if d != comp.dim() {
        return Err(Error::contract(format!(
            "forward_pca: data has {d} columns, components expect {}",
            comp.dim()
        )));
    }
    let mu: Vec<T> = comp.mean.iter().map(|&m| T::of(m)).collect();
    let centered = Tensor::new(
        x.shape().to_vec(),
        x.data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mu).map(|(&v, &m)| v - m))
            .collect(),
    )?;
    centered.matmul(Trans::No, &comp.basis.cast(), Trans::No)
}

/// `Y U^T + mu`
pub fn inverse_pca<T: Scalar>(coeffs: &Tensor<T>, comp: &PcaComponents) -> Result<Tensor<T>> {
    let (_, k) = matrix_dims(coeffs, "inverse_pca")?;
    if k != comp.k() {
        return Err(Error::contract(format!(
            "inverse_pca: {k} coefficients per row, components hold {}",
            comp.k()
        )));
    }
    let mut out = coeffs.matmul(Trans::No, &comp.basis.cast(), Trans::Yes)?;
    let d = comp.dim();
    for row in out.data_mut().chunks_mut(d) {
        for (v, &m) in row.iter_mut().zip(&comp.mean) {
            *v += T::of(m);
        }
    }
    Ok(out)
}

/// Constant (non-differentiated) leaves holding `mu` and `U` on a tape.
pub struct PcaLeaves {
    pub mean: Var,
    pub basis: Var,
}

impl PcaLeaves {
    pub fn push<T: Scalar>(tape: &mut Tape<T>, comp: &PcaComponents) -> Result<Self> {
        let mean = Tensor::new(
            vec![comp.dim()],
            comp.mean.iter().map(|&m| T::of(m)).collect(),
        )?;
        Ok(PcaLeaves {
            mean: tape.leaf(mean, false),
            basis: tape.leaf(comp.basis.cast(), false),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.sub_row(x, self.mean)?;
        tape.matmul(c, self.basis, Trans::No)
    }

    pub fn inverse<T: Scalar>(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        let r = tape.matmul(y, self.basis, Trans::Yes)?;
        tape.add_row(r, self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[r, c], v).unwrap()
    }

    #[test]
    fn axis_aligned() {
        let p = fit_pca(&m(2, 2, &[1.0, 0.0, -1.0, 0.0]), 1).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert_eq!(p.basis.data(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_rows_fall_back_to_canonical() {
        let x = m(3, 3, &[0.2, 0.7, 0.1, 0.2, 0.7, 0.1, 0.2, 0.7, 0.1]);
        let p = fit_pca(&x, 2).unwrap();
        for (m, c) in p.mean.iter().zip([0.2, 0.7, 0.1]) {
            assert!((m - c).abs() < 1e-15);
        }
        assert_eq!(p.basis.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn partial_rank_is_completed_orthonormally() {
        // rank-1 scatter in 3-d; two more columns come from completion
        let x = m(2, 3, &[1.0, 1.0, 0.0, -1.0, -1.0, 0.0]);
        let p = fit_pca(&x, 3).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.column(0)[0] - h).abs() < 1e-12);
    }

    #[test]
    fn contract_errors() {
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(fit_pca(&x, 3), Err(Error::Contract(_))));
        let p = fit_pca(&x, 1).unwrap();
        assert!(matches!(
            forward_pca(&m(1, 3, &[0.0; 3]), &p),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            inverse_pca(&m(1, 2, &[0.0; 2]), &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mean_maps_to_origin_and_back() {
        let x = m(3, 2, &[1.0, 2.0, 3.0, 1.0, 0.5, 0.5]);
        let p = fit_pca(&x, 2).unwrap();
        let mu = m(1, 2, &p.mean);
        let y = forward_pca(&mu, &p).unwrap();
        assert!(y.max_abs() < 1e-15);
        let back = inverse_pca(&Tensor::<f64>::zeros(&[2, 2]), &p).unwrap();
        for row in back.data().chunks(2) {
            assert_eq!(row, &p.mean[..]);
        }
        let along: Vec<f64> = p.mean.iter().zip(p.column(0)).map(|(a, u)| a + 2.0 * u).collect();
        let y = forward_pca(&m(1, 2, &along), &p).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
    }
}
