//! Cascade PCA on the latent space: channel-wise (vector) PCA with a single
//! component followed by PCA over the spatial map of the vector coefficients.
//!
//! Latents are `(b*s) x v` matrices whose row `i*s + p` is position `p` of
//! batch item `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{orthonormalize_columns, Scalar, Tape, Tensor, Var};
use crate::pca::{fit_pca, forward_pca, inverse_pca, PcaComponents, PcaLeaves};

pub const DEFAULT_K_S: usize = 8;
pub const DEFAULT_ETA_V: f64 = 0.1;
pub const DEFAULT_ETA_S: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrincipalsConfig {
    pub k_s: usize,
    pub eta_v: f64,
    pub eta_s: f64,
}

impl Default for PrincipalsConfig {
    fn default() -> Self {
        PrincipalsConfig {
            k_s: DEFAULT_K_S,
            eta_v: DEFAULT_ETA_V,
            eta_s: DEFAULT_ETA_S,
        }
    }
}

impl PrincipalsConfig {
    pub fn validate(&self, spatial: usize) -> Result<()> {
        if self.k_s == 0 || self.k_s > spatial {
            return Err(Error::contract(format!(
                "k_s = {} must lie in 1..={spatial}",
                self.k_s
            )));
        }
        for (name, eta) in [("eta_v", self.eta_v), ("eta_s", self.eta_s)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::contract(format!("{name} = {eta} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `{mu_V, U_V}` over `v` channels and `{mu_S, U_S}` over `s` positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalLatentComponents {
    pub vector: PcaComponents,
    pub spatial: PcaComponents,
}

impl PrincipalLatentComponents {
    pub fn channels(&self) -> usize {
        self.vector.dim()
    }

    pub fn positions(&self) -> usize {
        self.spatial.dim()
    }

    pub fn k_s(&self) -> usize {
        self.spatial.k()
    }

    /// Worst deviation from the unit / orthonormal basis invariants.
    pub fn invariant_error(&self) -> f64 {
        self.vector
            .orthonormality_error()
            .max(self.spatial.orthonormality_error())
    }

    pub fn all_finite(&self) -> bool {
        self.vector.all_finite() && self.spatial.all_finite()
    }

    fn check(&self, z: &[usize], b: usize) -> Result<usize> {
        let [rows, v] = z else {
            return Err(Error::contract(format!("latent must be a matrix, got {z:?}")));
        };
        if b == 0 || rows % b != 0 {
            return Err(Error::contract(format!(
                "latent rows {rows} not divisible by batch size {b}"
            )));
        }
        let s = rows / b;
        if *v != self.channels() || s != self.positions() {
            return Err(Error::contract(format!(
                "latent {s} positions x {v} channels does not match components {} x {}",
                self.positions(),
                self.channels()
            )));
        }
        Ok(s)
    }
}

/// `(b*s) x 1` to `s x b`: column `j` is item `j`'s spatial map.
pub fn fold_batch<T: Scalar>(z_v: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let n = z_v.len();
    if z_v.rank() != 2 || z_v.shape()[1] != 1 || b == 0 || !n.is_multiple_of(b) {
        return Err(Error::contract(format!(
            "cannot fold {:?} into batches of {b}",
            z_v.shape()
        )));
    }
    let s = n / b;
    let mut out = vec![T::zero(); n];
    for i in 0..b {
        for p in 0..s {
            out[p * b + i] = z_v.data()[i * s + p];
        }
    }
    Tensor::new(vec![s, b], out)
}

pub fn unfold_batch<T: Scalar>(folded: &Tensor<T>) -> Result<Tensor<T>> {
    let [s, b] = folded.shape() else {
        return Err(Error::contract("unfold expects an s x b matrix"));
    };
    let (s, b) = (*s, *b);
    let mut out = vec![T::zero(); s * b];
    for i in 0..b {
        for p in 0..s {
            out[i * s + p] = folded.data()[p * b + i];
        }
    }
    Tensor::new(vec![s * b, 1], out)
}

/// Vector-PCA coefficients `Z_V`, `(b*s) x 1`.
pub fn vector_coefficients<T: Scalar>(
    z: &Tensor<T>,
    vector: &PcaComponents,
) -> Result<Tensor<T>> {
    forward_pca(z, vector)
}

/// Cascade forward + inverse projection; output has the shape of `z`.
pub fn apply_principals<T: Scalar>(
    z: &Tensor<T>,
    comp: &PrincipalLatentComponents,
    b: usize,
) -> Result<Tensor<T>> {
    let s = comp.check(z.shape(), b)?;
    let z_v = forward_pca(z, &comp.vector)?;
    // rows of Z_V^T are batch items, as in the row layout of Z_V itself
    let maps = z_v.reshape(&[b, s])?;
    let z_s = forward_pca(&maps, &comp.spatial)?;
    let maps_hat = inverse_pca(&z_s, &comp.spatial)?;
    inverse_pca(&maps_hat.reshape(&[b * s, 1])?, &comp.vector)
}

/// Tape version of [`apply_principals`]; components enter as constants.
pub fn apply_principals_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    comp: &PrincipalLatentComponents,
    b: usize,
) -> Result<Var> {
    let s = comp.check(tape.shape(z), b)?;
    let vl = PcaLeaves::push(tape, &comp.vector)?;
    let sl = PcaLeaves::push(tape, &comp.spatial)?;
    let z_v = vl.forward(tape, z)?;
    let maps = tape.reshape(z_v, &[b, s])?;
    let z_s = sl.forward(tape, maps)?;
    let maps_hat = sl.inverse(tape, z_s)?;
    let z_v_hat = tape.reshape(maps_hat, &[b * s, 1])?;
    vl.inverse(tape, z_v_hat)
}

/// `(1 - eta) old + eta new` for mean and sign-aligned basis, followed by
/// re-orthonormalization.
pub fn blend(old: &PcaComponents, new: &PcaComponents, eta: f64) -> Result<PcaComponents> {
    if old.dim() != new.dim() || old.k() != new.k() {
        return Err(Error::contract("blending components of different shapes"));
    }
    if eta == 0.0 {
        return Ok(old.clone());
    }
    if eta == 1.0 {
        return Ok(new.clone());
    }
    let (d, k) = (old.dim(), old.k());
    let mean = old
        .mean
        .iter()
        .zip(&new.mean)
        .map(|(o, n)| (1.0 - eta) * o + eta * n)
        .collect();
    let (ob, nb) = (old.basis.data(), new.basis.data());
    let mut mixed = vec![0.0; d * k];
    for j in 0..k {
        let dot: f64 = (0..d).map(|i| ob[i * k + j] * nb[i * k + j]).sum();
        let flip = if dot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            mixed[i * k + j] = (1.0 - eta) * ob[i * k + j] + eta * flip * nb[i * k + j];
        }
    }
    let basis = orthonormalize_columns(d, k, &mixed)?;
    Ok(PcaComponents {
        mean,
        basis: Tensor::new(vec![d, k], basis)?,
    })
}

/// Batch statistics of the vector stage fitted on the `(b*s) x v` latent.
pub fn fit_vector<T: Scalar>(z: &Tensor<T>) -> Result<PcaComponents> {
    fit_pca(z, 1)
}

/// Batch statistics of the spatial stage fitted on `Z_V^T` (`b x s`).
pub fn fit_spatial<T: Scalar>(z_v: &Tensor<T>, b: usize, k_s: usize) -> Result<PcaComponents> {
    let folded = fold_batch(z_v, b)?;
    let s = folded.shape()[0];
    if k_s > s {
        return Err(Error::contract(format!("k_s = {k_s} exceeds {s} positions")));
    }
    fit_pca(&folded.transpose()?, k_s)
}

/// One EMA step from batch latents `z` and their vector coefficients `z_v`.
/// `comp = None` initializes directly from the batch.
pub fn ema_update<T: Scalar>(
    comp: Option<&PrincipalLatentComponents>,
    z: &Tensor<T>,
    z_v: &Tensor<T>,
    b: usize,
    k_s: usize,
    eta_v: f64,
    eta_s: f64,
) -> Result<PrincipalLatentComponents> {
    let vector = fit_vector(z)?;
    let spatial = fit_spatial(z_v, b, k_s)?;
    match comp {
        None => Ok(PrincipalLatentComponents { vector, spatial }),
        Some(old) => Ok(PrincipalLatentComponents {
            vector: blend(&old.vector, &vector, eta_v)?,
            spatial: blend(&old.spatial, &spatial, eta_s)?,
        }),
    }
}

/// Training-time update: the vector stage is updated first and the spatial
/// statistics are taken from coefficients under the updated vector stage.
pub fn ema_step<T: Scalar>(
    comp: Option<&PrincipalLatentComponents>,
    z: &Tensor<T>,
    b: usize,
    k_s: usize,
    eta_v: f64,
    eta_s: f64,
) -> Result<PrincipalLatentComponents> {
    let fitted = fit_vector(z)?;
    let vector = match comp {
        None => fitted,
        Some(old) => blend(&old.vector, &fitted, eta_v)?,
    };
    let z_v = forward_pca(z, &vector)?;
    let fitted = fit_spatial(&z_v, b, k_s)?;
    let spatial = match comp {
        None => fitted,
        Some(old) => blend(&old.spatial, &fitted, eta_s)?,
    };
    Ok(PrincipalLatentComponents { vector, spatial })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comps(mu_v: &[f64], u_v: &[f64], mu_s: &[f64], u_s: &[f64], k: usize) -> PrincipalLatentComponents {
        PrincipalLatentComponents {
            vector: PcaComponents {
                mean: mu_v.to_vec(),
                basis: Tensor::from_f64(&[mu_v.len(), 1], u_v).unwrap(),
            },
            spatial: PcaComponents {
                mean: mu_s.to_vec(),
                basis: Tensor::from_f64(&[mu_s.len(), k], u_s).unwrap(),
            },
        }
    }

    #[test]
    fn hand_composition() {
        let c = comps(&[0., 0.], &[1., 0.], &[0., 0.], &[1., 0.], 1);
        let z = Tensor::<f64>::from_f64(&[2, 2], &[3., 5., 4., 7.]).unwrap();
        let out = apply_principals(&z, &c, 1).unwrap();
        assert_eq!(out.data(), &[3., 0., 0., 0.]);
    }

    #[test]
    fn fold_two_by_two() {
        let z = Tensor::<f64>::from_f64(&[4, 1], &[0., 1., 10., 11.]).unwrap();
        let f = fold_batch(&z, 2).unwrap();
        assert_eq!(f.shape(), &[2, 2]);
        assert_eq!(f.data(), &[0., 10., 1., 11.]);
        assert_eq!(unfold_batch(&f).unwrap(), z);
        assert_eq!(fold_batch(&z, 1).unwrap().data(), z.data());
        assert!(matches!(fold_batch(&z, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_blend() {
        let old = comps(&[0., 0.], &[1., 0.], &[0.], &[1.], 1);
        let z = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 1., 2.]).unwrap();
        let z_v = forward_pca(&z, &old.vector).unwrap();
        let new = ema_update(Some(&old), &z, &z_v, 2, 1, 0.1, 0.0).unwrap();
        assert!((new.vector.mean[0] - 0.1).abs() < 1e-15);
        assert!((new.vector.mean[1] - 0.1).abs() < 1e-15);
        assert_eq!(new.spatial, old.spatial);
    }

    #[test]
    fn shape_contract() {
        let c = comps(&[0.; 3], &[1., 0., 0.], &[0.; 4], &[1., 0., 0., 0.], 1);
        let z = Tensor::<f64>::zeros(&[8, 3]);
        assert!(apply_principals(&z, &c, 2).is_ok());
        assert!(matches!(apply_principals(&z, &c, 1), Err(Error::Contract(_))));
        assert!(matches!(apply_principals(&z, &c, 3), Err(Error::Contract(_))));
    }
}
