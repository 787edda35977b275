//! Versioned binary checkpoint of a detector.
//!
//! Layout (little-endian): magic, version (u32), dtype code (u8), spec JSON
//! (u32 length + bytes), then per layer the parameter tensors and batchnorm
//! statistics, then the optional principal components, then a SHA-256 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{decode_tensor, encode_tensor};
use crate::detectors::{Detector, DetectorSpec};
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, DType, Scalar, Tensor};
use crate::pca::PcaComponents;
use crate::principals::PrincipalLatentComponents;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len() as u32);
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

fn put_pca(out: &mut Vec<u8>, p: &PcaComponents) {
    put_f64s(out, &p.mean);
    put_blob(out, &encode_tensor(&p.basis));
}

pub fn encode_checkpoint<T: Scalar>(model: &Detector<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(T::DTYPE.code());
    let spec = serde_json::to_vec(&model.spec)?;
    put_u32(&mut out, spec.len() as u32);
    out.extend_from_slice(&spec);
    for layer in model.layers() {
        put_u32(&mut out, layer.params.len() as u32);
        for p in &layer.params {
            put_blob(&mut out, &encode_tensor(p));
        }
        match &layer.norm {
            Some(n) => {
                out.push(1);
                put_f64s(&mut out, &n.mean);
                put_f64s(&mut out, &n.var);
            }
            None => out.push(0),
        }
    }
    match &model.components {
        Some(c) => {
            out.push(1);
            put_pca(&mut out, &c.vector);
            put_pca(&mut out, &c.spatial);
        }
        None => out.push(0),
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        Ok(self
            .take(8 * n)?
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let at = self.pos;
        let b = self.blob()?;
        decode_tensor(self.path, b).map_err(|e| match e {
            Error::Parse { path, offset, message } => Error::Parse {
                path,
                offset: offset + at as u64 + 8,
                message,
            },
            other => other,
        })
    }

    fn pca(&mut self) -> Result<PcaComponents> {
        Ok(PcaComponents {
            mean: self.f64s()?,
            basis: self.tensor()?,
        })
    }
}

pub fn decode_checkpoint<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Detector<T>> {
    if bytes.len() < 9 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, 0, "not a detector checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { path, bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::parse(path, body.len() as u64, "checksum mismatch"));
    }
    let code = r.u8()?;
    if DType::from_code(code) != Some(T::DTYPE) {
        return Err(r.err(format!("stored dtype code {code}, requested {:?}", T::DTYPE)));
    }
    let n = r.u32()? as usize;
    let spec: DetectorSpec = serde_json::from_slice(r.take(n)?)?;
    let mut model = Detector::<T>::build(&spec, 0)?;
    for layer in model.layers_mut() {
        let count = r.u32()? as usize;
        if count != layer.params.len() {
            return Err(r.err(format!(
                "{count} parameter tensors for a layer that holds {}",
                layer.params.len()
            )));
        }
        for p in layer.params.iter_mut() {
            let t: Tensor<T> = r.tensor()?;
            if t.shape() != p.shape() {
                return Err(r.err(format!(
                    "parameter shape {:?} does not match the spec's {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t;
        }
        let has_norm = r.u8()? == 1;
        if has_norm != layer.norm.is_some() {
            return Err(r.err("batchnorm statistics do not match the layer kind"));
        }
        if has_norm {
            let mean = r.f64s()?;
            let var = r.f64s()?;
            if mean.len() != var.len() || Some(mean.len()) != layer.norm.as_ref().map(|n| n.mean.len()) {
                return Err(r.err("batchnorm statistics have the wrong length"));
            }
            layer.norm = Some(BatchNormState { mean, var });
        }
    }
    if r.u8()? == 1 {
        let comp = PrincipalLatentComponents {
            vector: r.pca()?,
            spatial: r.pca()?,
        };
        if comp.channels() != spec.latent_channels() || comp.positions() != spec.positions() {
            return Err(r.err("principal components do not match the latent shape"));
        }
        model.components = Some(comp);
    }
    if r.pos != body.len() {
        return Err(r.err("trailing bytes after checkpoint body"));
    }
    Ok(model)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, model: &Detector<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Detector<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::principals::PrincipalsConfig;

    fn model() -> Detector<f64> {
        let spec = DetectorSpec {
            image_size: 8,
            base_channels: 2,
            principals: Some(PrincipalsConfig {
                k_s: 1,
                ..Default::default()
            }),
            ..Default::default()
        };
        let mut m = Detector::build(&spec, 4).unwrap();
        let x = Tensor::full(&[3, 1, 8, 8], 0.25);
        m.init_components_from(&x).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back: Detector<f64> = decode_checkpoint(Path::new("c"), &bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_checkpoint::<f64>(Path::new("c"), &bad), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint::<f64>(Path::new("c"), &bad), Err(Error::Version { found: 2, .. })));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(decode_checkpoint::<f64>(Path::new("c"), &bad).is_err());
        assert!(decode_checkpoint::<f32>(Path::new("c"), &bytes).is_err());
    }
}
