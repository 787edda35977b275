//! Dataset ingestion (IDX, CIFAR-10 binary), resizing, synthetic shapes and
//! the raw tensor container.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{bilinear_forward, Nchw};
use crate::numerics::{DType, Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const TARGET_SIDE: usize = 32;

pub const CONTAINER_MAGIC: &[u8; 4] = b"NVTN";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `(n, c, h, w)` in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<u32>,
    pub split: SplitTag,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u32>, split: SplitTag) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be (n, c, h, w), got {:?}",
                images.shape()
            )));
        }
        if images.dim0() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.dim0(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Items at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let per = self.images.item_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::contract(format!("item {i} out of range")));
            }
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            split: self.split,
        })
    }

    /// Indices of items whose label is in `classes`, in file order.
    pub fn indices_of(&self, classes: &[u32]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            split: self.split,
        }
    }
}

/// Whole file, transparently gunzipped when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.path,
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be("magic")?;
        if found != expected {
            return Err(Error::parse(
                self.path,
                0,
                format!("bad magic 0x{found:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }
}

/// Decode IDX image bytes into `(n, 1, rows, cols)` scaled by 1/255.
pub fn parse_idx_images<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(IDX_IMAGES_MAGIC)?;
    let n = c.u32_be("image count")? as usize;
    let rows = c.u32_be("row count")? as usize;
    let cols = c.u32_be("column count")? as usize;
    let payload = c.take(n * rows * cols, "pixel payload")?;
    let data = payload.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u32>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(IDX_LABELS_MAGIC)?;
    let n = c.u32_be("label count")? as usize;
    Ok(c.take(n, "label payload")?.iter().map(|&b| u32::from(b)).collect())
}

/// IDX image + label pair (optionally gzip-compressed), pixels in `[0, 1]`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, split: SplitTag) -> Result<Dataset<T>> {
    let x = parse_idx_images(images, &read_maybe_gz(images)?)?;
    let y = parse_idx_labels(labels, &read_maybe_gz(labels)?)?;
    if x.dim0() != y.len() {
        return Err(Error::parse(
            labels,
            4,
            format!("label count {} does not match image count {}", y.len(), x.dim0()),
        ));
    }
    Dataset::new(x, y, split)
}

pub fn parse_cifar10<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<(Vec<T>, Vec<u32>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let at = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::parse(
            path,
            at as u64,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let mut px = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(u32::from(rec[0]));
        px.extend(rec[1..].iter().map(|&b| T::of(f64::from(b) / 255.0)));
    }
    Ok((px, labels))
}

/// Concatenation of CIFAR-10 binary batches as `(n, 3, 32, 32)`.
pub fn load_cifar10_bin<T: Scalar>(paths: &[PathBuf], split: SplitTag) -> Result<Dataset<T>> {
    let mut px = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, y) = parse_cifar10::<T>(p, &read_maybe_gz(p)?)?;
        px.extend(x);
        labels.extend(y);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], px)?, labels, split)
}

/// Bilinear resampling (pixel-centre aligned) of every plane to `side x side`.
pub fn resize_bilinear<T: Scalar>(images: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let d = Nchw::from_shape(images.shape())
        .ok_or_else(|| Error::shape(format!("resize expects (n, c, h, w), got {:?}", images.shape())))?;
    if d.h == side && d.w == side {
        return Ok(images.clone());
    }
    let out = bilinear_forward(images.data(), d, side, side)
        .into_iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    Tensor::new(vec![d.n, d.c, side, side], out)
}

pub fn resize_bilinear_32<T: Scalar>(images: &Tensor<T>) -> Result<Tensor<T>> {
    resize_bilinear(images, TARGET_SIDE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Squares,
    Crosses,
    Discs,
}

impl ShapeKind {
    pub fn label(self) -> u32 {
        match self {
            ShapeKind::Squares => 0,
            ShapeKind::Crosses => 1,
            ShapeKind::Discs => 2,
        }
    }

    fn covers(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Squares => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Crosses => {
                let arm = (r * 0.35).max(1.0);
                (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
            }
            ShapeKind::Discs => dy * dy + dx * dx <= r * r,
        }
    }
}

/// `n` single-channel 32x32 images of one shape with random centre, size and
/// intensity over a faint noisy background.
pub fn make_synthetic<T: Scalar>(kind: ShapeKind, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::contract("make_synthetic needs n >= 1"));
    }
    let side = TARGET_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let r: f64 = rng.random_range(4.0..9.0);
        let cy: f64 = rng.random_range(r + 1.0..side as f64 - r - 1.0);
        let cx: f64 = rng.random_range(r + 1.0..side as f64 - r - 1.0);
        let level: f64 = rng.random_range(0.6..1.0);
        for y in 0..side {
            for x in 0..side {
                let noise: f64 = rng.random_range(0.0..0.05);
                let on = kind.covers(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
                data.push(T::of(if on { level - noise } else { noise }));
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, side, side], data)?,
        vec![kind.label(); n],
        SplitTag::Train,
    )
}

/// Raw container: magic, version (u32), dtype code (u8), rank (u32),
/// extents (u64 each), little-endian payload.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * t.rank() + t.len() * T::DTYPE.width());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le(&mut out);
    }
    out
}

pub fn decode_tensor<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |at: usize, msg: String| Error::parse(path, at as u64, msg);
    if bytes.len() < 13 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(bad(0, "not a tensor container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            what: "tensor container",
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| bad(8, format!("unknown dtype code {}", bytes[8])))?;
    if dtype != T::DTYPE {
        return Err(bad(8, format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let rank = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let mut pos = 13;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| bad(pos, "truncated extents".into()))?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let count: usize = shape.iter().product();
    let w = dtype.width();
    if bytes.len() - pos != count * w {
        return Err(bad(
            pos,
            format!("payload holds {} bytes, extents need {}", bytes.len() - pos, count * w),
        ));
    }
    let data = bytes[pos..].chunks(w).map(T::from_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(path, &fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_fixture() {
        let p = Path::new("fixture");
        let x = parse_idx_images::<f64>(p, &idx_images(1, 2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!(x.shape(), &[1, 1, 2, 2]);
        assert_eq!(x.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((x.data()[2] - 0.50196).abs() < 1e-5);
        let mut lb = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lb.extend_from_slice(&1u32.to_be_bytes());
        lb.push(7);
        assert_eq!(parse_idx_labels(p, &lb).unwrap(), vec![7]);
    }

    #[test]
    fn idx_errors_name_offsets() {
        let p = Path::new("fixture");
        let mut b = idx_images(1, 2, 2, &[0, 1, 2]);
        match parse_idx_images::<f64>(p, &b) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        b[3] = 0x01;
        assert!(matches!(parse_idx_images::<f64>(p, &b), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn cifar_fixture() {
        let p = Path::new("fixture");
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255, 1024));
        rec.extend(std::iter::repeat_n(0, 2048));
        let two: Vec<u8> = rec.iter().chain(&rec).copied().collect();
        let (px, labels) = parse_cifar10::<f64>(p, &two).unwrap();
        assert_eq!(labels, vec![3, 3]);
        assert!(px[..1024].iter().all(|&v| v == 1.0));
        assert!(px[1024..3072].iter().all(|&v| v == 0.0));
        assert!(matches!(parse_cifar10::<f64>(p, &two[..100]), Err(Error::Parse { .. })));
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 32, 32], &vec![0.3; 1024]).unwrap();
        assert_eq!(resize_bilinear_32(&x).unwrap(), x);
        let y = Tensor::<f64>::from_f64(&[1, 1, 28, 28], &vec![0.3; 784]).unwrap();
        let r = resize_bilinear_32(&y).unwrap();
        assert_eq!(r.shape(), &[1, 1, 32, 32]);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upsample_oracle() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&x, 4).unwrap();
        // source coordinate per output index: max(0, (i + 0.5) / 2 - 0.5)
        let src = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).max(0.0).min(1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let (fy, fx) = (src(oy), src(ox));
                let want = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((r.data()[oy * 4 + ox] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn synthetic_deterministic_and_bounded() {
        let a = make_synthetic::<f64>(ShapeKind::Crosses, 4, 9).unwrap();
        let b = make_synthetic::<f64>(ShapeKind::Crosses, 4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.labels, vec![1; 4]);
    }

    #[test]
    fn container_round_trip() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[0.5, -1.0, 3.25, 0.0, 1e-7, 9.0]).unwrap();
        let back: Tensor<f32> = decode_tensor(Path::new("m"), &encode_tensor(&t)).unwrap();
        assert_eq!(back, t);
        let mut bytes = encode_tensor(&t);
        bytes[0] = b'X';
        assert!(matches!(decode_tensor::<f32>(Path::new("m"), &bytes), Err(Error::Parse { .. })));
        let mut bytes = encode_tensor(&t);
        bytes[4] = 9;
        assert!(matches!(decode_tensor::<f32>(Path::new("m"), &bytes), Err(Error::Version { .. })));
    }
}
