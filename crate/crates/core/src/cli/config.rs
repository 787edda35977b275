//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::{load_cifar10_bin, load_idx, make_synthetic, resize_bilinear, Dataset, ShapeKind, SplitTag};
use crate::detectors::DetectorSpec;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep at most this many known-class training items (file order).
        #[serde(default)]
        train_limit: Option<usize>,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
    },
    Synthetic {
        #[serde(default = "default_synthetic_train")]
        train_per_shape: usize,
        #[serde(default = "default_synthetic_test")]
        test_per_shape: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_synthetic_train() -> usize {
    256
}

fn default_synthetic_test() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub known: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the detector initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    pub data: DataSource,
    pub split: SplitSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Known-class training images and the full test set, both at the
/// detector's resolution.
pub struct LoadedData<T> {
    pub train: Tensor<T>,
    pub test: Dataset<T>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("{}: {e}", origin.display())))?;
        let base = origin.parent().unwrap_or(Path::new("."));
        Ok(cfg.resolve_paths(base))
    }

    /// Relative data and output paths are taken relative to the config file.
    fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        match &mut self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Cifar { train, test, .. } => {
                train.iter_mut().chain(test.iter_mut()).for_each(fix);
            }
            DataSource::Synthetic { .. } => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        for a in &self.attacks {
            a.validate().map_err(|e| Error::config(format!("attack {}: {e}", a.label())))?;
        }
        if self.split.known.is_empty() {
            return Err(Error::config("split.known must name at least one class"));
        }
        let need = |p: &PathBuf| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::config(format!("data file {} does not exist", p.display())))
            }
        };
        match &self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => [train_images, train_labels, test_images, test_labels]
                .into_iter()
                .try_for_each(need)?,
            DataSource::Cifar { train, test, .. } => {
                if train.is_empty() || test.is_empty() {
                    return Err(Error::config("cifar source needs train and test files"));
                }
                train.iter().chain(test).try_for_each(need)?;
                if self.detector.channels != 3 {
                    return Err(Error::config("cifar data requires detector.channels = 3"));
                }
            }
            DataSource::Synthetic {
                train_per_shape,
                test_per_shape,
                ..
            } => {
                if *train_per_shape == 0 || *test_per_shape == 0 {
                    return Err(Error::config("synthetic counts must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_data<T: Scalar>(&self) -> Result<LoadedData<T>> {
        let side = self.detector.image_size;
        let (train, test, limit) = match &self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
            } => (
                load_idx(train_images, train_labels, SplitTag::Train)?,
                load_idx(test_images, test_labels, SplitTag::Test)?,
                *train_limit,
            ),
            DataSource::Cifar { train, test, train_limit } => (
                load_cifar10_bin(train, SplitTag::Train)?,
                load_cifar10_bin(test, SplitTag::Test)?,
                *train_limit,
            ),
            DataSource::Synthetic {
                train_per_shape,
                test_per_shape,
                seed,
            } => (
                synthetic_mix(*train_per_shape, *seed, SplitTag::Train)?,
                synthetic_mix(*test_per_shape, seed.wrapping_add(1), SplitTag::Test)?,
                None,
            ),
        };
        let mut idx = train.indices_of(&self.split.known);
        if let Some(n) = limit {
            idx.truncate(n);
        }
        if idx.is_empty() {
            return Err(Error::config("no training items of the known classes"));
        }
        let train = train.select(&idx)?;
        let mut test = test;
        test.images = resize_bilinear(&test.images, side)?;
        Ok(LoadedData {
            train: resize_bilinear(&train.images, side)?,
            test,
        })
    }
}

/// Squares, crosses and discs with labels 0, 1, 2.
pub fn synthetic_mix<T: Scalar>(per_shape: usize, seed: u64, split: SplitTag) -> Result<Dataset<T>> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, k) in [ShapeKind::Squares, ShapeKind::Crosses, ShapeKind::Discs].into_iter().enumerate() {
        let d = make_synthetic::<T>(k, per_shape, seed.wrapping_mul(3).wrapping_add(i as u64))?;
        data.extend_from_slice(d.images.data());
        labels.extend(d.labels);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, 32, 32], data)?, labels, split)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_toml(&text, path)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackKind, DEFAULT_EPSILON};

    const MINIMAL: &str = r#"
[data]
source = "synthetic"

[split]
known = [0]
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(text, Path::new("cfg.toml"))
    }

    #[test]
    fn defaults_are_filled() {
        let c = parse(&format!("{MINIMAL}\n[[attacks]]\n")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.attacks[0].kind, AttackKind::Pgd);
        assert_eq!(c.attacks[0].epsilon, DEFAULT_EPSILON);
        assert_eq!(c.attacks[0].t_max, 5);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.batch_size, 128);
    }

    #[test]
    fn k_s_defaults_to_eight() {
        let c = parse(&format!("{MINIMAL}\n[detector.principals]\neta_v = 0.2\n")).unwrap();
        let p = c.detector.principals.unwrap();
        assert_eq!(p.k_s, 8);
        assert_eq!(p.eta_v, 0.2);
    }

    #[test]
    fn budget_fraction_strings() {
        let c = parse(&format!("{MINIMAL}\n[[attacks]]\nepsilon = \"8/255\"\n[[attacks]]\nepsilon = 0.5\n")).unwrap();
        assert_eq!(c.attacks[0].epsilon, 8.0 / 255.0);
        assert_eq!(c.attacks[1].epsilon, 0.5);
        assert!(parse(&format!("{MINIMAL}\n[[attacks]]\nepsilon = \"x/255\"\n")).is_err());
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = parse(&format!("{MINIMAL}\n[[attacks]]\nepsillon = 0.1\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epsillon"), "{msg}");
        assert!(msg.contains("line 9"), "{msg}");
    }

    #[test]
    fn missing_required_section() {
        let err = parse("[split]\nknown = [1]\n").unwrap_err().to_string();
        assert!(err.contains("data"), "{err}");
    }

    #[test]
    fn missing_files_fail_validation() {
        let c = parse(
            r#"
[data]
source = "idx"
train_images = "nope-i"
train_labels = "nope-l"
test_images = "nope-ti"
test_labels = "nope-tl"
[split]
known = [1]
"#,
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = parse(MINIMAL).unwrap();
        let b = a.clone().with_seed(4);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), parse(MINIMAL).unwrap().digest());
    }
}
