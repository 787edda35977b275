//! Desk-scale MNIST experiments behind the trained-model criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::Outcome;
use crate::attacks::{blackbox_transfer, AttackConfig, AttackKind, LossMode, TargetSubset};
use crate::cli::report::{write_file, write_report};
use crate::data::{load_idx, resize_bilinear_32, Dataset, SplitTag};
use crate::detectors::{Detector, DetectorSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_split, evaluate, gather, latent_shift, summarize, AttackResult, EvalReport, ItemScore, OneClassSplit,
};
use crate::principals::PrincipalsConfig;
use crate::training::{train_one_class, EpochRecord, TrainConfig, TrainMode, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    /// Directory holding the four official MNIST IDX files (optionally `.gz`).
    pub mnist_dir: PathBuf,
    /// Known classes of the defense-trend comparison.
    pub digits: Vec<u32>,
    /// Known class of the sanity checklist.
    pub sanity_digit: u32,
    /// Known-class training items per model (file order).
    pub train_items: usize,
    /// Caps normal and anomalous test items per split (`None`: full split).
    pub test_items: Option<usize>,
    pub base_channels: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub natural_epochs: usize,
    pub adversarial_epochs: usize,
    /// l-inf budget of training and evaluation attacks.
    #[serde(deserialize_with = "crate::attacks::budget::deserialize")]
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            mnist_dir: PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")),
            digits: vec![0, 2, 7],
            sanity_digit: 8,
            train_items: 2000,
            test_items: None,
            base_channels: 16,
            batch_size: 32,
            lr: 1e-3,
            natural_epochs: 5,
            adversarial_epochs: 5,
            epsilon: 25.0 / 255.0,
            seed: 0,
        }
    }
}

impl DeskConfig {
    /// Small configuration with the same code path, for determinism checks.
    pub fn quick(&self) -> Self {
        DeskConfig {
            digits: vec![self.digits.first().copied().unwrap_or(0)],
            train_items: 96,
            test_items: Some(40),
            base_channels: 4,
            batch_size: 16,
            natural_epochs: 1,
            adversarial_epochs: 1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.digits.is_empty() {
            return Err(Error::config("at least one digit is required"));
        }
        if self.digits.iter().chain([&self.sanity_digit]).any(|&d| d > 9) {
            return Err(Error::config("MNIST digits lie in 0..=9"));
        }
        if self.train_items == 0 || self.natural_epochs + self.adversarial_epochs == 0 {
            return Err(Error::config("training needs items and epochs"));
        }
        Ok(())
    }

    fn pgd(&self, epsilon: f64) -> AttackConfig {
        AttackConfig::pgd(epsilon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Natural training only (no defense).
    Natural,
    /// Adversarial training without the purifier.
    Adversarial,
    /// Purifier plus adversarial training.
    Principals,
    /// Independently seeded natural model used as a black-box substitute.
    Substitute,
}

impl Role {
    fn index(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Natural => "natural",
            Role::Adversarial => "at",
            Role::Principals => "principals-at",
            Role::Substitute => "substitute",
        }
    }
}

pub struct Desk {
    pub cfg: DeskConfig,
    train: Dataset<f32>,
    test: Dataset<f32>,
    splits: BTreeMap<u32, OneClassSplit>,
    models: BTreeMap<(u32, Role), Detector<f32>>,
    results: BTreeMap<(u32, Role), EvalReport>,
    items: BTreeMap<(u32, Role, String), Vec<ItemScore>>,
    shifts: BTreeMap<(u32, Role), f64>,
    curves: BTreeMap<(u32, Role), TrainReport>,
    /// Training time per model, charged to the criterion that first needs it.
    train_time: BTreeMap<(u32, Role), Duration>,
}

fn mnist_file(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

impl Desk {
    pub fn load(cfg: &DeskConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.mnist_dir;
        let mut train: Dataset<f32> = load_idx(
            &mnist_file(d, "train-images-idx3-ubyte"),
            &mnist_file(d, "train-labels-idx1-ubyte"),
            SplitTag::Train,
        )?;
        let mut test: Dataset<f32> = load_idx(
            &mnist_file(d, "t10k-images-idx3-ubyte"),
            &mnist_file(d, "t10k-labels-idx1-ubyte"),
            SplitTag::Test,
        )?;
        train.images = resize_bilinear_32(&train.images)?;
        test.images = resize_bilinear_32(&test.images)?;
        Ok(Desk {
            cfg: cfg.clone(),
            train,
            test,
            splits: BTreeMap::new(),
            models: BTreeMap::new(),
            results: BTreeMap::new(),
            items: BTreeMap::new(),
            shifts: BTreeMap::new(),
            curves: BTreeMap::new(),
            train_time: BTreeMap::new(),
        })
    }

    pub fn test_set(&self) -> &Dataset<f32> {
        &self.test
    }

    pub fn split(&mut self, digit: u32) -> Result<OneClassSplit> {
        if let Some(s) = self.splits.get(&digit) {
            return Ok(s.clone());
        }
        let mut s = build_split(&self.test.labels, &[digit], self.cfg.seed)?;
        if let Some(cap) = self.cfg.test_items {
            s.normal.truncate(cap);
            s.anomalous.truncate(cap);
        }
        self.splits.insert(digit, s.clone());
        Ok(s)
    }

    fn spec(&self, role: Role) -> DetectorSpec {
        DetectorSpec {
            base_channels: self.cfg.base_channels,
            principals: (role == Role::Principals).then(PrincipalsConfig::default),
            ..Default::default()
        }
    }

    pub fn train_config(&self, digit: u32, role: Role) -> TrainConfig {
        let c = &self.cfg;
        let adversarial = matches!(role, Role::Adversarial | Role::Principals);
        TrainConfig {
            epochs: c.natural_epochs + c.adversarial_epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            lr_drop_epochs: Vec::new(),
            mode: if adversarial { TrainMode::Adversarial } else { TrainMode::Natural },
            natural_warmup_epochs: if adversarial { c.natural_epochs } else { 0 },
            attack: c.pgd(c.epsilon),
            seed: self.model_seed(digit, role) ^ 0x5eed,
            ..Default::default()
        }
    }

    fn model_seed(&self, digit: u32, role: Role) -> u64 {
        self.cfg.seed.wrapping_mul(1000) + u64::from(digit) * 10 + role.index()
    }

    /// Train on first use; later calls return the cached model.
    pub fn model(&mut self, digit: u32, role: Role) -> Result<&Detector<f32>> {
        if !self.models.contains_key(&(digit, role)) {
            let t0 = Instant::now();
            let idx: Vec<usize> = self
                .train
                .indices_of(&[digit])
                .into_iter()
                .take(self.cfg.train_items)
                .collect();
            let data = self.train.select(&idx)?;
            let mut m = Detector::<f32>::build(&self.spec(role), self.model_seed(digit, role))?;
            let cfg = self.train_config(digit, role);
            let report = train_one_class(&mut m, &data.images, &cfg, |_r: &EpochRecord| {})?;
            self.curves.insert((digit, role), report);
            self.models.insert((digit, role), m);
            self.train_time.insert((digit, role), t0.elapsed());
        }
        Ok(&self.models[&(digit, role)])
    }

    /// Training time not yet charged to a criterion.
    fn take_train_time(&mut self, keys: &[(u32, Role)]) -> Duration {
        keys.iter()
            .filter_map(|k| self.train_time.remove(k))
            .sum()
    }

    /// Evaluate (and cache) `attack` on the model's split.
    pub fn result(&mut self, digit: u32, role: Role, attack: Option<&AttackConfig>) -> Result<AttackResult> {
        let label = attack.map_or_else(|| "clean".to_string(), |a| a.label());
        if let Some(r) = self.results.get(&(digit, role)).and_then(|r| r.results.get(&label)) {
            return Ok(r.clone());
        }
        let split = self.split(digit)?;
        self.model(digit, role)?;
        let model = &self.models[&(digit, role)];
        let ev = evaluate(model, &self.test, &split, attack)?;
        self.store(digit, role, ev.result.clone(), ev.items);
        Ok(ev.result)
    }

    fn store(&mut self, digit: u32, role: Role, r: AttackResult, items: Vec<ItemScore>) {
        self.items.insert((digit, role, r.label.clone()), items);
        self.results
            .entry((digit, role))
            .or_insert_with(|| EvalReport::new(vec![digit]))
            .insert(r);
    }

    /// Adversarial examples from the substitute, scored by the target.
    pub fn transfer(&mut self, digit: u32, target: Role, attack: &AttackConfig) -> Result<AttackResult> {
        let label = format!("transfer-{}", attack.clone().with_kind(AttackKind::Mifgsm).label());
        if let Some(r) = self.results.get(&(digit, target)).and_then(|r| r.results.get(&label)) {
            return Ok(r.clone());
        }
        let split = self.split(digit)?;
        self.model(digit, target)?;
        self.model(digit, Role::Substitute)?;
        let (idx, y) = split.items();
        let x = gather(&self.test.images, &idx)?;
        let scores = blackbox_transfer(
            &self.models[&(digit, Role::Substitute)],
            &self.models[&(digit, target)],
            &x,
            &y,
            attack,
        )?;
        let (normal, anomalous) = scores.split_at(split.normal.len());
        let mut cfg = attack.clone();
        cfg.kind = AttackKind::Mifgsm;
        let r = summarize(label, Some(cfg), normal, anomalous)?;
        let items = idx
            .iter()
            .zip(&scores)
            .map(|(&i, &s)| ItemScore {
                id: i,
                class: self.test.labels[i],
                attacked: true,
                score: s,
            })
            .collect();
        self.store(digit, target, r.clone(), items);
        Ok(r)
    }

    /// Mean decoder-side latent shift under `attack` (cached per model).
    pub fn latent_stability(&mut self, digit: u32, role: Role, attack: &AttackConfig) -> Result<f64> {
        if let Some(&v) = self.shifts.get(&(digit, role)) {
            return Ok(v);
        }
        let split = self.split(digit)?;
        self.model(digit, role)?;
        let model = &self.models[&(digit, role)];
        let (idx, y) = split.items();
        let x = gather(&self.test.images, &idx)?;
        let adv = crate::attacks::craft_adversarial(model, &x, &y, attack)?;
        let v = latent_shift(model, &x, &adv)?;
        self.shifts.insert((digit, role), v);
        let label = attack.label();
        if let Some(rep) = self.results.get_mut(&(digit, role)) {
            if let Some(r) = rep.results.get_mut(&label) {
                r.latent_stability = Some(v);
            }
        }
        Ok(v)
    }

    fn mean_auroc(&mut self, role: Role, attack: Option<&AttackConfig>) -> Result<(f64, Vec<f64>)> {
        let digits = self.cfg.digits.clone();
        let mut per = Vec::new();
        for d in digits {
            per.push(self.result(d, role, attack)?.auroc);
        }
        Ok((per.iter().sum::<f64>() / per.len() as f64, per))
    }

    /// Checkpoints, loss curves and reports of every model touched so far.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for ((digit, role), m) in &self.models {
            let stem = format!("digit{digit}-{}", role.name());
            let ck = dir.join("checkpoints").join(format!("{stem}.ckpt"));
            write_file(&ck, &crate::cli::checkpoint::encode_checkpoint(m)?)?;
            files.push(ck);
            if let Some(c) = self.curves.get(&(*digit, *role)) {
                let p = dir.join("curves").join(format!("{stem}-loss.csv"));
                write_file(&p, c.to_csv().as_bytes())?;
                files.push(p);
            }
        }
        for ((digit, role), rep) in &self.results {
            let stem = format!("digit{digit}-{}", role.name());
            let sub = dir.join("reports");
            let clean_items: Vec<ItemScore> = self
                .items
                .get(&(*digit, *role, "clean".to_string()))
                .cloned()
                .unwrap_or_default();
            files.extend(write_report(rep, &clean_items, &sub, &stem)?);
            for ((d, r, label), items) in &self.items {
                if (d, r) == (digit, role) && label != "clean" {
                    let p = sub.join(format!("{stem}-items-{}.csv", sanitize(label)));
                    write_file(&p, crate::evaluation::items_csv(items).as_bytes())?;
                    files.push(p);
                }
            }
        }
        Ok(files)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

/// Pass/fail of one sanity check with the values behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub name: String,
    pub detail: String,
    pub passed: bool,
}

/// What a sanity check asks to be scored.
pub enum Probe {
    WhiteBox(AttackConfig),
    /// Crafted on the substitute with momentum iterations.
    Transfer(AttackConfig),
}

/// Supplementary checklist at budget `eps`; `auroc_of` scores one probe on
/// the target model.
pub fn checklist(eps: f64, mut auroc_of: impl FnMut(Probe) -> Result<f64>) -> Result<Vec<SanityCheck>> {
    let pgd = AttackConfig::pgd(eps);
    let a_pgd = auroc_of(Probe::WhiteBox(pgd.clone()))?;
    let a_fgsm = auroc_of(Probe::WhiteBox(pgd.clone().with_kind(AttackKind::Fgsm)))?;
    let a_bb = auroc_of(Probe::Transfer(pgd.clone()))?;
    let a_unb = auroc_of(Probe::WhiteBox(AttackConfig::pgd(1.0)))?;
    let mut sweep = Vec::new();
    for e in [0.0, eps / 2.0, eps, 2.0 * eps] {
        sweep.push(auroc_of(Probe::WhiteBox(AttackConfig::pgd(e)))?);
    }
    let monotone = sweep.windows(2).all(|w| w[1] <= w[0]);
    Ok(vec![
        SanityCheck {
            name: "iterative stronger than one-step".into(),
            detail: format!("PGD {a_pgd:.4} <= FGSM {a_fgsm:.4}"),
            passed: a_pgd <= a_fgsm,
        },
        SanityCheck {
            name: "white-box stronger than black-box".into(),
            detail: format!("PGD {a_pgd:.4} <= transfer {a_bb:.4}"),
            passed: a_pgd <= a_bb,
        },
        SanityCheck {
            name: "unbounded attack succeeds".into(),
            detail: format!("PGD eps=1 AUROC {a_unb:.4} < 0.05"),
            passed: a_unb < 0.05,
        },
        SanityCheck {
            name: "larger budget is stronger".into(),
            detail: format!("PGD at 0, eps/2, eps, 2eps: {}", fmt_list(&sweep)),
            passed: monotone,
        },
    ])
}

/// Checklist on `digit`'s adversarially trained AE.
pub fn sanity_checklist(desk: &mut Desk, digit: u32) -> Result<Vec<SanityCheck>> {
    let eps = desk.cfg.epsilon;
    checklist(eps, |p| match p {
        Probe::WhiteBox(a) => Ok(desk.result(digit, Role::Adversarial, Some(&a))?.auroc),
        Probe::Transfer(a) => Ok(desk.transfer(digit, Role::Adversarial, &a)?.auroc),
    })
}

fn guarded(id: u8, name: &str, limit: f64, t0: Instant, extra: Duration, r: Result<(String, String, bool)>) -> Outcome {
    match r {
        Ok((measured, threshold, ok)) => Outcome::with_elapsed(id, name, measured, threshold, ok, t0.elapsed() + extra, limit),
        Err(e) => Outcome::with_elapsed(id, name, format!("error: {e}"), "no error".into(), false, t0.elapsed() + extra, limit),
    }
}

pub fn criterion_6(desk: &mut Desk) -> Outcome {
    let t0 = Instant::now();
    let digit = desk.cfg.sanity_digit;
    let r = sanity_checklist(desk, digit).map(|checks| {
        let ok = checks.iter().all(|c| c.passed);
        let detail: Vec<String> = checks
            .iter()
            .map(|c| format!("{} [{}]: {}", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail))
            .collect();
        (
            format!("digit {digit}: {}", detail.join("; ")),
            "all four checks hold, < 30 min".into(),
            ok,
        )
    });
    let extra = desk.take_train_time(&[(digit, Role::Adversarial), (digit, Role::Substitute)]);
    guarded(6, "Sanity checklist", 1800.0, t0, extra, r)
}

pub fn criterion_7(desk: &mut Desk) -> Outcome {
    let t0 = Instant::now();
    let pgd = desk.cfg.pgd(desk.cfg.epsilon);
    let r = (|| -> Result<(String, String, bool)> {
        let (nat_clean, nc) = desk.mean_auroc(Role::Natural, None)?;
        let (nat_pgd, np) = desk.mean_auroc(Role::Natural, Some(&pgd))?;
        let (at_pgd, ap) = desk.mean_auroc(Role::Adversarial, Some(&pgd))?;
        let (pls_pgd, pp) = desk.mean_auroc(Role::Principals, Some(&pgd))?;
        let (pls_clean, pc) = desk.mean_auroc(Role::Principals, None)?;
        let a = nat_clean >= 0.90;
        let b = nat_pgd < 0.30;
        let c = pls_pgd - at_pgd >= 0.05;
        let d = pls_clean >= nat_clean - 0.02;
        Ok((
            format!(
                "digits {:?}: (a) natural clean {nat_clean:.4} [{}]; (b) natural PGD {nat_pgd:.4} [{}]; (c) purifier+AT PGD {pls_pgd:.4} vs AT PGD {at_pgd:.4}, gain {:.4} [{}]; (d) purifier+AT clean {pls_clean:.4} [{}]",
                desk.cfg.digits,
                fmt_list(&nc),
                fmt_list(&np),
                pls_pgd - at_pgd,
                fmt_list(&[pp, ap].concat()),
                fmt_list(&pc),
            ),
            format!(
                "(a) >= 0.90; (b) < 0.30; (c) gain >= 0.05; (d) >= {:.4}; < 2 h",
                nat_clean - 0.02
            ),
            a && b && c && d,
        ))
    })();
    let keys: Vec<(u32, Role)> = desk
        .cfg
        .digits
        .iter()
        .flat_map(|&d| [(d, Role::Natural), (d, Role::Adversarial), (d, Role::Principals)])
        .collect();
    let extra = desk.take_train_time(&keys);
    guarded(7, "Defense trend", 7200.0, t0, extra, r)
}

pub fn criterion_8(desk: &mut Desk) -> Outcome {
    let t0 = Instant::now();
    let pgd = desk.cfg.pgd(desk.cfg.epsilon);
    let r = (|| -> Result<(String, String, bool)> {
        let (full, _) = desk.mean_auroc(Role::Principals, Some(&pgd))?;
        let variants = [
            AttackConfig {
                target: TargetSubset::NormalOnly,
                ..pgd.clone()
            },
            AttackConfig {
                target: TargetSubset::AnomalousOnly,
                ..pgd.clone()
            },
            AttackConfig {
                loss: LossMode::Clean,
                ..pgd.clone()
            },
            AttackConfig {
                loss: LossMode::Latent,
                ..pgd.clone()
            },
        ];
        let mut parts = vec![format!("{} {full:.4}", pgd.label())];
        let mut ok = true;
        for v in &variants {
            let (m, _) = desk.mean_auroc(Role::Principals, Some(v))?;
            ok &= full <= m;
            parts.push(format!("{} {m:.4}", v.label()));
        }
        Ok((
            format!("purifier+AT mAUROC over {:?}: {}", desk.cfg.digits, parts.join("; ")),
            "full PGD <= every variant".into(),
            ok,
        ))
    })();
    guarded(8, "Attack-strength ordering", f64::INFINITY, t0, Duration::ZERO, r)
}

pub fn criterion_9(desk: &mut Desk) -> Outcome {
    let t0 = Instant::now();
    let pgd = desk.cfg.pgd(desk.cfg.epsilon);
    let r = (|| -> Result<(String, String, bool)> {
        let digits = desk.cfg.digits.clone();
        let (mut def, mut und) = (Vec::new(), Vec::new());
        for &d in &digits {
            def.push(desk.latent_stability(d, Role::Principals, &pgd)?);
            und.push(desk.latent_stability(d, Role::Natural, &pgd)?);
        }
        let md = def.iter().sum::<f64>() / def.len() as f64;
        let mu = und.iter().sum::<f64>() / und.len() as f64;
        let ratio = md / mu;
        Ok((
            format!(
                "mean latent L2 shift under {}: purifier+AT {md:.4} [{}], natural {mu:.4} [{}]; ratio {ratio:.4}",
                pgd.label(),
                fmt_list(&def),
                fmt_list(&und)
            ),
            "ratio < 0.1, < 10 min".into(),
            ratio < 0.1,
        ))
    })();
    guarded(9, "Latent stability", 600.0, t0, Duration::ZERO, r)
}

pub fn criterion_10(desk: &mut Desk) -> Outcome {
    let t0 = Instant::now();
    let pgd = desk.cfg.pgd(desk.cfg.epsilon);
    let r = (|| -> Result<(String, String, bool)> {
        let (base, _) = desk.mean_auroc(Role::Principals, Some(&pgd))?;
        let mut parts = vec![format!("lambda=0 {base:.4}")];
        let mut ok = true;
        for mode in [LossMode::KnowA, LossMode::KnowB] {
            for lambda in [0.5, 1.0] {
                let a = AttackConfig {
                    loss: mode,
                    lambda,
                    ..pgd.clone()
                };
                let (m, _) = desk.mean_auroc(Role::Principals, Some(&a))?;
                ok &= m >= base - 0.02;
                parts.push(format!("{} {m:.4}", a.label()));
            }
        }
        Ok((
            format!("purifier+AT mAUROC over {:?}: {}", desk.cfg.digits, parts.join("; ")),
            format!("every value >= {:.4} (lambda=0 minus 0.02), < 20 min", base - 0.02),
            ok,
        ))
    })();
    guarded(10, "Knowledgeable-attack trend", 1200.0, t0, Duration::ZERO, r)
}
