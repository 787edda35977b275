//! Gradient attacks on reconstruction-error novelty scores.
//!
//! An item with label `+1` (known class) is pushed towards a larger
//! reconstruction error and an item with label `-1` towards a smaller one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectors::{Detector, Pass};
use crate::error::{Error, Result};
use crate::numerics::{sign, Scalar, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 25.0 / 255.0;
pub const DEFAULT_T_MAX: usize = 5;
pub const DEFAULT_MOMENTUM: f64 = 1.0;
pub const DEFAULT_FRAME_WIDTH: usize = 1;
/// Pixels darker than this are left alone by the multiplicative attack.
pub const MULT_FLOOR: f64 = 1e-6;
/// Items per crafting pass; items are independent in eval mode.
pub const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mifgsm,
    Multadv,
    Af,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "output")]
    Output,
    #[serde(rename = "latent")]
    Latent,
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "knowA")]
    KnowA,
    #[serde(rename = "knowB")]
    KnowB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSubset {
    All,
    NormalOnly,
    AnomalousOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l-inf budget in pixel units, or the ratio bound for `multadv`.
    /// Accepts a number or an `"N/D"` fraction string such as `"25/255"`.
    #[serde(deserialize_with = "budget::deserialize")]
    pub epsilon: f64,
    /// Step size; `None` selects the default for the kind.
    pub alpha: Option<f64>,
    pub t_max: usize,
    pub momentum: f64,
    pub frame_width: usize,
    pub loss: LossMode,
    /// Weight of the auxiliary term of the knowledgeable losses.
    pub lambda: f64,
    pub target: TargetSubset,
    /// Seeds the random start of the latent loss.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: DEFAULT_EPSILON,
            alpha: None,
            t_max: DEFAULT_T_MAX,
            momentum: DEFAULT_MOMENTUM,
            frame_width: DEFAULT_FRAME_WIDTH,
            loss: LossMode::Output,
            lambda: 0.0,
            target: TargetSubset::All,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..Default::default()
        }
    }

    pub fn with_kind(mut self, kind: AttackKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(Error::contract("attack budget must be finite"));
        }
        if self.kind == AttackKind::Multadv {
            if self.epsilon < 1.0 {
                return Err(Error::contract(format!(
                    "ratio bound {} must be >= 1",
                    self.epsilon
                )));
            }
        } else if self.epsilon < 0.0 {
            return Err(Error::contract(format!(
                "l-inf budget {} must be >= 0",
                self.epsilon
            )));
        }
        if self.t_max == 0 {
            return Err(Error::contract("t_max must be >= 1"));
        }
        if self.frame_width == 0 {
            return Err(Error::contract("frame width must be >= 1"));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(Error::contract(format!("step size {a} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Iterations actually run.
    pub fn iterations(&self) -> usize {
        if self.kind == AttackKind::Fgsm {
            1
        } else {
            self.t_max
        }
    }

    /// Additive step, or the multiplicative factor for `multadv`.
    pub fn step(&self) -> f64 {
        match self.kind {
            AttackKind::Fgsm => self.epsilon,
            AttackKind::Multadv => self
                .alpha
                .unwrap_or_else(|| self.epsilon.powf(1.0 / self.t_max as f64)),
            _ => self
                .alpha
                .unwrap_or(2.5 * self.epsilon / self.t_max as f64)
                .min(self.epsilon),
        }
    }

    /// Short stable identifier of the configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        let h = Sha256::digest(&json);
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn label(&self) -> String {
        let kind = format!("{:?}", self.kind).to_lowercase();
        let mut s = match self.loss {
            LossMode::Output => kind,
            LossMode::Latent => format!("{kind}-latent"),
            LossMode::Clean => format!("{kind}-clean"),
            LossMode::KnowA => format!("{kind}-knowA({})", self.lambda),
            LossMode::KnowB => format!("{kind}-knowB({})", self.lambda),
        };
        match self.target {
            TargetSubset::All => {}
            TargetSubset::NormalOnly => s.push_str("-normal"),
            TargetSubset::AnomalousOnly => s.push_str("-anomalous"),
        }
        format!("{s}@{}", budget::display(self.epsilon))
    }
}

/// Constants of the loss that depend only on the clean input.
struct Anchors<T> {
    clean: Tensor<T>,
    clean_latent: Option<Tensor<T>>,
    clean_purified: Option<Tensor<T>>,
}

fn item_norms<T: Scalar>(tape: &mut Tape<T>, diff: Var, b: usize) -> Result<Var> {
    let per = tape.value(diff).len() / b;
    let r = tape.reshape(diff, &[b, per])?;
    tape.item_l2(r)
}

fn anchors<T: Scalar>(model: &Detector<T>, x0: &Tensor<T>, mode: LossMode) -> Result<Anchors<T>> {
    let clean_latent = match mode {
        LossMode::Latent => Some(model.encode(x0)?),
        _ => None,
    };
    let clean_purified = match mode {
        LossMode::KnowB => Some(model.effective_latent(x0)?),
        _ => None,
    };
    Ok(Anchors {
        clean: x0.clone(),
        clean_latent,
        clean_purified,
    })
}

fn require_principals<T: Scalar>(model: &Detector<T>, mode: LossMode) -> Result<()> {
    if matches!(mode, LossMode::KnowA | LossMode::KnowB)
        && (!model.has_principals() || model.components.is_none())
    {
        return Err(Error::config(
            "knowledgeable losses need a model with trained principal latent components",
        ));
    }
    Ok(())
}

fn push_loss<T: Scalar>(
    model: &Detector<T>,
    tape: &mut Tape<T>,
    x: Var,
    y: &[f64],
    mode: LossMode,
    lambda: f64,
    a: &Anchors<T>,
) -> Result<Var> {
    let b = y.len();
    let mut pass = Pass::eval();
    let enc = model.encode_on_tape(tape, x, &mut pass)?;
    if mode == LossMode::Latent {
        let z0 = tape.leaf(a.clean_latent.clone().expect("latent anchor"), false);
        let d = tape.sub(enc.latent(), z0)?;
        let n = item_norms(tape, d, b)?;
        return tape.weighted_sum(n, y.to_vec());
    }
    let latent = enc.latent();
    let trace = model.finish(tape, enc, &mut pass)?;
    let target = if mode == LossMode::Clean {
        tape.leaf(a.clean.clone(), false)
    } else {
        x
    };
    let d = tape.sub(trace.recon, target)?;
    let n = item_norms(tape, d, b)?;
    let main = tape.weighted_sum(n, y.to_vec())?;
    let aux = match mode {
        LossMode::KnowA if lambda != 0.0 => {
            let p = trace.purified.expect("purifier present");
            let d = tape.sub(p, latent)?;
            let n = item_norms(tape, d, b)?;
            Some((tape.sum(n)?, -lambda))
        }
        LossMode::KnowB if lambda != 0.0 => {
            let p = trace.purified.expect("purifier present");
            let z0 = tape.leaf(a.clean_purified.clone().expect("purified anchor"), false);
            let d = tape.sub(p, z0)?;
            let n = item_norms(tape, d, b)?;
            Some((tape.sum(n)?, lambda))
        }
        _ => None,
    };
    match aux {
        Some((term, w)) => {
            let t = tape.scale(term, w)?;
            tape.add(main, t)
        }
        None => Ok(main),
    }
}

/// Value of the attack objective at `x_t` (clean reference `x0`).
pub fn attack_loss<T: Scalar>(
    model: &Detector<T>,
    x_t: &Tensor<T>,
    x0: &Tensor<T>,
    y: &[f64],
    mode: LossMode,
    lambda: f64,
) -> Result<f64> {
    require_principals(model, mode)?;
    check_labels(x_t, y)?;
    let a = anchors(model, x0, mode)?;
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone(), false);
    let l = push_loss(model, &mut tape, x, y, mode, lambda, &a)?;
    Ok(tape.value(l).data()[0].f64())
}

/// Gradient of the attack objective with respect to `x_t`.
pub fn attack_gradient<T: Scalar>(
    model: &Detector<T>,
    x_t: &Tensor<T>,
    x0: &Tensor<T>,
    y: &[f64],
    mode: LossMode,
    lambda: f64,
) -> Result<Tensor<T>> {
    require_principals(model, mode)?;
    check_labels(x_t, y)?;
    let a = anchors(model, x0, mode)?;
    gradient_with(model, x_t, y, mode, lambda, &a)
}

fn gradient_with<T: Scalar>(
    model: &Detector<T>,
    x_t: &Tensor<T>,
    y: &[f64],
    mode: LossMode,
    lambda: f64,
    a: &Anchors<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone(), true);
    let l = push_loss(model, &mut tape, x, y, mode, lambda, a)?;
    let mut g = tape.backward(l, Tensor::scalar(T::one()))?;
    Ok(g.take(x).unwrap_or_else(|| Tensor::zeros(x_t.shape())))
}

fn check_labels<T: Scalar>(x: &Tensor<T>, y: &[f64]) -> Result<()> {
    if x.rank() != 4 || x.dim0() != y.len() {
        return Err(Error::contract(format!(
            "{} labels for a batch of shape {:?}",
            y.len(),
            x.shape()
        )));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::contract("labels must be +1 (known) or -1 (novel)"));
    }
    Ok(())
}

/// Border mask of width `w` for an `h x w` plane (1 = perturbable).
pub fn frame_mask(h: usize, w: usize, width: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            m[r * w + c] = r < width || c < width || r + width >= h || c + width >= w;
        }
    }
    m
}

fn selected(y: &[f64], target: TargetSubset) -> Vec<usize> {
    (0..y.len())
        .filter(|&i| match target {
            TargetSubset::All => true,
            TargetSubset::NormalOnly => y[i] > 0.0,
            TargetSubset::AnomalousOnly => y[i] < 0.0,
        })
        .collect()
}

fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let per = x.item_len();
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(x.item(i));
    }
    Tensor::new(shape, data)
}

/// Craft adversarial examples for `x` with labels `y` (+1 known, -1 novel).
/// Items outside the target subset are returned bit-identical.
pub fn craft_adversarial<T: Scalar>(
    model: &Detector<T>,
    x: &Tensor<T>,
    y: &[f64],
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_labels(x, y)?;
    require_principals(model, cfg.loss)?;
    let mut out = x.clone();
    let idx = selected(y, cfg.target);
    let per = x.item_len();
    for (chunk_no, part) in idx.chunks(CHUNK).enumerate() {
        let x0 = gather(x, part)?;
        let yp: Vec<f64> = part.iter().map(|&i| y[i]).collect();
        let adv = craft_chunk(model, &x0, &yp, cfg, chunk_no as u64)?;
        for (k, &i) in part.iter().enumerate() {
            out.data_mut()[i * per..(i + 1) * per].copy_from_slice(adv.item(k));
        }
    }
    Ok(out)
}

fn craft_chunk<T: Scalar>(
    model: &Detector<T>,
    x0: &Tensor<T>,
    y: &[f64],
    cfg: &AttackConfig,
    chunk_no: u64,
) -> Result<Tensor<T>> {
    let steps = cfg.iterations();
    let step = cfg.step();
    let eps = T::of(cfg.epsilon);
    if (cfg.kind == AttackKind::Multadv && (cfg.epsilon == 1.0 || step == 1.0))
        || (cfg.kind != AttackKind::Multadv && (cfg.epsilon == 0.0 || step == 0.0))
    {
        return Ok(x0.clone());
    }
    let a = anchors(model, x0, cfg.loss)?;
    let (n, c, h, w) = {
        let s = x0.shape();
        (s[0], s[1], s[2], s[3])
    };
    let mask = (cfg.kind == AttackKind::Af).then(|| frame_mask(h, w, cfg.frame_width));
    let mut xt = x0.clone();
    if cfg.loss == LossMode::Latent && cfg.kind != AttackKind::Multadv {
        // the latent objective is flat at x0, so start from a random point in the ball
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ chunk_no.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let plane = h * w;
        for (j, v) in xt.data_mut().iter_mut().enumerate() {
            if mask.as_ref().is_some_and(|m| !m[j % plane]) {
                continue;
            }
            let u: f64 = rng.random_range(-1.0..=1.0);
            *v = (*v + T::of(u) * eps).max(T::zero()).min(T::one());
        }
    }
    let per = c * h * w;
    let mut momentum = vec![T::zero(); xt.len()];
    for _ in 0..steps {
        let g = gradient_with(model, &xt, y, cfg.loss, cfg.lambda, &a)?;
        let dir: Vec<T> = match cfg.kind {
            AttackKind::Mifgsm => {
                let mu = T::of(cfg.momentum);
                for i in 0..n {
                    let gi = g.item(i);
                    let l1: T = gi.iter().map(|v| v.abs()).sum();
                    let inv = if l1 > T::zero() { T::one() / l1 } else { T::zero() };
                    for (m, &v) in momentum[i * per..(i + 1) * per].iter_mut().zip(gi) {
                        *m = mu * *m + v * inv;
                    }
                }
                momentum.iter().map(|&m| sign(m)).collect()
            }
            _ => g.data().iter().map(|&v| sign(v)).collect(),
        };
        let xd = xt.data_mut();
        let orig = x0.data();
        match cfg.kind {
            AttackKind::Multadv => {
                let am = T::of(step);
                let hi = T::of(cfg.epsilon);
                let floor = T::of(MULT_FLOOR);
                for j in 0..xd.len() {
                    if orig[j] < floor {
                        continue;
                    }
                    let f = if dir[j] > T::zero() {
                        am
                    } else if dir[j] < T::zero() {
                        T::one() / am
                    } else {
                        T::one()
                    };
                    let v = (xd[j] * f).min(orig[j] * hi).max(orig[j] / hi);
                    xd[j] = v.min(T::one()).max(T::zero());
                }
            }
            _ => {
                let alpha = T::of(step);
                let plane = h * w;
                for j in 0..xd.len() {
                    if mask.as_ref().is_some_and(|m| !m[j % plane]) {
                        continue;
                    }
                    let v = (xd[j] + alpha * dir[j]).min(orig[j] + eps).max(orig[j] - eps);
                    xd[j] = v.min(T::one()).max(T::zero());
                }
            }
        }
    }
    Ok(xt)
}

/// Budget audit of a crafted batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub max_linf: f64,
    pub max_ratio: f64,
    pub min_pixel: f64,
    pub max_pixel: f64,
    pub changed_items: usize,
}

pub fn audit<T: Scalar>(x: &Tensor<T>, adv: &Tensor<T>) -> BudgetAudit {
    let mut a = BudgetAudit {
        max_linf: 0.0,
        max_ratio: 1.0,
        min_pixel: f64::INFINITY,
        max_pixel: f64::NEG_INFINITY,
        changed_items: 0,
    };
    for (&o, &v) in x.data().iter().zip(adv.data()) {
        let (o, v) = (o.f64(), v.f64());
        a.max_linf = a.max_linf.max((v - o).abs());
        if o > MULT_FLOOR && v > 0.0 {
            a.max_ratio = a.max_ratio.max((v / o).max(o / v));
        }
        a.min_pixel = a.min_pixel.min(v);
        a.max_pixel = a.max_pixel.max(v);
    }
    a.changed_items = (0..x.dim0()).filter(|&i| x.item(i) != adv.item(i)).count();
    a
}

/// Craft on `substitute` with momentum iterations, score on `target`.
pub fn blackbox_transfer<T: Scalar>(
    substitute: &Detector<T>,
    target: &Detector<T>,
    x: &Tensor<T>,
    y: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let mut cfg = cfg.clone();
    cfg.kind = AttackKind::Mifgsm;
    if matches!(cfg.loss, LossMode::KnowA | LossMode::KnowB) && !substitute.has_principals() {
        cfg.loss = LossMode::Output;
    }
    let adv = craft_adversarial(substitute, x, y, &cfg)?;
    target.novelty_scores(&adv, CHUNK)
}

pub mod budget {
    //! Budgets written as plain numbers or `"N/D"` fractions.

    use serde::de::{self, Deserializer, Visitor};

    pub fn parse(text: &str) -> Option<f64> {
        let text = text.trim();
        match text.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().ok()?;
                let d: f64 = d.trim().parse().ok()?;
                (d != 0.0).then_some(n / d)
            }
            None => text.parse().ok(),
        }
    }

    /// `N/255` when the budget is a whole number of grey levels.
    pub fn display(eps: f64) -> String {
        let levels = eps * 255.0;
        let halves = levels * 2.0;
        if (halves - halves.round()).abs() < 1e-9 && eps < 1.0 {
            format!("{}/255", halves.round() / 2.0)
        } else {
            format!("{eps}")
        }
    }

    struct Budget;

    impl Visitor<'_> for Budget {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or a fraction string like \"25/255\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            parse(v).ok_or_else(|| E::custom(format!("cannot read budget {v:?}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(Budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_of_width_one() {
        let m = frame_mask(32, 32, 1);
        assert_eq!(m.iter().filter(|&&b| b).count(), 124);
        let m = frame_mask(4, 4, 1);
        assert_eq!(m.iter().filter(|&&b| b).count(), 12);
    }

    #[test]
    fn default_steps() {
        let c = AttackConfig::default();
        assert!((c.step() - 2.5 * DEFAULT_EPSILON / 5.0).abs() < 1e-15);
        let f = AttackConfig::default().with_kind(AttackKind::Fgsm);
        assert_eq!(f.step(), DEFAULT_EPSILON);
        assert_eq!(f.iterations(), 1);
        let m = AttackConfig {
            kind: AttackKind::Multadv,
            epsilon: 1.25,
            ..Default::default()
        };
        assert!((m.step().powi(5) - 1.25).abs() < 1e-12);
        let big = AttackConfig {
            t_max: 1,
            ..Default::default()
        };
        assert_eq!(big.step(), DEFAULT_EPSILON);
    }

    #[test]
    fn invalid_budgets() {
        let c = AttackConfig {
            epsilon: -0.1,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Contract(_))));
        let m = AttackConfig {
            kind: AttackKind::Multadv,
            epsilon: 0.9,
            ..Default::default()
        };
        assert!(matches!(m.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn digests_differ() {
        let a = AttackConfig::default();
        let b = AttackConfig::pgd(0.1);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), AttackConfig::default().digest());
    }
}
