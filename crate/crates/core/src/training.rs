//! Natural and adversarial training of one-class detectors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft_adversarial, AttackConfig};
use crate::detectors::{child_rng, Detector, Pass};
use crate::error::{Error, Result};
use crate::numerics::{Mode, Scalar, Tape, Tensor};
use crate::principals::ema_step;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Natural,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub mode: TrainMode,
    /// Leading epochs trained on clean batches in adversarial mode.
    pub natural_warmup_epochs: usize,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 5e-5,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![20, 40],
            lr_drop_factor: 10.0,
            mode: TrainMode::Natural,
            natural_warmup_epochs: 0,
            attack: AttackConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr = {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if let Some(&d) = self.lr_drop_epochs.iter().find(|&&d| d >= self.epochs) {
            return Err(Error::config(format!(
                "lr drop epoch {d} is not below the epoch budget {}",
                self.epochs
            )));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(Error::config("lr_drop_factor must be >= 1"));
        }
        if self.mode == TrainMode::Adversarial {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Multiplier applied at 0-based `epoch` to both the learning rate and
    /// the EMA rates.
    pub fn decay_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr_drop_factor.powi(-(drops as i32))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_at(epoch)
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps, wd) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.expect_same_shape(g, "adam gradient")?;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + wd * *w;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub adversarial: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub iterations: usize,
    /// Number of crafting calls and whether every label passed was +1.
    pub attack_calls: usize,
    pub attack_labels_positive: bool,
    /// Worst component invariant violation seen after any iteration.
    pub worst_component_error: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss,adversarial\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:e},{:e},{}\n",
                e.epoch, e.lr, e.mean_loss, e.adversarial
            ));
        }
        s
    }
}

/// Labels are fixed to +1: only known-class data is available in training.
pub fn adversarial_batch<T: Scalar>(
    model: &Detector<T>,
    clean: &Tensor<T>,
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    let y = vec![1.0; clean.dim0()];
    craft_adversarial(model, clean, &y, cfg)
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

fn with_context(e: Error, epoch: usize, iter: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, iteration {iter}: {m}")),
        other => other,
    }
}

/// One weight update on `input` with reconstruction target `target`.
/// Returns the loss value.
pub fn train_step<T: Scalar>(
    model: &mut Detector<T>,
    opt: &mut Adam<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    lr: f64,
    eta_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut noise = child_rng(rng);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let mut pass = Pass {
        mode: Mode::Train,
        track_params: true,
        rng: Some(&mut noise),
    };
    let enc = model.encode_on_tape(&mut tape, x, &mut pass)?;
    if let Some(cfg) = model.spec.principals.clone() {
        let z = tape.value(enc.latent());
        let updated = ema_step(
            model.components.as_ref(),
            z,
            enc.batch(),
            cfg.k_s,
            cfg.eta_v * eta_scale,
            cfg.eta_s * eta_scale,
        )?;
        model.components = Some(updated);
    }
    let trace = model.finish(&mut tape, enc, &mut pass)?;
    let t = tape.leaf(target.clone(), false);
    let d = tape.sub(trace.recon, t)?;
    let sq = tape.square(d)?;
    let mut loss = tape.mean(sq)?;
    if let Some(kl) = trace.kl {
        loss = tape.add(loss, kl)?;
    }
    let value = tape.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::numeric("training loss is not finite"));
    }
    let moments: Vec<(usize, Vec<f64>, Vec<f64>, usize)> = trace
        .norms
        .iter()
        .map(|&(layer, node)| {
            let (m, v) = tape.batch_moments(node).expect("train-mode batchnorm");
            let count = tape.value(node).len() / m.len();
            (layer, m.to_vec(), v.to_vec(), count)
        })
        .collect();
    let mut grads = tape.backward(loss, Tensor::scalar(T::one()))?;
    let gs: Vec<Tensor<T>> = trace
        .params
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    for (layer, m, v, count) in moments {
        let mut layers = model.layers_mut();
        layers[layer]
            .norm
            .as_mut()
            .expect("batchnorm state")
            .absorb(&m, &v, count);
    }
    opt.update(&mut model.parameters_mut(), &gs, lr)?;
    Ok(value)
}

/// Train `spec`-shaped `model` on known-class images `data`.
pub fn train_one_class<T: Scalar>(
    model: &mut Detector<T>,
    data: &Tensor<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.rank() != 4 || data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let n = data.dim0();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        attack_labels_positive: true,
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let scale = cfg.decay_at(epoch);
        let adversarial = cfg.mode == TrainMode::Adversarial && epoch >= cfg.natural_warmup_epochs;
        let mut total = 0.0;
        let mut batches = 0;
        for (iter, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean = gather(data, idx)?;
            // the purifier needs components before it can be attacked
            let ready = !model.has_principals() || model.components.is_some();
            let input = if adversarial && ready {
                report.attack_calls += 1;
                adversarial_batch(model, &clean, &cfg.attack)
                    .map_err(|e| with_context(e, epoch, iter))?
            } else {
                clean
            };
            let loss = train_step(model, &mut opt, &input, &input, lr, scale, &mut rng)
                .map_err(|e| with_context(e, epoch, iter))?;
            if let Some(c) = &model.components {
                report.worst_component_error = report.worst_component_error.max(c.invariant_error());
                if !c.all_finite() {
                    return Err(with_context(
                        Error::numeric("principal latent components are not finite"),
                        epoch,
                        iter,
                    ));
                }
            }
            total += loss;
            batches += 1;
            report.iterations += 1;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            mean_loss: total / batches as f64,
            adversarial,
        };
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 5e-5);
        assert!((c.lr_at(20) - 5e-6).abs() < 1e-20);
        assert!((c.lr_at(40) - 5e-7).abs() < 1e-20);
        assert!((c.lr_at(19) - 5e-5).abs() < 1e-20);
    }

    #[test]
    fn adam_matches_hand_update() {
        // one step: g = 2 + wd*1; m_hat = g; v_hat = g^2; w = 1 - lr*g/(|g|+eps)
        let mut w = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut opt = Adam::new(1e-4);
        opt.update(&mut [&mut w], std::slice::from_ref(&g), 0.1).unwrap();
        let gp = 2.0 + 1e-4;
        let expect = 1.0 - 0.1 * gp / (gp + 1e-8);
        assert!((w.data()[0] - expect).abs() < 1e-12);
        // second step by the recurrences
        let w1 = w.data()[0];
        opt.update(&mut [&mut w], &[g], 0.1).unwrap();
        let g2 = 2.0 + 1e-4 * w1;
        let m = 0.9 * 0.1 * gp + 0.1 * g2;
        let v = 0.999 * 0.001 * gp * gp + 0.001 * g2 * g2;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        let expect = w1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((w.data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn invalid_config() {
        let c = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
