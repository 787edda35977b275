//! Convolutional auto-encoder detectors (AE, DAE, VAE) with an optional
//! principal-latent purifier between encoder and decoder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{apply_layer, Layer, LayerKind, Mode, Scalar, Tape, Tensor, Var};
use crate::principals::{
    apply_principals_on_tape, PrincipalLatentComponents, PrincipalsConfig,
};

pub const STAGES: usize = 4;
pub const DEFAULT_BASE_CHANNELS: usize = 64;
pub const DEFAULT_DENOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Ae,
    Dae,
    Vae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub principals: Option<PrincipalsConfig>,
    pub denoise_sigma: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            kind: DetectorKind::Ae,
            channels: 1,
            image_size: 32,
            base_channels: DEFAULT_BASE_CHANNELS,
            principals: None,
            denoise_sigma: DEFAULT_DENOISE_SIGMA,
        }
    }
}

impl DetectorSpec {
    pub fn latent_side(&self) -> usize {
        self.image_size >> (STAGES - 1)
    }

    /// `s`: spatial positions of the latent.
    pub fn positions(&self) -> usize {
        self.latent_side() * self.latent_side()
    }

    /// `v`: latent channels.
    pub fn latent_channels(&self) -> usize {
        self.base_channels << (STAGES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "detector channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        if self.kind == DetectorKind::Dae && !(self.denoise_sigma >= 0.0) {
            return Err(Error::config("denoise_sigma must be non-negative"));
        }
        if let Some(p) = &self.principals {
            p.validate(self.positions())?;
        }
        Ok(())
    }

    fn channel_plan(&self) -> [usize; STAGES + 1] {
        let b = self.base_channels;
        [self.channels, b, 2 * b, 4 * b, 8 * b]
    }

    fn encoder_kinds(&self) -> Vec<LayerKind> {
        let ch = self.channel_plan();
        let mut k = Vec::new();
        for i in 0..STAGES {
            k.push(LayerKind::Conv3x3 {
                in_channels: ch[i],
                out_channels: ch[i + 1],
            });
            k.push(LayerKind::BatchNorm { channels: ch[i + 1] });
            let last = i == STAGES - 1;
            k.push(if last && self.principals.is_some() {
                LayerKind::Sigmoid
            } else {
                LayerKind::Relu
            });
            if !last {
                k.push(LayerKind::MaxPool2);
            }
        }
        k
    }

    fn decoder_kinds(&self) -> Vec<LayerKind> {
        let ch = self.channel_plan();
        let mut k = Vec::new();
        for i in (0..STAGES).rev() {
            k.push(LayerKind::Conv3x3 {
                in_channels: ch[i + 1],
                out_channels: ch[i],
            });
            k.push(LayerKind::BatchNorm { channels: ch[i] });
            k.push(LayerKind::Relu);
            if i > 0 {
                k.push(LayerKind::BilinearUp2);
            }
        }
        k
    }

    /// Closed-form count of trainable parameters.
    pub fn analytic_parameter_count(&self) -> usize {
        let ch = self.channel_plan();
        let conv = |i: usize, o: usize| o * i * 9 + o + 2 * o;
        let mut n = 0;
        for s in 0..STAGES {
            n += conv(ch[s], ch[s + 1]) + conv(ch[s + 1], ch[s]);
        }
        if self.kind == DetectorKind::Vae {
            let v = self.latent_channels();
            n += 2 * (v * v + v);
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeHeads<T> {
    pub mean: Layer<T>,
    pub log_var: Layer<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector<T> {
    pub spec: DetectorSpec,
    pub encoder: Vec<Layer<T>>,
    pub heads: Option<VaeHeads<T>>,
    pub decoder: Vec<Layer<T>>,
    pub components: Option<PrincipalLatentComponents>,
}

/// Runtime options for one pass through the network.
pub struct Pass<'a> {
    pub mode: Mode,
    pub track_params: bool,
    /// Source of DAE input noise and VAE samples; used only in train mode.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Pass<'_> {
    pub fn eval() -> Self {
        Pass {
            mode: Mode::Eval,
            track_params: false,
            rng: None,
        }
    }

    pub fn eval_tracked() -> Self {
        Pass {
            mode: Mode::Eval,
            track_params: true,
            rng: None,
        }
    }
}

/// Handles produced by a forward pass.
pub struct Trace {
    pub input: Var,
    /// Encoder output as `(b*s) x v` rows, before purification.
    pub latent: Var,
    /// Latent after the purifier, when present.
    pub purified: Option<Var>,
    pub recon: Var,
    pub kl: Option<Var>,
    /// Parameter leaves in [`Detector::parameters`] order.
    pub params: Vec<Var>,
    /// `(layer index in [`Detector::layers`] order, train-mode batchnorm node)`.
    pub norms: Vec<(usize, Var)>,
    pub batch: usize,
}

/// First half of a pass; completed by [`Detector::finish`].
pub struct Encoded {
    trace: Trace,
    side: usize,
}

impl Encoded {
    pub fn latent(&self) -> Var {
        self.trace.latent
    }

    pub fn batch(&self) -> usize {
        self.trace.batch
    }
}

impl<T: Scalar> Detector<T> {
    pub fn build(spec: &DetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = spec
            .encoder_kinds()
            .into_iter()
            .map(|k| Layer::init(k, &mut rng))
            .collect();
        let heads = (spec.kind == DetectorKind::Vae).then(|| {
            let v = spec.latent_channels();
            let kind = LayerKind::Linear {
                inputs: v,
                outputs: v,
            };
            VaeHeads {
                mean: Layer::init(kind, &mut rng),
                log_var: Layer::init(kind, &mut rng),
            }
        });
        let decoder = spec
            .decoder_kinds()
            .into_iter()
            .map(|k| Layer::init(k, &mut rng))
            .collect();
        Ok(Detector {
            spec: spec.clone(),
            encoder,
            heads,
            decoder,
            components: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            spec: self.spec.clone(),
            encoder: self.encoder.iter().map(|l| l.cast()).collect(),
            heads: self.heads.as_ref().map(|h| VaeHeads {
                mean: h.mean.cast(),
                log_var: h.log_var.cast(),
            }),
            decoder: self.decoder.iter().map(|l| l.cast()).collect(),
            components: self.components.clone(),
        }
    }

    /// Encoder, VAE heads (mean then log-variance), decoder.
    pub fn layers(&self) -> Vec<&Layer<T>> {
        let mut v: Vec<&Layer<T>> = self.encoder.iter().collect();
        if let Some(h) = &self.heads {
            v.push(&h.mean);
            v.push(&h.log_var);
        }
        v.extend(self.decoder.iter());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        let mut v: Vec<&mut Layer<T>> = self.encoder.iter_mut().collect();
        if let Some(h) = &mut self.heads {
            v.push(&mut h.mean);
            v.push(&mut h.log_var);
        }
        v.extend(self.decoder.iter_mut());
        v
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers().into_iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn has_principals(&self) -> bool {
        self.spec.principals.is_some()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let s = &self.spec;
        match shape {
            [b, c, h, w] if *c == s.channels && *h == s.image_size && *w == s.image_size => Ok(*b),
            _ => Err(Error::contract(format!(
                "detector expects (b, {}, {}, {}) input, got {shape:?}",
                s.channels, s.image_size, s.image_size
            ))),
        }
    }

    /// Push the encoder onto `tape`.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, x: Var, pass: &mut Pass) -> Result<Encoded> {
        let b = self.check_input(tape.shape(x))?;
        let mut trace = Trace {
            input: x,
            latent: x,
            purified: None,
            recon: x,
            kl: None,
            params: Vec::new(),
            norms: Vec::new(),
            batch: b,
        };
        let mut h = x;
        if pass.mode == Mode::Train && self.spec.kind == DetectorKind::Dae && self.spec.denoise_sigma > 0.0 {
            if let Some(rng) = pass.rng.as_deref_mut() {
                let sigma = self.spec.denoise_sigma;
                let noise: Vec<T> = (0..tape.value(x).len())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::of(sigma * z)
                    })
                    .collect();
                let noise = tape.leaf(Tensor::new(tape.shape(x).to_vec(), noise)?, false);
                h = tape.add(h, noise)?;
            }
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            h = self.push_layer(tape, layer, h, pass, i, &mut trace)?;
        }
        let side = tape.shape(h)[2];
        trace.latent = tape.to_rows(h)?;
        Ok(Encoded { trace, side })
    }

    fn push_layer(
        &self,
        tape: &mut Tape<T>,
        layer: &Layer<T>,
        h: Var,
        pass: &Pass,
        index: usize,
        trace: &mut Trace,
    ) -> Result<Var> {
        let a = apply_layer(layer, h, tape, pass.mode, pass.track_params)?;
        trace.params.extend(a.params);
        if let Some(n) = a.norm_node {
            trace.norms.push((index, n));
        }
        Ok(a.output)
    }

    /// Purifier, VAE bottleneck and decoder.
    pub fn finish(&self, tape: &mut Tape<T>, enc: Encoded, pass: &mut Pass) -> Result<Trace> {
        let Encoded { mut trace, side } = enc;
        let b = trace.batch;
        let mut z = trace.latent;
        if self.has_principals() {
            let comp = self.components.as_ref().ok_or_else(|| {
                Error::Usage("principal latent components are not initialized".into())
            })?;
            z = apply_principals_on_tape(tape, z, comp, b)?;
            trace.purified = Some(z);
        }
        let mut index = self.encoder.len();
        if let Some(heads) = &self.heads {
            let mu = self.push_layer(tape, &heads.mean, z, pass, index, &mut trace)?;
            let lv = self.push_layer(tape, &heads.log_var, z, pass, index + 1, &mut trace)?;
            index += 2;
            // KL(q || N(0, I)) averaged over latent elements
            let var = tape.exp(lv)?;
            let mu2 = tape.square(mu)?;
            let t = tape.add(var, mu2)?;
            let t = tape.sub(t, lv)?;
            let t = tape.add_scalar(t, -1.0)?;
            let t = tape.mean(t)?;
            trace.kl = Some(tape.scale(t, 0.5)?);
            z = mu;
            if pass.mode == Mode::Train {
                if let Some(rng) = pass.rng.as_deref_mut() {
                    let n = tape.value(mu).len();
                    let eps: Vec<T> = (0..n)
                        .map(|_| T::of(StandardNormal.sample(rng)))
                        .collect();
                    let eps = tape.leaf(Tensor::new(tape.shape(mu).to_vec(), eps)?, false);
                    let half = tape.scale(lv, 0.5)?;
                    let std = tape.exp(half)?;
                    let noise = tape.mul(std, eps)?;
                    z = tape.add(mu, noise)?;
                }
            }
        }
        let v = self.spec.latent_channels();
        let mut h = tape.from_rows(z, [b, v, side, side])?;
        for layer in &self.decoder {
            h = self.push_layer(tape, layer, h, pass, index, &mut trace)?;
            index += 1;
        }
        trace.recon = h;
        Ok(trace)
    }

    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var, pass: &mut Pass) -> Result<Trace> {
        let enc = self.encode_on_tape(tape, x, pass)?;
        self.finish(tape, enc, pass)
    }

    /// Encoder output `(b*s) x v` in eval mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let enc = self.encode_on_tape(&mut tape, xv, &mut Pass::eval())?;
        Ok(tape.value(enc.latent()).clone())
    }

    /// Decoder output for a `(b*s) x v` code in eval mode. The code is fed
    /// to the decoder directly (no purifier, VAE mean path skipped).
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let v = self.spec.latent_channels();
        let s = self.spec.positions();
        let b = match z.shape() {
            [rows, c] if *c == v && rows % s == 0 => rows / s,
            other => {
                return Err(Error::contract(format!(
                    "decode expects (b*{s}) x {v} latent, got {other:?}"
                )))
            }
        };
        let side = self.spec.latent_side();
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), false);
        let mut h = tape.from_rows(zv, [b, v, side, side])?;
        let pass = Pass::eval();
        for layer in &self.decoder {
            h = apply_layer(layer, h, &mut tape, pass.mode, false)?.output;
        }
        Ok(tape.value(h).clone())
    }

    /// Eval-mode reconstruction.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let tr = self.forward_on_tape(&mut tape, xv, &mut Pass::eval())?;
        Ok(tape.value(tr.recon).clone())
    }

    /// Latent as seen by the decoder input stage: purified when the
    /// purifier is attached, raw encoder output otherwise.
    pub fn effective_latent(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut pass = Pass::eval();
        let enc = self.encode_on_tape(&mut tape, xv, &mut pass)?;
        match &self.components {
            Some(c) if self.has_principals() => {
                let b = enc.batch();
                let p = apply_principals_on_tape(&mut tape, enc.latent(), c, b)?;
                Ok(tape.value(p).clone())
            }
            _ => Ok(tape.value(enc.latent()).clone()),
        }
    }

    /// Per-item `||X_hat - X||_2` in eval mode, in chunks of `chunk` items.
    pub fn novelty_scores(&self, x: &Tensor<T>, chunk: usize) -> Result<Vec<f64>> {
        let n = self.check_input(x.shape())?;
        let per = x.item_len();
        let mut scores = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            let recon = self.reconstruct(&part)?;
            scores.extend(item_distances(&recon, &part));
            start = end;
        }
        Ok(scores)
    }

    /// Fresh components are required before a purifier-equipped model can
    /// run; used when a model is built outside the training loop.
    pub fn init_components_from(&mut self, x: &Tensor<T>) -> Result<()> {
        if let Some(cfg) = self.spec.principals.clone() {
            let z = self.encode(x)?;
            let b = x.dim0();
            self.components = Some(crate::principals::ema_step(
                None, &z, b, cfg.k_s, 1.0, 1.0,
            )?);
        }
        Ok(())
    }
}

/// Per-item Euclidean distances between equally shaped batches.
pub fn item_distances<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    (0..a.dim0())
        .map(|i| {
            a.item(i)
                .iter()
                .zip(b.item(i))
                .map(|(&p, &q)| {
                    let d = p.f64() - q.f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Draw a fresh RNG stream for stochastic layers from a parent generator.
pub fn child_rng<R: Rng>(parent: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parent.random())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: DetectorKind, pls: bool) -> DetectorSpec {
        DetectorSpec {
            kind,
            channels: 1,
            image_size: 8,
            base_channels: 2,
            principals: pls.then(|| PrincipalsConfig {
                k_s: 1,
                ..Default::default()
            }),
            denoise_sigma: 0.1,
        }
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let spec = DetectorSpec {
            base_channels: 4,
            ..Default::default()
        };
        let d = Detector::<f32>::build(&spec, 1).unwrap();
        let x = Tensor::full(&[2, 1, 32, 32], 0.5f32);
        let z = d.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2 * 16, 32]);
        let r = d.decode(&z).unwrap();
        assert_eq!(r.shape(), x.shape());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for kind in [DetectorKind::Ae, DetectorKind::Vae] {
            let spec = DetectorSpec {
                kind,
                base_channels: 8,
                ..Default::default()
            };
            let d = Detector::<f32>::build(&spec, 0).unwrap();
            assert_eq!(d.parameter_count(), spec.analytic_parameter_count());
        }
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let spec = tiny(DetectorKind::Vae, true);
        let a = Detector::<f32>::build(&spec, 5).unwrap();
        let b = Detector::<f32>::build(&spec, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_extent_is_a_contract_error() {
        let d = Detector::<f32>::build(&tiny(DetectorKind::Ae, false), 0).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.0f32);
        assert!(matches!(d.encode(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_latent_is_bounded() {
        let mut d = Detector::<f32>::build(&tiny(DetectorKind::Ae, true), 0).unwrap();
        let x = Tensor::full(&[3, 1, 8, 8], 0.3f32);
        d.init_components_from(&x).unwrap();
        let z = d.encode(&x).unwrap();
        assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn scores_are_per_item() {
        let d = Detector::<f64>::build(&tiny(DetectorKind::Ae, false), 2).unwrap();
        let a: Vec<f64> = (0..64).map(|i| (i as f64 / 64.0).sin().abs()).collect();
        let b: Vec<f64> = (0..64).map(|i| (i as f64 / 9.0).cos().abs()).collect();
        let ab = Tensor::from_f64(&[2, 1, 8, 8], &[a.clone(), b.clone()].concat()).unwrap();
        let ba = Tensor::from_f64(&[2, 1, 8, 8], &[b, a].concat()).unwrap();
        let s1 = d.novelty_scores(&ab, 8).unwrap();
        let s2 = d.novelty_scores(&ba, 1).unwrap();
        assert_eq!(s1[0], s2[1]);
        assert_eq!(s1[1], s2[0]);
    }
}
