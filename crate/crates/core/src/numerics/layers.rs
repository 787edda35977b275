//! Layer catalog of the detector backbone.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3 { in_channels: usize, out_channels: usize },
    MaxPool2,
    BilinearUp2,
    BatchNorm { channels: usize },
    Relu,
    Sigmoid,
    Linear { inputs: usize, outputs: usize },
}

/// Running statistics of a batchnorm layer (unbiased variance, as in the
/// usual exponential-average convention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Fold batch moments (biased variance over `count` samples) into the
    /// running averages.
    pub fn absorb(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * biased_var[c] * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub kind: LayerKind,
    /// conv: `[weight (o,c,3,3), bias (o)]`; batchnorm: `[gamma, beta]`;
    /// linear: `[weight (in,out), bias (out)]`.
    pub params: Vec<Tensor<T>>,
    pub norm: Option<BatchNormState>,
}

/// Result of [`apply_layer`]: output plus handles to the parameter leaves.
pub struct Applied {
    pub output: Var,
    pub params: Vec<Var>,
    /// Train-mode batchnorm node whose batch moments feed the running stats.
    pub norm_node: Option<Var>,
}

fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl<T: Scalar> Layer<T> {
    /// Kaiming fan-in initialization for weights; zero biases; unit gamma.
    pub fn init<R: Rng>(kind: LayerKind, rng: &mut R) -> Self {
        let (params, norm) = match kind {
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => (
                vec![
                    kaiming(rng, &[out_channels, in_channels, 3, 3], in_channels * 9),
                    Tensor::zeros(&[out_channels]),
                ],
                None,
            ),
            LayerKind::Linear { inputs, outputs } => (
                vec![
                    kaiming(rng, &[inputs, outputs], inputs),
                    Tensor::zeros(&[outputs]),
                ],
                None,
            ),
            LayerKind::BatchNorm { channels } => (
                vec![
                    Tensor::full(&[channels], T::one()),
                    Tensor::zeros(&[channels]),
                ],
                Some(BatchNormState::new(channels)),
            ),
            _ => (vec![], None),
        };
        Layer { kind, params, norm }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            params: self.params.iter().map(|p| p.cast()).collect(),
            norm: self.norm.clone(),
        }
    }
}

/// Append `layer` applied to `input` onto `tape`.
///
/// Parameters enter the tape as leaves; `track_params` marks them as
/// requiring gradients.
pub fn apply_layer<T: Scalar>(
    layer: &Layer<T>,
    input: Var,
    tape: &mut Tape<T>,
    mode: Mode,
    track_params: bool,
) -> Result<Applied> {
    let params: Vec<Var> = layer
        .params
        .iter()
        .map(|p| tape.leaf(p.clone(), track_params))
        .collect();
    let mut norm_node = None;
    let output = match layer.kind {
        LayerKind::Conv3x3 { in_channels, .. } => {
            let s = tape.shape(input);
            if s.len() != 4 || s[1] != in_channels {
                return Err(Error::shape(format!(
                    "conv3x3 with {in_channels} input channels applied to {s:?}"
                )));
            }
            tape.conv3x3(input, params[0], params[1])?
        }
        LayerKind::MaxPool2 => tape.maxpool2(input)?,
        LayerKind::BilinearUp2 => tape.upsample2(input)?,
        LayerKind::BatchNorm { .. } => match mode {
            Mode::Train => {
                let v = tape.batchnorm_train(input, params[0], params[1], BN_EPS)?;
                norm_node = Some(v);
                v
            }
            Mode::Eval => {
                let st = layer.norm.as_ref().expect("batchnorm state");
                tape.batchnorm_eval(
                    input,
                    params[0],
                    params[1],
                    st.mean.clone(),
                    st.var.clone(),
                    BN_EPS,
                )?
            }
        },
        LayerKind::Relu => tape.relu(input)?,
        LayerKind::Sigmoid => tape.sigmoid(input)?,
        LayerKind::Linear { .. } => tape.linear(input, params[0], params[1])?,
    };
    Ok(Applied {
        output,
        params,
        norm_node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_layer(kernel: [f64; 9]) -> Layer<f64> {
        Layer {
            kind: LayerKind::Conv3x3 {
                in_channels: 1,
                out_channels: 1,
            },
            params: vec![
                Tensor::from_f64(&[1, 1, 3, 3], &kernel).unwrap(),
                Tensor::zeros(&[1]),
            ],
            norm: None,
        }
    }

    fn run(layer: &Layer<f64>, x: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let a = apply_layer(layer, v, &mut tape, Mode::Eval, false).unwrap();
        tape.value(a.output).clone()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::from_f64(&[1, 1, 4, 5], &x).unwrap();
        let y = run(&conv_layer([0., 0., 0., 0., 1., 0., 0., 0., 0.]), x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_ones() {
        let y = run(
            &conv_layer([1.0; 9]),
            Tensor::full(&[1, 1, 3, 3], 1.0),
        );
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn maxpool_of_four() {
        let layer = Layer::<f64>::init(LayerKind::MaxPool2, &mut ChaCha8Rng::seed_from_u64(0));
        let y = run(&layer, Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let layer = conv_layer([0.0; 9]);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        assert!(matches!(
            apply_layer(&layer, v, &mut tape, Mode::Eval, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let kind = LayerKind::Conv3x3 {
            in_channels: 3,
            out_channels: 4,
        };
        let a = Layer::<f32>::init(kind, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Layer::<f32>::init(kind, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 4 * 3 * 9 + 4);
    }
}
