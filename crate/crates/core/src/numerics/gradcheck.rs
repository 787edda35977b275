//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per input; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub coords: Vec<CoordError>,
    pub max_relative: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_relative < self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compare tape adjoints of the scalar `model(inputs)` against central
/// differences for each input coordinate.
pub fn finite_diff_check<F>(model: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = model(&mut tape, &vars)?;
    let grads = tape.backward(out, Tensor::scalar(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let picks: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut p = sample(&mut rng, input.len(), m).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..input.len()).collect(),
        };
        for idx in picks {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[idx] = input.data()[idx] + opts.step;
            let up = evaluate(&model, &probe)?;
            probe[i].data_mut()[idx] = input.data()[idx] - opts.step;
            let down = evaluate(&model, &probe)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let relative = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(relative);
            coords.push(CoordError {
                input: i,
                index: idx,
                analytic: a,
                numeric,
                relative,
            });
        }
    }
    Ok(GradReport {
        coords,
        max_relative: worst,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let r = finite_diff_check(
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.sum(s)
            },
            &[Tensor::scalar(0.0)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((r.coords[0].analytic - 0.25).abs() < 1e-15);
        assert!(r.passed());
    }
}
