//! Property and oracle criteria that need no trained model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{jacobi_eigh, pairwise_auroc, sweep_fpr};
use super::Outcome;
use crate::attacks::{craft_adversarial, frame_mask, AttackConfig, AttackKind, LossMode, TargetSubset};
use crate::detectors::{Detector, DetectorKind, DetectorSpec, Pass};
use crate::error::Result;
use crate::evaluation::{auroc, fpr_at_tpr};
use crate::numerics::eigh::fix_sign;
use crate::numerics::{finite_diff_check, GradCheckOptions, Mode, Tape, Tensor, Trans, Var};
use crate::pca::{fit_pca, forward_pca, inverse_pca};
use crate::principals::{apply_principals, ema_step, fit_spatial, fit_vector, PrincipalsConfig};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn failed(id: u8, name: &str, limit: f64, t0: Instant, e: crate::Error) -> Outcome {
    Outcome::new(id, name, format!("error: {e}"), "no error".into(), false, t0, limit)
}

/// Worst deviations of the production PCA from the Jacobi oracle.
#[derive(Default, Debug)]
pub struct PcaAgreement {
    pub mean: f64,
    pub variance: f64,
    pub reconstruction: f64,
    pub direction: f64,
    pub full_rank: f64,
    pub orthonormality: f64,
    pub compared_reconstructions: usize,
}

pub fn pca_agreement(cases: usize, seed: u64) -> Result<PcaAgreement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = PcaAgreement::default();
    for _ in 0..cases {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=32);
        let k = rng.random_range(1..=d);
        let mut x = random(&mut rng, &[n, d], -1.0, 1.0);
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            *v *= 1.0 + (j % d) as f64 * 0.3;
        }
        let comp = fit_pca(&x, k)?;
        let xs = x.data();
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| xs[i * d + j]).sum::<f64>() / n as f64).collect();
        let mut scatter = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                scatter[a * d + b] = (0..n)
                    .map(|i| (xs[i * d + a] - mean[a]) * (xs[i * d + b] - mean[b]))
                    .sum();
            }
        }
        let (vals, vecs) = jacobi_eigh(&scatter, d);
        let top = vals[0].abs().max(1.0);
        for j in 0..d {
            w.mean = w.mean.max((comp.mean[j] - mean[j]).abs());
        }
        let y = forward_pca(&x, &comp)?;
        let captured: f64 = y.data().iter().map(|v| v * v).sum();
        let want: f64 = vals[..k].iter().sum();
        w.variance = w.variance.max((captured - want).abs() / top);
        w.orthonormality = w.orthonormality.max(comp.orthonormality_error());

        let gap = |j: usize| j + 1 >= d || vals[j] - vals[j + 1] > 1e-6 * top;
        if gap(k - 1) || vals[k - 1] < 1e-9 * top {
            let recon = inverse_pca(&y, &comp)?;
            for i in 0..n {
                for c in 0..d {
                    let mut v = mean[c];
                    for j in 0..k {
                        let coef: f64 = (0..d).map(|r| (xs[i * d + r] - mean[r]) * vecs[r * d + j]).sum();
                        v += coef * vecs[c * d + j];
                    }
                    w.reconstruction = w.reconstruction.max((recon.data()[i * d + c] - v).abs());
                }
            }
            w.compared_reconstructions += 1;
        }
        for j in 0..k {
            let isolated = gap(j) && (j == 0 || vals[j - 1] - vals[j] > 1e-6 * top);
            if isolated && vals[j] > 1e-6 * top {
                let mut o: Vec<f64> = (0..d).map(|r| vecs[r * d + j]).collect();
                fix_sign(&mut o);
                let u = comp.column(j);
                let dev = o.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                w.direction = w.direction.max(dev);
            }
        }
        let full = fit_pca(&x, d)?;
        let back = inverse_pca(&forward_pca(&x, &full)?, &full)?;
        w.full_rank = w.full_rank.max(back.max_abs_diff(&x));
    }
    Ok(w)
}

pub fn criterion_1(seed: u64) -> Outcome {
    let (name, limit) = ("PCA oracle equivalence", 10.0);
    let t0 = Instant::now();
    match pca_agreement(100, seed) {
        Ok(w) => {
            let agree = w.mean.max(w.variance).max(w.reconstruction).max(w.direction);
            Outcome::new(
                1,
                name,
                format!(
                    "100 cases; max oracle deviation {agree:.2e} (mean {:.1e}, variance {:.1e}, projection {:.1e} over {} cases, direction {:.1e}); k=d reconstruction {:.2e}; orthonormality {:.1e}",
                    w.mean, w.variance, w.reconstruction, w.compared_reconstructions, w.direction, w.full_rank, w.orthonormality
                ),
                "oracle deviation <= 1e-8, k=d reconstruction <= 1e-8, < 10 s".into(),
                agree <= 1e-8 && w.full_rank <= 1e-8 && w.orthonormality <= 1e-8,
                t0,
                limit,
            )
        }
        Err(e) => failed(1, name, limit, t0, e),
    }
}

fn check_fn<F>(f: F, inputs: &[Tensor<f64>], coords: Option<usize>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        max_coords: coords,
        seed,
        ..Default::default()
    };
    Ok(finite_diff_check(f, inputs, &opts)?.max_relative)
}

/// Scalar readout `sum(out * r)` with a fixed random `r`.
fn readout(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    // must not replay the input stream: r == x makes batchnorm gradients vanish
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ead_0007);
    let shape = tape.shape(out).to_vec();
    let r = random(&mut rng, &shape, -1.0, 1.0);
    let r = tape.leaf(r, false);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

/// Max relative error per layer kind.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x4 = random(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[3], -0.5, 0.5);
    let g = random(&mut rng, &[2], 0.5, 1.5);
    let be = random(&mut rng, &[2], -0.5, 0.5);
    let x2 = random(&mut rng, &[4, 3], -1.0, 1.0);
    let lw = random(&mut rng, &[3, 5], -0.5, 0.5);
    let lb = random(&mut rng, &[5], -0.5, 0.5);
    let s = seed;
    let mut out = Vec::new();
    out.push((
        "conv3x3",
        check_fn(
            |t, v| {
                let o = t.conv3x3(v[0], v[1], v[2])?;
                readout(t, o, s)
            },
            &[x4.clone(), w, b],
            None,
            s,
        )?,
    ));
    out.push((
        "maxpool2",
        check_fn(
            |t, v| {
                let o = t.maxpool2(v[0])?;
                readout(t, o, s)
            },
            std::slice::from_ref(&x4),
            None,
            s,
        )?,
    ));
    out.push((
        "bilinear upsample",
        check_fn(
            |t, v| {
                let o = t.upsample2(v[0])?;
                readout(t, o, s)
            },
            std::slice::from_ref(&x4),
            None,
            s,
        )?,
    ));
    out.push((
        "batchnorm (train)",
        check_fn(
            |t, v| {
                let o = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                readout(t, o, s)
            },
            &[x4.clone(), g.clone(), be.clone()],
            None,
            s,
        )?,
    ));
    out.push((
        "batchnorm (eval)",
        check_fn(
            |t, v| {
                let o = t.batchnorm_eval(v[0], v[1], v[2], vec![0.1, -0.2], vec![0.5, 2.0], 1e-5)?;
                readout(t, o, s)
            },
            &[x4.clone(), g, be],
            None,
            s,
        )?,
    ));
    out.push((
        "relu",
        check_fn(
            |t, v| {
                let o = t.relu(v[0])?;
                readout(t, o, s)
            },
            std::slice::from_ref(&x4),
            None,
            s,
        )?,
    ));
    out.push((
        "sigmoid",
        check_fn(
            |t, v| {
                let o = t.sigmoid(v[0])?;
                readout(t, o, s)
            },
            &[x4],
            None,
            s,
        )?,
    ));
    out.push((
        "linear",
        check_fn(
            |t, v| {
                let o = t.linear(v[0], v[1], v[2])?;
                readout(t, o, s)
            },
            &[x2, lw, lb],
            None,
            s,
        )?,
    ));
    Ok(out)
}

/// Input-gradient check of `sum_i ||X_hat_i - X_i||` through the whole model.
pub fn model_input_gradcheck(model: &Detector<f64>, x: &Tensor<f64>, coords: usize, seed: u64) -> Result<f64> {
    check_fn(
        |t, v| {
            let tr = model.forward_on_tape(t, v[0], &mut Pass::eval())?;
            let d = t.sub(tr.recon, v[0])?;
            let n = t.item_l2(d)?;
            t.sum(n)
        },
        std::slice::from_ref(x),
        Some(coords),
        seed,
    )
}

fn train_loss(model: &Detector<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let mut pass = Pass {
        mode: Mode::Train,
        track_params: false,
        rng: None,
    };
    let tr = model.forward_on_tape(&mut tape, xv, &mut pass)?;
    let l = mse_on_tape(&mut tape, tr.recon, xv, tr.kl)?;
    Ok(tape.value(l).data()[0])
}

fn mse_on_tape(tape: &mut Tape<f64>, recon: Var, x: Var, kl: Option<Var>) -> Result<Var> {
    let d = tape.sub(recon, x)?;
    let sq = tape.square(d)?;
    let m = tape.mean(sq)?;
    match kl {
        Some(k) => tape.add(m, k),
        None => Ok(m),
    }
}

/// Parameter-gradient check of the train-mode reconstruction loss on
/// `coords` sampled weight coordinates.
pub fn model_param_gradcheck(model: &Detector<f64>, x: &Tensor<f64>, coords: usize, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let mut pass = Pass {
        mode: Mode::Train,
        track_params: true,
        rng: None,
    };
    let tr = model.forward_on_tape(&mut tape, xv, &mut pass)?;
    let l = mse_on_tape(&mut tape, tr.recon, xv, tr.kl)?;
    let grads = tape.backward(l, Tensor::scalar(1.0))?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let analytic = grads.get(tr.params[p]).map_or(0.0, |g| g.data()[flat]);
        let mut probe = model.clone();
        let base = model.parameters()[p].data()[flat];
        probe.parameters_mut()[p].data_mut()[flat] = base + h;
        let up = train_loss(&probe, x)?;
        probe.parameters_mut()[p].data_mut()[flat] = base - h;
        let down = train_loss(&probe, x)?;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn pipeline_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let ae = DetectorSpec {
        image_size: 8,
        base_channels: 2,
        ..Default::default()
    };
    let x8 = random(&mut rng, &[3, 1, 8, 8], 0.0, 1.0);
    let m = Detector::<f64>::build(&ae, seed)?;
    out.push(("AE backbone 8x8 (input)".into(), model_input_gradcheck(&m, &x8, 64, seed)?));
    out.push(("AE backbone 8x8 (weights)".into(), model_param_gradcheck(&m, &x8, 60, seed)?));
    let vae = DetectorSpec {
        kind: DetectorKind::Vae,
        ..ae.clone()
    };
    let m = Detector::<f64>::build(&vae, seed)?;
    out.push(("VAE 8x8 (input)".into(), model_input_gradcheck(&m, &x8, 64, seed)?));
    let pls = DetectorSpec {
        image_size: 16,
        base_channels: 2,
        principals: Some(PrincipalsConfig {
            k_s: 2,
            ..Default::default()
        }),
        ..Default::default()
    };
    let x16 = random(&mut rng, &[3, 1, 16, 16], 0.0, 1.0);
    let mut m = Detector::<f64>::build(&pls, seed)?;
    let fit = random(&mut rng, &[6, 1, 16, 16], 0.0, 1.0);
    m.init_components_from(&fit)?;
    out.push(("purifier pipeline 16x16 (input)".into(), model_input_gradcheck(&m, &x16, 64, seed)?));
    out.push(("purifier pipeline 16x16 (weights)".into(), model_param_gradcheck(&m, &x16, 60, seed)?));
    Ok(out)
}

pub fn criterion_2(seed: u64) -> Outcome {
    let (name, limit) = ("Gradient integrity", 60.0);
    let t0 = Instant::now();
    let run = || -> Result<Vec<(String, f64)>> {
        let mut all: Vec<(String, f64)> = layer_gradchecks(seed)?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        all.extend(pipeline_gradchecks(seed)?);
        Ok(all)
    };
    match run() {
        Ok(all) => {
            let worst = all.iter().map(|p| p.1).fold(0.0, f64::max);
            let detail: Vec<String> = all.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
            Outcome::new(
                2,
                name,
                format!("max relative error {worst:.2e} [{}]", detail.join("; ")),
                "relative error < 1e-4 for every check, < 60 s".into(),
                worst < 1e-4,
                t0,
                limit,
            )
        }
        Err(e) => failed(2, name, limit, t0, e),
    }
}

#[derive(Default, Debug)]
pub struct PrincipalsAlgebra {
    pub idempotence: f64,
    pub hand_case: f64,
    pub subspace_residual: f64,
    pub ema_invariant: f64,
    pub ema_limit: f64,
    pub ema_monotone: bool,
}

fn random_components(rng: &mut ChaCha8Rng, b: usize, s: usize, v: usize, k_s: usize) -> Result<crate::principals::PrincipalLatentComponents> {
    let z = random(rng, &[b * s, v], 0.0, 1.0);
    ema_step(None, &z, b, k_s, 1.0, 1.0)
}

/// Distance between the operators the components define: Euclidean on the
/// means and Frobenius on the projectors `U U^T`. Flipping the vector-stage
/// column negates the spatial coefficients, hence the spatial mean.
fn component_distance(a: &crate::principals::PrincipalLatentComponents, b: &crate::principals::PrincipalLatentComponents) -> f64 {
    let l2 = |x: &[f64], y: &[f64], sign: f64| x.iter().zip(y).map(|(p, q)| (p - sign * q).powi(2)).sum::<f64>().sqrt();
    let projector = |x: &crate::pca::PcaComponents, y: &crate::pca::PcaComponents| {
        let (d, k) = (x.dim(), x.k());
        let (u, w) = (x.basis.data(), y.basis.data());
        let mut acc = 0.0;
        for r in 0..d {
            for c in 0..d {
                let pu: f64 = (0..k).map(|j| u[r * k + j] * u[c * k + j]).sum();
                let pw: f64 = (0..k).map(|j| w[r * k + j] * w[c * k + j]).sum();
                acc += (pu - pw).powi(2);
            }
        }
        acc.sqrt()
    };
    let dot: f64 = a.vector.column(0).iter().zip(&b.vector.column(0)).map(|(p, q)| p * q).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    l2(&a.vector.mean, &b.vector.mean, 1.0)
        .max(projector(&a.vector, &b.vector))
        .max(projector(&a.spatial, &b.spatial))
        .max(l2(&a.spatial.mean, &b.spatial.mean, sign))
}

pub fn principals_algebra(seed: u64) -> Result<PrincipalsAlgebra> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = PrincipalsAlgebra {
        ema_monotone: true,
        ..Default::default()
    };
    for _ in 0..30 {
        let b = rng.random_range(1..=4);
        let s = [4, 16][rng.random_range(0..2)];
        let v = [4, 8, 16][rng.random_range(0..3)];
        let k_s = rng.random_range(1..=s.min(8));
        let c = rng.random_range(2..=6);
        let comp = random_components(&mut rng, c, s, v, k_s)?;
        let z = random(&mut rng, &[b * s, v], 0.0, 1.0);
        let once = apply_principals(&z, &comp, b)?;
        let twice = apply_principals(&once, &comp, b)?;
        r.idempotence = r.idempotence.max(once.max_abs_diff(&twice));
        // spatial-stage output of each item must lie in mu_S + span(U_S)
        let maps = forward_pca(&once, &comp.vector)?.reshape(&[b, s])?;
        let mu = &comp.spatial.mean;
        let u = &comp.spatial.basis;
        for i in 0..b {
            let c: Vec<f64> = (0..s).map(|p| maps.data()[i * s + p] - mu[p]).collect();
            let ct = Tensor::new(vec![1, s], c.clone())?;
            let coef = ct.matmul(Trans::No, u, Trans::No)?;
            let proj = coef.matmul(Trans::No, u, Trans::Yes)?;
            let res = c.iter().zip(proj.data()).map(|(a, p)| (a - p).abs()).fold(0.0, f64::max);
            r.subspace_residual = r.subspace_residual.max(res);
        }
    }
    let hand = crate::principals::PrincipalLatentComponents {
        vector: crate::pca::PcaComponents {
            mean: vec![0.0, 0.0],
            basis: Tensor::new(vec![2, 1], vec![1.0, 0.0])?,
        },
        spatial: crate::pca::PcaComponents {
            mean: vec![0.0, 0.0],
            basis: Tensor::new(vec![2, 1], vec![1.0, 0.0])?,
        },
    };
    let z = Tensor::new(vec![2, 2], vec![3.0, 5.0, 4.0, 7.0])?;
    let out = apply_principals(&z, &hand, 1)?;
    r.hand_case = out.max_abs_diff(&Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 0.0])?);

    // 1000 updates on fresh batches at the default rates
    let (b, s, v, k_s) = (4, 16, 8, 8);
    let cfg = PrincipalsConfig::default();
    let mut comp = None;
    for _ in 0..1000 {
        let z = random(&mut rng, &[b * s, v], 0.0, 1.0);
        let next = ema_step(comp.as_ref(), &z, b, k_s, cfg.eta_v, cfg.eta_s)?;
        if !next.all_finite() {
            r.ema_invariant = f64::INFINITY;
        }
        r.ema_invariant = r.ema_invariant.max(next.invariant_error());
        comp = Some(next);
    }
    // repeated identical batch at eta = 0.1 approaches its own statistics;
    // b > k_s keeps every kept spatial eigenvalue simple, so the target is unique
    let (b, k_s) = (32, 4);
    let z = random(&mut rng, &[b * s, v], 0.0, 1.0);
    // start from a nearby batch: far-off bases need not approach monotonically
    let mut nearby = z.clone();
    for x in nearby.data_mut() {
        *x += rng.random_range(-0.1..0.1);
    }
    let start = ema_step(None, &nearby, b, k_s, 1.0, 1.0)?;
    let vector = fit_vector(&z)?;
    let target = crate::principals::PrincipalLatentComponents {
        spatial: fit_spatial(&forward_pca(&z, &vector)?, b, k_s)?,
        vector,
    };
    let mut cur = start;
    let mut prev = component_distance(&cur, &target);
    for _ in 0..1000 {
        cur = ema_step(Some(&cur), &z, b, k_s, 0.1, 0.1)?;
        r.ema_invariant = r.ema_invariant.max(cur.invariant_error());
        let d = component_distance(&cur, &target);
        if d > prev + 1e-12 {
            r.ema_monotone = false;
        }
        prev = d;
    }
    r.ema_limit = prev;
    Ok(r)
}

pub fn criterion_3(seed: u64) -> Outcome {
    let (name, limit) = ("Purifier algebra", 30.0);
    let t0 = Instant::now();
    match principals_algebra(seed) {
        Ok(a) => Outcome::new(
            3,
            name,
            format!(
                "idempotence {:.1e}; hand case {:.1e}; subspace residual {:.1e}; invariant error over EMA runs {:.1e}; repeated-batch limit {:.1e} (monotone: {})",
                a.idempotence, a.hand_case, a.subspace_residual, a.ema_invariant, a.ema_limit, a.ema_monotone
            ),
            "idempotence <= 1e-6, hand case exact, residual < 1e-6, invariants < 1e-6, limit <= 1e-6 monotone, < 30 s".into(),
            a.idempotence <= 1e-6
                && a.hand_case == 0.0
                && a.subspace_residual < 1e-6
                && a.ema_invariant < 1e-6
                && a.ema_limit <= 1e-6
                && a.ema_monotone,
            t0,
            limit,
        ),
        Err(e) => failed(3, name, limit, t0, e),
    }
}

#[derive(Default, Debug)]
pub struct AttackContracts {
    pub configs: usize,
    pub violations: Vec<String>,
}

fn random_attack(rng: &mut ChaCha8Rng, know: bool) -> AttackConfig {
    let kinds = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mifgsm, AttackKind::Multadv, AttackKind::Af];
    let kind = kinds[rng.random_range(0..kinds.len())];
    let loss = if know {
        [LossMode::KnowA, LossMode::KnowB][rng.random_range(0..2)]
    } else {
        [LossMode::Output, LossMode::Clean, LossMode::Latent][rng.random_range(0..3)]
    };
    let target = [TargetSubset::All, TargetSubset::NormalOnly, TargetSubset::AnomalousOnly][rng.random_range(0..3)];
    AttackConfig {
        kind,
        epsilon: if kind == AttackKind::Multadv {
            rng.random_range(1.0..2.5)
        } else {
            rng.random_range(0.0..0.3)
        },
        alpha: if rng.random_bool(0.3) {
            Some(rng.random_range(0.0..0.2))
        } else {
            None
        },
        t_max: rng.random_range(1..=5),
        frame_width: rng.random_range(1..=3),
        loss,
        lambda: rng.random_range(-1.0..1.0),
        target,
        seed: rng.random(),
        ..Default::default()
    }
}

pub fn attack_contracts(configs: usize, seed: u64) -> Result<AttackContracts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ae = Detector::<f64>::build(
        &DetectorSpec {
            base_channels: 1,
            ..Default::default()
        },
        seed,
    )?;
    let mut pls = Detector::<f64>::build(
        &DetectorSpec {
            base_channels: 1,
            principals: Some(PrincipalsConfig {
                k_s: 4,
                ..Default::default()
            }),
            ..Default::default()
        },
        seed ^ 1,
    )?;
    pls.init_components_from(&random(&mut rng, &[6, 1, 32, 32], 0.0, 1.0))?;
    let mut rep = AttackContracts::default();
    let mask = frame_mask(32, 32, 1);
    for case in 0..configs {
        let know = case % 4 == 3;
        let model = if know || case % 2 == 1 { &pls } else { &ae };
        let cfg = random_attack(&mut rng, know);
        let b = 3;
        let mut x = random(&mut rng, &[b, 1, 32, 32], 0.0, 1.0);
        // exact zeros and ones exercise clipping and the multiplicative floor
        for v in x.data_mut().iter_mut().step_by(37) {
            *v = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        }
        let y: Vec<f64> = (0..b).map(|i| if i == 0 { 1.0 } else if i == 1 { -1.0 } else if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let before = model.clone();
        let adv = craft_adversarial(model, &x, &y, &cfg)?;
        let label = cfg.label();
        let mut fail = |what: String| rep.violations.push(format!("case {case} ({label}): {what}"));
        if *model != before {
            fail("model mutated".into());
        }
        let (xd, ad) = (x.data(), adv.data());
        if ad.iter().any(|v| !(0.0..=1.0).contains(v)) {
            fail("pixel outside [0, 1]".into());
        }
        if cfg.kind == AttackKind::Multadv {
            for (&o, &a) in xd.iter().zip(ad) {
                if o >= 1e-6 && (a / o).max(o / a) > cfg.epsilon + 1e-6 {
                    fail(format!("ratio bound exceeded at x = {o}"));
                    break;
                }
            }
        } else if adv.max_abs_diff(&x) > cfg.epsilon + 1e-6 {
            fail(format!("l-inf {} exceeds {}", adv.max_abs_diff(&x), cfg.epsilon));
        }
        for i in 0..b {
            let keep = match cfg.target {
                TargetSubset::All => false,
                TargetSubset::NormalOnly => y[i] < 0.0,
                TargetSubset::AnomalousOnly => y[i] > 0.0,
            };
            if keep && adv.item(i) != x.item(i) {
                fail(format!("untargeted item {i} changed"));
            }
        }
        if cfg.kind == AttackKind::Af {
            let fm = frame_mask(32, 32, cfg.frame_width);
            for (j, (&o, &a)) in xd.iter().zip(ad).enumerate() {
                if !fm[j % 1024] && o.to_bits() != a.to_bits() {
                    fail("interior pixel changed".into());
                    break;
                }
            }
            if cfg.frame_width == 1 {
                for i in 0..b {
                    let changed = (0..1024).filter(|&p| x.item(i)[p] != adv.item(i)[p]).count();
                    if changed > mask.iter().filter(|&&m| m).count() {
                        fail(format!("{changed} pixels changed on a 124-pixel frame"));
                    }
                }
            }
        }
        let zero = AttackConfig {
            epsilon: if cfg.kind == AttackKind::Multadv { 1.0 } else { 0.0 },
            ..cfg.clone()
        };
        if craft_adversarial(model, &x, &y, &zero)? != x {
            fail("zero budget changed the input".into());
        }
        if case % 5 == 0 && !know {
            let eps = cfg.epsilon.min(0.3);
            let base = AttackConfig {
                kind: AttackKind::Pgd,
                loss: LossMode::Output,
                epsilon: eps,
                ..cfg.clone()
            };
            let one = AttackConfig {
                t_max: 1,
                alpha: Some(eps),
                ..base.clone()
            };
            let f = base.clone().with_kind(AttackKind::Fgsm);
            if craft_adversarial(model, &x, &y, &one)? != craft_adversarial(model, &x, &y, &f)? {
                fail("single-step PGD with alpha = eps differs from FGSM".into());
            }
        }
        if know {
            let zero_l = AttackConfig {
                lambda: 0.0,
                ..cfg.clone()
            };
            let plain = AttackConfig {
                loss: LossMode::Output,
                lambda: 0.0,
                ..cfg.clone()
            };
            if craft_adversarial(model, &x, &y, &zero_l)? != craft_adversarial(model, &x, &y, &plain)? {
                fail("lambda = 0 knowledgeable attack differs from the plain attack".into());
            }
        }
        rep.configs += 1;
    }
    Ok(rep)
}

pub fn criterion_4(seed: u64) -> Outcome {
    let (name, limit) = ("Attack contracts", 300.0);
    let t0 = Instant::now();
    match attack_contracts(240, seed) {
        Ok(r) => Outcome::new(
            4,
            name,
            format!(
                "{} random configs, {} violations{}",
                r.configs,
                r.violations.len(),
                r.violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
            ),
            ">= 200 configs, 0 violations, < 5 min".into(),
            r.configs >= 200 && r.violations.is_empty(),
            t0,
            limit,
        ),
        Err(e) => failed(4, name, limit, t0, e),
    }
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=60);
    let grid = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.0..1.0);
            if grid {
                (v * 8.0).floor() / 8.0
            } else {
                v
            }
        })
        .collect()
}

pub fn metric_agreement(cases: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auroc_bad, mut fpr_bad) = (0, 0);
    for _ in 0..cases {
        let normal = random_scores(&mut rng);
        let anomalous = random_scores(&mut rng);
        if auroc(&normal, &anomalous)?.to_bits() != pairwise_auroc(&normal, &anomalous).to_bits() {
            auroc_bad += 1;
        }
        if fpr_at_tpr(&normal, &anomalous, 0.95)?.to_bits() != sweep_fpr(&normal, &anomalous, 0.95).to_bits() {
            fpr_bad += 1;
        }
    }
    Ok((auroc_bad, fpr_bad))
}

pub fn criterion_5(seed: u64) -> Outcome {
    let (name, limit) = ("Metric oracles", 30.0);
    let t0 = Instant::now();
    match metric_agreement(1000, seed) {
        Ok((a, f)) => Outcome::new(
            5,
            name,
            format!("1000 score sets; AUROC mismatches {a}; FPR@95%TPR mismatches {f}"),
            "0 mismatches (bit-exact), < 30 s".into(),
            a == 0 && f == 0,
            t0,
            limit,
        ),
        Err(e) => failed(5, name, limit, t0, e),
    }
}
