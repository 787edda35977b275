use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use novelty_core::attacks::{budget, craft_adversarial, frame_mask, AttackConfig, AttackKind, LossMode, TargetSubset};
use novelty_core::data::{decode_tensor, encode_tensor};
use novelty_core::detectors::{Detector, DetectorSpec};
use novelty_core::evaluation::{auroc, fpr_at_tpr, histogram};
use novelty_core::numerics::eigh::eigh_psd;
use novelty_core::numerics::{finite_diff_check, GradCheckOptions, Tape, Tensor, Trans};
use novelty_core::pca::{fit_pca, forward_pca, inverse_pca};
use novelty_core::principals::{apply_principals, ema_step, fold_batch, unfold_batch, PrincipalsConfig};
use novelty_core::suite::oracles::{jacobi_eigh, pairwise_auroc};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn conv_pool_upsample_shapes(b in 1usize..3, c in 1usize..4, o in 1usize..4, half in 1usize..5, seed: u64) {
        let side = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.leaf(random(&mut rng, &[b, c, side, side], -1.0, 1.0), false);
        let w = t.leaf(random(&mut rng, &[o, c, 3, 3], -1.0, 1.0), false);
        let bias = t.leaf(random(&mut rng, &[o], -1.0, 1.0), false);
        let y = t.conv3x3(x, w, bias).unwrap();
        prop_assert_eq!(t.shape(y), &[b, o, side, side]);
        let p = t.maxpool2(y).unwrap();
        prop_assert_eq!(t.shape(p), &[b, o, half, half]);
        let u = t.upsample2(p).unwrap();
        prop_assert_eq!(t.shape(u), &[b, o, side, side]);
    }

    #[test]
    fn two_layer_linear_gradients(n in 1usize..4, i in 1usize..5, h in 1usize..5, k in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[n, i], -1.0, 1.0),
            random(&mut rng, &[i, h], -1.0, 1.0),
            random(&mut rng, &[h], -1.0, 1.0),
            random(&mut rng, &[h, k], -1.0, 1.0),
            random(&mut rng, &[k], -1.0, 1.0),
        ];
        let report = finite_diff_check(
            |t, v| {
                let a = t.linear(v[0], v[1], v[2])?;
                let b = t.linear(a, v[3], v[4])?;
                let s = t.square(b)?;
                t.sum(s)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        prop_assert!(report.max_relative < 1e-6, "{}", report.max_relative);
    }

    #[test]
    fn eigh_matches_jacobi(d in 1usize..=64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[d + 3, d], -1.0, 1.0);
        let c = a.matmul(Trans::Yes, &a, Trans::No).unwrap();
        let e = eigh_psd(&c).unwrap();
        let u = e.vectors.data();
        let mut recon: f64 = 0.0;
        let mut ortho: f64 = 0.0;
        for r in 0..d {
            for s in 0..d {
                let v: f64 = (0..d).map(|j| u[r * d + j] * e.values[j] * u[s * d + j]).sum();
                recon = recon.max((v - c.data()[r * d + s]).abs());
                let g: f64 = (0..d).map(|j| u[j * d + r] * u[j * d + s]).sum();
                ortho = ortho.max((g - if r == s { 1.0 } else { 0.0 }).abs());
            }
        }
        prop_assert!(recon < 1e-6, "reconstruction {recon}");
        prop_assert!(ortho < 1e-8, "orthonormality {ortho}");
        let (vals, _) = jacobi_eigh(c.data(), d);
        let top = vals[0].abs().max(1.0);
        for (p, q) in e.values.iter().zip(&vals) {
            prop_assert!((p - q).abs() <= 1e-9 * top, "{p} vs {q}");
        }
    }

    #[test]
    fn pca_projection_properties(n in 2usize..40, d in 1usize..12, seed: u64, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=d);
        let x = random(&mut rng, &[n, d], -1.0, 1.0);
        let comp = fit_pca(&x, k).unwrap();
        prop_assert!(comp.orthonormality_error() < 1e-10);
        let once = inverse_pca(&forward_pca(&x, &comp).unwrap(), &comp).unwrap();
        let twice = inverse_pca(&forward_pca(&once, &comp).unwrap(), &comp).unwrap();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-8);
        let full = fit_pca(&x, d).unwrap();
        let back = inverse_pca(&forward_pca(&x, &full).unwrap(), &full).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-8);
        // eigenvectors are unchanged by scaling where the spectrum has gaps
        let scaled = fit_pca(&x.map(|v| v * scale), k).unwrap();
        let centered = {
            let m = &comp.mean;
            let mut y = x.clone();
            for (j, v) in y.data_mut().iter_mut().enumerate() {
                *v -= m[j % d];
            }
            y
        };
        let cov = centered.matmul(Trans::Yes, &centered, Trans::No).unwrap();
        let (ev, _) = jacobi_eigh(cov.data(), d);
        let top = ev[0].max(1e-12);
        for j in 0..k {
            let isolated = (j == 0 || ev[j - 1] - ev[j] > 1e-6 * top) && (j + 1 == d || ev[j] - ev[j + 1] > 1e-6 * top);
            if isolated && ev[j] > 1e-6 * top {
                let (a, b) = (comp.column(j), scaled.column(j));
                let dev = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                prop_assert!(dev < 1e-6, "column {j} moved by {dev}");
            }
        }
    }

    #[test]
    fn principals_idempotent_and_fold_round_trip(b in 1usize..5, side in 1usize..4, v in 1usize..9, seed: u64) {
        let s = side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_s = rng.random_range(1..=s);
        let fit = random(&mut rng, &[3 * s, v], 0.0, 1.0);
        let comp = ema_step(None, &fit, 3, k_s, 1.0, 1.0).unwrap();
        prop_assert!(comp.invariant_error() < 1e-10);
        let z = random(&mut rng, &[b * s, v], 0.0, 1.0);
        let once = apply_principals(&z, &comp, b).unwrap();
        let twice = apply_principals(&once, &comp, b).unwrap();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-6);
        let zv = random(&mut rng, &[b * s, 1], -1.0, 1.0);
        prop_assert_eq!(unfold_batch(&fold_batch(&zv, b).unwrap()).unwrap(), zv);
    }

    #[test]
    fn ema_keeps_invariants(steps in 1usize..20, seed: u64, eta_v in 0.0f64..=1.0, eta_s in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, s, v, k_s) = (4, 4, 3, 2);
        let mut comp = None;
        for _ in 0..steps {
            let z = random(&mut rng, &[b * s, v], 0.0, 1.0);
            let next = ema_step(comp.as_ref(), &z, b, k_s, eta_v, eta_s).unwrap();
            prop_assert!(next.all_finite());
            prop_assert!(next.invariant_error() < 1e-10);
            comp = Some(next);
        }
    }

    #[test]
    fn auroc_symmetry_and_rank_invariance(
        normal in prop::collection::vec(-1e3f64..1e3, 1..40),
        anomalous in prop::collection::vec(-1e3f64..1e3, 1..40),
    ) {
        let a = auroc(&normal, &anomalous).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, pairwise_auroc(&normal, &anomalous));
        let tie_free = normal.iter().all(|n| !anomalous.contains(n));
        if tie_free {
            let swapped = auroc(&anomalous, &normal).unwrap();
            prop_assert!((a + swapped - 1.0).abs() < 1e-12);
        }
        let warp = |x: &f64| (x / 500.0).tanh() * 3.0 + x * 1e-3;
        let (wn, wa): (Vec<f64>, Vec<f64>) = (normal.iter().map(warp).collect(), anomalous.iter().map(warp).collect());
        let (all, warped): (Vec<f64>, Vec<f64>) = (normal.iter().chain(&anomalous).copied().collect(), wn.iter().chain(&wa).copied().collect());
        let order_kept = (0..all.len()).all(|i| (0..all.len()).all(|j| all[i].partial_cmp(&all[j]) == warped[i].partial_cmp(&warped[j])));
        prop_assume!(order_kept);
        prop_assert_eq!(auroc(&wn, &wa).unwrap(), a);
        let f = fpr_at_tpr(&normal, &anomalous, 0.95).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let h = histogram(&normal, &anomalous, 50);
        prop_assert_eq!(h.normal.iter().sum::<u64>(), normal.len() as u64);
        prop_assert_eq!(h.anomalous.iter().sum::<u64>(), anomalous.len() as u64);
    }

    #[test]
    fn tensor_container_round_trip(dims in prop::collection::vec(1usize..5, 1..5), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &dims, -1e6, 1e6);
        let back: Tensor<f64> = decode_tensor(std::path::Path::new("mem"), &encode_tensor(&t)).unwrap();
        prop_assert_eq!(&back, &t);
        let t32 = t.cast::<f32>();
        let back32: Tensor<f32> = decode_tensor(std::path::Path::new("mem"), &encode_tensor(&t32)).unwrap();
        prop_assert_eq!(back32, t32);
    }

    #[test]
    fn budget_strings_round_trip(levels in 0u32..255) {
        let eps = levels as f64 / 255.0;
        let text = budget::display(eps);
        prop_assert_eq!(budget::parse(&text), Some(eps));
    }
}

fn attack_strategy() -> impl Strategy<Value = AttackConfig> {
    (
        prop_oneof![
            Just(AttackKind::Fgsm),
            Just(AttackKind::Pgd),
            Just(AttackKind::Mifgsm),
            Just(AttackKind::Multadv),
            Just(AttackKind::Af)
        ],
        0.0f64..0.5,
        1usize..4,
        prop_oneof![Just(LossMode::Output), Just(LossMode::Latent), Just(LossMode::Clean)],
        prop_oneof![Just(TargetSubset::All), Just(TargetSubset::NormalOnly), Just(TargetSubset::AnomalousOnly)],
        any::<u64>(),
    )
        .prop_map(|(kind, e, t_max, loss, target, seed)| AttackConfig {
            kind,
            epsilon: if kind == AttackKind::Multadv { 1.0 + 4.0 * e } else { e },
            t_max: if kind == AttackKind::Fgsm { 1 } else { t_max },
            loss,
            target,
            seed,
            ..AttackConfig::default()
        })
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn attacks_respect_budgets(cfg in attack_strategy(), seed: u64) {
        let spec = DetectorSpec {
            image_size: 8,
            base_channels: 2,
            principals: Some(PrincipalsConfig { k_s: 1, ..Default::default() }),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Detector::<f64>::build(&spec, seed).unwrap();
        model.init_components_from(&random(&mut rng, &[4, 1, 8, 8], 0.0, 1.0)).unwrap();
        let mut x = random(&mut rng, &[3, 1, 8, 8], 0.0, 1.0);
        x.data_mut()[5] = 0.0;
        x.data_mut()[9] = 1.0;
        let y = [1.0, -1.0, 1.0];
        let before = model.clone();
        let adv = craft_adversarial(&model, &x, &y, &cfg).unwrap();
        prop_assert!(model == before, "model mutated");
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if cfg.kind == AttackKind::Multadv {
            for (&o, &a) in x.data().iter().zip(adv.data()) {
                if o >= 1e-6 {
                    prop_assert!((a / o).max(o / a) <= cfg.epsilon + 1e-6);
                } else {
                    prop_assert_eq!(a, o);
                }
            }
        } else {
            prop_assert!(adv.max_abs_diff(&x) <= cfg.epsilon + 1e-6);
        }
        if cfg.kind == AttackKind::Af {
            let mask = frame_mask(8, 8, cfg.frame_width);
            for (i, (&o, &a)) in x.data().iter().zip(adv.data()).enumerate() {
                if !mask[i % 64] {
                    prop_assert_eq!(o.to_bits(), a.to_bits());
                }
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            let frozen = match cfg.target {
                TargetSubset::All => false,
                TargetSubset::NormalOnly => yi < 0.0,
                TargetSubset::AnomalousOnly => yi > 0.0,
            };
            if frozen {
                prop_assert_eq!(adv.item(i), x.item(i));
            }
        }
    }
}
