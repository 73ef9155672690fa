mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinpaint::autograd::Tape;
use vinpaint::image::{Frame, Mask, SoftMask};
use vinpaint::losses::{loss_mask, loss_reconstruction, total_loss, LossWeights};
use vinpaint::metrics::{bce_mask, iou, psnr, psnr_masked, ssim};
use vinpaint::model::aggregate;
use vinpaint::synth::{coverage_ok, CorpusConfig};
use vinpaint::tensor::Tensor;

fn random_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Frame {
    let data = (0..3 * h * w).map(|_| rng.random_range(0..=255) as f32 / 255.0).collect();
    Frame::new(h, w, data).unwrap()
}

/// Smooth texture so SSIM windows see structure rather than white noise.
fn texture(h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy, ph): (f32, f32, f32) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random());
    Frame::from_fn(h, w, |c, y, x| {
        0.5 + 0.45 * ((x as f32 * fx + y as f32 * fy + ph * 6.0 + c as f32).sin())
    })
}

/// Direct SSIM: full 2-D Gaussian window at every valid position.
fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let (h, w) = a.dims();
    let k: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = k.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut n = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = k[i] * k[j] / norm;
                        let (p, q) = (a.at(c, y0 + i, x0 + j) as f64, b.at(c, y0 + i, x0 + j) as f64);
                        ma += g * p;
                        mb += g * q;
                        aa += g * p * p;
                        bb += g * q * q;
                        ab += g * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..4 {
        let a = texture(16, 19, seed);
        let b = random_frame(16, 19, &mut rng);
        for (p, q) in [(&a, &b), (&a, &a), (&b, &a)] {
            assert!((ssim(p, q).unwrap() - ssim_oracle(p, q)).abs() < 1e-9);
        }
    }
}

#[test]
fn ssim_of_a_texture_and_its_negative_is_low() {
    let a = texture(24, 24, 3);
    let neg = Frame::from_fn(24, 24, |c, y, x| 1.0 - a.at(c, y, x));
    assert!(ssim(&a, &neg).unwrap() < 0.1);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = texture(16, 16, 0);
    let dir: Vec<f32> = (0..3 * 16 * 16).map(|_| if rng.random() { 1.0 } else { -1.0 }).collect();
    let mut last = f64::INFINITY;
    for k in 1..8 {
        let s = 0.01 * k as f32;
        let b = Frame::from_fn(16, 16, |c, y, x| a.at(c, y, x) + s * dir[(c * 16 + y) * 16 + x]);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * (1.0 / s as f64).log10()).abs() < 1e-4, "{p}");
        assert!(p < last);
        last = p;
    }
}

#[test]
fn bce_metric_equals_the_training_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let p: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let g: Vec<f32> = (0..h * w).map(|_| f32::from(rng.random_bool(0.4) as u8)).collect();
        let metric = bce_mask(&SoftMask::new(h, w, p.clone()).unwrap(), &Mask::new(h, w, g.clone()).unwrap()).unwrap();
        let tape = Tape::<f64>::inference();
        let to = |v: &[f32]| tape.constant(Tensor::new([1, 1, h, w], v.iter().map(|&x| x as f64).collect()).unwrap());
        let loss = loss_mask(to(&p), to(&g)).unwrap().item();
        let oracle = p
            .iter()
            .zip(&g)
            .map(|(&p, &g)| {
                let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
                -(g as f64 * p.ln() + (1.0 - g as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / (h * w) as f64;
        assert!((metric - oracle).abs() < 1e-6, "{metric} vs {oracle}");
        assert!((loss - oracle).abs() < 1e-6, "{loss} vs {oracle}");
    }
}

#[test]
fn reconstruction_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let a: Vec<f64> = (0..3 * n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..3 * n).map(|_| rng.random()).collect();
        let tape = Tape::<f64>::inference();
        let v = |d: &[f64]| tape.constant(Tensor::new([1, 3, 1, n], d.to_vec()).unwrap());
        let got = loss_reconstruction(v(&a), v(&b)).unwrap().item();
        let want = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / (3 * n) as f64;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn aggregation_weights_sum_to_one_at_every_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for refs in 1..=4 {
        let model = common::model_for_refs(8, refs, 4);
        let tape = Tape::<f64>::inference();
        let mut feat = |c| tape.constant(Tensor::from_fn([2, c, 3, 5], |_| rng.random_range(-2.0..2.0)));
        let target = feat(8);
        let aligned: Vec<_> = (0..refs).map(|_| feat(8)).collect();
        let (_, weights) = aggregate(&tape, &model.params, target, &aligned, feat(1)).unwrap();
        let w = weights.value();
        assert_eq!(w.shape(), [2, refs, 3, 5]);
        for n in 0..2 {
            for p in 0..15 {
                let s: f64 = (0..refs).map(|r| w.data()[(n * refs + r) * 15 + p]).sum();
                assert!((s - 1.0).abs() < 1e-5, "refs {refs}: {s}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn loss_report_composition(
        l in proptest::array::uniform4(0.0f64..10.0),
        w in proptest::array::uniform4(0.0f64..5.0),
    ) {
        let weights = LossWeights { lambda_f: w[0], lambda_s: w[1], lambda_c: w[2], lambda_y: w[3] };
        let r = total_loss(l[0], l[1], l[2], l[3], &weights).unwrap();
        prop_assert!((r.l_c - (l[2] + w[3] * l[3])).abs() < 1e-6);
        prop_assert!((r.total - (w[0] * l[0] + w[1] * l[1] + w[2] * r.l_c)).abs() < 1e-6);
        let no_cycle = LossWeights { lambda_c: 0.0, ..weights };
        let a = total_loss(l[0], l[1], l[2], l[3], &no_cycle).unwrap();
        let b = total_loss(l[0], l[1], 0.0, 0.0, &no_cycle).unwrap();
        prop_assert_eq!(a.total, b.total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_matches_set_counts(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let n = bits.len();
        let a = Mask::new(1, n, bits.iter().map(|b| f32::from(b.0 as u8)).collect()).unwrap();
        let b = Mask::new(1, n, bits.iter().map(|b| f32::from(b.1 as u8)).collect()).unwrap();
        let inter = bits.iter().filter(|b| b.0 && b.1).count();
        let union = bits.iter().filter(|b| b.0 || b.1).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(iou(&a, &b).unwrap(), want);
        prop_assert_eq!(iou(&b, &a).unwrap(), want);
    }

    #[test]
    fn psnr_is_symmetric_and_capped(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_frame(h, w, &mut rng);
        let b = random_frame(h, w, &mut rng);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let full = Mask::full(h, w);
        prop_assert!((psnr_masked(&a, &b, &full).unwrap() - psnr(&a, &b).unwrap()).abs() < 1e-9);
        prop_assert_eq!(psnr_masked(&a, &b, &Mask::empty(h, w)).unwrap(), 99.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthesized_clips_satisfy_their_invariants(
        seed in any::<u64>(),
        index in 0usize..50,
        h in 32usize..48,
        w in 32usize..48,
    ) {
        let corpus = CorpusConfig {
            height: h,
            width: w,
            frames_per_clip: 3,
            noise_patches: 3,
            seed,
            ..CorpusConfig::default()
        };
        let bank = corpus.noise_bank();
        let clip = corpus.synthesize(&bank, "train", index).unwrap();
        prop_assert_eq!(&clip, &corpus.synthesize(&bank, "train", index).unwrap());
        let noise = common::noise_for(&bank, &clip);
        prop_assert!(common::composite_error(&clip, &noise) <= 1.0 / 255.0);
        for (m, a) in clip.masks.iter().zip(&clip.alphas) {
            prop_assert!(coverage_ok(m));
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(common::alpha_violations(m, a), 0);
        }
    }
}
