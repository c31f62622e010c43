use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resvit::data::{mask_inputs, TaskConfig};
use resvit::metrics::{frechet_distance, psnr, ssim};
use resvit::tensor::{Graph, ParamStore, Scope, Tensor};
use resvit::trainer::{lr_in_window, TrainPlan};
use resvit::vit::{transformer_layer, EncoderLayerWeights, ForwardOpts, TransformerConfig};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transposed_convolution_is_the_adjoint(
        c in 1usize..4,
        f in 1usize..4,
        k in 1usize..5,
        stride in 1usize..4,
        pad in 0usize..3,
        extra in 0usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(pad < k);
        let h = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::uniform(&[1, c, h, h], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[f, c, k, k], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let fwd = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, stride, pad).unwrap();
        let out = g.value(fwd);
        let y = Tensor::<f32>::uniform(out.shape(), -1.0, 1.0, &mut rng);
        let op = (h + 2 * pad - k) % stride;
        let back = g
            .conv_transpose2d(g.constant(y.clone()), g.constant(w), None, stride, pad, op)
            .unwrap();
        let xt = g.value(back);
        prop_assert_eq!(xt.shape(), x.shape());
        let lhs = dot(out.data(), y.data());
        let rhs = dot(x.data(), xt.data());
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn attention_layer_is_permutation_equivariant(seed in any::<u64>(), np in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TransformerConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 12,
            patch_size: 1,
            seq_len: np,
            dropout: 0.0,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayerWeights::init(&mut store, "l", &cfg, None, &mut rng).unwrap();
        let z = Tensor::<f64>::uniform(&[1, np, 8], -1.0, 1.0, &mut rng);
        let perm: Vec<usize> = (0..np).rev().collect();
        let mut zp = z.clone();
        for (i, &p) in perm.iter().enumerate() {
            zp.data_mut()[i * 8..(i + 1) * 8].copy_from_slice(&z.data()[p * 8..(p + 1) * 8]);
        }
        let run = |t: Tensor<f64>| {
            let g = Graph::new();
            let s = Scope::frozen(&g, &store);
            let (out, _) = transformer_layer(&s, g.constant(t), &layer, &cfg, &mut ForwardOpts::eval()).unwrap();
            (*g.value(out)).clone()
        };
        let (a, b) = (run(z), run(zp));
        for (i, &p) in perm.iter().enumerate() {
            for d in 0..8 {
                let (u, v) = (b.data()[i * 8 + d], a.data()[p * 8 + d]);
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_ignores_unavailable_channels(
        avail in prop::sample::select(vec![
            vec![true, true, false],
            vec![true, false, true],
            vec![false, true, true],
            vec![true, false, false],
        ]),
        seed in any::<u64>(),
    ) {
        let task = TaskConfig::new(avail.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::<f32>::uniform(&[3, 6, 5], -1.0, 1.0, &mut rng);
        let mut m2 = m.clone();
        let noise = Tensor::<f32>::uniform(&[3, 6, 5], -9.0, 9.0, &mut rng);
        for c in (0..3).filter(|&c| !avail[c]) {
            m2.data_mut()[c * 30..(c + 1) * 30].copy_from_slice(&noise.data()[c * 30..(c + 1) * 30]);
        }
        let x = mask_inputs(&m, &task).unwrap();
        let (x2, xx) = (mask_inputs(&m2, &task).unwrap(), mask_inputs(&x, &task).unwrap());
        prop_assert_eq!(x.data(), x2.data());
        prop_assert_eq!(x.data(), xx.data());
        for c in 0..3 {
            let plane = &x.data()[c * 30..(c + 1) * 30];
            if avail[c] {
                prop_assert_eq!(plane, &m.data()[c * 30..(c + 1) * 30]);
            } else {
                prop_assert!(plane.iter().all(|v| v.to_bits() == 0));
            }
        }
    }

    #[test]
    fn learning_rate_never_increases_within_a_phase(
        p1 in 1usize..40,
        p2 in 1usize..40,
        lr1 in 1e-5f64..1e-2,
        lr2 in 1e-5f64..1e-2,
    ) {
        let plan = TrainPlan { phase1_epochs: p1, phase2_epochs: p2, lr_phase1: lr1, lr_phase2: lr2, ..Default::default() };
        for (lo, hi) in [(0, p1), (p1, p1 + p2)] {
            let lrs: Vec<f64> = (lo..hi).map(|e| plan.lr_at_epoch(e)).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(lrs.iter().all(|&l| l >= 0.0));
            prop_assert_eq!(lrs[0], if lo == 0 { lr1 } else { lr2 });
        }
        prop_assert_eq!(lr_in_window(lr1, 0, p1), lr1);
    }

    #[test]
    fn image_metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::uniform(&[24, 20], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[24, 20], 0.0, 1.0, &mut rng);
        let (a, b) = (a.data(), b.data());
        prop_assert_eq!(psnr(a, b, 1.0).unwrap(), psnr(b, a, 1.0).unwrap());
        let (s1, s2) = (ssim(a, b, 24, 20).unwrap(), ssim(b, a, 24, 20).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn frechet_distance_is_symmetric(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..40)
                .map(|_| Tensor::<f64>::uniform(&[d], -1.0 + shift, 1.0 + shift, rng).data().to_vec())
                .collect()
        };
        let a = draw(&mut rng, 0.0);
        let b = draw(&mut rng, 0.5);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0), "{ab} vs {ba}");
    }
}

#[test]
fn psnr_of_a_uniform_tenth_error_is_twenty_decibels() {
    let a = vec![0.5; 64];
    let b = vec![0.6; 64];
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
}
