mod common;

use crt_core::cfp::{
    gcr_regulate, lvc_encode, lvc_gate, Codebook, EvcConfig, ExplicitVisualCenter,
    GlobalRegulation, LightweightMlp, MlpConfig, Stem, FULL_WIDTH,
};
use crt_core::nn::{Activation, Linear, Phase};
use crt_core::pyramid::FeaturePyramid;
use crt_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn encoding_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (k, c) = (4, 8);
    let x = random(&[2, c, 4, 4], &mut rng);
    let b = random(&[k, c], &mut rng);
    let s = [0.3, 0.9, 1.7, 0.05];
    let cb = Codebook::from_parts(b.clone(), &s).unwrap();
    let e = lvc_encode(&x, &cb).unwrap();
    assert_eq!(e.shape(), &[2, k, c]);
    for (got, want) in e.data().iter().zip(encode_oracle(&x, b.data(), &s)) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn single_codeword_closed_form() {
    let x = Tensor::<f64>::new(vec![1.0, 3.0, 0.0, 0.0], &[1, 2, 1, 2]).unwrap();
    let cb = Codebook::from_parts(Tensor::zeros(&[1, 2]), &[0.5]).unwrap();
    assert_eq!(lvc_encode(&x, &cb).unwrap().to_vec(), vec![4.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assignment_rows_sum_to_one(seed in any::<u64>(), k in 1usize..6, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::<f64>::new(k, c, &mut rng).unwrap();
        let x = random(&[2, c, 3, 2], &mut rng).scale(4.0);
        let a = cb.assignments(&x).unwrap();
        prop_assert_eq!(a.shape(), &[2, 6, k]);
        for row in a.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn encoding_ignores_spatial_order(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::<f64>::new(3, 4, &mut rng).unwrap();
        let x = random(&[1, 4, 2, 3], &mut rng);
        let shuffled = Tensor::from_fn(&[1, 4, 2, 3], |i| {
            let (ch, p) = (i / 6, i % 6);
            x.data()[ch * 6 + perm[p]]
        });
        let a = lvc_encode(&x, &cb).unwrap();
        let b = lvc_encode(&shuffled, &cb).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_codeword_ignores_smoothing(seed in any::<u64>(), s1 in 1e-3f64..10.0, s2 in 1e-3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 3, 2, 2], &mut rng);
        let b = random(&[1, 3], &mut rng);
        let e1 = lvc_encode(&x, &Codebook::from_parts(b.clone(), &[s1]).unwrap()).unwrap();
        let e2 = lvc_encode(&x, &Codebook::from_parts(b, &[s2]).unwrap()).unwrap();
        for (u, v) in e1.data().iter().zip(e2.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn stem_is_full_width_for_any_input_channels(cin in 1usize..6, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(cin as u64);
        let stem = Stem::<f32>::new(cin, FULL_WIDTH, Activation::Silu, &mut rng);
        let x = Tensor::<f32>::ones(&[1, cin, h, w]);
        let y = stem.forward(&x, &Phase::eval()).unwrap();
        prop_assert_eq!(y.shape(), &[1, 256, h, w]);
    }
}

#[test]
fn gate_scales_input_by_one_plus_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fc = Linear::<f64>::new(4, 4, &mut rng);
    let x = random(&[2, 4, 3, 3], &mut rng);
    let e = random(&[2, 4], &mut rng);
    let y = lvc_gate(&x, &e, &fc).unwrap();
    // gate computed by hand from the linear layer
    let (w, b) = (fc.weight.data(), fc.bias.data());
    for n in 0..2 {
        for c in 0..4 {
            let z: f64 = (0..4)
                .map(|j| w[c * 4 + j] * e.data()[n * 4 + j])
                .sum::<f64>()
                + b[c];
            let g = 1.0 / (1.0 + (-z).exp());
            for p in 0..9 {
                let i = (n * 4 + c) * 9 + p;
                assert!((y.data()[i] - x.data()[i] * (1.0 + g)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn closed_gate_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fc = Linear::<f64>::new(2, 2, &mut rng);
    fc.weight = Tensor::zeros(&[2, 2]);
    fc.bias = Tensor::full(&[2], -60.0);
    let x = random(&[1, 2, 2, 2], &mut rng);
    let y = lvc_gate(&x, &Tensor::ones(&[1, 2]), &fc).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-20);
    }
}

#[test]
fn mlp_is_identity_at_zero_layer_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in [1, 3] {
        let cfg = MlpConfig {
            dconv_kernel: k,
            layer_scale_init: 0.0,
            ..MlpConfig::default()
        };
        let mlp = LightweightMlp::<f64>::new(8, cfg, &mut rng).unwrap();
        let x = random(&[2, 8, 4, 4], &mut rng);
        let y = mlp.forward(&x, &mut Phase::eval()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }
}

#[test]
fn mlp_rejects_unsupported_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = MlpConfig {
        dconv_kernel: 5,
        ..MlpConfig::default()
    };
    assert!(LightweightMlp::<f32>::new(4, cfg, &mut rng).is_err());
}

#[test]
fn visual_center_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let evc = ExplicitVisualCenter::<f32>::new(64, EvcConfig::default(), &mut rng).unwrap();
    let x = Tensor::<f32>::from_fn(&[2, 64, 4, 4], |i| ((i % 13) as f32 - 6.0) * 0.1);
    let mut phase = Phase::eval();
    assert_eq!(
        evc.branches(&x, &mut phase).unwrap().shape(),
        &[2, 512, 4, 4]
    );
    assert_eq!(
        evc.forward(&x, &mut phase).unwrap().shape(),
        &[2, 256, 4, 4]
    );
}

#[test]
fn regulation_restores_level_sizes_at_neck_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = FeaturePyramid::new(
        random(&[2, 16, 16, 16], &mut rng),
        random(&[2, 32, 8, 8], &mut rng),
        random(&[2, 64, 4, 4], &mut rng),
    )
    .unwrap();
    let gcr = GlobalRegulation::<f64>::new([16, 32], 24, &mut rng);
    let evc = random(&[2, 24, 4, 4], &mut rng);
    let out = gcr_regulate(&p, &evc, &gcr).unwrap();
    assert_eq!(out.f3.shape(), &[2, 24, 16, 16]);
    assert_eq!(out.f4.shape(), &[2, 24, 8, 8]);
    assert_eq!(out.f5.to_vec(), evc.to_vec());
}
