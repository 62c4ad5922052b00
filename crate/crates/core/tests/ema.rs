use crt_core::ema::{ema_forward, EmaParams};
use crt_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn output_shape_matches_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (c, g) in [(16, 4), (32, 8), (64, 8)] {
        let ema = EmaParams::<f64>::new(c, g, &mut rng).unwrap();
        let x = random(&[2, c, 5, 7], &mut rng);
        assert_eq!(ema_forward(&x, &ema).unwrap().shape(), x.shape());
    }
}

#[test]
fn indivisible_channels_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        EmaParams::<f32>::new(12, 8, &mut rng),
        Err(Error::InvalidGroups {
            channels: 12,
            groups: 8
        })
    ));
}

/// Reorders the `g` channel groups of `[N, C, H, W]` so that new group `i` is old group `perm[i]`.
fn permute_groups(x: &Tensor<f64>, g: usize, perm: &[usize]) -> Tensor<f64> {
    let c = x.dim(1) / g;
    let parts: Vec<Tensor<f64>> = perm
        .iter()
        .map(|&p| x.narrow(1, p * c, c).unwrap())
        .collect();
    Tensor::concat(&parts, 1).unwrap()
}

/// Interior of each `H×W` map, skipping a one-pixel border.
fn interior(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    (1..h - 1)
        .flat_map(|i| (1..w - 1).map(move |j| (i, j)))
        .map(|(i, j)| map[i * w + j])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Groups share one parameter set, so permuting "parameters identically" is the identity on
    // them and only the input groups move.
    #[test]
    fn group_permutation_is_equivariant(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ema = EmaParams::<f64>::new(16, 4, &mut rng).unwrap();
        let x = random(&[2, 16, 4, 5], &mut rng);
        let y = ema.forward(&x).unwrap();
        let yp = ema.forward(&permute_groups(&x, 4, &perm)).unwrap();
        prop_assert_eq!(yp.to_vec(), permute_groups(&y, 4, &perm).to_vec());
    }

    #[test]
    fn attention_lies_in_open_unit_interval(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ema = EmaParams::<f64>::new(8, 2, &mut rng).unwrap();
        let x = random(&[1, 8, h, w], &mut rng).scale(3.0);
        let (_, att) = ema.forward_with_attention(&x).unwrap();
        prop_assert_eq!(att.shape(), &[1, 2, h, w]);
        prop_assert!(att.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn nonnegative_input_only_shrinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ema = EmaParams::<f64>::new(8, 4, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 8, 3, 4], |_| rng.random_range(0.0..2.0));
        let y = ema.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}

/// With zero padding the 3×3 branch sees the border, so a constant input gives a constant
/// attention map away from the border at every resolution.
#[test]
fn constant_input_gives_constant_interior_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ema = EmaParams::<f64>::new(16, 4, &mut rng).unwrap();
    for s in [6, 12, 24] {
        let x = Tensor::<f64>::full(&[1, 16, s, s], 0.7);
        let (_, att) = ema.forward_with_attention(&x).unwrap();
        for map in att.data().chunks(s * s) {
            let inner = interior(map, s, s);
            assert!(
                inner.iter().all(|&v| (v - inner[0]).abs() < 1e-12),
                "size {s}"
            );
        }
    }
}

/// A 3×3 kernel with only its centre tap has no border effect, so the maps are constant
/// everywhere and identical across resolutions.
#[test]
fn centre_tap_kernel_gives_resolution_independent_constant_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ema = EmaParams::<f64>::new(16, 4, &mut rng).unwrap();
    let c = ema.group_width();
    let w = ema.conv3x3.weight.to_vec();
    let centred: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % 9 == 4 { v } else { 0.0 })
        .collect();
    ema.conv3x3.weight = Tensor::param(centred, &[c, c, 3, 3]).unwrap();
    let mut seen: Option<Vec<f64>> = None;
    for s in [4, 8, 16] {
        let x = Tensor::<f64>::full(&[1, 16, s, s], 0.3);
        let (_, att) = ema.forward_with_attention(&x).unwrap();
        let per_group: Vec<f64> = att.data().chunks(s * s).map(|m| m[0]).collect();
        for (map, &v) in att.data().chunks(s * s).zip(&per_group) {
            assert!(map.iter().all(|&a| (a - v).abs() < 1e-12));
        }
        if let Some(prev) = &seen {
            for (a, b) in prev.iter().zip(&per_group) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        seen = Some(per_group);
    }
}
